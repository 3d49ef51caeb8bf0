//! The adversary experiments.
//!
//! **Active**: a delay-capable tap on the user-side link injects the
//! temporal watermark into the user's traffic before it enters the covert
//! layer; the detector reads the decapsulated flow on the exit side. The
//! detection threshold is calibrated on unprotected (plainly forwarded)
//! flows at a 5% false-positive target, then applied unchanged to every
//! protected configuration. Workload seeds are shared across
//! configurations, so differences are attributable to the carrier geometry
//! alone.
//!
//! **Passive**: eight users share a pool of eight proxies over tunnel
//! channels while the adversary observes a single proxy's egress. With K=1
//! the observed egress carries one user's whole flow; with K=4 it carries
//! quarter-flows of several users blended into one channel. The same
//! per-trial workloads drive both conditions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attacks::{
    calibrate_threshold, compute_auc, detect_watermark, extract_features, resistance_verdict,
    train_correlator, AttackMetrics, FeatureVector, FlowTrace, Vantage, Verdict, WatermarkPattern,
    WindowConfig,
};
use crate::nodes::{
    client_connect, gateway_serve, ConnReader, GatewayConfig, Node, NodeConfig, NodeIdentity,
};
use crate::multipath::{PathSpec, SplitPolicy};
use crate::sim::{child_rng, label_seed, timeout, LinkParams, Network, Sim, TrafficDir, SECOND};

use super::httpd::{spawn_file_server, spawn_sink_server, HTTP_PORT, SINK_PORT};
use super::report::AttackRecord;
use super::topology::{build_topology, spawn_port_forwarder, BRIDGE_ID, SOCKS_PORT};
use super::{CarrierCell, ExperimentSpec, HarnessError, ResultRow};

const FORWARD_PORT: u16 = 2080;

pub struct AttackSuiteOutput {
    pub rows: Vec<ResultRow>,
    pub records: Vec<AttackRecord>,
    pub traces: Vec<(String, FlowTrace)>,
}

/// Run the passive matrix {K=1, K=4} and the active matrix
/// {ADD, REPLACE} x block sizes, emitting AUC / accuracy / FPR rows and
/// resistance verdicts.
pub fn run_attack_suite(spec: &ExperimentSpec) -> Result<AttackSuiteOutput, HarnessError> {
    spec.validate()?;
    let mut out = AttackSuiteOutput {
        rows: Vec::new(),
        records: Vec::new(),
        traces: Vec::new(),
    };
    run_active(spec, &mut out)?;
    run_passive(spec, &mut out)?;
    Ok(out)
}

fn watermark_pattern(spec: &ExperimentSpec) -> WatermarkPattern {
    let mut pattern = WatermarkPattern::seeded(
        spec.attack.watermark_bits as usize,
        label_seed(spec.seed, "watermark"),
    );
    pattern.slot_us = spec.attack.watermark_slot_ms * 1_000;
    pattern.delay_us = spec.attack.watermark_delay_ms * 1_000;
    pattern
}

/// Per-trial upload rate in bytes/second, shared by every configuration
/// (common random numbers). Half the trials draw log-uniform over the full
/// span; the other half concentrate where the carrier capacities sit, so
/// adjacent configurations see plenty of marginal traffic.
fn trial_rate(spec: &ExperimentSpec, trial: u32) -> f64 {
    let mut rng = child_rng(spec.seed, &format!("active-wl:{trial}"));
    if rng.random_bool(0.5) {
        let lo = (12_000f64).ln();
        let hi = (120_000f64).ln();
        rng.random_range(lo..hi).exp()
    } else {
        rng.random_range(16_000.0..36_000.0)
    }
}

struct ActiveChain {
    protected: Option<CarrierCell>,
}

/// One active trial: returns the detector score on the exit-side trace.
fn active_trial(
    spec: &ExperimentSpec,
    chain: &ActiveChain,
    trial: u32,
    marked: bool,
) -> Result<(f64, Option<FlowTrace>), HarnessError> {
    let pattern = watermark_pattern(spec);
    let rate = trial_rate(spec, trial);
    // The seed is shared across configurations so trials are paired:
    // identical workload timing and cover randomness, differing only in
    // the carrier geometry under test.
    let seed = label_seed(spec.seed, &format!("active:{trial}:{marked}"));
    let spec2 = spec.clone();
    let protected = chain.protected;
    Sim::execute(move |sim| async move {
        let topo = &spec2.topology;
        let net = Network::new(&sim, seed);
        for n in ["user", "entry", "bridge", "server"] {
            net.add_node(n);
        }
        let mk = |ms: u64| LinkParams {
            delay_us: ms * 1_000,
            jitter_us: topo.jitter_ms * 1_000,
            bandwidth_kbps: topo.bandwidth_kbps,
            loss_rate: 0.0,
        };
        net.add_link("user", "entry", mk(topo.user_proxy_delay_ms));
        net.add_link(
            "entry",
            "bridge",
            mk(topo.user_proxy_delay_ms + topo.proxy_bridge_delay_ms),
        );
        net.add_link("bridge", "server", mk(topo.bridge_server_delay_ms));
        net.add_link(
            "entry",
            "server",
            mk(topo.user_proxy_delay_ms + topo.proxy_bridge_delay_ms + topo.bridge_server_delay_ms),
        );
        spawn_sink_server(&sim, &net, "server");

        let (exit_tap, app_port) = match protected {
            Some(cell) => {
                let deployment = std::rc::Rc::new(crate::nodes::Deployment {
                    nodes: vec![NodeIdentity {
                        node_id: BRIDGE_ID,
                        name: "bridge".into(),
                    }],
                });
                let template = crate::channels::ChannelConfig {
                    carrier: cell.carrier,
                    mode: cell.mode,
                    block_size: cell.block_size,
                    prng_seed: seed,
                    psk: [0x42; 32],
                    ..crate::channels::ChannelConfig::default()
                };
                Node::start(
                    &sim,
                    &net,
                    &deployment,
                    NodeConfig {
                        identity: NodeIdentity {
                            node_id: BRIDGE_ID,
                            name: "bridge".into(),
                        },
                        channel_template: template.clone(),
                        upstream: Some(("server".into(), SINK_PORT)),
                        accept_covert: true,
                    },
                );
                let gw = Node::start(
                    &sim,
                    &net,
                    &deployment,
                    NodeConfig {
                        identity: NodeIdentity {
                            node_id: 0,
                            name: "entry".into(),
                        },
                        channel_template: template,
                        upstream: None,
                        accept_covert: false,
                    },
                );
                gateway_serve(
                    &gw,
                    GatewayConfig {
                        socks_port: SOCKS_PORT,
                        plain_port: None,
                        paths: vec![PathSpec::new(0, vec![BRIDGE_ID])],
                        policy: SplitPolicy::RoundRobin,
                        terminus: BRIDGE_ID,
                    },
                )
                .expect("attack gateway config");
                (net.tap("bridge", "server", None), SOCKS_PORT)
            }
            None => {
                spawn_port_forwarder(&sim, &net, "entry", FORWARD_PORT, "server", SINK_PORT);
                (net.tap("entry", "server", None), FORWARD_PORT)
            }
        };

        // Application connection (SOCKS for the protected chain).
        let conn = net
            .connect("user", "entry", app_port)
            .await
            .map_err(|e| HarnessError::BadSpec(e.to_string()))?;
        let conn = if protected.is_some() {
            let mut reader = ConnReader::new(conn);
            client_connect(&mut reader, "server", SINK_PORT)
                .await
                .map_err(|e| HarnessError::BadSpec(format!("SOCKS failed: {e}")))?;
            let (conn, _) = reader.leftover();
            conn
        } else {
            conn
        };

        // Censor's active tap on the user-side link.
        let epoch = sim.now();
        if marked {
            net.set_mark("user", "entry", Some(pattern.to_mark_spec(epoch)));
        }

        // Upload at the trial rate for the configured window. Writes are
        // aligned to the largest block size so no carrier pays a padding
        // penalty that would skew the capacity ordering.
        let chunk = vec![0xA5u8; 4134];
        let interval = ((chunk.len() as f64) * SECOND as f64 / rate) as u64;
        let deadline = epoch + spec2.attack.active_seconds * SECOND;
        let mut next = epoch;
        while next < deadline {
            sim.sleep_until(next).await;
            conn.send(chunk.clone());
            next += interval.max(1_000);
        }
        sim.sleep(3 * SECOND).await;
        conn.close();

        let trace = FlowTrace::from_tap(
            u64::from(trial),
            Vantage::ExitSide,
            &exit_tap
                .snapshot()
                .into_iter()
                .filter(|r| r.dir == TrafficDir::Out)
                .collect::<Vec<_>>(),
            None,
        );
        let score = match detect_watermark(&trace, &pattern) {
            Ok(s) => s,
            Err(_) => -1.0, // too little exit traffic to even test
        };
        let keep_trace = (trial == 0).then_some(trace);
        Ok((score, keep_trace))
    })
}

fn run_active(spec: &ExperimentSpec, out: &mut AttackSuiteOutput) -> Result<(), HarnessError> {
    let trials = spec.attack.active_trials;

    // Calibration on the unprotected chain fixes the operating point.
    let direct = ActiveChain { protected: None };
    let mut clean_scores = Vec::new();
    let mut marked_scores = Vec::new();
    for trial in 0..trials {
        let (clean, trace) = active_trial(spec, &direct, trial, false)?;
        clean_scores.push(clean);
        if let Some(t) = trace {
            out.traces.push(("active-direct-clean-exit".into(), t));
        }
        let (marked, trace) = active_trial(spec, &direct, trial, true)?;
        marked_scores.push(marked);
        if let Some(t) = trace {
            out.traces.push(("active-direct-marked-exit".into(), t));
        }
    }
    let theta = calibrate_threshold(&clean_scores, 0.05);
    let cal_fp = clean_scores.iter().filter(|&&s| s > theta).count() as u64;
    let cal_tp = marked_scores.iter().filter(|&&s| s > theta).count() as u64;
    let n = u64::from(trials);
    let cal = AttackMetrics {
        auc: auc_of(&marked_scores, &clean_scores)?,
        ..AttackMetrics::from_decisions(cal_tp, n, cal_fp, n)
    };
    push_active_rows(out, "calibration-direct", &cal, None);

    // Protected matrix: media modes x block sizes.
    for mode in &spec.matrix.media_modes {
        for &block_size in &spec.matrix.block_sizes {
            let cell = CarrierCell::media(*mode, block_size);
            let chain = ActiveChain {
                protected: Some(cell),
            };
            let mut marked_scores = Vec::new();
            let mut clean_scores = Vec::new();
            for trial in 0..trials {
                let (clean, trace) = active_trial(spec, &chain, trial, false)?;
                clean_scores.push(clean);
                if let Some(t) = trace {
                    out.traces.push((format!("active-{}-clean-exit", cell.label()), t));
                }
                let (marked, trace) = active_trial(spec, &chain, trial, true)?;
                marked_scores.push(marked);
                if let Some(t) = trace {
                    out.traces.push((format!("active-{}-marked-exit", cell.label()), t));
                }
            }
            let tp = marked_scores.iter().filter(|&&s| s > theta).count() as u64;
            let fp = clean_scores.iter().filter(|&&s| s > theta).count() as u64;
            let metrics = AttackMetrics {
                auc: auc_of(&marked_scores, &clean_scores)?,
                ..AttackMetrics::from_decisions(tp, n, fp, n)
            };
            let verdict = resistance_verdict(&metrics)?;
            push_active_rows(out, &cell.label(), &metrics, Some(verdict));
        }
    }
    Ok(())
}

fn auc_of(pos: &[f64], neg: &[f64]) -> Result<f64, HarnessError> {
    let mut scores = pos.to_vec();
    scores.extend_from_slice(neg);
    let mut labels = vec![true; pos.len()];
    labels.extend(std::iter::repeat_n(false, neg.len()));
    Ok(compute_auc(&scores, &labels)?)
}

fn push_active_rows(
    out: &mut AttackSuiteOutput,
    config: &str,
    metrics: &AttackMetrics,
    verdict: Option<Verdict>,
) {
    let suite = "attack_active";
    out.rows
        .push(ResultRow::new(suite, config, 0, "accuracy", metrics.accuracy));
    out.rows.push(ResultRow::new(suite, config, 0, "fpr", metrics.fpr));
    out.rows.push(ResultRow::new(suite, config, 0, "auc", metrics.auc));
    if let Some(v) = verdict {
        let as_num = match v {
            Verdict::Resistant => 1.0,
            Verdict::Vulnerable => 0.0,
        };
        out.rows
            .push(ResultRow::new(suite, config, 0, "resistant", as_num));
    }
    out.records.push(AttackRecord {
        auc: metrics.auc,
        accuracy: metrics.accuracy,
        fpr: metrics.fpr,
        n_positive: metrics.n_positive,
        n_negative: metrics.n_negative,
        config: config.to_string(),
        verdict: verdict.map(|v| {
            match v {
                Verdict::Resistant => "RESISTANT",
                Verdict::Vulnerable => "VULNERABLE",
            }
            .to_string()
        }),
    });
}

/// Branch proxies for user `u` in the K=4 condition: four distinct proxies
/// out of 1..=7, rendezvous fixed at proxy 8.
fn k4_branches(spec: &ExperimentSpec, trial: u32, user: u32) -> Vec<u32> {
    let mut rng = child_rng(spec.seed, &format!("branches:{trial}:{user}"));
    let mut pool: Vec<u32> = (1..=7).collect();
    pool.shuffle(&mut rng);
    let mut branches: Vec<u32> = pool[..4].to_vec();
    branches.sort_unstable();
    branches
}

struct PassiveTrial {
    entries: Vec<FlowTrace>,
    exit: FlowTrace,
    matched: Vec<bool>,
}

fn passive_trial(spec: &ExperimentSpec, k: u32, trial: u32) -> Result<PassiveTrial, HarnessError> {
    let users = spec.attack.passive_users;
    let seed = label_seed(spec.seed, &format!("passive:k{k}:{trial}"));
    let spec2 = spec.clone();
    Sim::execute(move |sim| async move {
        let mut topo = spec2.topology;
        topo.proxies = 8;
        let built = build_topology(&sim, &topo, users, seed);
        spawn_file_server(&sim, &built.net, "server");

        let cell = CarrierCell::tunnel(536);
        let template = crate::channels::ChannelConfig {
            carrier: cell.carrier,
            mode: cell.mode,
            block_size: cell.block_size,
            prng_seed: seed,
            psk: [0x42; 32],
            ..crate::channels::ChannelConfig::default()
        };
        for p in 1..=8u32 {
            Node::start(
                &sim,
                &built.net,
                &built.deployment,
                NodeConfig {
                    identity: NodeIdentity {
                        node_id: p,
                        name: built.proxy_name(p),
                    },
                    channel_template: template.clone(),
                    upstream: None,
                    accept_covert: true,
                },
            );
        }
        Node::start(
            &sim,
            &built.net,
            &built.deployment,
            NodeConfig {
                identity: NodeIdentity {
                    node_id: BRIDGE_ID,
                    name: "bridge".into(),
                },
                channel_template: template.clone(),
                upstream: Some(("server".into(), HTTP_PORT)),
                accept_covert: true,
            },
        );

        // Per-user routes plus their user-side taps.
        let mut user_taps = Vec::new();
        let mut matched = Vec::new();
        for u in 0..users {
            let (paths, first_hops, is_matched) = match k {
                1 => {
                    let p = 1 + (u % 8);
                    (vec![PathSpec::new(0, vec![p])], vec![p], p == 1)
                }
                _ => {
                    let branches = k4_branches(&spec2, trial, u);
                    let paths: Vec<PathSpec> = branches
                        .iter()
                        .enumerate()
                        .map(|(i, &b)| PathSpec::new(i as u16, vec![b, 8]))
                        .collect();
                    let is_matched = branches.contains(&1);
                    (paths, branches, is_matched)
                }
            };
            matched.push(is_matched);
            let gw = Node::start(
                &sim,
                &built.net,
                &built.deployment,
                NodeConfig {
                    identity: NodeIdentity {
                        node_id: 1_000 + u,
                        name: built.user(u),
                    },
                    channel_template: crate::channels::ChannelConfig {
                        prng_seed: label_seed(seed, &format!("user{u}")),
                        ..template.clone()
                    },
                    upstream: None,
                    accept_covert: false,
                },
            );
            gateway_serve(
                &gw,
                GatewayConfig {
                    socks_port: SOCKS_PORT,
                    plain_port: None,
                    paths,
                    policy: SplitPolicy::RoundRobin,
                    terminus: BRIDGE_ID,
                },
            )
            .expect("passive gateway config");
            let taps: Vec<_> = first_hops
                .iter()
                .map(|&p| built.net.tap(&built.user(u), &built.proxy_name(p), None))
                .collect();
            user_taps.push(taps);
        }

        // Observed proxy p1's egress.
        let exit_tap = match k {
            1 => built.net.tap("p1", "bridge", None),
            _ => built.net.tap("p1", "p8", None),
        };

        // Workloads: a few seeded downloads per user.
        let mut tasks = Vec::new();
        for u in 0..users {
            let sim2 = sim.clone();
            let net = built.net.clone();
            let wl_seed = label_seed(spec2.seed, &format!("passive-wl:{trial}:{u}"));
            tasks.push(sim.spawn(async move {
                let mut rng = child_rng(wl_seed, "downloads");
                let count = rng.random_range(2..=4u32);
                for d in 0..count {
                    let gap: u64 = rng.random_range(300_000..3_000_000);
                    sim2.sleep(gap).await;
                    let size: u64 = rng.random_range(20_000..120_000);
                    let user = format!("user{u}");
                    let Ok(conn) = net.connect(&user, &user, SOCKS_PORT).await else {
                        return false;
                    };
                    let mut reader = ConnReader::new(conn);
                    if client_connect(&mut reader, "server", HTTP_PORT).await.is_err() {
                        return false;
                    }
                    let (conn, _) = reader.leftover();
                    let ok = timeout(
                        &sim2,
                        60 * SECOND,
                        super::httpd::http_get(&sim2, &conn, &format!("u{u}-d{d}"), size),
                    )
                    .await;
                    conn.close();
                    if !matches!(ok, Ok(Some(res)) if res.sentinel_ok) {
                        return false;
                    }
                }
                true
            }));
        }
        for (u, t) in tasks.into_iter().enumerate() {
            if !t.await {
                return Err(HarnessError::UserFailure {
                    user: u as u32,
                    what: format!("passive workload transfer failed (k={k}, trial={trial})"),
                });
            }
        }
        sim.sleep(2 * SECOND).await;

        let entries: Vec<FlowTrace> = user_taps
            .iter()
            .enumerate()
            .map(|(u, taps)| {
                let mut records = Vec::new();
                for tap in taps {
                    records.extend(tap.snapshot());
                }
                FlowTrace::from_tap(u as u64, Vantage::UserSide, &records, None)
            })
            .collect();
        let exit = FlowTrace::from_tap(1_000, Vantage::ProxySide, &exit_tap.snapshot(), None);
        Ok(PassiveTrial {
            entries,
            exit,
            matched,
        })
    })
}

fn run_passive(spec: &ExperimentSpec, out: &mut AttackSuiteOutput) -> Result<(), HarnessError> {
    let window = WindowConfig::default();
    for k in [1u32, 4] {
        let mut pairs: Vec<(FeatureVector, FeatureVector, bool)> = Vec::new();
        for trial in 0..spec.attack.passive_trials {
            let result = passive_trial(spec, k, trial)?;
            if result.exit.records.is_empty() {
                continue;
            }
            let exit_features = extract_features(&result.exit, &window)?;
            for (u, entry) in result.entries.iter().enumerate() {
                if entry.records.is_empty() {
                    continue;
                }
                let entry_features = extract_features(entry, &window)?;
                pairs.push((entry_features, exit_features.clone(), result.matched[u]));
            }
            if trial == 0 {
                out.traces
                    .push((format!("passive-k{k}-entry-user0"), result.entries[0].clone()));
                out.traces.push((format!("passive-k{k}-exit-p1"), result.exit));
            }
        }
        let report = train_correlator(&pairs, label_seed(spec.seed, &format!("passive-train-k{k}")))?;
        let n_pos = report.test_labels.iter().filter(|&&l| l).count() as u64;
        let n_neg = report.test_labels.len() as u64 - n_pos;
        let config = format!("passive-k{k}");
        out.rows
            .push(ResultRow::new("attack_passive", &config, 0, "auc", report.test_auc));
        out.rows.push(ResultRow::new(
            "attack_passive",
            &config,
            0,
            "n_pairs",
            pairs.len() as f64,
        ));
        out.records.push(AttackRecord {
            auc: report.test_auc,
            accuracy: 0.0,
            fpr: 0.0,
            n_positive: n_pos,
            n_negative: n_neg,
            config,
            verdict: None,
        });
    }
    Ok(())
}
