//! Throughput, latency, and multi-user suites. Each (configuration,
//! repetition) runs in a fresh simulation whose seed derives from the spec
//! seed and the cell label, so results are reproducible row by row.

use crate::nodes::{client_connect, ConnReader};
use crate::sim::{label_seed, timeout, ConnEnd, Network, Sim, SECOND};

use super::httpd::{http_get, spawn_file_server, HTTP_PORT};
use super::topology::{build_topology, start_services, SOCKS_PORT};
use super::{CarrierCell, ExperimentSpec, HarnessError, ResultRow};

/// Emulated-time budget per transfer.
pub const TRANSFER_TIMEOUT_S: u64 = 120;

/// Open a SOCKS connection from `user<i>`'s application to the file server.
async fn socks_to_server(net: &Network, user: &str) -> Result<ConnEnd, HarnessError> {
    let conn = net
        .connect(user, user, SOCKS_PORT)
        .await
        .map_err(|e| HarnessError::BadSpec(e.to_string()))?;
    let mut reader = ConnReader::new(conn);
    client_connect(&mut reader, "server", HTTP_PORT)
        .await
        .map_err(|e| HarnessError::BadSpec(format!("SOCKS connect failed: {e}")))?;
    let (conn, leftover) = reader.leftover();
    debug_assert!(leftover.is_empty());
    Ok(conn)
}

async fn timed_get(
    sim: &Sim,
    net: &Network,
    user: &str,
    name: &str,
    bytes: u64,
) -> Result<super::httpd::GetResult, HarnessError> {
    let conn = socks_to_server(net, user).await?;
    let res = timeout(sim, TRANSFER_TIMEOUT_S * SECOND, http_get(sim, &conn, name, bytes))
        .await
        .map_err(|_| HarnessError::TransferTimeout(TRANSFER_TIMEOUT_S))?
        .ok_or(HarnessError::RequestTimeout)?;
    conn.close();
    Ok(res)
}

/// `250 KiB * 8 / transfer_seconds`, averaged over the configured number of
/// runs; one row per configuration per repetition.
pub fn run_throughput(spec: &ExperimentSpec) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    let mut rows = Vec::new();
    for cell in spec.matrix.cells() {
        for rep in 0..spec.repetitions.repeats {
            let kbps = throughput_once(spec, &cell, rep)?;
            rows.push(ResultRow::new("throughput", &cell.label(), rep, "kbps", kbps));
        }
    }
    Ok(rows)
}

fn throughput_once(spec: &ExperimentSpec, cell: &CarrierCell, rep: u32) -> Result<f64, HarnessError> {
    let seed = label_seed(spec.seed, &format!("throughput:{}:rep{rep}", cell.label()));
    let spec = spec.clone();
    let cell = *cell;
    Sim::execute(move |sim| async move {
        let built = build_topology(&sim, &spec.topology, 1, seed);
        spawn_file_server(&sim, &built.net, "server");
        start_services(
            &sim,
            &built,
            spec.mode,
            move |_| cell,
            ("server".into(), HTTP_PORT),
            seed,
        );
        let mut kbps_sum = 0.0;
        for run in 0..spec.repetitions.throughput {
            let res = timed_get(
                &sim,
                &built.net,
                "user0",
                &format!("tp-{run}"),
                spec.transfer_bytes as u64,
            )
            .await?;
            if !res.sentinel_ok {
                return Err(HarnessError::UserFailure {
                    user: 0,
                    what: "sentinel mismatch".into(),
                });
            }
            let seconds = res.total_us as f64 / SECOND as f64;
            kbps_sum += (res.bytes as f64) * 8.0 / seconds / 1_000.0;
        }
        Ok(kbps_sum / f64::from(spec.repetitions.throughput))
    })
}

/// Time to first response byte, averaged over the configured request count
/// after one warm-up request (which also establishes the covert channel).
pub fn run_latency(spec: &ExperimentSpec) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    let mut rows = Vec::new();
    for cell in spec.matrix.cells() {
        for rep in 0..spec.repetitions.repeats {
            let ms = latency_once(spec, &cell, rep)?;
            rows.push(ResultRow::new("latency", &cell.label(), rep, "ttfb_ms", ms));
        }
    }
    Ok(rows)
}

fn latency_once(spec: &ExperimentSpec, cell: &CarrierCell, rep: u32) -> Result<f64, HarnessError> {
    let seed = label_seed(spec.seed, &format!("latency:{}:rep{rep}", cell.label()));
    let spec = spec.clone();
    let cell = *cell;
    Sim::execute(move |sim| async move {
        let built = build_topology(&sim, &spec.topology, 1, seed);
        spawn_file_server(&sim, &built.net, "server");
        start_services(
            &sim,
            &built,
            spec.mode,
            move |_| cell,
            ("server".into(), HTTP_PORT),
            seed,
        );
        timed_get(&sim, &built.net, "user0", "warmup", 1024).await?;
        let mut ttfb_sum = 0.0;
        for run in 0..spec.repetitions.latency {
            let res = timed_get(&sim, &built.net, "user0", &format!("lat-{run}"), 1024).await?;
            ttfb_sum += res.ttfb_us as f64 / 1_000.0;
        }
        Ok(ttfb_sum / f64::from(spec.repetitions.latency))
    })
}

/// Media cell used by the first users of a multi-user run.
pub const USERS_MEDIA_CELL: CarrierCell = CarrierCell {
    carrier: crate::channels::Carrier::Media,
    mode: crate::codec::EmbedMode::Add,
    block_size: 4134,
};

/// Tunnel cell used by the remaining users.
pub const USERS_TUNNEL_CELL: CarrierCell = CarrierCell {
    carrier: crate::channels::Carrier::Tunnel,
    mode: crate::codec::EmbedMode::Replace,
    block_size: 536,
};

/// Up to 50 concurrent users: at most five on the media carrier, the rest
/// tunneling. Every transfer must complete with an intact sentinel; any
/// user failure fails the run.
pub fn run_users(spec: &ExperimentSpec, n: u32) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    if !(1..=50).contains(&n) {
        return Err(HarnessError::BadSpec("user count must be 1..=50".into()));
    }
    let seed = label_seed(spec.seed, &format!("users:{n}"));
    let spec2 = spec.clone();
    let outcomes = Sim::execute(move |sim| async move {
        let built = build_topology(&sim, &spec2.topology, n, seed);
        spawn_file_server(&sim, &built.net, "server");
        let cell_for_user = |u: u32| {
            if u < 5 {
                USERS_MEDIA_CELL
            } else {
                USERS_TUNNEL_CELL
            }
        };
        start_services(
            &sim,
            &built,
            spec2.mode,
            cell_for_user,
            ("server".into(), HTTP_PORT),
            seed,
        );
        let mut tasks = Vec::new();
        for u in 0..n {
            let sim2 = sim.clone();
            let net = built.net.clone();
            let bytes = spec2.transfer_bytes as u64;
            tasks.push(sim.spawn(async move {
                let user = format!("user{u}");
                let res = timed_get(&sim2, &net, &user, &format!("u{u}"), bytes).await?;
                Ok::<_, HarnessError>((res.ttfb_us, res.total_us, res.bytes, res.sentinel_ok))
            }));
        }
        let mut outcomes = Vec::new();
        for (u, t) in tasks.into_iter().enumerate() {
            outcomes.push((u as u32, t.await));
        }
        outcomes
    });

    let mut rows = Vec::new();
    for (u, outcome) in outcomes {
        let (ttfb_us, total_us, bytes, sentinel_ok) = outcome.map_err(|e| {
            HarnessError::UserFailure {
                user: u,
                what: e.to_string(),
            }
        })?;
        if !sentinel_ok {
            return Err(HarnessError::UserFailure {
                user: u,
                what: "sentinel mismatch".into(),
            });
        }
        let cell = if u < 5 { USERS_MEDIA_CELL } else { USERS_TUNNEL_CELL };
        let seconds = total_us as f64 / SECOND as f64;
        rows.push(ResultRow::new(
            "users",
            &cell.label(),
            u,
            "kbps",
            bytes as f64 * 8.0 / seconds / 1_000.0,
        ));
        rows.push(ResultRow::new(
            "users",
            &cell.label(),
            u,
            "ttfb_ms",
            ttfb_us as f64 / 1_000.0,
        ));
    }
    Ok(rows)
}
