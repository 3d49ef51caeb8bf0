//! Builds emulated deployments from a [`TopologySpec`].
//!
//! Node names: `user<i>` (application host and its local gateway),
//! `p<i>` proxies, `bridge`, `server`. Every user links to every proxy
//! (and, in PT mode, straight to the bridge); proxies form a mesh and link
//! to the bridge; the bridge links to the server.

use std::rc::Rc;

use crate::channels::ChannelConfig;
use crate::nodes::{
    gateway_serve, Deployment, GatewayConfig, Node, NodeConfig, NodeIdentity,
};
use crate::multipath::{PathSpec, SplitPolicy};
use crate::sim::{LinkParams, Network, Sim};

use super::{CarrierCell, DeployMode, TopologySpec};

pub const BRIDGE_ID: u32 = 100;
pub const SOCKS_PORT: u16 = 1080;
pub const PLAIN_PORT: u16 = 1090;

/// A built deployment, ready for gateways and traffic.
pub struct BuiltTopology {
    pub net: Network,
    pub deployment: Rc<Deployment>,
    pub users: u32,
    pub proxies: u32,
}

impl BuiltTopology {
    pub fn user(&self, i: u32) -> String {
        format!("user{i}")
    }

    pub fn proxy_name(&self, i: u32) -> String {
        format!("p{i}")
    }
}

fn link(spec: &TopologySpec, delay_ms: u64) -> LinkParams {
    LinkParams {
        delay_us: delay_ms * 1_000,
        jitter_us: spec.jitter_ms * 1_000,
        bandwidth_kbps: spec.bandwidth_kbps,
        loss_rate: spec.loss_rate,
    }
}

/// Instantiate nodes and links (no services yet) for `users` users.
pub fn build_topology(sim: &Sim, spec: &TopologySpec, users: u32, seed: u64) -> BuiltTopology {
    let net = Network::new(sim, seed);
    net.add_node("bridge");
    net.add_node("server");
    net.add_link("bridge", "server", link(spec, spec.bridge_server_delay_ms));

    let mut nodes = vec![NodeIdentity {
        node_id: BRIDGE_ID,
        name: "bridge".into(),
    }];
    for p in 1..=spec.proxies {
        let name = format!("p{p}");
        net.add_node(&name);
        nodes.push(NodeIdentity {
            node_id: p,
            name: name.clone(),
        });
        net.add_link(&name, "bridge", link(spec, spec.proxy_bridge_delay_ms));
    }
    for a in 1..=spec.proxies {
        for b in (a + 1)..=spec.proxies {
            net.add_link(
                &format!("p{a}"),
                &format!("p{b}"),
                link(spec, spec.proxy_proxy_delay_ms),
            );
        }
    }
    for u in 0..users {
        let name = format!("user{u}");
        net.add_node(&name);
        for p in 1..=spec.proxies {
            net.add_link(&name, &format!("p{p}"), link(spec, spec.user_proxy_delay_ms));
        }
        // Direct access for pluggable-transport mode: the same physical
        // distance as user->proxy->bridge.
        net.add_link(
            &name,
            "bridge",
            link(spec, spec.user_proxy_delay_ms + spec.proxy_bridge_delay_ms),
        );
    }

    BuiltTopology {
        net,
        deployment: Rc::new(Deployment { nodes }),
        users,
        proxies: spec.proxies,
    }
}

fn channel_template(cell: &CarrierCell, seed: u64) -> ChannelConfig {
    ChannelConfig {
        carrier: cell.carrier,
        mode: cell.mode,
        block_size: cell.block_size,
        prng_seed: seed,
        psk: [0x42; 32],
        ..ChannelConfig::default()
    }
}

/// Start proxies and the bridge for the given mode, then a gateway per
/// user. Returns the path each user routes over.
pub fn start_services(
    sim: &Sim,
    built: &BuiltTopology,
    mode: DeployMode,
    cell_for_user: impl Fn(u32) -> CarrierCell,
    upstream: (String, u16),
    seed: u64,
) -> Vec<Rc<Node>> {
    // Relay template: carriers adapt to the dialer, so any cell works as a
    // template; use the first user's.
    let relay_template = channel_template(&cell_for_user(0), seed);
    let (exit_proxy, relay_count) = match mode {
        DeployMode::Pt => (None, 0),
        DeployMode::Standalone => (Some(built.proxies), built.proxies),
        DeployMode::Combined => (None, built.proxies),
    };
    for p in 1..=relay_count {
        let upstream = if exit_proxy == Some(p) {
            Some(upstream.clone())
        } else {
            None
        };
        Node::start(
            sim,
            &built.net,
            &built.deployment,
            NodeConfig {
                identity: NodeIdentity {
                    node_id: p,
                    name: built.proxy_name(p),
                },
                channel_template: relay_template.clone(),
                upstream,
                accept_covert: true,
            },
        );
    }
    if !matches!(mode, DeployMode::Standalone) {
        Node::start(
            sim,
            &built.net,
            &built.deployment,
            NodeConfig {
                identity: NodeIdentity {
                    node_id: BRIDGE_ID,
                    name: "bridge".into(),
                },
                channel_template: relay_template,
                upstream: Some(upstream),
                accept_covert: true,
            },
        );
    }

    let mut gateways = Vec::new();
    for u in 0..built.users {
        let cell = cell_for_user(u);
        let template = channel_template(&cell, crate::sim::label_seed(seed, &format!("user{u}")));
        let gw = Node::start(
            sim,
            &built.net,
            &built.deployment,
            NodeConfig {
                identity: NodeIdentity {
                    node_id: 1_000 + u,
                    name: built.user(u),
                },
                channel_template: template,
                upstream: None,
                accept_covert: false,
            },
        );
        let (paths, terminus) = user_route(built, mode, u);
        gateway_serve(
            &gw,
            GatewayConfig {
                socks_port: SOCKS_PORT,
                plain_port: Some(PLAIN_PORT),
                paths,
                policy: SplitPolicy::RoundRobin,
                terminus,
            },
        )
        .expect("gateway configuration is valid");
        gateways.push(gw);
    }
    gateways
}

/// Default route for user `u` under the mode: PT heads straight to the
/// bridge; proxied modes spread users over proxies round-robin.
fn user_route(built: &BuiltTopology, mode: DeployMode, u: u32) -> (Vec<PathSpec>, u32) {
    match mode {
        DeployMode::Pt => (vec![PathSpec::new(0, vec![BRIDGE_ID])], BRIDGE_ID),
        DeployMode::Standalone => {
            let p = 1 + (u % built.proxies);
            (vec![PathSpec::new(0, vec![p])], p)
        }
        DeployMode::Combined => {
            let p = 1 + (u % built.proxies);
            (vec![PathSpec::new(0, vec![p])], BRIDGE_ID)
        }
    }
}

/// Plain TCP-like port forwarder (no covert layer): the unprotected
/// baseline for attack calibration and overhead comparisons.
pub fn spawn_port_forwarder(
    sim: &Sim,
    net: &Network,
    node: &str,
    port: u16,
    target_host: &str,
    target_port: u16,
) {
    let listener = net.listen(node, port);
    let sim2 = sim.clone();
    let net = net.clone();
    let node = node.to_string();
    let target_host = target_host.to_string();
    sim.spawn(async move {
        while let Some(conn) = listener.accept().await {
            let sim3 = sim2.clone();
            let net = net.clone();
            let node = node.clone();
            let target_host = target_host.clone();
            sim2.spawn(async move {
                match net.connect(&node, &target_host, target_port).await {
                    Ok(upstream) => {
                        let pump = |from: crate::sim::ConnEnd, to: crate::sim::ConnEnd| {
                            sim3.spawn(async move {
                                while let Some(chunk) = from.recv().await {
                                    to.send(chunk);
                                }
                                to.close();
                            });
                        };
                        pump(conn.clone(), upstream.clone());
                        pump(upstream, conn);
                    }
                    Err(_) => conn.close(),
                }
            });
        }
    });
}
