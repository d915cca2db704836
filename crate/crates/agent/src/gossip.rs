//! UDP driver for the membership state machine, and the reactions to
//! membership events.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use nefele_core::frame;
use nefele_core::membership::{GossipMsg, MemberEvent, Outbound};
use nefele_core::NodeId;
use tokio::net::UdpSocket;
use tokio::sync::mpsc;
use tracing::{debug, info, warn};

use crate::node::{lock, Node};
use crate::proto::PeerMsg;

const ANTI_ENTROPY: Duration = Duration::from_secs(1);

async fn send_all(sock: &UdpSocket, out: Vec<Outbound>) {
    for o in out {
        let bytes = match frame::encode(&o.msg) {
            Ok(b) => b,
            Err(e) => {
                warn!(error = %e, "unencodable gossip message");
                continue;
            }
        };
        let addr: SocketAddr = match o.to.parse() {
            Ok(a) => a,
            Err(_) => match tokio::net::lookup_host(&o.to).await.ok().and_then(|mut it| it.next()) {
                Some(a) => a,
                None => {
                    debug!(to = %o.to, "unresolvable gossip address");
                    continue;
                }
            },
        };
        if let Err(e) = sock.send_to(&bytes, addr).await {
            debug!(%addr, error = %e, "gossip send");
        }
    }
}

impl Node {
    pub async fn run_gossip(self: Arc<Self>, sock: UdpSocket, mut out_rx: mpsc::UnboundedReceiver<Vec<Outbound>>) {
        let period = Duration::from_millis(self.cfg.swim.protocol_period_ms);
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut anti = tokio::time::interval(ANTI_ENTROPY);
        let mut shutdown = self.shutdown.subscribe();
        let mut buf = vec![0u8; 64 * 1024];
        let joined = lock(&self.swim).join(&self.cfg.seeds);
        send_all(&sock, joined).await;
        loop {
            let out = tokio::select! {
                _ = tick.tick() => {
                    let now = self.elapsed();
                    lock(&self.swim).tick(now)
                }
                r = sock.recv_from(&mut buf) => match r {
                    Ok((n, _)) => match frame::decode_datagram::<GossipMsg>(&buf[..n]) {
                        Ok(msg) => {
                            let now = self.elapsed();
                            lock(&self.swim).handle(msg, now)
                        }
                        Err(_) => {
                            lock(&self.swim).note_malformed();
                            Vec::new()
                        }
                    },
                    Err(e) => {
                        debug!(error = %e, "gossip recv");
                        Vec::new()
                    }
                },
                Some(out) = out_rx.recv() => out,
                _ = anti.tick() => {
                    self.anti_entropy();
                    Vec::new()
                }
                _ = shutdown.changed() => {
                    let bye = lock(&self.swim).leave();
                    send_all(&sock, bye).await;
                    return;
                }
            };
            send_all(&sock, out).await;
            let events = lock(&self.swim).drain_events();
            for ev in events {
                self.on_member_event(ev).await;
            }
        }
    }

    fn anti_entropy(self: &Arc<Self>) {
        let (table, topics) = {
            let r = lock(&self.router);
            (r.names.snapshot(), r.topics())
        };
        self.broadcast(PeerMsg::NameAntientropy { table });
        self.broadcast(PeerMsg::Sub { topics });
    }

    async fn on_member_event(self: &Arc<Self>, ev: MemberEvent) {
        match ev {
            MemberEvent::Joined(node) => {
                info!(%node, "member joined");
                let (table, topics) = {
                    let r = lock(&self.router);
                    (r.names.snapshot(), r.topics())
                };
                let me = self.clone();
                tokio::spawn(async move {
                    let _ = me.peer_send(node.id, PeerMsg::NameUpdate { table }).await;
                    let _ = me.peer_send(node.id, PeerMsg::Sub { topics }).await;
                });
            }
            MemberEvent::Suspected(node) => debug!(%node, "member suspected"),
            MemberEvent::Dead(node) => {
                info!(%node, "member dead");
                self.peers.disconnect(node.id).await;
                self.on_node_dead(node);
            }
        }
    }

    fn on_node_dead(self: &Arc<Self>, node: NodeId) {
        self.purge_node(node);
        let mut procs = lock(&self.procs);
        procs.drop_watchers_on(node.id);
    }
}
