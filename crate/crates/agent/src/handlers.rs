//! Inbound inter-node requests.

use std::sync::Arc;

use tracing::debug;

use crate::node::{lock, Node};
use crate::peers::PeerConn;
use crate::proto::PeerMsg;

impl Node {
    pub(crate) fn handle_peer(self: &Arc<Self>, conn: Arc<PeerConn>, id: Option<u64>, body: PeerMsg) {
        match body {
            PeerMsg::Hello { .. } => {}
            m @ PeerMsg::FeasReq { .. } => {
                let offer = self.handle_feas(m);
                conn.reply(id, PeerMsg::Offer { offer });
            }
            m @ PeerMsg::Commit { .. } => {
                let ok = self.handle_commit(m);
                conn.reply(id, PeerMsg::CommitAck { ok });
            }
            PeerMsg::Release { reservation_id } => self.handle_release(reservation_id),
            m @ PeerMsg::Deploy { .. } => {
                let node = self.clone();
                tokio::spawn(async move {
                    let results = node.handle_deploy(m).await;
                    conn.reply(id, PeerMsg::DeployAck { results });
                });
            }
            PeerMsg::Msg { to, env } => self.deliver_remote(to, env),
            PeerMsg::NameUpdate { table } | PeerMsg::NameAntientropy { table } => {
                if table.origin.id == self.me.id {
                    return;
                }
                // Tables from an incarnation membership already buried are
                // ignored, so a late frame cannot resurrect dead names.
                if let Some(m) = self.member(table.origin.id) {
                    if m.node.incarnation > table.origin.incarnation
                        || (m.node == table.origin && m.status == nefele_core::membership::Status::Dead)
                    {
                        return;
                    }
                }
                if lock(&self.router).names.merge(table) {
                    self.bump_names();
                }
            }
            PeerMsg::Sub { topics } => self.set_remote_interest(conn.node.id, topics),
            PeerMsg::Unsub { tenant, topic } => self.drop_remote_interest(conn.node.id, &(tenant, topic)),
            PeerMsg::Pub { tenant, topic, env } => self.deliver_pub(tenant, topic, env),
            PeerMsg::Kill { npid, signal } => {
                let error = self.handle_kill(npid, signal);
                conn.reply(id, PeerMsg::KillAck { error });
            }
            PeerMsg::Monitor { watcher, target } => {
                if self.is_local(&target) {
                    self.add_local_monitor(watcher, target);
                } else {
                    self.deliver_down(watcher, nefele_core::messaging::DownNotice::without_process(
                        target,
                        nefele_core::messaging::DownReason::Noproc,
                    ));
                }
            }
            PeerMsg::Down { watcher, notice } => self.receive_down(watcher, notice),
            PeerMsg::Ps { tenant } => {
                let processes = self.ps_local(tenant.as_deref());
                conn.reply(id, PeerMsg::PsResult { processes });
            }
            PeerMsg::Logs { npid, follow, last_n } => self.serve_logs(conn, id, npid, follow, last_n),
            other => debug!(kind = ?std::mem::discriminant(&other), "unexpected peer frame"),
        }
    }
}
