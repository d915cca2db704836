//! Admission pipeline: a FIFO of spawn requests drained by a bounded pool
//! of workers, each running fan-out, ranking, commit, and deploy.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use nefele_core::placement::{rank_and_assign, task_classes, Assignment, Offer, PlacementPlan, Rejection};
use nefele_core::{Npid, ProcessState, SpawnRequest, TaskSpec};
use tokio::sync::{mpsc, watch};
use tracing::{debug, info};
use uuid::Uuid;

use crate::node::{lock, unix_us, Committed, Node};
use crate::peers::PeerError;
use crate::proto::{DeployResult, PeerMsg, RequestState, RequestStatus};

/// Committed allocations whose deploy never arrived are returned after this.
const COMMITTED_GRACE: Duration = Duration::from_secs(30);
const DEPLOY_TIMEOUT_SLACK: Duration = Duration::from_secs(5);

pub struct RequestEntry {
    pub status: RequestStatus,
    done: watch::Sender<bool>,
}

enum CommitFailure {
    Expired,
    Lost(u32),
}

impl Node {
    /// Queues a request for placement. Resubmitting a known request id
    /// returns its current status without queueing it again.
    pub fn submit(&self, req: SpawnRequest) -> Result<RequestStatus, Rejection> {
        req.validate().map_err(|e| Rejection::Invalid { detail: e.to_string() })?;
        let mut requests = lock(&self.requests);
        if let Some(e) = requests.get(&req.request_id) {
            return Ok(e.status.clone());
        }
        let status = RequestStatus {
            request_id: req.request_id,
            state: RequestState::Pending,
            admission_node: self.me.id,
            tasks: req.tasks.len(),
            npids: Vec::new(),
            os_pids: Vec::new(),
            rejection: None,
            reason: None,
            submitted_us: unix_us(),
            decided_us: None,
            deployed_us: None,
        };
        requests.insert(req.request_id, RequestEntry { status: status.clone(), done: watch::channel(false).0 });
        drop(requests);
        let _ = self.admit_tx.send(req);
        Ok(status)
    }

    pub fn request_status(&self, id: &Uuid) -> Option<RequestStatus> {
        lock(&self.requests).get(id).map(|e| e.status.clone())
    }

    /// Waits until the request is placed or rejected.
    pub async fn wait_request(&self, id: &Uuid) -> Option<RequestStatus> {
        let mut rx = lock(&self.requests).get(id)?.done.subscribe();
        let _ = rx.wait_for(|d| *d).await;
        self.request_status(id)
    }

    fn finish_request(&self, id: Uuid, f: impl FnOnce(&mut RequestStatus)) {
        let mut requests = lock(&self.requests);
        if let Some(e) = requests.get_mut(&id) {
            f(&mut e.status);
            e.done.send_replace(true);
        }
    }

    pub async fn run_admission(self: Arc<Self>, rx: mpsc::UnboundedReceiver<SpawnRequest>) {
        let rx = Arc::new(tokio::sync::Mutex::new(rx));
        let workers: Vec<_> = (0..self.cfg.placement.admission_workers)
            .map(|_| {
                let node = self.clone();
                let rx = rx.clone();
                tokio::spawn(async move {
                    loop {
                        let Some(req) = rx.lock().await.recv().await else { return };
                        node.admit(req).await;
                    }
                })
            })
            .collect();
        join_all(workers).await;
    }

    async fn admit(self: &Arc<Self>, req: SpawnRequest) {
        let id = req.request_id;
        match self.place(&req).await {
            Ok(plan) => {
                let decided = unix_us();
                lock(&self.requests).get_mut(&id).map(|e| e.status.decided_us = Some(decided));
                match self.deploy(&req, &plan).await {
                    Ok((npids, os_pids)) => {
                        let deployed = unix_us();
                        self.finish_request(id, |s| {
                            s.state = RequestState::Placed;
                            s.npids = npids;
                            s.os_pids = os_pids;
                            s.deployed_us = Some(deployed);
                        });
                    }
                    Err(r) => self.reject(id, r),
                }
            }
            Err(r) => {
                lock(&self.requests).get_mut(&id).map(|e| e.status.decided_us = Some(unix_us()));
                self.reject(id, r);
            }
        }
    }

    fn reject(&self, id: Uuid, r: Rejection) {
        debug!(request = %id, reason = %r, "request rejected");
        self.finish_request(id, |s| {
            s.state = RequestState::Rejected;
            s.reason = Some(r.to_string());
            s.rejection = Some(r);
        });
    }

    /// Fan-out, rank, and commit. An expired reservation triggers one full
    /// re-placement before the request is rejected.
    async fn place(self: &Arc<Self>, req: &SpawnRequest) -> Result<PlacementPlan, Rejection> {
        let mut last = Rejection::NoFeasibleNodes;
        for _attempt in 0..2 {
            let offers = self.gather(req).await;
            let plan = match rank_and_assign(&offers, req) {
                Ok(p) => p,
                Err(r) => {
                    self.release_all(offers.iter().map(|o| (o.node.id, o.reservation_id)));
                    return Err(r);
                }
            };
            let used = plan.used_reservations();
            self.release_all(offers.iter().filter(|o| !used.contains(&o.reservation_id)).map(|o| (o.node.id, o.reservation_id)));
            let commits = join_all(plan.assignments.iter().map(|a| self.commit(req.request_id, a))).await;
            let failed: Vec<&CommitFailure> = commits.iter().filter_map(|c| c.as_ref().err()).collect();
            if failed.is_empty() {
                return Ok(plan);
            }
            // Undo whatever did commit; the leftover is released either way.
            self.release_all(plan.assignments.iter().map(|a| (a.node.id, a.reservation_id)));
            if let Some(CommitFailure::Lost(node)) = failed.iter().find(|f| matches!(f, CommitFailure::Lost(_))) {
                return Err(Rejection::NodeLost { node: *node });
            }
            let placeable = plan
                .assignments
                .iter()
                .zip(&commits)
                .filter(|(_, c)| c.is_ok())
                .map(|(a, _)| a.tasks.len())
                .sum();
            last = Rejection::InsufficientCapacity { placeable, wanted: req.tasks.len() };
        }
        Err(last)
    }

    async fn gather(self: &Arc<Self>, req: &SpawnRequest) -> Vec<Offer> {
        let window = Duration::from_millis(self.cfg.placement.gather_window_ms);
        let classes = task_classes(req);
        let mut asks = Vec::new();
        for m in self.alive_members() {
            for (ci, class) in classes.iter().enumerate() {
                let n = if class.group.is_some() { 1 } else { class.indices.len() as u64 };
                let body = PeerMsg::FeasReq { request_id: req.request_id, class: ci, req: class.resources, n };
                let node = self.clone();
                let id = m.node.id;
                asks.push(async move {
                    if id == node.me.id {
                        return node.handle_feas(body);
                    }
                    match node.peer_request(id, body, window).await {
                        Ok(PeerMsg::Offer { offer }) => offer,
                        Ok(_) => None,
                        Err(e) => {
                            debug!(error = %e, "no offer");
                            None
                        }
                    }
                });
            }
        }
        join_all(asks).await.into_iter().flatten().collect()
    }

    /// Owner side of a feasibility query.
    pub fn handle_feas(&self, body: PeerMsg) -> Option<Offer> {
        let PeerMsg::FeasReq { request_id, class, req, n } = body else { return None };
        let ttl = Duration::from_millis(self.cfg.placement.reservation_ttl_ms);
        let weights = self.cfg.placement.weights();
        let now = self.elapsed();
        lock(&self.ledger).feasibility_check(request_id, class, &req, n, now, ttl, &weights)
    }

    async fn commit(self: &Arc<Self>, request_id: Uuid, a: &Assignment) -> Result<(), CommitFailure> {
        let body = PeerMsg::Commit { request_id, reservation_id: a.reservation_id, count: a.tasks.len() as u64 };
        if a.node.id == self.me.id {
            return if self.handle_commit(body) { Ok(()) } else { Err(CommitFailure::Expired) };
        }
        match self.peer_request(a.node.id, body, Duration::from_secs(2)).await {
            Ok(PeerMsg::CommitAck { ok: true }) => Ok(()),
            Ok(_) => Err(CommitFailure::Expired),
            Err(e) => Err(CommitFailure::Lost(e.node())),
        }
    }

    /// Owner side of a commit: reservation becomes allocation held for the
    /// coming deploy.
    pub fn handle_commit(&self, body: PeerMsg) -> bool {
        let PeerMsg::Commit { reservation_id, count, .. } = body else { return false };
        let now = self.elapsed();
        match lock(&self.ledger).commit(reservation_id, count, now) {
            Ok(amount) => {
                let per_task = if count == 0 { amount } else { nefele_core::ResourceVector::new(amount.cpu / count, amount.mem / count) };
                lock(&self.committed).insert(reservation_id, Committed { per_task, remaining: count, at: Instant::now() });
                true
            }
            Err(e) => {
                debug!(error = %e, "commit refused");
                false
            }
        }
    }

    /// Owner side of a release: drops a reservation, or returns a commit
    /// that will not be deployed.
    pub fn handle_release(&self, reservation_id: Uuid) {
        if lock(&self.ledger).release(&reservation_id) {
            return;
        }
        if let Some(c) = lock(&self.committed).remove(&reservation_id) {
            lock(&self.ledger).deallocate(c.per_task.scale(c.remaining));
        }
    }

    fn release_all(self: &Arc<Self>, items: impl Iterator<Item = (u32, Uuid)>) {
        for (node, reservation_id) in items {
            if node == self.me.id {
                self.handle_release(reservation_id);
            } else {
                let n = self.clone();
                tokio::spawn(async move {
                    let _ = n.peer_send(node, PeerMsg::Release { reservation_id }).await;
                });
            }
        }
    }

    fn handshake_timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.placement.handshake_timeout_ms)
    }

    async fn deploy(self: &Arc<Self>, req: &SpawnRequest, plan: &PlacementPlan) -> Result<(Vec<Npid>, Vec<u32>), Rejection> {
        let timeout = self.handshake_timeout() + DEPLOY_TIMEOUT_SLACK;
        let calls = plan.assignments.iter().map(|a| {
            let tasks: Vec<(usize, TaskSpec)> = a.tasks.iter().map(|&i| (i, req.tasks[i].clone())).collect();
            let body = PeerMsg::Deploy {
                request_id: req.request_id,
                tenant: req.tenant.clone(),
                reservation_id: a.reservation_id,
                tasks,
            };
            let node = a.node.id;
            async move {
                if node == self.me.id {
                    return (node, Ok(self.handle_deploy(body).await));
                }
                let r = match self.peer_request(node, body, timeout).await {
                    Ok(PeerMsg::DeployAck { results }) => Ok(results),
                    Ok(other) => Err(PeerError::Connect(node, format!("unexpected reply {other:?}"))),
                    Err(e) => Err(e),
                };
                (node, r)
            }
        });
        let outcomes = join_all(calls).await;
        let n = req.tasks.len();
        let mut npids: Vec<Option<Npid>> = vec![None; n];
        let mut os_pids = vec![0u32; n];
        let mut failure: Option<Rejection> = None;
        for (node, r) in outcomes {
            match r {
                Ok(results) => {
                    for d in results {
                        match (d.npid, d.error) {
                            (Some(p), None) if d.index < n => {
                                npids[d.index] = Some(p);
                                os_pids[d.index] = d.os_pid.unwrap_or(0);
                            }
                            (p, err) => {
                                if let (Some(p), true) = (p, d.index < n) {
                                    npids[d.index] = Some(p);
                                }
                                failure.get_or_insert(Rejection::SpawnFailed { detail: err.unwrap_or_default() });
                            }
                        }
                    }
                }
                Err(e) => {
                    failure = Some(Rejection::NodeLost { node: e.node().max(node) });
                }
            }
        }
        if failure.is_none() && npids.iter().any(Option::is_none) {
            failure = Some(Rejection::SpawnFailed { detail: "deploy acknowledged fewer tasks than assigned".into() });
        }
        if let Some(r) = failure {
            for p in npids.into_iter().flatten() {
                let _ = self.signal(p, 9).await;
            }
            return Err(r);
        }
        Ok((npids.into_iter().map(|p| p.expect("checked")).collect(), os_pids))
    }

    /// Owner side of a deploy: spawns each task against the committed
    /// allocation and waits for handshaking tasks to come up.
    pub async fn handle_deploy(self: &Arc<Self>, body: PeerMsg) -> Vec<DeployResult> {
        let PeerMsg::Deploy { request_id, tenant, reservation_id, tasks } = body else { return Vec::new() };
        let committed = lock(&self.committed).remove(&reservation_id);
        let Some(c) = committed else {
            return tasks
                .iter()
                .map(|(i, _)| DeployResult { index: *i, npid: None, os_pid: None, error: Some("no committed allocation".into()) })
                .collect();
        };
        let mut remaining = c.remaining;
        let mut results = Vec::with_capacity(tasks.len());
        let mut waits = Vec::new();
        for (index, spec) in tasks {
            if remaining == 0 {
                results.push(DeployResult { index, npid: None, os_pid: None, error: Some("deploy exceeds commit".into()) });
                continue;
            }
            remaining -= 1;
            let awaits = spec.await_handshake;
            match self.spawn_local(&tenant, spec) {
                Ok((npid, os_pid)) => {
                    if awaits {
                        waits.push((results.len(), npid));
                    }
                    results.push(DeployResult { index, npid: Some(npid), os_pid: Some(os_pid), error: None });
                }
                Err(e) => results.push(DeployResult { index, npid: None, os_pid: None, error: Some(e) }),
            }
        }
        if remaining > 0 {
            lock(&self.ledger).deallocate(c.per_task.scale(remaining));
        }
        let timeout = self.handshake_timeout();
        let checks = waits.into_iter().map(|(slot, npid)| async move {
            let Some(mut rx) = self.watch_state(&npid) else {
                return (slot, Some("exited before handshake".to_string()));
            };
            let state = tokio::time::timeout(timeout, rx.wait_for(|s| *s != ProcessState::Starting))
                .await
                .map(|r| r.map(|s| *s));
            match state {
                Ok(Ok(ProcessState::Running)) => (slot, None),
                Ok(_) => (slot, Some("exited before handshake".to_string())),
                Err(_) => (slot, Some("handshake timed out".to_string())),
            }
        });
        for (slot, err) in join_all(checks).await {
            if err.is_some() {
                results[slot].error = err;
            }
        }
        info!(request = %request_id, tasks = results.len(), "deployed");
        results
    }

    /// Returns allocations committed long ago but never deployed, and lets
    /// lapsed reservations go.
    pub async fn run_sweeper(self: Arc<Self>) {
        let mut tick = tokio::time::interval(Duration::from_millis(500));
        let mut shutdown = self.shutdown.subscribe();
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = shutdown.changed() => return,
            }
            let now = self.elapsed();
            lock(&self.ledger).expire(now);
            let stale: Vec<(Uuid, Committed)> = {
                let mut c = lock(&self.committed);
                let ids: HashSet<Uuid> = c.iter().filter(|(_, v)| v.at.elapsed() > COMMITTED_GRACE).map(|(k, _)| *k).collect();
                ids.into_iter().filter_map(|id| c.remove(&id).map(|v| (id, v))).collect()
            };
            for (_, c) in stale {
                lock(&self.ledger).deallocate(c.per_task.scale(c.remaining));
            }
            let mut requests = lock(&self.requests);
            if requests.len() > 100_000 {
                let done: Vec<Uuid> = requests
                    .iter()
                    .filter(|(_, e)| e.status.state != RequestState::Pending)
                    .map(|(k, _)| *k)
                    .take(requests.len() - 50_000)
                    .collect();
                for k in done {
                    requests.remove(&k);
                }
            }
        }
    }
}
