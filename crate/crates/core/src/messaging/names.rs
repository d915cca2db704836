use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NameKey;
use crate::model::{NodeId, Npid};

/// One process holding one key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Registration {
    pub tenant: String,
    pub key: NameKey,
    pub npid: Npid,
    /// Unix microseconds at the origin node.
    pub registered_at: u64,
}

/// All registrations owned by one origin node, versioned by that node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginTable {
    pub origin: NodeId,
    pub version: u64,
    pub regs: Vec<Registration>,
}

impl OriginTable {
    fn empty(origin: NodeId) -> Self {
        Self { origin, version: 0, regs: Vec::new() }
    }

    /// True when `self` should replace `held`.
    fn supersedes(&self, held: &OriginTable) -> bool {
        (self.origin.incarnation, self.version) > (held.origin.incarnation, held.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameTableEntry {
    pub tenant: String,
    pub key: NameKey,
    /// Preferred registrant first.
    pub registrants: Vec<(Npid, u64)>,
}

/// A node's replica of the cluster name table. Each origin node is the sole
/// writer of its own registrations and ships whole versioned snapshots;
/// replicas keep the newest snapshot per origin, so replicas converge once
/// every origin's latest snapshot has been delivered everywhere.
#[derive(Debug, Clone)]
pub struct NameReplica {
    local: OriginTable,
    remote: BTreeMap<u32, OriginTable>,
}

impl NameReplica {
    pub fn new(me: NodeId) -> Self {
        Self { local: OriginTable::empty(me), remote: BTreeMap::new() }
    }

    pub fn origin(&self) -> NodeId {
        self.local.origin
    }

    /// Adds a local registration. Returns false if it already existed.
    pub fn register(&mut self, tenant: &str, key: NameKey, npid: Npid, now_us: u64) -> bool {
        let exists = self.local.regs.iter().any(|r| r.npid == npid && r.key == key && r.tenant == tenant);
        if exists {
            return false;
        }
        self.local.regs.push(Registration { tenant: tenant.to_string(), key, npid, registered_at: now_us });
        self.local.version += 1;
        true
    }

    pub fn unregister(&mut self, tenant: &str, key: &NameKey, npid: Npid) -> bool {
        let before = self.local.regs.len();
        self.local.regs.retain(|r| !(r.npid == npid && &r.key == key && r.tenant == tenant));
        let changed = before != self.local.regs.len();
        if changed {
            self.local.version += 1;
        }
        changed
    }

    /// Revokes every local registration held by `npid`.
    pub fn revoke(&mut self, npid: Npid) -> bool {
        let before = self.local.regs.len();
        self.local.regs.retain(|r| r.npid != npid);
        let changed = before != self.local.regs.len();
        if changed {
            self.local.version += 1;
        }
        changed
    }

    pub fn snapshot(&self) -> OriginTable {
        self.local.clone()
    }

    /// Every table held, own first. Used for anti-entropy.
    pub fn all_tables(&self) -> Vec<OriginTable> {
        std::iter::once(self.local.clone()).chain(self.remote.values().cloned()).collect()
    }

    /// Applies a snapshot from another origin. Returns true if it changed the replica.
    pub fn merge(&mut self, table: OriginTable) -> bool {
        if table.origin.id == self.local.origin.id {
            return false;
        }
        match self.remote.get(&table.origin.id) {
            Some(held) if !table.supersedes(held) => false,
            _ => {
                self.remote.insert(table.origin.id, table);
                true
            }
        }
    }

    /// Forgets everything an origin registered (its node died).
    pub fn drop_origin(&mut self, node: NodeId) -> bool {
        match self.remote.get(&node.id) {
            Some(t) if t.origin.incarnation <= node.incarnation => {
                // keep a tombstone so older snapshots cannot resurrect it
                let tomb = OriginTable { origin: t.origin, version: u64::MAX, regs: Vec::new() };
                let had = !t.regs.is_empty();
                self.remote.insert(node.id, tomb);
                had
            }
            Some(_) => false,
            None => {
                self.remote.insert(node.id, OriginTable { origin: node, version: u64::MAX, regs: Vec::new() });
                false
            }
        }
    }

    fn all_regs(&self) -> impl Iterator<Item = &Registration> {
        self.local.regs.iter().chain(self.remote.values().flat_map(|t| t.regs.iter()))
    }

    /// Registrants of `key`, preferred (earliest, then lowest NPID) first.
    pub fn resolve(&self, tenant: &str, key: &NameKey) -> Vec<(Npid, u64)> {
        let mut out: Vec<(Npid, u64)> = self
            .all_regs()
            .filter(|r| r.tenant == tenant && &r.key == key)
            .map(|r| (r.npid, r.registered_at))
            .collect();
        out.sort_by_key(|(npid, at)| (*at, *npid));
        out.dedup();
        out
    }

    pub fn entries(&self) -> Vec<NameTableEntry> {
        let mut grouped: BTreeMap<(String, NameKey), Vec<(Npid, u64)>> = BTreeMap::new();
        for r in self.all_regs() {
            grouped.entry((r.tenant.clone(), r.key.clone())).or_default().push((r.npid, r.registered_at));
        }
        grouped
            .into_iter()
            .map(|((tenant, key), mut registrants)| {
                registrants.sort_by_key(|(npid, at)| (*at, *npid));
                registrants.dedup();
                NameTableEntry { tenant, key, registrants }
            })
            .collect()
    }
}
