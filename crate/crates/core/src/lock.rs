//! Single-owner leases on agent contexts.
//!
//! Every agent is held by at most one realm at a time. A realm that asks for an
//! agent owned elsewhere is queued and the owner is told to hand it over; the
//! owner persists the context and releases, which grants the next waiter with
//! a higher lease epoch. Storage uses that epoch to fence stale writers.

use std::collections::{HashMap, VecDeque};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use crate::address::Address;

pub type RealmId = String;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LockError {
    #[error("realm {0} is not registered with the lock service")]
    UnknownRealm(RealmId),
    #[error("realm {realm} does not own {agent}")]
    NotOwner { agent: String, realm: RealmId },
    #[error("release of {agent} without attesting that its context was persisted")]
    UnpersistedRelease { agent: String },
    #[error("realm {0} is already registered")]
    DuplicateRealm(RealmId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Acquire {
    Granted(u64),
    MustWait(RealmId),
}

/// Notifications delivered to a realm's event channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockEvent {
    /// Another realm is waiting for an agent this realm owns.
    ReleaseRequested { agent: Address, requester: RealmId },
    /// A queued acquisition has been granted.
    Granted { agent: Address, epoch: u64 },
    /// An operator revoked this realm's lease.
    Revoked { agent: Address, epoch: u64 },
}

#[derive(Debug, Default)]
struct Entry {
    owner: Option<RealmId>,
    /// Epoch of the current or most recent lease.
    epoch: u64,
    waiters: VecDeque<RealmId>,
}

#[derive(Debug, Default)]
struct Table {
    realms: HashMap<RealmId, Sender<LockEvent>>,
    entries: HashMap<Address, Entry>,
}

impl Table {
    fn notify(&self, realm: &str, event: LockEvent) {
        if let Some(tx) = self.realms.get(realm) {
            // a realm that dropped its receiver simply misses the event
            let _ = tx.send(event);
        }
    }

    /// Hands `agent` to the first still-registered waiter, if any.
    fn grant_next(&mut self, agent: &Address) -> Option<(RealmId, u64)> {
        let entry = self.entries.get_mut(agent)?;
        entry.owner = None;
        while let Some(next) = entry.waiters.pop_front() {
            if self.realms.contains_key(&next) {
                entry.epoch += 1;
                entry.owner = Some(next.clone());
                let epoch = entry.epoch;
                self.notify(&next, LockEvent::Granted { agent: agent.clone(), epoch });
                return Some((next, epoch));
            }
        }
        None
    }
}

/// The lock table. All decisions are made under one mutex and are therefore
/// totally ordered.
#[derive(Debug, Default)]
pub struct LockService {
    table: Mutex<Table>,
}

impl LockService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a realm and returns the channel its lock events arrive on.
    pub fn register_realm(&self, realm: &str) -> Result<Receiver<LockEvent>, LockError> {
        let mut t = self.table.lock();
        if t.realms.contains_key(realm) {
            return Err(LockError::DuplicateRealm(realm.to_string()));
        }
        let (tx, rx) = unbounded();
        t.realms.insert(realm.to_string(), tx);
        Ok(rx)
    }

    /// Removes a realm from every wait queue. Leases it still holds are kept
    /// and need an explicit release or [`force_release`](Self::force_release).
    pub fn unregister_realm(&self, realm: &str) {
        let mut t = self.table.lock();
        t.realms.remove(realm);
        for e in t.entries.values_mut() {
            e.waiters.retain(|w| w != realm);
        }
    }

    pub fn acquire(&self, agent: &Address, realm: &str) -> Result<Acquire, LockError> {
        let mut t = self.table.lock();
        if !t.realms.contains_key(realm) {
            return Err(LockError::UnknownRealm(realm.to_string()));
        }
        let entry = t.entries.entry(agent.clone()).or_default();
        match entry.owner.clone() {
            None => {
                entry.epoch += 1;
                entry.owner = Some(realm.to_string());
                Ok(Acquire::Granted(entry.epoch))
            }
            Some(owner) if owner == realm => Ok(Acquire::Granted(entry.epoch)),
            Some(owner) => {
                if !entry.waiters.iter().any(|w| w == realm) {
                    entry.waiters.push_back(realm.to_string());
                }
                t.notify(&owner, LockEvent::ReleaseRequested { agent: agent.clone(), requester: realm.to_string() });
                Ok(Acquire::MustWait(owner))
            }
        }
    }

    /// Releases `agent`. `context_persisted` is the owner's attestation that
    /// its journal and context were written back. Returns the next grant.
    pub fn release(&self, agent: &Address, realm: &str, context_persisted: bool) -> Result<Option<(RealmId, u64)>, LockError> {
        let mut t = self.table.lock();
        let owned = t.entries.get(agent).and_then(|e| e.owner.as_deref()) == Some(realm);
        if !owned {
            return Err(LockError::NotOwner { agent: agent.to_string(), realm: realm.to_string() });
        }
        if !context_persisted {
            return Err(LockError::UnpersistedRelease { agent: agent.to_string() });
        }
        Ok(t.grant_next(agent))
    }

    /// Withdraws a queued acquisition.
    pub fn cancel_wait(&self, agent: &Address, realm: &str) {
        if let Some(e) = self.table.lock().entries.get_mut(agent) {
            e.waiters.retain(|w| w != realm);
        }
    }

    pub fn owner_of(&self, agent: &Address) -> Option<(RealmId, u64)> {
        let t = self.table.lock();
        let e = t.entries.get(agent)?;
        e.owner.clone().map(|o| (o, e.epoch))
    }

    /// Operator override for a crashed owner: the lease is revoked and the
    /// epoch advanced so the old owner's writes are fenced off.
    pub fn force_release(&self, agent: &Address) -> Option<(RealmId, u64)> {
        let mut t = self.table.lock();
        let entry = t.entries.get_mut(agent)?;
        let previous = entry.owner.take()?;
        entry.epoch += 1;
        let epoch = entry.epoch;
        t.notify(&previous, LockEvent::Revoked { agent: agent.clone(), epoch });
        t.grant_next(agent)
    }

    /// Agents currently owned by `realm`, with their epochs.
    pub fn owned_by(&self, realm: &str) -> Vec<(Address, u64)> {
        let t = self.table.lock();
        t.entries
            .iter()
            .filter(|(_, e)| e.owner.as_deref() == Some(realm))
            .map(|(a, e)| (a.clone(), e.epoch))
            .collect()
    }
}
