//! Agent memory: the append-only journal and the rewritable context derived from it.
//!
//! Every message an agent sends or receives is appended to both. A memory
//! segment rewrite (MSR) replaces an inclusive range of context cells with the
//! rewrite message itself while the journal only gains that message, so the
//! context can always be rebuilt by replaying the journal.

mod msr;
mod privacy;
mod replay;
mod store;

pub use msr::{is_confirmation, msr_range, parse_msr, MsrCommand, CONFIRMATION_BODY};
pub use privacy::{involves_system, user_view};
pub use replay::{replay, verify_replay, ReplayReport};
pub use store::{JournalStore, Loaded, SegmentMeta, StoreConfig, StoreError};

use thiserror::Error;

use crate::address::{address_key, Address};
use crate::message::{serialize_mbox, Message, X_SERIAL};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("message neither from nor to {agent}")]
    AgentMismatch { agent: String },
    #[error("subject {0:?} is not of the form \"MSR: MMM-NNN\" or \"MSR MMM-NNN\"")]
    NotAnMsr(String),
    #[error("range {lo}-{hi} is inverted")]
    RangeInvalid { lo: usize, hi: usize },
    #[error("serial {hi} is beyond the last serial of a {len}-message context")]
    RangeOutOfBounds { hi: usize, len: usize },
    #[error("rewrite refers to render epoch {requested} but the context is at epoch {current}; render again")]
    StaleEpoch { requested: u64, current: u64 },
    #[error("replayed context diverges from the live context at cell {index}")]
    ReplayDivergence { index: usize },
    #[error("journal entry {entry} cannot be replayed: {detail}")]
    InvalidJournal { entry: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Journal {
    pub agent: Address,
    pub entries: Vec<Message>,
    /// Number of leading entries known to be durably stored.
    pub persisted_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub agent: Address,
    pub cells: Vec<Message>,
    /// Advances on every render and every applied rewrite.
    pub epoch: u64,
}

/// A numbered snapshot of a context, as shown to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextRender {
    pub epoch: u64,
    pub numbered: Vec<(usize, Message)>,
}

impl ContextRender {
    pub fn len(&self) -> usize {
        self.numbered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numbered.is_empty()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.numbered.iter().map(|(_, m)| m)
    }

    pub fn to_mbox(&self) -> String {
        let msgs: Vec<Message> = self.messages().cloned().collect();
        serialize_mbox(&msgs)
    }
}

/// Journal and context of one agent, mutated together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentMemory {
    pub journal: Journal,
    pub context: Context,
}

fn set_serial(msg: &mut Message, serial: usize) {
    msg.headers.set(X_SERIAL, &serial.to_string());
}

fn participates(msg: &Message, key: &str) -> bool {
    msg.from_addr().map(address_key).as_deref() == Some(key) || msg.to_addrs().iter().any(|t| address_key(t) == key)
}

impl AgentMemory {
    pub fn new(agent: Address) -> Self {
        AgentMemory {
            journal: Journal { agent: agent.clone(), entries: Vec::new(), persisted_offset: 0 },
            context: Context { agent, cells: Vec::new(), epoch: 0 },
        }
    }

    /// Memory seeded with a copy of another agent's context cells.
    pub fn cloned_from(agent: Address, cells: &[Message]) -> Self {
        let mut mem = AgentMemory::new(agent);
        mem.journal.entries = cells.to_vec();
        mem.context.cells = cells.to_vec();
        mem
    }

    pub fn agent(&self) -> &Address {
        &self.journal.agent
    }

    /// Appends `msg` to journal and context, stamping it with the serial it
    /// occupies at the tail of the context.
    pub fn append(&mut self, mut msg: Message) -> Result<usize, MemoryError> {
        let key = self.agent().key();
        if !participates(&msg, &key) {
            return Err(MemoryError::AgentMismatch { agent: self.agent().to_string() });
        }
        let serial = self.context.cells.len();
        set_serial(&mut msg, serial);
        self.journal.entries.push(msg.clone());
        self.context.cells.push(msg);
        Ok(serial)
    }

    /// Numbers the current cells from zero and advances the epoch.
    pub fn render(&mut self) -> ContextRender {
        self.context.epoch += 1;
        let numbered = self
            .context
            .cells
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut m = m.clone();
                set_serial(&mut m, i);
                (i, m)
            })
            .collect();
        ContextRender { epoch: self.context.epoch, numbered }
    }

    /// Applies a rewrite. Returns the system confirmation that was appended,
    /// or `None` for a rewrite of the empty tail segment, which is a plain append.
    pub fn apply_msr(&mut self, cmd: MsrCommand) -> Result<Option<Message>, MemoryError> {
        match self.splice_rewrite(cmd)? {
            Some((lo, hi)) => self.confirm_rewrite(lo, hi).map(Some),
            None => Ok(None),
        }
    }

    /// First half of [`apply_msr`](Self::apply_msr): journals the payload and
    /// splices it over `lo..=hi`. Until [`confirm_rewrite`](Self::confirm_rewrite)
    /// runs, the journal does not replay to the context.
    pub fn splice_rewrite(&mut self, cmd: MsrCommand) -> Result<Option<(usize, usize)>, MemoryError> {
        if cmd.epoch != self.context.epoch {
            return Err(MemoryError::StaleEpoch { requested: cmd.epoch, current: self.context.epoch });
        }
        let len = self.context.cells.len();
        if cmd.is_tail() {
            if cmd.lo() != len {
                return Err(MemoryError::RangeOutOfBounds { hi: cmd.lo(), len });
            }
            self.append(cmd.payload)?;
            return Ok(None);
        }
        let (lo, hi) = (cmd.lo(), cmd.hi());
        if hi >= len {
            return Err(MemoryError::RangeOutOfBounds { hi, len });
        }
        let key = self.agent().key();
        if !participates(&cmd.payload, &key) {
            return Err(MemoryError::AgentMismatch { agent: self.agent().to_string() });
        }

        let mut payload = cmd.payload;
        set_serial(&mut payload, lo);
        self.journal.entries.push(payload.clone());
        self.context.cells.splice(lo..=hi, std::iter::once(payload));
        self.context.epoch += 1;
        Ok(Some((lo, hi)))
    }

    /// Appends the system confirmation for a spliced `lo..=hi` rewrite.
    pub fn confirm_rewrite(&mut self, lo: usize, hi: usize) -> Result<Message, MemoryError> {
        let confirmation = msr::confirmation(&self.agent().to_string(), lo, hi);
        self.append(confirmation.clone())?;
        Ok(self.context.cells.last().cloned().unwrap_or(confirmation))
    }

    pub fn verify(&self) -> Result<ReplayReport, MemoryError> {
        verify_replay(&self.journal, &self.context)
    }

    pub fn user_view(&self) -> Vec<Message> {
        user_view(&self.journal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::World;

    fn mem() -> AgentMemory {
        AgentMemory::new(World::new("w").parse("ai_30@agents.localdomain").unwrap())
    }

    fn user(i: usize) -> Message {
        Message::new("user1@localdomain", "ai_30@agents.localdomain", &format!("m{i}"), &format!("body {i}"))
    }

    #[test]
    fn first_append() {
        let mut m = mem();
        assert_eq!(m.append(user(0)).unwrap(), 0);
        assert_eq!((m.journal.entries.len(), m.context.cells.len()), (1, 1));
        assert_eq!(m.journal.entries[0].headers.get("X-Serial"), Some("0"));
    }

    #[test]
    fn foreign_message_rejected() {
        let mut m = mem();
        let err = m.append(Message::new("a@x", "b@x", "s", "")).unwrap_err();
        assert!(matches!(err, MemoryError::AgentMismatch { .. }));
        assert!(m.journal.entries.is_empty());
    }

    #[test]
    fn render_numbers_from_zero_and_bumps_epoch() {
        let mut m = mem();
        let r0 = m.render();
        assert!(r0.is_empty());
        assert_eq!(r0.epoch, 1);
        for i in 0..6 {
            m.append(user(i)).unwrap();
        }
        let r = m.render();
        assert_eq!(r.epoch, 2);
        let serials: Vec<usize> = r.numbered.iter().map(|(s, _)| *s).collect();
        assert_eq!(serials, (0..6).collect::<Vec<_>>());
        assert!(r.numbered.iter().all(|(s, m)| m.extended().unwrap().x_serial == Some(*s as u64)));
        let again = m.render();
        assert_eq!(again.numbered, r.numbered);
    }

    fn msr_msg(subject: &str) -> Message {
        Message::new("ai_30@agents.localdomain", "system@localdomain", subject, "summary of removed segment")
    }

    #[test]
    fn msr_replaces_range_with_payload() {
        let mut m = mem();
        for i in 0..10 {
            m.append(user(i)).unwrap();
        }
        let render = m.render();
        let cmd = parse_msr(&msr_msg("MSR 2-4"), &render).unwrap();
        let conf = m.apply_msr(cmd).unwrap().unwrap();
        assert_eq!(conf.subject(), "Re: MSR 2-4");
        assert_eq!(conf.text(), "Memory segment rewriting applied.\n");
        assert_eq!(m.context.cells.len(), 10 - 2 + 1);
        assert_eq!(m.journal.entries.len(), 12);
        let after = m.render();
        assert_eq!(after.numbered[2].1.subject(), "MSR 2-4");
        assert_eq!(after.numbered[3].1.subject(), "m5");
        m.verify().unwrap();
    }

    #[test]
    fn stale_epoch_is_rejected() {
        let mut m = mem();
        for i in 0..5 {
            m.append(user(i)).unwrap();
        }
        let render = m.render();
        let first = parse_msr(&msr_msg("MSR 0-1"), &render).unwrap();
        let second = parse_msr(&msr_msg("MSR 2-3"), &render).unwrap();
        m.apply_msr(first).unwrap();
        let before = m.clone();
        assert!(matches!(m.apply_msr(second), Err(MemoryError::StaleEpoch { .. })));
        assert_eq!(m, before);
    }

    #[test]
    fn tail_rewrite_is_append() {
        let mut a = mem();
        let mut b = mem();
        for i in 0..3 {
            a.append(user(i)).unwrap();
            b.append(user(i)).unwrap();
        }
        let render = a.render();
        b.render();
        let reply = Message::new("ai_30@agents.localdomain", "user1@localdomain", "out", "inference output");
        assert_eq!(a.apply_msr(MsrCommand::tail(reply.clone(), &render)).unwrap(), None);
        b.append(reply).unwrap();
        assert_eq!(a, b);
    }
}
