use super::msr::{is_confirmation, msr_range};
use super::{Context, Journal, MemoryError};
use crate::address::is_system_address;
use crate::message::Message;

/// Outcome of replaying a journal against a live context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub reconstructed: Vec<Message>,
    pub journal_len: usize,
    pub rewrites_applied: usize,
}

/// Rebuilds the context cells from a journal.
///
/// An entry addressed to the system with an MSR subject is treated as an
/// applied rewrite when the next entry is the matching confirmation and the
/// range fits the cells rebuilt so far; every other entry is appended. Seeded
/// (cloned) journals may carry a rewrite message immediately followed by its
/// confirmation; such a pair always references serials past the end of the
/// rebuilt cells and replays as two appends, which is what the context holds.
pub fn replay(journal: &Journal) -> Result<ReplayReport, MemoryError> {
    let agent = journal.agent.to_string();
    let entries = &journal.entries;
    let mut cells: Vec<Message> = Vec::with_capacity(entries.len());
    let mut rewrites = 0;
    for (i, entry) in entries.iter().enumerate() {
        let rewrite = entry
            .to_addrs()
            .iter()
            .any(|t| is_system_address(t))
            .then(|| msr_range(entry.subject()))
            .flatten()
            .filter(|&(lo, hi)| lo <= hi && hi < cells.len())
            .filter(|&(lo, hi)| entries.get(i + 1).is_some_and(|next| is_confirmation(next, &agent, lo, hi)));
        match rewrite {
            Some((lo, hi)) => {
                cells.splice(lo..=hi, std::iter::once(entry.clone()));
                rewrites += 1;
            }
            None => cells.push(entry.clone()),
        }
    }
    Ok(ReplayReport { reconstructed: cells, journal_len: entries.len(), rewrites_applied: rewrites })
}

/// Replays `journal` and compares the result with `live`, reporting the first
/// differing cell on mismatch.
pub fn verify_replay(journal: &Journal, live: &Context) -> Result<ReplayReport, MemoryError> {
    let report = replay(journal)?;
    if let Some(index) = first_divergence(&report.reconstructed, &live.cells) {
        return Err(MemoryError::ReplayDivergence { index });
    }
    Ok(report)
}

pub(crate) fn first_divergence(a: &[Message], b: &[Message]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::World;
    use crate::memory::{parse_msr, AgentMemory};

    fn agent() -> crate::address::Address {
        World::new("w").parse("ai@agents.localdomain").unwrap()
    }

    fn user(i: usize) -> Message {
        Message::new("u@localdomain", "ai@agents.localdomain", &format!("m{i}"), "x")
    }

    #[test]
    fn empty_journal_is_consistent() {
        let m = AgentMemory::new(agent());
        let r = m.verify().unwrap();
        assert!(r.reconstructed.is_empty());
    }

    #[test]
    fn divergence_reports_first_cell() {
        let mut m = AgentMemory::new(agent());
        for i in 0..4 {
            m.append(user(i)).unwrap();
        }
        m.context.cells[2] = user(99);
        assert_eq!(m.verify(), Err(MemoryError::ReplayDivergence { index: 2 }));
        m.context.cells.truncate(2);
        assert_eq!(m.verify(), Err(MemoryError::ReplayDivergence { index: 2 }));
    }

    #[test]
    fn clone_seed_with_tail_rewrite_replays() {
        let mut parent = AgentMemory::new(agent());
        for i in 0..6 {
            parent.append(user(i)).unwrap();
        }
        let render = parent.render();
        let msr = Message::new("ai@agents.localdomain", "system@localdomain", "MSR 3-5", "gist");
        parent.apply_msr(parse_msr(&msr, &render).unwrap()).unwrap();
        parent.verify().unwrap();

        let child_addr = World::new("w").parse("ibn.ai@agents.localdomain").unwrap();
        let child = AgentMemory::cloned_from(child_addr, &parent.context.cells);
        child.verify().unwrap();
    }

    #[test]
    fn rejected_msr_replays_as_append() {
        let mut m = AgentMemory::new(agent());
        m.append(user(0)).unwrap();
        m.append(Message::new("ai@agents.localdomain", "system@localdomain", "MSR 5-3", "bad")).unwrap();
        m.append(Message::new("system@localdomain", "ai@agents.localdomain", "Re: MSR 5-3", "error")).unwrap();
        assert_eq!(m.verify().unwrap().rewrites_applied, 0);
    }
}
