use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;

use super::{ContextRender, MemoryError};
use crate::address::{address_key, is_system_address, SYSTEM_ADDRESS};
use crate::message::Message;

pub const CONFIRMATION_BODY: &str = "Memory segment rewriting applied.";

/// A validated rewrite request bound to the render its serials refer to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsrCommand {
    span: Range<usize>,
    pub payload: Message,
    pub epoch: u64,
}

impl MsrCommand {
    /// Rewrite of the empty segment after the last cell, i.e. an append.
    pub fn tail(payload: Message, render: &ContextRender) -> Self {
        MsrCommand { span: render.len()..render.len(), payload, epoch: render.epoch }
    }

    pub fn lo(&self) -> usize {
        self.span.start
    }

    /// Inclusive upper serial. Meaningless for a tail rewrite.
    pub fn hi(&self) -> usize {
        self.span.end.saturating_sub(1)
    }

    pub fn is_tail(&self) -> bool {
        self.span.is_empty()
    }
}

fn subject_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*MSR:?\s+(\d+)\s*-\s*(\d+)\s*$").expect("valid regex"))
}

/// Extracts the inclusive serial range from an MSR subject line.
/// Accepts both `MSR: 29-35` and `MSR 29-35`.
pub fn msr_range(subject: &str) -> Option<(usize, usize)> {
    let caps = subject_re().captures(subject)?;
    Some((caps[1].parse().ok()?, caps[2].parse().ok()?))
}

pub fn parse_msr(msg: &Message, latest: &ContextRender) -> Result<MsrCommand, MemoryError> {
    if !msg.to_addrs().iter().any(|a| is_system_address(a)) {
        return Err(MemoryError::NotAnMsr(msg.subject().to_string()));
    }
    let (lo, hi) = msr_range(msg.subject()).ok_or_else(|| MemoryError::NotAnMsr(msg.subject().to_string()))?;
    if lo > hi {
        return Err(MemoryError::RangeInvalid { lo, hi });
    }
    if hi >= latest.len() {
        return Err(MemoryError::RangeOutOfBounds { hi, len: latest.len() });
    }
    Ok(MsrCommand { span: lo..hi + 1, payload: msg.clone(), epoch: latest.epoch })
}

pub(super) fn confirmation(agent: &str, lo: usize, hi: usize) -> Message {
    Message::new(SYSTEM_ADDRESS, agent, &format!("Re: MSR {lo}-{hi}"), CONFIRMATION_BODY)
}

/// Whether `msg` is the system's confirmation of the rewrite `lo..=hi` for `agent`.
pub fn is_confirmation(msg: &Message, agent: &str, lo: usize, hi: usize) -> bool {
    msg.from_addr().map(is_system_address).unwrap_or(false)
        && msg.to_addrs().iter().any(|t| address_key(t) == address_key(agent))
        && msg.subject() == format!("Re: MSR {lo}-{hi}")
        && msg.text().trim_end() == CONFIRMATION_BODY
}
