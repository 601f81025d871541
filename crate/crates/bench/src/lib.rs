//! Fixtures shared by the benchmarks.

use agentmail_core::address::{Address, World};
use agentmail_core::memory::AgentMemory;
use agentmail_core::message::{build_attachment_message, Attachment, Message};

pub const USER: &str = "user1@localdomain";
pub const AGENT: &str = "ai_30@agents.localdomain";

pub fn agent() -> Address {
    World::new("bench").parse(AGENT).unwrap()
}

/// Alternating user/agent exchange of `n` messages with paragraph-sized bodies.
pub fn conversation(n: usize) -> Vec<Message> {
    (0..n)
        .map(|i| {
            let body = format!("Paragraph {i}.\n").repeat(20);
            if i % 2 == 0 {
                Message::new(USER, AGENT, &format!("question {i}"), &body)
            } else {
                Message::new(AGENT, USER, &format!("Re: question {}", i - 1), &body)
            }
        })
        .collect()
}

pub fn memory_with(n: usize) -> AgentMemory {
    let mut mem = AgentMemory::new(agent());
    for m in conversation(n) {
        mem.append(m).unwrap();
    }
    mem
}

/// A shell-style reply carrying `size` bytes of stdout.
pub fn with_attachment(size: usize) -> Message {
    let stdout: Vec<u8> = (0..size).map(|i| b"abcdefghij\n"[i % 11]).collect();
    build_attachment_message(
        "shell@localdomain",
        AGENT,
        "Re: run",
        "Exit code: 0\n",
        &[Attachment::new("stdout.txt", "text/plain", stdout), Attachment::new("stderr.txt", "text/plain", Vec::new())],
    )
    .unwrap()
}
