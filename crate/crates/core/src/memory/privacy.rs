use super::Journal;
use crate::address::is_system_address;
use crate::message::Message;

/// Whether the system address is the sender or one of the recipients.
pub fn involves_system(msg: &Message) -> bool {
    msg.from_addr().is_some_and(is_system_address) || msg.to_addrs().iter().any(|t| is_system_address(t))
}

/// The journal as shown to users: system traffic in either direction removed.
pub fn user_view(journal: &Journal) -> Vec<Message> {
    journal.entries.iter().filter(|m| !involves_system(m)).cloned().collect()
}
