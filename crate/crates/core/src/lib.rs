//! Core of an agent messaging platform where every participant is an email
//! address and an agent's memory is an mbox journal.

pub mod address;
pub mod gateway;
pub mod lock;
pub mod realm;
pub mod robot;
pub mod memory;
pub mod message;
pub mod net;
