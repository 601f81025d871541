//! Actor addresses, worlds, and the dotted-address clone convention.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use thiserror::Error;

pub const AGENT_DOMAIN: &str = "agents.localdomain";
pub const SYSTEM_ADDRESS: &str = "system@localdomain";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddressError {
    #[error("malformed address {0:?}")]
    MalformedAddress(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ActorKind {
    User,
    Agent,
    System,
    Robot,
}

/// Identifier of an isolated address namespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct WorldId(pub String);

impl fmt::Display for WorldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for WorldId {
    fn from(s: &str) -> Self {
        WorldId(s.to_string())
    }
}

/// A parsed actor address bound to a world.
///
/// Local parts compare case-sensitively, domains case-insensitively. The
/// original spelling is kept for display.
#[derive(Debug, Clone)]
pub struct Address {
    local: String,
    domain: String,
    world: WorldId,
    kind: ActorKind,
}

impl PartialEq for Address {
    fn eq(&self, other: &Self) -> bool {
        self.local == other.local && self.domain.eq_ignore_ascii_case(&other.domain) && self.world == other.world
    }
}

impl Eq for Address {}

impl Hash for Address {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.local.hash(state);
        self.domain.to_ascii_lowercase().hash(state);
        self.world.hash(state);
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.local, self.domain)
    }
}

fn split(text: &str) -> Result<(&str, &str), AddressError> {
    let bad = || AddressError::MalformedAddress(text.to_string());
    let mut it = text.split('@');
    let (Some(local), Some(domain), None) = (it.next(), it.next(), it.next()) else {
        return Err(bad());
    };
    let token_ok = |s: &str| !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || "<>,;:\"/\\".contains(c));
    if !token_ok(local) || !token_ok(domain) || domain.split('.').any(str::is_empty) {
        return Err(bad());
    }
    Ok((local, domain))
}

/// Canonical lookup key for an address text: local part verbatim, domain lowercased.
pub fn address_key(text: &str) -> String {
    match text.split_once('@') {
        Some((l, d)) => format!("{l}@{}", d.to_ascii_lowercase()),
        None => text.to_string(),
    }
}

pub fn is_agent_address(text: &str) -> bool {
    split(text).map(|(_, d)| d.eq_ignore_ascii_case(AGENT_DOMAIN)).unwrap_or(false)
}

pub fn is_system_address(text: &str) -> bool {
    address_key(text) == SYSTEM_ADDRESS
}

/// Parses and classifies `text` within `world`.
pub fn parse_address(text: &str, world: &World) -> Result<Address, AddressError> {
    let (local, domain) = split(text.trim())?;
    let key = format!("{local}@{}", domain.to_ascii_lowercase());
    let kind = if domain.eq_ignore_ascii_case(AGENT_DOMAIN) {
        ActorKind::Agent
    } else if key == SYSTEM_ADDRESS {
        ActorKind::System
    } else if world.robots.contains_key(&key) {
        ActorKind::Robot
    } else {
        ActorKind::User
    };
    Ok(Address { local: local.to_string(), domain: domain.to_string(), world: world.id.clone(), kind })
}

impl Address {
    pub fn local(&self) -> &str {
        &self.local
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn world(&self) -> &WorldId {
        &self.world
    }

    pub fn kind(&self) -> ActorKind {
        self.kind
    }

    pub fn is_agent(&self) -> bool {
        self.kind == ActorKind::Agent
    }

    pub fn key(&self) -> String {
        address_key(&self.to_string())
    }

    /// Parent an agent would be cloned from: the address with its leftmost
    /// dotted label removed (`ibn.sina` -> `sina`). Only one level is stripped.
    pub fn clone_parent(&self) -> Option<Address> {
        if !self.is_agent() {
            return None;
        }
        let (_, rest) = self.local.split_once('.')?;
        if rest.is_empty() {
            return None;
        }
        Some(Address { local: rest.to_string(), domain: self.domain.clone(), world: self.world.clone(), kind: ActorKind::Agent })
    }
}

pub fn same_world(a: &Address, b: &Address) -> bool {
    a.world == b.world
}

/// Where a robot is reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RobotEndpoint {
    /// Handled by an in-process adapter registered with the realm.
    InProcess,
    /// Connected over the wire as an ordinary client.
    Remote,
}

/// An isolated namespace of addresses.
#[derive(Debug, Clone)]
pub struct World {
    pub id: WorldId,
    pub addresses: HashSet<String>,
    pub robots: HashMap<String, RobotEndpoint>,
}

impl World {
    pub fn new(id: impl Into<String>) -> Self {
        World { id: WorldId(id.into()), addresses: HashSet::new(), robots: HashMap::new() }
    }

    pub fn register_robot(&mut self, addr: &str, endpoint: RobotEndpoint) {
        let key = address_key(addr);
        self.addresses.insert(key.clone());
        self.robots.insert(key, endpoint);
    }

    pub fn register(&mut self, addr: &Address) {
        self.addresses.insert(addr.key());
    }

    pub fn knows(&self, addr: &Address) -> bool {
        self.addresses.contains(&addr.key())
    }

    pub fn parse(&self, text: &str) -> Result<Address, AddressError> {
        parse_address(text, self)
    }
}
