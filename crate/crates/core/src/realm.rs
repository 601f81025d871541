//! The realm: a message broker for one world.
//!
//! A realm owns a FIFO inbox, the client sessions connected to it, the
//! in-process robots it hosts, and the agents whose leases it holds. Each
//! inbox item is routed per recipient; messages for agents drive the
//! render, infer, emit loop. Everything here is synchronous; the network
//! layer feeds a realm from a dedicated thread.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::address::{address_key, is_system_address, ActorKind, Address, AddressError, RobotEndpoint, World, WorldId, SYSTEM_ADDRESS};
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::lock::{Acquire, LockError, LockEvent, LockService, RealmId};
use crate::memory::{msr_range, parse_msr, AgentMemory, ContextRender, JournalStore, ReplayReport, StoreError};
use crate::message::{parse_message, Message, X_CLONE_FROM, X_HINT_MODEL, X_REALM, X_SERIAL, X_TOTAL_TOKENS};
use crate::robot::Robot;

pub const DEFAULT_MAX_DEPTH: u32 = 8;

#[derive(Debug, Error)]
pub enum RealmError {
    #[error("sender {claimed} does not match the session address {session}")]
    SpoofedSender { claimed: String, session: String },
    #[error("{0} belongs to another world")]
    WorldViolation(String),
    #[error("no session {0}")]
    UnknownSession(ConnId),
    #[error("{0} is reserved and cannot hold a client session")]
    ReservedAddress(String),
    #[error(transparent)]
    Address(#[from] AddressError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("persisting {agent} failed: {source}")]
    PersistFailure { agent: String, source: StoreError },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type ConnId = u64;

/// Which world each address is registered in, shared by every realm in a process.
#[derive(Debug, Default)]
pub struct WorldDirectory {
    homes: RwLock<HashMap<String, HashSet<WorldId>>>,
}

impl WorldDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, world: &WorldId, address: &str) {
        self.homes.write().entry(address_key(address)).or_default().insert(world.clone());
    }

    /// True when `address` is known only in worlds other than `world`.
    pub fn is_foreign(&self, world: &WorldId, address: &str) -> bool {
        match self.homes.read().get(&address_key(address)) {
            Some(worlds) => !worlds.contains(world),
            None => false,
        }
    }
}

/// A message handed from one realm to another during a context transfer.
#[derive(Debug, Clone)]
pub struct Forwarded {
    pub msg: Message,
    pub depth: u32,
}

/// In-process delivery between realms.
#[derive(Debug, Default)]
pub struct PeerBus {
    peers: Mutex<HashMap<RealmId, Sender<Forwarded>>>,
}

impl PeerBus {
    pub fn new() -> Self {
        Self::default()
    }

    fn join(&self, realm: &str) -> Receiver<Forwarded> {
        let (tx, rx) = unbounded();
        self.peers.lock().insert(realm.to_string(), tx);
        rx
    }

    fn send(&self, realm: &str, item: Forwarded) -> bool {
        match self.peers.lock().get(realm) {
            Some(tx) => tx.send(item).is_ok(),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingDecision {
    ToAgent(Address),
    ToSystem,
    ToRobot(Address),
    ToClientSession(Address, Vec<ConnId>),
    DeadLetter(String),
}

/// Something the realm wants the outside world to see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RealmEvent {
    /// A message for a connected client.
    Deliver { conn: ConnId, msg: Message },
    /// An entry was appended to an agent's journal at `index`.
    Appended { agent: String, index: usize, msg: Message },
    /// Something needs an operator's attention.
    Alarm(String),
}

#[derive(Debug, Clone)]
pub struct RealmConfig {
    pub id: RealmId,
    pub world: World,
    /// Maximum agent-to-agent hops per externally originated message.
    pub max_depth: u32,
    pub completion_timeout: Duration,
    pub max_output_tokens: u32,
}

impl RealmConfig {
    pub fn new(id: &str, world: World) -> Self {
        RealmConfig { id: id.to_string(), world, max_depth: DEFAULT_MAX_DEPTH, completion_timeout: Duration::from_secs(120), max_output_tokens: 4096 }
    }
}

#[derive(Debug, Clone)]
struct Item {
    msg: Message,
    depth: u32,
    /// Handed over by the agent's previous owner.
    forwarded: bool,
}

impl Item {
    fn new(msg: Message, depth: u32) -> Self {
        Item { msg, depth, forwarded: false }
    }
}

struct Slot {
    memory: AgentMemory,
    lease: u64,
    /// The render the last completion was computed from; MSR serials refer to it.
    last_render: Option<ContextRender>,
    dirty: bool,
}

/// How an agent came into being in this realm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentOrigin {
    Existing,
    Loaded,
    Cloned(String),
    Created,
}

pub struct Realm {
    cfg: RealmConfig,
    lock: Arc<LockService>,
    lock_events: Receiver<LockEvent>,
    store: Arc<JournalStore>,
    gateway: Gateway,
    directory: Arc<WorldDirectory>,
    peers: Option<(Arc<PeerBus>, Receiver<Forwarded>)>,
    agents: HashMap<Address, Slot>,
    sessions: HashMap<ConnId, Address>,
    next_conn: ConnId,
    robots: HashMap<String, Box<dyn Robot>>,
    inbox: VecDeque<Item>,
    /// Items for agents whose lease is held elsewhere, in arrival order.
    waiting: HashMap<Address, VecDeque<Item>>,
    events: Vec<RealmEvent>,
    origins: Vec<(String, AgentOrigin)>,
}

fn notice(to: &str, subject: &str, body: &str) -> Message {
    Message::new(SYSTEM_ADDRESS, to, subject, body)
}

impl Realm {
    pub fn new(cfg: RealmConfig, lock: Arc<LockService>, store: Arc<JournalStore>, gateway: Gateway) -> Result<Self, RealmError> {
        Self::with_directory(cfg, lock, store, gateway, Arc::new(WorldDirectory::new()))
    }

    pub fn with_directory(
        cfg: RealmConfig,
        lock: Arc<LockService>,
        store: Arc<JournalStore>,
        gateway: Gateway,
        directory: Arc<WorldDirectory>,
    ) -> Result<Self, RealmError> {
        let lock_events = lock.register_realm(&cfg.id)?;
        for addr in &cfg.world.addresses {
            directory.register(&cfg.world.id, addr);
        }
        Ok(Realm {
            cfg,
            lock,
            lock_events,
            store,
            gateway,
            directory,
            peers: None,
            agents: HashMap::new(),
            sessions: HashMap::new(),
            next_conn: 1,
            robots: HashMap::new(),
            inbox: VecDeque::new(),
            waiting: HashMap::new(),
            events: Vec::new(),
            origins: Vec::new(),
        })
    }

    /// Joins a bus so queued messages can follow an agent to its new owner.
    pub fn join_peers(&mut self, bus: Arc<PeerBus>) {
        let rx = bus.join(&self.cfg.id);
        self.peers = Some((bus, rx));
    }

    pub fn id(&self) -> &str {
        &self.cfg.id
    }

    pub fn world(&self) -> &World {
        &self.cfg.world
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Hosts an in-process robot at `address`.
    pub fn add_robot(&mut self, address: &str, robot: Box<dyn Robot>) {
        self.cfg.world.register_robot(address, RobotEndpoint::InProcess);
        self.directory.register(&self.cfg.world.id, address);
        self.robots.insert(address_key(address), robot);
    }

    /// Declares a robot that connects over the wire as an ordinary client.
    pub fn add_remote_robot(&mut self, address: &str) {
        self.cfg.world.register_robot(address, RobotEndpoint::Remote);
        self.directory.register(&self.cfg.world.id, address);
    }

    pub fn connect(&mut self, address: &str) -> Result<ConnId, RealmError> {
        let addr = self.cfg.world.parse(address)?;
        if matches!(addr.kind(), ActorKind::Agent | ActorKind::System) {
            return Err(RealmError::ReservedAddress(address.to_string()));
        }
        self.cfg.world.register(&addr);
        self.directory.register(&self.cfg.world.id, address);
        let conn = self.next_conn;
        self.next_conn += 1;
        self.sessions.insert(conn, addr);
        Ok(conn)
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.sessions.remove(&conn);
    }

    pub fn session_address(&self, conn: ConnId) -> Option<&Address> {
        self.sessions.get(&conn)
    }

    /// Accepts a message from a client session and queues it.
    pub fn ingest(&mut self, conn: ConnId, mut msg: Message) -> Result<(), RealmError> {
        let session = self.sessions.get(&conn).ok_or(RealmError::UnknownSession(conn))?;
        let claimed = msg.from_addr().unwrap_or("").to_string();
        if address_key(&claimed) != session.key() {
            return Err(RealmError::SpoofedSender { claimed, session: session.to_string() });
        }
        let recipients: Vec<String> = msg.to_addrs().iter().map(|s| s.to_string()).collect();
        if recipients.is_empty() {
            return Err(RealmError::Address(AddressError::MalformedAddress(String::new())));
        }
        for to in &recipients {
            self.cfg.world.parse(to)?;
            if self.directory.is_foreign(&self.cfg.world.id, to) {
                return Err(RealmError::WorldViolation(to.clone()));
            }
        }
        msg.envelope_from = claimed;
        msg.headers.remove(X_SERIAL);
        self.enqueue(msg, 0);
        Ok(())
    }

    fn enqueue(&mut self, mut msg: Message, depth: u32) {
        msg.headers.set(X_REALM, &self.cfg.id);
        self.inbox.push_back(Item::new(msg, depth));
    }

    pub fn route(&self, msg: &Message) -> Vec<RoutingDecision> {
        msg.to_addrs()
            .iter()
            .map(|to| {
                let Ok(addr) = self.cfg.world.parse(to) else {
                    return RoutingDecision::DeadLetter(to.to_string());
                };
                match addr.kind() {
                    ActorKind::Agent => RoutingDecision::ToAgent(addr),
                    ActorKind::System => RoutingDecision::ToSystem,
                    kind => {
                        let conns: Vec<ConnId> =
                            self.sessions.iter().filter(|(_, a)| a.key() == addr.key()).map(|(c, _)| *c).collect();
                        if kind == ActorKind::Robot && self.robots.contains_key(&addr.key()) {
                            RoutingDecision::ToRobot(addr)
                        } else if !conns.is_empty() {
                            let mut conns = conns;
                            conns.sort_unstable();
                            RoutingDecision::ToClientSession(addr, conns)
                        } else {
                            RoutingDecision::DeadLetter(to.to_string())
                        }
                    }
                }
            })
            .collect()
    }

    pub fn take_events(&mut self) -> Vec<RealmEvent> {
        std::mem::take(&mut self.events)
    }

    /// How agents were materialized, in order.
    pub fn origins(&self) -> &[(String, AgentOrigin)] {
        &self.origins
    }

    pub fn memory(&self, agent: &Address) -> Option<&AgentMemory> {
        self.agents.get(agent).map(|s| &s.memory)
    }

    /// Journal entries for `agent`, from memory when held here, else from storage.
    pub fn journal_snapshot(&self, agent: &Address) -> Result<Option<Vec<Message>>, RealmError> {
        if let Some(slot) = self.agents.get(agent) {
            return Ok(Some(slot.memory.journal.entries.clone()));
        }
        if !self.store.exists(agent) {
            return Ok(None);
        }
        Ok(Some(self.store.load_recovering(agent)?.memory.journal.entries))
    }

    /// Replays the live journal when held here, otherwise checks storage.
    pub fn verify(&self, agent: &Address) -> Result<ReplayReport, RealmError> {
        match self.agents.get(agent) {
            Some(slot) => slot.memory.verify().map_err(|e| RealmError::Store(e.into())),
            None => Ok(self.store.verify(agent)?),
        }
    }

    pub fn owned_agents(&self) -> Vec<Address> {
        self.agents.keys().cloned().collect()
    }

    pub fn is_idle(&self) -> bool {
        self.inbox.is_empty()
    }

    pub fn queued(&self) -> usize {
        self.inbox.len() + self.waiting.values().map(VecDeque::len).sum::<usize>()
    }

    /// Handles lock notifications and forwarded messages. Returns whether anything happened.
    pub fn poll(&mut self) -> bool {
        let mut progressed = false;
        if let Some((_, rx)) = &self.peers {
            let forwarded: Vec<Forwarded> = rx.try_iter().collect();
            for f in forwarded {
                progressed = true;
                self.accept_forwarded(f);
            }
        }
        let events: Vec<LockEvent> = self.lock_events.try_iter().collect();
        for ev in events {
            progressed = true;
            match ev {
                LockEvent::ReleaseRequested { agent, requester } => {
                    if let Err(e) = self.transfer_context(&agent, &requester) {
                        self.events.push(RealmEvent::Alarm(e.to_string()));
                    }
                }
                LockEvent::Granted { agent, epoch } => self.granted(agent, epoch),
                LockEvent::Revoked { agent, epoch } => {
                    self.agents.remove(&agent);
                    self.events.push(RealmEvent::Alarm(format!("lease on {agent} revoked at epoch {epoch}")));
                }
            }
        }
        let now = Instant::now();
        let keys: Vec<String> = self.robots.keys().cloned().collect();
        for key in keys {
            let out = self.robots.get_mut(&key).map(|r| r.tick(now)).unwrap_or_default();
            for m in out {
                progressed = true;
                self.enqueue(m, 0);
            }
        }
        progressed
    }

    fn accept_forwarded(&mut self, f: Forwarded) {
        let recipient = f.msg.to_addrs().iter().find_map(|t| self.cfg.world.parse(t).ok().filter(Address::is_agent));
        match recipient {
            Some(agent) if self.waiting.contains_key(&agent) => {
                // forwarded items arrived at the previous owner first
                let q = self.waiting.get_mut(&agent).expect("checked");
                let pos = q.iter().take_while(|i| i.forwarded).count();
                q.insert(pos, Item { msg: f.msg, depth: f.depth, forwarded: true });
            }
            _ => self.inbox.push_back(Item::new(f.msg, f.depth)),
        }
    }

    fn granted(&mut self, agent: Address, epoch: u64) {
        let queued = self.waiting.remove(&agent).unwrap_or_default();
        if let Err(e) = self.materialize(&agent, epoch, queued.front().map(|i| &i.msg)) {
            self.events.push(RealmEvent::Alarm(e.to_string()));
            return;
        }
        // granted items go first, ahead of anything that arrived meanwhile
        for mut item in queued.into_iter().rev() {
            item.forwarded = false;
            self.inbox.push_front(item);
        }
    }

    /// Processes one inbox item. Returns false when the inbox was empty.
    pub fn step(&mut self) -> bool {
        self.poll();
        let Some(item) = self.inbox.pop_front() else {
            return false;
        };
        self.dispatch(item);
        self.flush();
        true
    }

    /// Steps until nothing is left to do.
    pub fn run_until_idle(&mut self) {
        while self.step() || self.poll() {}
    }

    fn dispatch(&mut self, item: Item) {
        // depth-first: everything caused by this item is handled before the next inbox item
        let mut stack = vec![item];
        while let Some(item) = stack.pop() {
            let mut produced = self.deliver(item);
            produced.reverse();
            stack.extend(produced);
        }
    }

    /// Routes one message to every recipient; returns follow-up messages.
    fn deliver(&mut self, item: Item) -> Vec<Item> {
        let mut follow = Vec::new();
        let sender = item.msg.from_addr().unwrap_or("").to_string();
        for decision in self.route(&item.msg) {
            match decision {
                RoutingDecision::ToAgent(agent) => {
                    if agent.key() == address_key(&sender) {
                        continue;
                    }
                    follow.extend(self.deliver_to_agent(&agent, item.clone()));
                }
                RoutingDecision::ToSystem => follow.extend(self.deliver_to_system(&item)),
                RoutingDecision::ToRobot(robot) => {
                    let replies = self.robots.get_mut(&robot.key()).map(|r| r.handle(&item.msg)).unwrap_or_default();
                    for mut r in replies {
                        r.headers.set(X_REALM, &self.cfg.id);
                        follow.push(Item::new(r, item.depth));
                    }
                }
                RoutingDecision::ToClientSession(_, conns) => {
                    for conn in conns {
                        self.events.push(RealmEvent::Deliver { conn, msg: item.msg.clone() });
                    }
                }
                RoutingDecision::DeadLetter(to) => self.bounce(&sender, &item.msg, &format!("No route to {to}: the address is not connected.")),
            }
        }
        follow
    }

    /// Tells `sender` that `msg` could not be delivered. Agents get the notice
    /// in their journal without a completion, clients get it on their session.
    fn bounce(&mut self, sender: &str, msg: &Message, reason: &str) {
        let body = format!("{reason}\n\nOriginal subject: {}\n", msg.subject());
        let n = notice(sender, &format!("Undeliverable: {}", msg.subject()), &body);
        if let Ok(addr) = self.cfg.world.parse(sender) {
            if addr.is_agent() {
                if self.agents.contains_key(&addr) {
                    self.record(&addr, n);
                }
                return;
            }
            let conns: Vec<ConnId> = self.sessions.iter().filter(|(_, a)| a.key() == addr.key()).map(|(c, _)| *c).collect();
            for conn in conns {
                self.events.push(RealmEvent::Deliver { conn, msg: n.clone() });
            }
        }
    }

    /// Appends to an agent's memory and announces it.
    fn record(&mut self, agent: &Address, msg: Message) -> bool {
        let Some(slot) = self.agents.get_mut(agent) else {
            return false;
        };
        match slot.memory.append(msg) {
            Ok(_) => {
                slot.dirty = true;
                let index = slot.memory.journal.entries.len() - 1;
                let stored = slot.memory.journal.entries[index].clone();
                self.events.push(RealmEvent::Appended { agent: agent.to_string(), index, msg: stored });
                true
            }
            Err(e) => {
                self.events.push(RealmEvent::Alarm(format!("{agent}: {e}")));
                false
            }
        }
    }

    fn announce_since(&mut self, agent: &Address, from: usize) {
        if let Some(slot) = self.agents.get(agent) {
            for (i, m) in slot.memory.journal.entries.iter().enumerate().skip(from) {
                self.events.push(RealmEvent::Appended { agent: agent.to_string(), index: i, msg: m.clone() });
            }
        }
    }

    /// Makes sure this realm holds `agent`. Returns false when the item had to wait.
    fn hold(&mut self, agent: &Address, item: &Item) -> bool {
        if self.agents.contains_key(agent) {
            return true;
        }
        if let Some(q) = self.waiting.get_mut(agent) {
            q.push_back(item.clone());
            return false;
        }
        match self.lock.acquire(agent, &self.cfg.id) {
            Ok(Acquire::Granted(epoch)) => match self.materialize(agent, epoch, Some(&item.msg)) {
                Ok(()) => true,
                Err(e) => {
                    self.events.push(RealmEvent::Alarm(e.to_string()));
                    false
                }
            },
            Ok(Acquire::MustWait(_)) => {
                self.waiting.entry(agent.clone()).or_default().push_back(item.clone());
                false
            }
            Err(e) => {
                self.events.push(RealmEvent::Alarm(e.to_string()));
                false
            }
        }
    }

    /// Loads, clones or creates the memory of an agent whose lease we now hold.
    fn materialize(&mut self, agent: &Address, lease: u64, trigger: Option<&Message>) -> Result<(), RealmError> {
        let (memory, origin) = self.ensure_agent(agent, trigger)?;
        let fresh = memory.journal.persisted_offset < memory.journal.entries.len();
        self.cfg.world.register(agent);
        self.directory.register(&self.cfg.world.id, &agent.to_string());
        self.origins.push((agent.to_string(), origin));
        self.agents.insert(agent.clone(), Slot { memory, lease, last_render: None, dirty: fresh });
        if fresh {
            self.announce_since(agent, 0);
        }
        Ok(())
    }

    /// Existing agent, clone of a parent, or a fresh empty agent.
    pub fn ensure_agent(&self, agent: &Address, trigger: Option<&Message>) -> Result<(AgentMemory, AgentOrigin), RealmError> {
        if let Some(slot) = self.agents.get(agent) {
            return Ok((slot.memory.clone(), AgentOrigin::Existing));
        }
        if self.store.exists(agent) {
            let loaded = self.store.load_recovering(agent)?;
            if let Some(problem) = loaded.corruption {
                log::warn!("{agent}: {problem}");
            }
            return Ok((loaded.memory, AgentOrigin::Loaded));
        }
        let explicit = trigger.and_then(|m| m.headers.get(X_CLONE_FROM)).and_then(|s| self.cfg.world.parse(s).ok()).filter(Address::is_agent);
        for parent in explicit.into_iter().chain(agent.clone_parent()) {
            if let Some(cells) = self.context_of(&parent)? {
                return Ok((AgentMemory::cloned_from(agent.clone(), &cells), AgentOrigin::Cloned(parent.to_string())));
            }
        }
        Ok((AgentMemory::new(agent.clone()), AgentOrigin::Created))
    }

    /// Current context cells of `agent`, wherever they live.
    fn context_of(&self, agent: &Address) -> Result<Option<Vec<crate::message::Message>>, RealmError> {
        if let Some(slot) = self.agents.get(agent) {
            return Ok(Some(slot.memory.context.cells.clone()));
        }
        if !self.store.exists(agent) {
            return Ok(None);
        }
        Ok(Some(self.store.load_recovering(agent)?.memory.context.cells))
    }

    fn deliver_to_agent(&mut self, agent: &Address, item: Item) -> Vec<Item> {
        if !self.hold(agent, &item) {
            return Vec::new();
        }
        if item.depth > self.cfg.max_depth {
            self.record(agent, item.msg.clone());
            let n = notice(&agent.to_string(), "Hop limit reached", &format!("Message not processed: more than {} agent hops.\n", self.cfg.max_depth));
            self.record(agent, n);
            return Vec::new();
        }
        if !self.record(agent, item.msg.clone()) {
            return Vec::new();
        }
        self.agent_step(agent, &item.msg, item.depth)
    }

    /// Runs one completion for `agent`, whose memory already ends with `trigger`.
    fn agent_step(&mut self, agent: &Address, trigger: &Message, depth: u32) -> Vec<Item> {
        let me = agent.to_string();
        let backend = match self.gateway.select(trigger.headers.get(X_HINT_MODEL)) {
            Ok(b) => b,
            Err(e) => {
                self.record(agent, notice(&me, "Model selection failed", &format!("{e}\n")));
                let sender = trigger.from_addr().unwrap_or("").to_string();
                if !is_system_address(&sender) {
                    self.bounce(&sender, trigger, &format!("The message to {me} was not answered: {e}"));
                }
                return Vec::new();
            }
        };

        for attempt in 0..2 {
            let render = {
                let slot = self.agents.get_mut(agent).expect("held");
                let r = slot.memory.render();
                slot.last_render = Some(r.clone());
                r
            };
            let mut req = CompletionRequest::new(&me, render.to_mbox(), backend.clone());
            req.timeout = self.cfg.completion_timeout;
            req.max_output_tokens = self.cfg.max_output_tokens;
            let result = match self.gateway.complete(&req) {
                Ok(r) => r,
                Err(e) => {
                    let subject = match e {
                        GatewayError::BackendTimeout(_) => "Model timeout",
                        _ => "Model error",
                    };
                    self.record(agent, notice(&me, subject, &format!("{e}\n")));
                    return Vec::new();
                }
            };
            match parse_message(&result.raw_output) {
                Ok(outputs) => return self.emit(agent, trigger, outputs, result.total_tokens, depth),
                Err(e) => {
                    let body = format!("Your output could not be parsed as mbox: {e}\nOnly generate well-formed messages.\n");
                    self.record(agent, notice(&me, "Output unparseable", &body));
                    if attempt == 1 {
                        return Vec::new();
                    }
                }
            }
        }
        Vec::new()
    }

    fn emit(&mut self, agent: &Address, trigger: &Message, outputs: Vec<Message>, tokens: u64, depth: u32) -> Vec<Item> {
        let me = agent.to_string();
        let mut follow = Vec::new();
        for mut out in outputs {
            out.set_from(&me);
            if out.to_addrs().is_empty() {
                out.headers.set("To", trigger.from_addr().unwrap_or(SYSTEM_ADDRESS));
            }
            if out.headers.get("Subject").is_none() {
                out.headers.set("Subject", &format!("Re: {}", trigger.subject()));
            }
            out.headers.remove(X_SERIAL);
            out.headers.set(X_TOTAL_TOKENS, &tokens.to_string());
            out.headers.set(X_REALM, &self.cfg.id);

            let to_system = out.to_addrs().iter().any(|t| is_system_address(t));
            if to_system {
                follow.extend(self.handle_system(agent, out, depth));
                continue;
            }
            if self.record(agent, out) {
                // route the stored copy, which carries its X-Serial
                let stored = self.agents[agent].memory.journal.entries.last().cloned().expect("just appended");
                follow.push(Item::new(stored, depth + 1));
            }
        }
        follow
    }

    fn deliver_to_system(&mut self, item: &Item) -> Vec<Item> {
        let sender = item.msg.from_addr().unwrap_or("").to_string();
        match self.cfg.world.parse(&sender) {
            Ok(addr) if addr.is_agent() && self.agents.contains_key(&addr) => self.handle_system(&addr, item.msg.clone(), item.depth),
            _ => {
                let help = notice(&sender, &format!("Re: {}", item.msg.subject()), HELP);
                vec![Item::new(help, item.depth)]
            }
        }
    }

    /// Executes a system command from `agent`. The command and the system's
    /// answer are journaled and the answer is fed to the agent as its next input.
    pub fn handle_system_now(&mut self, agent: &Address, msg: Message) {
        let follow = self.handle_system(agent, msg, 0);
        for item in follow {
            self.dispatch(item);
        }
        self.flush();
    }

    fn handle_system(&mut self, agent: &Address, msg: Message, depth: u32) -> Vec<Item> {
        let me = agent.to_string();
        let reply_subject = format!("Re: {}", msg.subject());
        let answer = if msr_range(msg.subject()).is_none() {
            Err(HELP.to_string())
        } else {
            let slot = self.agents.get_mut(agent).expect("held");
            let render = match slot.last_render.clone() {
                Some(r) => r,
                None => slot.memory.render(),
            };
            let before = slot.memory.journal.entries.len();
            match parse_msr(&msg, &render).and_then(|cmd| slot.memory.apply_msr(cmd)) {
                Ok(_) => {
                    slot.dirty = true;
                    slot.last_render = None;
                    Ok(before)
                }
                Err(e) => Err(format!("Memory segment rewriting rejected: {e}\n")),
            }
        };
        match answer {
            Ok(before) => {
                self.announce_since(agent, before);
                let confirmation = self.agents[agent].memory.journal.entries.last().cloned().expect("confirmation appended");
                if depth >= self.cfg.max_depth {
                    return Vec::new();
                }
                self.agent_step(agent, &confirmation, depth + 1)
            }
            Err(body) => {
                self.record(agent, msg);
                let reply = notice(&me, &reply_subject, &body);
                self.record(agent, reply.clone());
                if depth >= self.cfg.max_depth {
                    return Vec::new();
                }
                self.agent_step(agent, &reply, depth + 1)
            }
        }
    }

    /// Persists journals and contexts that changed.
    pub fn flush(&mut self) {
        let dirty: Vec<Address> = self.agents.iter().filter(|(_, s)| s.dirty).map(|(a, _)| a.clone()).collect();
        for agent in dirty {
            if let Err(e) = self.persist(&agent) {
                self.events.push(RealmEvent::Alarm(e.to_string()));
            }
        }
    }

    fn persist(&mut self, agent: &Address) -> Result<(), RealmError> {
        let slot = self.agents.get_mut(agent).expect("held");
        let wrap = |source| RealmError::PersistFailure { agent: agent.to_string(), source };
        self.store.persist(&mut slot.memory.journal, slot.lease).map_err(wrap)?;
        self.store.persist_context(&slot.memory.context, slot.lease).map_err(wrap)?;
        slot.dirty = false;
        Ok(())
    }

    /// Hands `agent` over: persist, release with attestation, then forward
    /// any messages still queued here for it. On persist failure the lease is kept.
    pub fn transfer_context(&mut self, agent: &Address, requester: &str) -> Result<(), RealmError> {
        if !self.agents.contains_key(agent) {
            return Ok(());
        }
        self.persist(agent)?;
        let mut pending = Vec::new();
        let mut kept = VecDeque::new();
        for item in self.inbox.drain(..) {
            if item.msg.to_addrs().iter().any(|t| address_key(t) == agent.key()) {
                pending.push(item);
            } else {
                kept.push_back(item);
            }
        }
        self.inbox = kept;
        let target = requester.to_string();
        let forwarded = match &self.peers {
            Some((bus, _)) => pending.iter().all(|i| bus.send(&target, Forwarded { msg: i.msg.clone(), depth: i.depth })),
            None => pending.is_empty(),
        };
        if !forwarded {
            self.events.push(RealmEvent::Alarm(format!("could not forward queued messages for {agent} to {target}")));
        }
        self.agents.remove(agent);
        self.lock.release(agent, &self.cfg.id, true)?;
        Ok(())
    }

    /// Persists everything and releases every lease.
    pub fn shutdown(&mut self) -> Result<(), RealmError> {
        let agents: Vec<Address> = self.agents.keys().cloned().collect();
        for agent in agents {
            self.persist(&agent)?;
            self.agents.remove(&agent);
            self.lock.release(&agent, &self.cfg.id, true)?;
        }
        for agent in self.waiting.keys() {
            self.lock.cancel_wait(agent, &self.cfg.id);
        }
        self.lock.unregister_realm(&self.cfg.id);
        Ok(())
    }
}

const HELP: &str = "The system address understands one command:\n\n  Subject: MSR <first>-<last>\n\nsent by an agent, which replaces context cells <first> through <last>\n(inclusive, numbered by X-Serial) with the message itself.\n";
