use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio_tungstenite::tungstenite::Message as WsMessage;

use super::{read_frame_async, write_frame_async, Frame, NetError};
use crate::address::World;
use crate::lock::{Acquire, LockEvent, LockService};
use crate::memory::involves_system;
use crate::message::{parse_mbox, serialize_mbox, Message, X_SERIAL};
use crate::realm::{ConnId, Realm, RealmError, RealmEvent};

type Out = mpsc::UnboundedSender<Frame>;

enum Command {
    Connect { address: String, out: Out, reply: oneshot::Sender<Result<(ConnId, String), RealmError>> },
    Disconnect(ConnId),
    Send { conn: ConnId, msg: Message, reply: oneshot::Sender<Result<(), RealmError>> },
    Tail { conn: ConnId, agent: String, from: u64, user_view: bool, follow: bool },
    Verify { agent: String, reply: oneshot::Sender<Frame> },
    Shutdown,
}

/// The thread that owns a [`Realm`]. Shutting it down (or dropping it)
/// persists and releases every agent the realm holds.
pub struct RealmThread {
    tx: Option<Sender<Command>>,
    join: Option<JoinHandle<Result<(), RealmError>>>,
}

impl RealmThread {
    pub fn shutdown(mut self) -> Result<(), RealmError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<(), RealmError> {
        if let Some(tx) = self.tx.take() {
            let _ = tx.send(Command::Shutdown);
        }
        match self.join.take() {
            Some(j) => j.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}

impl Drop for RealmThread {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

struct Subscriber {
    conn: ConnId,
    user_view: bool,
}

fn run_realm(mut realm: Realm, rx: Receiver<Command>) -> Result<(), RealmError> {
    let mut outs: HashMap<ConnId, Out> = HashMap::new();
    let mut subs: HashMap<String, Vec<Subscriber>> = HashMap::new();
    loop {
        match rx.recv_timeout(Duration::from_millis(25)) {
            Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Ok(cmd) => handle_command(&mut realm, cmd, &mut outs, &mut subs),
            Err(RecvTimeoutError::Timeout) => {}
        }
        realm.poll();
        realm.run_until_idle();
        dispatch(&mut realm, &outs, &subs);
    }
    let res = realm.shutdown();
    dispatch(&mut realm, &outs, &subs);
    res
}

fn handle_command(realm: &mut Realm, cmd: Command, outs: &mut HashMap<ConnId, Out>, subs: &mut HashMap<String, Vec<Subscriber>>) {
    match cmd {
        Command::Connect { address, out, reply } => {
            let res = realm.connect(&address).map(|conn| {
                outs.insert(conn, out);
                (conn, realm.session_address(conn).map(ToString::to_string).unwrap_or(address))
            });
            let _ = reply.send(res);
        }
        Command::Disconnect(conn) => {
            realm.disconnect(conn);
            outs.remove(&conn);
            for list in subs.values_mut() {
                list.retain(|s| s.conn != conn);
            }
        }
        Command::Send { conn, msg, reply } => {
            let _ = reply.send(realm.ingest(conn, msg));
        }
        Command::Tail { conn, agent, from, user_view, follow } => {
            let Some(out) = outs.get(&conn) else { return };
            let addr = match realm.world().parse(&agent) {
                Ok(a) => a,
                Err(e) => {
                    let _ = out.send(Frame::error("BadAddress", e.to_string()));
                    return;
                }
            };
            let entries = match realm.journal_snapshot(&addr) {
                Ok(Some(e)) => e,
                Ok(None) => {
                    let _ = out.send(Frame::error("UnknownAgent", addr.to_string()));
                    return;
                }
                Err(e) => {
                    let _ = out.send(Frame::error(error_code(&e), e.to_string()));
                    return;
                }
            };
            let key = addr.to_string();
            for (i, msg) in entries.iter().enumerate().skip(from as usize) {
                if user_view && involves_system(msg) {
                    continue;
                }
                let _ = out.send(journal_frame(&key, i, msg));
            }
            let _ = out.send(Frame::TailEnd { agent: key.clone(), next_offset: entries.len() as u64 });
            if follow {
                subs.entry(key).or_default().push(Subscriber { conn, user_view });
            }
        }
        Command::Verify { agent, reply } => {
            let frame = match realm.world().parse(&agent) {
                Err(e) => Frame::error("BadAddress", e.to_string()),
                Ok(addr) => match realm.verify(&addr) {
                    Ok(r) => Frame::VerifyReport { agent: addr.to_string(), ok: true, journal_len: r.journal_len as u64, detail: None },
                    Err(e) => Frame::VerifyReport { agent: addr.to_string(), ok: false, journal_len: 0, detail: Some(e.to_string()) },
                },
            };
            let _ = reply.send(frame);
        }
        Command::Shutdown => {}
    }
}

fn journal_frame(agent: &str, index: usize, msg: &Message) -> Frame {
    Frame::Deliver { mbox: serialize_mbox(std::slice::from_ref(msg)), serial: Some(index as u64), agent: Some(agent.to_string()) }
}

fn dispatch(realm: &mut Realm, outs: &HashMap<ConnId, Out>, subs: &HashMap<String, Vec<Subscriber>>) {
    for ev in realm.take_events() {
        match ev {
            RealmEvent::Deliver { conn, msg } => {
                if let Some(out) = outs.get(&conn) {
                    let serial = msg.headers.get(X_SERIAL).and_then(|s| s.trim().parse().ok());
                    let _ = out.send(Frame::Deliver { mbox: serialize_mbox(std::slice::from_ref(&msg)), serial, agent: None });
                }
            }
            RealmEvent::Appended { agent, index, msg } => {
                for s in subs.get(&agent).into_iter().flatten() {
                    if s.user_view && involves_system(&msg) {
                        continue;
                    }
                    if let Some(out) = outs.get(&s.conn) {
                        let _ = out.send(journal_frame(&agent, index, &msg));
                    }
                }
            }
            RealmEvent::Alarm(text) => log::warn!("{}: {text}", realm.id()),
        }
    }
}

fn error_code(e: &RealmError) -> &'static str {
    match e {
        RealmError::SpoofedSender { .. } => "SpoofedSender",
        RealmError::WorldViolation(_) => "WorldViolation",
        RealmError::UnknownSession(_) => "UnknownSession",
        RealmError::ReservedAddress(_) => "ReservedAddress",
        RealmError::Address(_) => "BadAddress",
        RealmError::Lock(_) => "Lock",
        RealmError::PersistFailure { .. } => "PersistFailure",
        RealmError::Store(_) => "Storage",
    }
}

#[derive(Debug, Clone, Default)]
pub struct HubConfig {
    /// Required in HELLO when set.
    pub auth_token: Option<String>,
    /// Required by FORCE_RELEASE. Force release is refused when unset.
    pub admin_token: Option<String>,
}

/// Shared state for every connection served by one realm.
pub struct Hub {
    tx: Sender<Command>,
    lock: Arc<LockService>,
    realm_id: String,
    world: World,
    cfg: HubConfig,
}

impl Hub {
    /// Moves `realm` onto its own thread.
    pub fn start(realm: Realm, lock: Arc<LockService>, cfg: HubConfig) -> (Arc<Hub>, RealmThread) {
        let (tx, rx) = crossbeam_channel::unbounded();
        let realm_id = realm.id().to_string();
        let world = realm.world().clone();
        let join = thread::Builder::new()
            .name(format!("realm-{realm_id}"))
            .spawn(move || run_realm(realm, rx))
            .expect("spawn realm thread");
        let hub = Arc::new(Hub { tx: tx.clone(), lock, realm_id, world, cfg });
        (hub, RealmThread { tx: Some(tx), join: Some(join) })
    }

    async fn session(self: Arc<Self>, mut inbound: mpsc::Receiver<Frame>, out: Out) {
        let Some(first) = inbound.recv().await else { return };
        let Some(conn) = self.hello(first, &out).await else { return };
        let mut remote_realms = HashSet::new();
        while let Some(frame) = inbound.recv().await {
            let reply = self.handle(conn, frame, &out, &mut remote_realms).await;
            if let Some(f) = reply {
                if out.send(f).is_err() {
                    break;
                }
            }
        }
        for r in &remote_realms {
            self.lock.unregister_realm(r);
        }
        let _ = self.tx.send(Command::Disconnect(conn));
    }

    async fn hello(&self, frame: Frame, out: &Out) -> Option<ConnId> {
        let Frame::Hello { world, address, token } = frame else {
            let _ = out.send(Frame::error("ExpectedHello", "the first frame must be HELLO"));
            return None;
        };
        if self.cfg.auth_token.is_some() && token != self.cfg.auth_token {
            let _ = out.send(Frame::error("Unauthorized", "bad or missing token"));
            return None;
        }
        if world != self.world.id.0 {
            let _ = out.send(Frame::error("WorldViolation", format!("this realm serves world {}", self.world.id.0)));
            return None;
        }
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Connect { address, out: out.clone(), reply }).ok()?;
        match rx.await.ok()? {
            Ok((conn, address)) => {
                let _ = out.send(Frame::Welcome { realm: self.realm_id.clone(), address });
                Some(conn)
            }
            Err(e) => {
                let _ = out.send(Frame::error(error_code(&e), e.to_string()));
                None
            }
        }
    }

    async fn handle(&self, conn: ConnId, frame: Frame, out: &Out, remote_realms: &mut HashSet<String>) -> Option<Frame> {
        match frame {
            Frame::Send { mbox } => {
                let msg = match parse_mbox(mbox.as_bytes()) {
                    Ok(mut v) if v.len() == 1 => v.remove(0),
                    Ok(v) => return Some(Frame::error("MalformedMessage", format!("expected one message, got {}", v.len()))),
                    Err(e) => return Some(Frame::error("MalformedMessage", e.to_string())),
                };
                let (reply, rx) = oneshot::channel();
                self.tx.send(Command::Send { conn, msg, reply }).ok()?;
                Some(match rx.await.ok()? {
                    Ok(()) => Frame::Accepted,
                    Err(e) => Frame::error(error_code(&e), e.to_string()),
                })
            }
            Frame::Tail { agent, from_offset, user_view, follow } => {
                self.tx.send(Command::Tail { conn, agent, from: from_offset, user_view, follow }).ok()?;
                None
            }
            Frame::Verify { agent } => {
                let (reply, rx) = oneshot::channel();
                self.tx.send(Command::Verify { agent, reply }).ok()?;
                rx.await.ok()
            }
            Frame::Owner { agent } => Some(match self.world.parse(&agent) {
                Ok(a) => {
                    let owner = self.lock.owner_of(&a);
                    Frame::OwnerIs { agent: a.to_string(), realm: owner.as_ref().map(|o| o.0.clone()), epoch: owner.map(|o| o.1) }
                }
                Err(e) => Frame::error("BadAddress", e.to_string()),
            }),
            Frame::ForceRelease { agent, admin_token } => {
                if self.cfg.admin_token.as_deref() != Some(admin_token.as_str()) {
                    return Some(Frame::error("Unauthorized", "force release needs the admin token"));
                }
                Some(match self.world.parse(&agent) {
                    Ok(a) => {
                        let next = self.lock.force_release(&a);
                        log::warn!("operator force-released {a}; next owner {next:?}");
                        let owner = self.lock.owner_of(&a);
                        Frame::OwnerIs { agent: a.to_string(), realm: owner.as_ref().map(|o| o.0.clone()), epoch: owner.map(|o| o.1) }
                    }
                    Err(e) => Frame::error("BadAddress", e.to_string()),
                })
            }
            Frame::Acquire { agent, realm } => {
                let a = match self.world.parse(&agent) {
                    Ok(a) => a,
                    Err(e) => return Some(Frame::error("BadAddress", e.to_string())),
                };
                if !remote_realms.contains(&realm) {
                    match self.lock.register_realm(&realm) {
                        Ok(events) => {
                            forward_lock_events(events, out.clone());
                            remote_realms.insert(realm.clone());
                        }
                        Err(e) => return Some(Frame::error("Lock", e.to_string())),
                    }
                }
                Some(match self.lock.acquire(&a, &realm) {
                    Ok(Acquire::Granted(epoch)) => Frame::Granted { agent: a.to_string(), epoch },
                    Ok(Acquire::MustWait(owner)) => Frame::Wait { agent: a.to_string(), owner },
                    Err(e) => Frame::error("Lock", e.to_string()),
                })
            }
            Frame::Release { agent, realm, persisted } => {
                if !remote_realms.contains(&realm) {
                    return Some(Frame::error("Lock", format!("realm {realm} is not registered on this connection")));
                }
                Some(match self.world.parse(&agent) {
                    Ok(a) => match self.lock.release(&a, &realm, persisted) {
                        Ok(next) => Frame::Released { agent: a.to_string(), next: next.map(|n| n.0) },
                        Err(e) => Frame::error("Lock", e.to_string()),
                    },
                    Err(e) => Frame::error("BadAddress", e.to_string()),
                })
            }
            Frame::Hello { .. } => Some(Frame::error("UnexpectedFrame", "already greeted")),
            other => Some(Frame::error("UnexpectedFrame", format!("{other:?} is server-to-client only"))),
        }
    }
}

fn forward_lock_events(events: Receiver<LockEvent>, out: Out) {
    thread::spawn(move || {
        for ev in events {
            let f = match ev {
                LockEvent::ReleaseRequested { agent, requester } => Frame::ReleaseRequested { agent: agent.to_string(), requester },
                LockEvent::Granted { agent, epoch } => Frame::Granted { agent: agent.to_string(), epoch },
                LockEvent::Revoked { agent, epoch } => Frame::Revoked { agent: agent.to_string(), epoch },
            };
            if out.send(f).is_err() {
                break;
            }
        }
    });
}

/// Accepts length-prefixed TCP connections until the listener fails.
pub async fn serve_tcp(listener: TcpListener, hub: Arc<Hub>) -> Result<(), NetError> {
    loop {
        let (stream, peer) = listener.accept().await?;
        log::debug!("tcp connection from {peer}");
        tokio::spawn(tcp_conn(stream, hub.clone()));
    }
}

async fn tcp_conn(stream: TcpStream, hub: Arc<Hub>) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let errors = out_tx.clone();
    tokio::spawn(async move {
        while let Some(f) = out_rx.recv().await {
            if write_frame_async(&mut wr, &f).await.is_err() {
                break;
            }
        }
    });
    tokio::spawn(async move {
        loop {
            match read_frame_async(&mut rd).await {
                Ok(f) => {
                    if in_tx.send(f).await.is_err() {
                        break;
                    }
                }
                Err(NetError::Closed) => break,
                Err(e) => {
                    let _ = errors.send(Frame::error("BadFrame", e.to_string()));
                    break;
                }
            }
        }
    });
    hub.session(in_rx, out_tx).await;
}

/// Accepts WebSocket connections carrying one JSON frame per text message.
pub async fn serve_ws(listener: TcpListener, hub: Arc<Hub>) -> Result<(), NetError> {
    loop {
        let (stream, peer) = listener.accept().await?;
        log::debug!("websocket connection from {peer}");
        tokio::spawn(ws_conn(stream, hub.clone()));
    }
}

async fn ws_conn(stream: TcpStream, hub: Arc<Hub>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("websocket handshake failed: {e}");
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Frame>();
    let errors = out_tx.clone();
    tokio::spawn(async move {
        while let Some(f) = out_rx.recv().await {
            let text = serde_json::to_string(&f).expect("frames always serialize");
            if sink.send(WsMessage::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    tokio::spawn(async move {
        while let Some(Ok(m)) = source.next().await {
            let parsed = match m {
                WsMessage::Text(t) => serde_json::from_str::<Frame>(&t),
                WsMessage::Binary(b) => serde_json::from_slice::<Frame>(&b),
                WsMessage::Close(_) => break,
                _ => continue,
            };
            match parsed {
                Ok(f) => {
                    if in_tx.send(f).await.is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = errors.send(Frame::error("BadFrame", e.to_string()));
                }
            }
        }
    });
    hub.session(in_rx, out_tx).await;
}
