use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use agentmail_core::address::World;
use agentmail_core::memory::{replay, JournalStore, MemoryError, StoreConfig, StoreError};
use agentmail_core::message::{parse_mbox, serialize_mbox, Message, X_HINT_MODEL};
use agentmail_core::net::{Client, Frame};
use agentmail_core::robot::{SandboxConfig, ShellRobot};
use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use serde_json::json;

use crate::config::CliConfig;
use crate::{load_config, Conn, Exit};

pub fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

struct Ctx {
    conn: Conn,
    file: Option<CliConfig>,
}

impl Ctx {
    fn new(conn: Conn, config: Option<&PathBuf>) -> Result<Self> {
        init_logging("warn");
        Ok(Ctx { conn, file: load_config(config)? })
    }

    fn world(&self) -> Result<String> {
        match (&self.conn.world, &self.file) {
            (Some(w), _) => Ok(w.clone()),
            (None, Some(f)) => Ok(f.world.clone()),
            (None, None) => Err(Exit::Config("no world given (--world, AGENTMAIL_WORLD or a config file)".into()).into()),
        }
    }

    fn token(&self) -> Option<String> {
        self.conn.token.clone().or_else(|| self.file.as_ref().and_then(|f| f.auth_token.clone()))
    }

    fn connect(&self, address: &str) -> Result<Client> {
        let server = self.conn.server.trim_start_matches("tcp://").trim_end_matches('/');
        let client = Client::connect(server, &self.world()?, address, self.token().as_deref())
            .with_context(|| format!("connecting to {server} as {address}"))?;
        Ok(client)
    }

    fn store(&self, storage: Option<PathBuf>) -> Result<Option<JournalStore>> {
        let root = storage.or_else(|| self.file.as_ref().map(|f| f.storage.clone()));
        root.map(|root| {
            if !root.is_dir() {
                return Err(Exit::Config(format!("storage root {} does not exist", root.display())).into());
            }
            JournalStore::new(StoreConfig { root, fsync: false }).map_err(|e| anyhow::Error::from(Exit::Config(e.to_string())))
        })
        .transpose()
    }
}

fn print_message(json: bool, msg: &Message, serial: Option<u64>, agent: Option<&str>) {
    if json {
        let line = json!({
            "agent": agent,
            "serial": serial,
            "from": msg.from_addr(),
            "to": msg.to_addrs(),
            "subject": msg.subject(),
            "mbox": serialize_mbox(std::slice::from_ref(msg)),
        });
        println!("{line}");
    } else {
        print!("{}", serialize_mbox(std::slice::from_ref(msg)));
    }
    let _ = io::stdout().flush();
}

fn single(mbox: &str) -> Result<Message> {
    let mut v = parse_mbox(mbox.as_bytes()).context("server sent a malformed message")?;
    if v.len() != 1 {
        bail!("expected one message per frame, got {}", v.len());
    }
    Ok(v.remove(0))
}

#[derive(Args, Debug)]
pub struct SendArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long)]
    to: String,
    /// Sender; the session is opened under this address.
    #[arg(long, env = "AGENTMAIL_FROM")]
    from: String,
    #[arg(long, short, default_value = "")]
    subject: String,
    /// Body text; read from stdin when absent.
    #[arg(long, short)]
    body: Option<String>,
    /// Backend hint, `provider.model` (sets X-Hint-Model).
    #[arg(long)]
    hint: Option<String>,
    /// Extra header, `Name: value`. Repeatable.
    #[arg(long = "header", short = 'H')]
    headers: Vec<String>,
    /// Return once the server accepts the message.
    #[arg(long)]
    no_wait: bool,
    /// Stop after this long without a reply.
    #[arg(long, default_value_t = 2000)]
    quiet_ms: u64,
    /// Give up waiting after this many seconds in total.
    #[arg(long, default_value_t = 300)]
    max_wait_secs: u64,
}

pub fn send(a: SendArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let ctx = Ctx::new(a.conn.clone(), config)?;
    let body = match a.body {
        Some(b) => b,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading body from stdin")?;
            s
        }
    };
    let mut msg = Message::new(&a.from, &a.to, &a.subject, &body);
    if let Some(h) = &a.hint {
        msg = msg.with_header(X_HINT_MODEL, h);
    }
    for h in &a.headers {
        let (name, value) = h.split_once(':').ok_or_else(|| Exit::Config(format!("header {h:?} is not `Name: value`")))?;
        msg = msg.with_header(name.trim(), value.trim());
    }
    let mut client = ctx.connect(&a.from)?;
    client.send_message(&msg)?;
    if json {
        println!("{}", json!({ "event": "accepted", "realm": client.realm() }));
    }
    if a.no_wait {
        return Ok(());
    }
    let quiet = Duration::from_millis(a.quiet_ms);
    let deadline = Instant::now() + Duration::from_secs(a.max_wait_secs);
    let mut delivered = 0;
    while let Some(left) = deadline.checked_duration_since(Instant::now()) {
        match client.recv(Some(quiet.min(left)))? {
            Some(Frame::Deliver { mbox, serial, agent: None }) => {
                print_message(json, &single(&mbox)?, serial, None);
                delivered += 1;
            }
            Some(Frame::Error { code, detail }) => log::warn!("server error {code}: {detail}"),
            Some(_) => {}
            None => break,
        }
    }
    if json {
        println!("{}", json!({ "event": "quiet", "delivered": delivered }));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TailArgs {
    #[command(flatten)]
    conn: Conn,
    agent: String,
    /// First journal index to print.
    #[arg(long, default_value_t = 0)]
    from: u64,
    /// Hide traffic to and from the system address.
    #[arg(long)]
    user_view: bool,
    /// Keep streaming new entries.
    #[arg(long, short)]
    follow: bool,
    /// Session address used to connect.
    #[arg(long, default_value = "operator@localdomain")]
    r#as: String,
}

pub fn tail(a: TailArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let ctx = Ctx::new(a.conn.clone(), config)?;
    let mut client = ctx.connect(&a.r#as)?;
    stream_journal(&mut client, &a.agent, a.from, a.user_view, a.follow, |msg, serial, agent| {
        print_message(json, msg, serial, agent);
        Ok(())
    })?;
    Ok(())
}

fn stream_journal(
    client: &mut Client,
    agent: &str,
    from: u64,
    user_view: bool,
    follow: bool,
    mut each: impl FnMut(&Message, Option<u64>, Option<&str>) -> Result<()>,
) -> Result<u64> {
    client.send(&Frame::Tail { agent: agent.into(), from_offset: from, user_view, follow })?;
    let mut backlog_done = None;
    loop {
        match client.recv(None)? {
            Some(Frame::Deliver { mbox, serial, agent: Some(a) }) => each(&single(&mbox)?, serial, Some(&a))?,
            Some(Frame::TailEnd { next_offset, .. }) => {
                backlog_done = Some(next_offset);
                if !follow {
                    break;
                }
            }
            Some(Frame::Error { code, detail }) => {
                return Err(agentmail_core::net::NetError::Remote { code, detail }.into());
            }
            Some(_) => {}
            None => break,
        }
    }
    Ok(backlog_done.unwrap_or(0))
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    conn: Conn,
    agent: String,
    /// Check persisted files under this storage root instead of asking the server.
    #[arg(long)]
    storage: Option<PathBuf>,
    /// Use the config file's storage root instead of the server.
    #[arg(long)]
    offline: bool,
}

pub fn replay_verify(a: VerifyArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let offline = a.offline || a.storage.is_some();
    let ctx = Ctx::new(a.conn.clone(), config)?;
    if !offline {
        let mut client = ctx.connect("operator@localdomain")?;
        let report = client.request(&Frame::Verify { agent: a.agent.clone() }, |f| matches!(f, Frame::VerifyReport { .. }))?;
        let Frame::VerifyReport { agent, ok, journal_len, detail } = report else { unreachable!() };
        if json {
            println!("{}", json!({ "agent": agent, "consistent": ok, "journal_len": journal_len, "detail": detail }));
        } else if ok {
            println!("{agent}: consistent ({journal_len} journal entries)");
        } else {
            println!("{agent}: INCONSISTENT: {}", detail.as_deref().unwrap_or(""));
        }
        return if ok { Ok(()) } else { Err(Exit::Diverged(detail.unwrap_or_default()).into()) };
    }

    let store = ctx.store(a.storage)?.ok_or_else(|| Exit::Config("offline verification needs --storage or a config file".into()))?;
    let world = World::new(ctx.world()?);
    let agent = world.parse(&a.agent).map_err(|e| Exit::Config(e.to_string()))?;
    if !store.exists(&agent) {
        bail!(Exit::Config(format!("no stored journal for {agent}")));
    }
    match store.verify(&agent) {
        Ok(report) => {
            if json {
                println!(
                    "{}",
                    json!({ "agent": agent.to_string(), "consistent": true, "journal_len": report.journal_len, "cells": report.reconstructed.len(), "rewrites": report.rewrites_applied })
                );
            } else {
                println!(
                    "{agent}: consistent ({} journal entries, {} cells, {} rewrites)",
                    report.journal_len,
                    report.reconstructed.len(),
                    report.rewrites_applied
                );
            }
            Ok(())
        }
        Err(StoreError::Replay(MemoryError::ReplayDivergence { index })) => {
            let (journal, _) = store.load(&agent)?;
            let replayed = replay(&journal)?.reconstructed;
            let stored = store.load_context_file(&agent)?.unwrap_or_default();
            let show = |m: Option<&Message>| m.map(|m| format!("{} -> {:?}: {:?}", m.from_addr().unwrap_or("?"), m.to_addrs(), m.subject()));
            let (want, have) = (show(replayed.get(index)), show(stored.get(index)));
            if json {
                println!("{}", json!({ "agent": agent.to_string(), "consistent": false, "first_divergent_cell": index, "replayed": want, "stored": have }));
            } else {
                println!("{agent}: INCONSISTENT at cell {index}");
                println!("  replayed: {}", want.as_deref().unwrap_or("(none)"));
                println!("  stored:   {}", have.as_deref().unwrap_or("(none)"));
                if let Some(cell) = stored.get(index) {
                    print!("{}", serialize_mbox(std::slice::from_ref(cell)));
                }
            }
            Err(Exit::Diverged(format!("first divergent cell {index}")).into())
        }
        Err(e) => {
            if json {
                println!("{}", json!({ "agent": agent.to_string(), "consistent": false, "detail": e.to_string() }));
            }
            Err(Exit::Diverged(e.to_string()).into())
        }
    }
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    conn: Conn,
    agent: String,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    user_view: bool,
    /// Export the stored context instead of the journal (needs storage).
    #[arg(long)]
    context: bool,
    /// Read from this storage root instead of the server.
    #[arg(long)]
    storage: Option<PathBuf>,
}

pub fn export(a: ExportArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let ctx = Ctx::new(a.conn.clone(), config)?;
    let offline = a.storage.is_some() || a.context;
    let messages: Vec<Message> = if offline {
        let store = ctx.store(a.storage)?.ok_or_else(|| Exit::Config("export from storage needs --storage or a config file".into()))?;
        let agent = World::new(ctx.world()?).parse(&a.agent).map_err(|e| Exit::Config(e.to_string()))?;
        if a.context {
            store.load_context_file(&agent)?.ok_or_else(|| Exit::Config(format!("no stored context for {agent}")))?
        } else {
            let (journal, _) = store.load(&agent)?;
            if a.user_view {
                agentmail_core::memory::user_view(&journal)
            } else {
                journal.entries
            }
        }
    } else {
        let mut client = ctx.connect("operator@localdomain")?;
        let mut out = Vec::new();
        stream_journal(&mut client, &a.agent, 0, a.user_view, false, |m, _, _| {
            out.push(m.clone());
            Ok(())
        })?;
        out
    };
    let text = serialize_mbox(&messages);
    match &a.out {
        Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    if json && a.out.is_some() {
        println!("{}", json!({ "agent": a.agent, "messages": messages.len(), "bytes": text.len() }));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct OwnerArgs {
    #[command(flatten)]
    conn: Conn,
    agent: String,
}

fn print_owner(json: bool, frame: Frame) {
    if let Frame::OwnerIs { agent, realm, epoch } = frame {
        if json {
            println!("{}", json!({ "agent": agent, "realm": realm, "epoch": epoch }));
        } else {
            match (realm, epoch) {
                (Some(r), Some(e)) => println!("{agent}: held by {r} (epoch {e})"),
                _ => println!("{agent}: free"),
            }
        }
    }
}

pub fn owner(a: OwnerArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let ctx = Ctx::new(a.conn.clone(), config)?;
    let mut client = ctx.connect("operator@localdomain")?;
    let reply = client.request(&Frame::Owner { agent: a.agent }, |f| matches!(f, Frame::OwnerIs { .. }))?;
    print_owner(json, reply);
    Ok(())
}

#[derive(Args, Debug)]
pub struct ForceReleaseArgs {
    #[command(flatten)]
    conn: Conn,
    agent: String,
    #[arg(long, env = "AGENTMAIL_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: String,
}

pub fn force_release(a: ForceReleaseArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let ctx = Ctx::new(a.conn.clone(), config)?;
    let mut client = ctx.connect("operator@localdomain")?;
    let reply = client.request(&Frame::ForceRelease { agent: a.agent, admin_token: a.admin_token }, |f| matches!(f, Frame::OwnerIs { .. }))?;
    print_owner(json, reply);
    Ok(())
}

#[derive(Subcommand, Debug)]
pub enum RobotCommand {
    /// Execute JSON shell commands sent to this robot's address.
    Shell(ShellArgs),
}

#[derive(Args, Debug)]
pub struct ShellArgs {
    #[command(flatten)]
    conn: Conn,
    #[arg(long, default_value = "shell@localdomain")]
    address: String,
    /// Working directory for every command.
    #[arg(long)]
    sandbox: PathBuf,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Ask this address before running commands that request confirmation.
    #[arg(long)]
    confirm_to: Option<String>,
    #[arg(long, default_value_t = 600)]
    confirm_timeout_secs: u64,
    /// Append one JSON line per decision here.
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

pub fn robot(cmd: RobotCommand, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let RobotCommand::Shell(a) = cmd;
    let ctx = Ctx::new(a.conn.clone(), config)?;
    let mut sandbox = SandboxConfig::new(&a.sandbox);
    sandbox.timeout = Duration::from_secs(a.timeout_secs);
    let mut robot = ShellRobot::new(&a.address, sandbox);
    if let Some(to) = &a.confirm_to {
        robot = robot.with_confirmation(to, Duration::from_secs(a.confirm_timeout_secs));
    }
    if let Some(p) = &a.audit_log {
        robot = robot.with_audit_file(p);
    }
    let mut client = ctx.connect(&a.address)?;
    if json {
        println!("{}", json!({ "event": "connected", "realm": client.realm(), "address": client.address() }));
    } else {
        println!("{} connected to realm {}", client.address(), client.realm());
    }
    loop {
        let replies = match client.recv(Some(Duration::from_secs(1)))? {
            Some(Frame::Deliver { mbox, agent: None, .. }) => {
                let msg = single(&mbox)?;
                log::info!("command from {}", msg.from_addr().unwrap_or("?"));
                robot.handle(&msg)
            }
            Some(Frame::Error { code, detail }) => {
                log::warn!("server error {code}: {detail}");
                Vec::new()
            }
            Some(_) => Vec::new(),
            None => robot.expire(Instant::now()),
        };
        for r in replies {
            if let Err(e) = client.send_message(&r) {
                log::error!("reply to {:?} refused: {e}", r.to_addrs());
            }
        }
    }
}
