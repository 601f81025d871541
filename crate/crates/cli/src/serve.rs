use std::net::TcpListener as StdListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use agentmail_core::address::World;
use agentmail_core::gateway::{BackendId, Gateway, HttpBackend, ScriptedBackend};
use agentmail_core::lock::LockService;
use agentmail_core::memory::{JournalStore, StoreConfig};
use agentmail_core::net::{serve_tcp, serve_ws, Hub, HubConfig};
use agentmail_core::realm::{Realm, RealmConfig};
use agentmail_core::robot::{SandboxConfig, ShellRobot};
use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use crate::config::CliConfig;
use crate::Exit;

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// World id (overrides the config file).
    #[arg(long)]
    world: Option<String>,
    /// Realm id.
    #[arg(long)]
    realm: Option<String>,
    /// TCP listen address for the framed protocol; port 0 picks a free port.
    #[arg(long)]
    listen: Option<String>,
    /// WebSocket listen address.
    #[arg(long)]
    ws_listen: Option<String>,
    /// Storage root for journals.
    #[arg(long)]
    storage: Option<PathBuf>,
    /// Default backend id, `provider.model`.
    #[arg(long)]
    backend: Option<String>,
    /// Rules file for the scripted backend.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Token clients must present in HELLO.
    #[arg(long, env = "AGENTMAIL_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Token that authorizes FORCE_RELEASE.
    #[arg(long, env = "AGENTMAIL_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: Option<String>,
    #[arg(long)]
    log_level: Option<String>,
}

fn merged(args: ServeArgs, file: Option<CliConfig>) -> Result<CliConfig> {
    let mut cfg = match (file, &args.world) {
        (Some(c), _) => c,
        (None, Some(w)) => CliConfig::minimal(w),
        (None, None) => return Err(Exit::Config("a world id is required (--world or a config file)".into()).into()),
    };
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        )*};
    }
    take!(world, realm, listen, storage, backend, log_level);
    if args.ws_listen.is_some() {
        cfg.ws_listen = args.ws_listen;
    }
    if args.rules.is_some() {
        cfg.rules = args.rules;
    }
    if args.token.is_some() {
        cfg.auth_token = args.token;
    }
    if args.admin_token.is_some() {
        cfg.admin_token = args.admin_token;
    }
    cfg.validate().map_err(Exit::Config)?;
    Ok(cfg)
}

fn gateway(cfg: &CliConfig) -> Result<Gateway> {
    let default: BackendId = cfg.backend.parse().map_err(|e| Exit::Config(format!("backend {:?}: {e}", cfg.backend)))?;
    let scripted_id = BackendId::new("test", "scripted");
    let scripted = match &cfg.rules {
        Some(path) => ScriptedBackend::from_path(path).map_err(|e| Exit::Config(e.to_string()))?,
        None => ScriptedBackend::new(Vec::new()).expect("an empty rule list is valid"),
    };
    let mut gw = Gateway::new(scripted_id.clone(), Arc::new(scripted));
    for entry in &cfg.http_backends {
        let id: BackendId = entry.id.parse().map_err(|e| Exit::Config(format!("http backend {:?}: {e}", entry.id)))?;
        let mut endpoint = entry.endpoint.clone();
        if let Some(var) = &entry.api_key_env {
            endpoint.api_key = std::env::var(var).ok();
        }
        gw.register(id, Arc::new(HttpBackend::new(endpoint))).map_err(|e| Exit::Config(e.to_string()))?;
    }
    if default == scripted_id && cfg.rules.is_none() {
        log::warn!("no rules file: the scripted backend will never answer");
    }
    gw.set_default(default.clone()).map_err(|_| Exit::Config(format!("default backend {default} is not configured")))?;
    Ok(gw)
}

fn check_storage(cfg: &CliConfig) -> Result<Arc<JournalStore>> {
    let unwritable = |e: &dyn std::fmt::Display| Exit::StorageUnwritable(format!("{}: {e}", cfg.storage.display()));
    std::fs::create_dir_all(&cfg.storage).map_err(|e| unwritable(&e))?;
    let probe = cfg.storage.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| unwritable(&e))?;
    let _ = std::fs::remove_file(&probe);
    let store = JournalStore::new(StoreConfig { root: cfg.storage.clone(), fsync: cfg.fsync }).map_err(|e| unwritable(&e))?;
    Ok(Arc::new(store))
}

fn bind(addr: &str) -> Result<StdListener> {
    let l = StdListener::bind(addr).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => anyhow::Error::from(Exit::PortInUse(addr.into())),
        _ => anyhow::Error::from(Exit::Config(format!("cannot listen on {addr}: {e}"))),
    })?;
    l.set_nonblocking(true)?;
    Ok(l)
}

pub fn run(args: ServeArgs, config: Option<&PathBuf>, json: bool) -> Result<()> {
    let cfg = merged(args, crate::load_config(config)?)?;
    crate::commands::init_logging(&cfg.log_level);

    let store = check_storage(&cfg)?;
    let tcp = bind(&cfg.listen)?;
    let ws = cfg.ws_listen.as_deref().map(bind).transpose()?;

    let lock = Arc::new(LockService::new());
    let mut rc = RealmConfig::new(&cfg.realm, World::new(&cfg.world));
    if let Some(d) = cfg.max_depth {
        rc.max_depth = d;
    }
    if let Some(t) = cfg.completion_timeout_secs {
        rc.completion_timeout = Duration::from_secs(t);
    }
    let mut realm = Realm::new(rc, lock.clone(), store, gateway(&cfg)?).context("starting realm")?;
    for r in &cfg.shell_robots {
        let mut sandbox = SandboxConfig::new(&r.sandbox);
        if let Some(t) = r.timeout_secs {
            sandbox.timeout = Duration::from_secs(t);
        }
        let mut robot = ShellRobot::new(&r.address, sandbox);
        if let Some(to) = &r.confirm_to {
            robot = robot.with_confirmation(to, Duration::from_secs(600));
        }
        if let Some(path) = &r.audit_log {
            robot = robot.with_audit_file(path);
        }
        realm.add_robot(&r.address, Box::new(robot));
    }
    for addr in &cfg.remote_robots {
        realm.add_remote_robot(addr);
    }

    let hub_cfg = HubConfig { auth_token: cfg.auth_token.clone(), admin_token: cfg.admin_token.clone() };
    let (hub, thread) = Hub::start(realm, lock, hub_cfg);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let tcp = tokio::net::TcpListener::from_std(tcp)?;
        let tcp_addr = tcp.local_addr()?;
        let ws = ws.map(tokio::net::TcpListener::from_std).transpose()?;
        let ws_addr = ws.as_ref().map(|l| l.local_addr()).transpose()?;
        if json {
            println!("{}", json!({ "event": "listening", "realm": cfg.realm, "world": cfg.world, "tcp": tcp_addr.to_string(), "ws": ws_addr.map(|a| a.to_string()) }));
        } else {
            println!("realm {} (world {}) listening on {tcp_addr}", cfg.realm, cfg.world);
            if let Some(a) = ws_addr {
                println!("websocket on {a}");
            }
        }
        tokio::spawn(serve_tcp(tcp, hub.clone()));
        if let Some(ws) = ws {
            tokio::spawn(serve_ws(ws, hub));
        }
        shutdown_signal().await;
        anyhow::Ok(())
    })?;
    log::info!("shutting down; persisting contexts");
    runtime.shutdown_timeout(Duration::from_secs(1));
    thread.shutdown().context("persisting on shutdown")?;
    if json {
        println!("{}", json!({ "event": "stopped" }));
    } else {
        println!("stopped");
    }
    Ok(())
}

async fn shutdown_signal() {
    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("install SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}
