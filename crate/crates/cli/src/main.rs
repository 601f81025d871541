//! `agentmail`: run a realm server and talk to it.

mod commands;
mod config;
mod serve;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use agentmail_core::net::NetError;
use clap::{Args, Parser, Subcommand};

use crate::config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "agentmail", version, about = "Email-addressed agents: serve a realm, send mail, inspect journals")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true, env = "AGENTMAIL_CONFIG")]
    config: Option<PathBuf>,
    /// Machine-readable output: one JSON object per line.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Conn {
    /// Server address, `host:port` (a `tcp://` prefix is accepted).
    #[arg(long, env = "AGENTMAIL_SERVER", default_value = "127.0.0.1:7878")]
    pub server: String,
    /// Shared token sent in HELLO.
    #[arg(long, env = "AGENTMAIL_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// World to join. Defaults to the config file's world.
    #[arg(long, env = "AGENTMAIL_WORLD")]
    pub world: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a realm server with an in-process lock service.
    Serve(serve::ServeArgs),
    /// Send one message and print replies addressed back to the sender.
    Send(commands::SendArgs),
    /// Print an agent's journal as mbox text.
    Tail(commands::TailArgs),
    /// Check that replaying the journal reproduces the context.
    ReplayVerify(commands::VerifyArgs),
    /// Write an agent's journal (or context) as an mbox file.
    Export(commands::ExportArgs),
    /// Show which realm holds an agent's context lock.
    Owner(commands::OwnerArgs),
    /// Revoke an agent's context lock. Needs the admin token.
    ForceRelease(commands::ForceReleaseArgs),
    /// Run a robot as a client of a realm server.
    #[command(subcommand)]
    Robot(commands::RobotCommand),
}

/// Failures with a fixed exit status.
#[derive(Debug)]
pub enum Exit {
    /// Replay does not reproduce the stored context.
    Diverged(String),
    Config(String),
    PortInUse(String),
    StorageUnwritable(String),
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exit::Diverged(d) => write!(f, "replay diverged: {d}"),
            Exit::Config(d) => write!(f, "configuration: {d}"),
            Exit::PortInUse(a) => write!(f, "address {a} is already in use"),
            Exit::StorageUnwritable(d) => write!(f, "storage is not writable: {d}"),
        }
    }
}

impl std::error::Error for Exit {}

/// Exit statuses: 0 ok, 1 replay divergence, 2 usage, 3 network, 4 refused
/// by the server, 5 configuration or storage.
fn classify(err: &anyhow::Error) -> (u8, String) {
    if let Some(e) = err.downcast_ref::<Exit>() {
        let name = match e {
            Exit::Diverged(_) => return (1, "Diverged".into()),
            Exit::Config(_) => "Config",
            Exit::PortInUse(_) => "PortInUse",
            Exit::StorageUnwritable(_) => "StorageUnwritable",
        };
        return (5, name.into());
    }
    match err.downcast_ref::<NetError>() {
        Some(NetError::Remote { code, .. }) => (4, code.clone()),
        Some(NetError::Io(e)) if e.kind() == std::io::ErrorKind::ConnectionRefused => (3, "ConnectionRefused".into()),
        Some(_) => (3, "Network".into()),
        None => (5, "Error".into()),
    }
}

pub fn load_config(path: Option<&PathBuf>) -> anyhow::Result<Option<CliConfig>> {
    match path {
        Some(p) => {
            let cfg = CliConfig::load(p).map_err(|e| Exit::Config(format!("{e:#}")))?;
            cfg.validate().map_err(Exit::Config)?;
            Ok(Some(cfg))
        }
        None => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    let result = match cli.command {
        Command::Serve(a) => serve::run(a, cli.config.as_ref(), json),
        Command::Send(a) => commands::send(a, cli.config.as_ref(), json),
        Command::Tail(a) => commands::tail(a, cli.config.as_ref(), json),
        Command::ReplayVerify(a) => commands::replay_verify(a, cli.config.as_ref(), json),
        Command::Export(a) => commands::export(a, cli.config.as_ref(), json),
        Command::Owner(a) => commands::owner(a, cli.config.as_ref(), json),
        Command::ForceRelease(a) => commands::force_release(a, cli.config.as_ref(), json),
        Command::Robot(r) => commands::robot(r, cli.config.as_ref(), json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (status, code) = classify(&err);
            if json {
                println!("{}", serde_json::json!({ "error": code, "detail": format!("{err:#}") }));
            }
            eprintln!("agentmail: {err:#}");
            ExitCode::from(status)
        }
    }
}
