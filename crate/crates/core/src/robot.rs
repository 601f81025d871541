//! The shell robot: runs commands sent as JSON and mails back their output.
//!
//! A command message has `Content-Type: application/json` and a body with
//! exactly three fields:
//!
//! ```json
//! {"prompt": "Shown to the user when confirming", "command": "echo Hello, world!", "confirm": false}
//! ```
//!
//! The sandbox only confines the working directory, clears the environment
//! down to a whitelist, and bounds time and output. It is **not** a security
//! boundary against a hostile model.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::address::address_key;
use crate::message::{build_attachment_message, media_type, Attachment, Message};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_OUTPUT_CAP: usize = 1 << 20;
pub const DEFAULT_CONFIRM_TIMEOUT: Duration = Duration::from_secs(600);

const SCHEMA: &str = r#"{"prompt": string, "command": string, "confirm": boolean}"#;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RobotError {
    #[error("expected Content-Type application/json, got {}", .0.as_deref().unwrap_or("none"))]
    WrongContentType(Option<String>),
    #[error("command does not match the schema: {}", .0.join("; "))]
    SchemaViolation(Vec<String>),
    #[error("command exceeded {0:?} and was killed")]
    Timeout(Duration),
    #[error("could not start the shell: {0}")]
    SpawnFailure(String),
    #[error("no confirmation arrived within {0:?}")]
    ConfirmationTimeout(Duration),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShellCommand {
    pub prompt: String,
    pub command: String,
    pub confirm: bool,
}

/// Validates a command message, listing every schema problem found.
pub fn parse_command(msg: &Message) -> Result<ShellCommand, RobotError> {
    let ct = msg.content_type().map(str::to_string);
    if ct.as_deref().map(media_type) != Some("application/json".to_string()) {
        return Err(RobotError::WrongContentType(ct));
    }
    let text = msg.text();
    let value: Value = serde_json::from_str(&text).map_err(|e| RobotError::SchemaViolation(vec![format!("body is not JSON: {e}")]))?;
    let Value::Object(obj) = value else {
        return Err(RobotError::SchemaViolation(vec!["body must be a JSON object".into()]));
    };

    let mut problems = Vec::new();
    for key in obj.keys() {
        if !["prompt", "command", "confirm"].contains(&key.as_str()) {
            problems.push(format!("unexpected field {key:?}"));
        }
    }
    let string_field = |name: &str, problems: &mut Vec<String>| match obj.get(name) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            problems.push(format!("{name:?} must be a string"));
            None
        }
        None => {
            problems.push(format!("missing field {name:?}"));
            None
        }
    };
    let prompt = string_field("prompt", &mut problems);
    let command = string_field("command", &mut problems);
    if command.as_deref().is_some_and(|c| c.trim().is_empty()) {
        problems.push("\"command\" must not be empty".into());
    }
    let confirm = match obj.get("confirm") {
        Some(Value::Bool(b)) => Some(*b),
        Some(_) => {
            problems.push("\"confirm\" must be a boolean".into());
            None
        }
        None => {
            problems.push("missing field \"confirm\"".into());
            None
        }
    };
    match (prompt, command, confirm) {
        (Some(prompt), Some(command), Some(confirm)) if problems.is_empty() => Ok(ShellCommand { prompt, command, confirm }),
        _ => Err(RobotError::SchemaViolation(problems)),
    }
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    /// Working directory of every command; created if missing.
    pub root: PathBuf,
    pub shell: PathBuf,
    pub timeout: Duration,
    /// Per-stream capture limit in bytes.
    pub output_cap: usize,
    /// Variables passed through from the robot's own environment.
    pub env_whitelist: Vec<String>,
}

impl SandboxConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SandboxConfig {
            root: root.into(),
            shell: PathBuf::from("/bin/sh"),
            timeout: DEFAULT_TIMEOUT,
            output_cap: DEFAULT_OUTPUT_CAP,
            env_whitelist: ["PATH", "LANG", "LC_ALL", "TERM"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionResult {
    /// `None` when the process was killed by a signal.
    pub exit_code: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration_ms: u64,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub timed_out: bool,
}

fn capture(mut pipe: impl Read + Send + 'static, cap: usize) -> thread::JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        // keep draining past the cap so the child never blocks on a full pipe
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    truncated |= n > room;
                }
            }
        }
        (kept, truncated)
    })
}

/// Runs `cmd` through the configured shell inside the sandbox. A timeout is
/// reported through [`ExecutionResult::timed_out`] with whatever output was
/// produced before the process group was killed.
pub fn execute(cmd: &ShellCommand, cfg: &SandboxConfig) -> Result<ExecutionResult, RobotError> {
    fs::create_dir_all(&cfg.root).map_err(|e| RobotError::SpawnFailure(format!("{}: {e}", cfg.root.display())))?;
    let mut command = Command::new(&cfg.shell);
    command
        .arg("-c")
        .arg(&cmd.command)
        .current_dir(&cfg.root)
        .env_clear()
        .env("HOME", &cfg.root)
        .env("PWD", &cfg.root)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for name in &cfg.env_whitelist {
        if let Some(v) = std::env::var_os(name) {
            command.env(name, v);
        }
    }

    let started = Instant::now();
    let mut child = command.spawn().map_err(|e| RobotError::SpawnFailure(e.to_string()))?;
    let out = capture(child.stdout.take().expect("piped"), cfg.output_cap);
    let err = capture(child.stderr.take().expect("piped"), cfg.output_cap);

    let (status, timed_out) = match child.wait_timeout(cfg.timeout).map_err(|e| RobotError::SpawnFailure(e.to_string()))? {
        Some(status) => (status, false),
        None => {
            // SAFETY: plain kill(2) on the process group we created.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            (child.wait().map_err(|e| RobotError::SpawnFailure(e.to_string()))?, true)
        }
    };
    let (stdout, stdout_truncated) = out.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err.join().unwrap_or_default();
    Ok(ExecutionResult {
        exit_code: status.code(),
        stdout,
        stderr,
        duration_ms: started.elapsed().as_millis() as u64,
        stdout_truncated,
        stderr_truncated,
        timed_out,
    })
}

fn reply_subject(original: &Message) -> String {
    format!("Re: {}", original.subject())
}

/// Multipart reply: a summary, then `stdout.txt` and `stderr.txt`.
pub fn reply(robot: &str, original: &Message, result: &ExecutionResult, cap: usize) -> Message {
    let mut summary = match result.exit_code {
        Some(code) => format!("Exit code: {code}\n"),
        None => "Exit code: killed\n".to_string(),
    };
    summary.push_str(&format!("Duration: {} ms\n", result.duration_ms));
    if result.timed_out {
        summary.push_str("The command timed out and was killed; output is partial.\n");
    }
    for (name, truncated) in [("stdout", result.stdout_truncated), ("stderr", result.stderr_truncated)] {
        if truncated {
            summary.push_str(&format!("{name} was truncated at {cap} bytes.\n"));
        }
    }
    let to = original.from_addr().unwrap_or_default();
    let attachments =
        [Attachment::new("stdout.txt", "text/plain", result.stdout.clone()), Attachment::new("stderr.txt", "text/plain", result.stderr.clone())];
    build_attachment_message(robot, to, &reply_subject(original), &summary, &attachments)
        .unwrap_or_else(|e| Message::new(robot, to, &reply_subject(original), &format!("{summary}Output could not be attached: {e}\n")))
}

/// Plain-text reply explaining why nothing was run.
pub fn error_reply(robot: &str, original: &Message, err: &RobotError) -> Message {
    let mut body = format!("Error: {err}\n");
    if matches!(err, RobotError::WrongContentType(_) | RobotError::SchemaViolation(_)) {
        body.push_str(&format!("\nSend Content-Type: application/json with a body of the form\n{SCHEMA}\n"));
    }
    Message::new(robot, original.from_addr().unwrap_or_default(), &reply_subject(original), &body)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AuditOutcome {
    Rejected { reason: String },
    ConfirmationRequested { id: u64 },
    Denied { reason: String },
    Executed { exit_code: Option<i32> },
    TimedOut,
    SpawnFailed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub unix_ms: u64,
    pub requester: String,
    pub command: Option<String>,
    #[serde(flatten)]
    pub outcome: AuditOutcome,
}

impl AuditEntry {
    /// Whether the command ran to completion.
    pub fn is_execution(&self) -> bool {
        matches!(self.outcome, AuditOutcome::Executed { .. })
    }
}

#[derive(Debug, Clone)]
struct Pending {
    cmd: ShellCommand,
    original: Message,
    deadline: Instant,
}

/// One shell robot instance. Commands run serially in arrival order.
#[derive(Debug)]
pub struct ShellRobot {
    address: String,
    sandbox: SandboxConfig,
    confirm_address: Option<String>,
    confirm_timeout: Duration,
    audit_path: Option<PathBuf>,
    audit: Vec<AuditEntry>,
    pending: BTreeMap<u64, Pending>,
    next_id: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn is_approval(text: &str) -> bool {
    let t = text.trim().trim_end_matches(['.', '!']).to_ascii_lowercase();
    t == "yes" || t == "approve"
}

impl ShellRobot {
    pub fn new(address: &str, sandbox: SandboxConfig) -> Self {
        ShellRobot {
            address: address.to_string(),
            sandbox,
            confirm_address: None,
            confirm_timeout: DEFAULT_CONFIRM_TIMEOUT,
            audit_path: None,
            audit: Vec::new(),
            pending: BTreeMap::new(),
            next_id: 1,
        }
    }

    /// Address that approves `confirm: true` commands.
    pub fn with_confirmation(mut self, address: &str, timeout: Duration) -> Self {
        self.confirm_address = Some(address.to_string());
        self.confirm_timeout = timeout;
        self
    }

    /// Also append audit entries as JSON lines to `path`.
    pub fn with_audit_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.audit_path = Some(path.into());
        self
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn pending_confirmations(&self) -> usize {
        self.pending.len()
    }

    fn record(&mut self, requester: &str, command: Option<&str>, outcome: AuditOutcome) {
        let entry = AuditEntry { unix_ms: now_ms(), requester: requester.to_string(), command: command.map(str::to_string), outcome };
        if let Some(path) = &self.audit_path {
            let line = serde_json::to_string(&entry).expect("audit entry serializes");
            let written = OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = written {
                log::warn!("audit log {}: {e}", path.display());
            }
        }
        self.audit.push(entry);
    }

    /// Handles one incoming message and returns the messages to send.
    pub fn handle(&mut self, msg: &Message) -> Vec<Message> {
        self.handle_at(msg, Instant::now())
    }

    pub fn handle_at(&mut self, msg: &Message, now: Instant) -> Vec<Message> {
        let mut out = self.expire(now);
        let sender = msg.from_addr().unwrap_or_default().to_string();
        if self.confirm_address.as_deref().map(address_key) == Some(address_key(&sender)) {
            if let Some(id) = self.pending_for(msg) {
                out.extend(self.resolve(id, msg));
                return out;
            }
        }

        let cmd = match parse_command(msg) {
            Ok(cmd) => cmd,
            Err(e) => {
                self.record(&sender, None, AuditOutcome::Rejected { reason: e.to_string() });
                out.push(error_reply(&self.address, msg, &e));
                return out;
            }
        };
        if !cmd.confirm {
            out.push(self.run(&cmd, msg));
            return out;
        }
        let Some(confirm_to) = self.confirm_address.clone() else {
            let reason = "confirmation requested but no confirmation address is configured".to_string();
            self.record(&sender, Some(&cmd.command), AuditOutcome::Denied { reason: reason.clone() });
            out.push(Message::new(&self.address, &sender, &reply_subject(msg), &format!("Denied: {reason}.\n")));
            return out;
        };
        let id = self.next_id;
        self.next_id += 1;
        self.record(&sender, Some(&cmd.command), AuditOutcome::ConfirmationRequested { id });
        let body = format!(
            "{} asks to run:\n\n    {}\n\n{}\n\nReply \"yes\" or \"approve\" to run it; anything else denies.\n",
            sender, cmd.command, cmd.prompt
        );
        out.push(Message::new(&self.address, &confirm_to, &format!("Confirm command #{id}"), &body));
        self.pending.insert(id, Pending { cmd, original: msg.clone(), deadline: now + self.confirm_timeout });
        out
    }

    fn pending_for(&self, msg: &Message) -> Option<u64> {
        let re = Regex::new(r"#(\d+)").expect("valid regex");
        match re.captures(msg.subject()).and_then(|c| c[1].parse().ok()) {
            Some(id) if self.pending.contains_key(&id) => Some(id),
            Some(_) => None,
            None if self.pending.len() == 1 => self.pending.keys().next().copied(),
            None => None,
        }
    }

    fn resolve(&mut self, id: u64, answer: &Message) -> Vec<Message> {
        let p = self.pending.remove(&id).expect("pending id exists");
        let subject_answer = answer.subject().rsplit(':').next().unwrap_or("").replace(&format!("Confirm command #{id}"), "");
        let approved = is_approval(&subject_answer) || answer.text().lines().any(is_approval);
        if approved {
            vec![self.run(&p.cmd, &p.original)]
        } else {
            let requester = p.original.from_addr().unwrap_or_default().to_string();
            self.record(&requester, Some(&p.cmd.command), AuditOutcome::Denied { reason: "not approved".into() });
            vec![Message::new(&self.address, &requester, &reply_subject(&p.original), "Denied: the command was not approved.\n")]
        }
    }

    /// Denies confirmations whose deadline has passed.
    pub fn expire(&mut self, now: Instant) -> Vec<Message> {
        let expired: Vec<u64> = self.pending.iter().filter(|(_, p)| p.deadline <= now).map(|(id, _)| *id).collect();
        let mut out = Vec::new();
        for id in expired {
            let p = self.pending.remove(&id).expect("listed above");
            let requester = p.original.from_addr().unwrap_or_default().to_string();
            let err = RobotError::ConfirmationTimeout(self.confirm_timeout);
            self.record(&requester, Some(&p.cmd.command), AuditOutcome::Denied { reason: err.to_string() });
            out.push(error_reply(&self.address, &p.original, &err));
        }
        out
    }

    fn run(&mut self, cmd: &ShellCommand, original: &Message) -> Message {
        let requester = original.from_addr().unwrap_or_default().to_string();
        match execute(cmd, &self.sandbox) {
            Ok(result) if result.timed_out => {
                self.record(&requester, Some(&cmd.command), AuditOutcome::TimedOut);
                let mut m = reply(&self.address, original, &result, self.sandbox.output_cap);
                m.headers.push("X-Robot-Error", "timeout");
                m
            }
            Ok(result) => {
                self.record(&requester, Some(&cmd.command), AuditOutcome::Executed { exit_code: result.exit_code });
                reply(&self.address, original, &result, self.sandbox.output_cap)
            }
            Err(e) => {
                self.record(&requester, Some(&cmd.command), AuditOutcome::SpawnFailed { reason: e.to_string() });
                error_reply(&self.address, original, &e)
            }
        }
    }
}

/// An in-process robot hosted by a realm.
pub trait Robot: Send {
    fn handle(&mut self, msg: &Message) -> Vec<Message>;

    /// Periodic hook for time-based work such as expiring confirmations.
    fn tick(&mut self, _now: Instant) -> Vec<Message> {
        Vec::new()
    }
}

impl Robot for ShellRobot {
    fn handle(&mut self, msg: &Message) -> Vec<Message> {
        ShellRobot::handle(self, msg)
    }

    fn tick(&mut self, now: Instant) -> Vec<Message> {
        self.expire(now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json(body: &str) -> Message {
        Message::new("ai_30@agents.localdomain", "shell@localdomain", "", body).with_header("Content-Type", "application/json")
    }

    #[test]
    fn parses_valid_commands() {
        let m = json(r#"{"prompt":"This command will display your storage hardware details.","command":"lsblk","confirm":false}"#);
        assert_eq!(parse_command(&m).unwrap().command, "lsblk");
        let m = json(r#"{"prompt":"…","command":"echo Hello, world!","confirm":false}"#);
        assert_eq!(parse_command(&m).unwrap().command, "echo Hello, world!");
    }

    #[test]
    fn content_type_is_checked() {
        let m = Message::new("a@x", "shell@localdomain", "", r#"{"prompt":"","command":"ls","confirm":false}"#);
        assert_eq!(parse_command(&m), Err(RobotError::WrongContentType(None)));
        let m = m.with_header("Content-Type", "application/json; charset=utf-8");
        assert!(parse_command(&m).is_ok());
    }

    #[test]
    fn schema_problems_are_enumerated() {
        let Err(RobotError::SchemaViolation(p)) = parse_command(&json(r#"{"command":5,"confirm":"no","extra":1}"#)) else {
            panic!()
        };
        assert_eq!(p.len(), 4, "{p:?}");
        assert!(matches!(parse_command(&json("not json")), Err(RobotError::SchemaViolation(_))));
        assert!(matches!(parse_command(&json("[1]")), Err(RobotError::SchemaViolation(_))));
        assert!(matches!(parse_command(&json(r#"{"prompt":"","command":"  ","confirm":false}"#)), Err(RobotError::SchemaViolation(_))));
    }

    #[test]
    fn approval_words() {
        assert!(is_approval("yes"));
        assert!(is_approval(" Approve. "));
        assert!(!is_approval("no"));
        assert!(!is_approval("yes please"));
    }
}
