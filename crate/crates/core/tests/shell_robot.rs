use std::time::{Duration, Instant};

use agentmail_core::message::{parse_mbox, serialize_mbox, Message};
use agentmail_core::robot::{execute, parse_command, AuditOutcome, SandboxConfig, ShellCommand, ShellRobot};

const AGENT: &str = "ai_30@agents.localdomain";
const SHELL: &str = "shell@localdomain";

fn cmd(command: &str) -> ShellCommand {
    ShellCommand { prompt: String::new(), command: command.into(), confirm: false }
}

fn command_msg(command: &str, confirm: bool) -> Message {
    let body = serde_json::json!({"prompt": "p", "command": command, "confirm": confirm}).to_string();
    Message::new(AGENT, SHELL, "run", &body).with_header("Content-Type", "application/json")
}

fn sandbox() -> (tempfile::TempDir, SandboxConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SandboxConfig::new(dir.path().join("sandbox"));
    (dir, cfg)
}

fn well_formed(m: &Message) -> Message {
    let parsed = parse_mbox(serialize_mbox(std::slice::from_ref(m)).as_bytes()).unwrap();
    assert_eq!(parsed.len(), 1);
    parsed.into_iter().next().unwrap()
}

#[test]
fn echo() {
    let (_d, cfg) = sandbox();
    let r = execute(&cmd("echo Hello, world!"), &cfg).unwrap();
    assert_eq!(r.exit_code, Some(0));
    assert_eq!(r.stdout, b"Hello, world!\n");
    assert!(!r.timed_out);
}

#[test]
fn timeout_kills_process_group() {
    let (_d, mut cfg) = sandbox();
    cfg.timeout = Duration::from_millis(300);
    let started = Instant::now();
    let r = execute(&cmd("echo partial; sleep 30 & sleep 30"), &cfg).unwrap();
    assert!(r.timed_out);
    assert_eq!(r.exit_code, None);
    assert_eq!(r.stdout, b"partial\n");
    assert!(started.elapsed() < Duration::from_secs(10));
}

#[test]
fn missing_binary_passes_exit_code_through() {
    let (_d, cfg) = sandbox();
    let r = execute(&cmd("definitely-not-a-binary-xyz"), &cfg).unwrap();
    assert_eq!(r.exit_code, Some(127));
    assert!(!r.stderr.is_empty());
}

#[test]
fn sandbox_containment() {
    let (_d, mut cfg) = sandbox();
    std::env::set_var("AGENTMAIL_SECRET_TEST", "leak");
    cfg.env_whitelist = vec!["PATH".into()];
    let r = execute(&cmd("pwd; env"), &cfg).unwrap();
    let out = String::from_utf8(r.stdout).unwrap();
    let root = cfg.root.canonicalize().unwrap();
    assert_eq!(out.lines().next().unwrap(), root.to_str().unwrap());
    assert!(!out.contains("AGENTMAIL_SECRET_TEST"));
    for line in out.lines().skip(1) {
        let name = line.split('=').next().unwrap();
        assert!(["PATH", "HOME", "PWD", "SHLVL", "_", "OLDPWD"].contains(&name), "unexpected variable {line}");
    }
}

#[test]
fn reply_shape_and_empty_stderr() {
    let (_d, cfg) = sandbox();
    let mut robot = ShellRobot::new(SHELL, cfg);
    let out = robot.handle(&command_msg("echo NAME MAJ:MIN", false));
    assert_eq!(out.len(), 1);
    let reply = well_formed(&out[0]);
    assert_eq!(reply.subject(), "Re: run");
    assert_eq!(reply.to_addrs(), [AGENT]);
    assert!(reply.text().contains("Exit code: 0"));
    assert!(reply.attachment("stdout.txt").unwrap().data().unwrap().starts_with(b"NAME"));
    assert_eq!(reply.attachment("stderr.txt").unwrap().data().unwrap(), b"");
}

#[test]
fn output_cap() {
    let (_d, cfg) = sandbox();
    let mut robot = ShellRobot::new(SHELL, cfg);
    let out = robot.handle(&command_msg("head -c 5242880 /dev/zero | tr '\\0' 'a'", false));
    let reply = well_formed(&out[0]);
    assert_eq!(reply.attachment("stdout.txt").unwrap().data().unwrap().len(), 1 << 20);
    assert!(reply.text().contains("stdout was truncated at 1048576 bytes"));
}

fn executions(robot: &ShellRobot) -> usize {
    robot.audit_log().iter().filter(|e| e.is_execution()).count()
}

#[test]
fn confirm_flow() {
    let (_d, cfg) = sandbox();
    let mut robot = ShellRobot::new(SHELL, cfg).with_confirmation("user1@localdomain", Duration::from_secs(600));

    let asked = robot.handle(&command_msg("echo approved", true));
    assert_eq!(asked.len(), 1);
    assert_eq!(asked[0].to_addrs(), ["user1@localdomain"]);
    assert!(asked[0].text().contains("echo approved"));
    assert_eq!(executions(&robot), 0);

    let yes = Message::new("user1@localdomain", SHELL, &format!("Re: {}", asked[0].subject()), "yes\n");
    let done = robot.handle(&yes);
    assert_eq!(done[0].to_addrs(), [AGENT]);
    assert_eq!(done[0].attachment("stdout.txt").unwrap().data().unwrap(), b"approved\n");
    assert_eq!(executions(&robot), 1);

    let asked = robot.handle(&command_msg("echo denied", true));
    let no = Message::new("user1@localdomain", SHELL, &format!("Re: {}", asked[0].subject()), "no");
    let denied = robot.handle(&no);
    assert_eq!(denied.len(), 1);
    assert!(denied[0].text().starts_with("Denied"));
    assert_eq!(executions(&robot), 1);
}

#[test]
fn confirmation_timeout_denies() {
    let (_d, cfg) = sandbox();
    let mut robot = ShellRobot::new(SHELL, cfg).with_confirmation("user1@localdomain", Duration::from_secs(600));
    let t0 = Instant::now();
    robot.handle_at(&command_msg("echo late", true), t0);
    assert!(robot.expire(t0 + Duration::from_secs(599)).is_empty());
    let notices = robot.expire(t0 + Duration::from_secs(600));
    assert_eq!(notices.len(), 1);
    assert_eq!(notices[0].to_addrs(), [AGENT]);
    assert!(notices[0].text().contains("no confirmation arrived"));
    assert_eq!(robot.pending_confirmations(), 0);
    assert_eq!(executions(&robot), 0);
}

#[test]
fn audit_file_records_every_decision() {
    let (dir, cfg) = sandbox();
    let path = dir.path().join("audit.jsonl");
    let mut robot = ShellRobot::new(SHELL, cfg).with_audit_file(&path);
    robot.handle(&command_msg("true", false));
    robot.handle(&Message::new(AGENT, SHELL, "", "ls"));
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["outcome"], "executed");
    assert_eq!(lines[1]["outcome"], "rejected");
    assert!(matches!(robot.audit_log()[1].outcome, AuditOutcome::Rejected { .. }));
    assert!(parse_command(&command_msg("true", false)).is_ok());
}
