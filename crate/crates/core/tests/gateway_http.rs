use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use agentmail_core::gateway::{
    chat_turns, ApiStyle, Backend, BackendId, CompletionRequest, Gateway, GatewayError, HttpBackend, HttpBackendConfig,
};
use agentmail_core::message::{serialize_mbox, Message};
use serde_json::Value;

const AGENT: &str = "ai_30@agents.localdomain";

/// Serves one request with `response_body`, handing the parsed request JSON back.
fn mock_server(status: &'static str, response_body: String, delay: Duration) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let _ = tx.send(serde_json::from_slice(&body).unwrap_or(Value::Null));
        thread::sleep(delay);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            response_body.len(),
            response_body
        );
    });
    (format!("http://{addr}/v1"), rx)
}

fn context() -> String {
    serialize_mbox(&[
        Message::new("user1@localdomain", AGENT, "hi", "hello").with_header("X-Serial", "0"),
        Message::new(AGENT, "user1@localdomain", "Re: hi", "hey").with_header("X-Serial", "1"),
        Message::new("system@localdomain", AGENT, "Re: MSR 0-0", "Memory segment rewriting applied.").with_header("X-Serial", "2"),
    ])
}

fn backend(base_url: &str, style: ApiStyle) -> HttpBackend {
    HttpBackend::new(HttpBackendConfig {
        base_url: base_url.to_string(),
        model: "gpt-4o".into(),
        api_key: Some("k".into()),
        style,
        system_prompt: None,
    })
}

#[test]
fn role_mapping() {
    let turns = chat_turns(AGENT, &context()).unwrap();
    let roles: Vec<&str> = turns.iter().map(|(r, _)| *r).collect();
    assert_eq!(roles, ["user", "assistant", "user"]);
    assert!(turns[0].1.contains("X-Serial: 0"));
    assert!(turns[2].1.starts_with("From system@localdomain\n"));
}

#[test]
fn chat_completion_with_reported_usage() {
    let reply = r#"{"choices":[{"message":{"role":"assistant","content":"From: ai\nTo: user1@localdomain\nSubject: x\n\nok\n"}}],
                    "usage":{"prompt_tokens":100,"completion_tokens":7,"total_tokens":107}}"#;
    let (url, rx) = mock_server("200 OK", reply.into(), Duration::ZERO);
    let req = CompletionRequest::new(AGENT, context(), BackendId::new("openai", "gpt-4o"));
    let r = backend(&url, ApiStyle::Chat).complete(&req).unwrap();
    assert_eq!((r.prompt_tokens, r.total_tokens), (100, 107));
    assert!(r.raw_output.contains("Subject: x"));
    let sent = rx.recv().unwrap();
    assert_eq!(sent["model"], "gpt-4o");
    assert_eq!(sent["messages"].as_array().unwrap().len(), 3);
    assert_eq!(sent["messages"][1]["role"], "assistant");
}

#[test]
fn text_completion_falls_back_to_estimate() {
    let (url, rx) = mock_server("200 OK", r#"{"choices":[{"text":"abcdefgh"}]}"#.into(), Duration::ZERO);
    let req = CompletionRequest::new(AGENT, context(), BackendId::new("local", "m"));
    let r = backend(&url, ApiStyle::Completion).complete(&req).unwrap();
    assert_eq!(r.raw_output, "abcdefgh");
    assert_eq!(r.total_tokens, (req.rendered.len() as u64).div_ceil(4) + 2);
    assert_eq!(rx.recv().unwrap()["prompt"], Value::String(req.rendered.clone()));
}

#[test]
fn error_status_is_rejection() {
    let (url, _rx) = mock_server("429 Too Many Requests", r#"{"error":"slow down"}"#.into(), Duration::ZERO);
    let req = CompletionRequest::new(AGENT, context(), BackendId::new("openai", "gpt-4o"));
    match backend(&url, ApiStyle::Chat).complete(&req) {
        Err(GatewayError::BackendRejection(text)) => assert!(text.contains("slow down")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn slow_backend_times_out() {
    let (url, _rx) = mock_server("200 OK", "{}".into(), Duration::from_secs(3));
    let mut req = CompletionRequest::new(AGENT, context(), BackendId::new("openai", "gpt-4o"));
    req.timeout = Duration::from_millis(300);
    assert_eq!(backend(&url, ApiStyle::Chat).complete(&req), Err(GatewayError::BackendTimeout(req.timeout)));
}

#[test]
fn bad_url_is_accepted_then_rejected() {
    let id = BackendId::new("broken", "x");
    let mut gw = Gateway::new(BackendId::new("test", "scripted"), std::sync::Arc::new(backend("http://127.0.0.1:1", ApiStyle::Chat)));
    gw.register(id.clone(), std::sync::Arc::new(backend("not a url", ApiStyle::Chat))).unwrap();
    let req = CompletionRequest::new(AGENT, context(), id);
    assert!(matches!(gw.complete(&req), Err(GatewayError::BackendRejection(_))));
}
