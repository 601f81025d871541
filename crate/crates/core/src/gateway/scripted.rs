//! Deterministic rule-driven backend for offline runs and tests.
//!
//! Rules are tried in order against the most recent rendered message not
//! written by the agent itself; the first match produces the output. A rule
//! without `respond` matches and stays silent.
//!
//! ```toml
//! [[rule]]
//! match = { from = "user1@localdomain", subject_regex = "Project Update" }
//! respond = { headers = { Subject = "Re: {{subject}}" }, body = "Noted." }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{Backend, CompletionRequest, CompletionResult, GatewayError};
use crate::address::address_key;
use crate::message::{parse_mbox, Message};

#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RuleMatch {
    pub from: Option<String>,
    pub to: Option<String>,
    pub subject_regex: Option<String>,
    pub body_regex: Option<String>,
}

/// Template for the produced message. Values may use `{{from}}`, `{{to}}`,
/// `{{subject}}`, `{{body}}` and `{{attachment:NAME}}`, all taken from the
/// matched message. `To` defaults to `{{from}}`, `Subject` to `Re: {{subject}}`.
#[derive(Debug, Clone, Default, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Respond {
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: String,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(rename = "match", default)]
    pub when: RuleMatch,
    pub respond: Option<Respond>,
}

#[derive(Deserialize)]
struct RuleFile {
    #[serde(default)]
    rule: Vec<ScriptRule>,
}

#[derive(Debug)]
struct Compiled {
    rule: ScriptRule,
    subject: Option<Regex>,
    body: Option<Regex>,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<Compiled>,
}

fn compile(pattern: &Option<String>) -> Result<Option<Regex>, GatewayError> {
    pattern
        .as_deref()
        .map(|p| Regex::new(p).map_err(|e| GatewayError::InvalidRules(e.to_string())))
        .transpose()
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self, GatewayError> {
        let rules = rules
            .into_iter()
            .map(|rule| Ok(Compiled { subject: compile(&rule.when.subject_regex)?, body: compile(&rule.when.body_regex)?, rule }))
            .collect::<Result<_, GatewayError>>()?;
        Ok(ScriptedBackend { rules })
    }

    /// Parses a TOML document holding a `[[rule]]` array.
    pub fn from_toml_str(text: &str) -> Result<Self, GatewayError> {
        let file: RuleFile = toml::from_str(text).map_err(|e| GatewayError::InvalidRules(e.to_string()))?;
        Self::new(file.rule)
    }

    /// Parses a JSON array of rules, or an object with a `rule` array.
    pub fn from_json_str(text: &str) -> Result<Self, GatewayError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GatewayError::InvalidRules(e.to_string()))?;
        let rules: Vec<ScriptRule> = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value::<RuleFile>(value).map(|f| f.rule)
        }
        .map_err(|e| GatewayError::InvalidRules(e.to_string()))?;
        Self::new(rules)
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::InvalidRules(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn matches(c: &Compiled, msg: &Message) -> bool {
        let w = &c.rule.when;
        if let Some(from) = &w.from {
            if msg.from_addr().map(address_key) != Some(address_key(from)) {
                return false;
            }
        }
        if let Some(to) = &w.to {
            if !msg.to_addrs().iter().any(|t| address_key(t) == address_key(to)) {
                return false;
            }
        }
        if let Some(re) = &c.subject {
            if !re.is_match(msg.subject()) {
                return false;
            }
        }
        if let Some(re) = &c.body {
            if !re.is_match(&msg.text()) {
                return false;
            }
        }
        true
    }

    /// Output for a given context, or an empty string when nothing matches.
    pub fn respond_to(&self, agent: &str, rendered: &str) -> Result<String, GatewayError> {
        let messages = parse_mbox(rendered.as_bytes()).map_err(|e| GatewayError::BackendRejection(e.to_string()))?;
        let me = address_key(agent);
        let Some(trigger) = messages.iter().rev().find(|m| m.from_addr().map(address_key).as_deref() != Some(me.as_str()))
        else {
            return Ok(String::new());
        };
        let Some(rule) = self.rules.iter().find(|c| Self::matches(c, trigger)) else {
            return Ok(String::new());
        };
        let Some(respond) = &rule.rule.respond else {
            return Ok(String::new());
        };
        Ok(render_template(respond, agent, trigger).to_mbox())
    }
}

fn fill(template: &str, msg: &Message) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return out;
        };
        let key = after[..end].trim();
        let value = match key {
            "from" => msg.from_addr().unwrap_or("").to_string(),
            "to" => msg.headers.get("To").unwrap_or("").to_string(),
            "subject" => msg.subject().to_string(),
            "body" => msg.text(),
            _ => match key.strip_prefix("attachment:") {
                Some(name) => msg
                    .attachment(name.trim())
                    .and_then(|p| p.data())
                    .map(|d| String::from_utf8_lossy(d).into_owned())
                    .unwrap_or_default(),
                None => format!("{{{{{key}}}}}"),
            },
        };
        out.push_str(&value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    out
}

fn render_template(respond: &Respond, agent: &str, trigger: &Message) -> Message {
    let header = |name: &str, default: &str| {
        let template = respond.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str());
        fill(template.unwrap_or(default), trigger)
    };
    let mut msg = Message::new(agent, &header("To", "{{from}}"), &header("Subject", "Re: {{subject}}"), &fill(&respond.body, trigger));
    for (name, value) in &respond.headers {
        if ["from", "to", "subject"].contains(&name.to_ascii_lowercase().as_str()) {
            continue;
        }
        msg.headers.push(name, &fill(value, trigger));
    }
    msg
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let output = self.respond_to(&req.agent, &req.rendered)?;
        Ok(CompletionResult::estimated(&req.rendered, output))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{fallback_tokens, BackendId};
    use crate::message::serialize_mbox;

    const AGENT: &str = "ai_30@agents.localdomain";

    fn request(msgs: &[Message]) -> CompletionRequest {
        CompletionRequest::new(AGENT, serialize_mbox(msgs), BackendId::new("test", "scripted"))
    }

    const RULES: &str = r#"
[[rule]]
match = { subject_regex = "^Project Update$" }
respond = { body = "Thanks, {{from}}." }

[[rule]]
match = { from = "user1@localdomain", body_regex = "(?i)storage hardware" }
respond = { headers = { To = "shell@localdomain", Subject = "", "Content-Type" = "application/json" }, body = '{"prompt":"p","command":"lsblk","confirm":false}' }

[[rule]]
match = { from = "system@localdomain" }
"#;

    #[test]
    fn first_matching_rule_wins() {
        let b = ScriptedBackend::from_toml_str(RULES).unwrap();
        let req = request(&[Message::new("bob@x", AGENT, "Project Update", "hi")]);
        let r = b.complete(&req).unwrap();
        let out = parse_mbox(r.raw_output.as_bytes()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].from_addr(), Some(AGENT));
        assert_eq!(out[0].to_addrs(), ["bob@x"]);
        assert_eq!(out[0].subject(), "Re: Project Update");
        assert_eq!(out[0].text(), "Thanks, bob@x.\n");
        assert_eq!(r.total_tokens, fallback_tokens(&req.rendered) + fallback_tokens(&r.raw_output));
    }

    #[test]
    fn shell_rule_emits_json() {
        let b = ScriptedBackend::from_toml_str(RULES).unwrap();
        let req = request(&[Message::new("user1@localdomain", AGENT, "", "Run a command to figure out my storage hardware.")]);
        let out = parse_mbox(b.complete(&req).unwrap().raw_output.as_bytes()).unwrap();
        assert_eq!(out[0].to_addrs(), ["shell@localdomain"]);
        assert_eq!(out[0].content_type(), Some("application/json"));
        assert!(out[0].text().contains("\"command\":\"lsblk\""));
    }

    #[test]
    fn own_messages_are_skipped_and_silence_is_empty() {
        let b = ScriptedBackend::from_toml_str(RULES).unwrap();
        let req = request(&[
            Message::new("bob@x", AGENT, "Project Update", "hi"),
            Message::new(AGENT, "bob@x", "Re: Project Update", "Thanks"),
        ]);
        assert!(b.complete(&req).unwrap().raw_output.contains("Thanks, bob@x."));
        let silent = request(&[Message::new("system@localdomain", AGENT, "Re: MSR 0-0", "ok")]);
        assert_eq!(b.complete(&silent).unwrap().raw_output, "");
        assert_eq!(b.complete(&request(&[])).unwrap().raw_output, "");
    }

    #[test]
    fn deterministic() {
        let b = ScriptedBackend::from_toml_str(RULES).unwrap();
        let req = request(&[Message::new("bob@x", AGENT, "Project Update", "hi")]);
        assert_eq!(b.complete(&req).unwrap(), b.complete(&req).unwrap());
    }

    #[test]
    fn json_rules_and_attachment_template() {
        let json = r#"[{"match": {"from": "shell@localdomain"},
                        "respond": {"headers": {"To": "user1@localdomain"}, "body": "{{attachment:stdout.txt}}"}}]"#;
        let b = ScriptedBackend::from_json_str(json).unwrap();
        let reply = crate::message::build_attachment_message(
            "shell@localdomain",
            AGENT,
            "Re: ",
            "exit 0",
            &[crate::message::Attachment::new("stdout.txt", "text/plain", b"NAME MAJ:MIN\n".to_vec())],
        )
        .unwrap();
        let out = parse_mbox(b.complete(&request(&[reply])).unwrap().raw_output.as_bytes()).unwrap();
        assert_eq!(out[0].text(), "NAME MAJ:MIN\n");
        assert_eq!(out[0].to_addrs(), ["user1@localdomain"]);
    }

    #[test]
    fn bad_rules() {
        assert!(matches!(ScriptedBackend::from_toml_str("[[rule]]\nmatch = { subject_regex = \"(\" }"), Err(GatewayError::InvalidRules(_))));
        assert!(matches!(ScriptedBackend::from_toml_str("[[rule]]\nmatch = { colour = \"x\" }"), Err(GatewayError::InvalidRules(_))));
    }
}
