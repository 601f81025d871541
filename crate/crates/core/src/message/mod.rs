//! Messages, the MBox container format and the MIME subset the platform speaks.
//!
//! A [`Message`] is kept in a canonical form: LF line endings, headers in
//! insertion order with their original case, and a body that is either empty
//! or ends with a newline. Every message this module produces serializes and
//! re-parses to an identical value.

mod extended;
mod headers;
mod mbox;
mod mime;

pub use extended::{ExtendedHeaders, X_CLONE_FROM, X_HINT_MODEL, X_REALM, X_SERIAL, X_TOTAL_TOKENS};
pub use headers::{content_type_param, is_valid_header_name, media_type, Header, Headers};
pub use mbox::{parse_mbox, parse_mbox_prefix, parse_mbox_with, parse_message, serialize_mbox, ParseOptions};
pub use mime::{build_attachment_message, build_attachment_message_with, Attachment, MimePart, Multipart, PartContent, TransferEncoding};

use thiserror::Error;

/// Default ceiling on the size of a single message, in bytes.
pub const DEFAULT_MAX_MESSAGE_SIZE: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("line {line}: expected an envelope line starting with \"From \"")]
    MalformedEnvelope { line: usize },
    #[error("multipart body with boundary {boundary:?} is never closed")]
    UnterminatedMultipart { boundary: String },
    #[error("invalid base64 payload in part {part}: {detail}")]
    InvalidBase64 { part: usize, detail: String },
    #[error("message of {size} bytes exceeds the {limit} byte limit")]
    MessageTooLarge { size: usize, limit: usize },
    #[error("could not find a boundary absent from the content after {attempts} attempts")]
    BoundaryExhaustion { attempts: usize },
    #[error("header {name}: invalid value {value:?}")]
    InvalidHeaderValue { name: String, value: String },
    #[error("attachment message needs at least one attachment")]
    NoAttachments,
}

/// Body of a message or of a nested MIME part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Plain(String),
    Multipart(Multipart),
}

impl Default for Body {
    fn default() -> Self {
        Body::Plain(String::new())
    }
}

impl Body {
    /// Plain body normalized to canonical form (trailing newline when non-empty).
    pub fn text(text: impl Into<String>) -> Self {
        Body::Plain(canonical_text(text.into()))
    }

    pub fn as_plain(&self) -> Option<&str> {
        match self {
            Body::Plain(s) => Some(s),
            Body::Multipart(_) => None,
        }
    }

    /// Text rendering of the body exactly as it appears on the wire, before
    /// mbox `From ` quoting.
    pub fn to_wire(&self) -> String {
        match self {
            Body::Plain(s) => s.clone(),
            Body::Multipart(m) => m.to_wire(),
        }
    }
}

/// Appends a final newline to non-empty text that lacks one and converts CRLF to LF.
pub(crate) fn canonical_text(text: String) -> String {
    let mut text = text;
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    if text.contains('\r') {
        text = text.replace("\r\n", "\n");
    }
    text
}

/// One email: envelope line, ordered headers and a body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub envelope_from: String,
    /// Envelope timestamp, kept verbatim.
    pub envelope_date: String,
    pub headers: Headers,
    pub body: Body,
    /// Whether a blank line separates the header block from the body. Hand
    /// written mbox files sometimes start the body right after the last header.
    pub blank_after_headers: bool,
}

impl Default for Message {
    fn default() -> Self {
        Message {
            envelope_from: "MAILER-DAEMON".to_string(),
            envelope_date: String::new(),
            headers: Headers::default(),
            body: Body::default(),
            blank_after_headers: true,
        }
    }
}

impl Message {
    /// A plain-text message with `From`, `To` and `Subject` headers.
    pub fn new(from: &str, to: &str, subject: &str, body: &str) -> Self {
        let mut headers = Headers::default();
        headers.push("From", from);
        headers.push("To", to);
        headers.push("Subject", subject);
        Message {
            envelope_from: from.to_string(),
            envelope_date: String::new(),
            headers,
            body: Body::text(body),
            blank_after_headers: true,
        }
    }

    pub fn with_date(mut self, date: &str) -> Self {
        self.envelope_date = date.to_string();
        self
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push(name, value);
        self
    }

    pub fn from_addr(&self) -> Option<&str> {
        self.headers.get("From")
    }

    /// Recipients listed in `To`, split on commas.
    pub fn to_addrs(&self) -> Vec<&str> {
        self.headers
            .get_all("To")
            .flat_map(|v| v.split(','))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(strip_angle)
            .collect()
    }

    pub fn subject(&self) -> &str {
        self.headers.get("Subject").unwrap_or("")
    }

    pub fn content_type(&self) -> Option<&str> {
        self.headers.get("Content-Type")
    }

    /// Sets `From` in both the header block and the envelope.
    pub fn set_from(&mut self, addr: &str) {
        self.headers.set("From", addr);
        self.envelope_from = addr.to_string();
    }

    /// Plain body text, or the text of the first `text/plain` part.
    pub fn text(&self) -> String {
        match &self.body {
            Body::Plain(s) => s.clone(),
            Body::Multipart(m) => m.first_text().unwrap_or_default(),
        }
    }

    /// Attachment parts, searched recursively.
    pub fn attachments(&self) -> Vec<&MimePart> {
        match &self.body {
            Body::Plain(_) => Vec::new(),
            Body::Multipart(m) => m.attachments(),
        }
    }

    pub fn attachment(&self, filename: &str) -> Option<&MimePart> {
        self.attachments().into_iter().find(|p| p.filename().as_deref() == Some(filename))
    }

    /// Canonical single-message serialization, without trailing separator.
    pub fn to_mbox(&self) -> String {
        serialize_mbox(std::slice::from_ref(self))
    }

    pub fn extended(&self) -> Result<ExtendedHeaders, FormatError> {
        ExtendedHeaders::from_message(self)
    }
}

fn strip_angle(s: &str) -> &str {
    match (s.rfind('<'), s.rfind('>')) {
        (Some(a), Some(b)) if a < b => &s[a + 1..b],
        _ => s,
    }
}
