//! mboxrd reading and writing.
//!
//! A message starts at a line beginning with `From ` that is either the first
//! line of the stream or directly preceded by a blank line; that blank line is
//! the separator and belongs to neither message. Body lines matching
//! `^>*From ` gain one `>` on output and lose one on input.

use super::headers::{content_type_param, media_type, Headers};
use super::{canonical_text, Body, FormatError, Message, Multipart, DEFAULT_MAX_MESSAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    pub max_message_size: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { max_message_size: DEFAULT_MAX_MESSAGE_SIZE }
    }
}

pub fn parse_mbox(input: &[u8]) -> Result<Vec<Message>, FormatError> {
    parse_mbox_with(input, &ParseOptions::default())
}

pub fn parse_mbox_with(input: &[u8], opts: &ParseOptions) -> Result<Vec<Message>, FormatError> {
    let (messages, err) = parse_mbox_prefix(input, opts);
    match err {
        Some(e) => Err(e),
        None => Ok(messages),
    }
}

/// Parses as many leading messages as possible. Returns the messages read
/// before the first failure together with that failure, if any.
pub fn parse_mbox_prefix(input: &[u8], opts: &ParseOptions) -> (Vec<Message>, Option<FormatError>) {
    let text = String::from_utf8_lossy(input);
    let text = if text.contains('\r') { text.replace("\r\n", "\n") } else { text.into_owned() };
    let lines: Vec<&str> = text.lines().collect();

    let Some(first) = lines.iter().position(|l| !l.trim().is_empty()) else {
        return (Vec::new(), None);
    };
    if !is_envelope(lines[first]) {
        return (Vec::new(), Some(FormatError::MalformedEnvelope { line: first + 1 }));
    }

    let mut starts = vec![first];
    for k in first + 1..lines.len() {
        if is_envelope(lines[k]) && lines[k - 1].is_empty() {
            starts.push(k);
        }
    }

    let mut messages = Vec::with_capacity(starts.len());
    for (n, &start) in starts.iter().enumerate() {
        // the blank line before the next envelope is the separator
        let end = starts.get(n + 1).map(|&next| next - 1).unwrap_or(lines.len());
        let chunk = &lines[start..end];
        let size: usize = chunk.iter().map(|l| l.len() + 1).sum();
        if size > opts.max_message_size {
            return (messages, Some(FormatError::MessageTooLarge { size, limit: opts.max_message_size }));
        }
        match parse_chunk(chunk) {
            Ok(m) => messages.push(m),
            Err(e) => return (messages, Some(e)),
        }
    }
    (messages, None)
}

/// Parses text produced by a language model or typed by a client. The
/// leading envelope line is optional; when missing, a placeholder envelope
/// taken from the `From` header (or `MAILER-DAEMON`) is supplied.
pub fn parse_message(text: &str) -> Result<Vec<Message>, FormatError> {
    let trimmed = text.trim_start_matches(['\n', '\r']);
    if is_envelope(trimmed.lines().next().unwrap_or("")) {
        return parse_mbox(trimmed.as_bytes());
    }
    if trimmed.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut framed = String::with_capacity(trimmed.len() + 24);
    framed.push_str("From MAILER-DAEMON\n");
    framed.push_str(trimmed);
    let mut messages = parse_mbox(framed.as_bytes())?;
    if let Some(first) = messages.first_mut() {
        if let Some(from) = first.from_addr().map(str::to_string) {
            first.envelope_from = from;
        }
    }
    Ok(messages)
}

fn is_envelope(line: &str) -> bool {
    line.starts_with("From ")
}

fn parse_chunk(chunk: &[&str]) -> Result<Message, FormatError> {
    let envelope = chunk[0]["From ".len()..].trim_end();
    let (envelope_from, envelope_date) = match envelope.split_once(' ') {
        Some((who, date)) => (who.to_string(), date.trim_start().to_string()),
        None => (envelope.to_string(), String::new()),
    };

    let rest = &chunk[1..];
    let (headers, used, mut blank_after_headers) = Headers::parse_block(rest);
    let body_lines = &rest[used.min(rest.len())..];

    let mut body_text = String::new();
    for line in body_lines {
        body_text.push_str(unquote(line));
        body_text.push('\n');
    }
    let body_text = canonical_text(body_text);
    if body_text.is_empty() {
        blank_after_headers = true;
    }

    let body = match multipart_boundary(&headers) {
        Some(boundary) => Body::Multipart(Multipart::parse(&body_text, &boundary)?),
        None => Body::Plain(body_text),
    };
    Ok(Message { envelope_from, envelope_date, headers, body, blank_after_headers })
}

fn multipart_boundary(headers: &Headers) -> Option<String> {
    let ct = headers.get("Content-Type")?;
    if !media_type(ct).starts_with("multipart/") {
        return None;
    }
    content_type_param(ct, "boundary")
}

fn needs_quoting(line: &str) -> bool {
    line.trim_start_matches('>').starts_with("From ")
}

fn unquote(line: &str) -> &str {
    if line.starts_with('>') && needs_quoting(line) {
        &line[1..]
    } else {
        line
    }
}

/// Serializes messages as an mbox stream, one blank line between messages.
pub fn serialize_mbox(messages: &[Message]) -> String {
    let mut out = String::new();
    for (i, msg) in messages.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        write_message(msg, &mut out);
    }
    out
}

fn write_message(msg: &Message, out: &mut String) {
    out.push_str("From ");
    out.push_str(if msg.envelope_from.is_empty() { "MAILER-DAEMON" } else { &msg.envelope_from });
    if !msg.envelope_date.is_empty() {
        out.push(' ');
        out.push_str(&msg.envelope_date);
    }
    out.push('\n');
    msg.headers.write_to(out);

    let body = msg.body.to_wire();
    if msg.blank_after_headers || body.is_empty() {
        out.push('\n');
    }
    for line in body.split_inclusive('\n') {
        if needs_quoting(line) {
            out.push('>');
        }
        out.push_str(line);
    }
    if !body.is_empty() && !body.ends_with('\n') {
        out.push('\n');
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_list() {
        assert!(parse_mbox(b"").unwrap().is_empty());
        assert!(parse_mbox(b"\n\n").unwrap().is_empty());
    }

    #[test]
    fn first_line_must_be_envelope() {
        assert_eq!(parse_mbox(b"Subject: hi\n\nbody\n"), Err(FormatError::MalformedEnvelope { line: 1 }));
        assert_eq!(parse_mbox(b"\nnope\n"), Err(FormatError::MalformedEnvelope { line: 2 }));
    }

    #[test]
    fn empty_body_is_envelope_headers_blank() {
        let m = Message::new("a@x", "b@x", "hi", "");
        assert_eq!(serialize_mbox(std::slice::from_ref(&m)), "From a@x\nFrom: a@x\nTo: b@x\nSubject: hi\n\n");
        assert_eq!(parse_mbox(serialize_mbox(std::slice::from_ref(&m)).as_bytes()).unwrap(), vec![m]);
    }

    #[test]
    fn from_lines_in_body_are_quoted() {
        let m = Message::new("a@x", "b@x", "s", "From the desk of X\n>From quoted\nplain\n");
        let wire = serialize_mbox(&[m.clone(), m.clone()]);
        assert!(wire.contains("\n>From the desk of X\n>>From quoted\n"));
        assert_eq!(parse_mbox(wire.as_bytes()).unwrap(), vec![m.clone(), m]);
    }

    #[test]
    fn crlf_is_accepted() {
        let wire = "From a@x Fri\r\nSubject: s\r\n\r\nline\r\n";
        let msgs = parse_mbox(wire.as_bytes()).unwrap();
        assert_eq!(msgs[0].body, Body::Plain("line\n".into()));
        assert_eq!(msgs[0].envelope_date, "Fri");
    }

    #[test]
    fn unblanked_from_line_stays_in_body() {
        let wire = "From a@x\nSubject: s\n\nfirst\nFrom not a separator\n";
        let msgs = parse_mbox(wire.as_bytes()).unwrap();
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].text().contains("From not a separator"));
    }

    #[test]
    fn size_limit_is_enforced() {
        let m = Message::new("a@x", "b@x", "s", &"x".repeat(100));
        let wire = serialize_mbox(&[m]);
        let err = parse_mbox_with(wire.as_bytes(), &ParseOptions { max_message_size: 64 });
        assert!(matches!(err, Err(FormatError::MessageTooLarge { limit: 64, .. })));
    }

    #[test]
    fn lenient_parse_supplies_envelope() {
        let out = "From: ai@agents.localdomain\nTo: user1@localdomain\nSubject: hi\n\nHello\n";
        let msgs = parse_message(out).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].envelope_from, "ai@agents.localdomain");
        assert_eq!(msgs[0].subject(), "hi");
        assert!(parse_message("  \n").unwrap().is_empty());
    }

    #[test]
    fn unterminated_multipart_is_an_error() {
        let wire = "From a@x\nContent-Type: multipart/mixed; boundary=\"zz\"\n\n--zz\n\npart\n";
        assert!(matches!(parse_mbox(wire.as_bytes()), Err(FormatError::UnterminatedMultipart { .. })));
    }
}
