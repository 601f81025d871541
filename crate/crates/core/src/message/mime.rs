use base64::alphabet;
use base64::engine::general_purpose::{GeneralPurpose, GeneralPurposeConfig, STANDARD};
use base64::engine::DecodePaddingMode;
use base64::Engine as _;
use rand::Rng;

use super::headers::{content_type_param, media_type, Headers};
use super::{canonical_text, Body, FormatError, Message};

const BASE64_LINE: usize = 76;
const BOUNDARY_ATTEMPTS: usize = 16;

// Model-written payloads frequently drop the padding.
const LENIENT: GeneralPurpose = GeneralPurpose::new(
    &alphabet::STANDARD,
    GeneralPurposeConfig::new().with_decode_padding_mode(DecodePaddingMode::Indifferent),
);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferEncoding {
    SevenBit,
    Base64,
}

/// Content of one MIME part: either a leaf payload (stored decoded) or a nested multipart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartContent {
    Leaf { data: Vec<u8>, encoding: TransferEncoding },
    Nested(Multipart),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MimePart {
    pub headers: Headers,
    pub content: PartContent,
}

/// A multipart body. `preamble` is empty or ends with a newline; `epilogue`
/// is everything after the closing delimiter (normally just `"\n"`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Multipart {
    pub boundary: String,
    pub preamble: String,
    pub parts: Vec<MimePart>,
    pub epilogue: String,
}

/// File attached through [`build_attachment_message`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attachment {
    pub filename: String,
    pub media_type: String,
    pub data: Vec<u8>,
}

impl Attachment {
    pub fn new(filename: &str, media_type: &str, data: impl Into<Vec<u8>>) -> Self {
        Attachment { filename: filename.to_string(), media_type: media_type.to_string(), data: data.into() }
    }
}

impl MimePart {
    pub fn text(content_type: &str, text: &str) -> Self {
        let mut headers = Headers::new();
        headers.push("Content-Type", content_type);
        MimePart {
            headers,
            content: PartContent::Leaf { data: canonical_text(text.to_string()).into_bytes(), encoding: TransferEncoding::SevenBit },
        }
    }

    pub fn attachment(att: &Attachment) -> Self {
        let mut headers = Headers::new();
        headers.push("Content-Type", &att.media_type);
        headers.push("Content-Transfer-Encoding", "base64");
        headers.push("Content-Disposition", &format!("attachment; filename=\"{}\"", att.filename));
        MimePart { headers, content: PartContent::Leaf { data: att.data.clone(), encoding: TransferEncoding::Base64 } }
    }

    /// Decoded payload of a leaf part.
    pub fn data(&self) -> Option<&[u8]> {
        match &self.content {
            PartContent::Leaf { data, .. } => Some(data),
            PartContent::Nested(_) => None,
        }
    }

    pub fn media_type(&self) -> String {
        self.headers.get("Content-Type").map(media_type).unwrap_or_else(|| "text/plain".to_string())
    }

    pub fn is_attachment(&self) -> bool {
        self.headers
            .get("Content-Disposition")
            .map(|v| media_type(v) == "attachment")
            .unwrap_or(false)
    }

    pub fn filename(&self) -> Option<String> {
        self.headers
            .get("Content-Disposition")
            .and_then(|v| content_type_param(v, "filename"))
            .or_else(|| self.headers.get("Content-Type").and_then(|v| content_type_param(v, "name")))
    }

    fn write_to(&self, out: &mut String) {
        self.headers.write_to(out);
        out.push('\n');
        match &self.content {
            PartContent::Leaf { data, encoding: TransferEncoding::SevenBit } => out.push_str(&String::from_utf8_lossy(data)),
            PartContent::Leaf { data, encoding: TransferEncoding::Base64 } => out.push_str(&encode_wrapped(data)),
            PartContent::Nested(m) => out.push_str(&m.to_wire()),
        }
    }

    /// Wire text of the payload, as it would appear between the part headers
    /// and the next delimiter.
    pub fn encoded_payload(&self) -> String {
        let mut out = String::new();
        self.write_to(&mut out);
        let header_len = {
            let mut h = String::new();
            self.headers.write_to(&mut h);
            h.len() + 1
        };
        out.split_off(header_len)
    }
}

impl Multipart {
    pub fn new(boundary: &str, parts: Vec<MimePart>) -> Self {
        Multipart { boundary: boundary.to_string(), preamble: String::new(), parts, epilogue: "\n".to_string() }
    }

    pub fn to_wire(&self) -> String {
        let mut out = self.preamble.clone();
        for part in &self.parts {
            out.push_str("--");
            out.push_str(&self.boundary);
            out.push('\n');
            part.write_to(&mut out);
            out.push('\n');
        }
        out.push_str("--");
        out.push_str(&self.boundary);
        out.push_str("--");
        out.push_str(&self.epilogue);
        out
    }

    pub fn first_text(&self) -> Option<String> {
        self.parts.iter().find_map(|p| match &p.content {
            PartContent::Leaf { data, .. } if !p.is_attachment() && p.media_type().starts_with("text/") => {
                Some(String::from_utf8_lossy(data).into_owned())
            }
            PartContent::Nested(m) => m.first_text(),
            _ => None,
        })
    }

    pub fn attachments(&self) -> Vec<&MimePart> {
        let mut out = Vec::new();
        for p in &self.parts {
            match &p.content {
                PartContent::Nested(m) => out.extend(m.attachments()),
                PartContent::Leaf { .. } if p.is_attachment() => out.push(p),
                PartContent::Leaf { .. } => {}
            }
        }
        out
    }

    /// Parses the wire text of a multipart body delimited by `boundary`.
    pub(crate) fn parse(text: &str, boundary: &str) -> Result<Multipart, FormatError> {
        let mut counter = 0;
        parse_multipart(text, boundary, &mut counter)
    }
}

fn is_delimiter(line: &str, boundary: &str) -> Option<bool> {
    let rest = line.strip_prefix("--")?.strip_prefix(boundary)?;
    let rest = rest.trim_end_matches([' ', '\t']);
    match rest {
        "" => Some(false),
        "--" => Some(true),
        _ => None,
    }
}

fn parse_multipart(text: &str, boundary: &str, counter: &mut usize) -> Result<Multipart, FormatError> {
    let unterminated = || FormatError::UnterminatedMultipart { boundary: boundary.to_string() };
    let lines: Vec<&str> = text.split('\n').collect();
    let first = lines
        .iter()
        .position(|l| is_delimiter(l, boundary) == Some(false))
        .ok_or_else(unterminated)?;
    let preamble = if first == 0 { String::new() } else { format!("{}\n", lines[..first].join("\n")) };

    let mut parts = Vec::new();
    let mut i = first;
    loop {
        let start = i + 1;
        let (j, closing) = lines[start..]
            .iter()
            .enumerate()
            .find_map(|(k, l)| is_delimiter(l, boundary).map(|c| (start + k, c)))
            .ok_or_else(unterminated)?;
        parts.push(parse_part(&lines[start..j], counter)?);
        if closing {
            let epilogue = if j + 1 < lines.len() { format!("\n{}", lines[j + 1..].join("\n")) } else { String::new() };
            return Ok(Multipart { boundary: boundary.to_string(), preamble, parts, epilogue });
        }
        i = j;
    }
}

fn parse_part(lines: &[&str], counter: &mut usize) -> Result<MimePart, FormatError> {
    let index = *counter;
    *counter += 1;
    let (headers, used, _) = Headers::parse_block(lines);
    let payload = lines[used.min(lines.len())..].join("\n");

    if let Some(ct) = headers.get("Content-Type") {
        if media_type(ct).starts_with("multipart/") {
            if let Some(b) = content_type_param(ct, "boundary") {
                let nested = parse_multipart(&payload, &b, counter)?;
                return Ok(MimePart { headers, content: PartContent::Nested(nested) });
            }
        }
    }
    let is_base64 = headers
        .get("Content-Transfer-Encoding")
        .map(|v| v.trim().eq_ignore_ascii_case("base64"))
        .unwrap_or(false);
    let content = if is_base64 {
        let compact: String = payload.chars().filter(|c| !c.is_ascii_whitespace()).collect();
        let data = LENIENT
            .decode(compact.as_bytes())
            .map_err(|e| FormatError::InvalidBase64 { part: index, detail: e.to_string() })?;
        PartContent::Leaf { data, encoding: TransferEncoding::Base64 }
    } else {
        PartContent::Leaf { data: payload.into_bytes(), encoding: TransferEncoding::SevenBit }
    };
    Ok(MimePart { headers, content })
}

/// Standard base64 wrapped at 76 columns, lines joined with LF, no trailing newline.
pub(crate) fn encode_wrapped(data: &[u8]) -> String {
    let encoded = STANDARD.encode(data);
    let mut out = String::with_capacity(encoded.len() + encoded.len() / BASE64_LINE);
    for (i, chunk) in encoded.as_bytes().chunks(BASE64_LINE).enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(std::str::from_utf8(chunk).expect("base64 is ascii"));
    }
    out
}

fn random_boundary() -> String {
    let n: u64 = rand::thread_rng().gen();
    format!("----=_Part_{n:016x}")
}

/// Builds a `multipart/mixed` message: a `text/plain` part carrying `body_text`
/// followed by one base64 attachment part per entry of `attachments`.
pub fn build_attachment_message(
    from: &str,
    to: &str,
    subject: &str,
    body_text: &str,
    attachments: &[Attachment],
) -> Result<Message, FormatError> {
    build_attachment_message_with(from, to, subject, body_text, attachments, std::iter::repeat_with(random_boundary))
}

/// As [`build_attachment_message`], drawing boundary candidates from `candidates`.
/// A candidate is rejected when it occurs anywhere in the encoded parts.
pub fn build_attachment_message_with(
    from: &str,
    to: &str,
    subject: &str,
    body_text: &str,
    attachments: &[Attachment],
    candidates: impl IntoIterator<Item = String>,
) -> Result<Message, FormatError> {
    if attachments.is_empty() {
        return Err(FormatError::NoAttachments);
    }
    let mut parts = vec![MimePart::text("text/plain; charset=\"utf-8\"", body_text)];
    parts.extend(attachments.iter().map(MimePart::attachment));

    let encoded: Vec<String> = parts
        .iter()
        .map(|p| {
            let mut s = String::new();
            p.write_to(&mut s);
            s
        })
        .collect();

    let boundary = candidates
        .into_iter()
        .take(BOUNDARY_ATTEMPTS)
        .find(|b| !b.is_empty() && !encoded.iter().any(|e| e.contains(b.as_str())))
        .ok_or(FormatError::BoundaryExhaustion { attempts: BOUNDARY_ATTEMPTS })?;

    let mut msg = Message::new(from, to, subject, "");
    msg.headers.push("MIME-Version", "1.0");
    msg.headers.push("Content-Type", &format!("multipart/mixed; boundary=\"{boundary}\""));
    msg.body = Body::Multipart(Multipart::new(&boundary, parts));
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRANSCRIPT_BODY: &str = "------Boundary\nContent-Type: text/plain; charset=\"utf-8\"\n\nHere is the sample image `sample.png` attached.\n\n------Boundary\nContent-Type: image/png\nContent-Transfer-Encoding: base64\nContent-Disposition: attachment; filename=\"sample.png\"\n\niVBORw0KGgo=\n------Boundary--\n";

    #[test]
    fn parses_transcript_shaped_multipart() {
        let m = Multipart::parse(TRANSCRIPT_BODY, "----Boundary").unwrap();
        assert_eq!(m.parts.len(), 2);
        assert_eq!(m.first_text().unwrap(), "Here is the sample image `sample.png` attached.\n");
        let att = m.attachments();
        assert_eq!(att.len(), 1);
        assert_eq!(att[0].filename().as_deref(), Some("sample.png"));
        assert_eq!(att[0].media_type(), "image/png");
        assert_eq!(&att[0].data().unwrap()[..4], b"\x89PNG");
        assert_eq!(m.to_wire(), TRANSCRIPT_BODY);
    }

    #[test]
    fn missing_close_is_unterminated() {
        let body = "--b\nContent-Type: text/plain\n\nhello\n";
        assert!(matches!(Multipart::parse(body, "b"), Err(FormatError::UnterminatedMultipart { .. })));
        assert!(matches!(Multipart::parse("no delimiters\n", "b"), Err(FormatError::UnterminatedMultipart { .. })));
    }

    #[test]
    fn base64_lines_wrap_at_76() {
        let data: Vec<u8> = (0..=255u8).cycle().take(1000).collect();
        let wire = encode_wrapped(&data);
        assert!(wire.lines().all(|l| l.len() <= 76));
        assert_eq!(wire.lines().next().unwrap().len(), 76);
    }

    #[test]
    fn empty_attachment_has_empty_payload() {
        let msg = build_attachment_message("a@x", "b@x", "s", "t", &[Attachment::new("e.bin", "application/octet-stream", vec![])]).unwrap();
        let att = msg.attachment("e.bin").unwrap();
        assert_eq!(att.data().unwrap(), b"");
        assert_eq!(att.encoded_payload(), "");
    }

    #[test]
    fn colliding_candidate_is_skipped() {
        let att = Attachment::new("z.bin", "application/octet-stream", vec![0u8; 120]);
        let candidates = ["AAAAAAAA".to_string(), "clean-boundary".to_string()];
        let msg = build_attachment_message_with("a@x", "b@x", "s", "t", std::slice::from_ref(&att), candidates).unwrap();
        match &msg.body {
            Body::Multipart(m) => assert_eq!(m.boundary, "clean-boundary"),
            other => panic!("expected multipart, got {other:?}"),
        }
        let err = build_attachment_message_with("a@x", "b@x", "s", "t", &[att], std::iter::repeat("AAAA".to_string()));
        assert_eq!(err, Err(FormatError::BoundaryExhaustion { attempts: 16 }));
    }

    #[test]
    fn no_attachments_is_rejected() {
        assert_eq!(build_attachment_message("a@x", "b@x", "s", "t", &[]), Err(FormatError::NoAttachments));
    }
}
