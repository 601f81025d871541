use std::fmt::Write as _;

/// A single header field. `value` keeps continuation lines verbatim
/// (newline followed by the original leading whitespace).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub name: String,
    pub value: String,
}

/// Ordered, repeatable header list with case-insensitive lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<Header>);

/// Header names are non-empty runs of printable ASCII without whitespace or colons.
pub fn is_valid_header_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_graphic() && b != b':')
}

impl Headers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, value: &str) {
        debug_assert!(is_valid_header_name(name), "bad header name {name:?}");
        self.0.push(Header { name: name.to_string(), value: value.to_string() });
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.iter().find(|h| h.name.eq_ignore_ascii_case(name)).map(|h| h.value.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0.iter().filter(move |h| h.name.eq_ignore_ascii_case(name)).map(|h| h.value.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Replaces the first occurrence in place and drops any others; appends when absent.
    pub fn set(&mut self, name: &str, value: &str) {
        match self.0.iter().position(|h| h.name.eq_ignore_ascii_case(name)) {
            Some(i) => {
                self.0[i].value = value.to_string();
                let mut idx = 0;
                self.0.retain(|h| {
                    let keep = idx <= i || !h.name.eq_ignore_ascii_case(name);
                    idx += 1;
                    keep
                });
            }
            None => self.push(name, value),
        }
    }

    pub fn remove(&mut self, name: &str) -> bool {
        let before = self.0.len();
        self.0.retain(|h| !h.name.eq_ignore_ascii_case(name));
        before != self.0.len()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Header> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn write_to(&self, out: &mut String) {
        for h in &self.0 {
            let _ = writeln!(out, "{}: {}", h.name, h.value);
        }
    }

    /// Parses a header block from the front of `lines`. Stops at the first
    /// blank line (consumed, reported as `true`) or the first line that is
    /// neither a header nor a continuation (left in place, reported as `false`).
    pub(crate) fn parse_block(lines: &[&str]) -> (Headers, usize, bool) {
        let mut headers = Headers::default();
        let mut i = 0;
        while i < lines.len() {
            let line = lines[i];
            if line.is_empty() {
                return (headers, i + 1, true);
            }
            if (line.starts_with(' ') || line.starts_with('\t')) && !headers.is_empty() {
                let last = headers.0.last_mut().expect("non-empty");
                last.value.push('\n');
                last.value.push_str(line);
                i += 1;
                continue;
            }
            match split_header_line(line) {
                Some((name, value)) => headers.0.push(Header { name: name.to_string(), value: value.to_string() }),
                None => return (headers, i, false),
            }
            i += 1;
        }
        (headers, i, true)
    }
}

impl<'a> IntoIterator for &'a Headers {
    type Item = &'a Header;
    type IntoIter = std::slice::Iter<'a, Header>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

fn split_header_line(line: &str) -> Option<(&str, &str)> {
    let colon = line.find(':')?;
    let name = &line[..colon];
    if !is_valid_header_name(name) {
        return None;
    }
    let rest = &line[colon + 1..];
    Some((name, rest.strip_prefix(' ').unwrap_or(rest)))
}

/// Extracts a parameter (e.g. `boundary`) from a structured header value
/// such as `multipart/mixed; boundary="----Boundary"`.
pub fn content_type_param(value: &str, param: &str) -> Option<String> {
    for piece in value.split(';').skip(1) {
        let piece = piece.trim();
        let Some(eq) = piece.find('=') else { continue };
        if !piece[..eq].trim().eq_ignore_ascii_case(param) {
            continue;
        }
        let raw = piece[eq + 1..].trim();
        let unquoted = raw
            .strip_prefix('"')
            .and_then(|r| r.strip_suffix('"'))
            .unwrap_or(raw);
        return Some(unquoted.to_string());
    }
    None
}

/// Media type portion of a `Content-Type` value, lowercased.
pub fn media_type(value: &str) -> String {
    value.split(';').next().unwrap_or("").trim().to_ascii_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_is_case_insensitive_but_case_is_kept() {
        let mut h = Headers::new();
        h.push("X-Serial", "3");
        assert_eq!(h.get("x-serial"), Some("3"));
        let mut out = String::new();
        h.write_to(&mut out);
        assert_eq!(out, "X-Serial: 3\n");
    }

    #[test]
    fn set_replaces_first_and_drops_duplicates() {
        let mut h = Headers::new();
        h.push("A", "1");
        h.push("B", "2");
        h.push("a", "3");
        h.set("A", "9");
        let names: Vec<_> = h.iter().map(|h| (h.name.as_str(), h.value.as_str())).collect();
        assert_eq!(names, vec![("A", "9"), ("B", "2")]);
    }

    #[test]
    fn block_stops_at_non_header_line() {
        let lines = ["From: a@b", "Subject: x", "Hi Bob,", ""];
        let (h, used, blank) = Headers::parse_block(&lines);
        assert_eq!(h.len(), 2);
        assert_eq!(used, 2);
        assert!(!blank);
    }

    #[test]
    fn continuation_lines_are_kept_verbatim() {
        let lines = ["Subject: a", "\tb", "", "body"];
        let (h, used, blank) = Headers::parse_block(&lines);
        assert_eq!(h.get("subject"), Some("a\n\tb"));
        assert_eq!(used, 3);
        assert!(blank);
    }

    #[test]
    fn boundary_param_quoted_and_bare() {
        assert_eq!(
            content_type_param("multipart/mixed; boundary=\"----Boundary\"", "boundary").as_deref(),
            Some("----Boundary")
        );
        assert_eq!(content_type_param("multipart/mixed; BOUNDARY=abc", "boundary").as_deref(), Some("abc"));
        assert_eq!(content_type_param("text/plain", "boundary"), None);
    }

    #[test]
    fn names_reject_whitespace_and_colons() {
        assert!(is_valid_header_name("X-Total-Tokens"));
        assert!(!is_valid_header_name(""));
        assert!(!is_valid_header_name("Bad Name"));
        assert!(!is_valid_header_name("a:b"));
    }
}
