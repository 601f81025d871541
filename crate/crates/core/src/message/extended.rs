use super::{FormatError, Message};

pub const X_SERIAL: &str = "X-Serial";
pub const X_TOTAL_TOKENS: &str = "X-Total-Tokens";
pub const X_HINT_MODEL: &str = "X-Hint-Model";
pub const X_REALM: &str = "X-Realm";
/// Names an existing agent whose context seeds a newly created one.
pub const X_CLONE_FROM: &str = "X-Clone-From";

/// Typed view of the platform's extension headers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtendedHeaders {
    pub x_serial: Option<u64>,
    pub x_total_tokens: Option<u64>,
    pub x_hint_model: Option<String>,
    pub x_realm: Option<String>,
}

impl ExtendedHeaders {
    pub fn from_message(msg: &Message) -> Result<Self, FormatError> {
        Ok(ExtendedHeaders {
            x_serial: number(msg, X_SERIAL)?,
            x_total_tokens: number(msg, X_TOTAL_TOKENS)?,
            x_hint_model: token(msg, X_HINT_MODEL)?,
            x_realm: token(msg, X_REALM)?,
        })
    }
}

fn invalid(name: &str, value: &str) -> FormatError {
    FormatError::InvalidHeaderValue { name: name.to_string(), value: value.to_string() }
}

fn number(msg: &Message, name: &str) -> Result<Option<u64>, FormatError> {
    let Some(raw) = msg.headers.get(name) else { return Ok(None) };
    let v = raw.trim();
    if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
        return Err(invalid(name, raw));
    }
    v.parse().map(Some).map_err(|_| invalid(name, raw))
}

fn token(msg: &Message, name: &str) -> Result<Option<String>, FormatError> {
    let Some(raw) = msg.headers.get(name) else { return Ok(None) };
    let v = raw.trim();
    if v.is_empty() || v.chars().any(char::is_whitespace) {
        return Err(invalid(name, raw));
    }
    Ok(Some(v.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(name: &str, value: &str) -> Message {
        Message::new("a@x", "b@x", "s", "").with_header(name, value)
    }

    #[test]
    fn serial_and_tokens_parse() {
        assert_eq!(with("X-Serial", "3").extended().unwrap().x_serial, Some(3));
        assert_eq!(with("X-Total-Tokens", "17727").extended().unwrap().x_total_tokens, Some(17727));
        assert_eq!(with("x-hint-model", "openai.gpt-4o").extended().unwrap().x_hint_model.as_deref(), Some("openai.gpt-4o"));
    }

    #[test]
    fn absent_headers_are_empty() {
        assert_eq!(Message::new("a@x", "b@x", "s", "").extended().unwrap(), ExtendedHeaders::default());
    }

    #[test]
    fn non_numeric_serial_is_rejected() {
        for bad in ["three", "-1", "", "3.0", "1 2"] {
            assert!(matches!(with("X-Serial", bad).extended(), Err(FormatError::InvalidHeaderValue { .. })), "{bad}");
        }
        assert!(with("X-Realm", "two words").extended().is_err());
    }
}
