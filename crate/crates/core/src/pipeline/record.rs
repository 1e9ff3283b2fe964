use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};

pub const DEFAULT_PHASE: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub enum Severity {
    Debug,
    #[default]
    Info,
    Warning,
    Error,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::Debug, Severity::Info, Severity::Warning, Severity::Error];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Debug => "DEBUG",
            Severity::Info => "INFO",
            Severity::Warning => "WARNING",
            Severity::Error => "ERROR",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Severity::ALL.into_iter().find(|v| v.as_str() == s).ok_or(())
    }
}

/// One line of pilot output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotLogRecord {
    pub pilot_uuid: String,
    /// UTC, RFC 3339.
    pub timestamp: String,
    pub phase: String,
    pub severity: Severity,
    pub message: String,
    pub source: String,
}

/// First schema violation found in a submitted record.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {reason}")]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

const FIELDS: [&str; 6] = ["message", "phase", "pilot_uuid", "severity", "source", "timestamp"];

/// Canonical hyphenated form, e.g. `0f8fad5b-d9cb-469f-a165-70867728950e`.
pub fn is_valid_pilot_uuid(s: &str) -> bool {
    s.len() == 36 && uuid::Uuid::try_parse(s).is_ok()
}

pub fn is_valid_timestamp(s: &str) -> bool {
    chrono::DateTime::parse_from_rfc3339(s).is_ok_and(|t| t.offset().local_minus_utc() == 0)
}

impl PilotLogRecord {
    pub fn new(pilot_uuid: impl Into<String>, timestamp: impl Into<String>, message: impl Into<String>) -> Self {
        PilotLogRecord {
            pilot_uuid: pilot_uuid.into(),
            timestamp: timestamp.into(),
            phase: DEFAULT_PHASE.into(),
            severity: Severity::Info,
            message: message.into(),
            source: String::new(),
        }
    }

    /// Checks a submitted JSON object. Fields are visited in a fixed order
    /// so the reported field is deterministic; unknown fields are rejected.
    pub fn from_json(value: &Value) -> Result<Self, FieldError> {
        let obj = value
            .as_object()
            .ok_or_else(|| FieldError::new("$", "record must be a JSON object"))?;
        if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(FieldError::new(unknown.as_str(), "unknown field"));
        }
        let text = |name: &str, required: bool| -> Result<Option<String>, FieldError> {
            match obj.get(name) {
                None | Some(Value::Null) if required => Err(FieldError::new(name, "missing")),
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(_) => Err(FieldError::new(name, "must be a string")),
            }
        };
        let pilot_uuid = text("pilot_uuid", true)?.unwrap_or_default();
        if !is_valid_pilot_uuid(&pilot_uuid) {
            return Err(FieldError::new("pilot_uuid", "not a hyphenated UUID"));
        }
        let timestamp = text("timestamp", true)?.unwrap_or_default();
        if !is_valid_timestamp(&timestamp) {
            return Err(FieldError::new("timestamp", "not an RFC 3339 UTC timestamp"));
        }
        let message = text("message", true)?.unwrap_or_default();
        let phase = match text("phase", false)? {
            Some(p) if p.is_empty() => return Err(FieldError::new("phase", "must not be empty")),
            Some(p) => p,
            None => DEFAULT_PHASE.into(),
        };
        let severity = match text("severity", false)? {
            Some(s) => s
                .parse()
                .map_err(|()| FieldError::new("severity", "must be one of DEBUG, INFO, WARNING, ERROR"))?,
            None => Severity::Info,
        };
        let source = text("source", false)?.unwrap_or_default();
        Ok(PilotLogRecord {
            pilot_uuid,
            timestamp,
            phase,
            severity,
            message,
            source,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("pilot_uuid".into(), Value::String(self.pilot_uuid.clone()));
        obj.insert("timestamp".into(), Value::String(self.timestamp.clone()));
        obj.insert("phase".into(), Value::String(self.phase.clone()));
        obj.insert("severity".into(), Value::String(self.severity.as_str().into()));
        obj.insert("message".into(), Value::String(self.message.clone()));
        obj.insert("source".into(), Value::String(self.source.clone()));
        Value::Object(obj)
    }

    /// The record as forwarded to the queue, with ingestion metadata.
    pub fn stamped(&self, received_at_ms: u64, principal: &str) -> Value {
        let mut value = self.to_json();
        let obj = value.as_object_mut().expect("object");
        obj.insert("received_at_ms".into(), Value::from(received_at_ms));
        obj.insert("principal".into(), Value::String(principal.into()));
        value
    }
}

/// Splits a raw pilot output line. `install|ERROR|cvmfs mount failed` gives
/// phase `install`, severity `ERROR`; lines without a well-formed prefix
/// become the message as-is with default phase and severity.
pub fn parse_line(line: &str) -> (String, Severity, String) {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut parts = line.splitn(3, '|');
    if let (Some(phase), Some(sev), Some(msg)) = (parts.next(), parts.next(), parts.next()) {
        let phase_ok = !phase.is_empty()
            && phase
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if let (true, Ok(severity)) = (phase_ok, sev.parse::<Severity>()) {
            return (phase.to_string(), severity, msg.to_string());
        }
    }
    (DEFAULT_PHASE.to_string(), Severity::Info, line.to_string())
}

pub fn utc_now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    const UUID: &str = "0f8fad5b-d9cb-469f-a165-70867728950e";

    #[test]
    fn prefix_grammar() {
        assert_eq!(
            parse_line("install|ERROR|cvmfs mount failed"),
            ("install".into(), Severity::Error, "cvmfs mount failed".into())
        );
        assert_eq!(parse_line("run|INFO|a|b\n"), ("run".into(), Severity::Info, "a|b".into()));
        assert_eq!(parse_line("plain text"), ("unknown".into(), Severity::Info, "plain text".into()));
        assert_eq!(parse_line("x|LOUD|y"), ("unknown".into(), Severity::Info, "x|LOUD|y".into()));
        assert_eq!(parse_line("two words|INFO|y"), ("unknown".into(), Severity::Info, "two words|INFO|y".into()));
        assert_eq!(parse_line(""), ("unknown".into(), Severity::Info, "".into()));
    }

    #[test]
    fn minimal_record_gets_defaults() {
        let r = PilotLogRecord::from_json(&json!({"pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05Z", "message": "hi"})).unwrap();
        assert_eq!(r.severity, Severity::Info);
        assert_eq!(r.phase, "unknown");
        assert_eq!(r.source, "");
        assert_eq!(PilotLogRecord::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn first_offending_field_is_named() {
        let field = |v: Value| PilotLogRecord::from_json(&v).unwrap_err().field;
        assert_eq!(field(json!([])), "$");
        assert_eq!(field(json!({"timestamp": "2024-01-02T03:04:05Z", "message": "m"})), "pilot_uuid");
        assert_eq!(field(json!({"pilot_uuid": "../../etc/passwd", "timestamp": "x", "message": "m"})), "pilot_uuid");
        assert_eq!(field(json!({"pilot_uuid": UUID, "timestamp": "yesterday", "message": "m"})), "timestamp");
        assert_eq!(field(json!({"pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05+02:00", "message": "m"})), "timestamp");
        assert_eq!(field(json!({"pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05Z"})), "message");
        assert_eq!(field(json!({"pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05Z", "message": 3})), "message");
        assert_eq!(
            field(json!({"pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05Z", "message": "m", "severity": "info"})),
            "severity"
        );
        assert_eq!(
            field(json!({"pilot_uuid": UUID, "timestamp": "2024-01-02T03:04:05Z", "message": "m", "principal": "root"})),
            "principal"
        );
    }

    #[test]
    fn uuid_must_be_hyphenated() {
        assert!(is_valid_pilot_uuid(UUID));
        assert!(!is_valid_pilot_uuid("0f8fad5bd9cb469fa16570867728950e"));
        assert!(!is_valid_pilot_uuid(&format!("{{{UUID}}}")));
    }

    proptest! {
        #[test]
        fn prefixed_lines_parse_back(phase in "[a-z][a-z0-9_.-]{0,12}", sev in 0usize..4, msg in "[^\r\n]{0,60}") {
            let sev = Severity::ALL[sev];
            let (p, s, m) = parse_line(&format!("{phase}|{sev}|{msg}"));
            prop_assert_eq!(p, phase);
            prop_assert_eq!(s, sev);
            prop_assert_eq!(m, msg);
        }

        #[test]
        fn unprefixed_lines_are_kept_whole(line in "[^|\r\n]{0,80}") {
            let (p, s, m) = parse_line(&line);
            prop_assert_eq!(p, DEFAULT_PHASE);
            prop_assert_eq!(s, Severity::Info);
            prop_assert_eq!(m, line);
        }
    }
}
