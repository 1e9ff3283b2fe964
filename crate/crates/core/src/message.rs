//! JSON message envelope shared by all producers and consumers.
//!
//! The body on the wire is the canonical JSON serialization of the payload
//! (sorted object keys, no insignificant whitespace). Transport metadata
//! travels as protocol headers.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::Value;

pub const HEADER_MESSAGE_ID: &str = "message-id";
pub const HEADER_TIMESTAMP: &str = "timestamp-ms";
pub const HEADER_DESTINATION: &str = "destination";
pub const HEADER_ORIGIN: &str = "origin";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("message body is not valid UTF-8")]
    InvalidUtf8,
    #[error("message body is not valid JSON: {0}")]
    InvalidJson(String),
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        now_ms()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// 128 random bits, lowercase hex.
pub fn fresh_message_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageEnvelope {
    pub payload: Value,
    pub message_id: String,
    pub timestamp_ms: u64,
    pub destination: String,
    pub origin: String,
}

impl MessageEnvelope {
    /// Transport headers in wire order.
    pub fn headers(&self) -> Vec<(String, String)> {
        vec![
            (HEADER_MESSAGE_ID.into(), self.message_id.clone()),
            (HEADER_TIMESTAMP.into(), self.timestamp_ms.to_string()),
            (HEADER_DESTINATION.into(), self.destination.clone()),
            (HEADER_ORIGIN.into(), self.origin.clone()),
        ]
    }
}

pub fn make_envelope(
    payload: Value,
    origin: &str,
    destination: &str,
    clock: &dyn Clock,
) -> MessageEnvelope {
    MessageEnvelope {
        payload,
        message_id: fresh_message_id(),
        timestamp_ms: clock.now_ms(),
        destination: destination.to_string(),
        origin: origin.to_string(),
    }
}

/// Wire representation of an envelope: canonical body plus headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedMessage {
    pub body: Vec<u8>,
    pub headers: Vec<(String, String)>,
}

pub fn encode_message(env: &MessageEnvelope) -> EncodedMessage {
    EncodedMessage {
        body: canonical_json(&env.payload),
        headers: env.headers(),
    }
}

/// Result of [`decode_message`]; the flags record headers that had to be
/// synthesized because the sender did not provide them.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMessage {
    pub envelope: MessageEnvelope,
    pub synthesized_id: bool,
    pub synthesized_timestamp: bool,
}

impl DecodedMessage {
    pub fn is_flagged(&self) -> bool {
        self.synthesized_id || self.synthesized_timestamp
    }
}

/// Inverse of [`encode_message`]. `headers` may contain extra keys; the first
/// occurrence of a repeated key wins.
pub fn decode_message<'a, I>(body: &[u8], headers: I) -> Result<DecodedMessage, MessageError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let text = std::str::from_utf8(body).map_err(|_| MessageError::InvalidUtf8)?;
    let payload: Value =
        serde_json::from_str(text).map_err(|e| MessageError::InvalidJson(e.to_string()))?;

    let mut lookup: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in headers {
        lookup.entry(k).or_insert(v);
    }
    let message_id = lookup
        .get(HEADER_MESSAGE_ID)
        .filter(|id| !id.is_empty())
        .map(|id| id.to_string());
    let timestamp_ms = lookup
        .get(HEADER_TIMESTAMP)
        .and_then(|t| t.parse::<u64>().ok());

    Ok(DecodedMessage {
        synthesized_id: message_id.is_none(),
        synthesized_timestamp: timestamp_ms.is_none(),
        envelope: MessageEnvelope {
            payload,
            message_id: message_id.unwrap_or_else(fresh_message_id),
            timestamp_ms: timestamp_ms.unwrap_or_else(now_ms),
            destination: lookup.get(HEADER_DESTINATION).unwrap_or(&"").to_string(),
            origin: lookup.get(HEADER_ORIGIN).unwrap_or(&"").to_string(),
        },
    })
}

/// Canonical JSON: UTF-8, no whitespace, object keys in lexicographic
/// (byte) order at every depth.
pub fn canonical_json(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                // serializing a str cannot fail
                serde_json::to_writer(&mut *out, k).expect("string serialization");
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(v, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar serialization"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn env(payload: Value) -> MessageEnvelope {
        make_envelope(payload, "test", "/queue/Q", &FixedClock(1_700_000_000_000))
    }

    #[test]
    fn make_envelope_uses_clock_and_fresh_ids() {
        let a = env(json!({"a": 1}));
        assert_eq!(a.timestamp_ms, 1_700_000_000_000);
        assert_eq!(a.message_id.len(), 32);
        assert!(a.message_id.chars().all(|c| c.is_ascii_hexdigit()));
        let b = env(json!([]));
        assert_eq!(b.payload, json!([]));
        assert_ne!(a.message_id, b.message_id);
    }

    #[test]
    fn canonical_body() {
        assert_eq!(encode_message(&env(json!({"b": 2, "a": 1}))).body, br#"{"a":1,"b":2}"#);
        assert_eq!(encode_message(&env(json!("x"))).body, br#""x""#);
        assert_eq!(encode_message(&env(json!({"a": 1}))).body.len(), 7);
        assert_eq!(
            canonical_json(&json!({"z": {"y": [1, {"b": null, "a": true}]}, "a": 1.5})),
            br#"{"a":1.5,"z":{"y":[1,{"a":true,"b":null}]}}"#
        );
    }

    #[test]
    fn decode_full_headers_is_unflagged() {
        let e = env(json!({"a": 1}));
        let enc = encode_message(&e);
        let dec = decode_message(&enc.body, enc.headers.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert!(!dec.is_flagged());
        assert_eq!(dec.envelope, e);
    }

    #[test]
    fn decode_errors_and_fallbacks() {
        assert!(matches!(decode_message(b"{broken", []), Err(MessageError::InvalidJson(_))));
        assert_eq!(decode_message(&[0xff, 0xfe], []), Err(MessageError::InvalidUtf8));
        let dec = decode_message(br#"{"a":1}"#, [("timestamp-ms", "5")]).unwrap();
        assert!(dec.synthesized_id && !dec.synthesized_timestamp);
        assert_eq!(dec.envelope.message_id.len(), 32);
        assert_eq!(dec.envelope.timestamp_ms, 5);
    }

    fn json_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::from),
            any::<i64>().prop_map(Value::from),
            any::<u64>().prop_map(Value::from),
            (-1e12f64..1e12).prop_map(Value::from),
            "\\PC{0,12}".prop_map(Value::from),
        ];
        leaf.prop_recursive(6, 64, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
                proptest::collection::btree_map("\\PC{0,8}", inner, 0..6)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(payload in json_value(), origin in "[a-z0-9/]{0,16}") {
            let e = make_envelope(payload, &origin, "/topic/T", &SystemClock);
            let enc = encode_message(&e);
            let dec = decode_message(&enc.body, enc.headers.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
            prop_assert!(!dec.is_flagged());
            prop_assert_eq!(&dec.envelope, &e);
            let again = encode_message(&dec.envelope);
            prop_assert_eq!(again, enc);
        }
    }
}
