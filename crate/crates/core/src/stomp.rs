//! STOMP 1.2 frame encoder, incremental decoder and heart-beat negotiation.

use std::fmt;

use bytes::{Buf, BufMut, BytesMut};

/// Largest frame (command + headers + body + NUL) the decoder accepts by default.
pub const DEFAULT_MAX_FRAME_SIZE: usize = 1024 * 1024;

pub const CONTENT_LENGTH: &str = "content-length";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Connect,
    Stomp,
    Connected,
    Send,
    Subscribe,
    Unsubscribe,
    Ack,
    Nack,
    Begin,
    Commit,
    Abort,
    Disconnect,
    Message,
    Receipt,
    Error,
    /// A lone end-of-line between frames.
    Heartbeat,
}

impl Command {
    pub const ALL: [Command; 16] = [
        Command::Connect,
        Command::Stomp,
        Command::Connected,
        Command::Send,
        Command::Subscribe,
        Command::Unsubscribe,
        Command::Ack,
        Command::Nack,
        Command::Begin,
        Command::Commit,
        Command::Abort,
        Command::Disconnect,
        Command::Message,
        Command::Receipt,
        Command::Error,
        Command::Heartbeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Connect => "CONNECT",
            Command::Stomp => "STOMP",
            Command::Connected => "CONNECTED",
            Command::Send => "SEND",
            Command::Subscribe => "SUBSCRIBE",
            Command::Unsubscribe => "UNSUBSCRIBE",
            Command::Ack => "ACK",
            Command::Nack => "NACK",
            Command::Begin => "BEGIN",
            Command::Commit => "COMMIT",
            Command::Abort => "ABORT",
            Command::Disconnect => "DISCONNECT",
            Command::Message => "MESSAGE",
            Command::Receipt => "RECEIPT",
            Command::Error => "ERROR",
            Command::Heartbeat => "HEARTBEAT",
        }
    }

    fn from_wire(bytes: &[u8]) -> Option<Command> {
        Command::ALL
            .into_iter()
            .filter(|c| *c != Command::Heartbeat)
            .find(|c| c.as_str().as_bytes() == bytes)
    }

    /// Only SEND, MESSAGE and ERROR may carry a body.
    pub fn allows_body(self) -> bool {
        matches!(self, Command::Send | Command::Message | Command::Error)
    }

    /// CONNECT and CONNECTED headers are written verbatim, without escaping.
    fn escapes_headers(self) -> bool {
        !matches!(self, Command::Connect | Command::Connected)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub command: Command,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(command: Command) -> Self {
        Frame {
            command,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn heartbeat() -> Self {
        Frame::new(Command::Heartbeat)
    }

    pub fn header(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((key.into(), value.into()));
        self
    }

    pub fn body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    /// First occurrence wins when a key is repeated.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn is_heartbeat(&self) -> bool {
        self.command == Command::Heartbeat
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("illegal character in header {0:?}")]
    IllegalHeaderCharacter(String),
    #[error("{0} frames cannot carry a body")]
    BodyNotAllowed(Command),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("tls error: {0}")]
    Tls(String),
}

impl From<std::io::Error> for CodecError {
    fn from(e: std::io::Error) -> Self {
        match e.get_ref().and_then(|inner| inner.downcast_ref::<rustls::Error>()) {
            Some(tls) => CodecError::Tls(tls.to_string()),
            None => CodecError::Io(e.to_string()),
        }
    }
}

fn violation(msg: impl Into<String>) -> CodecError {
    CodecError::ProtocolViolation(msg.into())
}

pub fn escape_header(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ':' => out.push_str("\\c"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_header(s: &str) -> Result<String, CodecError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('c') => out.push(':'),
            Some(other) => return Err(violation(format!("undefined escape sequence \\{other}"))),
            None => return Err(violation("dangling backslash in header")),
        }
    }
    Ok(out)
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, CodecError> {
    let mut buf = BytesMut::new();
    encode_frame_into(frame, &mut buf)?;
    Ok(buf.to_vec())
}

/// Appends the wire form of `frame` to `dst`. Any `content-length` header in
/// the frame is ignored; SEND, MESSAGE and ERROR always get a computed one.
pub fn encode_frame_into(frame: &Frame, dst: &mut BytesMut) -> Result<(), CodecError> {
    if frame.is_heartbeat() {
        dst.put_u8(b'\n');
        return Ok(());
    }
    if !frame.body.is_empty() && !frame.command.allows_body() {
        return Err(CodecError::BodyNotAllowed(frame.command));
    }
    let escape = frame.command.escapes_headers();
    let mut out = BytesMut::with_capacity(64 + frame.body.len());
    out.put_slice(frame.command.as_str().as_bytes());
    out.put_u8(b'\n');
    for (k, v) in frame.headers.iter().filter(|(k, _)| k != CONTENT_LENGTH) {
        if k.contains('\0') || v.contains('\0') {
            return Err(CodecError::IllegalHeaderCharacter(k.clone()));
        }
        if escape {
            out.put_slice(escape_header(k).as_bytes());
            out.put_u8(b':');
            out.put_slice(escape_header(v).as_bytes());
        } else {
            if k.contains([':', '\n', '\r']) || v.contains(['\n', '\r']) {
                return Err(CodecError::IllegalHeaderCharacter(k.clone()));
            }
            out.put_slice(k.as_bytes());
            out.put_u8(b':');
            out.put_slice(v.as_bytes());
        }
        out.put_u8(b'\n');
    }
    if frame.command.allows_body() {
        out.put_slice(format!("{CONTENT_LENGTH}:{}\n", frame.body.len()).as_bytes());
    }
    out.put_u8(b'\n');
    out.put_slice(&frame.body);
    out.put_u8(0);
    dst.unsplit(out);
    Ok(())
}

fn next_line<'a>(buf: &'a [u8], pos: &mut usize, max_frame_size: usize) -> Result<Option<&'a [u8]>, CodecError> {
    match buf[*pos..].iter().position(|b| *b == b'\n') {
        Some(i) => {
            let line = &buf[*pos..*pos + i];
            *pos += i + 1;
            Ok(Some(line.strip_suffix(b"\r").unwrap_or(line)))
        }
        None if buf.len() > max_frame_size => Err(violation("frame exceeds maximum size")),
        None => Ok(None),
    }
}

/// Tries to parse one frame from the front of `buf`.
///
/// Returns `Ok(None)` when more bytes are needed, otherwise the frame and the
/// number of bytes it occupied.
pub fn parse_frame(buf: &[u8], max_frame_size: usize) -> Result<Option<(Frame, usize)>, CodecError> {
    match buf.first() {
        None => return Ok(None),
        Some(b'\n') => return Ok(Some((Frame::heartbeat(), 1))),
        Some(b'\r') => {
            return match buf.get(1) {
                None => Ok(None),
                Some(b'\n') => Ok(Some((Frame::heartbeat(), 2))),
                Some(_) => Err(violation("stray carriage return between frames")),
            }
        }
        Some(_) => {}
    }

    let mut pos = 0;
    let Some(command_line) = next_line(buf, &mut pos, max_frame_size)? else {
        return Ok(None);
    };
    let command = Command::from_wire(command_line).ok_or_else(|| {
        violation(format!(
            "unknown command {:?}",
            String::from_utf8_lossy(command_line)
        ))
    })?;
    let escape = command.escapes_headers();

    let mut headers = Vec::new();
    let mut content_length: Option<usize> = None;
    loop {
        let Some(line) = next_line(buf, &mut pos, max_frame_size)? else {
            return Ok(None);
        };
        if line.is_empty() {
            break;
        }
        let line = std::str::from_utf8(line).map_err(|_| violation("header is not valid UTF-8"))?;
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| violation(format!("header line without colon: {line:?}")))?;
        let (k, v) = if escape {
            (unescape_header(k)?, unescape_header(v)?)
        } else {
            (k.to_string(), v.to_string())
        };
        if k == CONTENT_LENGTH {
            if content_length.is_none() {
                let n = v
                    .parse::<usize>()
                    .map_err(|_| violation(format!("invalid content-length {v:?}")))?;
                if n > max_frame_size {
                    return Err(violation("frame exceeds maximum size"));
                }
                content_length = Some(n);
            }
            continue;
        }
        headers.push((k, v));
    }

    let body_start = pos;
    let body_end = match content_length {
        Some(n) => {
            if buf.len() < body_start + n + 1 {
                if buf.len() > max_frame_size {
                    return Err(violation("frame exceeds maximum size"));
                }
                return Ok(None);
            }
            if buf[body_start + n] != 0 {
                return Err(violation("frame body not terminated by NUL at content-length"));
            }
            body_start + n
        }
        None => match buf[body_start..].iter().position(|b| *b == 0) {
            Some(i) => body_start + i,
            None if buf.len() > max_frame_size => {
                return Err(violation("frame exceeds maximum size"))
            }
            None => return Ok(None),
        },
    };
    let consumed = body_end + 1;
    if consumed > max_frame_size {
        return Err(violation("frame exceeds maximum size"));
    }
    Ok(Some((
        Frame {
            command,
            headers,
            body: buf[body_start..body_end].to_vec(),
        },
        consumed,
    )))
}

/// Decodes every complete frame in `buffer`, returning the unconsumed tail.
pub fn decode_stream(buffer: &[u8]) -> Result<(Vec<Frame>, Vec<u8>), CodecError> {
    let mut frames = Vec::new();
    let mut offset = 0;
    while let Some((frame, used)) = parse_frame(&buffer[offset..], DEFAULT_MAX_FRAME_SIZE)? {
        frames.push(frame);
        offset += used;
    }
    Ok((frames, buffer[offset..].to_vec()))
}

/// Incremental decoder, one per connection. Also usable as a
/// `tokio_util` codec.
#[derive(Debug)]
pub struct StompCodec {
    max_frame_size: usize,
}

impl Default for StompCodec {
    fn default() -> Self {
        StompCodec {
            max_frame_size: DEFAULT_MAX_FRAME_SIZE,
        }
    }
}

impl StompCodec {
    pub fn new(max_frame_size: usize) -> Self {
        StompCodec { max_frame_size }
    }
}

impl tokio_util::codec::Decoder for StompCodec {
    type Item = Frame;
    type Error = CodecError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<Frame>, CodecError> {
        match parse_frame(src, self.max_frame_size)? {
            Some((frame, used)) => {
                src.advance(used);
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }
}

impl tokio_util::codec::Encoder<Frame> for StompCodec {
    type Error = CodecError;

    fn encode(&mut self, frame: Frame, dst: &mut BytesMut) -> Result<(), CodecError> {
        encode_frame_into(&frame, dst)
    }
}

/// Negotiated heart-beat timing from one side's perspective.
///
/// `recv_timeout_ms` is the base interval; a peer is considered dead after
/// twice that long without any traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeartbeatPlan {
    pub send_interval_ms: u64,
    pub recv_timeout_ms: u64,
}

/// `local` is what this side declared in its `heart-beat` header, `remote`
/// what the peer declared. Each pair is (can-send, wants-to-receive).
pub fn negotiate_heartbeat(local: (u64, u64), remote: (u64, u64)) -> HeartbeatPlan {
    let (cx, cy) = local;
    let (sx, sy) = remote;
    HeartbeatPlan {
        send_interval_ms: if cx == 0 || sy == 0 { 0 } else { cx.max(sy) },
        recv_timeout_ms: if sx == 0 || cy == 0 { 0 } else { sx.max(cy) },
    }
}

/// Parses a `heart-beat:x,y` header value.
pub fn parse_heartbeat_header(value: &str) -> Option<(u64, u64)> {
    let (x, y) = value.split_once(',')?;
    Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_send_frame_exactly() {
        let frame = Frame::new(Command::Send)
            .header("destination", "/queue/Q2")
            .header("content-type", "application/json")
            .body(br#"{"a":1}"#.to_vec());
        assert_eq!(
            encode_frame(&frame).unwrap(),
            b"SEND\ndestination:/queue/Q2\ncontent-type:application/json\ncontent-length:7\n\n{\"a\":1}\0"
        );
    }

    #[test]
    fn escapes_header_values() {
        let frame = Frame::new(Command::Send).header("k", "a:b");
        let bytes = encode_frame(&frame).unwrap();
        assert!(bytes.windows(6).any(|w| w == b"k:a\\cb"));
        let all = Frame::new(Command::Message).header("x\\y", "1\n2\r3:4");
        let bytes = encode_frame(&all).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("x\\\\y:1\\n2\\r3\\c4\n"));
        let (frames, rest) = decode_stream(&bytes).unwrap();
        assert!(rest.is_empty());
        assert_eq!(frames, vec![all]);
    }

    #[test]
    fn connect_headers_are_not_escaped() {
        let frame = Frame::new(Command::Connect).header("passcode", "a\\b:c");
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(bytes, b"CONNECT\npasscode:a\\b:c\n\n\0");
        assert_eq!(decode_stream(&bytes).unwrap().0, vec![frame]);
        let bad = Frame::new(Command::Connected).header("k", "a\nb");
        assert!(matches!(encode_frame(&bad), Err(CodecError::IllegalHeaderCharacter(_))));
    }

    #[test]
    fn heartbeat_is_single_newline() {
        assert_eq!(encode_frame(&Frame::heartbeat()).unwrap(), b"\n");
        let (frames, rest) = decode_stream(b"\n\r\n").unwrap();
        assert_eq!(frames, vec![Frame::heartbeat(), Frame::heartbeat()]);
        assert!(rest.is_empty());
    }

    #[test]
    fn rejects_nul_in_header_and_body_on_bodiless_command() {
        let frame = Frame::new(Command::Send).header("k", "a\0b");
        assert!(matches!(encode_frame(&frame), Err(CodecError::IllegalHeaderCharacter(_))));
        let frame = Frame::new(Command::Receipt).body(b"x".to_vec());
        assert_eq!(encode_frame(&frame), Err(CodecError::BodyNotAllowed(Command::Receipt)));
    }

    #[test]
    fn incomplete_input_is_remainder() {
        let bytes = encode_frame(&Frame::new(Command::Send).header("destination", "/queue/Q").body(b"hello".to_vec())).unwrap();
        let (frames, rest) = decode_stream(&bytes[..10]).unwrap();
        assert!(frames.is_empty());
        assert_eq!(rest, &bytes[..10]);
    }

    #[test]
    fn two_frames_back_to_back() {
        let a = Frame::new(Command::Send).header("destination", "/queue/A").body(b"1".to_vec());
        let b = Frame::new(Command::Subscribe).header("id", "0").header("destination", "/topic/B");
        let mut bytes = encode_frame(&a).unwrap();
        bytes.extend(encode_frame(&b).unwrap());
        let (frames, rest) = decode_stream(&bytes).unwrap();
        assert_eq!(frames, vec![a, b]);
        assert!(rest.is_empty());
    }

    #[test]
    fn body_with_nul_uses_content_length() {
        let frame = Frame::new(Command::Message).header("subscription", "1").body(b"a\0b\0".to_vec());
        let bytes = encode_frame(&frame).unwrap();
        let (frames, rest) = decode_stream(&bytes).unwrap();
        assert_eq!(frames, vec![frame.clone()]);
        assert!(rest.is_empty());
        assert_eq!(encode_frame(&frames[0]).unwrap(), bytes);
    }

    #[test]
    fn tolerates_crlf_and_missing_content_length() {
        let (frames, _) = decode_stream(b"MESSAGE\r\nk:v\r\n\r\nbody\0").unwrap();
        assert_eq!(frames, vec![Frame::new(Command::Message).header("k", "v").body(b"body".to_vec())]);
    }

    #[test]
    fn repeated_header_first_wins() {
        let (frames, _) = decode_stream(b"MESSAGE\nfoo:1\nfoo:2\n\n\0").unwrap();
        assert_eq!(frames[0].get("foo"), Some("1"));
        assert_eq!(frames[0].headers.len(), 2);
    }

    #[test]
    fn protocol_violations() {
        for bad in [&b"FOO\n\n\0"[..], b"SEND\nnocolon\n\n\0", b"SEND\nk:\\t\n\n\0", b"SEND\ncontent-length:1\n\nab\0", b"\rX"] {
            assert!(matches!(decode_stream(bad), Err(CodecError::ProtocolViolation(_))), "{bad:?}");
        }
        let big = vec![b'a'; DEFAULT_MAX_FRAME_SIZE + 1];
        let mut frame = b"SEND\n\n".to_vec();
        frame.extend(&big);
        assert!(matches!(decode_stream(&frame), Err(CodecError::ProtocolViolation(_))));
        let declared = format!("SEND\ncontent-length:{}\n\n", DEFAULT_MAX_FRAME_SIZE + 5);
        assert!(matches!(decode_stream(declared.as_bytes()), Err(CodecError::ProtocolViolation(_))));
    }

    #[test]
    fn negotiation_examples() {
        assert_eq!(
            negotiate_heartbeat((5000, 0), (0, 10_000)),
            HeartbeatPlan { send_interval_ms: 10_000, recv_timeout_ms: 0 }
        );
        assert_eq!(negotiate_heartbeat((0, 0), (10_000, 10_000)), HeartbeatPlan::default());
        assert_eq!(
            negotiate_heartbeat((1000, 2000), (3000, 4000)),
            HeartbeatPlan { send_interval_ms: 4000, recv_timeout_ms: 3000 }
        );
        assert_eq!(parse_heartbeat_header("1000, 2000"), Some((1000, 2000)));
        assert_eq!(parse_heartbeat_header("x,1"), None);
    }
}
