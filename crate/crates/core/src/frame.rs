//! Length-prefixed JSON frames shared by gossip datagrams, inter-node
//! streams, and the local control socket.
//!
//! ```text
//! +----------------------+-------------------------------+
//! | length (4 bytes, BE) | UTF-8 JSON object with "t"    |
//! +----------------------+-------------------------------+
//! ```

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// Largest payload carried inside a message envelope.
pub const MAX_PAYLOAD_LEN: usize = 1 << 20;

/// Largest accepted frame body: a base64-encoded maximal payload plus 4 KiB
/// of header room.
pub const MAX_FRAME_LEN: usize = MAX_PAYLOAD_LEN.div_ceil(3) * 4 + 4096;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    TooLarge(usize),
    #[error("frame body is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("frame body is missing the \"t\" field")]
    MissingType,
    #[error("truncated frame")]
    Truncated,
}

/// Serializes `msg` and prepends the 4-byte big-endian length.
pub fn encode<T: Serialize>(msg: &T) -> Result<Vec<u8>, FrameError> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parses a frame body (without length prefix), requiring a string `"t"` field.
pub fn decode_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, FrameError> {
    let value: serde_json::Value = serde_json::from_slice(body)?;
    if !value.get("t").is_some_and(|t| t.is_string()) {
        return Err(FrameError::MissingType);
    }
    Ok(serde_json::from_value(value)?)
}

/// Decodes exactly one complete frame, as received in a datagram.
pub fn decode_datagram<T: DeserializeOwned>(buf: &[u8]) -> Result<T, FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::Truncated);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    if buf.len() != 4 + len {
        return Err(FrameError::Truncated);
    }
    decode_body(&buf[4..])
}

/// Incremental decoder for stream transports.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete frame body, if one is buffered.
    pub fn next_body(&mut self) -> Result<Option<Vec<u8>>, FrameError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > MAX_FRAME_LEN {
            return Err(FrameError::TooLarge(len));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let body = self.buf[4..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn prefix_is_big_endian_length() {
        let bytes = encode(&json!({"t": "ping"})).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 0, 12]);
        assert_eq!(&bytes[4..], br#"{"t":"ping"}"#);
    }

    #[test]
    fn stream_reassembly() {
        let a = encode(&json!({"t": "a", "n": 1})).unwrap();
        let b = encode(&json!({"t": "b"})).unwrap();
        let all: Vec<u8> = a.iter().chain(b.iter()).copied().collect();
        let mut fb = FrameBuffer::new();
        let mut bodies = Vec::new();
        for chunk in all.chunks(3) {
            fb.extend(chunk);
            while let Some(body) = fb.next_body().unwrap() {
                bodies.push(decode_body::<serde_json::Value>(&body).unwrap());
            }
        }
        assert_eq!(bodies, vec![json!({"t": "a", "n": 1}), json!({"t": "b"})]);
    }

    #[test]
    fn rejects_untyped_and_oversized() {
        let bytes = encode(&json!({"x": 1})).unwrap();
        assert!(matches!(decode_datagram::<serde_json::Value>(&bytes), Err(FrameError::MissingType)));
        let mut fb = FrameBuffer::new();
        fb.extend(&(MAX_FRAME_LEN as u32 + 1).to_be_bytes());
        assert!(matches!(fb.next_body(), Err(FrameError::TooLarge(_))));
        assert!(matches!(decode_datagram::<serde_json::Value>(&[0, 0]), Err(FrameError::Truncated)));
    }
}
