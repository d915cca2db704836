//! Async framing over byte streams (TCP and Unix sockets).

use std::io;

use nefele_core::frame::{self, MAX_FRAME_LEN};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Reads one frame body. `Ok(None)` on clean end of stream.
pub async fn read_body<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes too large")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Ok(Some(body))
}

/// Reads and decodes one frame. Malformed bodies are `InvalidData` errors.
pub async fn read_frame<R: AsyncRead + Unpin, T: DeserializeOwned>(r: &mut R) -> io::Result<Option<T>> {
    match read_body(r).await? {
        None => Ok(None),
        Some(body) => frame::decode_body(&body).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

pub fn encode<T: Serialize>(msg: &T) -> io::Result<Vec<u8>> {
    frame::encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub async fn write_frame<W: AsyncWrite + Unpin, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let bytes = encode(msg)?;
    w.write_all(&bytes).await?;
    w.flush().await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn round_trip_over_duplex() {
        let (mut a, mut b) = tokio::io::duplex(1024);
        write_frame(&mut a, &serde_json::json!({"t": "ok", "n": 1})).await.unwrap();
        drop(a);
        let v: serde_json::Value = read_frame(&mut b).await.unwrap().unwrap();
        assert_eq!(v["n"], 1);
        assert!(read_frame::<_, serde_json::Value>(&mut b).await.unwrap().is_none());
    }

    #[tokio::test]
    async fn oversize_length_rejected() {
        let (mut a, mut b) = tokio::io::duplex(64);
        a.write_all(&(MAX_FRAME_LEN as u32 + 1).to_be_bytes()).await.unwrap();
        let err = read_body(&mut b).await.unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
    }
}
