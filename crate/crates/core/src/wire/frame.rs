//! Length-prefixed framing for the shoveler → collector link.
//!
//! Each frame is a 4-byte big-endian length followed by the payload. The
//! receiver answers every frame with the single byte [`ACK`].

use std::io::{self, Read, Write};

use thiserror::Error;

pub const ACK: u8 = 0x06;
/// Payload lengths must be strictly below this bound.
pub const MAX_FRAME: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame length {0} exceeds limit")]
    TooLarge(usize),
    #[error("connection closed mid-frame")]
    ShortRead,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn encode_frame(payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() >= MAX_FRAME {
        return Err(FrameError::TooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn frame_write<W: Write>(writer: &mut W, payload: &[u8]) -> Result<(), FrameError> {
    writer.write_all(&encode_frame(payload)?)?;
    Ok(())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream at a frame
/// boundary.
pub fn frame_read<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, FrameError> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::ShortRead),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len >= MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::ShortRead,
        _ => FrameError::Io(e),
    })?;
    Ok(Some(payload))
}

/// Decodes the first complete frame in `buf`, returning the payload and the
/// number of bytes consumed, or `None` when more bytes are needed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Vec<u8>, usize)>, FrameError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len >= MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    Ok(Some((buf[4..4 + len].to_vec(), 4 + len)))
}
