//! Frame layout and streaming decoder.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FDM1"
//!      4     1  message type
//!      5     4  round        (u32, big-endian)
//!      9     4  client id    (u32, big-endian)
//!     13     4  payload len  (u32, big-endian, at most 64 MiB)
//!     17     n  payload
//! ```

use std::io::{ErrorKind, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FDM1";
pub const HEADER_LEN: usize = 17;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    GlobalModel = 2,
    ClientUpdate = 3,
    MaskedShare = 4,
    RoundReport = 5,
    Abort = 6,
    Bye = 7,
}

impl TryFrom<u8> for MessageType {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            1 => Self::Hello,
            2 => Self::GlobalModel,
            3 => Self::ClientUpdate,
            4 => Self::MaskedShare,
            5 => Self::RoundReport,
            6 => Self::Abort,
            7 => Self::Bye,
            other => return Err(FrameError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MessageType,
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, round: u32, client_id: u32, payload: Vec<u8>) -> Self {
        Self { msg_type, round, client_id, payload }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::Oversize(self.payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.client_id.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

struct Header {
    msg_type: MessageType,
    round: u32,
    client_id: u32,
    len: usize,
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn parse_header(b: &[u8]) -> Result<Header, FrameError> {
    let magic = [b[0], b[1], b[2], b[3]];
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let msg_type = MessageType::try_from(b[4])?;
    let len = be_u32(&b[13..17]) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(len));
    }
    Ok(Header {
        msg_type,
        round: be_u32(&b[5..9]),
        client_id: be_u32(&b[9..13]),
        len,
    })
}

/// Incremental decoder for bytes arriving in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet consumed.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `None` if more bytes are needed. After an error
    /// the stream is unusable and the connection should be closed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        let prefix = self.buf.len().min(MAGIC.len());
        if self.buf[..prefix] != MAGIC[..prefix] {
            let mut magic = [0u8; 4];
            magic[..prefix].copy_from_slice(&self.buf[..prefix]);
            return Err(FrameError::BadMagic(magic));
        }
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let header = parse_header(&self.buf[..HEADER_LEN])?;
        if self.buf.len() < HEADER_LEN + header.len {
            return Ok(None);
        }
        let payload = self.buf[HEADER_LEN..HEADER_LEN + header.len].to_vec();
        self.buf.drain(..HEADER_LEN + header.len);
        Ok(Some(Frame {
            msg_type: header.msg_type,
            round: header.round,
            client_id: header.client_id,
            payload,
        }))
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one frame. A clean end of stream before the first byte is
/// [`FrameError::Closed`]; anywhere else it is [`FrameError::Truncated`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header)?;
    let mut payload = vec![0u8; h.len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => FrameError::Truncated,
        _ => FrameError::Io(e),
    })?;
    Ok(Frame {
        msg_type: h.msg_type,
        round: h.round,
        client_id: h.client_id,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Frame {
        Frame::new(MessageType::GlobalModel, 3, 258, vec![9, 8, 7])
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let bytes = sample().encode().unwrap();
        assert_eq!(
            bytes,
            vec![
                b'F', b'D', b'M', b'1', 2, 0, 0, 0, 3, 0, 0, 1, 2, 0, 0, 0, 3, 9, 8, 7
            ]
        );
    }

    #[test]
    fn loopback_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &sample()).unwrap();
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn byte_at_a_time_reassembly() {
        let bytes = sample().encode().unwrap();
        let mut dec = FrameDecoder::new();
        for (i, b) in bytes.iter().enumerate() {
            dec.push(&[*b]);
            let got = dec.next_frame().unwrap();
            assert_eq!(got.is_some(), i + 1 == bytes.len());
        }
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn two_frames_in_one_chunk() {
        let other = Frame::new(MessageType::Bye, 0, 1, vec![]);
        let mut chunk = sample().encode().unwrap();
        chunk.extend(other.encode().unwrap());
        let mut dec = FrameDecoder::new();
        dec.push(&chunk);
        assert_eq!(dec.next_frame().unwrap(), Some(sample()));
        assert_eq!(dec.next_frame().unwrap(), Some(other));
        assert_eq!(dec.next_frame().unwrap(), None);
    }

    #[test]
    fn corrupted_magic_is_rejected_early() {
        let mut dec = FrameDecoder::new();
        dec.push(b"FX");
        assert!(matches!(dec.next_frame(), Err(FrameError::BadMagic(_))));
    }

    #[test]
    fn oversize_and_unknown_type() {
        let mut bytes = sample().encode().unwrap();
        bytes[13..17].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_be_bytes());
        let mut dec = FrameDecoder::new();
        dec.push(&bytes[..HEADER_LEN]);
        assert!(matches!(dec.next_frame(), Err(FrameError::Oversize(_))));

        let mut bytes = sample().encode().unwrap();
        bytes[4] = 0;
        assert!(matches!(read_frame(&mut bytes.as_slice()), Err(FrameError::UnknownType(0))));
    }

    #[test]
    fn truncated_and_closed_streams() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(read_frame(&mut &bytes[..10]), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut &bytes[..18]), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut &[][..]), Err(FrameError::Closed)));
    }
}
