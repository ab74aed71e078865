//! Push wire format. Every frame is `u32 LE length | u8 type | payload`,
//! where the length counts the type byte and the payload.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Frames larger than this are a protocol violation.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    Data = 2,
    Commit = 3,
    Abort = 4,
    Ack = 5,
    Err = 6,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => FrameType::Hello,
            2 => FrameType::Data,
            3 => FrameType::Commit,
            4 => FrameType::Abort,
            5 => FrameType::Ack,
            6 => FrameType::Err,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Hello { site: String, user: String },
    Data(Vec<u8>),
    Commit { slice_count: u32 },
    Abort,
    Ack(Vec<u8>),
    Err { code: ErrCode, message: String },
}

/// Error codes carried by ERR frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u16)]
pub enum ErrCode {
    ProtocolViolation = 1,
    ParseFailure = 2,
    AssemblyFailure = 3,
    CountMismatch = 4,
    StorageFailure = 5,
    Aborted = 6,
    Unknown = 0xffff,
}

impl ErrCode {
    pub fn from_u16(v: u16) -> Self {
        match v {
            1 => ErrCode::ProtocolViolation,
            2 => ErrCode::ParseFailure,
            3 => ErrCode::AssemblyFailure,
            4 => ErrCode::CountMismatch,
            5 => ErrCode::StorageFailure,
            6 => ErrCode::Aborted,
            _ => ErrCode::Unknown,
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("empty frame")]
    Empty,
    #[error("malformed {0} payload")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    let n = b.len().min(u16::MAX as usize);
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&b[..n]);
}

fn take_str<'a>(buf: &mut &'a [u8], what: &'static str) -> Result<&'a str, FrameError> {
    if buf.len() < 2 {
        return Err(FrameError::Malformed(what));
    }
    let n = u16::from_le_bytes([buf[0], buf[1]]) as usize;
    if buf.len() < 2 + n {
        return Err(FrameError::Malformed(what));
    }
    let s = std::str::from_utf8(&buf[2..2 + n]).map_err(|_| FrameError::Malformed(what))?;
    *buf = &buf[2 + n..];
    Ok(s)
}

impl Frame {
    pub fn kind(&self) -> FrameType {
        match self {
            Frame::Hello { .. } => FrameType::Hello,
            Frame::Data(_) => FrameType::Data,
            Frame::Commit { .. } => FrameType::Commit,
            Frame::Abort => FrameType::Abort,
            Frame::Ack(_) => FrameType::Ack,
            Frame::Err { .. } => FrameType::Err,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Frame::Hello { site, user } => {
                put_str(&mut out, site);
                put_str(&mut out, user);
            }
            Frame::Data(b) | Frame::Ack(b) => out.extend_from_slice(b),
            Frame::Commit { slice_count } => out.extend_from_slice(&slice_count.to_le_bytes()),
            Frame::Abort => {}
            Frame::Err { code, message } => {
                out.extend_from_slice(&(*code as u16).to_le_bytes());
                put_str(&mut out, message);
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(payload.len() + 5);
        out.extend_from_slice(&(payload.len() as u32 + 1).to_le_bytes());
        out.push(self.kind() as u8);
        out.extend_from_slice(&payload);
        out
    }

    /// Decode the type byte plus payload (everything after the length).
    pub fn decode(body: &[u8]) -> Result<Self, FrameError> {
        let (&t, mut p) = body.split_first().ok_or(FrameError::Empty)?;
        let kind = FrameType::from_u8(t).ok_or(FrameError::UnknownType(t))?;
        Ok(match kind {
            FrameType::Hello => {
                let site = take_str(&mut p, "HELLO")?.to_string();
                let user = take_str(&mut p, "HELLO")?.to_string();
                if !p.is_empty() {
                    return Err(FrameError::Malformed("HELLO"));
                }
                Frame::Hello { site, user }
            }
            FrameType::Data => Frame::Data(p.to_vec()),
            FrameType::Commit => {
                let b: [u8; 4] = p.try_into().map_err(|_| FrameError::Malformed("COMMIT"))?;
                Frame::Commit {
                    slice_count: u32::from_le_bytes(b),
                }
            }
            FrameType::Abort => Frame::Abort,
            FrameType::Ack => Frame::Ack(p.to_vec()),
            FrameType::Err => {
                if p.len() < 2 {
                    return Err(FrameError::Malformed("ERR"));
                }
                let code = ErrCode::from_u16(u16::from_le_bytes([p[0], p[1]]));
                let mut rest = &p[2..];
                let message = take_str(&mut rest, "ERR")?.to_string();
                Frame::Err { code, message }
            }
        })
    }
}

/// Validate a length prefix.
pub fn check_len(len: u32) -> Result<usize, FrameError> {
    let len = len as usize;
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    Ok(len)
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, FrameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = check_len(u32::from_le_bytes(len))?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Frame::decode(&body)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}
