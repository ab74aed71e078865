//! Blocking push client.

use std::io::BufWriter;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::protocol::{read_frame, write_frame, ErrCode, Frame, FrameError};
use crate::state::StudyReceipt;

#[derive(Debug, Error)]
pub enum PushError {
    #[error("connect failed: {0}")]
    Connect(std::io::Error),
    #[error("push rejected ({code:?}): {message}")]
    Rejected { code: ErrCode, message: String },
    #[error("connection failed: {0}")]
    Frame(#[from] FrameError),
    #[error("unexpected {0:?} reply")]
    UnexpectedReply(crate::protocol::FrameType),
    #[error("bad receipt: {0}")]
    BadReceipt(#[from] serde_json::Error),
}

pub const CLIENT_TIMEOUT: Duration = Duration::from_secs(120);

/// Push one study as a single session: HELLO, one DATA per file, COMMIT.
pub fn push_study(addr: impl ToSocketAddrs, site: &str, user: &str, files: &[Vec<u8>]) -> Result<StudyReceipt, PushError> {
    let mut frames = Vec::with_capacity(files.len() + 2);
    frames.push(Frame::Hello {
        site: site.into(),
        user: user.into(),
    });
    frames.extend(files.iter().map(|f| Frame::Data(f.clone())));
    frames.push(Frame::Commit {
        slice_count: files.len() as u32,
    });
    match exchange(addr, &frames)? {
        Frame::Ack(body) => Ok(serde_json::from_slice(&body)?),
        Frame::Err { code, message } => Err(PushError::Rejected { code, message }),
        other => Err(PushError::UnexpectedReply(other.kind())),
    }
}

/// Send `frames` on a fresh connection and return the server's reply.
/// A write that fails because the server already rejected the session
/// still yields that rejection.
pub fn exchange(addr: impl ToSocketAddrs, frames: &[Frame]) -> Result<Frame, PushError> {
    let stream = TcpStream::connect(addr).map_err(PushError::Connect)?;
    stream.set_read_timeout(Some(CLIENT_TIMEOUT)).map_err(PushError::Connect)?;
    let mut reader = stream.try_clone().map_err(PushError::Connect)?;
    let mut w = BufWriter::new(stream);
    let mut write_err = None;
    for f in frames {
        if let Err(e) = write_frame(&mut w, f) {
            write_err = Some(e);
            break;
        }
    }
    match read_frame(&mut reader) {
        Ok(reply) => Ok(reply),
        Err(e) => Err(write_err.map(FrameError::Io).unwrap_or(e).into()),
    }
}
