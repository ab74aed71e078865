//! Push session state machine: handshake → receiving → committed | aborted.
//! Nothing leaves a session before a successful commit.

use hemoloop_core::dicom::{assemble_volume, parse_slice, SliceImage, VolumeImage};
use serde::{Deserialize, Serialize};

use crate::protocol::{ErrCode, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Handshake,
    Receiving,
    Committed,
    Aborted,
}

/// A session's terminal failure, sent back as an ERR frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub code: ErrCode,
    pub message: String,
}

impl Rejection {
    fn new(code: ErrCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn to_frame(&self) -> Frame {
        Frame::Err {
            code: self.code,
            message: self.message.clone(),
        }
    }
}

/// A committed session's assembled study.
#[derive(Clone, Debug)]
pub struct CommittedStudy {
    pub site: String,
    pub user: String,
    pub slice_count: usize,
    pub volume: VolumeImage,
}

#[derive(Debug)]
pub enum Step {
    Continue,
    Commit(CommittedStudy),
    Reject(Rejection),
}

#[derive(Debug)]
pub struct PushSession {
    pub session_id: u64,
    state: SessionState,
    site: String,
    user: String,
    slices: Vec<SliceImage>,
}

impl PushSession {
    pub fn new(session_id: u64) -> Self {
        Self {
            session_id,
            state: SessionState::Handshake,
            site: String::new(),
            user: String::new(),
            slices: Vec::new(),
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn received_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    fn reject(&mut self, code: ErrCode, message: impl Into<String>) -> Step {
        self.state = SessionState::Aborted;
        self.slices.clear();
        Step::Reject(Rejection::new(code, message))
    }

    pub fn on_frame(&mut self, frame: Frame) -> Step {
        use SessionState::*;
        match (self.state, frame) {
            (Committed | Aborted, _) => Step::Reject(Rejection::new(ErrCode::ProtocolViolation, "session is closed")),
            (_, Frame::Abort) => self.reject(ErrCode::Aborted, "aborted by client"),
            (Handshake, Frame::Hello { site, user }) => {
                if site.trim().is_empty() {
                    return self.reject(ErrCode::ProtocolViolation, "HELLO needs a site tag");
                }
                self.site = site;
                self.user = user;
                self.state = Receiving;
                Step::Continue
            }
            (Receiving, Frame::Data(bytes)) => match parse_slice(&bytes) {
                Ok(s) => {
                    self.slices.push(s);
                    Step::Continue
                }
                Err(e) => {
                    let n = self.slices.len() + 1;
                    self.reject(ErrCode::ParseFailure, format!("slice {n}: {e}"))
                }
            },
            (Receiving, Frame::Commit { slice_count }) => {
                let n = self.slices.len();
                if n == 0 {
                    return self.reject(ErrCode::CountMismatch, "COMMIT with no slices");
                }
                if slice_count as usize != n {
                    return self.reject(
                        ErrCode::CountMismatch,
                        format!("COMMIT announced {slice_count} slices, received {n}"),
                    );
                }
                match assemble_volume(std::mem::take(&mut self.slices)) {
                    Ok(volume) => {
                        self.state = Committed;
                        Step::Commit(CommittedStudy {
                            site: std::mem::take(&mut self.site),
                            user: std::mem::take(&mut self.user),
                            slice_count: n,
                            volume,
                        })
                    }
                    Err(e) => self.reject(ErrCode::AssemblyFailure, e.to_string()),
                }
            }
            (state, f) => {
                let what = format!("{:?} frame in {state:?} state", f.kind());
                self.reject(ErrCode::ProtocolViolation, what)
            }
        }
    }
}
