//! Push listener: one session per TCP connection.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use crate::protocol::{check_len, ErrCode, Frame, FrameError};
use crate::session::{PushSession, Step};
use crate::state::ServiceState;

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

pub async fn serve_push(listener: TcpListener, state: Arc<ServiceState>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let state = state.clone();
                tokio::spawn(async move {
                    if let Err(e) = handle_connection(stream, state).await {
                        tracing::debug!(%peer, "push connection ended: {e}");
                    }
                });
            }
            Err(e) => tracing::warn!("accept failed: {e}"),
        }
    }
}

async fn read_frame(stream: &mut TcpStream) -> Result<Frame, FrameError> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len).await?;
    let len = check_len(u32::from_le_bytes(len))?;
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body).await?;
    Frame::decode(&body)
}

async fn send(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    stream.write_all(&frame.encode()).await?;
    stream.flush().await
}

async fn handle_connection(mut stream: TcpStream, state: Arc<ServiceState>) -> std::io::Result<()> {
    let id = NEXT_SESSION.fetch_add(1, Ordering::Relaxed);
    let mut session = PushSession::new(id);
    loop {
        let frame = match read_frame(&mut stream).await {
            Ok(f) => f,
            // A dropped connection abandons the session without a reply.
            Err(FrameError::Io(e)) => return Err(e),
            Err(e) => {
                let err = Frame::Err {
                    code: ErrCode::ProtocolViolation,
                    message: e.to_string(),
                };
                return send(&mut stream, &err).await;
            }
        };
        match session.on_frame(frame) {
            Step::Continue => {}
            Step::Reject(r) => {
                tracing::info!(session = id, code = ?r.code, "push rejected: {}", r.message);
                return send(&mut stream, &r.to_frame()).await;
            }
            Step::Commit(study) => {
                let st = state.clone();
                let reply = match tokio::task::spawn_blocking(move || st.commit(study)).await {
                    Ok(Ok(receipt)) => {
                        tracing::info!(session = id, case_id = receipt.case_id, "study committed");
                        Frame::Ack(serde_json::to_vec(&receipt).expect("receipt serializes"))
                    }
                    Ok(Err(e)) => Frame::Err {
                        code: ErrCode::StorageFailure,
                        message: e.to_string(),
                    },
                    Err(e) => Frame::Err {
                        code: ErrCode::StorageFailure,
                        message: format!("commit task failed: {e}"),
                    },
                };
                return send(&mut stream, &reply).await;
            }
        }
    }
}
