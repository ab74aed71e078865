//! Network front door for a hemoloop registry: the framed push listener,
//! the inference job pool and the HTTP/JSON API.

pub mod api;
pub mod bundle;
pub mod client;
pub mod jobs;
pub mod protocol;
pub mod push;
pub mod server;
pub mod session;
pub mod state;

pub use client::{push_study, PushError};
pub use server::{start, RunningServer, ServerConfig};
pub use state::{PushOutcome, ServiceState, StudyReceipt};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/service.md")]
    pub mod service {}
}
