//! State shared by the push listener and the HTTP API.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use hemoloop_core::registry::{Label, NewCase, RegisterOutcome, Registry, RegistryError};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::jobs::JobQueue;
use crate::session::CommittedStudy;

pub const RECEIPT_LOG_FILE: &str = "receipts.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushOutcome {
    Created,
    Replaced,
    Unchanged,
}

impl From<RegisterOutcome> for PushOutcome {
    fn from(o: RegisterOutcome) -> Self {
        match o {
            RegisterOutcome::Created => PushOutcome::Created,
            RegisterOutcome::Replaced => PushOutcome::Replaced,
            RegisterOutcome::Unchanged => PushOutcome::Unchanged,
        }
    }
}

/// Acknowledgement of one committed push session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReceipt {
    pub study_uid: String,
    pub case_id: u64,
    pub slice_count: usize,
    pub site_tag: String,
    pub pushed_by: String,
    pub received_at: DateTime<Utc>,
    pub outcome: PushOutcome,
    pub job_id: u64,
}

pub struct ServiceState {
    pub registry: Arc<Registry>,
    pub jobs: JobQueue,
    pub token: Option<String>,
    receipts: Mutex<Vec<StudyReceipt>>,
    receipt_log: Mutex<Option<File>>,
}

impl ServiceState {
    /// With a `data_dir` the receipt and job logs are appended there.
    pub fn new(registry: Arc<Registry>, workers: usize, token: Option<String>, data_dir: Option<&Path>) -> std::io::Result<Self> {
        let receipt_log = match data_dir {
            Some(dir) => Some(OpenOptions::new().create(true).append(true).open(dir.join(RECEIPT_LOG_FILE))?),
            None => None,
        };
        Ok(Self {
            jobs: JobQueue::start(registry.clone(), workers, data_dir)?,
            registry,
            token,
            receipts: Mutex::new(Vec::new()),
            receipt_log: Mutex::new(receipt_log),
        })
    }

    pub fn receipts(&self) -> Vec<StudyReceipt> {
        self.receipts.lock().clone()
    }

    /// Persist a committed study, enqueue its inference job, log the receipt.
    pub fn commit(&self, study: CommittedStudy) -> Result<StudyReceipt, RegistryError> {
        let (case, outcome) = self.registry.register_case(NewCase {
            study_uid: &study.volume.study_uid,
            site_tag: &study.site,
            pushed_by: &study.user,
            volume: &study.volume,
            label: Label::Unknown,
            gt_mask: None,
        })?;
        let job_id = self.jobs.enqueue(case.case_id);
        let receipt = StudyReceipt {
            study_uid: case.study_uid,
            case_id: case.case_id,
            slice_count: study.slice_count,
            site_tag: study.site,
            pushed_by: study.user,
            received_at: Utc::now(),
            outcome: outcome.into(),
            job_id,
        };
        if let Some(f) = self.receipt_log.lock().as_mut() {
            let line = serde_json::to_string(&receipt)?;
            writeln!(f, "{line}")?;
        }
        self.receipts.lock().push(receipt.clone());
        Ok(receipt)
    }
}
