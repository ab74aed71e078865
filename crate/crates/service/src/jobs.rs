//! Inference job queue and worker pool.
//!
//! Jobs for distinct cases run concurrently; a case with a running job is
//! skipped until that job finishes, so per-case jobs are serialized. Every
//! status change is appended to `jobs.jsonl` when a log path is given.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use hemoloop_core::inference::infer_case;
use hemoloop_core::registry::Registry;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

pub const JOB_LOG_FILE: &str = "jobs.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: u64,
    pub case_id: u64,
    pub status: JobStatus,
    /// Deployed version when the job started.
    pub model_version: Option<u64>,
    pub result_id: Option<u64>,
    pub error: Option<String>,
    pub enqueued_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Default)]
struct State {
    next_id: u64,
    jobs: BTreeMap<u64, JobRecord>,
    queue: VecDeque<u64>,
    busy: BTreeSet<u64>,
    shutdown: bool,
}

struct Inner {
    registry: Arc<Registry>,
    state: Mutex<State>,
    changed: Condvar,
    log: Mutex<Option<File>>,
}

impl Inner {
    fn persist(&self, job: &JobRecord) {
        if let Some(f) = self.log.lock().as_mut() {
            let line = serde_json::to_string(job).expect("job record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!("job log write failed: {e}");
            }
        }
    }

    /// Pop the oldest queued job whose case is idle.
    fn next_job(&self) -> Option<JobRecord> {
        let mut s = self.state.lock();
        loop {
            if s.shutdown {
                return None;
            }
            let pos = s.queue.iter().position(|id| !s.busy.contains(&s.jobs[id].case_id));
            if let Some(pos) = pos {
                let id = s.queue.remove(pos).expect("position is in range");
                let job = s.jobs.get_mut(&id).expect("queued job exists");
                job.status = JobStatus::Running;
                job.started_at = Some(Utc::now());
                job.model_version = self.registry.deployed_model().map(|m| m.version_id);
                let job = job.clone();
                s.busy.insert(job.case_id);
                drop(s);
                self.persist(&job);
                self.changed.notify_all();
                return Some(job);
            }
            self.changed.wait(&mut s);
        }
    }

    fn run(&self, job: JobRecord) {
        let outcome = infer_case(&self.registry, job.case_id, None);
        let mut s = self.state.lock();
        s.busy.remove(&job.case_id);
        let rec = s.jobs.get_mut(&job.job_id).expect("running job exists");
        rec.finished_at = Some(Utc::now());
        match outcome {
            Ok(out) => {
                rec.status = JobStatus::Done;
                rec.result_id = Some(out.result.result_id);
            }
            Err(e) => {
                rec.status = JobStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        let rec = rec.clone();
        drop(s);
        self.persist(&rec);
        self.changed.notify_all();
    }
}

pub struct JobQueue {
    inner: Arc<Inner>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl JobQueue {
    /// Start `workers` threads (at least one). With a `data_dir` the job log
    /// is appended to `data_dir/jobs.jsonl`.
    pub fn start(registry: Arc<Registry>, workers: usize, data_dir: Option<&Path>) -> std::io::Result<Self> {
        let log = match data_dir {
            Some(dir) => Some(OpenOptions::new().create(true).append(true).open(dir.join(JOB_LOG_FILE))?),
            None => None,
        };
        let inner = Arc::new(Inner {
            registry,
            state: Mutex::new(State {
                next_id: 1,
                ..Default::default()
            }),
            changed: Condvar::new(),
            log: Mutex::new(log),
        });
        let handles = (0..workers.max(1))
            .map(|i| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("infer-{i}"))
                    .spawn(move || {
                        while let Some(job) = inner.next_job() {
                            inner.run(job);
                        }
                    })
                    .expect("spawn worker thread")
            })
            .collect();
        Ok(Self {
            inner,
            workers: Mutex::new(handles),
        })
    }

    pub fn enqueue(&self, case_id: u64) -> u64 {
        let mut s = self.inner.state.lock();
        let job_id = s.next_id;
        s.next_id += 1;
        let job = JobRecord {
            job_id,
            case_id,
            status: JobStatus::Queued,
            model_version: None,
            result_id: None,
            error: None,
            enqueued_at: Utc::now(),
            started_at: None,
            finished_at: None,
        };
        s.jobs.insert(job_id, job.clone());
        s.queue.push_back(job_id);
        drop(s);
        self.inner.persist(&job);
        self.inner.changed.notify_all();
        job_id
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.inner.state.lock().jobs.values().cloned().collect()
    }

    pub fn job(&self, job_id: u64) -> Option<JobRecord> {
        self.inner.state.lock().jobs.get(&job_id).cloned()
    }

    /// Status of the newest job for `case_id`.
    pub fn latest_for_case(&self, case_id: u64) -> Option<JobRecord> {
        self.inner.state.lock().jobs.values().rev().find(|j| j.case_id == case_id).cloned()
    }

    /// Block until `job_id` is done or failed.
    pub fn wait_for(&self, job_id: u64, timeout: Duration) -> Option<JobRecord> {
        let deadline = Instant::now() + timeout;
        let mut s = self.inner.state.lock();
        loop {
            let job = s.jobs.get(&job_id)?;
            if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
                return Some(job.clone());
            }
            if self.inner.changed.wait_until(&mut s, deadline).timed_out() {
                return s.jobs.get(&job_id).cloned();
            }
        }
    }

    /// Block until nothing is queued or running.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut s = self.inner.state.lock();
        while !(s.queue.is_empty() && s.busy.is_empty()) {
            if self.inner.changed.wait_until(&mut s, deadline).timed_out() {
                return false;
            }
        }
        true
    }

    /// Stop the workers after their current job. Queued jobs stay queued.
    pub fn shutdown(&self) {
        self.inner.state.lock().shutdown = true;
        self.inner.changed.notify_all();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        self.shutdown();
    }
}
