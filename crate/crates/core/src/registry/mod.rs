//! Event-sourced registry of cases, partitions, model versions,
//! annotations, inference results and rounds.
//!
//! Every mutation is a serialized transaction: it is validated against the
//! current state, appended to `events.log` (fsynced), then folded into the
//! in-memory state. Readers take a shared lock and always see a state that
//! corresponds to a log prefix. On open the newest usable snapshot is loaded
//! and the remaining events are replayed; a torn final record is truncated.

mod state;
mod store;
mod types;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

pub use state::{Event, EventRecord, RegistryState, RoundRecord};
pub use store::{
    digest_of_ref, read_log, sha256_hex, EVENTS_FILE, MASK_DIR, MODEL_DIR, ROUND_DIR, SNAPSHOT_DIR, VOLUME_DIR,
};
pub use types::{
    Annotation, AnnotationStatus, CaseRecord, CaseStatus, CaseSummary, ErrorClass, Label, Lineage, ModelKind,
    ModelVersion, Partition, PartitionRole, WorklistFilter,
};

use crate::dicom::VolumeImage;
use crate::grid::{GridError, Mask, ProbMap, RawData, RawFile};
use crate::inference::{InferenceConfig, InferenceOutput, InferenceResult, PipelineOutput};
use crate::metrics::{Calibration, EvaluationReport};
use crate::model::ModelArtifact;
use crate::refinement::RoundOutcome;
use store::LogWriter;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown case {0}")]
    UnknownCase(u64),
    #[error("unknown partition {0:?}")]
    UnknownPartition(String),
    #[error("unknown model version {0}")]
    UnknownVersion(u64),
    #[error("unknown result {0}")]
    UnknownResult(u64),
    #[error("unknown round {0}")]
    UnknownRound(u64),
    #[error("partition {0:?} already exists")]
    DuplicatePartition(String),
    #[error("partition {0:?} is frozen")]
    FrozenPartition(String),
    #[error("case {case_id}: {reason}")]
    OverlapViolation { case_id: u64, reason: String },
    #[error("case {case_id} already labeled {current}")]
    LabelAlreadySet { case_id: u64, current: Label },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("case {0} already has a ground-truth mask")]
    GroundTruthAlreadySet(u64),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("model version {0} has no hold-out metrics")]
    NoHoldoutMetrics(u64),
    #[error("model version {0} already has hold-out metrics")]
    MetricsAlreadyAttached(u64),
    #[error("partition {0:?} is not a hold-out test partition")]
    NotHoldout(String),
    #[error("hold-out cases in training lineage: {0:?}")]
    Leakage(Vec<u64>),
    #[error("boundary_inaccuracy annotations need a corrected mask")]
    MissingCorrectedMask,
    #[error("case {case_id} has a newer annotation ({latest:?})")]
    AnnotationConflict { case_id: u64, latest: Option<u64> },
    #[error("bad worklist filter: {0}")]
    BadFilter(String),
    #[error("blob {blob} fails integrity check (expected {expected}, found {actual})")]
    IntegrityFailure { blob: String, expected: String, actual: String },
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct RegistryOptions {
    /// Write a snapshot after this many events (0 disables).
    pub snapshot_every: u64,
    pub keep_snapshots: usize,
}

impl Default for RegistryOptions {
    fn default() -> Self {
        Self {
            snapshot_every: 256,
            keep_snapshots: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegisterOutcome {
    Created,
    /// Same study uid with a different volume; slices replaced.
    Replaced,
    /// Byte-identical volume; nothing written.
    Unchanged,
}

pub struct NewCase<'a> {
    pub study_uid: &'a str,
    pub site_tag: &'a str,
    pub pushed_by: &'a str,
    pub volume: &'a VolumeImage,
    pub label: Label,
    pub gt_mask: Option<&'a Mask>,
}

pub struct NewAnnotation {
    pub case_id: u64,
    pub result_id: Option<u64>,
    pub error_class: ErrorClass,
    pub corrected_mask: Option<Mask>,
    pub author: String,
    pub note: Option<String>,
    /// Optimistic concurrency: the latest annotation id the author saw for
    /// this case, 0 for none. `None` skips the check.
    pub if_latest: Option<u64>,
}

struct Writer {
    log: LogWriter,
    since_snapshot: u64,
}

pub struct Registry {
    root: PathBuf,
    options: RegistryOptions,
    state: RwLock<RegistryState>,
    writer: Mutex<Writer>,
    round_lock: Mutex<()>,
}

fn shape_error(expected: impl ToString, actual: impl ToString) -> RegistryError {
    RegistryError::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// Multi-membership is only allowed through the shared negative set, and
/// training data never shares a case with a test partition.
fn check_roles(case_id: u64, roles: &[PartitionRole]) -> Result<(), RegistryError> {
    let train = roles.contains(&PartitionRole::Train);
    if train && roles.iter().any(|r| r.is_test()) {
        return Err(RegistryError::OverlapViolation {
            case_id,
            reason: "training and test partitions must be disjoint".into(),
        });
    }
    if roles.len() > 1 && !roles.contains(&PartitionRole::NegativeTest) {
        return Err(RegistryError::OverlapViolation {
            case_id,
            reason: "a case may be in several partitions only through a negative_test partition".into(),
        });
    }
    Ok(())
}

impl Registry {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RegistryError> {
        Self::open_with(root, RegistryOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: RegistryOptions) -> Result<Self, RegistryError> {
        let root = root.as_ref().to_path_buf();
        store::ensure_layout(&root)?;
        let log_path = root.join(EVENTS_FILE);
        let contents = read_log(&log_path)?;
        if contents.torn_tail {
            tracing::warn!("truncating torn tail of {}", log_path.display());
            store::truncate_log(&log_path, contents.valid_len)?;
        }
        let last = contents.records.last().map_or(0, |r| r.seq);
        let mut state = store::latest_snapshot(&root, last)?.unwrap_or_default();
        let mut replayed = 0;
        let base = state.seq;
        for r in contents.records.iter().filter(|r| r.seq > base) {
            state.apply(r);
            replayed += 1;
        }
        Ok(Self {
            writer: Mutex::new(Writer {
                log: LogWriter::open(&root)?,
                since_snapshot: replayed,
            }),
            root,
            options,
            state: RwLock::new(state),
            round_lock: Mutex::new(()),
        })
    }

    /// Fold the event log from scratch, ignoring snapshots.
    pub fn replay(root: impl AsRef<Path>) -> Result<RegistryState, RegistryError> {
        let contents = read_log(&root.as_ref().join(EVENTS_FILE))?;
        let mut state = RegistryState::default();
        for r in &contents.records {
            state.apply(r);
        }
        Ok(state)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn round_dir(&self, round_id: u64) -> PathBuf {
        self.root.join(ROUND_DIR).join(round_id.to_string())
    }

    pub fn state(&self) -> RegistryState {
        self.state.read().clone()
    }

    pub fn read<R>(&self, f: impl FnOnce(&RegistryState) -> R) -> R {
        f(&self.state.read())
    }

    pub fn seq(&self) -> u64 {
        self.state.read().seq
    }

    pub fn snapshot(&self) -> Result<(), RegistryError> {
        let mut w = self.writer.lock();
        store::write_snapshot(&self.root, &self.state.read(), self.options.keep_snapshots)?;
        w.since_snapshot = 0;
        Ok(())
    }

    fn commit<T>(
        &self,
        f: impl FnOnce(&RegistryState, DateTime<Utc>) -> Result<(Vec<Event>, T), RegistryError>,
    ) -> Result<T, RegistryError> {
        let mut w = self.writer.lock();
        let now = Utc::now();
        let (events, out) = f(&self.state.read(), now)?;
        if events.is_empty() {
            return Ok(out);
        }
        let seq0 = self.state.read().seq;
        let records: Vec<EventRecord> = events
            .into_iter()
            .enumerate()
            .map(|(i, event)| EventRecord {
                seq: seq0 + 1 + i as u64,
                at: now,
                event,
            })
            .collect();
        w.log.append(&records)?;
        let mut state = self.state.write();
        for r in &records {
            state.apply(r);
        }
        w.since_snapshot += records.len() as u64;
        if self.options.snapshot_every > 0 && w.since_snapshot >= self.options.snapshot_every {
            store::write_snapshot(&self.root, &state, self.options.keep_snapshots)?;
            w.since_snapshot = 0;
        }
        Ok(out)
    }

    // ----- blobs -----

    fn put_mask(&self, mask: &Mask, spacing: crate::grid::Spacing) -> Result<String, RegistryError> {
        let bytes = RawFile::from_mask(mask, spacing).to_bytes()?;
        Ok(store::put_blob(&self.root, MASK_DIR, "raw", &bytes)?.0)
    }

    pub fn load_mask(&self, rel: &str) -> Result<Mask, RegistryError> {
        let bytes = store::get_blob(&self.root, rel, digest_of_ref(rel))?;
        Ok(RawFile::from_bytes(&bytes)?.into_mask()?)
    }

    pub fn load_prob_map(&self, rel: &str) -> Result<ProbMap, RegistryError> {
        let bytes = store::get_blob(&self.root, rel, digest_of_ref(rel))?;
        Ok(RawFile::from_bytes(&bytes)?.into_prob_map()?)
    }

    pub fn load_volume(&self, case: &CaseRecord) -> Result<VolumeImage, RegistryError> {
        let bytes = store::get_blob(&self.root, &case.volume_ref, &case.volume_digest)?;
        let raw = RawFile::from_bytes(&bytes)?;
        Ok(VolumeImage {
            study_uid: case.study_uid.clone(),
            series_uid: case.series_uid.clone(),
            spacing: raw.spacing,
            origin: case.origin,
            voxels: raw.into_prob_map()?,
        })
    }

    pub fn ground_truth(&self, case: &CaseRecord) -> Result<Option<Mask>, RegistryError> {
        case.gt_mask_ref.as_deref().map(|r| self.load_mask(r)).transpose()
    }

    // ----- cases -----

    pub fn case(&self, case_id: u64) -> Option<CaseRecord> {
        self.state.read().cases.get(&case_id).cloned()
    }

    pub fn case_by_study(&self, study_uid: &str) -> Option<CaseRecord> {
        let s = self.state.read();
        s.studies.get(study_uid).and_then(|id| s.cases.get(id)).cloned()
    }

    pub fn cases(&self) -> Vec<CaseRecord> {
        self.state.read().cases.values().cloned().collect()
    }

    /// Register a study or replace its volume. Re-registering a study uid
    /// keeps its case id; a byte-identical volume writes nothing.
    pub fn register_case(&self, new: NewCase<'_>) -> Result<(CaseRecord, RegisterOutcome), RegistryError> {
        let shape = new.volume.shape();
        if let Some(m) = new.gt_mask {
            if m.shape() != shape {
                return Err(shape_error(shape, m.shape()));
            }
        }
        let raw = RawFile {
            shape,
            spacing: new.volume.spacing,
            data: RawData::F64(new.volume.voxels.as_slice().to_vec()),
        };
        let (volume_ref, digest) = store::put_blob(&self.root, VOLUME_DIR, "raw", &raw.to_bytes()?)?;
        let mask_ref = new.gt_mask.map(|m| self.put_mask(m, new.volume.spacing)).transpose()?;

        let (id, outcome) = self.commit(|s, now| {
            let Some(&case_id) = s.studies.get(new.study_uid) else {
                let case_id = s.next_case_id();
                let case = CaseRecord {
                    case_id,
                    study_uid: new.study_uid.to_string(),
                    series_uid: new.volume.series_uid.clone(),
                    volume_ref: volume_ref.clone(),
                    volume_digest: digest.clone(),
                    shape,
                    spacing: new.volume.spacing,
                    origin: new.volume.origin,
                    site_tag: new.site_tag.to_string(),
                    pushed_by: new.pushed_by.to_string(),
                    label: new.label,
                    gt_mask_ref: mask_ref.clone(),
                    partitions: BTreeSet::new(),
                    created_at: now,
                    updated_at: now,
                };
                return Ok((vec![Event::CaseRegistered { case }], (case_id, RegisterOutcome::Created)));
            };
            let existing = &s.cases[&case_id];
            let mut events = Vec::new();
            let mut outcome = RegisterOutcome::Unchanged;
            if existing.volume_digest != digest {
                outcome = RegisterOutcome::Replaced;
                events.push(Event::CaseVolumeReplaced {
                    case_id,
                    series_uid: new.volume.series_uid.clone(),
                    volume_ref: volume_ref.clone(),
                    volume_digest: digest.clone(),
                    shape,
                    spacing: new.volume.spacing,
                    origin: new.volume.origin,
                    site_tag: new.site_tag.to_string(),
                    pushed_by: new.pushed_by.to_string(),
                });
            }
            match (existing.label, new.label) {
                (_, Label::Unknown) => {}
                (Label::Unknown, l) => events.push(Event::LabelSet { case_id, label: l }),
                (a, b) if a == b => {}
                (current, _) => return Err(RegistryError::LabelAlreadySet { case_id, current }),
            }
            if let Some(m) = &mask_ref {
                match &existing.gt_mask_ref {
                    None => events.push(Event::GroundTruthMaskSet {
                        case_id,
                        mask_ref: m.clone(),
                    }),
                    Some(old) if old == m => {}
                    Some(_) => return Err(RegistryError::GroundTruthAlreadySet(case_id)),
                }
            }
            Ok((events, (case_id, outcome)))
        })?;
        Ok((self.case(id).expect("case just committed"), outcome))
    }

    /// Labels are write-once: unknown may become positive or negative, once.
    pub fn set_label(&self, case_id: u64, label: Label) -> Result<CaseRecord, RegistryError> {
        if label == Label::Unknown {
            return Err(RegistryError::InvalidLabel("cannot set a label back to unknown".into()));
        }
        self.commit(|s, _| {
            let c = s.cases.get(&case_id).ok_or(RegistryError::UnknownCase(case_id))?;
            match c.label {
                Label::Unknown => Ok((vec![Event::LabelSet { case_id, label }], ())),
                current if current == label => Ok((vec![], ())),
                current => Err(RegistryError::LabelAlreadySet { case_id, current }),
            }
        })?;
        Ok(self.case(case_id).expect("existing case"))
    }

    pub fn set_ground_truth_mask(&self, case_id: u64, mask: &Mask) -> Result<CaseRecord, RegistryError> {
        let case = self.case(case_id).ok_or(RegistryError::UnknownCase(case_id))?;
        if mask.shape() != case.shape {
            return Err(shape_error(case.shape, mask.shape()));
        }
        let mask_ref = self.put_mask(mask, case.spacing)?;
        self.commit(|s, _| {
            let c = s.cases.get(&case_id).ok_or(RegistryError::UnknownCase(case_id))?;
            match &c.gt_mask_ref {
                None => Ok((vec![Event::GroundTruthMaskSet { case_id, mask_ref }], ())),
                Some(old) if *old == mask_ref => Ok((vec![], ())),
                Some(_) => Err(RegistryError::GroundTruthAlreadySet(case_id)),
            }
        })?;
        Ok(self.case(case_id).expect("existing case"))
    }

    // ----- partitions -----

    pub fn partition(&self, name: &str) -> Option<Partition> {
        self.state.read().partitions.get(name).cloned()
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.state.read().partitions.values().cloned().collect()
    }

    fn roles_of(s: &RegistryState, case_id: u64) -> Vec<PartitionRole> {
        s.cases
            .get(&case_id)
            .map(|c| c.partitions.iter().filter_map(|p| s.partitions.get(p)).map(|p| p.role).collect())
            .unwrap_or_default()
    }

    /// Hold-out partitions are always frozen.
    pub fn create_partition(
        &self,
        name: &str,
        role: PartitionRole,
        case_ids: &[u64],
        frozen: bool,
    ) -> Result<Partition, RegistryError> {
        if name.is_empty() {
            return Err(RegistryError::UnknownPartition(String::new()));
        }
        self.commit(|s, now| {
            if s.partitions.contains_key(name) {
                return Err(RegistryError::DuplicatePartition(name.to_string()));
            }
            for &id in case_ids {
                if !s.cases.contains_key(&id) {
                    return Err(RegistryError::UnknownCase(id));
                }
                let mut roles = Self::roles_of(s, id);
                roles.push(role);
                check_roles(id, &roles)?;
            }
            let partition = Partition {
                name: name.to_string(),
                role,
                members: case_ids.iter().copied().collect(),
                frozen: frozen || role == PartitionRole::HoldoutTest,
                created_at: now,
            };
            Ok((vec![Event::PartitionCreated { partition }], ()))
        })?;
        Ok(self.partition(name).expect("partition just committed"))
    }

    pub fn add_to_partition(&self, name: &str, case_ids: &[u64]) -> Result<Partition, RegistryError> {
        self.commit(|s, _| {
            let p = s.partitions.get(name).ok_or_else(|| RegistryError::UnknownPartition(name.to_string()))?;
            if p.frozen {
                return Err(RegistryError::FrozenPartition(name.to_string()));
            }
            let mut fresh = Vec::new();
            for &id in case_ids {
                if !s.cases.contains_key(&id) {
                    return Err(RegistryError::UnknownCase(id));
                }
                if p.members.contains(&id) || fresh.contains(&id) {
                    continue;
                }
                let mut roles = Self::roles_of(s, id);
                roles.push(p.role);
                check_roles(id, &roles)?;
                fresh.push(id);
            }
            if fresh.is_empty() {
                return Ok((vec![], ()));
            }
            Ok((
                vec![Event::PartitionMembersAdded {
                    name: name.to_string(),
                    case_ids: fresh,
                }],
                (),
            ))
        })?;
        Ok(self.partition(name).expect("existing partition"))
    }

    /// Members of every hold-out partition.
    pub fn holdout_members(&self) -> BTreeSet<u64> {
        let s = self.state.read();
        s.partitions
            .values()
            .filter(|p| p.role == PartitionRole::HoldoutTest)
            .flat_map(|p| p.members.iter().copied())
            .collect()
    }

    // ----- models -----

    pub fn model(&self, version_id: u64) -> Option<ModelVersion> {
        self.state.read().models.get(&version_id).cloned()
    }

    pub fn models(&self) -> Vec<ModelVersion> {
        self.state.read().models.values().cloned().collect()
    }

    pub fn deployed_model(&self) -> Option<ModelVersion> {
        let s = self.state.read();
        s.deployed.and_then(|id| s.models.get(&id)).cloned()
    }

    /// Register an immutable model version. The lineage may not touch any
    /// hold-out case.
    pub fn register_model(
        &self,
        name: &str,
        artifact: &ModelArtifact,
        inference: InferenceConfig,
        calibration: Option<Calibration>,
        lineage: Lineage,
    ) -> Result<ModelVersion, RegistryError> {
        let kind = match artifact {
            ModelArtifact::ReferenceClassifier { .. } => ModelKind::ReferenceClassifier,
            ModelArtifact::ExternalRunner { .. } => ModelKind::ExternalRunner,
        };
        let bytes = serde_json::to_vec_pretty(artifact)?;
        let (artifact_ref, artifact_sha256) = store::put_blob(&self.root, MODEL_DIR, "json", &bytes)?;
        let id = self.commit(|s, now| {
            let mut leaked: BTreeSet<u64> = BTreeSet::new();
            for name in &lineage.partitions {
                let p = s.partitions.get(name).ok_or_else(|| RegistryError::UnknownPartition(name.clone()))?;
                if p.role == PartitionRole::HoldoutTest {
                    leaked.extend(p.members.iter().copied());
                }
            }
            for id in &lineage.case_ids {
                let in_holdout = s
                    .cases
                    .get(id)
                    .ok_or(RegistryError::UnknownCase(*id))?
                    .partitions
                    .iter()
                    .any(|p| s.partitions.get(p).is_some_and(|p| p.role == PartitionRole::HoldoutTest));
                if in_holdout {
                    leaked.insert(*id);
                }
            }
            if !leaked.is_empty() {
                return Err(RegistryError::Leakage(leaked.into_iter().collect()));
            }
            for a in &lineage.annotation_ids {
                if !s.annotations.contains_key(a) {
                    return Err(RegistryError::InvalidLabel(format!("unknown annotation {a} in lineage")));
                }
            }
            let version_id = s.next_version_id();
            let model = ModelVersion {
                version_id,
                name: name.to_string(),
                kind,
                artifact_ref: artifact_ref.clone(),
                artifact_sha256: artifact_sha256.clone(),
                inference: inference.clone(),
                calibration: calibration.clone(),
                lineage: lineage.clone(),
                holdout_metrics: None,
                deployed: false,
                created_at: now,
            };
            Ok((vec![Event::ModelRegistered { model }], version_id))
        })?;
        Ok(self.model(id).expect("model just committed"))
    }

    /// Load a version's artifact, verifying it against the registered digest.
    pub fn load_artifact(&self, version_id: u64) -> Result<ModelArtifact, RegistryError> {
        let m = self.model(version_id).ok_or(RegistryError::UnknownVersion(version_id))?;
        let bytes = store::get_blob(&self.root, &m.artifact_ref, &m.artifact_sha256)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn attach_holdout_metrics(&self, version_id: u64, report: EvaluationReport) -> Result<ModelVersion, RegistryError> {
        self.commit(|s, _| {
            let m = s.models.get(&version_id).ok_or(RegistryError::UnknownVersion(version_id))?;
            if m.holdout_metrics.is_some() {
                return Err(RegistryError::MetricsAlreadyAttached(version_id));
            }
            match s.partitions.get(&report.partition) {
                Some(p) if p.role == PartitionRole::HoldoutTest => {}
                _ => return Err(RegistryError::NotHoldout(report.partition.clone())),
            }
            Ok((vec![Event::HoldoutMetricsAttached { version_id, report }], ()))
        })?;
        Ok(self.model(version_id).expect("existing model"))
    }

    /// Switch the deployed version in one event.
    pub fn deploy_model(&self, version_id: u64) -> Result<ModelVersion, RegistryError> {
        self.commit(|s, _| {
            let m = s.models.get(&version_id).ok_or(RegistryError::UnknownVersion(version_id))?;
            if m.holdout_metrics.is_none() {
                return Err(RegistryError::NoHoldoutMetrics(version_id));
            }
            if s.deployed == Some(version_id) {
                return Ok((vec![], ()));
            }
            Ok((vec![Event::ModelDeployed { version_id }], ()))
        })?;
        Ok(self.model(version_id).expect("existing model"))
    }

    // ----- annotations -----

    pub fn annotation(&self, id: u64) -> Option<Annotation> {
        self.state.read().annotations.get(&id).cloned()
    }

    pub fn annotations_for(&self, case_id: u64) -> Vec<Annotation> {
        self.state.read().annotations.values().filter(|a| a.case_id == case_id).cloned().collect()
    }

    /// Annotations created at or after `since` (all when `None`), oldest first.
    pub fn annotations_since(&self, since: Option<DateTime<Utc>>) -> Vec<Annotation> {
        self.state
            .read()
            .annotations
            .values()
            .filter(|a| since.is_none_or(|t| a.created_at >= t))
            .cloned()
            .collect()
    }

    pub fn submit_annotation(&self, new: NewAnnotation) -> Result<Annotation, RegistryError> {
        let case = self.case(new.case_id).ok_or(RegistryError::UnknownCase(new.case_id))?;
        if new.error_class == ErrorClass::BoundaryInaccuracy && new.corrected_mask.is_none() {
            return Err(RegistryError::MissingCorrectedMask);
        }
        if let Some(m) = &new.corrected_mask {
            if m.shape() != case.shape {
                return Err(shape_error(case.shape, m.shape()));
            }
        }
        let mask_ref = new.corrected_mask.as_ref().map(|m| self.put_mask(m, case.spacing)).transpose()?;
        let id = self.commit(|s, now| {
            if let Some(r) = new.result_id {
                match s.results.get(&r) {
                    Some(res) if res.case_id == new.case_id => {}
                    _ => return Err(RegistryError::UnknownResult(r)),
                }
            }
            let latest = s.annotations.values().rev().find(|a| a.case_id == new.case_id).map(|a| a.annotation_id);
            if let Some(expected) = new.if_latest {
                if latest.unwrap_or(0) != expected {
                    return Err(RegistryError::AnnotationConflict {
                        case_id: new.case_id,
                        latest,
                    });
                }
            }
            let annotation_id = s.next_annotation_id();
            let annotation = Annotation {
                annotation_id,
                case_id: new.case_id,
                result_id: new.result_id,
                error_class: new.error_class,
                corrected_mask_ref: mask_ref.clone(),
                author: new.author.clone(),
                note: new.note.clone(),
                created_at: now,
            };
            Ok((vec![Event::AnnotationSubmitted { annotation }], annotation_id))
        })?;
        Ok(self.annotation(id).expect("annotation just committed"))
    }

    // ----- results -----

    pub fn result(&self, result_id: u64) -> Option<InferenceResult> {
        self.state.read().results.get(&result_id).cloned()
    }

    pub fn results(&self) -> Vec<InferenceResult> {
        self.state.read().results.values().cloned().collect()
    }

    pub fn latest_result(&self, case_id: u64) -> Option<InferenceResult> {
        self.state.read().results.values().rev().find(|r| r.case_id == case_id).cloned()
    }

    pub fn find_result(&self, case_id: u64, config: &InferenceConfig, volume_digest: &str) -> Option<InferenceResult> {
        self.state
            .read()
            .results
            .values()
            .rev()
            .find(|r| r.case_id == case_id && r.volume_digest == volume_digest && r.config == *config)
            .cloned()
    }

    pub fn load_result_maps(&self, result: &InferenceResult) -> Result<(ProbMap, Mask), RegistryError> {
        Ok((self.load_prob_map(&result.prob_map_ref)?, self.load_mask(&result.mask_ref)?))
    }

    /// Persist a pipeline run. `config.model_ids` must already be resolved.
    pub fn record_result(
        &self,
        case: &CaseRecord,
        volume: &VolumeImage,
        config: InferenceConfig,
        out: PipelineOutput,
    ) -> Result<InferenceOutput, RegistryError> {
        if out.mask.shape() != case.shape || out.prob_map.shape() != case.shape {
            return Err(shape_error(case.shape, out.mask.shape()));
        }
        let prob_bytes = RawFile::from_prob_map(&out.prob_map, volume.spacing).to_bytes()?;
        let (prob_map_ref, _) = store::put_blob(&self.root, MASK_DIR, "raw", &prob_bytes)?;
        let mask_ref = self.put_mask(&out.mask, volume.spacing)?;
        let result = self.commit(|s, now| {
            if !s.cases.contains_key(&case.case_id) {
                return Err(RegistryError::UnknownCase(case.case_id));
            }
            let result = InferenceResult {
                result_id: s.next_result_id(),
                case_id: case.case_id,
                series_uid: volume.series_uid.clone(),
                volume_digest: case.volume_digest.clone(),
                model_versions: config.model_ids.clone(),
                config: config.clone(),
                prob_map_ref: prob_map_ref.clone(),
                mask_ref: mask_ref.clone(),
                lesions: out.lesions.clone(),
                case_score: out.case_score,
                total_volume_ml: out.total_volume_ml,
                wall_time_ms: out.wall_time_ms,
                created_at: now,
            };
            Ok((vec![Event::ResultRecorded { result: result.clone() }], result))
        })?;
        Ok(InferenceOutput {
            result,
            prob_map: out.prob_map,
            mask: out.mask,
        })
    }

    // ----- rounds -----

    /// Held for the duration of a refinement round.
    pub fn lock_rounds(&self) -> parking_lot::MutexGuard<'_, ()> {
        self.round_lock.lock()
    }

    pub fn next_round_id(&self) -> u64 {
        self.state.read().next_round_id()
    }

    pub fn round(&self, round_id: u64) -> Option<RoundRecord> {
        self.state.read().rounds.get(&round_id).cloned()
    }

    pub fn rounds(&self) -> Vec<RoundRecord> {
        self.state.read().rounds.values().cloned().collect()
    }

    pub fn record_round(&self, outcome: RoundOutcome) -> Result<(), RegistryError> {
        self.commit(|_, _| {
            Ok((
                vec![Event::RoundCompleted {
                    outcome: Box::new(outcome),
                }],
                (),
            ))
        })
    }

    pub fn record_round_abort(&self, round_id: u64, reason: &str) -> Result<(), RegistryError> {
        self.commit(|_, _| {
            Ok((
                vec![Event::RoundAborted {
                    round_id,
                    reason: reason.to_string(),
                }],
                (),
            ))
        })
    }

    // ----- worklist -----

    pub fn case_status(&self, case_id: u64) -> (CaseStatus, Option<InferenceResult>, AnnotationStatus) {
        let s = self.state.read();
        let latest = s.results.values().rev().find(|r| r.case_id == case_id).cloned();
        let annotations: Vec<&Annotation> = s.annotations.values().filter(|a| a.case_id == case_id).collect();
        let astatus = if annotations.is_empty() {
            AnnotationStatus::None
        } else {
            AnnotationStatus::Annotated
        };
        let status = match &latest {
            None => CaseStatus::NoResult,
            Some(r) => {
                let reviewed = annotations
                    .iter()
                    .any(|a| a.result_id == Some(r.result_id) || a.created_at >= r.created_at);
                if reviewed {
                    CaseStatus::Reviewed
                } else {
                    CaseStatus::PendingReview
                }
            }
        };
        (status, latest, astatus)
    }

    /// Case summaries, newest first.
    pub fn worklist(&self, filter: &WorklistFilter) -> Result<Vec<CaseSummary>, RegistryError> {
        let cases: Vec<CaseRecord> = {
            let s = self.state.read();
            if let Some(p) = &filter.partition {
                if !s.partitions.contains_key(p) {
                    return Err(RegistryError::BadFilter(format!("unknown partition {p:?}")));
                }
            }
            s.cases
                .values()
                .filter(|c| filter.partition.as_ref().is_none_or(|p| c.partitions.contains(p)))
                .filter(|c| filter.site.as_ref().is_none_or(|t| c.site_tag == *t))
                .cloned()
                .collect()
        };
        let mut out: Vec<CaseSummary> = cases
            .into_iter()
            .map(|c| {
                let (status, latest, annotation_status) = self.case_status(c.case_id);
                CaseSummary {
                    case_id: c.case_id,
                    study_uid: c.study_uid,
                    site_tag: c.site_tag,
                    pushed_by: c.pushed_by,
                    label: c.label,
                    partitions: c.partitions,
                    created_at: c.created_at,
                    status,
                    latest_result_id: latest.as_ref().map(|r| r.result_id),
                    case_score: latest.as_ref().map(|r| r.case_score),
                    predicted_positive: latest.as_ref().map(|r| r.is_positive()),
                    annotation_status,
                }
            })
            .filter(|c| filter.status.is_none_or(|s| c.status == s))
            .collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then(b.case_id.cmp(&a.case_id)));
        if let Some(n) = filter.limit {
            out.truncate(n);
        }
        Ok(out)
    }
}
