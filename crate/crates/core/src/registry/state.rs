//! Registry events and the state they fold into.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::types::{Annotation, CaseRecord, Label, ModelVersion, Partition};
use crate::grid::{Shape, Spacing};
use crate::inference::InferenceResult;
use crate::metrics::EvaluationReport;
use crate::refinement::RoundOutcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    CaseRegistered {
        case: CaseRecord,
    },
    CaseVolumeReplaced {
        case_id: u64,
        series_uid: String,
        volume_ref: String,
        volume_digest: String,
        shape: Shape,
        spacing: Spacing,
        origin: [f64; 3],
        site_tag: String,
        pushed_by: String,
    },
    LabelSet {
        case_id: u64,
        label: Label,
    },
    GroundTruthMaskSet {
        case_id: u64,
        mask_ref: String,
    },
    PartitionCreated {
        partition: Partition,
    },
    PartitionMembersAdded {
        name: String,
        case_ids: Vec<u64>,
    },
    ModelRegistered {
        model: ModelVersion,
    },
    HoldoutMetricsAttached {
        version_id: u64,
        report: EvaluationReport,
    },
    ModelDeployed {
        version_id: u64,
    },
    AnnotationSubmitted {
        annotation: Annotation,
    },
    ResultRecorded {
        result: InferenceResult,
    },
    RoundCompleted {
        outcome: Box<RoundOutcome>,
    },
    RoundAborted {
        round_id: u64,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RoundRecord {
    Completed { outcome: Box<RoundOutcome> },
    Aborted { round_id: u64, reason: String, at: DateTime<Utc> },
}

/// Everything the registry knows, as a pure fold over the event log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryState {
    pub seq: u64,
    pub cases: BTreeMap<u64, CaseRecord>,
    pub studies: BTreeMap<String, u64>,
    pub partitions: BTreeMap<String, Partition>,
    pub models: BTreeMap<u64, ModelVersion>,
    pub deployed: Option<u64>,
    pub annotations: BTreeMap<u64, Annotation>,
    pub results: BTreeMap<u64, InferenceResult>,
    pub rounds: BTreeMap<u64, RoundRecord>,
}

fn next_key<V>(map: &BTreeMap<u64, V>) -> u64 {
    map.keys().next_back().map_or(1, |k| k + 1)
}

impl RegistryState {
    pub fn next_case_id(&self) -> u64 {
        next_key(&self.cases)
    }

    pub fn next_version_id(&self) -> u64 {
        next_key(&self.models)
    }

    pub fn next_annotation_id(&self) -> u64 {
        next_key(&self.annotations)
    }

    pub fn next_result_id(&self) -> u64 {
        next_key(&self.results)
    }

    pub fn next_round_id(&self) -> u64 {
        next_key(&self.rounds)
    }

    /// Apply one already-validated event.
    pub fn apply(&mut self, record: &EventRecord) {
        self.seq = record.seq;
        let at = record.at;
        match &record.event {
            Event::CaseRegistered { case } => {
                self.studies.insert(case.study_uid.clone(), case.case_id);
                self.cases.insert(case.case_id, case.clone());
            }
            Event::CaseVolumeReplaced {
                case_id,
                series_uid,
                volume_ref,
                volume_digest,
                shape,
                spacing,
                origin,
                site_tag,
                pushed_by,
            } => {
                if let Some(c) = self.cases.get_mut(case_id) {
                    c.series_uid = series_uid.clone();
                    c.volume_ref = volume_ref.clone();
                    c.volume_digest = volume_digest.clone();
                    c.shape = *shape;
                    c.spacing = *spacing;
                    c.origin = *origin;
                    c.site_tag = site_tag.clone();
                    c.pushed_by = pushed_by.clone();
                    c.updated_at = at;
                }
            }
            Event::LabelSet { case_id, label } => {
                if let Some(c) = self.cases.get_mut(case_id) {
                    c.label = *label;
                    c.updated_at = at;
                }
            }
            Event::GroundTruthMaskSet { case_id, mask_ref } => {
                if let Some(c) = self.cases.get_mut(case_id) {
                    c.gt_mask_ref = Some(mask_ref.clone());
                    c.updated_at = at;
                }
            }
            Event::PartitionCreated { partition } => {
                for id in &partition.members {
                    if let Some(c) = self.cases.get_mut(id) {
                        c.partitions.insert(partition.name.clone());
                    }
                }
                self.partitions.insert(partition.name.clone(), partition.clone());
            }
            Event::PartitionMembersAdded { name, case_ids } => {
                if let Some(p) = self.partitions.get_mut(name) {
                    p.members.extend(case_ids.iter().copied());
                }
                for id in case_ids {
                    if let Some(c) = self.cases.get_mut(id) {
                        c.partitions.insert(name.clone());
                    }
                }
            }
            Event::ModelRegistered { model } => {
                self.models.insert(model.version_id, model.clone());
            }
            Event::HoldoutMetricsAttached { version_id, report } => {
                if let Some(m) = self.models.get_mut(version_id) {
                    m.holdout_metrics = Some(report.clone());
                }
            }
            Event::ModelDeployed { version_id } => {
                for m in self.models.values_mut() {
                    m.deployed = m.version_id == *version_id;
                }
                self.deployed = Some(*version_id);
            }
            Event::AnnotationSubmitted { annotation } => {
                self.annotations.insert(annotation.annotation_id, annotation.clone());
            }
            Event::ResultRecorded { result } => {
                self.results.insert(result.result_id, result.clone());
            }
            Event::RoundCompleted { outcome } => {
                self.rounds.insert(
                    outcome.round_id,
                    RoundRecord::Completed {
                        outcome: outcome.clone(),
                    },
                );
            }
            Event::RoundAborted { round_id, reason } => {
                self.rounds.insert(
                    *round_id,
                    RoundRecord::Aborted {
                        round_id: *round_id,
                        reason: reason.clone(),
                        at,
                    },
                );
            }
        }
    }
}
