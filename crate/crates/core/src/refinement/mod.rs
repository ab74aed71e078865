//! Refinement rounds: assemble the cumulative corpus, retrain candidates,
//! score them on the frozen hold-out, deploy the best and replay the online
//! stream.

pub mod campaign;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::VolumeImage;
use crate::grid::Mask;
use crate::inference::{run_pipeline, InferenceConfig, InferenceError, PipelineOutput};
use crate::metrics::{
    calibrate_threshold, dice, export_bars_svg, export_csv, export_roc_svg, sens_at_spec, CaseOutcome, CaseRow,
    Calibration, CalibrationMap, EvaluationReport, MetricsError, ScoredCase,
};
use crate::model::{train, ClassifierParams, ModelArtifact, ModelError, ProbabilityModel, TrainConfig};
use crate::registry::{CaseRecord, ErrorClass, Lineage, ModelVersion, PartitionRole, Registry, RegistryError};

#[derive(Debug, Error)]
pub enum RoundError {
    #[error("round config has no candidates")]
    NoCandidates,
    #[error("hold-out or test cases would enter training: {0:?}")]
    LeakageDetected(Vec<u64>),
    #[error("round id {requested} requested, next free id is {next}")]
    RoundIdTaken { requested: u64, next: u64 },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown partition {0:?}")]
    UnknownPartition(String),
    #[error("unknown model version {0}")]
    UnknownVersion(u64),
    #[error("partition {0:?} has no labeled cases")]
    NothingToEvaluate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RoundError {
    fn from_registry(e: RegistryError) -> Self {
        match e {
            RegistryError::Leakage(ids) => RoundError::LeakageDetected(ids),
            other => RoundError::Registry(other),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Auc,
    F1,
    Dice,
    /// Sensitivity at specificity >= 0.9.
    SensAtSpec,
}

pub const SENS_AT_SPEC_MIN: f64 = 0.9;

impl SelectionMetric {
    /// A report without Dice rows scores `-inf` under `dice`.
    pub fn value(self, report: &EvaluationReport) -> Result<f64, MetricsError> {
        Ok(match self {
            SelectionMetric::Auc => report.auc,
            SelectionMetric::F1 => report.f1,
            SelectionMetric::Dice => report.dice.unwrap_or(f64::NEG_INFINITY),
            SelectionMetric::SensAtSpec => sens_at_spec(&report.scored_cases(), SENS_AT_SPEC_MIN)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Must equal the next free id when given.
    #[serde(default)]
    pub round_id: Option<u64>,
    pub training_partitions: Vec<String>,
    /// Harvest annotations created at or after this instant. `None` uses no
    /// annotations.
    #[serde(default)]
    pub include_annotations_since: Option<DateTime<Utc>>,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    pub holdout_partition: String,
    /// Replayed through the selected model after deployment.
    #[serde(default)]
    pub online_partition: Option<String>,
    /// Fit an isotonic confidence map on the training corpus.
    #[serde(default)]
    pub calibrate: bool,
    /// Added to every candidate's training seed.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Positive,
    Negative,
}

/// A case together with the ground truth an annotation gives it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestedCase {
    pub case_id: u64,
    pub annotation_id: u64,
    pub error_class: ErrorClass,
    pub pool: Pool,
    /// `None` means an empty mask.
    pub mask_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Partition { name: String },
    Annotation { annotation_id: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub case_id: u64,
    pub source: CorpusSource,
    pub mask_ref: Option<String>,
}

impl CorpusEntry {
    pub fn is_positive(&self) -> bool {
        self.mask_ref.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub annotation_ids: Vec<u64>,
    /// Annotated online-test cases held back so online numbers stay honest.
    pub excluded_online: Vec<u64>,
    /// Partition members without a usable label or mask.
    pub skipped: Vec<u64>,
}

impl Corpus {
    pub fn case_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.case_id).collect()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.is_positive()).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub name: String,
    /// As registered, with hold-out metrics attached.
    pub model: ModelVersion,
    pub metric: f64,
}

impl CandidateOutcome {
    pub fn holdout(&self) -> &EvaluationReport {
        self.model.holdout_metrics.as_ref().expect("candidate without hold-out metrics")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round_id: u64,
    pub config: RoundConfig,
    pub corpus: Corpus,
    pub candidates: Vec<CandidateOutcome>,
    pub selected: ModelVersion,
    pub deployed_at: DateTime<Utc>,
    pub online: Option<EvaluationReport>,
}

impl RoundOutcome {
    pub fn selected_holdout(&self) -> &EvaluationReport {
        self.selected.holdout_metrics.as_ref().expect("selected model without hold-out metrics")
    }
}

/// Map `f` over `items` on a bounded set of scoped threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(2, |n| n.get()).min(items.len()).max(1);
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break out;
                        }
                        out.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// Latest annotation per case wins. False positives join the negative pool
/// (keeping the case's own ground truth if it has one, so a real lesion is
/// not relabeled background); false negatives and boundary fixes with a
/// corrected mask join the positive pool with that mask; `correct` and
/// mask-less false negatives on cases without ground truth add nothing.
pub fn harvest_annotations(registry: &Registry, since: Option<DateTime<Utc>>) -> Vec<HarvestedCase> {
    let mut latest: BTreeMap<u64, crate::registry::Annotation> = BTreeMap::new();
    for a in registry.annotations_since(since) {
        latest.insert(a.case_id, a);
    }
    let mut out = Vec::new();
    for (case_id, a) in latest {
        let Some(case) = registry.case(case_id) else { continue };
        let (pool, mask_ref) = match a.error_class {
            ErrorClass::Correct => continue,
            ErrorClass::FalsePositive => (Pool::Negative, case.gt_mask_ref.clone()),
            ErrorClass::FalseNegative | ErrorClass::BoundaryInaccuracy => {
                match a.corrected_mask_ref.clone().or_else(|| case.gt_mask_ref.clone()) {
                    Some(m) => (Pool::Positive, Some(m)),
                    None => continue,
                }
            }
        };
        out.push(HarvestedCase {
            case_id,
            annotation_id: a.annotation_id,
            error_class: a.error_class,
            pool,
            mask_ref,
        });
    }
    out
}

/// Union of the training partitions and harvested annotations, with
/// corrected masks overriding originals. Any hold-out case, or any listed
/// partition with a test role, is leakage.
pub fn build_corpus(registry: &Registry, config: &RoundConfig) -> Result<Corpus, RoundError> {
    let state = registry.state();
    let holdout: BTreeSet<u64> = registry.holdout_members();
    let mut entries: BTreeMap<u64, CorpusEntry> = BTreeMap::new();
    let mut corpus = Corpus::default();
    for name in &config.training_partitions {
        let p = state
            .partitions
            .get(name)
            .ok_or_else(|| RoundError::UnknownPartition(name.clone()))?;
        if p.role.is_test() {
            return Err(RoundError::LeakageDetected(p.members.iter().copied().collect()));
        }
        for id in &p.members {
            let c = &state.cases[id];
            let mask_ref = match (c.label.as_bool(), &c.gt_mask_ref) {
                (Some(true), Some(m)) => Some(m.clone()),
                (Some(false), _) => None,
                _ => {
                    corpus.skipped.push(*id);
                    continue;
                }
            };
            entries.entry(*id).or_insert(CorpusEntry {
                case_id: *id,
                source: CorpusSource::Partition { name: name.clone() },
                mask_ref,
            });
        }
    }
    if config.include_annotations_since.is_some() {
        for h in harvest_annotations(registry, config.include_annotations_since) {
            let c = &state.cases[&h.case_id];
            let online = c
                .partitions
                .iter()
                .any(|p| state.partitions.get(p).is_some_and(|p| p.role == PartitionRole::OnlineTest));
            if online && !holdout.contains(&h.case_id) {
                corpus.excluded_online.push(h.case_id);
                continue;
            }
            corpus.annotation_ids.push(h.annotation_id);
            entries.insert(
                h.case_id,
                CorpusEntry {
                    case_id: h.case_id,
                    source: CorpusSource::Annotation {
                        annotation_id: h.annotation_id,
                    },
                    mask_ref: h.mask_ref,
                },
            );
        }
    }
    let leaked: Vec<u64> = entries.keys().filter(|id| holdout.contains(id)).copied().collect();
    if !leaked.is_empty() {
        return Err(RoundError::LeakageDetected(leaked));
    }
    corpus.entries = entries.into_values().collect();
    Ok(corpus)
}

fn load_corpus(registry: &Registry, corpus: &Corpus) -> Result<Vec<(VolumeImage, Mask)>, RoundError> {
    let loaded = parallel_map(&corpus.entries, |e| -> Result<(VolumeImage, Mask), RoundError> {
        let case = registry.case(e.case_id).ok_or(RegistryError::UnknownCase(e.case_id))?;
        let volume = registry.load_volume(&case)?;
        let mask = match &e.mask_ref {
            Some(r) => registry.load_mask(r)?,
            None => Mask::empty(case.shape),
        };
        Ok((volume, mask))
    });
    loaded.into_iter().collect()
}

/// Ensemble members and calibration for a registered model. An empty
/// `model_ids` list means the model itself.
fn resolve_model(
    registry: &Registry,
    version_id: u64,
) -> Result<(ModelVersion, InferenceConfig, Vec<ModelArtifact>, CalibrationMap), RoundError> {
    let model = registry.model(version_id).ok_or(RoundError::UnknownVersion(version_id))?;
    let mut config = model.inference.clone();
    if config.model_ids.is_empty() {
        config.model_ids = vec![version_id];
    }
    let artifacts = config
        .model_ids
        .iter()
        .map(|&id| registry.load_artifact(id))
        .collect::<Result<Vec<_>, _>>()?;
    let calibration = model.calibration.as_ref().map(|c| c.map.clone()).unwrap_or_default();
    Ok((model, config, artifacts, calibration))
}

fn case_row(
    registry: &Registry,
    case: &CaseRecord,
    positive: bool,
    out: &PipelineOutput,
    result_id: Option<u64>,
) -> Result<CaseRow, RoundError> {
    let predicted = out.is_positive();
    let dice = match (positive, registry.ground_truth(case)?) {
        (true, Some(gt)) => Some(dice(&out.mask, &gt)?),
        _ => None,
    };
    Ok(CaseRow {
        case_id: case.case_id,
        positive,
        score: out.case_score,
        predicted,
        outcome: CaseOutcome::of(predicted, positive),
        dice,
        lesion_count: out.lesions.len(),
        total_volume_ml: out.total_volume_ml,
        result_id,
    })
}

/// Labeled members in stream order (created_at, then id) and the number of
/// unlabeled members left out.
fn labeled_members(registry: &Registry, partition: &str) -> Result<(Vec<(CaseRecord, bool)>, usize), RoundError> {
    let p = registry
        .partition(partition)
        .ok_or_else(|| RoundError::UnknownPartition(partition.to_string()))?;
    let mut cases: Vec<CaseRecord> = p.members.iter().filter_map(|id| registry.case(*id)).collect();
    cases.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.case_id.cmp(&b.case_id)));
    let mut skipped = 0;
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        match c.label.as_bool() {
            Some(positive) => out.push((c, positive)),
            None => {
                tracing::warn!("case {} in {partition:?} has no label; skipped", c.case_id);
                skipped += 1;
            }
        }
    }
    if out.is_empty() {
        return Err(RoundError::NothingToEvaluate(partition.to_string()));
    }
    Ok((out, skipped))
}

/// Score a registered model on a partition without persisting anything.
pub fn evaluate_model(registry: &Registry, version_id: u64, partition: &str) -> Result<EvaluationReport, RoundError> {
    let (model, config, artifacts, calibration) = resolve_model(registry, version_id)?;
    let models: Vec<&dyn ProbabilityModel> = artifacts.iter().map(|a| a as &dyn ProbabilityModel).collect();
    let (members, skipped) = labeled_members(registry, partition)?;
    let rows = parallel_map(&members, |(case, positive)| -> Result<CaseRow, RoundError> {
        let volume = registry.load_volume(case)?;
        let out = run_pipeline(&volume, &models, &config, &calibration)?;
        case_row(registry, case, *positive, &out, None)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut report = EvaluationReport::from_rows(model.name.clone(), partition, rows)?;
    report.skipped_unlabeled = skipped;
    Ok(report)
}

/// Stream a partition through the model in arrival order, persisting each
/// result (identical earlier runs are reused) so errors reach the worklist.
pub fn replay_online(registry: &Registry, partition: &str, version_id: u64) -> Result<EvaluationReport, RoundError> {
    let (model, config, artifacts, calibration) = resolve_model(registry, version_id)?;
    let models: Vec<&dyn ProbabilityModel> = artifacts.iter().map(|a| a as &dyn ProbabilityModel).collect();
    let (members, skipped) = labeled_members(registry, partition)?;
    // Compute in parallel, record in stream order so result ids follow it.
    let computed = parallel_map(&members, |(case, _)| -> Result<Option<(VolumeImage, PipelineOutput)>, RoundError> {
        if registry.find_result(case.case_id, &config, &case.volume_digest).is_some() {
            return Ok(None);
        }
        let volume = registry.load_volume(case)?;
        let out = run_pipeline(&volume, &models, &config, &calibration)?;
        Ok(Some((volume, out)))
    });
    let mut rows = Vec::with_capacity(members.len());
    for ((case, positive), computed) in members.iter().zip(computed) {
        let (out, result_id) = match computed? {
            Some((volume, out)) => {
                let recorded = registry.record_result(case, &volume, config.clone(), out.clone())?;
                (out, recorded.result.result_id)
            }
            None => {
                let r = registry
                    .find_result(case.case_id, &config, &case.volume_digest)
                    .expect("result seen above");
                let (prob_map, mask) = registry.load_result_maps(&r)?;
                let out = PipelineOutput {
                    prob_map,
                    mask,
                    lesions: r.lesions.clone(),
                    case_score: r.case_score,
                    total_volume_ml: r.total_volume_ml,
                    wall_time_ms: r.wall_time_ms,
                };
                (out, r.result_id)
            }
        };
        rows.push(case_row(registry, case, *positive, &out, Some(result_id))?);
    }
    let mut report = EvaluationReport::from_rows(model.name.clone(), partition, rows)?;
    report.skipped_unlabeled = skipped;
    Ok(report)
}

/// Case scores of `params` on its own training corpus, for calibration.
fn fit_calibration(
    params: &ClassifierParams,
    inference: &InferenceConfig,
    data: &[(VolumeImage, Mask)],
) -> Result<Calibration, RoundError> {
    let identity = CalibrationMap::identity();
    let scored = parallel_map(data, |(volume, mask)| -> Result<ScoredCase, RoundError> {
        let out = run_pipeline(volume, &[params as &dyn ProbabilityModel], inference, &identity)?;
        Ok(ScoredCase::new(out.case_score, mask.count() > 0))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(calibrate_threshold(&scored)?)
}

/// Run one refinement round. Holds the registry's round lock throughout. On
/// failure after the round id is taken, an abort event is recorded and
/// nothing is deployed.
pub fn run_round(registry: &Registry, config: &RoundConfig) -> Result<RoundOutcome, RoundError> {
    let _guard = registry.lock_rounds();
    if config.candidates.is_empty() {
        return Err(RoundError::NoCandidates);
    }
    let round_id = registry.next_round_id();
    if let Some(requested) = config.round_id {
        if requested != round_id {
            return Err(RoundError::RoundIdTaken {
                requested,
                next: round_id,
            });
        }
    }
    match execute_round(registry, round_id, config) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            tracing::warn!("round {round_id} aborted: {e}");
            registry.record_round_abort(round_id, &e.to_string())?;
            Err(e)
        }
    }
}

fn execute_round(registry: &Registry, round_id: u64, config: &RoundConfig) -> Result<RoundOutcome, RoundError> {
    let holdout = registry
        .partition(&config.holdout_partition)
        .ok_or_else(|| RoundError::UnknownPartition(config.holdout_partition.clone()))?;
    if holdout.role != PartitionRole::HoldoutTest {
        return Err(RegistryError::NotHoldout(holdout.name).into());
    }
    let corpus = build_corpus(registry, config)?;
    if corpus.entries.is_empty() {
        return Err(RoundError::EmptyCorpus);
    }
    let data = load_corpus(registry, &corpus)?;
    let pairs: Vec<(&VolumeImage, &Mask)> = data.iter().map(|(v, m)| (v, m)).collect();

    let trained: Vec<Result<ClassifierParams, ModelError>> = std::thread::scope(|s| {
        let handles: Vec<_> = config
            .candidates
            .iter()
            .map(|c| {
                let pairs = &pairs;
                s.spawn(move || {
                    let mut tc = c.train.clone();
                    tc.seed = tc.seed.wrapping_add(config.seed);
                    train(pairs, &tc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });

    let lineage = Lineage {
        partitions: config.training_partitions.clone(),
        annotation_ids: corpus.annotation_ids.clone(),
        case_ids: corpus.case_ids(),
    };
    let mut candidates = Vec::with_capacity(config.candidates.len());
    for (candidate, params) in config.candidates.iter().zip(trained) {
        let params = params?;
        let mut inference = candidate.inference.clone();
        inference.model_ids.clear();
        inference.validate(1)?;
        let calibration = if config.calibrate {
            Some(fit_calibration(&params, &inference, &data)?)
        } else {
            None
        };
        let artifact = ModelArtifact::ReferenceClassifier { params };
        let name = format!("round{round_id}-{}", candidate.name);
        let model = registry
            .register_model(&name, &artifact, inference, calibration, lineage.clone())
            .map_err(RoundError::from_registry)?;
        let report = evaluate_model(registry, model.version_id, &config.holdout_partition)?;
        let metric = config.selection_metric.value(&report)?;
        let model = registry.attach_holdout_metrics(model.version_id, report)?;
        candidates.push(CandidateOutcome {
            name: candidate.name.clone(),
            model,
            metric,
        });
    }

    // Strictly greater replaces, so ties keep the lowest version id.
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.metric > candidates[best].metric {
            best = i;
        }
    }
    let selected_id = candidates[best].model.version_id;
    let selected = registry.deploy_model(selected_id)?;
    let deployed_at = Utc::now();
    let online = config
        .online_partition
        .as_deref()
        .map(|p| replay_online(registry, p, selected_id))
        .transpose()?;

    let outcome = RoundOutcome {
        round_id,
        config: config.clone(),
        corpus,
        candidates,
        selected,
        deployed_at,
        online,
    };
    write_artifacts(registry, &outcome)?;
    registry.record_round(outcome.clone())?;
    Ok(outcome)
}

/// `rounds/<id>/`: outcome JSON, hold-out CSV and charts for every
/// candidate, online CSV when a replay ran.
pub fn write_artifacts(registry: &Registry, outcome: &RoundOutcome) -> Result<(), RoundError> {
    let dir = registry.round_dir(outcome.round_id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("outcome.json"), serde_json::to_vec_pretty(outcome)?)?;
    let holdout: Vec<EvaluationReport> = outcome.candidates.iter().map(|c| c.holdout().clone()).collect();
    fs::write(dir.join("holdout.csv"), export_csv(&holdout)?)?;
    fs::write(dir.join("holdout_roc.svg"), export_roc_svg(&holdout))?;
    fs::write(dir.join("holdout_bars.svg"), export_bars_svg(&holdout))?;
    if let Some(online) = &outcome.online {
        let online = std::slice::from_ref(online);
        fs::write(dir.join("online.csv"), export_csv(online)?)?;
        fs::write(dir.join("online_roc.svg"), export_roc_svg(online))?;
    }
    Ok(())
}
