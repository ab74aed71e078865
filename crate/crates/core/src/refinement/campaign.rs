//! Seeded three-round demo campaign over synthetic phantoms.
//!
//! Round 1 trains on bright "public" lesions without distractors, round 2
//! adds the local site's dimmer lesions with calcifications, round 3 adds
//! the annotations a scripted reviewer files against the round-2 model on a
//! separate feedback stream. Every round is scored on the same frozen
//! hold-out and replayed over the same online stream.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{run_round, Candidate, RoundConfig, RoundError, RoundOutcome, SelectionMetric};
use crate::grid::{Mask, Shape, Spacing};
use crate::inference::{infer_case, InferenceConfig};
use crate::metrics::dice;
use crate::model::TrainConfig;
use crate::phantom::{Phantom, PhantomSpec};
use crate::registry::{ErrorClass, Label, NewAnnotation, NewCase, PartitionRole, Registry, RegistryError};

pub const PUBLIC_TRAIN: &str = "train_public";
pub const LOCAL_TRAIN: &str = "train_local";
pub const HOLDOUT: &str = "holdout";
pub const ONLINE: &str = "online";
pub const SHARED_NEGATIVES: &str = "shared_negatives";
pub const FEEDBACK_SITE: &str = "feedback";

/// Boundary fixes are filed below this Dice.
pub const REVIEW_DICE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub seed: u64,
    pub shape: Shape,
    pub spacing: Spacing,
    pub public_train: usize,
    pub local_train: usize,
    pub holdout_positive: usize,
    pub online_positive: usize,
    /// Hard negatives shared by the hold-out and the online stream.
    pub shared_negative: usize,
    pub feedback_positive: usize,
    pub feedback_negative: usize,
    pub candidates: Vec<Candidate>,
    pub selection_metric: SelectionMetric,
    pub calibrate: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            shape: Shape::new(48, 48, 16),
            spacing: Spacing::new(1.0, 1.0, 2.5),
            public_train: 10,
            local_train: 15,
            holdout_positive: 28,
            online_positive: 31,
            shared_negative: 30,
            feedback_positive: 12,
            feedback_negative: 8,
            candidates: vec![
                Candidate {
                    name: "tta".into(),
                    train: TrainConfig {
                        class_balance: false,
                        ..Default::default()
                    },
                    inference: InferenceConfig::default(),
                },
                Candidate {
                    name: "long".into(),
                    train: TrainConfig {
                        class_balance: false,
                        epochs: 24,
                        ..Default::default()
                    },
                    inference: InferenceConfig::default(),
                },
            ],
            selection_metric: SelectionMetric::Auc,
            calibrate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Public = 1,
    Local = 2,
    Holdout = 3,
    Online = 4,
    Negative = 5,
    FeedbackPositive = 6,
    FeedbackNegative = 7,
}

impl CampaignConfig {
    fn seed_for(&self, group: Group, i: usize) -> u64 {
        (self.seed << 20) | ((group as u64) << 12) | i as u64
    }

    /// Hold-out and online positives mix local and subtle lesions 2:1; the
    /// feedback stream is the subtle cases reviewers flag.
    fn spec_for(&self, group: Group, i: usize) -> PhantomSpec {
        let (shape, sp) = (self.shape, self.spacing);
        match group {
            Group::Public => PhantomSpec::public_positive(shape, sp),
            Group::Local => PhantomSpec::local_positive(shape, sp),
            Group::FeedbackPositive => PhantomSpec::subtle_positive(shape, sp),
            Group::Holdout | Group::Online => {
                if i % 3 == 2 {
                    PhantomSpec::subtle_positive(shape, sp)
                } else {
                    PhantomSpec::local_positive(shape, sp)
                }
            }
            Group::Negative | Group::FeedbackNegative => PhantomSpec::hard_negative(shape, sp),
        }
    }

    fn round_config(&self, partitions: &[&str], since: Option<DateTime<Utc>>) -> RoundConfig {
        RoundConfig {
            round_id: None,
            training_partitions: partitions.iter().map(|s| s.to_string()).collect(),
            include_annotations_since: since,
            candidates: self.candidates.clone(),
            selection_metric: self.selection_metric,
            holdout_partition: HOLDOUT.into(),
            online_partition: Some(ONLINE.into()),
            calibrate: self.calibrate,
            seed: self.seed,
        }
    }
}

/// Cases registered by [`seed_campaign`].
#[derive(Clone, Debug)]
pub struct CampaignFixture {
    pub started_at: DateTime<Utc>,
    /// Feedback-stream case ids with the reviewer's reference mask.
    pub feedback: Vec<(u64, Mask)>,
}

fn register(
    registry: &Registry,
    phantom: &Phantom,
    site: &str,
    with_truth: bool,
) -> Result<u64, RegistryError> {
    let label = if phantom.is_positive() {
        Label::BleedPositive
    } else {
        Label::BleedNegative
    };
    let gt = (with_truth && phantom.is_positive()).then_some(&phantom.mask);
    let (case, _) = registry.register_case(NewCase {
        study_uid: &phantom.volume.study_uid,
        site_tag: site,
        pushed_by: "campaign",
        volume: &phantom.volume,
        label,
        gt_mask: gt,
    })?;
    Ok(case.case_id)
}

fn ensure_partition(registry: &Registry, name: &str, role: PartitionRole, ids: &[u64]) -> Result<(), RegistryError> {
    match registry.partition(name) {
        Some(_) => Ok(()),
        None => registry.create_partition(name, role, ids, true).map(|_| ()),
    }
}

/// Generate and register every campaign case and partition. Re-seeding an
/// already seeded registry changes nothing.
pub fn seed_campaign(registry: &Registry, cfg: &CampaignConfig) -> Result<CampaignFixture, RegistryError> {
    let started_at = Utc::now();
    let make = |group: Group, n: usize, site: &str, truth: bool| -> Result<Vec<u64>, RegistryError> {
        (0..n)
            .map(|i| register(registry, &cfg.spec_for(group, i).generate(cfg.seed_for(group, i)), site, truth))
            .collect()
    };
    let public = make(Group::Public, cfg.public_train, "public", true)?;
    let local = make(Group::Local, cfg.local_train, "local", true)?;
    let negatives = make(Group::Negative, cfg.shared_negative, "local", true)?;
    let holdout = make(Group::Holdout, cfg.holdout_positive, "local", true)?;
    let online = make(Group::Online, cfg.online_positive, "local", true)?;

    ensure_partition(registry, PUBLIC_TRAIN, PartitionRole::Train, &public)?;
    ensure_partition(registry, LOCAL_TRAIN, PartitionRole::Train, &local)?;
    ensure_partition(registry, SHARED_NEGATIVES, PartitionRole::NegativeTest, &negatives)?;
    let mut ids = holdout.clone();
    ids.extend(&negatives);
    ensure_partition(registry, HOLDOUT, PartitionRole::HoldoutTest, &ids)?;
    let mut ids = online.clone();
    ids.extend(&negatives);
    ensure_partition(registry, ONLINE, PartitionRole::OnlineTest, &ids)?;

    let mut feedback = Vec::new();
    for (group, n) in [
        (Group::FeedbackPositive, cfg.feedback_positive),
        (Group::FeedbackNegative, cfg.feedback_negative),
    ] {
        for i in 0..n {
            let p = cfg.spec_for(group, i).generate(cfg.seed_for(group, i));
            let id = register(registry, &p, FEEDBACK_SITE, false)?;
            feedback.push((id, p.mask));
        }
    }
    Ok(CampaignFixture { started_at, feedback })
}

/// Scripted reviewer: run the deployed model over the feedback stream and
/// file one annotation per case, with the reference mask attached to
/// misses and poor outlines.
pub fn review_feedback(registry: &Registry, fixture: &CampaignFixture) -> Result<Vec<u64>, RoundError> {
    let mut filed = Vec::new();
    for (case_id, truth) in &fixture.feedback {
        let out = infer_case(registry, *case_id, None)?;
        let positive = truth.count() > 0;
        let (class, mask) = match (positive, out.result.is_positive()) {
            (true, false) => (ErrorClass::FalseNegative, Some(truth.clone())),
            (true, true) if dice(&out.mask, truth)? < REVIEW_DICE => {
                (ErrorClass::BoundaryInaccuracy, Some(truth.clone()))
            }
            (false, true) => (ErrorClass::FalsePositive, None),
            _ => (ErrorClass::Correct, None),
        };
        let a = registry.submit_annotation(NewAnnotation {
            case_id: *case_id,
            result_id: Some(out.result.result_id),
            error_class: class,
            corrected_mask: mask,
            author: "reviewer".into(),
            note: None,
            if_latest: None,
        })?;
        if class != ErrorClass::Correct {
            filed.push(a.annotation_id);
        }
    }
    Ok(filed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub rounds: Vec<RoundOutcome>,
    pub corpus_sizes: Vec<usize>,
    pub holdout_auc: Vec<f64>,
    pub online_sens: Vec<f64>,
    /// Corrective annotations filed before round 3.
    pub feedback_annotations: usize,
    /// Registered models whose lineage touches a hold-out case.
    pub leakage_violations: Vec<u64>,
}

impl CampaignReport {
    pub fn auc_strictly_increasing(&self) -> bool {
        self.holdout_auc.windows(2).all(|w| w[1] > w[0])
    }

    pub fn online_sens_gain(&self) -> f64 {
        match (self.online_sens.first(), self.online_sens.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// Seed, then run the three rounds. `progress` receives one line per step.
pub fn run_campaign(
    registry: &Registry,
    cfg: &CampaignConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<CampaignReport, RoundError> {
    let fixture = seed_campaign(registry, cfg)?;
    progress(&format!("seeded {} cases", registry.cases().len()));

    let mut rounds = Vec::new();
    let summarize = |o: &RoundOutcome, progress: &mut dyn FnMut(&str)| {
        progress(&format!(
            "round {}: corpus {} cases, hold-out auc {:.3}, online sens {:.3}",
            o.round_id,
            o.corpus.entries.len(),
            o.selected_holdout().auc,
            o.online.as_ref().map_or(f64::NAN, |r| r.sens),
        ));
    };
    let r1 = run_round(registry, &cfg.round_config(&[PUBLIC_TRAIN], None))?;
    summarize(&r1, progress);
    rounds.push(r1);
    let r2 = run_round(registry, &cfg.round_config(&[PUBLIC_TRAIN, LOCAL_TRAIN], None))?;
    summarize(&r2, progress);
    rounds.push(r2);
    let filed = review_feedback(registry, &fixture)?;
    progress(&format!("reviewer filed {} corrective annotations", filed.len()));
    let r3 = run_round(
        registry,
        &cfg.round_config(&[PUBLIC_TRAIN, LOCAL_TRAIN], Some(fixture.started_at)),
    )?;
    summarize(&r3, progress);
    rounds.push(r3);

    let holdout = registry.holdout_members();
    let leakage_violations = registry
        .models()
        .into_iter()
        .filter(|m| m.lineage.case_ids.iter().any(|id| holdout.contains(id)))
        .map(|m| m.version_id)
        .collect();
    Ok(CampaignReport {
        corpus_sizes: rounds.iter().map(|r| r.corpus.entries.len()).collect(),
        holdout_auc: rounds.iter().map(|r| r.selected_holdout().auc).collect(),
        online_sens: rounds.iter().map(|r| r.online.as_ref().map_or(0.0, |o| o.sens)).collect(),
        feedback_annotations: filed.len(),
        leakage_violations,
        rounds,
    })
}
