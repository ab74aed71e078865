use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::grid::{Shape, Spacing};
use crate::inference::InferenceConfig;
use crate::metrics::{Calibration, EvaluationReport};

macro_rules! snake_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} {other:?}", stringify!($name))),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BleedPositive,
    BleedNegative,
    #[default]
    Unknown,
}

snake_enum!(Label {
    BleedPositive => "bleed_positive",
    BleedNegative => "bleed_negative",
    Unknown => "unknown",
});

impl Label {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Label::BleedPositive => Some(true),
            Label::BleedNegative => Some(false),
            Label::Unknown => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionRole {
    Train,
    HoldoutTest,
    OnlineTest,
    NegativeTest,
}

snake_enum!(PartitionRole {
    Train => "train",
    HoldoutTest => "holdout_test",
    OnlineTest => "online_test",
    NegativeTest => "negative_test",
});

impl PartitionRole {
    pub fn is_test(self) -> bool {
        !matches!(self, PartitionRole::Train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    FalsePositive,
    FalseNegative,
    BoundaryInaccuracy,
    Correct,
}

snake_enum!(ErrorClass {
    FalsePositive => "false_positive",
    FalseNegative => "false_negative",
    BoundaryInaccuracy => "boundary_inaccuracy",
    Correct => "correct",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ReferenceClassifier,
    ExternalRunner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: u64,
    pub study_uid: String,
    pub series_uid: String,
    /// Path relative to the data directory.
    pub volume_ref: String,
    pub volume_digest: String,
    pub shape: Shape,
    pub spacing: Spacing,
    pub origin: [f64; 3],
    pub site_tag: String,
    pub pushed_by: String,
    pub label: Label,
    pub gt_mask_ref: Option<String>,
    pub partitions: BTreeSet<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub role: PartitionRole,
    pub members: BTreeSet<u64>,
    pub frozen: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub partitions: Vec<String>,
    pub annotation_ids: Vec<u64>,
    /// Every case whose voxels were used for training.
    pub case_ids: Vec<u64>,
}

impl Lineage {
    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty() && self.annotation_ids.is_empty() && self.case_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version_id: u64,
    pub name: String,
    pub kind: ModelKind,
    pub artifact_ref: String,
    pub artifact_sha256: String,
    pub inference: InferenceConfig,
    pub calibration: Option<Calibration>,
    pub lineage: Lineage,
    pub holdout_metrics: Option<EvaluationReport>,
    pub deployed: bool,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: u64,
    pub case_id: u64,
    pub result_id: Option<u64>,
    pub error_class: ErrorClass,
    pub corrected_mask_ref: Option<String>,
    pub author: String,
    #[serde(default)]
    pub note: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    NoResult,
    Queued,
    Running,
    Failed,
    PendingReview,
    Reviewed,
}

snake_enum!(CaseStatus {
    NoResult => "no_result",
    Queued => "queued",
    Running => "running",
    Failed => "failed",
    PendingReview => "pending_review",
    Reviewed => "reviewed",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    None,
    Annotated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: u64,
    pub study_uid: String,
    pub site_tag: String,
    pub pushed_by: String,
    pub label: Label,
    pub partitions: BTreeSet<String>,
    pub created_at: DateTime<Utc>,
    pub status: CaseStatus,
    pub latest_result_id: Option<u64>,
    pub case_score: Option<f64>,
    pub predicted_positive: Option<bool>,
    pub annotation_status: AnnotationStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorklistFilter {
    pub status: Option<CaseStatus>,
    pub partition: Option<String>,
    pub site: Option<String>,
    pub limit: Option<usize>,
}
