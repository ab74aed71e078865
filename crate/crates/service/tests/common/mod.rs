#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use hemoloop_core::dicom::write_slice;
use hemoloop_core::grid::{Shape, Spacing};
use hemoloop_core::inference::InferenceConfig;
use hemoloop_core::model::TrainConfig;
use hemoloop_core::phantom::{Phantom, PhantomSpec};
use hemoloop_core::refinement::campaign::{seed_campaign, CampaignConfig, HOLDOUT, LOCAL_TRAIN, PUBLIC_TRAIN};
use hemoloop_core::refinement::{run_round, Candidate, RoundConfig, SelectionMetric};
use hemoloop_core::registry::Registry;
use hemoloop_service::{start, RunningServer, ServerConfig};
use serde_json::Value;

pub const TOKEN: &str = "test-token";

pub fn tiny_campaign() -> CampaignConfig {
    CampaignConfig {
        seed: 11,
        shape: Shape::new(24, 24, 8),
        public_train: 3,
        local_train: 3,
        holdout_positive: 4,
        online_positive: 4,
        shared_negative: 4,
        feedback_positive: 2,
        feedback_negative: 2,
        ..Default::default()
    }
}

pub fn quick_round() -> RoundConfig {
    RoundConfig {
        round_id: None,
        training_partitions: vec![PUBLIC_TRAIN.into(), LOCAL_TRAIN.into()],
        include_annotations_since: None,
        candidates: vec![Candidate {
            name: "ref".into(),
            train: TrainConfig {
                epochs: 4,
                class_balance: false,
                ..Default::default()
            },
            inference: InferenceConfig::default(),
        }],
        selection_metric: SelectionMetric::Auc,
        holdout_partition: HOLDOUT.into(),
        online_partition: None,
        calibrate: false,
        seed: 0,
    }
}

/// Registry with the tiny campaign seeded and nothing deployed.
pub fn seeded_registry(dir: &Path) -> Arc<Registry> {
    let reg = Registry::open(dir).unwrap();
    seed_campaign(&reg, &tiny_campaign()).unwrap();
    Arc::new(reg)
}

/// Seeded registry with one trained, deployed model.
pub fn deployed_registry(dir: &Path) -> Arc<Registry> {
    let reg = seeded_registry(dir);
    run_round(&reg, &quick_round()).unwrap();
    reg
}

pub fn serve(registry: Arc<Registry>) -> RunningServer {
    start(
        registry,
        ServerConfig {
            token: Some(TOKEN.into()),
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn phantom(seed: u64, shape: Shape) -> Phantom {
    PhantomSpec::local_positive(shape, Spacing::new(1.0, 1.0, 2.5)).generate(seed)
}

pub fn slice_files(p: &Phantom) -> Vec<Vec<u8>> {
    p.to_slices().iter().map(write_slice).collect()
}

pub fn wait_idle(server: &RunningServer) {
    assert!(server.state.jobs.wait_idle(Duration::from_secs(60)), "jobs did not drain");
}

pub struct Http {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

impl Http {
    pub fn new(server: &RunningServer) -> Self {
        Self::with_token(server, Some(TOKEN))
    }

    pub fn with_token(server: &RunningServer, token: Option<&str>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            agent,
            base: server.base_url(),
            token: token.map(str::to_string),
        }
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    /// Status and raw body.
    pub fn get_text(&self, path: &str) -> (u16, String) {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        let mut resp = req.call().unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let (s, body) = self.get_text(path);
        (s, serde_json::from_str(&body).unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        let mut resp = req.send_json(body).unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }
}
