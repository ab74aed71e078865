use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Duration;

use hemoloop_core::dicom::write_slice;
use hemoloop_core::grid::{Shape, Spacing};
use hemoloop_core::phantom::PhantomSpec;
use hemoloop_core::refinement::campaign::{seed_campaign, CampaignConfig, HOLDOUT, LOCAL_TRAIN, PUBLIC_TRAIN};
use hemoloop_core::registry::Registry;
use hemoloop_service::{start, RunningServer, ServerConfig};
use serde_json::{json, Value};

const TOKEN: &str = "cli-token";

fn tiny() -> CampaignConfig {
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

fn serve(dir: &Path) -> RunningServer {
    let reg = Registry::open(dir).unwrap();
    seed_campaign(&reg, &tiny()).unwrap();
    start(
        Arc::new(reg),
        ServerConfig {
            token: Some(TOKEN.into()),
            ..Default::default()
        },
    )
    .unwrap()
}

fn hemoloop(server: Option<&RunningServer>, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hemoloop"));
    cmd.env_remove("HEMOLOOP_SERVER").env_remove("HEMOLOOP_PUSH").env("HEMOLOOP_TOKEN", TOKEN);
    cmd.arg("--out").arg(out);
    match server {
        Some(s) => cmd.args(["--server", &s.base_url(), "--push", &s.push_addr.to_string()]),
        None => cmd.args(["--server", "http://127.0.0.1:9", "--push", "127.0.0.1:9"]),
    };
    cmd.args(args).output().unwrap()
}

fn lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON: {l}: {e}")))
        .collect()
}

fn write_study(dir: &Path, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let p = PhantomSpec::local_positive(Shape::new(16, 16, 3), Spacing::new(1.0, 1.0, 2.5)).generate(seed);
    for (i, s) in p.to_slices().iter().enumerate() {
        std::fs::write(dir.join(format!("{i:03}.dcm")), write_slice(s)).unwrap();
    }
}

fn round_config(dir: &Path, partitions: &[&str]) -> String {
    let cfg = json!({
        "training_partitions": partitions,
        "candidates": [{"name": "c", "train": {"epochs": 3, "class_balance": false}}],
        "holdout_partition": HOLDOUT,
    });
    let path = dir.join("round.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(hemoloop(None, d.path(), &[]).status.code(), Some(64));
    assert_eq!(hemoloop(None, d.path(), &["frobnicate"]).status.code(), Some(64));
    assert_eq!(hemoloop(None, d.path(), &["push", "/no/such/dir", "--site", "a"]).status.code(), Some(64));
    assert_eq!(hemoloop(None, d.path(), &["round", "--config", "/no/such.json"]).status.code(), Some(64));
    assert_eq!(hemoloop(None, d.path(), &["partition", "create", "--name", "x", "--role", "bogus", "--cases", "1"]).status.code(), Some(64));
    let help = hemoloop(None, d.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("worklist"));
}

#[test]
fn unreachable_server_maps_to_command_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    write_study(&d.path().join("s"), 1);
    let s = d.path().join("s");
    assert_eq!(hemoloop(None, d.path(), &["push", s.to_str().unwrap(), "--site", "a"]).status.code(), Some(1));
    assert_eq!(hemoloop(None, d.path(), &["worklist"]).status.code(), Some(2));
    assert_eq!(hemoloop(None, d.path(), &["deploy", "1"]).status.code(), Some(2));
}

#[test]
fn push_groups_by_study_and_prints_receipts() {
    let d = tempfile::tempdir().unwrap();
    let server = serve(&d.path().join("reg"));
    let before = server.state.registry.cases().len();
    let studies = d.path().join("in");
    write_study(&studies.join("a"), 1);
    write_study(&studies.join("b"), 2);
    let o = hemoloop(Some(&server), d.path(), &["push", studies.to_str().unwrap(), "--site", "north"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let receipts = lines(&o);
    assert_eq!(receipts.len(), 2);
    for r in &receipts {
        assert_eq!(r["slice_count"], 3);
        assert_eq!(r["site_tag"], "north");
        assert_eq!(r["outcome"], "created");
    }
    assert_ne!(receipts[0]["study_uid"], receipts[1]["study_uid"]);
    assert_eq!(server.state.registry.cases().len(), before + 2);
}

#[test]
fn corrupt_file_aborts_its_session() {
    let d = tempfile::tempdir().unwrap();
    let server = serve(&d.path().join("reg"));
    let before = server.state.registry.cases().len();
    let study = d.path().join("in");
    write_study(&study, 5);
    std::fs::write(study.join("zzz.dcm"), b"not a dicom file").unwrap();
    let o = hemoloop(Some(&server), d.path(), &["push", study.to_str().unwrap(), "--site", "north"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(lines(&o).is_empty());
    assert_eq!(server.state.registry.cases().len(), before);
}

#[test]
fn worklist_filters_and_rejects_bad_status() {
    let d = tempfile::tempdir().unwrap();
    let server = serve(&d.path().join("reg"));
    let o = hemoloop(Some(&server), d.path(), &["worklist", "--partition", PUBLIC_TRAIN]);
    assert_eq!(o.status.code(), Some(0));
    let rows = lines(&o);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["case_id"].is_u64()));
    let o = hemoloop(Some(&server), d.path(), &["worklist", "--limit", "2"]);
    assert_eq!(lines(&o).len(), 2);
    let o = hemoloop(Some(&server), d.path(), &["worklist", "--status", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn partitions_round_evaluate_and_deploy() {
    let d = tempfile::tempdir().unwrap();
    let server = serve(&d.path().join("reg"));
    let out = d.path().join("out");

    // Seeded cases already belong to a partition.
    let o = hemoloop(Some(&server), &out, &["partition", "create", "--name", "extra", "--role", "train", "--cases", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    let study = d.path().join("in");
    write_study(&study, 9);
    let pushed = lines(&hemoloop(Some(&server), &out, &["push", study.to_str().unwrap(), "--site", "south"]));
    let case = pushed[0]["case_id"].to_string();
    let o = hemoloop(Some(&server), &out, &["partition", "create", "--name", "extra", "--role", "train", "--cases", &case]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&o)[0]["size"], 1);
    let listed = lines(&hemoloop(Some(&server), &out, &["partition", "list"]));
    assert!(listed.iter().any(|p| p["name"] == "extra"));
    assert!(listed.iter().any(|p| p["name"] == HOLDOUT && p["frozen"] == true));

    // Training on the hold-out partition aborts the round.
    let leaky = round_config(d.path(), &[PUBLIC_TRAIN, HOLDOUT]);
    let o = hemoloop(Some(&server), &out, &["round", "--config", &leaky]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("leakage"));
    assert!(server.state.registry.deployed_model().is_none());

    let cfg = round_config(d.path(), &[PUBLIC_TRAIN, LOCAL_TRAIN]);
    let o = hemoloop(Some(&server), &out, &["round", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = &lines(&o)[0];
    assert_eq!(summary["corpus_size"], 6);
    let version = summary["selected_version"].as_u64().unwrap();
    assert!(summary["holdout"]["auc"].is_number());
    assert_eq!(server.state.registry.deployed_model().unwrap().version_id, version);

    let v = version.to_string();
    let o = hemoloop(Some(&server), &out, &["evaluate", "--model", &v, "--partition", HOLDOUT]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = lines(&o);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["partition"], HOLDOUT);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["dice", "sens", "spec", "auc", "accu", "preci", "f1"] {
        assert!(header.split(',').any(|h| h == col), "{col} missing from {header}");
    }
    assert!(std::fs::read_to_string(out.join("roc.svg")).unwrap().starts_with("<svg"));
    assert!(out.join("bars.svg").is_file());

    assert_eq!(hemoloop(Some(&server), &out, &["evaluate", "--model", &v, "--partition", "nope"]).status.code(), Some(2));
    assert_eq!(hemoloop(Some(&server), &out, &["evaluate", "--model", "999", "--partition", HOLDOUT]).status.code(), Some(2));
    assert_eq!(hemoloop(Some(&server), &out, &["deploy", "999"]).status.code(), Some(2));
    let o = hemoloop(Some(&server), &out, &["deploy", &v]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(lines(&o)[0]["version_id"], version);
    assert!(server.state.jobs.wait_idle(Duration::from_secs(60)));
}

#[test]
fn demo_runs_a_tiny_campaign() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("campaign.json");
    std::fs::write(&cfg, serde_json::to_string(&tiny()).unwrap()).unwrap();
    let out = d.path().join("out");
    let o = hemoloop(None, &out, &["demo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let l = lines(&o);
    assert_eq!(l.len(), 4, "three rounds and a summary");
    let summary = &l[3];
    assert_eq!(summary["holdout_auc"].as_array().unwrap().len(), 3);
    assert_eq!(summary["leakage_violations"], json!([]));
    for f in ["campaign.json", "holdout.csv", "holdout_roc.svg", "online.csv", "online_bars.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    // A second run into the same directory is refused.
    assert_eq!(hemoloop(None, &out, &["demo", "--config", cfg.to_str().unwrap()]).status.code(), Some(64));
}
