mod common;

use std::sync::Arc;

use common::*;
use hemoloop_core::grid::Shape;
use hemoloop_core::metrics::CSV_HEADER;
use hemoloop_core::refinement::campaign::{HOLDOUT, ONLINE, PUBLIC_TRAIN};
use hemoloop_core::registry::Registry;
use hemoloop_service::bundle::{window_u8, CaseBundle};
use hemoloop_service::push_study;
use serde_json::{json, Value};

const SHAPE: Shape = Shape::new(16, 16, 3);

fn error_code(v: &Value) -> &str {
    v["error"].as_str().unwrap_or("")
}

#[test]
fn bearer_token_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Arc::new(Registry::open(dir.path()).unwrap()));
    let anon = Http::with_token(&server, None);
    let (s, body) = anon.get("/api/worklist");
    assert_eq!((s, error_code(&body)), (401, "unauthorized"));
    assert_eq!(Http::with_token(&server, Some("wrong")).get("/api/models").0, 401);
    assert_eq!(anon.get("/api/health").0, 200);
    let (s, body) = Http::new(&server).get("/api/worklist");
    assert_eq!((s, body), (200, json!([])));
}

#[test]
fn worklist_filters() {
    let dir = tempfile::tempdir().unwrap();
    let reg = deployed_registry(dir.path());
    let server = serve(reg.clone());
    let http = Http::new(&server);

    let a = push_study(server.push_addr, "siteA", "u", &slice_files(&phantom(1, SHAPE))).unwrap();
    let b = push_study(server.push_addr, "siteB", "u", &slice_files(&phantom(2, SHAPE))).unwrap();
    wait_idle(&server);

    let (s, rows) = http.get("/api/worklist?status=pending_review");
    assert_eq!(s, 200);
    let ids: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["case_id"].as_u64().unwrap()).collect();
    // Newest first.
    assert_eq!(ids, vec![b.case_id, a.case_id]);
    let oracle: Vec<u64> = {
        let mut v: Vec<u64> = reg
            .cases()
            .iter()
            .filter(|c| reg.latest_result(c.case_id).is_some() && reg.annotations_for(c.case_id).is_empty())
            .map(|c| c.case_id)
            .collect();
        v.sort_by(|x, y| y.cmp(x));
        v
    };
    assert_eq!(ids, oracle);
    let row = &rows[0];
    assert_eq!(row["site_tag"], "siteB");
    assert!(row["case_score"].is_number());
    assert_eq!(row["annotation_status"], "none");
    assert!(row["created_at"].as_str().unwrap().ends_with('Z'));

    let (_, rows) = http.get("/api/worklist?site=siteA");
    assert_eq!(rows.as_array().unwrap().len(), 1);
    let (_, rows) = http.get(&format!("/api/worklist?partition={ONLINE}"));
    let members = reg.partition(ONLINE).unwrap().members;
    assert_eq!(rows.as_array().unwrap().len(), members.len());
    assert!(rows.as_array().unwrap().iter().all(|r| members.contains(&r["case_id"].as_u64().unwrap())));
    let (_, rows) = http.get("/api/worklist?limit=1");
    assert_eq!(rows.as_array().unwrap().len(), 1);

    for bad in ["status=done", "partition=nope", "limit=x"] {
        let (s, body) = http.get(&format!("/api/worklist?{bad}"));
        assert_eq!((s, error_code(&body)), (400, "bad_filter"), "{bad}");
    }
}

#[test]
fn queued_and_failed_jobs_show_in_the_worklist() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Arc::new(Registry::open(dir.path()).unwrap()));
    let http = Http::new(&server);
    let r = push_study(server.push_addr, "s", "u", &slice_files(&phantom(3, SHAPE))).unwrap();
    wait_idle(&server);
    let (_, rows) = http.get("/api/worklist?status=failed");
    assert_eq!(rows[0]["case_id"].as_u64(), Some(r.case_id));
    let (_, jobs) = http.get("/api/jobs");
    assert_eq!(jobs[0]["status"], "failed");
    assert!(jobs[0]["error"].as_str().unwrap().contains("no model is deployed"));
    let (s, job) = http.get(&format!("/api/jobs/{}", r.job_id));
    assert_eq!((s, job["case_id"].as_u64()), (200, Some(r.case_id)));
    assert_eq!(http.get("/api/jobs/999").0, 404);
    let (_, receipts) = http.get("/api/receipts");
    assert_eq!(receipts[0]["case_id"].as_u64(), Some(r.case_id));
}

#[test]
fn bundle_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let reg = seeded_registry(dir.path());
    let server = serve(reg.clone());
    let http = Http::new(&server);

    let (s, body) = http.get("/api/cases/9999/bundle");
    assert_eq!((s, error_code(&body)), (404, "not_found"));
    let p = phantom(4, SHAPE);
    let r = push_study(server.push_addr, "s", "u", &slice_files(&p)).unwrap();
    wait_idle(&server);
    let (s, body) = http.get(&format!("/api/cases/{}/bundle", r.case_id));
    assert_eq!((s, error_code(&body)), (409, "inference_pending"));
    assert_eq!(http.get(&format!("/api/cases/{}/report", r.case_id)).0, 409);

    hemoloop_core::refinement::run_round(&reg, &quick_round()).unwrap();
    let (s, job) = http.post(&format!("/api/cases/{}/infer", r.case_id), &json!({}));
    assert_eq!(s, 202);
    let done = server.state.jobs.wait_for(job["job_id"].as_u64().unwrap(), std::time::Duration::from_secs(60)).unwrap();
    assert_eq!(done.status, hemoloop_service::jobs::JobStatus::Done);

    let (s, text) = http.get_text(&format!("/api/cases/{}/bundle", r.case_id));
    assert_eq!(s, 200);
    let bundle: CaseBundle = serde_json::from_str(&text).unwrap();
    assert_eq!(bundle.shape, SHAPE);
    assert_eq!((bundle.slices.len(), bundle.heatmap.len(), bundle.mask_rle.len()), (3, 3, 3));
    assert!(bundle.slices.iter().chain(&bundle.heatmap).all(|s| s.len() == 256));
    for z in 0..3 {
        for (i, &hu) in p.volume.voxels.slice_z(z).iter().enumerate() {
            assert_eq!(bundle.slices[z][i], window_u8(hu, 0.0, 80.0));
        }
    }
    let result = reg.latest_result(r.case_id).unwrap();
    let (prob, mask) = reg.load_result_maps(&result).unwrap();
    assert_eq!(hemoloop_service::bundle::rle_decode(SHAPE, &bundle.mask_rle).unwrap(), mask);
    assert_eq!(bundle.heatmap[1][5], hemoloop_service::bundle::heat_u8(prob.slice_z(1)[5]));
    assert_eq!(bundle.result_id, result.result_id);

    let (s, report) = http.get(&format!("/api/cases/{}/report", r.case_id));
    assert_eq!(s, 200);
    assert_eq!(report["derived_from"], p.volume.series_uid.as_str());
    assert_eq!(report["disclaimer_text"], hemoloop_core::dicom::DEFAULT_DISCLAIMER);
    let positive = result.is_positive();
    assert_eq!(report["kind"], if positive { "positive_mask_overlay" } else { "negative_marker" });
    assert_eq!(report["overlay_mask_rle"].is_array(), positive);
}

#[test]
fn annotations() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(Arc::new(Registry::open(dir.path()).unwrap()));
    let http = Http::new(&server);
    let r = push_study(server.push_addr, "s", "u", &slice_files(&phantom(5, SHAPE))).unwrap();
    let path = format!("/api/cases/{}/annotations", r.case_id);

    let (s, body) = http.post("/api/cases/777/annotations", &json!({"error_class": "false_positive", "author": "a"}));
    assert_eq!((s, error_code(&body)), (404, "unknown_case"));

    let wrong = json!({"error_class": "boundary_inaccuracy", "author": "a", "corrected_mask_rle": [[[0, 3]], []]});
    let (s, body) = http.post(&path, &wrong);
    assert_eq!((s, error_code(&body)), (422, "shape_mismatch"));
    let outside = json!({"error_class": "boundary_inaccuracy", "author": "a", "corrected_mask_rle": [[[250, 10]], [], []]});
    assert_eq!(http.post(&path, &outside).0, 422);
    let (s, body) = http.post(&path, &json!({"error_class": "boundary_inaccuracy", "author": "a"}));
    assert_eq!((s, error_code(&body)), (422, "missing_corrected_mask"));
    assert!(server.state.registry.annotations_for(r.case_id).is_empty());

    let (s, fp) = http.post(&path, &json!({"error_class": "false_positive", "author": "a", "note": "calcification"}));
    assert_eq!(s, 201);
    assert_eq!(fp["corrected_mask_ref"], Value::Null);
    let fixed = json!({
        "error_class": "boundary_inaccuracy", "author": "b",
        "corrected_mask_rle": [[[17, 3]], [[17, 3], [33, 3]], []],
        "if_latest": fp["annotation_id"],
    });
    let (s, ba) = http.post(&path, &fixed);
    assert_eq!(s, 201);
    let mask = server.state.registry.load_mask(ba["corrected_mask_ref"].as_str().unwrap()).unwrap();
    assert_eq!(mask.count(), 9);
    assert!(*mask.get(1, 1, 0) && *mask.get(1, 2, 1) && !*mask.get(0, 1, 0));

    let (s, body) = http.post(&path, &json!({"error_class": "correct", "author": "c", "if_latest": fp["annotation_id"]}));
    assert_eq!((s, error_code(&body)), (409, "annotation_conflict"));
    let (_, list) = http.get(&path);
    assert_eq!(list.as_array().unwrap().len(), 2);
    let (_, rows) = http.get("/api/worklist");
    assert_eq!(rows[0]["annotation_status"], "annotated");
}

#[test]
fn labels_partitions_models_rounds_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let reg = seeded_registry(dir.path());
    let server = serve(reg.clone());
    let http = Http::new(&server);

    let r = push_study(server.push_addr, "s", "u", &slice_files(&phantom(6, SHAPE))).unwrap();
    let (s, case) = http.post(&format!("/api/cases/{}/label", r.case_id), &json!({"label": "bleed_positive"}));
    assert_eq!((s, case["label"].as_str()), (200, Some("bleed_positive")));
    let (s, body) = http.post(&format!("/api/cases/{}/label", r.case_id), &json!({"label": "bleed_negative"}));
    assert_eq!((s, error_code(&body)), (409, "label_already_set"));

    let (s, p) = http.post("/api/partitions", &json!({"name": "pushed", "role": "train", "case_ids": [r.case_id]}));
    assert_eq!((s, p["frozen"].as_bool()), (201, Some(false)));
    let holdout_member = *reg.partition(HOLDOUT).unwrap().members.iter().next().unwrap();
    let (s, body) = http.post("/api/partitions", &json!({"name": "bad", "role": "train", "case_ids": [holdout_member]}));
    assert_eq!((s, error_code(&body)), (409, "overlap_violation"));
    let (_, parts) = http.get("/api/partitions");
    assert!(parts.as_array().unwrap().iter().any(|p| p["name"] == "pushed"));

    let mut leaky = serde_json::to_value(quick_round()).unwrap();
    leaky["training_partitions"] = json!([PUBLIC_TRAIN, HOLDOUT]);
    let (s, body) = http.post("/api/rounds", &leaky);
    assert_eq!((s, error_code(&body)), (409, "leakage_detected"));
    let (_, round) = http.get("/api/rounds/1");
    assert_eq!(round["status"], "aborted");
    let (s, body) = http.get("/api/reports/1");
    assert_eq!((s, error_code(&body)), (409, "round_aborted"));
    assert_eq!(http.get("/api/models").1, json!([]));

    let mut cfg = serde_json::to_value(quick_round()).unwrap();
    cfg["online_partition"] = json!(ONLINE);
    let (s, round) = http.post("/api/rounds", &cfg);
    assert_eq!(s, 201, "{round}");
    assert_eq!(round["status"], "completed");
    let selected = round["outcome"]["selected"]["version_id"].as_u64().unwrap();
    let (_, models) = http.get("/api/models");
    assert_eq!(models[0]["deployed"], true);
    assert_eq!(models[0]["version_id"].as_u64(), Some(selected));
    let (_, rounds) = http.get("/api/rounds");
    assert_eq!(rounds.as_array().unwrap().len(), 2);

    let (s, report) = http.get("/api/reports/2");
    assert_eq!(s, 200);
    assert_eq!(report["holdout"].as_array().unwrap().len(), 1);
    assert_eq!(report["online"]["partition"], ONLINE);
    let (s, csv) = http.get_text("/api/reports/2?format=csv");
    assert_eq!(s, 200);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(csv.lines().count(), 3);
    let (_, svg) = http.get_text("/api/reports/2?format=svg_roc");
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(http.get("/api/reports/2?format=pdf").0, 400);
    assert_eq!(http.get("/api/reports/9").0, 404);

    let (s, eval) = http.post("/api/evaluations", &json!({"model_version": selected, "partition": HOLDOUT}));
    assert_eq!(s, 200);
    assert_eq!(eval["auc"], report["holdout"][0]["auc"]);
    let (s, body) = http.post("/api/evaluations", &json!({"model_version": 99, "partition": HOLDOUT}));
    assert_eq!((s, error_code(&body)), (404, "unknown_version"));
    let (s, body) = http.post("/api/evaluations", &json!({"model_version": selected, "partition": "nope"}));
    assert_eq!((s, error_code(&body)), (404, "unknown_partition"));

    assert_eq!(http.post("/api/models/99/deploy", &json!({})).0, 404);
    let (s, m) = http.post(&format!("/api/models/{selected}/deploy"), &json!({}));
    assert_eq!((s, m["deployed"].as_bool()), (200, Some(true)));
}
