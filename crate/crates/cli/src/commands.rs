use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hemoloop_core::dicom::parse_slice;
use hemoloop_core::metrics::{export_bars_svg, export_csv, export_roc_svg, EvaluationReport, ExportFormat};
use hemoloop_core::refinement::campaign::{run_campaign, CampaignConfig};
use hemoloop_core::refinement::{RoundConfig, RoundError};
use hemoloop_core::registry::{PartitionRole, Registry, EVENTS_FILE};
use hemoloop_service::push_study;
use serde_json::{json, Value};

use crate::http::{Api, ApiFailure};
use crate::{Cli, CliError, Command, DemoArgs, PartitionCommand};

fn emit(v: &Value) {
    println!("{v}");
}

fn api(cli: &Cli) -> Result<Api, CliError> {
    if !(cli.server.starts_with("http://") || cli.server.starts_with("https://")) {
        return Err(CliError::Usage(format!("--server must be an http(s) URL, got {:?}", cli.server)));
    }
    Ok(Api::new(&cli.server, cli.token.clone()))
}

fn lookup(e: ApiFailure) -> CliError {
    CliError::Lookup(e.to_string())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Push { paths, site, user } => push(cli, paths, site, user),
        Command::Worklist {
            status,
            partition,
            site,
            limit,
        } => {
            let api = api(cli)?;
            let mut query = Vec::new();
            for (k, v) in [("status", status), ("partition", partition), ("site", site)] {
                if let Some(v) = v {
                    query.push(format!("{k}={}", encode(v)));
                }
            }
            if let Some(n) = limit {
                query.push(format!("limit={n}"));
            }
            let rows = api.get(&format!("/api/worklist?{}", query.join("&"))).map_err(lookup)?;
            rows.as_array().into_iter().flatten().for_each(emit);
            Ok(())
        }
        Command::Evaluate { models, partition } => evaluate(cli, models, partition),
        Command::Round { config } => round(cli, config),
        Command::Deploy { version } => {
            let m = api(cli)?
                .post(&format!("/api/models/{version}/deploy"), &json!({}))
                .map_err(lookup)?;
            emit(&json!({"version_id": m["version_id"], "name": m["name"], "deployed": m["deployed"]}));
            Ok(())
        }
        Command::Partition(PartitionCommand::Create {
            name,
            role,
            cases,
            frozen,
        }) => {
            let role: PartitionRole = role
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown partition role {role:?}")))?;
            let body = json!({"name": name, "role": role, "case_ids": cases, "frozen": frozen});
            let p = api(cli)?.post("/api/partitions", &body).map_err(lookup)?;
            emit(&partition_row(&p));
            Ok(())
        }
        Command::Partition(PartitionCommand::List) => {
            let parts = api(cli)?.get("/api/partitions").map_err(lookup)?;
            parts.as_array().into_iter().flatten().for_each(|p| emit(&partition_row(p)));
            Ok(())
        }
        Command::Demo(args) => demo(cli, args),
    }
}

fn partition_row(p: &Value) -> Value {
    json!({
        "name": p["name"],
        "role": p["role"],
        "frozen": p["frozen"],
        "size": p["members"].as_array().map_or(0, Vec::len),
        "members": p["members"],
    })
}

fn encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

// ----- push -----

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Sessions keyed by study uid, in path order. A file that does not parse
/// joins every study from its own directory, so those sessions abort; with
/// no such study it is pushed on its own.
pub fn group_studies(files: Vec<(PathBuf, Vec<u8>)>) -> Vec<(String, Vec<Vec<u8>>)> {
    let mut studies: BTreeMap<String, (usize, Vec<(PathBuf, Vec<u8>)>)> = BTreeMap::new();
    let mut unparsed = Vec::new();
    for (i, (path, bytes)) in files.into_iter().enumerate() {
        match parse_slice(&bytes) {
            Ok(s) => studies.entry(s.study_uid).or_insert_with(|| (i, Vec::new())).1.push((path, bytes)),
            Err(_) => unparsed.push((i, path, bytes)),
        }
    }
    for (i, path, bytes) in unparsed {
        let dir = path.parent().map(Path::to_path_buf);
        let mut joined = false;
        for (_, files) in studies.values_mut() {
            if files.iter().any(|(p, _)| p.parent().map(Path::to_path_buf) == dir) {
                files.push((path.clone(), bytes.clone()));
                joined = true;
            }
        }
        if !joined {
            studies.insert(format!("unparsed:{}", path.display()), (i, vec![(path, bytes)]));
        }
    }
    let mut sessions: Vec<(usize, String, Vec<(PathBuf, Vec<u8>)>)> =
        studies.into_iter().map(|(uid, (first, files))| (first, uid, files)).collect();
    sessions.sort_by_key(|s| s.0);
    sessions
        .into_iter()
        .map(|(_, uid, mut files)| {
            files.sort_by(|a, b| a.0.cmp(&b.0));
            (uid, files.into_iter().map(|f| f.1).collect())
        })
        .collect()
}

fn push(cli: &Cli, paths: &[PathBuf], site: &str, user: &str) -> Result<(), CliError> {
    if site.trim().is_empty() {
        return Err(CliError::Usage("--site must not be empty".into()));
    }
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(CliError::Usage(format!("no such file or directory: {}", p.display())));
        }
        collect_files(p, &mut files).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    }
    let mut loaded = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(&f).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
        loaded.push((f, bytes));
    }
    if loaded.is_empty() {
        return Err(CliError::Usage("no files to push".into()));
    }
    let mut failed = Vec::new();
    for (uid, session) in group_studies(loaded) {
        eprintln!("pushing {uid}: {} files", session.len());
        match push_study(cli.push, site, user, &session) {
            Ok(receipt) => emit(&serde_json::to_value(&receipt).expect("receipt serializes")),
            Err(e) => {
                eprintln!("session for {uid} aborted: {e}");
                failed.push(uid);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Push(format!("{} session(s) aborted", failed.len())))
    }
}

// ----- evaluate -----

fn metric_row(r: &EvaluationReport) -> Value {
    json!({
        "model": r.model, "partition": r.partition, "dice": r.dice, "sens": r.sens, "spec": r.spec,
        "auc": r.auc, "accu": r.accu, "preci": r.preci, "f1": r.f1,
    })
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn evaluate(cli: &Cli, models: &[u64], partition: &str) -> Result<(), CliError> {
    let api = api(cli)?;
    let mut reports = Vec::new();
    for &m in models {
        let v = api
            .post("/api/evaluations", &json!({"model_version": m, "partition": partition}))
            .map_err(lookup)?;
        let r: EvaluationReport = serde_json::from_value(v).map_err(|e| CliError::Lookup(format!("bad report: {e}")))?;
        reports.push(r);
    }
    let csv = export_csv(&reports).map_err(|e| CliError::Lookup(e.to_string()))?;
    for (fmt, body) in [
        (ExportFormat::Csv, csv),
        (ExportFormat::SvgRoc, export_roc_svg(&reports)),
        (ExportFormat::SvgBars, export_bars_svg(&reports)),
    ] {
        let path = write_out(&cli.out, fmt.file_name(), &body)?;
        eprintln!("wrote {}", path.display());
    }
    reports.iter().map(metric_row).for_each(|r| emit(&r));
    Ok(())
}

// ----- rounds -----

fn round_summary(outcome: &Value) -> Value {
    let pick = |r: &Value| {
        if r.is_null() {
            Value::Null
        } else {
            json!({"auc": r["auc"], "sens": r["sens"], "spec": r["spec"], "f1": r["f1"], "dice": r["dice"]})
        }
    };
    json!({
        "round_id": outcome["round_id"],
        "status": "completed",
        "selected_version": outcome["selected"]["version_id"],
        "selected_name": outcome["selected"]["name"],
        "corpus_size": outcome["corpus"]["entries"].as_array().map_or(0, Vec::len),
        "candidates": outcome["candidates"].as_array().into_iter().flatten().map(|c| json!({
            "name": c["model"]["name"], "version_id": c["model"]["version_id"], "metric": c["metric"],
        })).collect::<Vec<_>>(),
        "holdout": pick(&outcome["selected"]["holdout_metrics"]),
        "online": pick(&outcome["online"]),
    })
}

fn round(cli: &Cli, config: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::Usage(format!("{}: {e}", config.display())))?;
    let mut cfg: RoundConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", config.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let api = api(cli)?;
    eprintln!(
        "round: training on {:?}, {} candidate(s), scoring on {}",
        cfg.training_partitions,
        cfg.candidates.len(),
        cfg.holdout_partition
    );
    let body = serde_json::to_value(&cfg).expect("round config serializes");
    let record = api.post("/api/rounds", &body).map_err(|e| CliError::RoundAborted(e.to_string()))?;
    emit(&round_summary(&record["outcome"]));
    Ok(())
}

// ----- demo -----

fn demo(cli: &Cli, args: &DemoArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<CampaignConfig>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => CampaignConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let root = cli.out.join("registry");
    if root.join(EVENTS_FILE).exists() {
        return Err(CliError::Usage(format!("{} already holds a registry", root.display())));
    }
    let registry = Registry::open(&root).map_err(|e| CliError::RoundAborted(e.to_string()))?;
    eprintln!("demo campaign, seed {}, registry {}", cfg.seed, root.display());
    let report = run_campaign(&registry, &cfg, &mut |line| eprintln!("{line}")).map_err(|e| match e {
        RoundError::LeakageDetected(ids) => CliError::RoundAborted(format!("leakage detected: {ids:?}")),
        other => CliError::RoundAborted(other.to_string()),
    })?;
    for r in &report.rounds {
        emit(&round_summary(&serde_json::to_value(r).expect("outcome serializes")));
    }
    let holdout: Vec<EvaluationReport> = report.rounds.iter().map(|r| r.selected_holdout().clone()).collect();
    let online: Vec<EvaluationReport> = report.rounds.iter().filter_map(|r| r.online.clone()).collect();
    let err = |e: hemoloop_core::metrics::MetricsError| CliError::RoundAborted(e.to_string());
    for (name, body) in [
        ("holdout.csv", export_csv(&holdout).map_err(err)?),
        ("holdout_roc.svg", export_roc_svg(&holdout)),
        ("holdout_bars.svg", export_bars_svg(&holdout)),
        ("online.csv", export_csv(&online).map_err(err)?),
        ("online_roc.svg", export_roc_svg(&online)),
        ("online_bars.svg", export_bars_svg(&online)),
        ("campaign.json", serde_json::to_string_pretty(&report).expect("report serializes")),
    ] {
        let path = write_out(&cli.out, name, &body)?;
        eprintln!("wrote {}", path.display());
    }
    let summary = json!({
        "seed": cfg.seed,
        "holdout_auc": report.holdout_auc,
        "online_sens": report.online_sens,
        "corpus_sizes": report.corpus_sizes,
        "feedback_annotations": report.feedback_annotations,
        "auc_strictly_increasing": report.auc_strictly_increasing(),
        "online_sens_gain": report.online_sens_gain(),
        "leakage_violations": report.leakage_violations,
    });
    emit(&summary);
    if !report.leakage_violations.is_empty() {
        return Err(CliError::RoundAborted(format!("leakage in models {:?}", report.leakage_violations)));
    }
    Ok(())
}
