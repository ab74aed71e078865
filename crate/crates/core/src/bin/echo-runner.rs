//! Minimal external runner used by tests and demos.
//!
//! ```text
//! echo-runner [--mode zeros|constant=<p>|hu-ramp|wrong-count|crash|sleep=<secs>] --in <volume> --out <prob>
//! ```
//!
//! `hu-ramp` maps 0..100 HU linearly onto 0..1 so the runner produces a
//! usable (if crude) bleed map.

use std::fs;
use std::process::ExitCode;
use std::time::Duration;

use hemoloop_core::grid::{RawData, RawFile, Shape};

fn main() -> ExitCode {
    let mut mode = String::from("zeros");
    let mut input = None;
    let mut output = None;
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--mode" => mode = args.next().unwrap_or_default(),
            "--in" => input = args.next(),
            "--out" => output = args.next(),
            other => {
                eprintln!("echo-runner: unexpected argument {other}");
                return ExitCode::from(64);
            }
        }
    }
    let (Some(input), Some(output)) = (input, output) else {
        eprintln!("echo-runner: --in and --out are required");
        return ExitCode::from(64);
    };
    let volume = match fs::read(&input).map_err(|e| e.to_string()).and_then(|b| {
        RawFile::from_bytes(&b).map_err(|e| e.to_string())
    }) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("echo-runner: cannot read {input}: {e}");
            return ExitCode::from(2);
        }
    };

    let hu = volume.data.to_f64();
    let mut shape = volume.shape;
    let probs: Vec<f32> = match mode.split_once('=').unwrap_or((mode.as_str(), "")) {
        ("zeros", _) => vec![0.0; hu.len()],
        ("constant", p) => vec![p.parse().unwrap_or(0.0); hu.len()],
        ("hu-ramp", _) => hu.iter().map(|&h| (h / 100.0).clamp(0.0, 1.0) as f32).collect(),
        ("wrong-count", _) => vec![0.0; hu.len()],
        ("wrong-shape", _) => {
            shape = Shape::new(shape.nx + 1, shape.ny, shape.nz);
            vec![0.0; shape.len()]
        }
        ("crash", _) => {
            eprintln!("echo-runner: simulated crash");
            return ExitCode::from(3);
        }
        ("sleep", secs) => {
            std::thread::sleep(Duration::from_secs_f64(secs.parse().unwrap_or(600.0)));
            vec![0.0; hu.len()]
        }
        _ => {
            eprintln!("echo-runner: unknown mode {mode}");
            return ExitCode::from(64);
        }
    };
    let out = RawFile {
        shape,
        spacing: volume.spacing,
        data: RawData::F32(probs),
    };
    let mut bytes = match out.to_bytes() {
        Ok(b) => b,
        Err(e) => {
            eprintln!("echo-runner: {e}");
            return ExitCode::from(2);
        }
    };
    if mode == "wrong-count" {
        // Header claims the right shape, payload is one voxel short.
        bytes.truncate(bytes.len().saturating_sub(4));
    }
    if let Err(e) = fs::write(&output, bytes) {
        eprintln!("echo-runner: cannot write {output}: {e}");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
