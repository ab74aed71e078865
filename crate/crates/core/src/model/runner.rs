//! Out-of-process model contract.
//!
//! The runner is invoked as `<program> [args...] --in <volume> --out <prob>`.
//! Both files use the raw header+payload layout from [`crate::grid`] with an
//! f32 payload: HU values in, probabilities out. Exit code 0 means success.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::ModelError;
use crate::dicom::VolumeImage;
use crate::grid::{ProbMap, RawData, RawFile};

pub const DEFAULT_RUNNER_TIMEOUT_SECS: f64 = 300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunnerDescriptor {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    DEFAULT_RUNNER_TIMEOUT_SECS
}

impl RunnerDescriptor {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            timeout_secs: DEFAULT_RUNNER_TIMEOUT_SECS,
        }
    }
}

pub fn volume_to_runner_file(volume: &VolumeImage) -> RawFile {
    RawFile {
        shape: volume.shape(),
        spacing: volume.spacing,
        data: RawData::F32(volume.voxels.as_slice().iter().map(|&v| v as f32).collect()),
    }
}

pub fn run_external(descriptor: &RunnerDescriptor, volume: &VolumeImage) -> Result<ProbMap, ModelError> {
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("volume.raw");
    let output = dir.path().join("prob.raw");
    fs::write(&input, volume_to_runner_file(volume).to_bytes()?)?;

    let mut child = Command::new(&descriptor.program)
        .args(&descriptor.args)
        .arg("--in")
        .arg(&input)
        .arg("--out")
        .arg(&output)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ModelError::RunnerCrash {
            code: None,
            stderr: format!("failed to start {}: {e}", descriptor.program.display()),
        })?;

    let timeout = Duration::from_secs_f64(descriptor.timeout_secs.max(0.0));
    let status = match child.wait_timeout(timeout)? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ModelError::RunnerTimeout(descriptor.timeout_secs));
        }
    };
    if !status.success() {
        let mut stderr = String::new();
        if let Some(mut err) = child.stderr.take() {
            use std::io::Read;
            let _ = err.read_to_string(&mut stderr);
        }
        return Err(ModelError::RunnerCrash {
            code: status.code(),
            stderr,
        });
    }

    let bytes = fs::read(&output).map_err(|e| ModelError::RunnerCrash {
        code: Some(0),
        stderr: format!("runner produced no output file: {e}"),
    })?;
    let file = RawFile::from_bytes(&bytes).map_err(|e| match e {
        crate::grid::GridError::Truncated { expected, found } => ModelError::ShapeMismatch(format!(
            "runner payload holds {found} bytes, header implies {expected}"
        )),
        other => other.into(),
    })?;
    if file.shape != volume.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "runner returned {}, volume is {}",
            file.shape,
            volume.shape()
        )));
    }
    let map = file.into_prob_map()?;
    if map.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ModelError::RunnerCrash {
            code: Some(0),
            stderr: "runner emitted values outside [0, 1]".into(),
        });
    }
    Ok(map)
}
