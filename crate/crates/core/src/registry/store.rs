//! On-disk layout.
//!
//! ```text
//! data_dir/
//!   events.log        u32 LE length + JSON EventRecord, repeated
//!   snapshots/        snapshot-<seq>.json (full RegistryState)
//!   volumes/          <sha256>.raw  (f64 HU payload)
//!   masks/            <sha256>.raw  (u8 masks, f32 probability maps)
//!   models/           <sha256>.json (ModelArtifact)
//!   rounds/<id>/      round artifacts
//! ```
//!
//! Blobs are content-addressed by the SHA-256 of their bytes and verified
//! on every read.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::state::{EventRecord, RegistryState};
use super::RegistryError;

pub const EVENTS_FILE: &str = "events.log";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const VOLUME_DIR: &str = "volumes";
pub const MASK_DIR: &str = "masks";
pub const MODEL_DIR: &str = "models";
pub const ROUND_DIR: &str = "rounds";

/// Refuse records larger than this when reading the log.
const MAX_RECORD_LEN: usize = 512 * 1024 * 1024;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn ensure_layout(root: &Path) -> io::Result<()> {
    for d in [SNAPSHOT_DIR, VOLUME_DIR, MASK_DIR, MODEL_DIR, ROUND_DIR] {
        fs::create_dir_all(root.join(d))?;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Store `bytes` under `dir/<sha>.<ext>` and return the relative reference.
pub fn put_blob(root: &Path, dir: &str, ext: &str, bytes: &[u8]) -> io::Result<(String, String)> {
    let digest = sha256_hex(bytes);
    let rel = format!("{dir}/{digest}.{ext}");
    let path = root.join(&rel);
    if !path.exists() {
        write_atomic(&path, bytes)?;
    }
    Ok((rel, digest))
}

/// Read a blob and check it still hashes to its recorded digest.
pub fn get_blob(root: &Path, rel: &str, digest: &str) -> Result<Vec<u8>, RegistryError> {
    let bytes = fs::read(root.join(rel))?;
    let actual = sha256_hex(&bytes);
    if actual != digest {
        return Err(RegistryError::IntegrityFailure {
            blob: rel.to_string(),
            expected: digest.to_string(),
            actual,
        });
    }
    Ok(bytes)
}

/// Digest encoded in a `dir/<sha>.<ext>` reference.
pub fn digest_of_ref(rel: &str) -> &str {
    let name = rel.rsplit('/').next().unwrap_or(rel);
    name.split('.').next().unwrap_or(name)
}

pub fn encode_record(record: &EventRecord) -> Result<Vec<u8>, RegistryError> {
    let json = serde_json::to_vec(record)?;
    let mut out = Vec::with_capacity(json.len() + 4);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub struct LogWriter {
    file: File,
}

impl LogWriter {
    pub fn open(root: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(root.join(EVENTS_FILE))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, records: &[EventRecord]) -> Result<(), RegistryError> {
        let mut buf = Vec::new();
        for r in records {
            buf.extend_from_slice(&encode_record(r)?);
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        Ok(())
    }
}

pub struct LogContents {
    pub records: Vec<EventRecord>,
    /// Byte length of the well-formed prefix.
    pub valid_len: u64,
    pub torn_tail: bool,
}

/// Read every complete record. A partial or unparsable final record is a
/// torn write and is reported, not returned; damage before the tail is an
/// error.
pub fn read_log(path: &Path) -> Result<LogContents, RegistryError> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    let mut records: Vec<EventRecord> = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if len > MAX_RECORD_LEN || bytes.len() - pos - 4 < len {
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        match serde_json::from_slice::<EventRecord>(body) {
            Ok(r) => {
                let expected = records.last().map_or(1, |p| p.seq + 1);
                if r.seq != expected {
                    return Err(RegistryError::CorruptLog(format!(
                        "sequence {} follows {}",
                        r.seq,
                        expected - 1
                    )));
                }
                records.push(r);
                pos += 4 + len;
            }
            Err(e) if pos + 4 + len == bytes.len() => {
                tracing::warn!("discarding unparsable final log record: {e}");
                break;
            }
            Err(e) => {
                return Err(RegistryError::CorruptLog(format!("record at byte {pos}: {e}")));
            }
        }
    }
    Ok(LogContents {
        torn_tail: pos < bytes.len(),
        valid_len: pos as u64,
        records,
    })
}

pub fn truncate_log(path: &Path, len: u64) -> io::Result<()> {
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(len)?;
    f.sync_all()
}

fn snapshot_path(root: &Path, seq: u64) -> PathBuf {
    root.join(SNAPSHOT_DIR).join(format!("snapshot-{seq:020}.json"))
}

pub fn write_snapshot(root: &Path, state: &RegistryState, keep: usize) -> Result<(), RegistryError> {
    let bytes = serde_json::to_vec(state)?;
    write_atomic(&snapshot_path(root, state.seq), &bytes)?;
    let mut existing = list_snapshots(root)?;
    while existing.len() > keep.max(1) {
        let (_, oldest) = existing.remove(0);
        let _ = fs::remove_file(oldest);
    }
    Ok(())
}

fn list_snapshots(root: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let dir = root.join(SNAPSHOT_DIR);
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let seq = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("snapshot-"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(seq) = seq {
            out.push((seq, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Newest snapshot that parses and is not ahead of the log.
pub fn latest_snapshot(root: &Path, max_seq: u64) -> Result<Option<RegistryState>, RegistryError> {
    for (seq, path) in list_snapshots(root)?.into_iter().rev() {
        if seq > max_seq {
            continue;
        }
        match fs::read(&path).map_err(RegistryError::from).and_then(|b| {
            serde_json::from_slice::<RegistryState>(&b).map_err(RegistryError::from)
        }) {
            Ok(state) if state.seq == seq => return Ok(Some(state)),
            Ok(_) | Err(_) => tracing::warn!("ignoring unreadable snapshot {}", path.display()),
        }
    }
    Ok(None)
}
