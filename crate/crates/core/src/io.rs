//! Versioned JSON artifacts. Every file is a document
//! `{"schema": <kind>, "version": <n>, "data": ...}`; readers reject other
//! kinds and newer versions. Writes go to a temporary file in the target
//! directory and are renamed into place.

use crate::association::AssociationResult;
use crate::perception::SegmentMask;
use crate::season_map::{MapStats, SeasonMap};
use crate::session::{ScanRecord, Session, SessionError, SessionManifest};
use crate::simulator::{GroundTruth, SessionTruth};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed document: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: expected a '{expected}' document, found '{found}'")]
    WrongKind { path: PathBuf, expected: String, found: String },
    #[error("{path}: schema version {found} is newer than supported version {supported}")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("{path}: {source}")]
    InvalidSession { path: PathBuf, source: SessionError },
}

impl IoError {
    pub fn kind(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "io",
            IoError::Parse { .. } => "parse",
            IoError::WrongKind { .. } => "wrong_kind",
            IoError::UnsupportedVersion { .. } => "unsupported_version",
            IoError::InvalidSession { .. } => "invalid_session",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// A type stored as a top-level artifact.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
    /// Bulk data is written without indentation.
    const PRETTY: bool = true;
}

impl Artifact for SessionManifest {
    const KIND: &'static str = "session_manifest";
}
impl Artifact for Vec<SegmentMask> {
    const KIND: &'static str = "masks";
    const PRETTY: bool = false;
}
impl Artifact for Vec<ScanRecord> {
    const KIND: &'static str = "scans";
    const PRETTY: bool = false;
}
impl Artifact for GroundTruth {
    const KIND: &'static str = "ground_truth";
}
impl Artifact for SessionTruth {
    const KIND: &'static str = "session_truth";
}
impl Artifact for SeasonMap {
    const KIND: &'static str = "season_map";
}
impl Artifact for MapStats {
    const KIND: &'static str = "map_stats";
}
impl Artifact for AssociationResult {
    const KIND: &'static str = "association";
}

#[derive(Serialize)]
struct DocumentRef<'a, T> {
    schema: &'a str,
    version: u32,
    data: &'a T,
}

#[derive(Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

pub fn to_document_string<T: Artifact>(value: &T) -> Result<String, serde_json::Error> {
    let doc = DocumentRef { schema: T::KIND, version: SCHEMA_VERSION, data: value };
    let mut s = if T::PRETTY { serde_json::to_string_pretty(&doc)? } else { serde_json::to_string(&doc)? };
    s.push('\n');
    Ok(s)
}

pub fn from_document_str<T: Artifact>(text: &str, path: &Path) -> Result<T, IoError> {
    let parse = |e: serde_json::Error| IoError::Parse { path: path.to_path_buf(), message: e.to_string() };
    let mut doc: serde_json::Value = serde_json::from_str(text).map_err(parse)?;
    let header: Header = serde_json::from_value(doc.clone()).map_err(parse)?;
    if header.schema != T::KIND {
        return Err(IoError::WrongKind { path: path.to_path_buf(), expected: T::KIND.into(), found: header.schema });
    }
    if header.version > SCHEMA_VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            found: header.version,
            supported: SCHEMA_VERSION,
        });
    }
    let data = doc.get_mut("data").map(serde_json::Value::take).ok_or_else(|| IoError::Parse {
        path: path.to_path_buf(),
        message: "missing field `data`".into(),
    })?;
    serde_json::from_value(data).map_err(parse)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn write_artifact<T: Artifact>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = to_document_string(value)
        .map_err(|e| IoError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, text.as_bytes())
}

pub fn read_artifact<T: Artifact>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    from_document_str(&text, path)
}

/// Writes manifest, masks and scans into `dir`, using the file names the
/// manifest declares.
pub fn save_session(dir: &Path, session: &Session) -> Result<PathBuf, IoError> {
    let m = &session.manifest;
    write_artifact(&dir.join(&m.files.masks), &session.masks)?;
    write_artifact(&dir.join(&m.files.scans), &session.scans)?;
    let manifest = dir.join("manifest.json");
    write_artifact(&manifest, m)?;
    Ok(manifest)
}

/// Loads a session from its manifest; data files resolve relative to the
/// manifest's directory and must exist.
pub fn load_session(manifest_path: &Path) -> Result<Session, IoError> {
    let manifest: SessionManifest = read_artifact(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let masks = read_artifact(&dir.join(&manifest.files.masks))?;
    let scans = read_artifact(&dir.join(&manifest.files.scans))?;
    let session = Session { manifest, masks, scans };
    session
        .validate()
        .map_err(|source| IoError::InvalidSession { path: manifest_path.to_path_buf(), source })?;
    Ok(session)
}
