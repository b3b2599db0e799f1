//! Instance sets on disk and in memory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bbmdp_core::gen::{self, Family, FamilySpec, GenError};
use bbmdp_core::milp::{self, MilpError, MilpInstance};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Instance { path: PathBuf, source: MilpError },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("{path}: content hash mismatch")]
    HashMismatch { path: PathBuf },
}

pub fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.into(), source })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File { path: dir.into(), source })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::File { path: path.into(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_slice(&read(path)?).map_err(|e| IoError::Json {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// An instance with the label and family used in reports.
#[derive(Debug, Clone)]
pub struct NamedInstance {
    pub name: String,
    pub family: String,
    pub instance: Arc<MilpInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub spec: FamilySpec,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub instances: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Instances of `family` for consecutive seeds from `first_seed`.
pub fn generate_set(family: Family, first_seed: u64, count: usize) -> Result<Vec<NamedInstance>, IoError> {
    (0..count as u64)
        .map(|i| {
            let spec = FamilySpec::new(family, first_seed + i);
            Ok(NamedInstance {
                name: spec.name(),
                family: family.kind().to_string(),
                instance: Arc::new(gen::generate(&spec)?),
            })
        })
        .collect()
}

/// Writes one JSON file per spec plus a manifest with content hashes.
pub fn write_set(dir: &Path, specs: &[FamilySpec]) -> Result<Manifest, IoError> {
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let bytes = milp::serialize_instance(&gen::generate(spec)?);
        let file = format!("{}.json", spec.name());
        write(&dir.join(&file), &bytes)?;
        entries.push(ManifestEntry {
            file,
            spec: *spec,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest { instances: entries };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_instance(path: &Path) -> Result<MilpInstance, IoError> {
    milp::parse_instance(&read(path)?).map_err(|source| IoError::Instance { path: path.into(), source })
}

/// Loads a directory written by [`write_set`], checking hashes. Without a
/// manifest every `*.json` file is loaded in name order with family
/// "unknown".
pub fn load_set(dir: &Path) -> Result<Vec<NamedInstance>, IoError> {
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        let manifest: Manifest = read_json(&manifest_path)?;
        return manifest
            .instances
            .iter()
            .map(|e| {
                let path = dir.join(&e.file);
                let bytes = read(&path)?;
                if sha256_hex(&bytes) != e.sha256 {
                    return Err(IoError::HashMismatch { path });
                }
                let instance = milp::parse_instance(&bytes).map_err(|source| IoError::Instance { path, source })?;
                Ok(NamedInstance {
                    name: e.spec.name(),
                    family: e.spec.family.kind().to_string(),
                    instance: Arc::new(instance),
                })
            })
            .collect();
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| IoError::File { path: dir.into(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let instance = load_instance(p)?;
            Ok(NamedInstance {
                name: instance.name.clone(),
                family: "unknown".into(),
                instance: Arc::new(instance),
            })
        })
        .collect()
}
