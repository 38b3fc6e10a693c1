//! Stage manifests: what was read, what was written, and the fingerprint
//! that decides whether a stage can be skipped.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub created: String,
    pub fingerprint: String,
    pub command: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    /// Relative to the manifest's directory.
    pub outputs: Vec<PathBuf>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn hash_inputs(paths: &[PathBuf]) -> std::io::Result<Vec<FileHash>> {
    paths.iter().map(|p| Ok(FileHash { path: p.clone(), sha256: sha256_file(p)? })).collect()
}

/// Hash of the compact JSON form of `value`.
pub fn fingerprint(value: &serde_json::Value) -> String {
    format!("{:x}", Sha256::digest(value.to_string().as_bytes()))
}

/// Seed for one model on one fold, derived from the master seed.
pub fn derive_seed(master: u64, model_id: &str, fold: usize) -> u64 {
    let digest = Sha256::digest(format!("{master}:{model_id}:{fold}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn read_manifest(dir: &Path) -> Option<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// True when `dir` holds a manifest with this fingerprint whose outputs all
/// still exist.
pub fn up_to_date(dir: &Path, fingerprint: &str) -> bool {
    read_manifest(dir).is_some_and(|m| m.fingerprint == fingerprint && m.outputs.iter().all(|o| dir.join(o).exists()))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn seeds_differ_by_model_and_fold() {
        let a = derive_seed(7, "densenet121", 0);
        assert_eq!(a, derive_seed(7, "densenet121", 0));
        assert_ne!(a, derive_seed(7, "densenet121", 1));
        assert_ne!(a, derive_seed(7, "densenet161", 0));
        assert_ne!(a, derive_seed(8, "densenet121", 0));
    }

    #[test]
    fn staleness() {
        let dir = tempfile::tempdir().unwrap();
        assert!(!up_to_date(dir.path(), "x"));
        let m = Manifest {
            stage: "s".into(),
            tool_version: "0".into(),
            created: "now".into(),
            fingerprint: "x".into(),
            command: vec![],
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: vec![],
            outputs: vec!["out.txt".into()],
            details: serde_json::Value::Null,
        };
        write_manifest(dir.path(), &m).unwrap();
        assert!(!up_to_date(dir.path(), "x"));
        std::fs::write(dir.path().join("out.txt"), "").unwrap();
        assert!(up_to_date(dir.path(), "x"));
        assert!(!up_to_date(dir.path(), "y"));
    }
}
