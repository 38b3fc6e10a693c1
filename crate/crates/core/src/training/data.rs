//! Patch sources and the access guard that keeps held-out subjects out of
//! optimisation.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{PatchCache, PatchMeta};
use crate::splits::{FoldPlan, SplitRole};

/// Why a subject's patches are being read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessPurpose {
    /// Gradient steps.
    Train,
    /// Early-stopping loss.
    Validate,
    /// Scoring a trained model.
    Predict,
}

impl std::fmt::Display for AccessPurpose {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AccessPurpose::Train => "train",
            AccessPurpose::Validate => "validate",
            AccessPurpose::Predict => "predict",
        })
    }
}

pub trait PatchSource: Sync {
    /// Provenance and a (N, 3, side, side) tensor for one subject.
    fn load(&self, subject_id: &str, purpose: AccessPurpose) -> Result<(Vec<PatchMeta>, Tensor)>;
}

impl PatchSource for PatchCache {
    fn load(&self, subject_id: &str, _purpose: AccessPurpose) -> Result<(Vec<PatchMeta>, Tensor)> {
        self.load_subject(subject_id)
    }
}

/// Patches held in memory, keyed by subject.
#[derive(Default)]
pub struct InMemoryPatches {
    subjects: BTreeMap<String, (Vec<PatchMeta>, Tensor)>,
}

impl InMemoryPatches {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, subject_id: impl Into<String>, metas: Vec<PatchMeta>, patches: Tensor) {
        self.subjects.insert(subject_id.into(), (metas, patches));
    }
}

impl PatchSource for InMemoryPatches {
    fn load(&self, subject_id: &str, _purpose: AccessPurpose) -> Result<(Vec<PatchMeta>, Tensor)> {
        self.subjects
            .get(subject_id)
            .cloned()
            .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub subject_id: String,
    pub purpose: AccessPurpose,
    pub role: Option<SplitRole>,
}

/// Wraps a source and refuses any read that would let a subject outside
/// the fold's train set influence training: `Train` reads must be train
/// subjects, `Validate` reads validation subjects. Every attempt is logged.
pub struct GuardedSource<'a, S: ?Sized> {
    inner: &'a S,
    fold: &'a FoldPlan,
    log: Mutex<Vec<AccessRecord>>,
}

impl<'a, S: PatchSource + ?Sized> GuardedSource<'a, S> {
    pub fn new(inner: &'a S, fold: &'a FoldPlan) -> Self {
        Self { inner, fold, log: Mutex::new(Vec::new()) }
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("access log poisoned").clone()
    }
}

impl<S: PatchSource + ?Sized> PatchSource for GuardedSource<'_, S> {
    fn load(&self, subject_id: &str, purpose: AccessPurpose) -> Result<(Vec<PatchMeta>, Tensor)> {
        let role = self.fold.role_of(subject_id);
        self.log.lock().expect("access log poisoned").push(AccessRecord {
            subject_id: subject_id.to_string(),
            purpose,
            role,
        });
        let allowed = match purpose {
            AccessPurpose::Train => role == Some(SplitRole::Train),
            AccessPurpose::Validate => role == Some(SplitRole::Validation),
            AccessPurpose::Predict => true,
        };
        if !allowed {
            return Err(Error::Leakage {
                subject_id: subject_id.to_string(),
                purpose: purpose.to_string(),
                held_out: role.map(|r| r.to_string()).unwrap_or_else(|| "unassigned".into()),
            });
        }
        self.inner.load(subject_id, purpose)
    }
}

/// Write an access log as CSV (subject_id, purpose, role).
pub fn write_access_log(path: &std::path::Path, log: &[AccessRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "purpose", "role"])?;
    for r in log {
        let role = r.role.map(|r| r.to_string()).unwrap_or_default();
        w.write_record([r.subject_id.as_str(), &r.purpose.to_string(), &role])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ClassLabel;
    use crate::preprocess::Plane;
    use candle_core::{DType, Device};

    fn fold() -> FoldPlan {
        FoldPlan {
            fold_index: 0,
            train_ids: ["a".to_string()].into(),
            val_ids: ["b".to_string()].into(),
            test_ids: ["c".to_string()].into(),
        }
    }

    fn source() -> InMemoryPatches {
        let mut s = InMemoryPatches::new();
        for id in ["a", "b", "c"] {
            let meta = PatchMeta { subject_id: id.into(), plane: Plane::Axial, slice_index: 0, label: ClassLabel::Mild };
            s.insert(id, vec![meta], Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap());
        }
        s
    }

    #[test]
    fn guard_blocks_held_out_reads() {
        let (src, fold) = (source(), fold());
        let guard = GuardedSource::new(&src, &fold);
        assert!(guard.load("a", AccessPurpose::Train).is_ok());
        assert!(guard.load("b", AccessPurpose::Validate).is_ok());
        assert!(matches!(guard.load("c", AccessPurpose::Train), Err(Error::Leakage { .. })));
        assert!(matches!(guard.load("b", AccessPurpose::Train), Err(Error::Leakage { .. })));
        assert!(matches!(guard.load("c", AccessPurpose::Validate), Err(Error::Leakage { .. })));
        assert!(guard.load("c", AccessPurpose::Predict).is_ok());
        let log = guard.access_log();
        assert_eq!(log.len(), 6);
        assert_eq!(log[2].role, Some(SplitRole::Test));
    }
}
