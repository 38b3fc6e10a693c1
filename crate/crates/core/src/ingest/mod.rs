//! Cohort metadata, clinical staging labels and MRI volume loading.
//!
//! Metadata is a flat UTF-8 CSV with one row per scan:
//!
//! ```text
//! subject_id,age,cdr,scan_path
//! OAS1_0001,74,0,disc1/OAS1_0001_MR1/mpr-1.hdr
//! OAS1_0001,74,0,disc1/OAS1_0001_MR1/mpr-2.hdr
//! ```
//!
//! `cdr` may be left empty for subjects without a clinical rating. Relative
//! scan paths are resolved against the directory holding the CSV.

mod synthetic;
mod volume_io;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_cohort, label_counts_for, write_cohort, SyntheticCohortSpec};
pub use volume_io::{read_voxels, write_analyze, write_nifti, VolumeFormat};

/// Number of disease stages scored by every model head.
pub const NUM_CLASSES: usize = 4;

/// Disease stage. The discriminant is the index used in every
/// `NUM_CLASSES`-length vector throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Nondemented = 0,
    VeryMild = 1,
    Mild = 2,
    Moderate = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Nondemented,
        ClassLabel::VeryMild,
        ClassLabel::Mild,
        ClassLabel::Moderate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Row label used in rendered metric tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassLabel::Nondemented => "non-demented",
            ClassLabel::VeryMild => "very mild",
            ClassLabel::Mild => "mild",
            ClassLabel::Moderate => "moderate",
        }
    }

    fn key(self) -> &'static str {
        match self {
            ClassLabel::Nondemented => "nondemented",
            ClassLabel::VeryMild => "very_mild",
            ClassLabel::Mild => "mild",
            ClassLabel::Moderate => "moderate",
        }
    }

    /// The clinical dementia rating this stage corresponds to.
    pub fn cdr(self) -> f64 {
        match self {
            ClassLabel::Nondemented => 0.0,
            ClassLabel::VeryMild => 0.5,
            ClassLabel::Mild => 1.0,
            ClassLabel::Moderate => 2.0,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if let Ok(i) = s.parse::<usize>() {
            return ClassLabel::from_index(i).ok_or_else(|| format!("class index {i} out of range"));
        }
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.key() == s)
            .ok_or_else(|| format!("unknown class label {s:?}"))
    }
}

/// Map a clinical dementia rating onto a disease stage.
pub fn cdr_to_class(cdr: f64) -> Result<ClassLabel> {
    ClassLabel::ALL
        .into_iter()
        .find(|c| c.cdr() == cdr)
        .ok_or(Error::UnknownRating(cdr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: u32,
    pub cdr: Option<f64>,
    pub scan_paths: Vec<PathBuf>,
}

impl SubjectRecord {
    /// Stage label, if the subject has a rating.
    pub fn label(&self) -> Option<ClassLabel> {
        self.cdr.and_then(|c| cdr_to_class(c).ok())
    }
}

#[derive(Debug, Deserialize)]
struct MetadataRow {
    subject_id: String,
    age: String,
    cdr: String,
    scan_path: String,
}

/// Read a metadata CSV, grouping scan rows by subject in order of first
/// appearance.
pub fn load_metadata(path: &Path) -> Result<Vec<SubjectRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;

    let mut order: Vec<String> = Vec::new();
    let mut records: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    let mut seen_paths = HashSet::new();

    let headers = reader.headers()?.clone();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| Error::MalformedRow { line, reason };
        let row: MetadataRow = record.deserialize(Some(&headers)).map_err(|e| malformed(e.to_string()))?;

        if row.subject_id.is_empty() {
            return Err(malformed("empty subject_id".into()));
        }
        let age: u32 = row
            .age
            .parse()
            .map_err(|_| malformed(format!("age {:?} is not a non-negative integer", row.age)))?;
        let cdr = if row.cdr.is_empty() {
            None
        } else {
            let value: f64 = row
                .cdr
                .parse()
                .map_err(|_| malformed(format!("cdr {:?} is not a number", row.cdr)))?;
            cdr_to_class(value).map_err(|_| malformed(format!("cdr {value} is not one of 0, 0.5, 1, 2")))?;
            Some(value)
        };
        if row.scan_path.is_empty() {
            return Err(malformed("empty scan_path".into()));
        }
        let scan = {
            let p = PathBuf::from(&row.scan_path);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        if !seen_paths.insert(scan.clone()) {
            return Err(Error::DuplicateScanPath(scan));
        }

        match records.get_mut(&row.subject_id) {
            Some(existing) => {
                if existing.age != age || existing.cdr != cdr {
                    return Err(malformed(format!(
                        "subject {} has conflicting age/cdr across rows",
                        row.subject_id
                    )));
                }
                existing.scan_paths.push(scan);
            }
            None => {
                order.push(row.subject_id.clone());
                records.insert(
                    row.subject_id.clone(),
                    SubjectRecord { subject_id: row.subject_id, age, cdr, scan_paths: vec![scan] },
                );
            }
        }
    }

    Ok(order
        .into_iter()
        .map(|id| records.remove(&id).expect("grouped subject"))
        .collect())
}

/// Write records back out in the metadata CSV layout, one row per scan.
pub fn write_metadata(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["subject_id", "age", "cdr", "scan_path"])?;
    for r in records {
        let cdr = r.cdr.map(|c| c.to_string()).unwrap_or_default();
        for scan in &r.scan_paths {
            writer.write_record([
                r.subject_id.as_str(),
                &r.age.to_string(),
                &cdr,
                &scan.to_string_lossy(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// A single structural scan with its subject and stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MriVolume {
    pub voxels: Array3<f32>,
    pub subject_id: String,
    pub label: ClassLabel,
}

impl MriVolume {
    pub fn new(voxels: Array3<f32>, subject_id: impl Into<String>, label: ClassLabel) -> Result<Self> {
        if voxels.shape().iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("volume has an empty axis: {:?}", voxels.shape())));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("volume voxels".into()));
        }
        Ok(Self { voxels, subject_id: subject_id.into(), label })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

/// Load a scan from disk and attach its subject metadata.
pub fn load_volume(path: &Path, subject_id: &str, label: ClassLabel) -> Result<MriVolume> {
    MriVolume::new(read_voxels(path)?, subject_id, label)
}
