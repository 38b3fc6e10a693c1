//! On-disk patch cache: one safetensors file per subject holding a
//! `patches` tensor of shape (N, 3, side, side), indexed by `manifest.csv`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{PatchMeta, Plane};
use crate::error::{Error, Result};
use crate::ingest::ClassLabel;

pub const MANIFEST_FILE: &str = "manifest.csv";
const TENSOR_NAME: &str = "patches";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCacheEntry {
    pub subject_id: String,
    pub plane: Plane,
    pub slice_index: usize,
    pub label: ClassLabel,
    pub file: String,
    pub row: usize,
}

impl PatchCacheEntry {
    pub fn meta(&self) -> PatchMeta {
        PatchMeta {
            subject_id: self.subject_id.clone(),
            plane: self.plane,
            slice_index: self.slice_index,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchCache {
    dir: PathBuf,
    entries: Vec<PatchCacheEntry>,
    by_subject: BTreeMap<String, Vec<usize>>,
}

fn file_stem_for(subject_id: &str) -> String {
    subject_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl PatchCache {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), entries: Vec::new(), by_subject: BTreeMap::new() })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::MissingFile(manifest));
        }
        let mut reader = csv::Reader::from_path(&manifest)?;
        let mut cache = Self { dir: dir.to_path_buf(), entries: Vec::new(), by_subject: BTreeMap::new() };
        for row in reader.deserialize::<PatchCacheEntry>() {
            cache.push(row?);
        }
        Ok(cache)
    }

    fn push(&mut self, entry: PatchCacheEntry) {
        self.by_subject.entry(entry.subject_id.clone()).or_default().push(self.entries.len());
        self.entries.push(entry);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[PatchCacheEntry] {
        &self.entries
    }

    /// Store one subject's patches. All patches must share the subject and
    /// the same spatial size.
    pub fn write_subject(&mut self, patches: &[(PatchMeta, Array3<f32>)]) -> Result<()> {
        let Some((first, first_img)) = patches.first() else {
            return Err(Error::EmptyInput);
        };
        let subject_id = first.subject_id.clone();
        if self.by_subject.contains_key(&subject_id) {
            return Err(Error::DuplicateSubject(subject_id));
        }
        let dims = first_img.dim();
        let mut flat = Vec::with_capacity(patches.len() * first_img.len());
        for (meta, img) in patches {
            if meta.subject_id != subject_id {
                return Err(Error::MixedSubjects(subject_id, meta.subject_id.clone()));
            }
            if img.dim() != dims {
                return Err(Error::ShapeMismatch(format!("patch {:?} differs from {dims:?}", img.dim())));
            }
            flat.extend(img.iter().copied());
        }
        let file = format!("{}.safetensors", file_stem_for(&subject_id));
        let tensor = Tensor::from_vec(flat, (patches.len(), dims.0, dims.1, dims.2), &Device::Cpu)?;
        candle_core::safetensors::save(&HashMap::from([(TENSOR_NAME, tensor)]), self.dir.join(&file))?;
        for (row, (meta, _)) in patches.iter().enumerate() {
            self.push(PatchCacheEntry {
                subject_id: meta.subject_id.clone(),
                plane: meta.plane,
                slice_index: meta.slice_index,
                label: meta.label,
                file: file.clone(),
                row,
            });
        }
        Ok(())
    }

    pub fn write_manifest(&self) -> Result<PathBuf> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut writer = csv::Writer::from_path(&path)?;
        for e in &self.entries {
            writer.serialize(e)?;
        }
        writer.flush()?;
        Ok(path)
    }

    /// Subjects and their labels, sorted by id.
    pub fn subjects(&self) -> Vec<(String, ClassLabel)> {
        self.by_subject
            .iter()
            .map(|(id, rows)| (id.clone(), self.entries[rows[0]].label))
            .collect()
    }

    pub fn label_of(&self, subject_id: &str) -> Option<ClassLabel> {
        self.by_subject.get(subject_id).map(|rows| self.entries[rows[0]].label)
    }

    /// Patch provenance and the (N, 3, side, side) tensor for one subject.
    pub fn load_subject(&self, subject_id: &str) -> Result<(Vec<PatchMeta>, Tensor)> {
        let rows = self
            .by_subject
            .get(subject_id)
            .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
        let entries: Vec<&PatchCacheEntry> = rows.iter().map(|&i| &self.entries[i]).collect();
        let mut tensors = candle_core::safetensors::load(self.dir.join(&entries[0].file), &Device::Cpu)?;
        let all = tensors
            .remove(TENSOR_NAME)
            .ok_or_else(|| Error::ShapeMismatch(format!("{} lacks a patches tensor", entries[0].file)))?;
        let idx: Vec<u32> = entries.iter().map(|e| e.row as u32).collect();
        let n = all.dim(0)?;
        if let Some(bad) = idx.iter().find(|&&r| r as usize >= n) {
            return Err(Error::ShapeMismatch(format!("manifest row {bad} beyond {n} cached patches")));
        }
        let picked = all.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
        Ok((entries.iter().map(|e| e.meta()).collect(), picked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str, plane: Plane, slice: usize) -> PatchMeta {
        PatchMeta { subject_id: id.into(), plane, slice_index: slice, label: ClassLabel::VeryMild }
    }

    #[test]
    fn write_then_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = PatchCache::create(dir.path()).unwrap();
        let img = |v: f32| Array3::from_elem((3, 8, 8), v);
        cache
            .write_subject(&[(meta("a/1", Plane::Axial, 3), img(1.0)), (meta("a/1", Plane::Sagittal, 4), img(2.0))])
            .unwrap();
        cache.write_subject(&[(meta("b", Plane::Coronal, 0), img(5.0))]).unwrap();
        cache.write_manifest().unwrap();

        let reopened = PatchCache::open(dir.path()).unwrap();
        assert_eq!(reopened.entries(), cache.entries());
        assert_eq!(reopened.subjects().len(), 2);
        let (metas, t) = reopened.load_subject("a/1").unwrap();
        assert_eq!(metas[1], meta("a/1", Plane::Sagittal, 4));
        assert_eq!(t.dims(), &[2, 3, 8, 8]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[3 * 64], 2.0);
        assert!(matches!(reopened.load_subject("zzz"), Err(Error::UnknownSubject(_))));
    }

    #[test]
    fn rejects_mixed_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = PatchCache::create(dir.path()).unwrap();
        let img = Array3::zeros((3, 8, 8));
        assert!(cache
            .write_subject(&[(meta("a", Plane::Axial, 0), img.clone()), (meta("b", Plane::Axial, 0), img)])
            .is_err());
    }
}
