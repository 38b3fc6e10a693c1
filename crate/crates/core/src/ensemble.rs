//! Per-patch predictions, three-model majority voting and patch-to-subject
//! aggregation. Also reads and writes the prediction manifest CSV:
//!
//! ```text
//! model_id,subject_id,plane,slice_index,p0,p1,p2,p3,predicted
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClassLabel, NUM_CLASSES};
use crate::model::ModelHandle;
use crate::preprocess::{PatchMeta, Plane};
use crate::training::{softmax, Logits, Posteriors};

pub const ENSEMBLE_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub model_id: String,
    pub subject_id: String,
    pub plane: Plane,
    pub slice_index: usize,
    pub logits: Logits,
    pub posteriors: Posteriors,
    pub predicted: ClassLabel,
}

impl PredictionRecord {
    pub fn from_logits(model_id: &str, meta: &PatchMeta, logits: Logits) -> Result<Self> {
        let posteriors = softmax(&logits)?;
        let predicted = ClassLabel::from_index(posteriors.argmax())
            .ok_or_else(|| Error::ShapeMismatch(format!("{} logits for {NUM_CLASSES} classes", logits.0.len())))?;
        Ok(Self {
            model_id: model_id.to_string(),
            subject_id: meta.subject_id.clone(),
            plane: meta.plane,
            slice_index: meta.slice_index,
            logits,
            posteriors,
            predicted,
        })
    }

    fn key(&self) -> (&str, Plane, usize) {
        (&self.subject_id, self.plane, self.slice_index)
    }
}

/// Score one (3, side, side) input.
pub fn predict_record(model: &ModelHandle, model_id: &str, input: &Tensor, meta: &PatchMeta) -> Result<PredictionRecord> {
    if input.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("expected (3, side, side), got {:?}", input.dims())));
    }
    let batch = input.unsqueeze(0)?;
    Ok(predict_batch(model, model_id, &batch, std::slice::from_ref(meta), 1)?.remove(0))
}

/// Score a (N, 3, side, side) batch in chunks of `chunk`.
pub fn predict_batch(
    model: &ModelHandle,
    model_id: &str,
    inputs: &Tensor,
    metas: &[PatchMeta],
    chunk: usize,
) -> Result<Vec<PredictionRecord>> {
    let n = inputs.dim(0)?;
    if n != metas.len() {
        return Err(Error::ShapeMismatch(format!("{n} inputs but {} provenance entries", metas.len())));
    }
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk.max(1)) {
        let len = chunk.max(1).min(n - start);
        let logits: Vec<Vec<f32>> = model.forward(&inputs.narrow(0, start, len)?, false)?.to_vec2()?;
        for (row, meta) in logits.into_iter().zip(&metas[start..start + len]) {
            let f = Logits(row.into_iter().map(f64::from).collect());
            out.push(PredictionRecord::from_logits(model_id, meta, f)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteOutcome {
    pub label: ClassLabel,
    /// True when no class had a majority and mean posteriors decided.
    pub tie_break: bool,
}

fn check_group(records: &[PredictionRecord]) -> Result<()> {
    if records.len() != ENSEMBLE_SIZE {
        return Err(Error::WrongArity { expected: ENSEMBLE_SIZE, got: records.len() });
    }
    let key = records[0].key();
    if let Some(r) = records.iter().find(|r| r.key() != key) {
        return Err(Error::MixedProvenance(format!("{:?} vs {:?}", key, r.key())));
    }
    let ids: HashSet<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    if ids.len() != records.len() {
        return Err(Error::MixedProvenance("duplicate model ids in one vote".into()));
    }
    Ok(())
}

fn mean_posterior_argmax(records: &[PredictionRecord]) -> ClassLabel {
    let mut mean = [0.0f64; NUM_CLASSES];
    for r in records {
        for (m, p) in mean.iter_mut().zip(&r.posteriors.0) {
            *m += p / records.len() as f64;
        }
    }
    let best = Posteriors(mean.to_vec()).argmax();
    ClassLabel::ALL[best]
}

/// Hard-label majority over three models. A three-way split falls back to
/// the highest mean posterior, then the lowest class index.
pub fn majority_vote_detailed(records: &[PredictionRecord]) -> Result<VoteOutcome> {
    check_group(records)?;
    let mut votes = [0usize; NUM_CLASSES];
    for r in records {
        votes[r.predicted.index()] += 1;
    }
    if let Some(c) = votes.iter().position(|&v| 2 * v > records.len()) {
        return Ok(VoteOutcome { label: ClassLabel::ALL[c], tie_break: false });
    }
    Ok(VoteOutcome { label: mean_posterior_argmax(records), tie_break: true })
}

pub fn majority_vote(records: &[PredictionRecord]) -> Result<ClassLabel> {
    majority_vote_detailed(records).map(|o| o.label)
}

/// Argmax of the mean posterior; the non-default soft-voting mode.
pub fn soft_vote(records: &[PredictionRecord]) -> Result<ClassLabel> {
    check_group(records)?;
    Ok(mean_posterior_argmax(records))
}

/// Plurality of patch-level labels for one subject; ties go to the more
/// severe stage.
pub fn aggregate_subject(votes: &[(PatchMeta, ClassLabel)]) -> Result<ClassLabel> {
    let (first, _) = votes.first().ok_or(Error::EmptyVotes)?;
    if let Some((m, _)) = votes.iter().find(|(m, _)| m.subject_id != first.subject_id) {
        return Err(Error::MixedSubjects(first.subject_id.clone(), m.subject_id.clone()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for (_, label) in votes {
        counts[label.index()] += 1;
    }
    let max = *counts.iter().max().expect("non-empty");
    let winner = (0..NUM_CLASSES).rev().find(|&c| counts[c] == max).expect("some class has max");
    Ok(ClassLabel::ALL[winner])
}

/// Group records from several models by patch. Every patch must have been
/// scored by the same set of models.
pub fn group_by_patch(records: &[PredictionRecord]) -> Result<BTreeMap<(String, Plane, usize), Vec<PredictionRecord>>> {
    let mut groups: BTreeMap<(String, Plane, usize), Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.subject_id.clone(), r.plane, r.slice_index)).or_default().push(r.clone());
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    }
    Ok(groups)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    model_id: String,
    subject_id: String,
    plane: Plane,
    slice_index: usize,
    p0: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    predicted: usize,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        let p = &r.posteriors.0;
        w.serialize(PredictionRow {
            model_id: r.model_id.clone(),
            subject_id: r.subject_id.clone(),
            plane: r.plane,
            slice_index: r.slice_index,
            p0: p[0],
            p1: p[1],
            p2: p[2],
            p3: p[3],
            predicted: r.predicted.index(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Read a prediction manifest. Logits are not stored; they are
/// reconstructed as log-posteriors, which softmax maps back to the stored
/// posteriors.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<PredictionRow>() {
        let row = row?;
        let p = vec![row.p0, row.p1, row.p2, row.p3];
        let predicted = ClassLabel::from_index(row.predicted).ok_or_else(|| Error::MalformedRow {
            line: out.len() as u64 + 2,
            reason: format!("predicted class {} out of range", row.predicted),
        })?;
        out.push(PredictionRecord {
            model_id: row.model_id,
            subject_id: row.subject_id,
            plane: row.plane,
            slice_index: row.slice_index,
            logits: Logits(p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect()),
            posteriors: Posteriors(p),
            predicted,
        });
    }
    Ok(out)
}

/// Stack (3, side, side) inputs into one batch on the CPU.
pub fn stack_inputs(inputs: &[ndarray::Array3<f32>]) -> Result<Tensor> {
    let (c, h, w) = inputs.first().ok_or(Error::EmptyInput)?.dim();
    let flat: Vec<f32> = inputs.iter().flat_map(|a| a.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (inputs.len(), c, h, w), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_densenet, BuildOptions, DenseNetConfig};
    use ClassLabel::*;

    fn meta(subject: &str, slice: usize) -> PatchMeta {
        PatchMeta { subject_id: subject.into(), plane: Plane::Axial, slice_index: slice, label: Nondemented }
    }

    fn rec(model: &str, predicted: ClassLabel, p: [f64; 4]) -> PredictionRecord {
        PredictionRecord {
            model_id: model.into(),
            subject_id: "S".into(),
            plane: Plane::Axial,
            slice_index: 3,
            logits: Logits(p.iter().map(|v| v.ln()).collect()),
            posteriors: Posteriors(p.to_vec()),
            predicted,
        }
    }

    fn hard(labels: [ClassLabel; 3]) -> Vec<PredictionRecord> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut p = [0.1; 4];
                p[l.index()] = 0.7;
                rec(&format!("m{i}"), l, p)
            })
            .collect()
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_vote(&hard([Mild, Mild, Nondemented])).unwrap(), Mild);
        assert_eq!(majority_vote(&hard([VeryMild, VeryMild, VeryMild])).unwrap(), VeryMild);
    }

    #[test]
    fn three_way_tie_uses_mean_posterior() {
        // Means: (0.30, 0.10, 0.35, 0.25)
        let records = vec![
            rec("a", Nondemented, [0.50, 0.10, 0.30, 0.10]),
            rec("b", Mild, [0.20, 0.10, 0.40, 0.30]),
            rec("c", Moderate, [0.20, 0.10, 0.35, 0.35]),
        ];
        let out = majority_vote_detailed(&records).unwrap();
        assert_eq!(out, VoteOutcome { label: Mild, tie_break: true });
    }

    #[test]
    fn tie_on_mean_goes_to_lowest_index() {
        let records = vec![
            rec("a", Nondemented, [0.4, 0.4, 0.1, 0.1]),
            rec("b", VeryMild, [0.4, 0.4, 0.1, 0.1]),
            rec("c", Mild, [0.4, 0.4, 0.1, 0.1]),
        ];
        assert_eq!(majority_vote(&records).unwrap(), Nondemented);
    }

    #[test]
    fn vote_errors() {
        let mut two = hard([Mild, Mild, Mild]);
        two.pop();
        assert!(matches!(majority_vote(&two), Err(Error::WrongArity { expected: 3, got: 2 })));
        let mut mixed = hard([Mild, Mild, Mild]);
        mixed[1].slice_index = 9;
        assert!(matches!(majority_vote(&mixed), Err(Error::MixedProvenance(_))));
        let mut dup = hard([Mild, Mild, Mild]);
        dup[2].model_id = "m0".into();
        assert!(matches!(majority_vote(&dup), Err(Error::MixedProvenance(_))));
    }

    #[test]
    fn soft_vote_differs_from_hard() {
        let records = vec![
            rec("a", Mild, [0.0, 0.0, 0.51, 0.49]),
            rec("b", Mild, [0.0, 0.0, 0.51, 0.49]),
            rec("c", Moderate, [0.0, 0.0, 0.01, 0.99]),
        ];
        assert_eq!(majority_vote(&records).unwrap(), Mild);
        assert_eq!(soft_vote(&records).unwrap(), Moderate);
    }

    #[test]
    fn subject_aggregation() {
        let votes = |spec: &[(ClassLabel, usize)]| -> Vec<(PatchMeta, ClassLabel)> {
            spec.iter()
                .flat_map(|&(l, n)| std::iter::repeat_n(l, n))
                .enumerate()
                .map(|(i, l)| (meta("S", i), l))
                .collect()
        };
        assert_eq!(aggregate_subject(&votes(&[(Mild, 7), (Nondemented, 3)])).unwrap(), Mild);
        assert_eq!(aggregate_subject(&votes(&[(Moderate, 1)])).unwrap(), Moderate);
        assert_eq!(aggregate_subject(&votes(&[(Nondemented, 5), (VeryMild, 5)])).unwrap(), VeryMild);
        assert!(matches!(aggregate_subject(&[]), Err(Error::EmptyVotes)));
        let mixed = vec![(meta("A", 0), Mild), (meta("B", 0), Mild)];
        assert!(matches!(aggregate_subject(&mixed), Err(Error::MixedSubjects(_, _))));
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let records = hard([Mild, Moderate, Nondemented]);
        write_predictions(&path, &records).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("model_id,subject_id,plane,slice_index,p0,p1,p2,p3,predicted\n"));
        let back = read_predictions(&path).unwrap();
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.posteriors, b.posteriors);
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.key(), b.key());
            let p = softmax(&b.logits).unwrap();
            assert!(p.0.iter().zip(&a.posteriors.0).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn predict_record_is_consistent_and_deterministic() {
        let cfg = DenseNetConfig::tiny([1, 1, 1, 1], 4, 8);
        let model = build_densenet(&cfg, &BuildOptions { seed: 1, weights_path: None }).unwrap();
        let zeros = Tensor::zeros((3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        let m = meta("S9", 4);
        let a = predict_record(&model, "tiny", &zeros, &m).unwrap();
        let b = predict_record(&model, "tiny", &zeros, &m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predicted.index(), a.posteriors.argmax());
        let c = predict_record(&model, "tiny", &ones, &m).unwrap();
        assert_eq!((c.model_id.as_str(), c.subject_id.as_str(), c.plane, c.slice_index), ("tiny", "S9", Plane::Axial, 4));
        assert_ne!(a.logits, c.logits);
        let bad = Tensor::zeros((1, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(predict_record(&model, "tiny", &bad, &m), Err(Error::ShapeMismatch(_))));
    }
}
