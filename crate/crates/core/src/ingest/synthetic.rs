//! Seeded synthetic cohorts for desk-scale runs.
//!
//! Each volume is a bright ellipsoidal "brain" with a dark central
//! ellipsoid standing in for the ventricles. Ventricle radius grows with
//! disease stage, so stages are separable from any central slice.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_metadata, write_nifti, ClassLabel, MriVolume, SubjectRecord, NUM_CLASSES};
use crate::error::{Error, Result};

/// Ventricle semi-axis as a fraction of each volume extent, per stage.
const VENTRICLE_RADIUS: [f32; NUM_CLASSES] = [0.08, 0.15, 0.22, 0.29];
const RADIUS_JITTER: f32 = 0.015;
const BRAIN_RADIUS: f32 = 0.44;
const TISSUE_INTENSITY: f32 = 1.0;
const FLUID_INTENSITY: f32 = 0.15;
const NOISE_SIGMA: f32 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohortSpec {
    pub n_subjects: usize,
    pub class_proportions: [f64; NUM_CLASSES],
    pub shape: [usize; 3],
    pub seed: u64,
}

impl SyntheticCohortSpec {
    pub fn generate(&self) -> Result<Vec<MriVolume>> {
        generate_synthetic_cohort(self.n_subjects, self.class_proportions, self.shape, self.seed)
    }
}

/// Per-class counts: each non-healthy class gets `round(n * p)`, the
/// remainder goes to [`ClassLabel::Nondemented`].
pub fn label_counts_for(n_subjects: usize, proportions: [f64; NUM_CLASSES]) -> Result<[usize; NUM_CLASSES]> {
    if n_subjects < NUM_CLASSES {
        return Err(Error::InvalidProportions(format!("need at least {NUM_CLASSES} subjects, got {n_subjects}")));
    }
    if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidProportions(format!("{proportions:?} has a negative or non-finite entry")));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidProportions(format!("proportions sum to {sum}, not 1")));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for c in 1..NUM_CLASSES {
        counts[c] = (n_subjects as f64 * proportions[c]).round() as usize;
    }
    let assigned: usize = counts[1..].iter().sum();
    if assigned > n_subjects {
        return Err(Error::InvalidProportions(format!(
            "rounded counts {:?} exceed {n_subjects} subjects",
            &counts[1..]
        )));
    }
    counts[0] = n_subjects - assigned;
    Ok(counts)
}

/// Generate `n_subjects` labelled volumes. Pure in its arguments.
pub fn generate_synthetic_cohort(
    n_subjects: usize,
    class_proportions: [f64; NUM_CLASSES],
    shape: [usize; 3],
    seed: u64,
) -> Result<Vec<MriVolume>> {
    let counts = label_counts_for(n_subjects, class_proportions)?;
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch(format!("synthetic shape {shape:?} has an empty axis")));
    }

    let mut labels: Vec<ClassLabel> = ClassLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut subject_rng = ChaCha8Rng::seed_from_u64(seed);
            subject_rng.set_stream(i as u64 + 1);
            let voxels = synth_volume(shape, label, &mut subject_rng);
            MriVolume::new(voxels, format!("SYN_{:04}", i + 1), label)
        })
        .collect()
}

fn synth_volume(shape: [usize; 3], label: ClassLabel, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base = VENTRICLE_RADIUS[label.index()];
    let radius: [f32; 3] = std::array::from_fn(|_| base + rng.random_range(-RADIUS_JITTER..=RADIUS_JITTER));
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");
    let centre: [f32; 3] = std::array::from_fn(|a| (shape[a] as f32 - 1.0) / 2.0);

    let mut vol = Array3::zeros((shape[0], shape[1], shape[2]));
    for ((i, j, k), v) in vol.indexed_iter_mut() {
        let idx = [i, j, k];
        let mut brain = 0.0f32;
        let mut vent = 0.0f32;
        for a in 0..3 {
            let d = (idx[a] as f32 - centre[a]) / shape[a] as f32;
            brain += (d / BRAIN_RADIUS).powi(2);
            vent += (d / radius[a]).powi(2);
        }
        let clean = if vent <= 1.0 {
            FLUID_INTENSITY
        } else if brain <= 1.0 {
            TISSUE_INTENSITY
        } else {
            0.0
        };
        *v = clean + noise.sample(rng);
    }
    vol
}

/// Write a cohort as NIfTI-1 files plus a metadata CSV under `dir`.
pub fn write_cohort(dir: &Path, volumes: &[MriVolume]) -> Result<Vec<SubjectRecord>> {
    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir)?;
    let mut records = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let file = format!("{}.nii", v.subject_id);
        write_nifti(&vol_dir.join(&file), &v.voxels)?;
        records.push(SubjectRecord {
            subject_id: v.subject_id.clone(),
            age: 60 + 6 * v.label.index() as u32 + (i % 6) as u32,
            cdr: Some(v.label.cdr()),
            scan_paths: vec![Path::new("volumes").join(file)],
        });
    }
    write_metadata(&dir.join("metadata.csv"), &records)?;
    Ok(records)
}
