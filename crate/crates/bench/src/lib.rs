//! Fixtures shared by the benchmarks.

use adens_core::ensemble::PredictionRecord;
use adens_core::evaluation::ConfusionMatrix;
use adens_core::ingest::generate_synthetic_cohort;
use adens_core::{ClassLabel, Logits, MriVolume, Plane, Posteriors};

pub fn skewed_matrix() -> ConfusionMatrix {
    ConfusionMatrix([[73, 0, 0, 0], [2, 2, 2, 0], [0, 0, 6, 1], [0, 0, 1, 1]])
}

/// Three records for one patch with the given hard labels.
pub fn vote_group(labels: [usize; 3]) -> Vec<PredictionRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut p = vec![0.1; 4];
            p[l] = 0.7;
            PredictionRecord {
                model_id: format!("m{i}"),
                subject_id: "S".into(),
                plane: Plane::Axial,
                slice_index: 0,
                logits: Logits(p.iter().map(|v: &f64| v.ln()).collect()),
                posteriors: Posteriors(p),
                predicted: ClassLabel::ALL[l],
            }
        })
        .collect()
}

pub fn volume(side: usize) -> MriVolume {
    generate_synthetic_cohort(4, [0.25; 4], [side; 3], 0).expect("valid cohort").remove(0)
}
