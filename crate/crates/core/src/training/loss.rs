//! Softmax, cross-entropy and its gradient, class weights.
//!
//! The scalar (`f64`) functions are the reference path; the tensor loss used
//! during optimisation is tested against them.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor applied inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Raw per-class scores from a model head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

/// Softmax output; entries in (0, 1] summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posteriors(pub Vec<f64>);

/// One-hot ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    hot: usize,
    len: usize,
}

impl Target {
    pub fn one_hot(index: usize, len: usize) -> Self {
        assert!(index < len, "target index {index} out of range for {len} classes");
        Self { hot: index, len }
    }

    pub fn hot_index(&self) -> usize {
        self.hot
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.len).map(|i| if i == self.hot { 1.0 } else { 0.0 }).collect()
    }
}

impl Posteriors {
    /// Highest-probability class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

pub fn softmax(f: &Logits) -> Result<Posteriors> {
    if f.0.is_empty() || f.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = f.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.0.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Posteriors(exps.into_iter().map(|e| e / sum).collect()))
}

/// `w_c * -ln p_c` for the hot class `c`; unit weights give plain
/// cross-entropy.
pub fn cross_entropy(p: &Posteriors, t: &Target, weights: &[f64]) -> f64 {
    let c = t.hot_index();
    weights[c] * -p.0[c].max(PROB_FLOOR).ln()
}

/// Gradient of unit-weight cross-entropy with respect to the logits.
pub fn loss_gradient(p: &Posteriors, t: &Target) -> Vec<f64> {
    p.0.iter().zip(t.to_vec()).map(|(pi, ti)| pi - ti).collect()
}

/// Inverse-frequency weights `N / (m * n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let total: usize = counts.iter().sum();
    let m = counts.len() as f64;
    Ok(counts.iter().map(|&n| total as f64 / (m * n as f64)).collect())
}

/// Like [`class_weights`] over the classes present; absent classes get 1.0,
/// which never enters the loss since no sample carries that label.
pub fn class_weights_lenient(counts: &[usize]) -> Vec<f64> {
    let present: Vec<usize> = counts.iter().copied().filter(|&n| n > 0).collect();
    let weights = class_weights(&present).unwrap_or_default();
    let mut it = weights.into_iter();
    counts.iter().map(|&n| if n > 0 { it.next().unwrap_or(1.0) } else { 1.0 }).collect()
}

/// Batch mean of the weighted, floored cross-entropy for `logits` (B, m).
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[u32], weights: &[f32]) -> Result<Tensor> {
    let device = logits.device();
    let b = targets.len();
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_norm = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_p = shifted.broadcast_sub(&log_norm)?;
    let idx = Tensor::from_slice(targets, (b, 1), device)?;
    let picked = log_p.gather(&idx, 1)?.squeeze(1)?;
    let floored = picked.maximum(PROB_FLOOR.ln())?;
    let w: Vec<f32> = targets.iter().map(|&t| weights[t as usize]).collect();
    let w = Tensor::from_vec(w, b, device)?.to_dtype(logits.dtype())?;
    Ok((floored.mul(&w)?.neg()?.sum_all()? / b as f64)?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_softmax() {
        let p = softmax(&Logits(vec![0.0; 4])).unwrap();
        assert_eq!(p.0, vec![0.25; 4]);
    }

    #[test]
    fn softmax_reference_values() {
        // exp(i) / sum exp(1..4), evaluated independently in double precision
        let p = softmax(&Logits(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let expected = [0.03205860328008499, 0.08714431874203257, 0.23688281808991013, 0.6439142598879722];
        assert!(close(&p.0, &expected, 1e-15), "{:?}", p.0);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&Logits(vec![0.0, f64::NAN])), Err(Error::NonFiniteLogits)));
        assert!(matches!(softmax(&Logits(vec![f64::INFINITY, 0.0])), Err(Error::NonFiniteLogits)));
    }

    #[test]
    fn cross_entropy_examples() {
        let ones = [1.0; 4];
        let t = Target::one_hot(2, 4);
        assert_eq!(cross_entropy(&Posteriors(vec![0.0, 0.0, 1.0, 0.0]), &t, &ones), 0.0);
        let l = cross_entropy(&Posteriors(vec![0.25; 4]), &Target::one_hot(1, 4), &ones);
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let l = cross_entropy(&Posteriors(vec![0.1, 0.2, 0.6, 0.1]), &t, &ones);
        assert!((l - 0.5108256237659907).abs() < 1e-12);
        // floored, not infinite
        let l = cross_entropy(&Posteriors(vec![1.0, 0.0, 0.0, 0.0]), &t, &ones);
        assert!((l - -PROB_FLOOR.ln()).abs() < 1e-9);
        let w = [1.0, 1.0, 3.0, 1.0];
        assert!((cross_entropy(&Posteriors(vec![0.25; 4]), &t, &w) - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let p = softmax(&Logits(vec![0.0; 4])).unwrap();
        assert_eq!(loss_gradient(&p, &Target::one_hot(0, 4)), vec![-0.75, 0.25, 0.25, 0.25]);
        let p = Posteriors(vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(loss_gradient(&p, &Target::one_hot(1, 4)), vec![0.0; 4]);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[10, 10, 10, 10]).unwrap(), vec![1.0; 4]);
        let w = class_weights(&[73, 6, 7, 2]).unwrap();
        let expected = [88.0 / 292.0, 88.0 / 24.0, 88.0 / 28.0, 11.0];
        assert!(close(&w, &expected, 1e-12));
        assert!((w[0] - 0.3014).abs() < 1e-4 && (w[1] - 3.6667).abs() < 1e-4 && (w[2] - 3.1429).abs() < 1e-4);
        assert_eq!(class_weights(&[730, 60, 70, 20]).unwrap(), w);
        assert!(matches!(class_weights(&[3, 0, 1, 1]), Err(Error::EmptyClass(1))));
        let lenient = class_weights_lenient(&[6, 0, 2, 0]);
        assert_eq!(lenient, vec![8.0 / 12.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn tensor_loss_matches_scalar_path_and_gradient() {
        let rows = [[0.3f32, -1.2, 2.0, 0.1], [1.5, 0.0, -0.5, 0.7], [-2.0, 3.0, 0.2, 0.0]];
        let targets = [2u32, 0, 3];
        let weights = [0.5f32, 2.0, 1.5, 3.0];
        let var = Var::from_vec(rows.concat(), (3, 4), &Device::Cpu).unwrap();
        let loss = weighted_cross_entropy(var.as_tensor(), &targets, &weights).unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<Vec<f32>> = grads.get(var.as_tensor()).unwrap().to_vec2().unwrap();

        let mut expected_loss = 0.0;
        for (b, row) in rows.iter().enumerate() {
            let f = Logits(row.iter().map(|&v| v as f64).collect());
            let p = softmax(&f).unwrap();
            let t = Target::one_hot(targets[b] as usize, 4);
            let w: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
            expected_loss += cross_entropy(&p, &t, &w) / 3.0;
            let w_c = w[targets[b] as usize];
            for (i, gi) in loss_gradient(&p, &t).into_iter().enumerate() {
                assert!((g[b][i] as f64 - w_c * gi / 3.0).abs() < 1e-5);
            }
        }
        let got: f32 = loss.to_scalar().unwrap();
        assert!((got as f64 - expected_loss).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(f in proptest::collection::vec(-1e3f64..1e3, 4)) {
            let p = softmax(&Logits(f)).unwrap();
            prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.0.iter().all(|&v| v > 0.0 || v == 0.0) && p.0.iter().all(|&v| v <= 1.0));
        }

        #[test]
        fn softmax_shift_invariant(f in proptest::collection::vec(-50f64..50.0, 4), c in -100f64..100.0) {
            let a = softmax(&Logits(f.clone())).unwrap();
            let b = softmax(&Logits(f.iter().map(|v| v + c).collect())).unwrap();
            prop_assert!(close(&a.0, &b.0, 1e-12));
        }

        #[test]
        fn unit_loss_nonnegative(f in proptest::collection::vec(-20f64..20.0, 4), hot in 0usize..4) {
            let p = softmax(&Logits(f)).unwrap();
            prop_assert!(cross_entropy(&p, &Target::one_hot(hot, 4), &[1.0; 4]) >= 0.0);
        }

        #[test]
        fn gradient_matches_central_differences(f in proptest::collection::vec(-5f64..5.0, 4), hot in 0usize..4) {
            // Moderate logits keep the floor inactive and the gradient resolvable.
            let t = Target::one_hot(hot, 4);
            let loss = |f: &[f64]| cross_entropy(&softmax(&Logits(f.to_vec())).unwrap(), &t, &[1.0; 4]);
            let g = loss_gradient(&softmax(&Logits(f.clone())).unwrap(), &t);
            let h = 1e-4;
            let fd: Vec<f64> = (0..4)
                .map(|i| {
                    let (mut up, mut down) = (f.clone(), f.clone());
                    up[i] += h;
                    down[i] -= h;
                    (loss(&up) - loss(&down)) / (2.0 * h)
                })
                .collect();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = fd.iter().zip(&g).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&diff) <= 1e-5 * norm(&g), "{fd:?} vs {g:?}");
        }

        #[test]
        fn weights_preserve_mass(counts in proptest::collection::vec(1usize..500, 4)) {
            let w = class_weights(&counts).unwrap();
            let mass: f64 = w.iter().zip(&counts).map(|(w, &n)| w * n as f64).sum();
            let total: usize = counts.iter().sum();
            prop_assert!((mass - total as f64).abs() < 1e-9 * total as f64);
        }
    }
}
