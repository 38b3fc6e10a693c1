//! Subject-level stratified k-fold plans.
//!
//! Each fold's test set is one stratified k-th of the cohort; the remaining
//! subjects are split into train and validation by `val_ratio`. With k = 5
//! and a 1/8 validation ratio this gives the 70/10/20 proportions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClassLabel, NUM_CLASSES};

/// Validation share of the non-test pool: 10% of the cohort out of 80%.
pub const DEFAULT_VAL_RATIO: f64 = 0.125;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

impl FoldPlan {
    pub fn role_of(&self, subject_id: &str) -> Option<SplitRole> {
        if self.train_ids.contains(subject_id) {
            Some(SplitRole::Train)
        } else if self.val_ids.contains(subject_id) {
            Some(SplitRole::Validation)
        } else if self.test_ids.contains(subject_id) {
            Some(SplitRole::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for SplitRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        })
    }
}

/// A complete cross-validation plan as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSet {
    pub k: usize,
    pub seed: u64,
    pub val_ratio: f64,
    pub folds: Vec<FoldPlan>,
}

impl FoldSet {
    pub fn build(subjects: &[(String, ClassLabel)], k: usize, val_ratio: f64, seed: u64) -> Result<Self> {
        let folds = stratified_kfold_with_ratio(subjects, k, val_ratio, seed)?;
        Ok(Self { k, seed, val_ratio, folds })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn pool_seed(seed: u64, fold: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1)
}

fn group_by_class(subjects: &[(String, ClassLabel)]) -> Result<[Vec<String>; NUM_CLASSES]> {
    let mut seen = HashSet::new();
    let mut groups: [Vec<String>; NUM_CLASSES] = Default::default();
    for (id, label) in subjects {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateSubject(id.clone()));
        }
        groups[label.index()].push(id.clone());
    }
    // Canonical order so the plan depends only on the set of subjects.
    for g in &mut groups {
        g.sort();
    }
    Ok(groups)
}

/// Stratified k-fold with the default 1/8 validation share of each pool.
pub fn stratified_kfold(subjects: &[(String, ClassLabel)], k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    stratified_kfold_with_ratio(subjects, k, DEFAULT_VAL_RATIO, seed)
}

pub fn stratified_kfold_with_ratio(
    subjects: &[(String, ClassLabel)],
    k: usize,
    val_ratio: f64,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    if k < 2 {
        return Err(Error::TooFewSubjects(format!("k = {k}; cross-validation needs at least 2 folds")));
    }
    let groups = group_by_class(subjects)?;
    if subjects.len() < k {
        return Err(Error::TooFewSubjects(format!(
            "{} subjects cannot fill {k} non-empty test folds",
            subjects.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    // Round-robin dealing continues across classes, so fold sizes differ by
    // at most one overall and per class.
    let mut offset = 0usize;
    for (c, group) in groups.iter().enumerate() {
        if !group.is_empty() && group.len() < k {
            log::warn!(
                "class {} has {} subjects for {k} folds; some test folds will lack it",
                ClassLabel::ALL[c],
                group.len()
            );
        }
        let mut shuffled: Vec<&str> = group.iter().map(String::as_str).collect();
        shuffled.shuffle(&mut rng);
        for (j, id) in shuffled.into_iter().enumerate() {
            fold_of.insert(id, (offset + j) % k);
        }
        offset = (offset + group.len()) % k;
    }

    let labelled: Vec<(String, ClassLabel)> = {
        let mut v: Vec<_> = subjects.to_vec();
        v.sort();
        v
    };
    (0..k)
        .map(|fold_index| {
            let (test, pool): (Vec<_>, Vec<_>) =
                labelled.iter().cloned().partition(|(id, _)| fold_of[id.as_str()] == fold_index);
            let (train, val) = if pool.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                split_train_val(&pool, val_ratio, pool_seed(seed, fold_index))?
            };
            Ok(FoldPlan {
                fold_index,
                train_ids: train.into_iter().collect(),
                val_ids: val.into_iter().collect(),
                test_ids: test.into_iter().map(|(id, _)| id).collect(),
            })
        })
        .collect()
}

/// Split a pool into (train, validation) with `round(ratio * |pool|)`
/// validation subjects, apportioned per class by largest remainder.
pub fn split_train_val(pool: &[(String, ClassLabel)], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let groups = group_by_class(pool)?;
    let total_val = (ratio * pool.len() as f64).round() as usize;

    let exact: Vec<f64> = groups.iter().map(|g| ratio * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total_val.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle().take(NUM_CLASSES * 2) {
        if remaining == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (group, q) in groups.into_iter().zip(quota) {
        let mut shuffled = group;
        shuffled.shuffle(&mut rng);
        let rest = shuffled.split_off(q.min(shuffled.len()));
        val.extend(shuffled);
        train.extend(rest);
    }
    train.sort();
    val.sort();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cohort(counts: [usize; 4]) -> Vec<(String, ClassLabel)> {
        let mut out = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                out.push((format!("S{c}_{i:03}"), ClassLabel::ALL[c]));
            }
        }
        out
    }

    fn count_in(ids: &BTreeSet<String>, subjects: &[(String, ClassLabel)], c: ClassLabel) -> usize {
        subjects.iter().filter(|(id, l)| *l == c && ids.contains(id)).count()
    }

    #[test]
    fn exact_stratification_two_classes() {
        let subjects = cohort([5, 5, 0, 0]);
        for seed in 0..5 {
            let plans = stratified_kfold(&subjects, 5, seed).unwrap();
            assert_eq!(plans.len(), 5);
            for p in &plans {
                assert_eq!(count_in(&p.test_ids, &subjects, ClassLabel::Nondemented), 1);
                assert_eq!(count_in(&p.test_ids, &subjects, ClassLabel::VeryMild), 1);
            }
        }
    }

    #[test]
    fn table_sized_cohort_gives_twenty_percent_test_sets() {
        // 440 subjects: 365/30/35/10 mirrors the skew of an 88-item test fold.
        let subjects = cohort([365, 30, 35, 10]);
        let plans = stratified_kfold(&subjects, 5, 42).unwrap();
        for p in &plans {
            assert_eq!(p.test_ids.len(), 88);
            assert_eq!(p.train_ids.len() + p.val_ids.len(), 352);
            assert_eq!(p.val_ids.len(), 44);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let subjects = cohort([20, 7, 5, 3]);
        assert_eq!(stratified_kfold(&subjects, 5, 9).unwrap(), stratified_kfold(&subjects, 5, 9).unwrap());
        let mut reversed = subjects.clone();
        reversed.reverse();
        assert_eq!(stratified_kfold(&subjects, 5, 9).unwrap(), stratified_kfold(&reversed, 5, 9).unwrap());
        assert_ne!(stratified_kfold(&subjects, 5, 9).unwrap(), stratified_kfold(&subjects, 5, 10).unwrap());
    }

    #[test]
    fn errors() {
        let mut subjects = cohort([3, 0, 0, 0]);
        assert!(matches!(stratified_kfold(&subjects, 5, 0), Err(Error::TooFewSubjects(_))));
        assert!(matches!(stratified_kfold(&subjects, 1, 0), Err(Error::TooFewSubjects(_))));
        subjects.push(subjects[0].clone());
        assert!(matches!(stratified_kfold(&subjects, 2, 0), Err(Error::DuplicateSubject(_))));
        assert!(matches!(split_train_val(&[], 0.5, 0), Err(Error::EmptyPool)));
        assert!(matches!(split_train_val(&cohort([2, 0, 0, 0]), 1.0, 0), Err(Error::InvalidRatio(_))));
    }

    #[test]
    fn val_rounding() {
        let (train, val) = split_train_val(&cohort([8, 0, 0, 0]), 0.125, 3).unwrap();
        assert_eq!((train.len(), val.len()), (7, 1));

        // 7 healthy + 1 very mild: the single very-mild subject rounds to 0.
        let pool = cohort([7, 1, 0, 0]);
        let (train, val) = split_train_val(&pool, 0.125, 3).unwrap();
        assert_eq!(val.len(), 1);
        assert!(val[0].starts_with("S0_"));
        assert!(train.contains(&"S1_000".to_string()));

        let (train, val) = split_train_val(&cohort([56, 8, 8, 8]), 0.125, 1).unwrap();
        assert_eq!((train.len(), val.len()), (70, 10));
    }

    #[test]
    fn fold_set_json_roundtrip() {
        let set = FoldSet::build(&cohort([6, 4, 3, 2]), 3, DEFAULT_VAL_RATIO, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.json");
        set.save(&path).unwrap();
        assert_eq!(FoldSet::load(&path).unwrap(), set);
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(json["folds"][0]["test_ids"].is_array());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn plan_invariants(counts in proptest::array::uniform4(0usize..40), k in 2usize..7, seed in any::<u64>()) {
            let subjects = cohort(counts);
            prop_assume!(subjects.len() >= k);
            let plans = stratified_kfold(&subjects, k, seed).unwrap();
            let all: BTreeSet<String> = subjects.iter().map(|(id, _)| id.clone()).collect();
            let mut tested = BTreeSet::new();
            for p in &plans {
                prop_assert!(p.train_ids.is_disjoint(&p.val_ids));
                prop_assert!(p.train_ids.is_disjoint(&p.test_ids));
                prop_assert!(p.val_ids.is_disjoint(&p.test_ids));
                let union: BTreeSet<String> =
                    p.train_ids.iter().chain(&p.val_ids).chain(&p.test_ids).cloned().collect();
                prop_assert_eq!(&union, &all);
                prop_assert!(!p.test_ids.is_empty());
                for c in ClassLabel::ALL {
                    let share = counts[c.index()] as f64 / k as f64;
                    let got = count_in(&p.test_ids, &subjects, c) as f64;
                    prop_assert!((got - share).abs() <= 1.0);
                }
                for id in &p.test_ids {
                    prop_assert!(tested.insert(id.clone()));
                }
            }
            prop_assert_eq!(tested, all);
        }
    }
}
