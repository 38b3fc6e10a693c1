use std::collections::BTreeMap;

use adens_core::ensemble::{aggregate_subject, group_by_patch, majority_vote, predict_batch};
use adens_core::evaluation::{classification_report, confusion_matrix};
use adens_core::ingest::{load_metadata, load_volume, write_cohort, SyntheticCohortSpec};
use adens_core::preprocess::{preprocess_volume, PatchCache};
use adens_core::training::{AccessPurpose, GuardedSource, PatchSource};
use adens_core::{build_densenet, stratified_kfold, train_model, BuildOptions, ClassLabel, DenseNetConfig, TrainConfig};

#[test]
fn synthetic_cohort_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticCohortSpec { n_subjects: 12, class_proportions: [0.5, 0.5, 0.0, 0.0], shape: [24, 24, 24], seed: 9 };
    write_cohort(dir.path(), &spec.generate().unwrap()).unwrap();

    let records = load_metadata(&dir.path().join("metadata.csv")).unwrap();
    assert_eq!(records.len(), 12);
    let mut cache = PatchCache::create(&dir.path().join("cache")).unwrap();
    for r in &records {
        let vol = load_volume(&r.scan_paths[0], &r.subject_id, r.label().unwrap()).unwrap();
        let patches = preprocess_volume(&vol, 2, 32).unwrap();
        assert_eq!(patches.len(), 6);
        cache.write_subject(&patches).unwrap();
    }
    cache.write_manifest().unwrap();
    let cache = PatchCache::open(&dir.path().join("cache")).unwrap();

    let folds = stratified_kfold(&cache.subjects(), 3, 1).unwrap();
    let fold = &folds[0];
    let guard = GuardedSource::new(&cache, fold);
    let cfg = TrainConfig { batch_size: 8, max_epochs: 2, learning_rate: 0.01, ..TrainConfig::default() };

    let mut predictions = Vec::new();
    for (i, growth) in [4, 6, 8].into_iter().enumerate() {
        let model_cfg = DenseNetConfig::tiny([1, 1, 1, 1], growth, 8);
        let model = build_densenet(&model_cfg, &BuildOptions { seed: i as u64, weights_path: None }).unwrap();
        let rec = train_model(&model, fold, &guard, &cfg).unwrap();
        assert!(rec.history.len() <= 2);
        for id in &fold.test_ids {
            let (metas, x) = guard.load(id, AccessPurpose::Predict).unwrap();
            predictions.extend(predict_batch(&model, &format!("m{i}"), &x, &metas, 16).unwrap());
        }
    }
    assert!(guard
        .access_log()
        .iter()
        .filter(|r| fold.test_ids.contains(&r.subject_id))
        .all(|r| r.purpose == AccessPurpose::Predict));

    let mut per_subject: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for ((subject, plane, slice), group) in group_by_patch(&predictions).unwrap() {
        let label = cache.label_of(&subject).unwrap();
        let meta = adens_core::PatchMeta { subject_id: subject.clone(), plane, slice_index: slice, label };
        per_subject.entry(subject).or_default().push((meta, majority_vote(&group).unwrap()));
    }
    assert_eq!(per_subject.len(), fold.test_ids.len());
    let (truth, pred): (Vec<ClassLabel>, Vec<ClassLabel>) = per_subject
        .iter()
        .map(|(id, votes)| (cache.label_of(id).unwrap(), aggregate_subject(votes).unwrap()))
        .unzip();
    let report = classification_report(&confusion_matrix(&truth, &pred).unwrap()).unwrap();
    assert_eq!(report.weighted.support as usize, fold.test_ids.len());
}
