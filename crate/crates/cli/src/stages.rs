//! The pipeline stages. Each reads the previous stage's files, writes its own
//! directory under the output root, and finishes with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adens_core::ensemble::{
    aggregate_subject, group_by_patch, majority_vote_detailed, predict_batch, read_predictions, soft_vote,
    write_predictions, PredictionRecord,
};
use adens_core::evaluation::{classification_report, render_tables, ConfusionMatrix, ReportSet};
use adens_core::ingest::{load_metadata, load_volume, write_cohort};
use adens_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use adens_core::preprocess::{preprocess_volume, PatchCache, MANIFEST_FILE as CACHE_MANIFEST};
use adens_core::splits::FoldSet;
use adens_core::training::{write_access_log, write_history, AccessPurpose, GuardedSource, PatchSource};
use adens_core::{build_densenet, train_model, BuildOptions, ClassLabel, PatchMeta};
use anyhow::{anyhow, bail, Context as _};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ResolvedModel, RunConfig, Voting};
use crate::manifest::{derive_seed, fingerprint, hash_inputs, read_manifest, up_to_date, write_manifest, Manifest};

pub const FOLDS_FILE: &str = "folds.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ACCESS_LOG_FILE: &str = "access_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ENSEMBLE_ID: &str = "ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Preprocess,
    Split,
    Train,
    Predict,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Synth, Stage::Preprocess, Stage::Split, Stage::Train, Stage::Predict, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

/// Everything a stage needs besides its inputs on disk.
pub struct Context {
    pub config: RunConfig,
    pub models: Vec<ResolvedModel>,
    pub force: bool,
    pub fold: Option<usize>,
    pub parallel: bool,
    pub command: Vec<String>,
}

/// What a stage did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

impl Context {
    pub fn out(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.out().join("splits")
    }

    pub fn train_dir(&self, fold: usize) -> PathBuf {
        self.out().join("train").join(format!("fold{fold}"))
    }

    pub fn predict_dir(&self, fold: usize) -> PathBuf {
        self.out().join("predict").join(format!("fold{fold}"))
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.out().join("evaluate")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out().join("report")
    }

    fn manifest(
        &self,
        stage: Stage,
        fingerprint: String,
        inputs: &[PathBuf],
        outputs: Vec<PathBuf>,
        seeds: BTreeMap<String, u64>,
        details: serde_json::Value,
    ) -> anyhow::Result<Manifest> {
        Ok(Manifest {
            stage: stage.name().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created: chrono::Utc::now().to_rfc3339(),
            fingerprint,
            command: self.command.clone(),
            config: serde_json::to_value(&self.config)?,
            seeds,
            inputs: hash_inputs(inputs)?,
            outputs,
            details,
        })
    }

    fn skip(&self, dir: &Path, fp: &str, what: &str) -> bool {
        if !self.force && up_to_date(dir, fp) {
            log::info!("{what}: up to date, skipping (use --force to rerun)");
            return true;
        }
        false
    }

    fn folds(&self) -> anyhow::Result<FoldSet> {
        Ok(FoldSet::load(&self.splits_dir().join(FOLDS_FILE)).context("no fold plan; run the split stage")?)
    }

    /// Folds selected by `--fold`, or all of them.
    pub fn selected_folds(&self, k: usize) -> anyhow::Result<Vec<usize>> {
        match self.fold {
            Some(f) if f >= k => bail!("--fold {f} is out of range for {k} folds"),
            Some(f) => Ok(vec![f]),
            None => Ok((0..k).collect()),
        }
    }

    fn cache(&self) -> anyhow::Result<PatchCache> {
        Ok(PatchCache::open(&self.config.cache_dir()).context("no patch cache; run the preprocess stage")?)
    }

    fn upstream_fingerprint(&self, dir: &Path) -> anyhow::Result<String> {
        read_manifest(dir)
            .map(|m| m.fingerprint)
            .ok_or_else(|| anyhow!("{} has no manifest; run the earlier stages first", dir.display()))
    }
}

pub fn run_stage(ctx: &Context, stage: Stage) -> anyhow::Result<Outcome> {
    match stage {
        Stage::Synth => synth(ctx),
        Stage::Preprocess => preprocess(ctx),
        Stage::Split => split(ctx),
        Stage::Train => train(ctx),
        Stage::Predict => predict(ctx),
        Stage::Evaluate => evaluate(ctx),
        Stage::Report => report(ctx),
    }
}

fn synth(ctx: &Context) -> anyhow::Result<Outcome> {
    let spec = ctx.config.data.synthetic.as_ref().ok_or_else(|| anyhow!("the config has no data.synthetic section"))?;
    let dir = ctx.config.synthetic_dir();
    let fp = fingerprint(&json!({"stage": "synth", "spec": spec}));
    if ctx.skip(&dir, &fp, "synth") {
        return Ok(Outcome::UpToDate);
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let volumes = spec.generate()?;
    let records = write_cohort(&dir, &volumes)?;
    let mut counts = [0usize; 4];
    for v in &volumes {
        counts[v.label.index()] += 1;
    }
    let seeds = BTreeMap::from([("cohort".to_string(), spec.seed)]);
    let details = json!({"subjects": records.len(), "class_counts": counts});
    let m = ctx.manifest(Stage::Synth, fp, &[], vec!["metadata.csv".into(), "volumes".into()], seeds, details)?;
    write_manifest(&dir, &m)?;
    log::info!("synth: {} subjects, class counts {counts:?}", records.len());
    Ok(Outcome::Ran)
}

fn preprocess(ctx: &Context) -> anyhow::Result<Outcome> {
    let metadata = ctx.config.metadata_path();
    let records = load_metadata(&metadata)?;
    let mut inputs = vec![metadata.clone()];
    inputs.extend(records.iter().filter_map(|r| r.scan_paths.first().cloned()));
    let hashes = hash_inputs(&inputs)?;
    let dir = ctx.config.cache_dir();
    let fp = fingerprint(&json!({"stage": "preprocess", "params": ctx.config.preprocess, "inputs": hashes}));
    if ctx.skip(&dir, &fp, "preprocess") {
        return Ok(Outcome::UpToDate);
    }
    clear_cache_dir(&dir)?;

    let (window, side) = (ctx.config.preprocess.window, ctx.config.preprocess.side);
    let mut cache = PatchCache::create(&dir)?;
    let mut unlabelled = Vec::new();
    let mut extra_scans = 0;
    for r in &records {
        let Some(label) = r.label() else {
            unlabelled.push(r.subject_id.clone());
            continue;
        };
        extra_scans += r.scan_paths.len().saturating_sub(1);
        let vol = load_volume(&r.scan_paths[0], &r.subject_id, label)?;
        let patches =
            preprocess_volume(&vol, window, side).with_context(|| format!("preprocessing {}", r.subject_id))?;
        cache.write_subject(&patches)?;
    }
    if !unlabelled.is_empty() {
        log::warn!("preprocess: {} subjects have no rating and are left out", unlabelled.len());
    }
    cache.write_manifest()?;
    let mut counts = [0usize; 4];
    for (_, l) in cache.subjects() {
        counts[l.index()] += 1;
    }
    let details = json!({
        "subjects": cache.subjects().len(),
        "class_counts": counts,
        "patches": cache.entries().len(),
        "patches_per_subject": 3 * window,
        "unlabelled_subjects": unlabelled,
        "scans_used": "first scan per subject",
        "additional_scans_ignored": extra_scans,
        "planes": "axial, coronal and sagittal patches are pooled and feed every model",
    });
    let m = ctx.manifest(Stage::Preprocess, fp, &inputs, vec![CACHE_MANIFEST.into()], BTreeMap::new(), details)?;
    write_manifest(&dir, &m)?;
    log::info!("preprocess: {} subjects, {} patches at {side}x{side}", cache.subjects().len(), cache.entries().len());
    Ok(Outcome::Ran)
}

/// Remove only files the cache owns; the directory may be shared.
fn clear_cache_dir(dir: &Path) -> anyhow::Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ours = path.extension().is_some_and(|e| e == "safetensors")
            || path.file_name().is_some_and(|n| n == CACHE_MANIFEST || n == crate::manifest::MANIFEST_FILE);
        if ours && path.is_file() {
            std::fs::remove_file(path)?;
        }
    }
    Ok(())
}

fn split(ctx: &Context) -> anyhow::Result<Outcome> {
    let cache_dir = ctx.config.cache_dir();
    let cache_manifest = cache_dir.join(CACHE_MANIFEST);
    let cache = ctx.cache()?;
    let dir = ctx.splits_dir();
    let inputs = [cache_manifest];
    let fp = fingerprint(&json!({"stage": "split", "params": ctx.config.split, "inputs": hash_inputs(&inputs)?}));
    if ctx.skip(&dir, &fp, "split") {
        return Ok(Outcome::UpToDate);
    }
    let p = &ctx.config.split;
    let folds = FoldSet::build(&cache.subjects(), p.k, p.val_ratio, p.seed)?;
    std::fs::create_dir_all(&dir)?;
    folds.save(&dir.join(FOLDS_FILE))?;
    let sizes: Vec<_> = folds
        .folds
        .iter()
        .map(|f| json!({"fold": f.fold_index, "train": f.train_ids.len(), "val": f.val_ids.len(), "test": f.test_ids.len()}))
        .collect();
    let seeds = BTreeMap::from([("split".to_string(), p.seed)]);
    let m = ctx.manifest(Stage::Split, fp, &inputs, vec![FOLDS_FILE.into()], seeds, json!({"folds": sizes}))?;
    write_manifest(&dir, &m)?;
    log::info!("split: {} folds over {} subjects", folds.k, cache.subjects().len());
    Ok(Outcome::Ran)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainedModel {
    id: String,
    checkpoint: PathBuf,
    seed: u64,
    best_epoch: usize,
    best_val_loss: f64,
    epochs_run: usize,
    class_weights: [f64; 4],
    train_patches: usize,
    val_patches: usize,
}

fn train_one(
    ctx: &Context,
    cache: &PatchCache,
    folds: &FoldSet,
    fold: usize,
    model: &ResolvedModel,
    dir: &Path,
) -> anyhow::Result<TrainedModel> {
    let plan = &folds.folds[fold];
    let seed = derive_seed(ctx.config.seed, &model.id, fold);
    let opts = BuildOptions {
        seed,
        weights_path: if model.config.pretrained { ctx.config.weights_path(&model.config) } else { None },
    };
    let handle = build_densenet(&model.config, &opts)?;
    let cfg = adens_core::TrainConfig { seed, ..model.train.clone() };
    let model_dir = dir.join(&model.id);
    if model_dir.exists() {
        std::fs::remove_dir_all(&model_dir)?;
    }
    std::fs::create_dir_all(&model_dir)?;

    let guard = GuardedSource::new(cache, plan);
    let result = train_model(&handle, plan, &guard, &cfg);
    write_access_log(&model_dir.join(ACCESS_LOG_FILE), &guard.access_log())?;
    let record = result?;
    write_history(&model_dir.join("history.csv"), &record.history)?;

    let meta = CheckpointMeta {
        model_id: model.id.clone(),
        config: model.config.clone(),
        fold,
        timestamp: chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string(),
        best_epoch: record.best_epoch,
        best_val_loss: record.best_val_loss,
        training: serde_json::to_value(&cfg)?,
    };
    let ckpt = save_checkpoint(&model_dir, &record.tensors, &meta)?;
    log::info!(
        "train: fold {fold} {}: best epoch {} of {}, val loss {:.4}",
        model.id,
        record.best_epoch,
        record.history.len(),
        record.best_val_loss
    );
    Ok(TrainedModel {
        id: model.id.clone(),
        checkpoint: ckpt.strip_prefix(dir).unwrap_or(&ckpt).to_path_buf(),
        seed,
        best_epoch: record.best_epoch,
        best_val_loss: record.best_val_loss,
        epochs_run: record.history.len(),
        class_weights: record.class_weights,
        train_patches: record.train_patches,
        val_patches: record.val_patches,
    })
}

fn train(ctx: &Context) -> anyhow::Result<Outcome> {
    let folds = ctx.folds()?;
    let cache = ctx.cache()?;
    let mut outcome = Outcome::UpToDate;
    for fold in ctx.selected_folds(folds.k)? {
        let dir = ctx.train_dir(fold);
        let mut inputs = vec![ctx.splits_dir().join(FOLDS_FILE), ctx.config.cache_dir().join(CACHE_MANIFEST)];
        let mut plan = Vec::new();
        for m in &ctx.models {
            let weights = if m.config.pretrained { ctx.config.weights_path(&m.config) } else { None };
            if let Some(w) = weights.as_ref().filter(|w| w.is_file()) {
                inputs.push(w.clone());
            }
            plan.push(json!({"id": m.id, "config": m.config, "train": m.train,
                "seed": derive_seed(ctx.config.seed, &m.id, fold)}));
        }
        let fp = fingerprint(&json!({
            "stage": "train",
            "fold": fold,
            "models": plan,
            "cache": ctx.upstream_fingerprint(&ctx.config.cache_dir())?,
            "inputs": hash_inputs(&inputs)?,
        }));
        if ctx.skip(&dir, &fp, &format!("train fold {fold}")) {
            continue;
        }
        std::fs::create_dir_all(&dir)?;
        let results: Vec<anyhow::Result<TrainedModel>> = if ctx.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = ctx
                    .models
                    .iter()
                    .map(|m| {
                        let (cache, folds, dir) = (&cache, &folds, &dir);
                        s.spawn(move || train_one(ctx, cache, folds, fold, m, dir))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("training thread panicked")))).collect()
            })
        } else {
            ctx.models.iter().map(|m| train_one(ctx, &cache, &folds, fold, m, &dir)).collect()
        };
        let mut trained = Vec::new();
        for (m, r) in ctx.models.iter().zip(results) {
            trained.push(r.with_context(|| format!("model {} on fold {fold}", m.id))?);
        }
        let mut outputs = Vec::new();
        for t in &trained {
            outputs.push(t.checkpoint.clone());
            outputs.push(Path::new(&t.id).join(ACCESS_LOG_FILE));
            outputs.push(Path::new(&t.id).join("history.csv"));
        }
        let seeds = trained.iter().map(|t| (t.id.clone(), t.seed)).collect();
        let m = ctx.manifest(Stage::Train, fp, &inputs, outputs, seeds, json!({"fold": fold, "models": trained}))?;
        write_manifest(&dir, &m)?;
        outcome = Outcome::Ran;
    }
    Ok(outcome)
}

fn trained_models(dir: &Path) -> anyhow::Result<Vec<TrainedModel>> {
    let m = read_manifest(dir).ok_or_else(|| anyhow!("{} has no manifest; run the train stage", dir.display()))?;
    Ok(serde_json::from_value(m.details["models"].clone())?)
}

fn predict(ctx: &Context) -> anyhow::Result<Outcome> {
    let folds = ctx.folds()?;
    let cache = ctx.cache()?;
    let mut outcome = Outcome::UpToDate;
    for fold in ctx.selected_folds(folds.k)? {
        let train_dir = ctx.train_dir(fold);
        let trained = trained_models(&train_dir)?;
        let dir = ctx.predict_dir(fold);
        let mut inputs = vec![ctx.splits_dir().join(FOLDS_FILE), ctx.config.cache_dir().join(CACHE_MANIFEST)];
        inputs.extend(trained.iter().map(|t| train_dir.join(&t.checkpoint)));
        let fp = fingerprint(&json!({
            "stage": "predict",
            "fold": fold,
            "cache": ctx.upstream_fingerprint(&ctx.config.cache_dir())?,
            "inputs": hash_inputs(&inputs)?,
        }));
        if ctx.skip(&dir, &fp, &format!("predict fold {fold}")) {
            continue;
        }
        std::fs::create_dir_all(&dir)?;
        let plan = &folds.folds[fold];
        let guard = GuardedSource::new(&cache, plan);
        let mut records = Vec::new();
        let mut failure = None;
        'models: for t in &trained {
            let (model, _) = load_checkpoint(&train_dir.join(&t.checkpoint))?;
            for id in &plan.test_ids {
                match guard.load(id, AccessPurpose::Predict) {
                    Ok((metas, x)) => {
                        records.extend(predict_batch(&model, &t.id, &x, &metas, ctx.config.predict_batch_size)?)
                    }
                    Err(e) => {
                        failure = Some(e);
                        break 'models;
                    }
                }
            }
        }
        write_access_log(&dir.join(ACCESS_LOG_FILE), &guard.access_log())?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        write_predictions(&dir.join(PREDICTIONS_FILE), &records)?;
        let outputs = vec![PREDICTIONS_FILE.into(), ACCESS_LOG_FILE.into()];
        let details = json!({"fold": fold, "test_subjects": plan.test_ids.len(), "records": records.len()});
        let m = ctx.manifest(Stage::Predict, fp, &inputs, outputs, BTreeMap::new(), details)?;
        write_manifest(&dir, &m)?;
        log::info!("predict: fold {fold}, {} records for {} test subjects", records.len(), plan.test_ids.len());
        outcome = Outcome::Ran;
    }
    Ok(outcome)
}

/// Reports for one scope (a fold or the pool) at one granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReports {
    pub scope: String,
    pub granularity: String,
    pub reports: Vec<ReportSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub voting: Voting,
    pub models: Vec<String>,
    pub folds: Vec<usize>,
    /// Patches where no class had a majority, per scope.
    pub tie_breaks: BTreeMap<String, usize>,
    pub scopes: Vec<ScopeReports>,
}

/// Matrices for every model plus the ensemble, keyed in display order.
type Matrices = Vec<(String, ConfusionMatrix)>;

struct FoldMatrices {
    patch: Matrices,
    subject: Matrices,
    ties: usize,
    subject_rows: Vec<(String, ClassLabel, ClassLabel)>,
}

fn record(m: &mut Matrices, id: &str, truth: ClassLabel, pred: ClassLabel) {
    let slot = match m.iter().position(|(k, _)| k == id) {
        Some(i) => i,
        None => {
            m.push((id.to_string(), ConfusionMatrix::default()));
            m.len() - 1
        }
    };
    m[slot].1 .0[truth.index()][pred.index()] += 1;
}

fn score_fold(records: &[PredictionRecord], cache: &PatchCache, models: &[String], voting: Voting) -> anyhow::Result<FoldMatrices> {
    let truth = |id: &str| cache.label_of(id).ok_or_else(|| anyhow!("subject {id} is not in the patch cache"));
    let ids: Vec<String> = models.iter().cloned().chain([ENSEMBLE_ID.to_string()]).collect();
    let mut patch: Matrices = ids.iter().map(|i| (i.clone(), ConfusionMatrix::default())).collect();
    let mut subject: Matrices = patch.clone();
    let mut votes: BTreeMap<(String, String), Vec<(PatchMeta, ClassLabel)>> = BTreeMap::new();
    let mut ties = 0;

    for r in records {
        let t = truth(&r.subject_id)?;
        record(&mut patch, &r.model_id, t, r.predicted);
        let meta = PatchMeta { subject_id: r.subject_id.clone(), plane: r.plane, slice_index: r.slice_index, label: t };
        votes.entry((r.model_id.clone(), r.subject_id.clone())).or_default().push((meta, r.predicted));
    }
    for ((subject_id, plane, slice_index), group) in group_by_patch(records)? {
        let t = truth(&subject_id)?;
        let label = match voting {
            Voting::Hard => {
                let outcome = majority_vote_detailed(&group)?;
                ties += outcome.tie_break as usize;
                outcome.label
            }
            Voting::Soft => soft_vote(&group)?,
        };
        record(&mut patch, ENSEMBLE_ID, t, label);
        let meta = PatchMeta { subject_id: subject_id.clone(), plane, slice_index, label: t };
        votes.entry((ENSEMBLE_ID.to_string(), subject_id)).or_default().push((meta, label));
    }
    let mut subject_rows = Vec::new();
    for ((model_id, subject_id), v) in &votes {
        let t = truth(subject_id)?;
        let pred = aggregate_subject(v)?;
        record(&mut subject, model_id, t, pred);
        if model_id == ENSEMBLE_ID {
            subject_rows.push((subject_id.clone(), t, pred));
        }
    }
    Ok(FoldMatrices { patch, subject, ties, subject_rows })
}

fn reports(scope: &str, granularity: &str, matrices: &Matrices) -> anyhow::Result<ScopeReports> {
    let reports = matrices
        .iter()
        .map(|(id, m)| Ok(ReportSet { name: id.clone(), report: classification_report(m)? }))
        .collect::<anyhow::Result<_>>()?;
    Ok(ScopeReports { scope: scope.into(), granularity: granularity.into(), reports })
}

fn evaluate(ctx: &Context) -> anyhow::Result<Outcome> {
    let folds = ctx.folds()?;
    let selected = ctx.selected_folds(folds.k)?;
    let dir = ctx.evaluate_dir();
    let mut inputs = vec![ctx.config.cache_dir().join(CACHE_MANIFEST)];
    for &f in &selected {
        let p = ctx.predict_dir(f).join(PREDICTIONS_FILE);
        if !p.is_file() {
            bail!("no predictions for fold {f}; run the predict stage");
        }
        inputs.push(p);
    }
    let fp = fingerprint(&json!({
        "stage": "evaluate",
        "folds": selected,
        "voting": ctx.config.ensemble.voting,
        "inputs": hash_inputs(&inputs)?,
    }));
    if ctx.skip(&dir, &fp, "evaluate") {
        return Ok(Outcome::UpToDate);
    }
    let cache = ctx.cache()?;
    let models: Vec<String> = ctx.models.iter().map(|m| m.id.clone()).collect();
    let voting = ctx.config.ensemble.voting;

    let mut scopes = Vec::new();
    let mut tie_breaks = BTreeMap::new();
    let mut pooled_patch: Option<Matrices> = None;
    let mut pooled_subject: Option<Matrices> = None;
    let mut subject_csv = String::from("fold,subject_id,truth,predicted\n");
    let add = |acc: &mut Option<Matrices>, m: &Matrices| match acc {
        Some(a) => a.iter_mut().zip(m).for_each(|((_, x), (_, y))| x.add(y)),
        None => *acc = Some(m.clone()),
    };
    for &f in &selected {
        let records = read_predictions(&ctx.predict_dir(f).join(PREDICTIONS_FILE))?;
        let fm = score_fold(&records, &cache, &models, voting).with_context(|| format!("scoring fold {f}"))?;
        let scope = format!("fold{f}");
        scopes.push(reports(&scope, "subject", &fm.subject)?);
        scopes.push(reports(&scope, "patch", &fm.patch)?);
        tie_breaks.insert(scope, fm.ties);
        for (id, t, p) in &fm.subject_rows {
            subject_csv.push_str(&format!("{f},{id},{},{}\n", t.index(), p.index()));
        }
        add(&mut pooled_patch, &fm.patch);
        add(&mut pooled_subject, &fm.subject);
    }
    tie_breaks.insert("pooled".into(), tie_breaks.values().sum());
    scopes.insert(0, reports("pooled", "patch", &pooled_patch.expect("at least one fold"))?);
    scopes.insert(0, reports("pooled", "subject", &pooled_subject.expect("at least one fold"))?);

    let metrics = Metrics { voting, models, folds: selected.clone(), tie_breaks, scopes };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    std::fs::write(dir.join("ensemble_subjects.csv"), subject_csv)?;
    let outputs = vec![METRICS_FILE.into(), "ensemble_subjects.csv".into()];
    let m = ctx.manifest(Stage::Evaluate, fp, &inputs, outputs, BTreeMap::new(), json!({"folds": selected}))?;
    write_manifest(&dir, &m)?;
    log::info!("evaluate: scored folds {selected:?}");
    Ok(Outcome::Ran)
}

fn report(ctx: &Context) -> anyhow::Result<Outcome> {
    let metrics_path = ctx.evaluate_dir().join(METRICS_FILE);
    if !metrics_path.is_file() {
        bail!("no metrics; run the evaluate stage");
    }
    let dir = ctx.report_dir();
    let inputs = [metrics_path.clone()];
    let fp = fingerprint(&json!({"stage": "report", "inputs": hash_inputs(&inputs)?}));
    if ctx.skip(&dir, &fp, "report") {
        return Ok(Outcome::UpToDate);
    }
    let metrics: Metrics = serde_json::from_str(&std::fs::read_to_string(&metrics_path)?)?;
    let rendered = render_report(&metrics);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.txt"), &rendered.text)?;
    std::fs::write(dir.join("report.csv"), &rendered.csv)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rendered.json)? + "\n")?;
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&rendered.summary)? + "\n")?;
    let outputs = ["report.txt", "report.csv", "report.json", SUMMARY_FILE].map(PathBuf::from).to_vec();
    let m = ctx.manifest(Stage::Report, fp, &inputs, outputs, BTreeMap::new(), serde_json::Value::Null)?;
    write_manifest(&dir, &m)?;
    log::info!("report: written to {}", dir.display());
    Ok(Outcome::Ran)
}

pub struct RenderedReport {
    pub text: String,
    pub csv: String,
    pub json: serde_json::Value,
    pub summary: serde_json::Value,
}

pub fn render_report(metrics: &Metrics) -> RenderedReport {
    let mut text = String::new();
    let mut csv = String::from("scope,granularity,report,class,precision,recall,f1,support\n");
    let mut sections = Vec::new();
    let mut summary = serde_json::Map::new();
    for s in &metrics.scopes {
        let tables = render_tables(&s.reports);
        text.push_str(&format!("== {} / {} level ==\n\n{}\n", s.scope, s.granularity, tables.text));
        for line in tables.csv.lines().skip(1) {
            csv.push_str(&format!("{},{},{line}\n", s.scope, s.granularity));
        }
        sections.push(json!({"scope": s.scope, "granularity": s.granularity, "tables": tables.json}));
        let acc: serde_json::Map<String, serde_json::Value> =
            s.reports.iter().map(|r| (r.name.clone(), json!(r.report.accuracy))).collect();
        summary
            .entry(format!("{}_accuracy", s.granularity))
            .or_insert_with(|| json!({}))
            .as_object_mut()
            .expect("object")
            .insert(s.scope.clone(), acc.into());
    }
    summary.insert("voting".into(), json!(metrics.voting));
    summary.insert("folds".into(), json!(metrics.folds));
    summary.insert("models".into(), json!(metrics.models));
    summary.insert("tie_breaks".into(), json!(metrics.tie_breaks));
    RenderedReport {
        text,
        csv,
        json: json!({"voting": metrics.voting, "tie_breaks": metrics.tie_breaks, "sections": sections}),
        summary: summary.into(),
    }
}
