//! Run configuration and the train / eval / relabel / gradcheck drivers
//! behind the command-line tool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sonotag_tensor::{gradcheck::primitive_suite, GradCheckOptions, Tape, Tensor};

use crate::augment::{cutout, derive_seed, mixup, sample_lambda, spec_augment, AugmentConfig};
use crate::data::{relabel, DatasetIndex, RelabelMode, RelabelSummary, Split};
use crate::dsp::{load_wav, read_feature_cache, resample, write_feature_cache, LogMel, LogMelConfig, Spectrogram};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_predictions, EvalReport};
use crate::loss::{joint_loss, LossWeights, TargetBundle};
use crate::nn::{gradient_check, Checkpoint, MetadataRecord, Model, ModelConfig};
use crate::optim::{clip_global_norm, OptimConfig, Optimizer};
use crate::taxonomy::{LabelVector, Taxonomy};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST: &str = "best";
pub const LAST: &str = "last";

/// Names accepted as selection and stopping metrics.
pub const METRICS: [&str; 6] = [
    "coarse_micro_auprc",
    "coarse_micro_f1",
    "coarse_macro_auprc",
    "fine_micro_auprc",
    "fine_micro_f1",
    "fine_macro_auprc",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `annotations.csv` and `audio/`.
    pub root: PathBuf,
    /// Alternative annotation file, e.g. a relabeled one.
    pub annotations: Option<PathBuf>,
    /// Taxonomy file; the bundled one when absent.
    pub taxonomy: Option<PathBuf>,
    pub train_splits: Vec<Split>,
    /// Splits evaluated after every epoch for checkpoint selection.
    pub val_splits: Vec<Split>,
    /// Directory of cached log-mel features; features are computed in memory
    /// when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            annotations: None,
            taxonomy: None,
            train_splits: vec![Split::Train],
            val_splits: vec![Split::Validate],
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Validation metric that picks the `best` checkpoint.
    pub selection_metric: String,
    pub f1_threshold: f64,
    /// Also evaluate the (unaugmented) training clips every epoch.
    pub eval_train: bool,
    /// Stop once every listed metric reaches its value. Keys are
    /// `val.<metric>` or `train.<metric>`.
    pub stop_at: BTreeMap<String, f64>,
    /// Stop after this many epochs without a new best selection metric.
    pub patience: Option<usize>,
    /// Continue from `out_dir/last` when it exists.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            out_dir: PathBuf::from("runs/default"),
            selection_metric: "coarse_macro_auprc".into(),
            f1_threshold: 0.5,
            eval_train: false,
            stop_at: BTreeMap::new(),
            patience: None,
            resume: false,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses a TOML config. Relative paths are resolved against the
    /// directory of the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data.root);
        fix(&mut cfg.train.out_dir);
        for p in [&mut cfg.data.annotations, &mut cfg.data.taxonomy, &mut cfg.data.cache_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !METRICS.contains(&t.selection_metric.as_str()) {
            return Err(Error::Config(format!("unknown selection metric {:?}", t.selection_metric)));
        }
        for key in t.stop_at.keys() {
            let ok = match key.split_once('.') {
                Some(("val", m)) => METRICS.contains(&m),
                Some(("train", m)) => METRICS.contains(&m) && t.eval_train,
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "train.stop_at key {key:?} must be val.<metric> or (with eval_train) train.<metric>"
                )));
            }
        }
        if self.data.train_splits.is_empty() {
            return Err(Error::Config("data.train_splits is empty".into()));
        }
        if self.augment.mixup && !(self.augment.mixup_alpha > 0.0) {
            return Err(Error::Config("augment.mixup_alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        match &self.data.taxonomy {
            Some(p) => Taxonomy::load(p),
            None => Ok(Taxonomy::bundled()),
        }
    }

    pub fn dataset(&self, tax: &Taxonomy) -> Result<DatasetIndex> {
        match &self.data.annotations {
            Some(a) => DatasetIndex::load_with(&self.data.root, a, tax),
            None => DatasetIndex::load(&self.data.root, tax),
        }
    }
}

/// Log-mel features of every clip in `index`, in record order. With a
/// cache directory, valid cache files are reused and missing ones written.
pub fn featurize(index: &DatasetIndex, cache_dir: Option<&Path>) -> Result<Vec<Spectrogram>> {
    let extractor = LogMel::new(LogMelConfig::default())?;
    let hash = extractor.config().hash();
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    index
        .records
        .iter()
        .map(|r| {
            let cached = cache_dir.map(|d| d.join(format!("{}.feat", r.clip_id)));
            if let Some(p) = &cached {
                if p.is_file() {
                    if let Ok(s) = read_feature_cache(p, hash) {
                        return Ok(s);
                    }
                }
            }
            let wave = load_wav(&r.audio)?;
            let wave = resample(&wave, extractor.config().sample_rate);
            let spec = extractor.compute(&wave)?;
            if let Some(p) = &cached {
                write_feature_cache(p, &spec)?;
            }
            Ok(spec)
        })
        .collect()
}

/// Probabilities for every clip, computed in batches.
pub fn predict_batched(
    model: &Model<f32>,
    specs: &[&Spectrogram],
    meta: &[MetadataRecord],
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(specs.len());
    for (s, m) in specs.chunks(batch.max(1)).zip(meta.chunks(batch.max(1))) {
        out.extend(model.predict(s, m)?);
    }
    Ok(out)
}

fn eval_subset(
    model: &Model<f32>,
    tax: &Taxonomy,
    index: &DatasetIndex,
    features: &[Spectrogram],
    subset: &[usize],
    batch: usize,
    tau: f64,
) -> Result<(EvalReport, Vec<(String, Vec<f64>)>)> {
    let specs: Vec<&Spectrogram> = subset.iter().map(|&i| &features[i]).collect();
    let meta: Vec<MetadataRecord> = subset.iter().map(|&i| index.records[i].meta).collect();
    let preds = predict_batched(model, &specs, &meta, batch)?;
    let rows: Vec<(String, Vec<f64>)> = subset
        .iter()
        .zip(preds)
        .map(|(&i, p)| (index.records[i].clip_id.clone(), p))
        .collect();
    let truth: Vec<(String, LabelVector)> = subset
        .iter()
        .map(|&i| (index.records[i].clip_id.clone(), index.records[i].targets.clone()))
        .collect();
    let report = evaluate(&tax.layout(model.system()), &rows, &truth, tau)?;
    Ok((report, rows))
}

fn metric(report: &EvalReport, name: &str) -> f64 {
    report
        .headline()
        .iter()
        .find(|(k, _)| *k == name)
        .map_or(f64::NAN, |&(_, v)| v)
}

fn headline_json(report: &EvalReport) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        report.headline().iter().map(|&(k, v)| (k.to_string(), json!(v))).collect();
    serde_json::Value::Object(map)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Report of the last epoch on the validation splits.
    pub last_val: Option<EvalReport>,
    /// Report of the last epoch on the training splits (with `eval_train`).
    pub last_train: Option<EvalReport>,
    pub stopped_early: bool,
    pub out_dir: PathBuf,
}

/// Augmented inputs and targets of one batch.
fn build_batch(
    cfg: &RunConfig,
    index: &DatasetIndex,
    features: &[Spectrogram],
    batch: &[usize],
    epoch: u64,
) -> Result<(Vec<Spectrogram>, Vec<MetadataRecord>, Vec<TargetBundle>)> {
    let aug = &cfg.augment;
    let mut specs = Vec::with_capacity(batch.len());
    for &i in batch {
        let r = &index.records[i];
        let mut s = features[i].clone();
        if aug.spec_augment {
            s = spec_augment(&s, aug, derive_seed(cfg.seed, &r.clip_id, epoch))?;
        }
        if aug.cutout {
            s = cutout(&s, aug, derive_seed(cfg.seed, &format!("{}#cutout", r.clip_id), epoch))?;
        }
        specs.push(s);
    }
    let meta: Vec<MetadataRecord> = batch.iter().map(|&i| index.records[i].meta).collect();
    let mut targets: Vec<TargetBundle> = batch.iter().map(|&i| index.records[i].targets.clone()).collect();
    if aug.mixup && batch.len() > 1 {
        let mut mixed_specs = Vec::with_capacity(batch.len());
        let mut mixed_targets = Vec::with_capacity(batch.len());
        for k in 0..batch.len() {
            let j = (k + 1) % batch.len();
            let id = &index.records[batch[k]].clip_id;
            let lambda = sample_lambda(aug.mixup_alpha, derive_seed(cfg.seed, &format!("{id}#mixup"), epoch))?;
            // the clip keeps the larger share, so its own metadata stays representative
            let lambda = lambda.max(1.0 - lambda);
            let (s, t) = mixup((&specs[k], &targets[k]), (&specs[j], &targets[j]), lambda)?;
            mixed_specs.push(s);
            mixed_targets.push(t);
        }
        specs = mixed_specs;
        targets = mixed_targets;
    }
    Ok((specs, meta, targets))
}

fn append_log(path: &Path, line: &serde_json::Value) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs a training job described by `cfg`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let tax = cfg.taxonomy()?;
    let index = cfg.dataset(&tax)?;
    let features = featurize(&index, cfg.data.cache_dir.as_deref())?;
    train(cfg, &tax, &index, &features)
}

/// Training loop on already extracted features (aligned with
/// `index.records`). Writes `train_log.jsonl`, `best/`, `last/` and a copy
/// of the config to `cfg.train.out_dir`.
pub fn train(cfg: &RunConfig, tax: &Taxonomy, index: &DatasetIndex, features: &[Spectrogram]) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.train.out_dir;
    let train_idx: Vec<usize> = (0..index.len())
        .filter(|&i| cfg.data.train_splits.contains(&index.records[i].split))
        .collect();
    let val_idx: Vec<usize> = (0..index.len())
        .filter(|&i| cfg.data.val_splits.contains(&index.records[i].split))
        .collect();
    if train_idx.is_empty() {
        return Err(Error::Dataset("no clips in the training splits".into()));
    }
    let (frames, bands) = features[train_idx[0]].shape();
    if cfg.augment.spec_augment || cfg.augment.cutout {
        cfg.augment.validate(frames, bands)?;
    }
    let layout = tax.layout(cfg.model.system()?);

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let last_dir = out.join(LAST);
    let best_dir = out.join(BEST);

    let mut model = Model::<f32>::new(cfg.model.clone(), tax, cfg.seed)?;
    let mut opt = Optimizer::<f32>::new(cfg.optim.clone())?;
    let mut start_epoch = 0usize;
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut since_best = 0usize;

    let resumed = cfg.train.resume && last_dir.join(crate::nn::checkpoint::MANIFEST).is_file();
    if resumed {
        let ck = Checkpoint::load(&last_dir)?;
        if ck.model != cfg.model || ck.taxonomy_hash != tax.hash() {
            return Err(Error::Config(format!(
                "{} was written with a different model config or taxonomy",
                last_dir.display()
            )));
        }
        model = Model::from_params(ck.model, tax, ck.params)?;
        let (step, states) = ck
            .optimizer
            .ok_or_else(|| Error::Config(format!("{} has no optimizer state", last_dir.display())))?;
        opt.restore(step, states);
        start_epoch = ck.epoch as usize;
        best = (
            ck.metrics.get("best_epoch").copied().unwrap_or(0.0) as usize,
            ck.metrics.get("best_metric").copied().unwrap_or(f64::NEG_INFINITY),
        );
        since_best = ck.metrics.get("since_best").copied().unwrap_or(0.0) as usize;
        // drop log lines written after the checkpoint
        if let Ok(text) = fs::read_to_string(&log_path) {
            let kept: String = text.lines().take(start_epoch).map(|l| format!("{l}\n")).collect();
            fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
        }
    } else {
        for p in [&log_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        for d in [&last_dir, &best_dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
    }
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut summary = TrainSummary {
        epochs_run: start_epoch,
        best_epoch: best.0,
        best_metric: best.1,
        last_val: None,
        last_train: None,
        stopped_early: false,
        out_dir: out.clone(),
    };
    for epoch in start_epoch..cfg.train.epochs {
        let e = epoch as u64 + 1;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch-order", e)));

        let mut loss_sum = 0.0;
        let mut term_sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.train.batch_size) {
            let (specs, meta, targets) = build_batch(cfg, index, features, batch, e)?;
            let refs: Vec<&Spectrogram> = specs.iter().collect();
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let x = tape.constant(model.input_batch(&refs)?);
            let output = model.forward(&tape, &bound, x, &meta)?.output;
            let loss = joint_loss(&tape, tax, &layout, output, &targets, cfg.loss)?;
            let value = tape.value(loss.total).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step: opt.step() + 1,
                    reason: format!("loss is {value} (terms {:?})", loss.terms),
                });
            }
            let grads = tape.backward(loss.total)?;
            let mut grads = bound.gradients(&model.params, &grads);
            drop(tape);
            if let Some(max) = cfg.optim.grad_clip {
                let mut slices: Vec<&mut [f32]> = grads.values_mut().map(|g| g.data_mut()).collect();
                clip_global_norm(&mut slices, max);
            }
            opt.begin_step();
            for (name, g) in &grads {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step: opt.step(),
                        reason: format!("non-finite gradient for {name}"),
                    });
                }
                opt.update(name, model.params.get_mut(name)?.data_mut(), g.data())?;
            }
            loss_sum += value;
            for (k, v) in &loss.terms {
                *term_sums.entry(k).or_default() += v;
            }
            batches += 1;
        }

        let bs = cfg.train.batch_size;
        let tau = cfg.train.f1_threshold;
        let val = if val_idx.is_empty() {
            None
        } else {
            Some(eval_subset(&model, tax, index, features, &val_idx, bs, tau)?.0)
        };
        let train_report = if cfg.train.eval_train {
            Some(eval_subset(&model, tax, index, features, &train_idx, bs, tau)?.0)
        } else {
            None
        };
        let selection_source = val.as_ref().or(train_report.as_ref());
        let selection = selection_source.map_or(f64::NAN, |r| metric(r, &cfg.train.selection_metric));
        let improved = selection > best.1 || (best.1 == f64::NEG_INFINITY && epoch == start_epoch && !resumed);
        if improved {
            best = (epoch + 1, selection);
            since_best = 0;
        } else {
            since_best += 1;
        }

        let terms: serde_json::Map<String, serde_json::Value> = term_sums
            .iter()
            .map(|(k, v)| (k.to_string(), json!(v / batches as f64)))
            .collect();
        let mut line = json!({
            "epoch": epoch + 1,
            "step": opt.step(),
            "loss": loss_sum / batches as f64,
            "terms": terms,
            "selection": selection,
            "best": improved,
        });
        if let Some(r) = &val {
            line["val"] = headline_json(r);
        }
        if let Some(r) = &train_report {
            line["train"] = headline_json(r);
        }
        append_log(&log_path, &line)?;

        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        if let Some(r) = &val {
            metrics.extend(r.headline().iter().map(|&(k, v)| (format!("val.{k}"), v)));
        }
        if let Some(r) = &train_report {
            metrics.extend(r.headline().iter().map(|&(k, v)| (format!("train.{k}"), v)));
        }
        metrics.insert("selection".into(), selection);
        let mut last_metrics = metrics.clone();
        last_metrics.insert("best_epoch".into(), best.0 as f64);
        last_metrics.insert("best_metric".into(), best.1);
        last_metrics.insert("since_best".into(), since_best as f64);
        let mut ck = Checkpoint {
            model: model.config.clone(),
            params: model.params.clone(),
            step: opt.step(),
            epoch: epoch as u64 + 1,
            metrics: last_metrics,
            taxonomy_hash: tax.hash(),
            optimizer: Some((opt.step(), opt.states().clone())),
        };
        ck.save(&last_dir)?;
        if improved {
            ck.metrics = metrics;
            ck.optimizer = None;
            ck.save(&best_dir)?;
        }

        summary.epochs_run = epoch + 1;
        summary.best_epoch = best.0;
        summary.best_metric = best.1;
        let reached = !cfg.train.stop_at.is_empty()
            && cfg.train.stop_at.iter().all(|(key, &goal)| {
                let (split, name) = key.split_once('.').expect("validated");
                let report = if split == "train" { &train_report } else { &val };
                report.as_ref().is_some_and(|r| metric(r, name) >= goal)
            });
        summary.last_val = val;
        summary.last_train = train_report;
        if reached || cfg.train.patience.is_some_and(|p| since_best >= p) {
            summary.stopped_early = epoch + 1 < cfg.train.epochs;
            break;
        }
    }
    Ok(summary)
}

/// Loads a checkpoint directory as a model, checking the taxonomy.
pub fn load_model(ckpt: &Path, tax: &Taxonomy) -> Result<(Model<f32>, Checkpoint)> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.taxonomy_hash != tax.hash() {
        return Err(Error::Checkpoint {
            path: ckpt.to_path_buf(),
            reason: format!("trained on taxonomy {}, current is {}", ck.taxonomy_hash, tax.hash()),
        });
    }
    let model = Model::from_params(ck.model.clone(), tax, ck.params.clone())?;
    Ok((model, ck))
}

/// Evaluates a checkpoint on `splits` of a dataset and writes
/// `predictions.csv` and `report.json` into `out_dir`.
pub fn cmd_eval(
    ckpt: &Path,
    index: &DatasetIndex,
    tax: &Taxonomy,
    splits: &[Split],
    cache_dir: Option<&Path>,
    out_dir: &Path,
    tau: f64,
) -> Result<EvalReport> {
    let (model, _) = load_model(ckpt, tax)?;
    if index.taxonomy_hash != tax.hash() {
        return Err(Error::Eval("dataset and checkpoint use different taxonomies".into()));
    }
    let features = featurize(index, cache_dir)?;
    let subset: Vec<usize> = (0..index.len()).filter(|&i| splits.contains(&index.records[i].split)).collect();
    if subset.is_empty() {
        return Err(Error::Eval(format!("no clips in splits {splits:?}")));
    }
    let (report, rows) = eval_subset(&model, tax, index, &features, &subset, 16, tau)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_predictions(out_dir.join("predictions.csv"), &tax.layout(model.system()), &rows)?;
    report.write(out_dir.join("report.json"))?;
    Ok(report)
}

/// Reads a protected-clip list: one clip id per line, `#` comments.
pub fn read_protected(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Replaces the targets of every unprotected clip with the checkpoint's
/// predictions and writes the new annotation file to `out`. Protected clips
/// default to the verified ones.
pub fn cmd_relabel(
    ckpt: &Path,
    index: &DatasetIndex,
    annotations: &Path,
    tax: &Taxonomy,
    protected: Option<&BTreeSet<String>>,
    mode: RelabelMode,
    cache_dir: Option<&Path>,
    out: &Path,
) -> Result<RelabelSummary> {
    let (model, _) = load_model(ckpt, tax)?;
    let protected = protected.cloned().unwrap_or_else(|| index.verified_ids());
    let features = featurize(index, cache_dir)?;
    let todo: Vec<usize> = (0..index.len())
        .filter(|&i| !protected.contains(&index.records[i].clip_id))
        .collect();
    let specs: Vec<&Spectrogram> = todo.iter().map(|&i| &features[i]).collect();
    let meta: Vec<MetadataRecord> = todo.iter().map(|&i| index.records[i].meta).collect();
    let preds = predict_batched(&model, &specs, &meta, 16)?;
    let predictions: BTreeMap<String, Vec<f64>> = todo
        .iter()
        .zip(preds)
        .map(|(&i, p)| (index.records[i].clip_id.clone(), p))
        .collect();
    let (text, summary) = relabel(annotations, tax, &tax.layout(model.system()), &predictions, &protected, mode)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(summary)
}

/// One line of the gradient-check table.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Finite-difference check of the tiny model of `system` on a fixed random
/// two-clip batch, every parameter element included.
pub fn model_gradcheck(system: u32, seed: u64) -> Result<GradCheckRow> {
    use rand::Rng;
    let tax = Taxonomy::bundled();
    let cfg = ModelConfig::tiny(system);
    let model = Model::<f64>::new(cfg.clone(), &tax, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 8;
    let data: Vec<f64> = (0..2 * frames * cfg.n_bands).map(|_| rng.random_range(-2.0..2.0)).collect();
    let input = Tensor::new([2, 1, frames, cfg.n_bands], data)?;
    let meta = [
        MetadataRecord {
            week: 7,
            day: 2,
            hour: 9,
            latitude: 40.62,
            longitude: -74.01,
        },
        MetadataRecord {
            week: 40,
            day: 6,
            hour: 22,
            latitude: 40.83,
            longitude: -73.88,
        },
    ];
    let targets: Vec<TargetBundle> = (0..2)
        .map(|_| {
            let pos: Vec<usize> = (0..tax.n_fine()).filter(|_| rng.random_bool(0.25)).collect();
            let mut t = LabelVector::from_fine(&tax, &pos);
            t.fine_mask[rng.random_range(0..tax.n_fine())] = 0.0;
            t
        })
        .collect();
    let report = gradient_check(&model, &tax, &input, &meta, &targets, GradCheckOptions::default())?;
    Ok(GradCheckRow {
        name: format!("model/system{system}"),
        max_rel_error: report.max_rel_error,
        tolerance: MODEL_TOLERANCE,
        checked: report.checked,
    })
}

/// Every primitive plus the tiny model of each system.
pub fn cmd_gradcheck() -> Result<Vec<GradCheckRow>> {
    let mut rows: Vec<GradCheckRow> = primitive_suite(GradCheckOptions::default())?
        .into_iter()
        .map(|(name, r)| GradCheckRow {
            name: format!("primitive/{name}"),
            max_rel_error: r.max_rel_error,
            tolerance: PRIMITIVE_TOLERANCE,
            checked: r.checked,
        })
        .collect();
    for system in 1..=3 {
        rows.push(model_gradcheck(system, 2024)?);
    }
    Ok(rows)
}
