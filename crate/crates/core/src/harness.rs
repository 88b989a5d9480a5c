//! Training, cross-validation, window-size selection and feature-map export.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::{stratified_kfold, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, FoldMetrics, MeanStd};
use crate::model::{predict, Gabmil, GabmilConfig, DECISION_THRESHOLD};
use crate::nn::{AdamConfig, AdamState};
use crate::seed;
use crate::simm::{GridLayout, SimmVariant};
use crate::tensor::Tensor;

const TAG_INIT: u64 = 11;
const TAG_SHUFFLE: u64 = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub model: GabmilConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Window sizes to choose from per fold by validation loss; empty keeps
    /// the configured size.
    pub window_candidates: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            model: GabmilConfig::default(),
            epochs: 50,
            lr: 1e-4,
            weight_decay: 1e-3,
            folds: 10,
            val_fraction: 0.1,
            seed: 0,
            out: None,
            window_candidates: Vec::new(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "manifest",
    "out",
    "seed",
    "epochs",
    "lr",
    "weight_decay",
    "folds",
    "val_fraction",
    "variant",
    "window",
    "grid",
    "expansion",
    "input_dim",
    "compressed_dim",
    "attention_dim",
    "num_classes",
    "gated",
    "window_candidates",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Parses `a..b` (inclusive) or a comma-separated list.
pub fn parse_sizes(value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((a, b)) = value.split_once("..") {
        let b = b.trim_start_matches('=');
        let (a, b): (usize, usize) = (parse("range", a)?, parse("range", b)?);
        if a > b {
            return Err(Error::Config(format!("empty range {value}")));
        }
        return Ok((a..=b).collect());
    }
    value.split(',').map(|v| parse("list", v)).collect()
}

impl RunConfig {
    /// The defaults used for the synthetic benchmark: small model dims for
    /// 64-dimensional bags, the standard optimizer recipe.
    pub fn synthetic() -> Self {
        RunConfig {
            model: GabmilConfig::synthetic(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value.trim())),
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "variant" => m.simm.variant = parse(key, value)?,
            "window" => m.simm.window = parse(key, value)?,
            "grid" => m.simm.grid = parse(key, value)?,
            "expansion" => m.simm.expansion = parse(key, value)?,
            "input_dim" => m.input_dim = parse(key, value)?,
            "compressed_dim" => m.compressed_dim = parse(key, value)?,
            "attention_dim" => m.attention_dim = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "gated" => m.gated = parse(key, value)?,
            "window_candidates" => self.window_candidates = parse_sizes(value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        if let Some(p) = &self.manifest {
            kv("manifest", p.display().to_string());
        }
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("folds", self.folds.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("variant", m.simm.variant.to_string());
        kv("window", m.simm.window.to_string());
        kv("grid", m.simm.grid.to_string());
        kv("expansion", m.simm.expansion.to_string());
        kv("input_dim", m.input_dim.to_string());
        kv("compressed_dim", m.compressed_dim.to_string());
        kv("attention_dim", m.attention_dim.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("gated", m.gated.to_string());
        if !self.window_candidates.is_empty() {
            let list: Vec<String> = self.window_candidates.iter().map(|p| p.to_string()).collect();
            kv("window_candidates", list.join(","));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be > 0 and weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if self.window_candidates.contains(&0) {
            return Err(Error::Config("window candidates must be >= 1".into()));
        }
        self.model.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// The same run with the mixing window of the active variant set to `p`.
    pub fn with_window(&self, p: usize) -> Self {
        let mut c = self.clone();
        let s = &mut c.model.simm;
        match s.variant {
            SimmVariant::Grid => s.grid = p,
            SimmVariant::Both => {
                s.window = p;
                s.grid = p;
            }
            _ => s.window = p,
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_loss)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{:.8}\t{:.8}", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }
}

/// A trained model plus the ids that influenced it.
#[derive(Clone, Debug)]
pub struct TrainedFold {
    pub model: Gabmil<f32>,
    pub log: TrainLog,
    /// Ids whose gradients reached an optimizer step.
    pub update_ids: BTreeSet<String>,
    /// Ids whose losses fed a logged or selection metric.
    pub selection_ids: BTreeSet<String>,
}

impl TrainedFold {
    pub fn checkpoint(&self) -> Vec<u8> {
        self.model.to_checkpoint()
    }
}

fn features(ds: &Dataset, i: usize) -> (&Tensor<f32>, &GridLayout, usize) {
    (&ds.bags[i].features, &ds.layouts[i], ds.bags[i].label as usize)
}

fn mean_loss(model: &Gabmil<f32>, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &i in idx {
        let (x, layout, y) = features(ds, i);
        total += f64::from(model.loss(x, layout, y)?);
    }
    Ok(total / idx.len() as f64)
}

/// Trains one model on `split.train` with one bag per Adam step, logging the
/// mean train and validation loss per epoch. The final-epoch weights are kept.
pub fn train_fold(ds: &Dataset, split: &FoldSplit, config: &RunConfig) -> Result<TrainedFold> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Degenerate(format!("fold {} has no training bags", split.fold)));
    }
    let train = ds.indices(&split.train)?;
    let val = ds.indices(&split.val)?;
    let fold = split.fold as u64;
    let mut model = Gabmil::<f32>::new(config.model, seed::derive(config.seed, &[TAG_INIT, fold]))?;
    let mut adam = AdamState::new(config.adam(), &model.store);
    let mut order = train.clone();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(config.seed, &[TAG_SHUFFLE, fold, epoch as u64]));
        let mut total = 0.0;
        for &i in &order {
            let (x, layout, y) = features(ds, i);
            model.store.zero_grad();
            let loss = model.accumulate_loss_grad(x, layout, y).map_err(|e| {
                Error::NonFinite(format!("fold {} epoch {} bag {}: {e}", split.fold, epoch, ds.bags[i].id))
            })?;
            adam.step(&mut model.store)?;
            total += f64::from(loss);
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(&model, ds, &val)?;
        log::debug!("fold {} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}", split.fold);
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainedFold {
        model,
        log,
        update_ids: split.train.iter().cloned().collect(),
        selection_ids: split.val.iter().cloned().collect(),
    })
}

/// Positive-class probabilities for the given bags.
pub fn score(model: &Gabmil<f32>, ds: &Dataset, ids: &[String]) -> Result<Vec<f64>> {
    ds.indices(ids)?
        .into_iter()
        .map(|i| {
            let (x, layout, _) = features(ds, i);
            let (logits, _) = model.logits(x, layout)?;
            Ok(predict(&logits)?.probability)
        })
        .collect()
}

/// Test metrics for one fold; `None` with a reason when the fold is degenerate.
pub fn evaluate(model: &Gabmil<f32>, ds: &Dataset, split: &FoldSplit) -> Result<std::result::Result<FoldMetrics, String>> {
    let scores = score(model, ds, &split.test)?;
    let labels: Vec<u8> = ds.indices(&split.test)?.into_iter().map(|i| ds.bags[i].label).collect();
    match FoldMetrics::compute(split.fold, &scores, &labels, DECISION_THRESHOLD) {
        Ok(m) => Ok(Ok(m)),
        Err(Error::Degenerate(reason)) => Ok(Err(reason)),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSelection {
    pub best: usize,
    /// `(candidate, final validation loss)` in candidate order.
    pub losses: Vec<(usize, f64)>,
}

/// Trains one model per candidate window size on the fold's training bags and
/// returns the size with the lowest final validation loss (ties go to the
/// smaller size).
pub fn select_window_size(ds: &Dataset, split: &FoldSplit, config: &RunConfig, candidates: &[usize]) -> Result<WindowSelection> {
    match candidates {
        [] => Err(Error::Config("no window size candidates".into())),
        [only] => Ok(WindowSelection {
            best: *only,
            losses: Vec::new(),
        }),
        _ => {
            if split.val.is_empty() {
                return Err(Error::Degenerate(format!(
                    "fold {} has no validation bags for window selection",
                    split.fold
                )));
            }
            let mut sorted = candidates.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            let mut losses = Vec::with_capacity(sorted.len());
            let mut best = (sorted[0], f64::INFINITY);
            for &p in &sorted {
                let loss = train_fold(ds, split, &config.with_window(p))?.log.final_val_loss();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("validation loss for window {p} is {loss}")));
                }
                if loss < best.1 {
                    best = (p, loss);
                }
                losses.push((p, loss));
            }
            Ok(WindowSelection { best: best.0, losses })
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub window: Option<usize>,
    pub trained: TrainedFold,
    pub metrics: std::result::Result<FoldMetrics, String>,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub config: RunConfig,
    pub folds: Vec<FoldOutcome>,
    pub report: EvalReport,
}

pub fn splits(ds: &Dataset, config: &RunConfig) -> Result<Vec<FoldSplit>> {
    stratified_kfold(&ds.ids(), &ds.labels(), config.folds, config.val_fraction, config.seed)
}

/// Stratified k-fold training and test evaluation. With window candidates
/// configured, the window size is re-selected per fold on that fold's
/// validation bags.
pub fn cross_validate(ds: &Dataset, config: &RunConfig) -> Result<CvResult> {
    config.validate()?;
    let mut folds = Vec::with_capacity(config.folds);
    let mut report = EvalReport::default();
    for split in splits(ds, config)? {
        let (window, run) = if config.window_candidates.is_empty() || config.model.simm.variant == SimmVariant::None {
            (None, config.clone())
        } else {
            let sel = select_window_size(ds, &split, config, &config.window_candidates)?;
            log::info!("fold {}: selected window {}", split.fold, sel.best);
            (Some(sel.best), config.with_window(sel.best))
        };
        let trained = train_fold(ds, &split, &run)?;
        let metrics = evaluate(&trained.model, ds, &split)?;
        match &metrics {
            Ok(m) => report.folds.push(*m),
            Err(reason) => {
                log::warn!("fold {} skipped: {reason}", split.fold);
                report.skipped.push((split.fold, reason.clone()));
            }
        }
        folds.push(FoldOutcome {
            split,
            window,
            trained,
            metrics,
        });
    }
    Ok(CvResult {
        config: config.clone(),
        folds,
        report,
    })
}

fn split_tsv(split: &FoldSplit) -> String {
    let mut out = String::from("slide_id\tpart\n");
    for (part, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for id in ids {
            let _ = writeln!(out, "{id}\t{part}");
        }
    }
    out
}

/// Parses a `split.tsv` written by [`write_cv_outputs`].
pub fn read_split(path: &Path, fold: usize) -> Result<FoldSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = FoldSplit {
        fold,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#') && *l != "slide_id\tpart") {
        match line.split_once('\t') {
            Some((id, "train")) => split.train.push(id.to_string()),
            Some((id, "val")) => split.val.push(id.to_string()),
            Some((id, "test")) => split.test.push(id.to_string()),
            _ => return Err(Error::Config(format!("{}: bad split line {line:?}", path.display()))),
        }
    }
    Ok(split)
}

/// A fold restored from a run directory.
#[derive(Clone, Debug)]
pub struct SavedFold {
    pub split: FoldSplit,
    pub window: Option<usize>,
    pub model: Gabmil<f32>,
}

/// Reads `run.cfg` from a directory written by [`write_cv_outputs`].
pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    config.apply_file(&dir.join("run.cfg"))?;
    Ok(config)
}

/// Restores fold `fold` of a run: its split, selected window and weights.
pub fn load_fold(dir: &Path, config: &RunConfig, fold: usize) -> Result<SavedFold> {
    let fd = dir.join(format!("fold_{fold}"));
    let split_path = fd.join("split.tsv");
    let split = read_split(&split_path, fold)?;
    let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let window = text
        .lines()
        .find_map(|l| l.strip_prefix("# window="))
        .map(|v| parse::<usize>("window", v))
        .transpose()?;
    let run = window.map_or_else(|| config.clone(), |p| config.with_window(p));
    let mut model = Gabmil::<f32>::new(run.model, 0)?;
    let ckpt = fd.join("checkpoint.gmck");
    model.load_checkpoint(&fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?)?;
    Ok(SavedFold { split, window, model })
}

/// Fold indices present in a run directory, ascending.
pub fn run_folds(dir: &Path) -> Result<Vec<usize>> {
    let mut folds: Vec<usize> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("fold_")?.parse().ok())
        .collect();
    folds.sort_unstable();
    if folds.is_empty() {
        return Err(Error::Config(format!("{} contains no fold_<i> directories", dir.display())));
    }
    Ok(folds)
}

/// Re-scores every saved fold on its test bags. Returns the report and a
/// `fold, slide_id, label, probability` table.
pub fn evaluate_run(ds: &Dataset, dir: &Path, config: &RunConfig) -> Result<(EvalReport, String)> {
    let mut report = EvalReport::default();
    let mut scores = String::from("fold\tslide_id\tlabel\tprobability\n");
    for fold in run_folds(dir)? {
        let saved = load_fold(dir, config, fold)?;
        let probs = score(&saved.model, ds, &saved.split.test)?;
        for (id, p) in saved.split.test.iter().zip(&probs) {
            let label = ds.bags[ds.index_of(id).unwrap_or_default()].label;
            let _ = writeln!(scores, "{fold}\t{id}\t{label}\t{p:.6}");
        }
        match evaluate(&saved.model, ds, &saved.split)? {
            Ok(m) => report.folds.push(m),
            Err(reason) => report.skipped.push((fold, reason)),
        }
    }
    Ok((report, scores))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `run.cfg`, `report.tsv` and per-fold `checkpoint.gmck`, `log.tsv`
/// and `split.tsv` under `dir`.
pub fn write_cv_outputs(dir: &Path, cv: &CvResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("run.cfg"), cv.config.to_text())?;
    for f in &cv.folds {
        let fd = dir.join(format!("fold_{}", f.split.fold));
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        write(&fd.join("checkpoint.gmck"), f.trained.checkpoint())?;
        write(&fd.join("log.tsv"), f.trained.log.to_tsv())?;
        let mut split = split_tsv(&f.split);
        if let Some(p) = f.window {
            split.insert_str(0, &format!("# window={p}\n"));
        }
        write(&fd.join("split.tsv"), split)?;
    }
    write(&dir.join("report.tsv"), cv.report.to_tsv())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub auprc: MeanStd,
    pub auc: MeanStd,
}

/// Cross-validates once per window size.
pub fn sweep(ds: &Dataset, config: &RunConfig, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("no window sizes to sweep".into()));
    }
    sizes
        .iter()
        .map(|&p| {
            let mut run = config.with_window(p);
            run.window_candidates.clear();
            let cv = cross_validate(ds, &run)?;
            log::info!("window {p}: auprc {:.4}", cv.report.auprc().mean);
            Ok(SweepRow {
                size: p,
                auprc: cv.report.auprc(),
                auc: cv.report.auc(),
            })
        })
        .collect()
}

/// Size with the highest mean AUPRC; ties go to the smaller size.
pub fn sweep_optimum(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<&SweepRow> = None;
    for r in rows {
        if best.is_none_or(|b| r.auprc.mean > b.auprc.mean || (r.auprc.mean == b.auprc.mean && r.size < b.size)) {
            best = Some(r);
        }
    }
    best.map(|r| r.size)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("window\tauprc_mean\tauprc_std\tauc_mean\tauc_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.size, r.auprc.mean, r.auprc.std, r.auc.mean, r.auc.std
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Compressed embeddings entering the mixing module.
    Input,
    /// What the mixing module adds to its input.
    Mixed,
    /// Mixing module output (input plus mixed).
    Residual,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "input" => Ok(Stage::Input),
            "mixed" => Ok(Stage::Mixed),
            "residual" => Ok(Stage::Residual),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected input, mixed or residual"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::Mixed => "mixed",
            Stage::Residual => "residual",
        })
    }
}

/// Channel-averaged embeddings on the bag's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; `None` for unoccupied cells.
    pub values: Vec<Option<f64>>,
}

impl FeatureMap {
    /// Occupied cells min-max scaled to 0..=255 (255 when all are equal);
    /// unoccupied cells are 0.
    pub fn pixels(&self) -> Vec<u8> {
        let occupied = self.values.iter().flatten();
        let lo = occupied.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = occupied.copied().fold(f64::NEG_INFINITY, f64::max);
        self.values
            .iter()
            .map(|v| match v {
                None => 0,
                Some(_) if hi <= lo => 255,
                Some(v) => ((v - lo) / (hi - lo) * 255.0).round() as u8,
            })
            .collect()
    }

    /// Binary greyscale PGM (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.pixels());
        out
    }

    /// One line per grid row, tab-separated; `-` marks unoccupied cells.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| match self.values[r * self.cols + c] {
                    Some(v) => format!("{v:.6}"),
                    None => "-".into(),
                })
                .collect();
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

pub fn feature_map(model: &Gabmil<f32>, features: &Tensor<f32>, layout: &GridLayout, stage: Stage) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let trace = model.forward(&mut tape, features, layout)?;
    let input = tape.value(trace.compressed);
    let output = tape.value(trace.mixed);
    let (n, c) = input.dims2("feature map")?;
    let mut values = vec![None; layout.rows * layout.cols];
    for (i, &(r, col)) in layout.cells.iter().enumerate() {
        let a = &input.data()[i * c..(i + 1) * c];
        let b = &output.data()[i * c..(i + 1) * c];
        let sum: f64 = match stage {
            Stage::Input => a.iter().map(|&v| f64::from(v)).sum(),
            Stage::Residual => b.iter().map(|&v| f64::from(v)).sum(),
            Stage::Mixed => a.iter().zip(b).map(|(&x, &y)| f64::from(y) - f64::from(x)).sum(),
        };
        values[r * layout.cols + col] = Some(sum / c as f64);
    }
    debug_assert_eq!(n, layout.len());
    Ok(FeatureMap {
        rows: layout.rows,
        cols: layout.cols,
        values,
    })
}

/// Writes `featmap_<stage>.pgm` and `featmap_<stage>.txt` under `dir`.
pub fn export_feature_map(dir: &Path, map: &FeatureMap, stage: Stage) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pgm = dir.join(format!("featmap_{stage}.pgm"));
    let txt = dir.join(format!("featmap_{stage}.txt"));
    write(&pgm, map.to_pgm())?;
    write(&txt, map.to_text())?;
    Ok((pgm, txt))
}
