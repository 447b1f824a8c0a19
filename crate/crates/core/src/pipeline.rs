//! Fold training, per-fold inference and tempered-ensemble evaluation over
//! datasets on disk.
//!
//! Layout conventions:
//!
//! * checkpoints: `{dir}/fold{j}.wnet`, logs `{dir}/fold{j}_log.csv`
//! * predictions: `{preds}/fold{j}/{id}.pfm`, intermediate maps under
//!   `{preds}/intermediate/fold{j}/`
//!
//! The training pool is the first `pool_size` scenes of the dataset in id
//! order; the remaining scenes form the test split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{self, fold_split, fold_split_shuffled, DatasetEntry, FoldPlan};
use crate::ensemble::{binarize, ensemble_with, BinaryMask, EnsembleOptions, ProbabilityMap};
use crate::metrics::{aggregate, score_image, EmptyPolicy, ImageScore, Summary};
use crate::nn::{save_checkpoint, load_checkpoint, DoubleEncoderDecoder, EncoderDecoderConfig};
use crate::optim::{adam_step, sam_step, Adam, AdamConfig, SamConfig};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] data::DatasetError),
    #[error(transparent)]
    Netpbm(#[from] data::NetpbmError),
    #[error(transparent)]
    Fold(#[from] data::FoldError),
    #[error(transparent)]
    Model(#[from] crate::nn::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error(transparent)]
    Ensemble(#[from] crate::ensemble::EnsembleError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing checkpoint for fold {fold}: {path}")]
    MissingCheckpoint { fold: usize, path: PathBuf },
    #[error("fold {fold}: {source}")]
    InFold { fold: usize, source: Box<PipelineError> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn in_fold<T>(fold: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| PipelineError::InFold { fold, source: Box::new(e) })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io(path))
}

pub fn checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}.wnet"))
}

pub fn log_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}_log.csv"))
}

pub fn fold_pred_dir(preds: &Path, fold: usize) -> PathBuf {
    preds.join(format!("fold{fold}"))
}

pub fn intermediate_pred_dir(preds: &Path, fold: usize) -> PathBuf {
    preds.join("intermediate").join(format!("fold{fold}"))
}

/// Which scenes of a dataset an operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// The first `pool_size` scenes.
    Pool,
    /// Everything after the pool.
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pool" => Ok(Split::Pool),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(format!("unknown split `{s}` (expected pool, test or all)")),
        }
    }
}

pub fn select_split(mut entries: Vec<DatasetEntry>, pool_size: usize, split: Split) -> Vec<DatasetEntry> {
    let cut = pool_size.min(entries.len());
    match split {
        Split::Pool => {
            entries.truncate(cut);
            entries
        }
        Split::Test => entries.split_off(cut),
        Split::All => entries,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: EncoderDecoderConfig,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// `None` trains with plain Adam.
    pub sam: Option<SamConfig>,
    pub folds: usize,
    pub seed: u64,
    /// Weight of the loss on the intermediate map.
    pub aux_weight: Option<f64>,
    pub pool_size: usize,
    /// Permute the pool by seed before cutting fold blocks.
    pub shuffle_folds: bool,
    pub threshold: f64,
    pub policy: EmptyPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: EncoderDecoderConfig::default(),
            epochs: 20,
            adam: AdamConfig::default(),
            sam: Some(SamConfig::default()),
            folds: 4,
            seed: 0,
            aux_weight: None,
            pool_size: 400,
            shuffle_folds: false,
            threshold: 0.5,
            policy: EmptyPolicy::Vacuous,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(PipelineError::Invalid("epochs must be positive".into()));
        }
        if self.folds < 2 {
            return Err(PipelineError::Invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return Err(PipelineError::Invalid(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if let Some(sam) = &self.sam {
            sam.validate()?;
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PipelineError::Invalid(format!("threshold must lie in (0,1), got {}", self.threshold)));
        }
        Ok(())
    }

    /// Seed of fold `j`: the model is initialised from stream 0 of it and
    /// the epoch shuffles draw from stream 1.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }

    pub fn plan(&self, n: usize, fold: usize) -> Result<FoldPlan> {
        Ok(if self.shuffle_folds {
            fold_split_shuffled(n, self.folds, fold, self.seed)?
        } else {
            fold_split(n, self.folds, fold)?
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss at the unperturbed weights over the epoch.
    pub train_loss: f64,
    /// Macro Dice of the binarized final map on the validation block.
    pub val_dice: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_dice";

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_dice).expect("string write");
    }
    s
}

/// Macro Dice of thresholded final maps.
pub fn validation_dice(model: &DoubleEncoderDecoder, entries: &[&DatasetEntry], threshold: f64, policy: EmptyPolicy) -> Result<f64> {
    if entries.is_empty() {
        return Err(PipelineError::Invalid("empty validation set".into()));
    }
    let scores = entries
        .iter()
        .map(|e| {
            let (map, _) = model.predict(&e.image)?;
            let pred = binarize(&ProbabilityMap::from_tensor(&map)?, threshold);
            Ok(score_image(&e.meta.id, &pred, &e.mask, policy)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&scores, policy)?.macro_avg.dice)
}

/// Trains one fold's model on `pool` (one image per step).
pub fn train_fold(
    pool: &[DatasetEntry],
    config: &TrainConfig,
    fold: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(DoubleEncoderDecoder, Vec<EpochLog>)> {
    config.validate()?;
    let plan = config.plan(pool.len(), fold)?;
    let seed = config.fold_seed(fold);
    let mut model = DoubleEncoderDecoder::new(config.model.clone(), derive_seed(seed, 0))?;
    let mut adam = Adam::new(config.adam, model.params());
    let mut rng = Rng::new(derive_seed(seed, 1));
    let targets: Vec<_> = pool.iter().map(|e| e.mask.to_tensor()).collect();
    let val: Vec<&DatasetEntry> = plan.val_ids.iter().map(|&i| &pool[i]).collect();
    let mut order = plan.train_ids.clone();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let (image, target) = (&pool[i].image, &targets[i]);
            let loss_fn = |m: &mut DoubleEncoderDecoder| m.loss_and_backward(image, target, config.aux_weight);
            total += match &config.sam {
                Some(sam) => sam_step(sam, &mut adam, &mut model, loss_fn)?.loss,
                None => adam_step(&mut adam, &mut model, loss_fn)?,
            };
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / order.len() as f64,
            val_dice: validation_dice(&model, &val, config.threshold, config.policy)?,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

/// Trains every fold on the pool of `data_dir`, writing checkpoints and
/// logs to `out_dir`. Returns the per-fold logs.
pub fn train_all(
    data_dir: &Path,
    out_dir: &Path,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<Vec<Vec<EpochLog>>> {
    config.validate()?;
    let pool = select_split(data::read_dataset(data_dir)?, config.pool_size, Split::Pool);
    if pool.len() < config.folds {
        return Err(PipelineError::Invalid(format!("pool of {} scenes cannot fill {} folds", pool.len(), config.folds)));
    }
    create_dir(out_dir)?;
    (0..config.folds)
        .map(|fold| {
            in_fold(fold, (|| {
                let (model, log) = train_fold(&pool, config, fold, |e| on_epoch(fold, e))?;
                save_checkpoint(&model, &checkpoint_path(out_dir, fold))?;
                write_file(&log_path(out_dir, fold), &format_log(&log))?;
                Ok(log)
            })())
        })
        .collect()
}

pub fn load_fold_models(ckpt_dir: &Path, folds: usize) -> Result<Vec<DoubleEncoderDecoder>> {
    (0..folds)
        .map(|fold| {
            let path = checkpoint_path(ckpt_dir, fold);
            if !path.is_file() {
                return Err(PipelineError::MissingCheckpoint { fold, path });
            }
            in_fold(fold, load_checkpoint(&path).map_err(Into::into))
        })
        .collect()
}

/// Writes one probability map per (fold, scene). Returns the number of
/// maps written.
pub fn predict_all(
    entries: &[DatasetEntry],
    models: &[DoubleEncoderDecoder],
    preds: &Path,
    dump_intermediate: bool,
) -> Result<usize> {
    let mut written = 0;
    for (fold, model) in models.iter().enumerate() {
        in_fold(fold, (|| {
            let dir = fold_pred_dir(preds, fold);
            let inter_dir = intermediate_pred_dir(preds, fold);
            create_dir(&dir)?;
            if dump_intermediate {
                create_dir(&inter_dir)?;
            }
            for e in entries {
                let (final_map, intermediate) = model.predict(&e.image)?;
                data::write_pfm(&ProbabilityMap::from_tensor(&final_map)?, &dir.join(format!("{}.pfm", e.meta.id)))?;
                if dump_intermediate {
                    let path = inter_dir.join(format!("{}.pfm", e.meta.id));
                    data::write_pfm(&ProbabilityMap::from_tensor(&intermediate)?, &path)?;
                }
                written += 1;
            }
            Ok(())
        })())?;
    }
    Ok(written)
}

/// Ground truth and the per-fold maps of every predicted scene.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub truth: Vec<BinaryMask>,
    /// `maps[i][j]` is fold `j`'s map of scene `i`.
    pub maps: Vec<Vec<ProbabilityMap>>,
}

impl EvalSet {
    pub fn folds(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }
}

fn fold_dirs(preds: &Path) -> Result<Vec<PathBuf>> {
    let mut folds: Vec<usize> = std::fs::read_dir(preds)
        .map_err(io(preds))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("fold")?.parse().ok())
        .collect();
    folds.sort_unstable();
    if folds.is_empty() {
        return Err(PipelineError::Invalid(format!("no fold directories under {}", preds.display())));
    }
    if folds.iter().enumerate().any(|(i, &f)| i != f) {
        return Err(PipelineError::Invalid(format!("fold directories under {} are not fold0..fold{}", preds.display(), folds.len() - 1)));
    }
    Ok(folds.into_iter().map(|f| fold_pred_dir(preds, f)).collect())
}

fn pfm_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".pfm").map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Pairs the maps under `preds` with the masks of `data_dir`. Every fold
/// directory must hold the same scene ids; `expected_folds`, if given,
/// must match the number of fold directories.
pub fn load_eval_set(data_dir: &Path, preds: &Path, expected_folds: Option<usize>) -> Result<EvalSet> {
    let dirs = fold_dirs(preds)?;
    if let Some(k) = expected_folds {
        if k != dirs.len() {
            return Err(PipelineError::Invalid(format!("expected {k} folds but {} holds {}", preds.display(), dirs.len())));
        }
    }
    let ids = pfm_ids(&dirs[0])?;
    if ids.is_empty() {
        return Err(PipelineError::Invalid(format!("no predictions in {}", dirs[0].display())));
    }
    for d in &dirs[1..] {
        if pfm_ids(d)? != ids {
            return Err(PipelineError::Invalid(format!("{} and {} hold different scenes", dirs[0].display(), d.display())));
        }
    }
    let mut truth = Vec::with_capacity(ids.len());
    let mut maps = Vec::with_capacity(ids.len());
    for id in &ids {
        let mask = data::read_pgm(&data_dir.join("masks").join(format!("{id}.pgm")))?;
        let per_fold = dirs
            .iter()
            .map(|d| data::read_pfm(&d.join(format!("{id}.pfm"))).map_err(Into::into))
            .collect::<Result<Vec<_>>>()?;
        truth.push(mask);
        maps.push(per_fold);
    }
    Ok(EvalSet { ids, truth, maps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub ensemble: EnsembleOptions,
    pub threshold: f64,
    pub policy: EmptyPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ensemble: EnsembleOptions::default(), threshold: 0.5, policy: EmptyPolicy::Vacuous }
    }
}

/// Ensemble at temperature `t`, binarize and score every scene.
pub fn evaluate(set: &EvalSet, t: f64, options: &EvalOptions) -> Result<(Vec<ImageScore>, Summary)> {
    let scores = set
        .ids
        .iter()
        .zip(&set.truth)
        .zip(&set.maps)
        .map(|((id, gt), maps)| {
            let p = ensemble_with(maps, t, options.ensemble)?;
            Ok(score_image(id, &binarize(&p, options.threshold), gt, options.policy)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = aggregate(&scores, options.policy)?;
    Ok((scores, summary))
}

/// One evaluated dataset (a table row).
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub label: String,
    /// Ascending temperatures with their summaries.
    pub results: Vec<(f64, Summary)>,
}

pub const SUMMARY_HEADER: &str =
    "label,temperature,images,dice,precision,recall,micro_dice,micro_precision,micro_recall";

pub fn summary_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for row in rows {
        for (t, m) in &row.results {
            let (a, b) = (&m.macro_avg, &m.micro_avg);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                row.label, t, m.images, a.dice, a.precision, a.recall, b.dice, b.precision, b.recall
            )
            .expect("string write");
        }
    }
    s
}

/// Recall must not rise with temperature; precision is expected, not
/// guaranteed, to be higher at the largest temperature than at the
/// smallest.
pub fn trend_notes(row: &EvalRow) -> Vec<String> {
    let mut notes = Vec::new();
    for w in row.results.windows(2) {
        let ((t0, a), (t1, b)) = (&w[0], &w[1]);
        if b.macro_avg.recall > a.macro_avg.recall {
            notes.push(format!(
                "{}: VIOLATION recall rose from {} at t={t0} to {} at t={t1}",
                row.label, a.macro_avg.recall, b.macro_avg.recall
            ));
        }
    }
    if let (Some((lo, a)), Some((hi, b))) = (row.results.first(), row.results.last()) {
        if row.results.len() > 1 && b.macro_avg.precision < a.macro_avg.precision {
            notes.push(format!(
                "{}: FLAG precision at t={hi} ({:.4}) is below precision at t={lo} ({:.4})",
                row.label, b.macro_avg.precision, a.macro_avg.precision
            ));
        }
    }
    notes
}

/// Rows are datasets, column groups are temperatures, each with Dice,
/// precision and recall in percent.
pub fn summary_table(rows: &[EvalRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let temps: Vec<f64> = rows.first().map(|r| r.results.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
    let group = |s: &str| format!(" | {s:^24}");
    let mut out = format!("{:label_w$}", "");
    for t in &temps {
        out += &group(&format!("T = {t}"));
    }
    out += &format!("\n{:label_w$}", "");
    for _ in &temps {
        out += &format!(" | {:>7} {:>8} {:>7}", "DICE", "PREC", "RECALL");
    }
    out.push('\n');
    out += &"-".repeat(label_w + temps.len() * 27);
    out.push('\n');
    for row in rows {
        out += &format!("{:label_w$}", row.label);
        for (_, m) in &row.results {
            let a = &m.macro_avg;
            out += &format!(" | {:>7.2} {:>8.2} {:>7.2}", 100.0 * a.dice, 100.0 * a.precision, 100.0 * a.recall);
        }
        out.push('\n');
    }
    let notes: Vec<String> = rows.iter().flat_map(trend_notes).collect();
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out += &n;
            out.push('\n');
        }
    }
    out
}

pub fn check_temperatures(temps: &[f64]) -> Result<Vec<f64>> {
    if temps.is_empty() {
        return Err(PipelineError::Invalid("temperature list is empty".into()));
    }
    if let Some(t) = temps.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(PipelineError::Invalid(format!("temperature {t} is not positive")));
    }
    let mut sorted = temps.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    Ok(sorted)
}

/// Scores each `(label, set)` at every temperature, writing
/// `{label}_t{t}.csv` per-image tables into `out_dir` when given.
pub fn evaluate_rows(
    sets: &[(String, EvalSet)],
    temps: &[f64],
    options: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let temps = check_temperatures(temps)?;
    if let Some(d) = out_dir {
        create_dir(d)?;
    }
    let folds: Vec<usize> = sets.iter().map(|(_, s)| s.folds()).collect();
    if folds.windows(2).any(|w| w[0] != w[1]) {
        return Err(PipelineError::Invalid(format!("fold counts differ between prediction sets: {folds:?}")));
    }
    sets.iter()
        .map(|(label, set)| {
            let results = temps
                .iter()
                .map(|&t| {
                    let (scores, summary) = evaluate(set, t, options)?;
                    if let Some(d) = out_dir {
                        let path = d.join(format!("{label}_t{t}.csv"));
                        let mut buf = Vec::new();
                        crate::metrics::write_scores_csv(&mut buf, &scores).map_err(io(&path))?;
                        std::fs::write(&path, buf).map_err(io(&path))?;
                    }
                    Ok((t, summary))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalRow { label: label.clone(), results })
        })
        .collect()
}

/// `points` log-spaced temperatures over `[lo, hi]` merged with `extra`.
pub fn sweep_grid(lo: f64, hi: f64, points: usize, extra: &[f64]) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || points == 0 {
        return Err(PipelineError::Invalid(format!("bad sweep range {lo}..{hi} with {points} points")));
    }
    let mut grid: Vec<f64> = if points == 1 {
        vec![lo]
    } else {
        let ratio = (hi / lo).ln();
        (0..points).map(|i| lo * (ratio * i as f64 / (points - 1) as f64).exp()).collect()
    };
    grid[points - 1] = hi;
    grid.extend_from_slice(extra);
    check_temperatures(&grid)
}

pub const SWEEP_HEADER: &str = "label,temperature,dice,precision,recall,micro_dice,micro_precision,micro_recall,best";

fn best_index(row: &EvalRow) -> usize {
    // First maximum wins.
    row.results
        .iter()
        .enumerate()
        .fold(0, |best, (i, (_, m))| if m.macro_avg.dice > row.results[best].1.macro_avg.dice { i } else { best })
}

pub fn sweep_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for row in rows {
        let best = best_index(row);
        for (i, (t, m)) in row.results.iter().enumerate() {
            let (a, b) = (&m.macro_avg, &m.micro_avg);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                row.label, t, a.dice, a.precision, a.recall, b.dice, b.precision, b.recall, i == best
            )
            .expect("string write");
        }
    }
    s
}

/// Markdown with the argmax-Dice row in bold.
pub fn sweep_markdown(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    for row in rows {
        let best = best_index(row);
        writeln!(s, "## {}\n", row.label).expect("string write");
        s += "| T | Dice | Precision | Recall |\n|---:|---:|---:|---:|\n";
        for (i, (t, m)) in row.results.iter().enumerate() {
            let a = &m.macro_avg;
            let cells = [format!("{t:.4}"), format!("{:.4}", a.dice), format!("{:.4}", a.precision), format!("{:.4}", a.recall)];
            let cells: Vec<String> = if i == best { cells.iter().map(|c| format!("**{c}**")).collect() } else { cells.to_vec() };
            writeln!(s, "| {} |", cells.join(" | ")).expect("string write");
        }
        writeln!(s, "\nBest Dice {:.4} at T = {}.", row.results[best].1.macro_avg.dice, row.results[best].0).expect("string write");
        for n in trend_notes(row) {
            writeln!(s, "\n{n}").expect("string write");
        }
        s.push('\n');
    }
    s
}
