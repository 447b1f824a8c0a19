use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wnet::data::{self, KindMix, SceneKind};
use wnet::ensemble::{EnsembleOptions, SharpenMode, SharpenOrder};
use wnet::metrics::EmptyPolicy;
use wnet::nn::EncoderDecoderConfig;
use wnet::optim::{AdamConfig, SamConfig};
use wnet::pipeline::{self, EvalOptions, EvalRow, Split, TrainConfig};

/// Double encoder-decoder segmentation on synthetic scenes: data
/// generation, fold training, inference and tempered-ensemble evaluation.
#[derive(Parser)]
#[command(name = "wnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one model per fold on the training pool.
    Train(TrainArgs),
    /// Write every fold model's probability maps for a split.
    Predict(PredictArgs),
    /// Ensemble fold maps at each temperature and score them.
    EnsembleEval(EnsembleEvalArgs),
    /// Score the ensemble over a log-spaced temperature grid.
    SweepTemp(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Fractions of blob, elongated and empty scenes.
    #[arg(long, default_value = "0.5,0.4,0.1")]
    mix: KindMix,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Vacuous,
    Zero,
}

impl From<Policy> for EmptyPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Vacuous => EmptyPolicy::Vacuous,
            Policy::Zero => EmptyPolicy::Zero,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and training logs.
    #[arg(long)]
    out: PathBuf,
    /// Fold j uses seed + j.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// SAM neighbourhood radius.
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// `off` trains with plain Adam.
    #[arg(long, value_enum, default_value = "on")]
    sam: OnOff,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// Scenes at the front of the dataset that form the training pool.
    #[arg(long, default_value_t = 400)]
    pool_size: usize,
    /// Add this weight times the loss on the intermediate map.
    #[arg(long)]
    aux_weight: Option<f64>,
    /// Permute the pool by seed before cutting fold blocks.
    #[arg(long)]
    shuffle_folds: bool,
    /// Encoder stage widths.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    widths: Vec<usize>,
    /// FPN lateral width.
    #[arg(long, default_value_t = 8)]
    lateral: usize,
    /// Threshold for validation Dice.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "vacuous")]
    empty_policy: Policy,
    /// Only print the per-fold summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Pool,
    Test,
    All,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory holding fold{j}.wnet.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Predictions root; maps go to fold{j}/{id}.pfm.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 400)]
    pool_size: usize,
    /// Also write first-stage maps under intermediate/fold{j}/.
    #[arg(long)]
    dump_intermediate: bool,
}

#[derive(Args)]
struct EvalInputs {
    /// Dataset directory holding the ground truth; repeat for more rows.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Predictions root matching each --data.
    #[arg(long = "preds", required = true)]
    preds: Vec<PathBuf>,
    /// Row label for each --data (default: the dataset directory name).
    #[arg(long = "label")]
    labels: Vec<String>,
    /// Required fold count.
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "vacuous")]
    empty_policy: Policy,
    /// Sharpen with v^t / (v^t + (1-v)^t) instead of v^t.
    #[arg(long)]
    normalized_sharpen: bool,
    /// Average the fold maps first, then sharpen.
    #[arg(long)]
    average_then_sharpen: bool,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleEvalArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    temperatures: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, default_value_t = 0.25)]
    t_min: f64,
    #[arg(long, default_value_t = 4.0)]
    t_max: f64,
    /// Log-spaced grid points.
    #[arg(long, default_value_t = 16)]
    points: usize,
    /// Temperatures added to the grid.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    include: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::EnsembleEval(a) => ensemble_eval(a),
        Command::SweepTemp(a) => sweep(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let scenes = data::generate_dataset(a.seed, a.n, a.size, &a.mix)?;
    data::write_dataset(&a.out, &scenes, a.force)?;
    let counts: Vec<String> = SceneKind::ALL
        .iter()
        .map(|k| format!("{k}={}", scenes.iter().filter(|s| s.kind == *k).count()))
        .collect();
    println!("wrote {} scenes to {}: {}", scenes.len(), a.out.display(), counts.join(" "));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        model: EncoderDecoderConfig { in_channels: 3, stage_widths: a.widths, lateral_width: a.lateral },
        epochs: a.epochs,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        sam: match a.sam {
            OnOff::On => Some(SamConfig { rho: a.rho }),
            OnOff::Off => None,
        },
        folds: a.folds,
        seed: a.seed,
        aux_weight: a.aux_weight,
        pool_size: a.pool_size,
        shuffle_folds: a.shuffle_folds,
        threshold: a.threshold,
        policy: a.empty_policy.into(),
    };
    let mut started = Instant::now();
    let quiet = a.quiet;
    let epochs = config.epochs;
    let logs = pipeline::train_all(&a.data, &a.out, &config, |fold, e| {
        if !quiet {
            println!("fold {fold} epoch {}/{epochs} train_loss {:.5} val_dice {:.4}", e.epoch, e.train_loss, e.val_dice);
        }
        if e.epoch == epochs {
            println!("fold {fold} done in {:.1}s, final val_dice {:.4}", started.elapsed().as_secs_f64(), e.val_dice);
            started = Instant::now();
        }
    })?;
    let finals: Vec<f64> = logs.iter().map(|l| l.last().expect("epochs > 0").val_dice).collect();
    println!("mean final val_dice over {} folds: {:.4}", finals.len(), finals.iter().sum::<f64>() / finals.len() as f64);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let split = match a.split {
        SplitArg::Pool => Split::Pool,
        SplitArg::Test => Split::Test,
        SplitArg::All => Split::All,
    };
    let entries = pipeline::select_split(data::read_dataset(&a.data)?, a.pool_size, split);
    if entries.is_empty() {
        bail!("the selected split of {} is empty", a.data.display());
    }
    let models = pipeline::load_fold_models(&a.checkpoints, a.folds)?;
    let n = pipeline::predict_all(&entries, &models, &a.out, a.dump_intermediate)?;
    println!("wrote {n} maps ({} folds x {} scenes) to {}", a.folds, entries.len(), a.out.display());
    Ok(())
}

fn load_sets(inputs: &EvalInputs) -> Result<(Vec<(String, pipeline::EvalSet)>, EvalOptions)> {
    if inputs.data.len() != inputs.preds.len() {
        bail!("{} --data but {} --preds given", inputs.data.len(), inputs.preds.len());
    }
    if !inputs.labels.is_empty() && inputs.labels.len() != inputs.data.len() {
        bail!("{} --label but {} --data given", inputs.labels.len(), inputs.data.len());
    }
    let sets = inputs
        .data
        .iter()
        .zip(&inputs.preds)
        .enumerate()
        .map(|(i, (d, p))| {
            let label = inputs.labels.get(i).cloned().unwrap_or_else(|| dir_label(d));
            let set = pipeline::load_eval_set(d, p, inputs.folds).with_context(|| format!("row {label}"))?;
            Ok((label, set))
        })
        .collect::<Result<Vec<_>>>()?;
    let options = EvalOptions {
        ensemble: EnsembleOptions {
            mode: if inputs.normalized_sharpen { SharpenMode::Normalized } else { SharpenMode::Power },
            order: if inputs.average_then_sharpen { SharpenOrder::MeanThenSharpen } else { SharpenOrder::SharpenThenMean },
        },
        threshold: inputs.threshold,
        policy: inputs.empty_policy.into(),
    };
    if !(options.threshold > 0.0 && options.threshold < 1.0) {
        bail!("threshold must lie in (0,1), got {}", options.threshold);
    }
    Ok((sets, options))
}

fn dir_label(path: &Path) -> String {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensemble_eval(a: EnsembleEvalArgs) -> Result<()> {
    let (sets, options) = load_sets(&a.inputs)?;
    let rows: Vec<EvalRow> = pipeline::evaluate_rows(&sets, &a.temperatures, &options, Some(&a.inputs.out))?;
    let table = pipeline::summary_table(&rows);
    write(&a.inputs.out.join("summary.csv"), &pipeline::summary_csv(&rows))?;
    write(&a.inputs.out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (sets, options) = load_sets(&a.inputs)?;
    let grid = pipeline::sweep_grid(a.t_min, a.t_max, a.points, &a.include)?;
    let rows = pipeline::evaluate_rows(&sets, &grid, &options, None)?;
    std::fs::create_dir_all(&a.inputs.out).with_context(|| format!("creating {}", a.inputs.out.display()))?;
    let md = pipeline::sweep_markdown(&rows);
    write(&a.inputs.out.join("sweep.csv"), &pipeline::sweep_csv(&rows))?;
    write(&a.inputs.out.join("sweep.md"), &md)?;
    print!("{md}");
    Ok(())
}
