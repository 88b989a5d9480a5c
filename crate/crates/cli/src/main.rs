use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use gabmil::data::{self, Dataset, SynthTaskSpec};
use gabmil::flops::{self, AccountingMode, SelfAttentionConfig};
use gabmil::gradcheck::{check_gabmil, randomize_params, DEFAULT_STEP};
use gabmil::harness::{self, RunConfig, Stage};
use gabmil::simm::{GridCoord, GridLayout, SimmConfig};
use gabmil::{seed, Error, Gabmil, GabmilConfig, Result, SimmVariant, Tensor};

#[derive(Parser)]
#[command(name = "gabmil", version, about = "Spatially mixed attention MIL: training, evaluation and cost model")]
struct Cli {
    /// Repeat for more log output (info, debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spatial-bag dataset.
    Synth(SynthArgs),
    /// Cross-validated training; writes checkpoints, logs and a report.
    Train(RunArgs),
    /// Re-score the checkpoints of a training run on their test folds.
    Eval(EvalArgs),
    /// Print analytic multiply-accumulate counts.
    Flops(FlopsArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradArgs),
    /// Export channel-averaged feature maps of one slide.
    Featmap(FeatArgs),
    /// Cross-validate once per window size and tabulate AUPRC.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    bag_size: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    signal_count: Option<usize>,
    #[arg(long)]
    signal_scale: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    cluster_window: Option<usize>,
    #[arg(long)]
    min_distance: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 1024 → 512 → 256 model.
    Default,
    /// Small model for 64-dimensional synthetic bags.
    Synthetic,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Starting point before the config file and overrides are applied.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// `key=value` config file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    variant: Option<SimmVariant>,
    /// Block window size.
    #[arg(long = "p")]
    window: Option<usize>,
    /// Grid size.
    #[arg(long = "g")]
    grid: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut c = match self.preset {
            Preset::Default => RunConfig::default(),
            Preset::Synthetic => RunConfig::synthetic(),
        };
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            c.set(k.trim(), v.trim())?;
        }
        if let Some(m) = &self.manifest {
            c.manifest = Some(m.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.folds {
            c.folds = v;
        }
        if let Some(v) = self.variant {
            c.model.simm.variant = v;
        }
        if let Some(v) = self.window {
            c.model.simm.window = v;
        }
        if let Some(v) = self.grid {
            c.model.simm.grid = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Re-select the window size per fold from these candidates (e.g. 1..10).
    #[arg(long)]
    select_window: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the manifest recorded in the run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Where to write report.tsv and scores.tsv (defaults to the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Instances per bag.
    #[arg(long, default_value_t = 120)]
    n: usize,
    /// Grid rows (default: smallest square holding N).
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value = "BOTH")]
    variant: SimmVariant,
    #[arg(long = "p", default_value_t = 2)]
    window: usize,
    #[arg(long = "g", default_value_t = 2)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    cols: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Input,
    Mixed,
    Residual,
    All,
}

#[derive(Args)]
struct FeatArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Slide id from the run's manifest.
    #[arg(long, conflicts_with = "bag")]
    slide: Option<String>,
    /// A bag file to map instead.
    #[arg(long)]
    bag: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "1..10")]
    p_range: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let manifest = config
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("no manifest given (use --manifest or manifest= in the config)".into()))?;
    let ds = Dataset::load(manifest)?;
    if ds.feature_dim() != config.model.input_dim {
        return Err(Error::Config(format!(
            "bags have {} features but input_dim is {} (try --preset synthetic or --set input_dim={})",
            ds.feature_dim(),
            config.model.input_dim,
            ds.feature_dim()
        )));
    }
    Ok(ds)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthTaskSpec::default();
    let spec = SynthTaskSpec {
        rows: a.rows.unwrap_or(d.rows),
        cols: a.cols.unwrap_or(d.cols),
        bag_size: a.bag_size.unwrap_or(d.bag_size),
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        signal_count: a.signal_count.unwrap_or(d.signal_count),
        signal_scale: a.signal_scale.unwrap_or(d.signal_scale),
        noise: a.noise.unwrap_or(d.noise),
        cluster_window: a.cluster_window.unwrap_or(d.cluster_window),
        min_distance: a.min_distance.unwrap_or(d.min_distance),
        seed: a.seed,
    };
    let bags = data::synthesize_dataset(&spec, a.per_class)?;
    let manifest = data::write_dataset(&a.out, &bags)?;
    println!("bags={}", bags.len());
    println!("manifest={}", manifest.display());
    Ok(())
}

fn train(a: RunArgs) -> Result<()> {
    let mut config = a.config.build()?;
    if let Some(list) = &a.select_window {
        config.window_candidates = harness::parse_sizes(list)?;
    }
    config.out = Some(a.out.clone());
    config.validate()?;
    let ds = load_dataset(&config)?;
    let cv = harness::cross_validate(&ds, &config)?;
    harness::write_cv_outputs(&a.out, &cv)?;
    print!("{}", cv.report.to_tsv());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut config = harness::read_run_config(&a.run)?;
    if let Some(m) = a.manifest {
        config.manifest = Some(m);
    }
    let ds = load_dataset(&config)?;
    let (report, scores) = harness::evaluate_run(&ds, &a.run, &config)?;
    let out = a.out.unwrap_or(a.run);
    write_file(&out.join("report.tsv"), report.to_tsv())?;
    write_file(&out.join("scores.tsv"), scores)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn print_section(name: &str, cost: &flops::CostBreakdown) {
    println!("[{name}]");
    print!("{cost}");
    for line in cost.to_kv().lines() {
        println!("{name}.{line}");
    }
    println!();
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let config = a.config.build()?.model;
    let side = flops::square_extent(a.n);
    let (rows, cols) = (a.rows.unwrap_or(side), a.cols.unwrap_or(side));
    let abmil = flops::abmil_cost(a.n, &config)?;
    println!("# FLOPs = multiply-accumulates; N={} grid={}x{} variant={}", a.n, rows, cols, config.simm.label());
    print_section("abmil", &abmil);
    for mode in [AccountingMode::OccupiedOnly, AccountingMode::PaddedGrid] {
        let cost = flops::gabmil_cost(a.n, rows, cols, &config, mode)?;
        let name = match mode {
            AccountingMode::OccupiedOnly => "gabmil_occupied",
            AccountingMode::PaddedGrid => "gabmil_padded",
        };
        print_section(name, &cost);
        println!(
            "{name}.simm_delta_pct={:.3}\n",
            100.0 * cost.mixer() as f64 / abmil.total() as f64
        );
    }
    let sa_config = SelfAttentionConfig {
        input_dim: config.input_dim,
        num_classes: config.num_classes,
        ..SelfAttentionConfig::default()
    };
    let sa = flops::self_attention_cost(a.n, &sa_config)?;
    print_section("self_attention", &sa);
    println!("self_attention.ratio_to_abmil={:.3}", sa.total() as f64 / abmil.total() as f64);
    Ok(())
}

fn gradcheck_cmd(a: GradArgs) -> Result<()> {
    if a.n == 0 || a.n > a.rows * a.cols {
        return Err(Error::InvalidArgument(format!(
            "{} instances do not fit a {}x{} grid",
            a.n, a.rows, a.cols
        )));
    }
    let config = GabmilConfig {
        input_dim: 8,
        compressed_dim: 4,
        attention_dim: 3,
        num_classes: 2,
        gated: true,
        simm: SimmConfig {
            variant: a.variant,
            window: a.window,
            grid: a.grid,
            expansion: 1,
        },
    };
    let mut model = Gabmil::<f64>::new(config, a.seed)?;
    randomize_params(&mut model.store, a.seed);
    let mut rng = seed::rng(a.seed, &[99]);
    let cells = rand::seq::index::sample(&mut rng, a.rows * a.cols, a.n);
    let coords: Vec<GridCoord> = cells
        .iter()
        .map(|i| GridCoord::new((i / a.cols) as u32, (i % a.cols) as u32))
        .collect();
    let layout = GridLayout::new(&coords)?;
    let values: Vec<f64> = (0..a.n * config.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Tensor::new(vec![a.n, config.input_dim], values)?;
    let report = check_gabmil(&model, &features, &layout, (a.seed % 2) as usize, DEFAULT_STEP, a.tol)?;
    for p in &report.per_param {
        println!("{:<24}{:.3e}", p.name, p.max_rel_error);
    }
    println!("max_rel_error={:.3e}", report.max_rel_error());
    println!("tolerance={:.1e}", report.tolerance);
    println!("passed={}", report.passed());
    if !report.passed() {
        return Err(Error::Degenerate(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_error(),
            a.tol
        )));
    }
    Ok(())
}

fn featmap(a: FeatArgs) -> Result<()> {
    let mut config = harness::read_run_config(&a.run)?;
    if let Some(m) = a.manifest {
        config.manifest = Some(m);
    }
    let saved = harness::load_fold(&a.run, &config, a.fold)?;
    let bag = match (&a.bag, &a.slide) {
        (Some(path), _) => data::read_bag(path)?,
        (None, Some(id)) => {
            let ds = load_dataset(&config)?;
            let i = ds
                .index_of(id)
                .ok_or_else(|| Error::Config(format!("slide {id} not in manifest")))?;
            ds.bags[i].clone()
        }
        (None, None) => return Err(Error::Config("give --slide or --bag".into())),
    };
    let layout = GridLayout::new(&bag.coords)?;
    let stages = match a.stage {
        StageArg::Input => vec![Stage::Input],
        StageArg::Mixed => vec![Stage::Mixed],
        StageArg::Residual => vec![Stage::Residual],
        StageArg::All => vec![Stage::Input, Stage::Mixed, Stage::Residual],
    };
    let out = a.out.unwrap_or(a.run);
    for stage in stages {
        let map = harness::feature_map(&saved.model, &bag.features, &layout, stage)?;
        let (pgm, txt) = harness::export_feature_map(&out, &map, stage)?;
        println!("{stage}\t{}\t{}", pgm.display(), txt.display());
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let config = a.config.build()?;
    let sizes = harness::parse_sizes(&a.p_range)?;
    let ds = load_dataset(&config)?;
    let rows = harness::sweep(&ds, &config, &sizes)?;
    let table = harness::sweep_tsv(&rows);
    if let Some(out) = &a.out {
        write_file(&out.join("sweep.tsv"), &table)?;
    }
    print!("{table}");
    if let Some(best) = harness::sweep_optimum(&rows) {
        println!("optimum={best}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Featmap(a) => featmap(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
