use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wikg::checkpoint::{self, LoadedModel};
use wikg::checks::{self, SuiteOptions};
use wikg::data::{self, CooccurrenceSpec, Dataset, DatasetManifest};
use wikg::gradcheck::GradcheckOptions;
use wikg::graph::{export_graph, EdgeVariant};
use wikg::parallel;
use wikg::train::{self, Precision, TrainConfig};
use wikg::{Architecture, Model, Readout, Real};

/// Graph representation learning for bag-of-instance classification.
///
/// Defaults marked "reference" reproduce the original training setup.
#[derive(Parser, Debug)]
#[command(name = "wikg", version, propagate_version = true)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic co-occurrence dataset with a stratified fold split.
    Gen(GenArgs),
    /// Train on all folds but one; keeps the best-validation checkpoint.
    Train(TrainCmd),
    /// Score a checkpoint on a manifest (optionally one fold of it).
    Eval(EvalCmd),
    /// k-fold cross-validation with a mean ± sample std summary.
    Cv(CvCmd),
    /// One cross-validation per neighbour count.
    Sweep(SweepCmd),
    /// Write the graph a checkpoint builds for one bag as JSON or DOT.
    ExportGraph(ExportCmd),
    /// Finite-difference check of every op and model loss (f64).
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of bags (even; half positive).
    #[arg(long, default_value_t = 200)]
    bags: usize,
    #[arg(long, default_value_t = 30)]
    min_instances: usize,
    #[arg(long, default_value_t = 80)]
    max_instances: usize,
    /// Feature width (reference: 384).
    #[arg(long, default_value_t = 384)]
    dim: usize,
    /// Standard deviation of the per-instance Gaussian noise.
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    /// Fewest key instances of each present key prototype.
    #[arg(long, default_value_t = 3)]
    min_key: usize,
    #[arg(long, default_value_t = 6)]
    max_key: usize,
    /// Stratified folds (reference: 4).
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelArg {
    Wikg,
    Mean,
    Max,
    Abmil,
}

impl From<ModelArg> for Architecture {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Wikg => Architecture::Wikg,
            ModelArg::Mean => Architecture::MeanPool,
            ModelArg::Max => Architecture::MaxPool,
            ModelArg::Abmil => Architecture::GatedAttention,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PolicyArg {
    Wikg,
    KnnCos,
    KnnDist,
}

impl From<PolicyArg> for EdgeVariant {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Wikg => EdgeVariant::Wikg,
            PolicyArg::KnnCos => EdgeVariant::KnnCos,
            PolicyArg::KnnDist => EdgeVariant::KnnDist,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ReadoutArg {
    Mean,
    Max,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Dot,
}

/// Training hyperparameters. Each flag overrides the `--config` file,
/// which overrides the built-in defaults.
#[derive(Args, Debug, Default, Clone)]
struct TrainArgs {
    /// TOML file with training settings (same names as the flags, with
    /// underscores).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture [default: wikg].
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Edge construction of the graph model [default: wikg].
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Neighbours per node [default: 6, reference]. `sweep` takes a comma
    /// separated list [default: 2,4,6,8,10].
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Passes over the training folds [default: 100, reference].
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate [default: 1e-4, reference].
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay [default: 1e-5, reference].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    beta1: Option<f64>,
    /// [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    eps: Option<f64>,
    /// Dropout before the readout [default: 0.3, reference].
    #[arg(long)]
    dropout: Option<f64>,
    /// Bags per step; only 1 is supported [default: 1, reference].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialisation, shuffling and dropout [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Graph readout [default: mean].
    #[arg(long, value_enum)]
    readout: Option<ReadoutArg>,
    /// Hidden width [default: 512, reference].
    #[arg(long)]
    d_model: Option<usize>,
    /// Gated-attention scorer width [default: 128].
    #[arg(long)]
    attn_hidden: Option<usize>,
    /// Forbid self-edges.
    #[arg(long)]
    exclude_self: bool,
    /// Use k = min(k, n) on bags smaller than k instead of failing.
    #[arg(long)]
    clamp_k: bool,
    /// AdamW-style weight decay instead of an L2 term.
    #[arg(long)]
    decoupled_weight_decay: bool,
    /// Start the classifier at zero.
    #[arg(long)]
    zero_init_classifier: bool,
    /// Arithmetic [default: f32; f64 gives bit-reproducible checkpoints].
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<TrainConfig>(&text)
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($field:ident, $flag:expr) => {
                if let Some(v) = $flag {
                    c.$field = v.into();
                }
            };
        }
        set!(arch, self.model);
        set!(policy, self.policy);
        match self.k.as_slice() {
            [] => {}
            [k] => c.k = *k,
            _ => return Err(usage("--k takes a single value outside `sweep`")),
        }
        set!(epochs, self.epochs);
        set!(lr, self.lr);
        set!(weight_decay, self.weight_decay);
        set!(beta1, self.beta1);
        set!(beta2, self.beta2);
        set!(eps, self.eps);
        set!(dropout_p, self.dropout);
        set!(batch_size, self.batch_size);
        set!(seed, self.seed);
        set!(d_model, self.d_model);
        set!(attn_hidden, self.attn_hidden);
        if let Some(r) = self.readout {
            c.readout = match r {
                ReadoutArg::Mean => Readout::Mean,
                ReadoutArg::Max => Readout::Max,
            };
        }
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        c.exclude_self |= self.exclude_self;
        c.clamp_k |= self.clamp_k;
        c.decoupled_weight_decay |= self.decoupled_weight_decay;
        c.zero_init_classifier |= self.zero_init_classifier;
        if !c.arch.is_graph() && c.policy != EdgeVariant::Wikg {
            return Err(usage(format!(
                "--policy {} only applies to --model wikg",
                c.policy.name()
            )));
        }
        c.validate().map_err(anyhow::Error::from)?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (CSV `bag_path,label,fold`).
    #[arg(long)]
    manifest: PathBuf,
    /// Re-split into this many stratified folds instead of using the
    /// manifest's assignment (reference: 4).
    #[arg(long)]
    folds: Option<usize>,
}

impl DataArgs {
    /// Loads the bags; `seed` drives a re-split when `--folds` is given.
    fn load(&self, seed: u64) -> anyhow::Result<Dataset> {
        let manifest = DatasetManifest::load(&self.manifest)
            .with_context(|| format!("loading manifest {}", self.manifest.display()))?;
        match self.folds {
            None => Ok(manifest.load_dataset()?),
            Some(f) => {
                let folds = data::kfold_split(&manifest.labels(), f, seed)?;
                let bags = (0..manifest.records.len())
                    .map(|i| data::read_bag(&manifest.bag_path(i), manifest.records[i].label))
                    .collect::<wikg::Result<Vec<_>>>()?;
                Ok(Dataset::new(bags, folds, manifest.n_classes)?)
            }
        }
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Held-out test fold; the next fold validates.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory for model.wkgc, epochs.csv, metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Score only this fold (default: every bag).
    #[arg(long)]
    fold: Option<usize>,
    /// Bags scored concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write metrics.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for cv_report.json and per-fold epoch logs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bag file (`.wkgb`); node labels come from `<stem>.meta.json` if present.
    #[arg(long)]
    bag: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    /// Random instances per check.
    #[arg(long, default_value_t = 50)]
    seeds: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Only checks whose name contains this string.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Marks an error as a usage error (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<wikg::Error>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(a: &GenArgs) -> anyhow::Result<()> {
    let spec = CooccurrenceSpec {
        n_bags: a.bags,
        min_instances: a.min_instances,
        max_instances: a.max_instances,
        d_in: a.dim,
        noise_sigma: a.sigma,
        min_key: a.min_key,
        max_key: a.max_key,
        seed: a.seed,
    };
    let manifest = data::gen_cooccurrence_dataset(&spec, a.folds, &a.out)?;
    println!(
        "wrote {} bags ({} folds) to {}",
        manifest.records.len(),
        a.folds,
        a.out.display()
    );
    Ok(())
}

fn run_train<T: Real>(dataset: &Dataset, fold: usize, cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    let run = train::train::<T>(dataset, fold, cfg)?;
    checkpoint::save(&run.fit.best, &out.join("model.wkgc"))?;
    train::write_epoch_log(&out.join("epochs.csv"), &run.fit.log)?;
    write_json(&out.join("metrics.json"), &run.test)?;
    write_json(&out.join("config.json"), cfg)?;
    println!(
        "fold {fold}: best epoch {} (val auc {}), test auc {:.2}%, accuracy {:.2}%, weighted f1 {:.2}%, {} parameters, {:.1}s",
        run.fit.best_epoch,
        run.fit
            .best_val_auc
            .map_or_else(|| "n/a".to_owned(), |a| format!("{:.2}%", 100.0 * a)),
        100.0 * run.test.auc,
        100.0 * run.test.accuracy,
        100.0 * run.test.weighted_f1,
        run.fit.best.param_count(),
        run.seconds
    );
    Ok(())
}

fn cmd_train(a: &TrainCmd) -> anyhow::Result<()> {
    let cfg = a.train.resolve()?;
    let dataset = a.data.load(cfg.seed)?;
    create_dir(&a.out)?;
    match cfg.precision {
        Precision::F32 => run_train::<f32>(&dataset, a.fold, &cfg, &a.out),
        Precision::F64 => run_train::<f64>(&dataset, a.fold, &cfg, &a.out),
    }
}

fn cmd_eval(a: &EvalCmd) -> anyhow::Result<()> {
    let model = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let dataset = a.data.load(0)?;
    let bags: Vec<&data::Bag> = match a.fold {
        Some(f) => {
            if f >= dataset.n_folds() {
                return Err(usage(format!("fold {f} out of range 0..{}", dataset.n_folds())));
            }
            dataset.fold_members(f)
        }
        None => dataset.bags.iter().collect(),
    };
    let report = parallel::with_jobs(a.jobs, |exec| match &model {
        LoadedModel::F32(m) => train::evaluate(m, &bags, exec),
        LoadedModel::F64(m) => train::evaluate(m, &bags, exec),
    })?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_cv(a: &CvCmd) -> anyhow::Result<()> {
    let cfg = a.train.resolve()?;
    let dataset = a.data.load(cfg.seed)?;
    create_dir(&a.out)?;
    let report = parallel::with_jobs(a.jobs, |exec| train::cross_validate(&dataset, &cfg, exec))?;
    for f in &report.folds {
        train::write_epoch_log(&a.out.join(format!("fold{}_epochs.csv", f.fold)), &f.log)?;
    }
    write_json(&a.out.join("cv_report.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}

const SWEEP_DEFAULT_KS: [usize; 5] = [2, 4, 6, 8, 10];

fn cmd_sweep(a: &SweepCmd) -> anyhow::Result<()> {
    let ks = if a.train.k.is_empty() {
        SWEEP_DEFAULT_KS.to_vec()
    } else {
        a.train.k.clone()
    };
    let cfg = TrainArgs {
        k: Vec::new(),
        ..a.train.clone()
    }
    .resolve()?;
    let dataset = a.data.load(cfg.seed)?;
    create_dir(&a.out)?;
    let rows = parallel::with_jobs(a.jobs, |exec| train::neighbor_sweep(&dataset, &cfg, &ks, exec))?;
    let path = a.out.join("sweep.csv");
    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    train::write_sweep_csv(&rows, file)?;
    train::write_sweep_csv(&rows, std::io::stdout())?;
    Ok(())
}

fn export_with<T: Real>(model: &Model<T>, a: &ExportCmd) -> anyhow::Result<String> {
    let features = data::read_bag_features(&a.bag)?;
    if features.cols() != model.config.d_in {
        bail!(
            "bag {} has {} feature columns, checkpoint expects {}",
            a.bag.display(),
            features.cols(),
            model.config.d_in
        );
    }
    let (graph, trace, _) = model.inspect(&features)?;
    let meta = data::read_node_meta(&a.bag)?;
    let doc = export_graph(&graph, Some(&trace.pi), meta.as_deref())?;
    Ok(match a.format {
        FormatArg::Json => doc.to_json()? + "\n",
        FormatArg::Dot => doc.to_dot(),
    })
}

fn cmd_export(a: &ExportCmd) -> anyhow::Result<()> {
    let model = checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    if !model.config().arch.is_graph() {
        return Err(usage(format!(
            "checkpoint holds a {} model, which builds no graph",
            model.config().arch.name()
        )));
    }
    let text = match &model {
        LoadedModel::F32(m) => export_with(m, a)?,
        LoadedModel::F64(m) => export_with(m, a)?,
    };
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckCmd) -> anyhow::Result<bool> {
    if !(a.tol > 0.0) || !(a.step > 0.0) {
        return Err(usage("--tol and --step must be positive"));
    }
    let report = parallel::with_jobs(a.jobs, |exec| {
        checks::run_suite(&SuiteOptions {
            seeds: a.seeds,
            base_seed: a.seed,
            filter: a.op.clone(),
            gradcheck: GradcheckOptions {
                eps: a.step,
                tol: a.tol,
                ..GradcheckOptions::default()
            },
            exec,
        })
    })?;
    for c in &report.cases {
        println!(
            "{} {:<24} max rel error {:.3e} (seed {}, {} seeds, {} entries)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.worst_seed,
            c.seeds,
            c.checked
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {:e} in {:.1}s", report.cases.len(), report.tol, report.seconds);
    } else {
        println!("{} of {} checks failed: {}", failed.len(), report.cases.len(), failed.join(", "));
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(report.passed)
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Cv(a) => cmd_cv(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::ExportGraph(a) => cmd_export(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    wikg::alloc::retain_freed_memory();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
