//! Command line: `gen`, `convert`, `train` and `bench`.
//!
//! Every command returns an exit code instead of panicking: 0 success,
//! 2 bad flags or configuration, 3 I/O or corrupt files, 4 parse errors in
//! text input, 5 numeric failure during training.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use specgd_core::{LossFamily, Model, Regularizer, StepDistribution, StoppingConfig, TaskSpec};

use crate::data::{self, Dataset, GenSpec, TextFormat, DEFAULT_BLOCK_SIZE};
use crate::engine::{
    train, Discipline, Engine, LineSearchConfig, Method, Mode, StepPolicy, TrainConfig,
    TrainOutcome,
};
use crate::error::{Error, Result};
use crate::files;

/// Environment variable that overrides `--workers`.
pub const THREADS_ENV: &str = "SPECGD_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "specgd",
    version,
    about = "Speculative and approximate gradient descent for linear models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Convert CSV or sparse text into the binary dataset format.
    Convert(ConvertArgs),
    /// Train a model and write metrics, the model and a manifest.
    Train(TrainArgs),
    /// Time iterations over a sweep of candidate counts.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Svm,
    Lr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegArg {
    None,
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Sparse,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub d: usize,
    /// Recorded in the manifest; the data itself does not depend on it.
    #[arg(long, value_enum, default_value = "svm")]
    pub task: TaskArg,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the hidden model in the model file format.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: FormatArg,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags. The resolved values are stored in the run manifest.
#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "svm")]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value = "none")]
    pub reg: RegArg,
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,
    #[arg(long, value_enum, default_value = "bgd")]
    pub method: Method,
    #[arg(long, value_enum, default_value = "plain")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "merge")]
    pub discipline: Discipline,
    /// Candidate steps per pass (the starting value when adaptive).
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long)]
    pub adaptive_s: bool,
    #[arg(long, default_value_t = 32)]
    pub s_max: usize,
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    #[arg(long, default_value_t = 2)]
    pub m_min: usize,
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.05)]
    pub overlap_eps: f64,
    #[arg(long)]
    pub no_containment: bool,
    /// Fraction of a pass before the first interval check.
    #[arg(long, default_value_t = 0.01)]
    pub first_check: f64,
    #[arg(long, default_value_t = 20)]
    pub iters: u64,
    #[arg(long)]
    pub loss_tol: Option<f64>,
    /// Center of the step distribution; defaults to 1/N for the batch
    /// method and 0.01 otherwise.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_log: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    /// Never update the step distribution.
    #[arg(long)]
    pub freeze_steps: bool,
    /// Use these candidates every pass instead of sampling.
    #[arg(long, value_delimiter = ',')]
    pub fixed_steps: Option<Vec<f64>>,
    /// Single decaying step `alpha / (1 + rate * t)`.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub ls_c1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub ls_rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ls_alpha0: f64,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Starting model; zeros when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Defaults to the model path with `.manifest.json` appended.
    #[arg(long)]
    pub manifest_out: Option<PathBuf>,
    /// Rerun the configuration recorded in a manifest. Output paths given
    /// on the command line replace the recorded ones.
    #[arg(long)]
    #[serde(skip)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub s_list: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Summary CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub header_digest: String,
    pub n_examples: u64,
    pub dim: u32,
}

/// Everything needed to rerun a training run, given the dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub started_unix: u64,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub train: Option<TrainArgs>,
    #[serde(default)]
    pub gen: Option<GenSpec>,
    #[serde(default)]
    pub task: Option<TaskArg>,
}

impl RunManifest {
    fn new(command: &str, path: &Path, ds: &Dataset) -> Self {
        let h = ds.header();
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            dataset: DatasetRef {
                path: path.to_path_buf(),
                header_digest: h.digest(),
                n_examples: h.n_examples,
                dim: h.dim,
            },
            train: None,
            gen: None,
            task: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = std::env::var(THREADS_ENV).ok();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Train(a) => cmd_train(a, threads.as_deref()),
        Command::Bench(a) => cmd_bench(a, threads.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("specgd: {e}");
            e.exit_code()
        }
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = GenSpec {
        n: a.n,
        d: a.d,
        noise: a.noise,
        seed: a.seed,
        block_size: a.block_size,
    };
    let (ds, truth) = data::generate(&spec)?;
    ds.write(&a.out)?;
    if let Some(p) = &a.truth_out {
        files::save_model(p, &Model::from_weights(truth))?;
    }
    let mut m = RunManifest::new("gen", &a.out, &ds);
    m.gen = Some(spec);
    m.task = Some(a.task);
    m.save(&with_suffix(&a.out, ".manifest.json"))?;
    print_header(&ds);
    Ok(())
}

fn print_header(ds: &Dataset) {
    let h = ds.header();
    println!(
        "n={} d={} block_size={} blocks={} digest={}",
        h.n_examples,
        h.dim,
        h.block_size,
        h.n_blocks(),
        h.digest()
    );
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let f = fs::File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let format = match a.format {
        FormatArg::Csv => TextFormat::Csv,
        FormatArg::Sparse => TextFormat::Sparse,
    };
    let ds = data::convert(BufReader::new(f), format, a.block_size, a.seed)?;
    ds.write(&a.out)?;
    print_header(&ds);
    Ok(())
}

impl TrainArgs {
    pub fn task_spec(&self) -> Result<TaskSpec> {
        let family = match self.task {
            TaskArg::Svm => LossFamily::SvmHinge,
            TaskArg::Lr => LossFamily::Logistic,
        };
        let reg = match self.reg {
            RegArg::None => Regularizer::None,
            RegArg::L1 => Regularizer::L1,
            RegArg::L2 => Regularizer::L2,
        };
        Ok(TaskSpec::new(family, reg, self.mu)?)
    }

    /// Fills in defaults that depend on the dataset and the environment.
    pub fn resolve(&mut self, ds: &Dataset, threads: Option<&str>) -> Result<()> {
        if let Some(t) = threads {
            self.workers = t.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {t:?}"
                ))
            })?;
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.workers = self.workers.min(ds.n_blocks());
        if self.alpha.is_none() {
            self.alpha = Some(match self.method {
                Method::Bgd => 1.0 / ds.n() as f64,
                _ => 0.01,
            });
        }
        Ok(())
    }

    pub fn train_config(&self, init: Option<Model>) -> Result<TrainConfig> {
        let alpha = self
            .alpha
            .ok_or_else(|| Error::Config("step size unresolved".into()))?;
        if !self.kappa.is_finite() {
            return Err(Error::Config(
                "kappa must be finite; use --freeze-steps".into(),
            ));
        }
        let steps = match (&self.fixed_steps, self.decay) {
            (Some(v), _) => StepPolicy::Fixed(v.clone()),
            (None, Some(rate)) => StepPolicy::Decay {
                alpha0: alpha,
                rate,
            },
            (None, None) if self.mode == Mode::Plain => StepPolicy::Fixed(vec![alpha]),
            (None, None) => {
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
                }
                let kappa = if self.freeze_steps {
                    f64::INFINITY
                } else {
                    self.kappa
                };
                StepPolicy::Sampled(StepDistribution::new(
                    alpha.ln(),
                    self.sigma_log,
                    kappa,
                    StepDistribution::DEFAULT_SIGMA_FLOOR,
                )?)
            }
        };
        let mut cfg = TrainConfig::new(self.method, self.mode, steps);
        cfg.discipline = self.discipline;
        cfg.s = self.steps;
        cfg.adaptive_s = self.adaptive_s;
        cfg.s_max = self.s_max;
        cfg.max_iters = self.iters;
        cfg.loss_delta_tol = self.loss_tol;
        cfg.stopping = StoppingConfig {
            eps: self.eps,
            m: self.m_min,
            beta: self.beta,
            overlap_eps: self.overlap_eps,
            containment: !self.no_containment,
        };
        cfg.first_check = self.first_check;
        cfg.line_search = LineSearchConfig {
            c1: self.ls_c1,
            rho: self.ls_rho,
            alpha0: self.ls_alpha0,
        };
        cfg.seed = self.seed;
        cfg.initial = init;
        Ok(cfg)
    }

    fn run_on(&self, ds: &Dataset) -> Result<TrainOutcome> {
        let init = match &self.init {
            Some(p) => Some(files::load_model(p)?),
            None => None,
        };
        let cfg = self.train_config(init)?;
        let engine =
            Engine::new(ds, self.task_spec()?, self.workers)?.with_confidence(self.confidence)?;
        train(&engine, &cfg)
    }
}

pub fn cmd_train(mut a: TrainArgs, threads: Option<&str>) -> Result<()> {
    let mut expected_digest = None;
    if let Some(mp) = a.from_manifest.clone() {
        let m = RunManifest::load(&mp)?;
        let mut recorded = m.train.ok_or_else(|| {
            Error::Config(format!("{} does not describe a training run", mp.display()))
        })?;
        recorded.metrics_out = a.metrics_out.take().or(recorded.metrics_out);
        recorded.model_out = a.model_out.take().or(recorded.model_out);
        recorded.manifest_out = a.manifest_out.take().or(recorded.manifest_out);
        recorded.data = recorded.data.or(Some(m.dataset.path));
        expected_digest = Some(m.dataset.header_digest);
        a = recorded;
    }
    let data = a
        .data
        .clone()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let metrics_out = a
        .metrics_out
        .clone()
        .ok_or_else(|| Error::Config("--metrics-out is required".into()))?;
    let model_out = a
        .model_out
        .clone()
        .ok_or_else(|| Error::Config("--model-out is required".into()))?;
    let manifest_out = a
        .manifest_out
        .clone()
        .unwrap_or_else(|| with_suffix(&model_out, ".manifest.json"));

    let ds = Dataset::open(&data)?;
    if let Some(d) = expected_digest {
        if d != ds.header().digest() {
            return Err(Error::Config(format!(
                "{} no longer matches the manifest's dataset",
                data.display()
            )));
        }
    }
    a.resolve(&ds, threads)?;
    let mut manifest = RunManifest::new("train", &data, &ds);
    manifest.train = Some(TrainArgs {
        manifest_out: Some(manifest_out.clone()),
        ..a.clone()
    });
    let out = a.run_on(&ds)?;

    files::save_metrics(&metrics_out, &out.metrics)?;
    files::save_model(&model_out, &out.model)?;
    manifest.save(&manifest_out)?;
    let scanned: u64 = out.metrics.iter().map(|m| m.examples_seen).sum();
    match out.metrics.last() {
        Some(last) => println!(
            "iters={} loss={} exact={} examples_seen={}",
            out.metrics.len(),
            last.loss_est,
            last.loss_exact,
            scanned
        ),
        None => println!("iters=0"),
    }
    Ok(())
}

/// One summary row of a bench sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub s: usize,
    pub repeats: usize,
    /// Mean wall time of iterations two and above, averaged over repeats.
    pub mean_iter_ms: f64,
    pub ratio_to_first: f64,
    /// Mean over repeats of the last reported loss.
    pub final_loss: f64,
}

pub fn bench(
    a: &TrainArgs,
    ds: &Dataset,
    s_list: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if s_list.is_empty() || s_list.contains(&0) {
        return Err(Error::Config("--s-list needs positive entries".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("--repeats must be >= 1".into()));
    }
    if a.iters < 2 {
        return Err(Error::Config(
            "bench needs --iters >= 2; the first iteration is not timed".into(),
        ));
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let args = TrainArgs {
            steps: s,
            adaptive_s: false,
            ..a.clone()
        };
        let (mut ms, mut loss) = (0.0, 0.0);
        for _ in 0..repeats {
            let out = args.run_on(ds)?;
            let timed = &out.metrics[1..];
            ms += timed.iter().map(|m| m.wall_ms).sum::<f64>() / timed.len() as f64;
            loss += out.metrics.last().map_or(f64::NAN, |m| m.loss_est);
        }
        let mean_iter_ms = ms / repeats as f64;
        let first = rows.first().map_or(mean_iter_ms, |r| r.mean_iter_ms);
        rows.push(BenchRow {
            s,
            repeats,
            mean_iter_ms,
            ratio_to_first: mean_iter_ms / first,
            final_loss: loss / repeats as f64,
        });
    }
    Ok(rows)
}

pub fn cmd_bench(b: BenchArgs, threads: Option<&str>) -> Result<()> {
    let mut a = b.run;
    let data = a
        .data
        .clone()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let ds = Dataset::open(&data)?;
    a.resolve(&ds, threads)?;
    let rows = bench(&a, &ds, &b.s_list, b.repeats)?;
    let mut text = String::from("s,repeats,mean_iter_ms,ratio_to_first,final_loss\n");
    for r in &rows {
        text += &format!(
            "{},{},{},{},{}\n",
            r.s, r.repeats, r.mean_iter_ms, r.ratio_to_first, r.final_loss
        );
    }
    match &b.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => io::stdout().write_all(text.as_bytes()).map_err(Error::from),
    }
}
