//! Subcommand driver behind the `polrep` binary.
//!
//! Every subcommand collects its artifacts in memory and writes them at the
//! end. If any write fails, the files already written are removed, so the
//! output directory never holds a partial result set.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use polrep::config::RunConfig;
use polrep::dataio::{generate_dataset, Dataset};
use polrep::evalkit::{
    bank_ordering, imitation_eval, pc1_knob_spearman, pca2d, plot_csv, plot_svg, probe_bundle, probe_csv,
    projection_comparison, standard_rate_experiment, steering_benchmark,
};
use polrep::steer::{steer, Constraint, SteeringQuery};
use polrep::trainer::{train, Bundle};
use polrep::util::rng_for;
use rand::Rng as _;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Name of the effective-config echo written next to every output set.
pub const CONFIG_ECHO: &str = "config.toml";

const STREAM_STEER_START: u64 = 20;
const STREAM_STEER_EVAL: u64 = 21;

#[derive(Debug, Parser)]
#[command(name = "polrep", version, about = "Policy representations, latent steering and CF quadrature")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config, or `default` for built-in defaults.
    #[arg(long, default_value = "default")]
    config: String,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset file from `gen-data`; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the behavior population and write `dataset.prep`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run both training phases; writes `model.pbnd` and loss logs.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Linear probes from sampled embeddings to returns, one row set per checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// `PATH` or `NAME=PATH`; repeat to compare methods.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
    },
    /// Decoded-policy returns against the encoded trajectories.
    EvalImitation {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One steering query; writes `trace.csv` and `result.txt`.
    Steer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task-0 target return, raw units.
        #[arg(long, allow_negative_numbers = true)]
        target: f64,
        /// `TASK:LOWER` bound in raw units; repeatable.
        #[arg(long = "constraint", allow_negative_numbers = true)]
        constraints: Vec<String>,
        /// Bank index of the start point; random when omitted.
        #[arg(long)]
        start: Option<usize>,
        /// Plain gradient steps instead of tangent-projected ones.
        #[arg(long)]
        naive: bool,
    },
    /// Random steering queries plus the projected-vs-naive path comparison.
    BenchSteer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Control-functional vs Monte Carlo error rates.
    CfRate {
        #[command(flatten)]
        common: Common,
    },
    /// 2-D PCA of the embedding bank (CSV and SVG) and ordering metrics.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Probe { common, .. }
            | Command::EvalImitation { common, .. }
            | Command::Steer { common, .. }
            | Command::BenchSteer { common, .. }
            | Command::CfRate { common }
            | Command::Plot { common, .. } => common,
        }
    }
}

/// Raised for problems the user can fix by changing flags or config keys.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let cfg = if common.config == "default" {
        RunConfig::default()
    } else {
        RunConfig::load(Path::new(&common.config)).map_err(|e| match e {
            polrep::Error::Config(msg) => usage(format!("config: {msg}")),
            other => anyhow::Error::new(other),
        })?
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, arg: &DataArg) -> anyhow::Result<Dataset> {
    match &arg.data {
        Some(p) => Dataset::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(generate_dataset(&cfg.env, &cfg.data)?),
    }
}

fn load_bundle(path: &Path) -> anyhow::Result<Bundle> {
    Bundle::load(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_constraint(s: &str) -> anyhow::Result<Constraint> {
    let (task, lower) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("constraint {s:?} is not TASK:LOWER")))?;
    Ok(Constraint {
        task: task.trim().parse().map_err(|_| usage(format!("bad task in {s:?}")))?,
        lower: lower.trim().parse().map_err(|_| usage(format!("bad bound in {s:?}")))?,
    })
}

fn parse_checkpoint(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(s);
            let name = p.file_stem().map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

type Artifacts = Vec<(&'static str, Vec<u8>)>;

fn execute(command: &Command, cfg: &RunConfig) -> anyhow::Result<Artifacts> {
    let mut out: Artifacts = vec![(CONFIG_ECHO, cfg.to_canonical_string()?.into_bytes())];
    match command {
        Command::GenData { .. } => {
            let ds = generate_dataset(&cfg.env, &cfg.data)?;
            out.push(("dataset.prep", ds.to_bytes()));
        }
        Command::Train { data, .. } => {
            let ds = dataset(cfg, data)?;
            let (bundle, log) = train(&ds, cfg)?;
            out.push(("model.pbnd", bundle.to_bytes()?));
            out.push(("train_phase1.csv", log.phase1_csv()?.into_bytes()));
            out.push(("train_phase2.csv", log.phase2_csv()?.into_bytes()));
        }
        Command::Probe { data, checkpoints, .. } => {
            let ds = dataset(cfg, data)?;
            let mut reports = Vec::new();
            for spec in checkpoints {
                let (name, path) = parse_checkpoint(spec);
                let b = load_bundle(&path)?;
                reports.push((name, probe_bundle(&b, &ds, cfg.eval.probe_ridge, cfg.eval.seed)?));
            }
            out.push(("probe.csv", probe_csv(&reports)?.into_bytes()));
        }
        Command::EvalImitation { data, checkpoint, .. } => {
            let ds = dataset(cfg, data)?;
            let b = load_bundle(checkpoint)?;
            let n_eval = cfg.steer.n_eval;
            let train_rep = imitation_eval(&b, &ds, &ds.train, n_eval, cfg.eval.seed)?;
            let test_rep = imitation_eval(&b, &ds, &ds.test, n_eval, cfg.eval.seed)?;
            out.push(("imitation_train.csv", train_rep.to_csv()?.into_bytes()));
            out.push(("imitation_test.csv", test_rep.to_csv()?.into_bytes()));
        }
        Command::Steer {
            checkpoint,
            target,
            constraints,
            start,
            naive,
            ..
        } => {
            let b = load_bundle(checkpoint)?;
            let constraints = constraints.iter().map(|s| parse_constraint(s)).collect::<anyhow::Result<Vec<_>>>()?;
            let n = b.bank.len();
            let start = match start {
                Some(i) if *i >= n => bail!(usage(format!("start index {i} outside bank of {n}"))),
                Some(i) => *i,
                None => rng_for(cfg.eval.seed, STREAM_STEER_START).gen_range(0..n),
            };
            let query = SteeringQuery {
                target: *target,
                constraints,
                h0: b.bank.embedding(start),
            };
            let mut rng = rng_for(cfg.eval.seed, STREAM_STEER_EVAL);
            let (trace, result) = steer(&b, &query, &cfg.steer, !naive, &mut rng).map_err(|e| match e {
                polrep::Error::InvalidArgument { .. } => usage(e.to_string()),
                other => anyhow::Error::new(other),
            })?;
            out.push(("trace.csv", trace.to_csv(&b.stats)?.into_bytes()));
            out.push(("result.txt", result.to_record().into_bytes()));
        }
        Command::BenchSteer { checkpoint, .. } => {
            let b = load_bundle(checkpoint)?;
            let bench = steering_benchmark(&b, cfg.eval.n_queries, &cfg.steer, cfg.eval.seed)?;
            let paths = projection_comparison(&b, cfg.eval.n_paired_runs, cfg.eval.path_points, &cfg.steer, cfg.eval.seed)?;
            out.push(("bench_steer.csv", bench.to_csv()?.into_bytes()));
            out.push(("projection_gap.csv", paths.to_csv()?.into_bytes()));
        }
        Command::CfRate { .. } => {
            out.push(("cf_rate.csv", standard_rate_experiment(&cfg.eval)?.to_csv()?.into_bytes()));
        }
        Command::Plot { checkpoint, .. } => {
            let b = load_bundle(checkpoint)?;
            let pca = pca2d(&b.bank.h)?;
            let title = format!("knob vs PC1: |rho| = {:.3}", pc1_knob_spearman(&pca, &b.bank.knobs));
            out.push(("pca.csv", plot_csv(&pca, &b.bank.returns, &b.bank.knobs)?.into_bytes()));
            out.push(("pca.svg", plot_svg(&pca, &b.bank.knobs, &title).into_bytes()));
            out.push(("ordering.csv", bank_ordering(&b, cfg.eval.n_triplets, cfg.eval.seed)?.to_csv()?.into_bytes()));
        }
    }
    Ok(out)
}

/// Writes every artifact or none of them.
fn write_all(dir: &Path, artifacts: &Artifacts) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, bytes) in artifacts {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(anyhow!(e).context(format!("writing {}", path.display())));
        }
        written.push(path);
    }
    Ok(written)
}

fn report(err: &anyhow::Error) -> i32 {
    eprintln!("error: {err:#}");
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the written paths. Errors are reported on stderr; the `Err` value
/// is the exit code.
pub fn run<I, S>(argv: I) -> Result<Vec<PathBuf>, i32>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Err(EXIT_USAGE) } else { Ok(Vec::new()) };
        }
    };
    let common = cli.command.common();
    let cfg = load_config(common).map_err(|e| report(&e))?;
    let artifacts = execute(&cli.command, &cfg).map_err(|e| report(&e))?;
    write_all(&common.out, &artifacts).map_err(|e| report(&e))
}

/// Like [`run`], printing the written paths and returning the exit code.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match run(argv) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(code) => code,
    }
}
