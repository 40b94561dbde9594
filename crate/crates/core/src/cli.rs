//! The `densecenter` command line.
//!
//! Settings come from a configuration file (`--config`, else the file
//! named by `DENSECENTER_CONFIG`, else built-in defaults) overlaid with
//! `--set key=value` flags. Every command writes the resolved configuration
//! next to its outputs.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{key_table, RawConfig, RunConfig, CONFIG_ENV};
use crate::datapipe::materialize::NORM_STATS_FILE;
use crate::datapipe::{
    materialize, plan_balance, stratified_split, AugmentationPlan, BalanceTargets, DatasetManifest, FileDataset,
    MaterializeOptions, NormStats, Split, SplitSpec, CLASS_NAMES,
};
use crate::dataset::Dataset;
use crate::densenet::{import_weights, parse_name_map, DenseNet, LayerPlan};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, metrics_report, write_score_table};
use crate::gradsuite;
use crate::rng::derive_seed;
use crate::synthetic::shape_datasets;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::{train, Sinks, TrainState, FINAL_CHECKPOINT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Name of the training log inside `train.out_dir`.
pub const TRAIN_LOG: &str = "train.log";
/// Name of the resolved configuration written beside outputs.
pub const RESOLVED_CONFIG: &str = "config.txt";
pub const SCORES_FILE: &str = "scores.csv";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Parser, Debug)]
#[command(name = "densecenter", version, about = "DenseNet-BC with joint softmax and center loss")]
pub struct Cli {
    /// Configuration file; defaults to the file named by DENSECENTER_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. --set optim.max_iter=10. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Stratified train/test split of the manifest.
    Split {
        /// Output split file; defaults to data.split_file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Balancing augmentation plan for a split.
    Plan {
        /// Output plan file; defaults to data.plan_file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes every planned image and the per-split output manifests.
    Materialize {
        /// Output directory; defaults to data.materialized_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the network, writing the log and checkpoints to train.out_dir.
    Train,
    /// Scores a checkpoint and writes the score table and metrics.
    Eval {
        /// Checkpoint to score; defaults to train.out_dir/final.dckp.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which split to score.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory; defaults to train.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// A single case, or `all`.
        #[arg(default_value = "all")]
        case: String,
        /// Random shapes drawn per case.
        #[arg(long, default_value_t = 2)]
        shapes: usize,
    },
    /// Prints the layer plan of the configured architecture.
    ArchDump,
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Manifest { .. }
        | Error::Transform(_)
        | Error::LabelOutOfRange { .. }
        | Error::ImportShapeMismatch(_)
        | Error::IterationOutOfRange { .. }
        | Error::InvalidShape(_)
        | Error::ShapeMismatch { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn command() -> clap::Command {
    Cli::command().after_help(key_table())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render();
            if e.use_stderr() {
                eprint!("{text}");
            } else {
                let _ = write!(stdout, "{text}");
            }
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolves the configuration for `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    let mut raw = match &path {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    // report unknown override keys together with invalid values
    let overrides = raw.apply_overrides(&cli.overrides);
    match (overrides, raw.resolve()) {
        (Ok(()), resolved) => resolved,
        (Err(e), Ok(_)) => Err(e),
        (Err(Error::Config(a)), Err(Error::Config(b))) => Err(Error::Config(format!("{a}\n{b}"))),
        (Err(e), Err(_)) => Err(e),
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_config(cli)?;
    if cfg.workers > 1 {
        log::warn!("run.workers = {} has no effect: execution is sequential", cfg.workers);
    }
    match &cli.command {
        Command::Split { out: path } => cmd_split(&cfg, path.as_deref(), out),
        Command::Plan { out: path } => cmd_plan(&cfg, path.as_deref(), out),
        Command::Materialize { out: path } => cmd_materialize(&cfg, path.as_deref(), out),
        Command::Train => cmd_train(&cfg, out),
        Command::Eval { checkpoint, split, out: dir } => cmd_eval(&cfg, checkpoint.as_deref(), *split, dir.as_deref(), out),
        Command::Gradcheck { case, shapes } => cmd_gradcheck(&cfg, case, *shapes, out),
        Command::ArchDump => cmd_arch_dump(&cfg, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("standard output", e)
}

fn required<'a>(flag: Option<&'a Path>, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    flag.or(value.as_deref())
        .ok_or_else(|| Error::Config(format!("{key} is not set")))
}

/// Writes the resolved configuration as `{file}.config` beside a file
/// output.
fn write_config_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let mut name = file.file_name().map(OsString::from).unwrap_or_default();
    name.push(".config");
    let path = file.with_file_name(name);
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn write_config_into(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn count_table(header: &str, rows: &[(&str, &[usize; 7])]) -> String {
    let mut s = format!("{header:<8}");
    for c in CLASS_NAMES {
        s.push_str(&format!(" {c:>7}"));
    }
    s.push_str("   total\n");
    for (name, counts) in rows {
        s.push_str(&format!("{name:<8}"));
        for c in counts.iter() {
            s.push_str(&format!(" {c:>7}"));
        }
        s.push_str(&format!(" {:>7}\n", counts.iter().sum::<usize>()));
    }
    s
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(required(None, "data.manifest", &cfg.data.manifest)?)
}

pub fn cmd_split(cfg: &RunConfig, out_path: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let dest = required(out_path, "data.split_file", &cfg.data.split_file)?;
    let manifest = load_manifest(cfg)?;
    let split = stratified_split(&manifest, cfg.data.split_ratio, cfg.seed)?;
    split.save(dest)?;
    write_config_beside(cfg, dest)?;
    let (tr, te) = (split.counts(Split::Train), split.counts(Split::Test));
    write!(out, "{}", count_table("split", &[("train", &tr), ("test", &te)])).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

pub fn cmd_plan(cfg: &RunConfig, out_path: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let dest = required(out_path, "data.plan_file", &cfg.data.plan_file)?;
    let manifest = load_manifest(cfg)?;
    let split = SplitSpec::load(required(None, "data.split_file", &cfg.data.split_file)?, &manifest)?;
    let targets = match &cfg.data.targets {
        Some(p) => BalanceTargets::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BalanceTargets::reference(),
    };
    let plan = plan_balance(&split, &targets, cfg.seed)?;
    plan.save(dest)?;
    write_config_beside(cfg, dest)?;
    let (tr, te) = (plan.totals(Split::Train), plan.totals(Split::Test));
    write!(out, "{}", count_table("plan", &[("train", &tr), ("test", &te)])).map_err(stdout_err)?;
    for cell in plan.deviations() {
        writeln!(
            out,
            "deviation {} {}: target {}, planned {}",
            cell.split,
            CLASS_NAMES[cell.label],
            cell.target,
            cell.planned()
        )
        .map_err(stdout_err)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_materialize(cfg: &RunConfig, out_path: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let dest = required(out_path, "data.materialized_dir", &cfg.data.materialized_dir)?;
    let plan = AugmentationPlan::load(required(None, "data.plan_file", &cfg.data.plan_file)?)?;
    let opts = MaterializeOptions {
        image_dir: required(None, "data.image_dir", &cfg.data.image_dir)?.to_owned(),
        out_dir: dest.to_owned(),
        input_size: Some(cfg.arch.input_size),
    };
    let report = materialize(&plan, &opts)?;
    write_config_into(cfg, dest)?;
    write!(out, "{}", count_table("written", &[("train", &report.train), ("test", &report.test)])).map_err(stdout_err)?;
    writeln!(out, "copied={}", report.copied).map_err(stdout_err)?;
    write!(out, "{}", report.norm.to_text()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

/// Training and evaluation data for the configured source.
enum Data {
    Synthetic(crate::dataset::InMemoryDataset),
    Files(FileDataset),
}

impl Data {
    fn as_dyn(&self) -> &dyn Dataset {
        match self {
            Data::Synthetic(d) => d,
            Data::Files(d) => d,
        }
    }
}

fn read_norm(dir: &Path) -> Result<NormStats> {
    let path = dir.join(NORM_STATS_FILE);
    NormStats::parse(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
}

/// Loads one split. `norm` overrides the statistics stored with the data.
fn load_data(cfg: &RunConfig, split: Split, norm: Option<NormStats>) -> Result<(Data, NormStats)> {
    if cfg.data.synthetic {
        let d = shape_datasets(cfg.data.synthetic_train, cfg.data.synthetic_test, cfg.arch.input_size, cfg.seed)?;
        let data = match split {
            Split::Train => d.train,
            Split::Test => d.test,
        };
        if let Some(n) = norm.filter(|n| *n != d.norm) {
            log::warn!("checkpoint normalization {n:?} differs from the generated data's {:?}", d.norm);
        }
        return Ok((Data::Synthetic(data), d.norm));
    }
    let root = required(None, "data.materialized_dir", &cfg.data.materialized_dir)?;
    let norm = match norm {
        Some(n) => n,
        None => read_norm(root)?,
    };
    let ds = FileDataset::open(&root.join(split.as_str()), cfg.arch.input_size, norm)?;
    Ok((Data::Files(ds), norm))
}

fn build_model(cfg: &RunConfig) -> Result<DenseNet> {
    let mut model = DenseNet::new(cfg.arch.clone(), cfg.seed)?;
    if let Some(path) = &cfg.train.init_checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let map = match &cfg.train.name_map {
            Some(p) => parse_name_map(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Default::default(),
        };
        let report = import_weights(&mut model, &ckpt, &map)?;
        log::info!(
            "imported {} tensors, {} checkpoint entries unused, {} model tensors kept",
            report.matched.len(),
            report.skipped.len(),
            report.untouched.len()
        );
    } else if cfg.arch.freeze_boundary.is_some() {
        log::warn!("frozen layers keep their random initialization: no train.init_checkpoint given");
    }
    if cfg.arch.freeze_boundary.is_some() && cfg.train.reinit_trainable {
        model.reinitialize_trainable(derive_seed(cfg.seed, &[b"reinit"]))?;
    }
    Ok(model)
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let dir = &cfg.train.out_dir;
    write_config_into(cfg, dir)?;
    let (data, norm) = load_data(cfg, Split::Train, None)?;
    let tc = cfg.train_config();
    let mut model;
    let state = match &cfg.train.resume {
        Some(path) => {
            model = DenseNet::new(cfg.arch.clone(), cfg.seed)?;
            let ckpt = Checkpoint::load(path)?;
            TrainState::restore(&mut model, &ckpt, cfg.digest, cfg.center_alpha)?
        }
        None => {
            model = build_model(cfg)?;
            TrainState::new(&model, cfg.center_alpha)?.with_extras(norm.to_named())
        }
    };
    let log_path = dir.join(TRAIN_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(cfg.train.resume.is_some())
        .truncate(cfg.train.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let start = state.iteration;
    let mut sinks = Sinks {
        log: Some(&mut log),
        checkpoint_dir: Some(dir.clone()),
    };
    let report = train(&mut model, data.as_dyn(), &tc, state, &mut sinks)?;
    drop(sinks);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    writeln!(out, "iterations={}..{}", start, report.state.iteration).map_err(stdout_err)?;
    if let Some(last) = report.records.last() {
        writeln!(out, "last={last}").map_err(stdout_err)?;
    }
    if let Some(p) = &report.final_checkpoint {
        writeln!(out, "checkpoint={}", p.display()).map_err(stdout_err)?;
    }
    writeln!(out, "digest={:016x}", report.checkpoint.digest()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let default_ckpt = cfg.train.out_dir.join(FINAL_CHECKPOINT);
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    let ckpt = Checkpoint::load(ckpt_path)?;
    if ckpt.config_digest != cfg.digest {
        log::warn!(
            "CONFIGURATION MISMATCH: {} was trained under configuration {:016x}, current is {:016x}",
            ckpt_path.display(),
            ckpt.config_digest,
            cfg.digest
        );
    }
    let mut model = DenseNet::new(cfg.arch.clone(), cfg.seed)?;
    let report = import_weights(&mut model, &ckpt, &Default::default())?;
    if !report.untouched.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint lacks {} model tensors, first `{}`",
            report.untouched.len(),
            report.untouched[0]
        )));
    }
    let norm = NormStats::from_named(|n| ckpt.get(n));
    let (data, _) = load_data(cfg, split, norm)?;
    let outcome = evaluate(&mut model, data.as_dyn(), cfg.eval_batch_size)?;
    for (id, why) in &outcome.failures {
        log::warn!("skipped {id}: {why}");
    }
    let dest = dir.unwrap_or(&cfg.train.out_dir);
    write_config_into(cfg, dest)?;
    let scores = dest.join(SCORES_FILE);
    let f = File::create(&scores).map_err(|e| Error::io(&scores, e))?;
    write_score_table(&outcome.scores, BufWriter::new(f)).map_err(|e| Error::io(&scores, e))?;
    let metrics = metrics_report(&outcome.matrix, outcome.failures.len());
    let mpath = dest.join(METRICS_FILE);
    std::fs::write(&mpath, &metrics).map_err(|e| Error::io(&mpath, e))?;
    write!(out, "{metrics}").map_err(stdout_err)?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(cfg: &RunConfig, case: &str, shapes: usize, out: &mut dyn Write) -> Result<i32> {
    let rows = gradsuite::run_suite(Some(case), cfg.seed, shapes)?;
    write!(out, "{}", gradsuite::format_table(&rows)).map_err(stdout_err)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    writeln!(
        out,
        "checks={} shapes={} failed={failed}",
        rows.len(),
        gradsuite::distinct_shapes(&rows)
    )
    .map_err(stdout_err)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

pub fn cmd_arch_dump(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let plan = LayerPlan::from_config(&cfg.arch)?;
    write!(out, "{}", plan.to_table()).map_err(stdout_err)?;
    writeln!(out, "conv_layers={}", plan.conv_layer_count()).map_err(stdout_err)?;
    writeln!(out, "feature_dim={}", plan.feature_dim()).map_err(stdout_err)?;
    Ok(EXIT_OK)
}
