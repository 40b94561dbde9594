//! Run configuration: flat `section.key = value` files, command-line
//! overrides, validation and a digest of the training-relevant settings.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Lines starting with `#` are comments; an empty value leaves an optional
//! path unset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::densenet::{dense_layer_name, ArchConfig};
use crate::error::{Error, Result};
use crate::losses::{CenterReduction, LossConfig};
use crate::tensor::Real;
use crate::trainer::{OptimizerConfig, TrainConfig};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "DENSECENTER_CONFIG";

/// One configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Whether the value changes the training trajectory and so enters the
    /// configuration digest.
    pub digest: bool,
}

const fn key(key: &'static str, default: &'static str, help: &'static str, digest: bool) -> KeySpec {
    KeySpec { key, default, help, digest }
}

pub const KEYS: &[KeySpec] = &[
    key("arch.blocks", "6,12,11", "dense layers per block, comma separated", true),
    key("arch.growth_rate", "32", "channels added by each dense layer", true),
    key("arch.compression", "0.5", "transition channel factor in (0, 1]", true),
    key("arch.stem_channels", "64", "output channels of the 7x7 stem", true),
    key("arch.num_classes", "7", "classifier outputs", true),
    key("arch.input_size", "224", "square input side in pixels", true),
    key("arch.freeze_boundary", "concat_4_6", "first trainable dense layer, or `none`", true),
    key("optim.base_lr", "0.01", "initial learning rate", true),
    key("optim.momentum", "0.9", "SGD momentum in [0, 1)", true),
    key("optim.weight_decay", "0.0001", "coupled L2 weight decay", true),
    key("optim.lr_step", "20000", "iterations between learning-rate drops", true),
    key("optim.lr_factor", "0.1", "learning-rate multiplier at each drop", true),
    key("optim.max_iter", "75000", "total training iterations", false),
    key("optim.batch_size", "32", "training mini-batch size", true),
    key("loss.lambda", "0.8", "weight of the center loss", true),
    key("loss.center_alpha", "0.5", "class-center update rate", true),
    key("loss.center_reduction", "sum", "center-loss batch reduction: sum or mean", true),
    key("data.manifest", "", "ground-truth CSV with one-hot class columns", false),
    key("data.image_dir", "", "directory holding the source images", false),
    key("data.split_ratio", "0.8", "training fraction per class", false),
    key("data.split_file", "", "split file written by `split`, read by `plan`", false),
    key("data.targets", "reference", "balance targets: `reference` or a targets file", false),
    key("data.plan_file", "", "augmentation plan written by `plan`", false),
    key("data.materialized_dir", "", "output of `materialize`, holds train/ and test/", false),
    key("data.synthetic", "false", "train and evaluate on generated shape images", true),
    key("data.synthetic_train", "600", "generated training images", true),
    key("data.synthetic_test", "140", "generated test images", true),
    key("train.out_dir", "run", "directory for logs, checkpoints and the resolved config", false),
    key("train.checkpoint_every", "0", "periodic checkpoint interval, 0 disables", false),
    key("train.resume", "", "checkpoint to continue from", false),
    key("train.init_checkpoint", "", "weights imported before training", false),
    key("train.name_map", "", "`checkpoint_name,model_name` renames for the import", false),
    key("train.reinit_trainable", "true", "re-draw layers after the freeze boundary", true),
    key("eval.batch_size", "32", "evaluation mini-batch size", false),
    key("run.seed", "7", "global seed for every random stream", true),
    key("run.workers", "1", "worker threads; execution is sequential", false),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Key/value text before validation. Always holds every key.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: IndexMap<&'static str, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: KEYS.iter().map(|k| (k.key, k.default.to_owned())).collect(),
        }
    }
}

impl RawConfig {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.try_set(key, value).map_err(Error::Config)
    }

    fn try_set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let spec = spec(key).ok_or_else(|| format!("unknown key `{key}`"))?;
        self.values.insert(spec.key, value.trim().to_owned());
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut problems = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.try_set(k.trim(), v) {
                        problems.push(e);
                    }
                }
                None => problems.push(format!("override `{o}` is not key=value")),
            }
        }
        join(problems)
    }

    /// Parses configuration text over the defaults, reporting every bad
    /// line at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut seen = Vec::new();
        let mut problems = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`", i + 1));
                continue;
            };
            let k = k.trim();
            if seen.contains(&k) {
                problems.push(format!("line {}: duplicate key `{k}`", i + 1));
            } else if let Err(e) = cfg.try_set(k, v) {
                problems.push(format!("line {}: {e}", i + 1));
            }
            seen.push(k);
        }
        join(problems)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Validates every key and converts to typed settings.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut p = Parser { raw: self, problems: Vec::new() };
        let arch = ArchConfig {
            block_sizes: p.list("arch.blocks"),
            growth_rate: p.num("arch.growth_rate"),
            compression: p.num("arch.compression"),
            stem_channels: p.num("arch.stem_channels"),
            num_classes: p.num("arch.num_classes"),
            input_size: p.num("arch.input_size"),
            freeze_boundary: p.boundary("arch.freeze_boundary"),
        };
        let optim = OptimizerConfig {
            base_lr: p.num("optim.base_lr"),
            momentum: p.num("optim.momentum"),
            weight_decay: p.num("optim.weight_decay"),
            lr_step: p.num("optim.lr_step"),
            lr_factor: p.num("optim.lr_factor"),
            max_iter: p.num("optim.max_iter"),
            batch_size: p.num("optim.batch_size"),
        };
        let loss = LossConfig {
            lambda: p.num("loss.lambda"),
            reduction: p.num::<CenterReduction>("loss.center_reduction"),
        };
        let center_alpha: Real = p.num("loss.center_alpha");
        let data = DataSettings {
            manifest: p.path("data.manifest"),
            image_dir: p.path("data.image_dir"),
            split_ratio: p.num("data.split_ratio"),
            split_file: p.path("data.split_file"),
            targets: p.path("data.targets").filter(|t| t.as_os_str() != "reference"),
            plan_file: p.path("data.plan_file"),
            materialized_dir: p.path("data.materialized_dir"),
            synthetic: p.num("data.synthetic"),
            synthetic_train: p.num("data.synthetic_train"),
            synthetic_test: p.num("data.synthetic_test"),
        };
        let train = TrainSettings {
            out_dir: p.path("train.out_dir").unwrap_or_else(|| PathBuf::from("run")),
            checkpoint_every: p.num("train.checkpoint_every"),
            resume: p.path("train.resume"),
            init_checkpoint: p.path("train.init_checkpoint"),
            name_map: p.path("train.name_map"),
            reinit_trainable: p.num("train.reinit_trainable"),
        };
        let eval_batch_size: usize = p.num("eval.batch_size");
        let seed: u64 = p.num("run.seed");
        let workers: usize = p.num("run.workers");

        let mut problems = p.problems;
        if let Err(Error::Config(e)) = arch.validate() {
            problems.push(e);
        }
        problems.extend(optim.problems());
        if let Err(Error::Config(e)) = loss.validate() {
            problems.push(e);
        }
        if !(center_alpha > 0.0 && center_alpha <= 1.0) {
            problems.push(format!("loss.center_alpha must be in (0, 1], got {center_alpha}"));
        }
        if !(data.split_ratio > 0.0 && data.split_ratio <= 1.0) {
            problems.push(format!("data.split_ratio must be in (0, 1], got {}", data.split_ratio));
        }
        if data.synthetic && (data.synthetic_train == 0 || data.synthetic_test == 0) {
            problems.push("synthetic dataset sizes must be positive".to_owned());
        }
        if eval_batch_size == 0 {
            problems.push("eval.batch_size must be positive".to_owned());
        }
        if workers == 0 {
            problems.push("run.workers must be at least 1".to_owned());
        }
        if train.name_map.is_some() && train.init_checkpoint.is_none() {
            problems.push("train.name_map requires train.init_checkpoint".to_owned());
        }
        join(problems)?;

        let mut run = RunConfig {
            arch,
            optim,
            loss,
            center_alpha,
            data,
            train,
            eval_batch_size,
            seed,
            workers,
            digest: 0,
        };
        run.digest = run.compute_digest();
        Ok(run)
    }
}

fn join(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("\n")))
    }
}

struct Parser<'a> {
    raw: &'a RawConfig,
    problems: Vec<String>,
}

impl Parser<'_> {
    fn value(&self, key: &str) -> &str {
        self.raw.get(key).expect("every key is populated")
    }

    fn num<T: std::str::FromStr + Default>(&mut self, key: &str) -> T {
        let v = self.value(key);
        match v.parse() {
            Ok(x) => x,
            Err(_) => {
                self.problems.push(format!("{key}: cannot parse `{v}`"));
                T::default()
            }
        }
    }

    fn list(&mut self, key: &str) -> Vec<usize> {
        let v = self.value(key);
        match v.split(',').map(|s| s.trim().parse()).collect() {
            Ok(x) => x,
            Err(_) => {
                self.problems.push(format!("{key}: expected comma-separated integers, got `{v}`"));
                Vec::new()
            }
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        let v = self.value(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn boundary(&mut self, key: &str) -> Option<(usize, usize)> {
        let v = self.value(key);
        if v == "none" {
            return None;
        }
        match parse_layer_name(v) {
            Some(b) => Some(b),
            None => {
                self.problems.push(format!("{key}: expected `concat_<block>_<layer>` or `none`, got `{v}`"));
                None
            }
        }
    }
}

/// Inverse of [`dense_layer_name`].
pub fn parse_layer_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("concat_")?;
    let (b, j) = rest.split_once('_')?;
    let (b, j): (usize, usize) = (b.parse().ok()?, j.parse().ok()?);
    (b >= 2).then_some((b - 1, j))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub manifest: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_file: Option<PathBuf>,
    /// `None` selects the reference balance targets.
    pub targets: Option<PathBuf>,
    pub plan_file: Option<PathBuf>,
    pub materialized_dir: Option<PathBuf>,
    pub synthetic: bool,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub name_map: Option<PathBuf>,
    pub reinit_trainable: bool,
}

/// Validated settings for every command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub optim: OptimizerConfig,
    pub loss: LossConfig,
    pub center_alpha: Real,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    /// Digest of the keys that shape the training trajectory.
    pub digest: u64,
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Default for RunConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults are valid")
    }
}

impl RunConfig {
    /// Canonical text of every key, in table order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (k.key, self.canonical(k.key))).collect()
    }

    fn canonical(&self, key: &str) -> String {
        let (a, o, d, t) = (&self.arch, &self.optim, &self.data, &self.train);
        match key {
            "arch.blocks" => a.block_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "arch.growth_rate" => a.growth_rate.to_string(),
            "arch.compression" => a.compression.to_string(),
            "arch.stem_channels" => a.stem_channels.to_string(),
            "arch.num_classes" => a.num_classes.to_string(),
            "arch.input_size" => a.input_size.to_string(),
            "arch.freeze_boundary" => a
                .freeze_boundary
                .map(|(b, j)| dense_layer_name(b, j))
                .unwrap_or_else(|| "none".to_owned()),
            "optim.base_lr" => o.base_lr.to_string(),
            "optim.momentum" => o.momentum.to_string(),
            "optim.weight_decay" => o.weight_decay.to_string(),
            "optim.lr_step" => o.lr_step.to_string(),
            "optim.lr_factor" => o.lr_factor.to_string(),
            "optim.max_iter" => o.max_iter.to_string(),
            "optim.batch_size" => o.batch_size.to_string(),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.center_alpha" => self.center_alpha.to_string(),
            "loss.center_reduction" => self.loss.reduction.to_string(),
            "data.manifest" => opt_path(&d.manifest),
            "data.image_dir" => opt_path(&d.image_dir),
            "data.split_ratio" => d.split_ratio.to_string(),
            "data.split_file" => opt_path(&d.split_file),
            "data.targets" => d
                .targets
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "reference".to_owned()),
            "data.plan_file" => opt_path(&d.plan_file),
            "data.materialized_dir" => opt_path(&d.materialized_dir),
            "data.synthetic" => d.synthetic.to_string(),
            "data.synthetic_train" => d.synthetic_train.to_string(),
            "data.synthetic_test" => d.synthetic_test.to_string(),
            "train.out_dir" => t.out_dir.display().to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.resume" => opt_path(&t.resume),
            "train.init_checkpoint" => opt_path(&t.init_checkpoint),
            "train.name_map" => opt_path(&t.name_map),
            "train.reinit_trainable" => t.reinit_trainable.to_string(),
            "eval.batch_size" => self.eval_batch_size.to_string(),
            "run.seed" => self.seed.to_string(),
            "run.workers" => self.workers.to_string(),
            other => unreachable!("key table and canonical form disagree on `{other}`"),
        }
    }

    fn compute_digest(&self) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if spec(k).is_some_and(|s| s.digest) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
    }

    /// The resolved configuration as parseable text.
    pub fn to_text(&self) -> String {
        let mut s = format!("# digest {:016x}\n", self.digest);
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optim: self.optim.clone(),
            loss: self.loss,
            center_alpha: self.center_alpha,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            config_digest: self.digest,
        }
    }
}

/// Key table for `--help`.
pub fn key_table() -> String {
    let width = KEYS.iter().map(|k| k.key.len() + k.default.len() + 3).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (key = default):\n");
    for k in KEYS {
        let lhs = format!("{} = {}", k.key, k.default);
        let _ = writeln!(s, "  {lhs:width$}  {}", k.help);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::DEFAULT_TRAIN_RATIO;

    #[test]
    fn defaults_resolve_to_reference_values() {
        let run = RunConfig::default();
        assert_eq!(run.arch, ArchConfig::default());
        assert_eq!(run.optim, OptimizerConfig::default());
        assert_eq!(run.loss, LossConfig::default());
        assert_eq!(run.data.split_ratio, DEFAULT_TRAIN_RATIO);
        assert_eq!(run.optim.batch_size, 32);
        assert_eq!(run.workers, 1);
        assert!(run.data.targets.is_none());
    }

    #[test]
    fn canonical_text_matches_defaults() {
        let run = RunConfig::default();
        for (k, v) in run.entries() {
            assert_eq!(v, spec(k).unwrap().default, "{k}");
        }
        let back = RawConfig::parse(&run.to_text()).unwrap().resolve().unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RawConfig::parse("optim.lr = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `optim.lr`"));
        assert!(RawConfig::default().set("nope", "1").is_err());
    }

    #[test]
    fn all_problems_reported_together() {
        let text = "optim.base_lr = -1\noptim.momentum = 1.5\narch.blocks = 6,x\nbogus\n";
        let err = RawConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3") || err.contains("line 4"), "{err}");
        let raw = RawConfig::parse("optim.base_lr = -1\noptim.momentum = 1.5\narch.blocks = 6,x\n").unwrap();
        let err = raw.resolve().unwrap_err().to_string();
        assert!(err.contains("base_lr"), "{err}");
        assert!(err.contains("momentum"), "{err}");
        assert!(err.contains("arch.blocks"), "{err}");
    }

    #[test]
    fn comments_overrides_and_duplicates() {
        let mut raw = RawConfig::parse("# note\n\nloss.lambda = 0\n").unwrap();
        raw.apply_overrides(&["optim.max_iter=10", "arch.freeze_boundary = none"]).unwrap();
        let run = raw.resolve().unwrap();
        assert_eq!(run.loss.lambda, 0.0);
        assert_eq!(run.optim.max_iter, 10);
        assert_eq!(run.arch.freeze_boundary, None);
        assert!(raw.apply_overrides(&["max_iter"]).is_err());
        assert!(RawConfig::parse("run.seed = 1\nrun.seed = 2\n").is_err());
    }

    #[test]
    fn digest_tracks_trajectory_keys_only() {
        let base = RunConfig::default().digest;
        let with = |kv: &str| {
            let mut raw = RawConfig::default();
            raw.apply_overrides(&[kv]).unwrap();
            raw.resolve().unwrap().digest
        };
        assert_eq!(with("optim.max_iter=100"), base);
        assert_eq!(with("train.out_dir=elsewhere"), base);
        assert_eq!(with("optim.base_lr=1e-2"), base);
        assert_ne!(with("optim.base_lr=0.02"), base);
        assert_ne!(with("run.seed=8"), base);
    }

    #[test]
    fn layer_names_round_trip() {
        assert_eq!(parse_layer_name("concat_4_6"), Some((3, 6)));
        assert_eq!(dense_layer_name(3, 6), "concat_4_6");
        assert_eq!(parse_layer_name("concat_1_2"), None);
        assert_eq!(parse_layer_name("conv_4_6"), None);
    }

    #[test]
    fn key_table_lists_every_key() {
        let table = key_table();
        for k in KEYS {
            assert!(table.contains(&format!("{} = {}", k.key, k.default)), "{}", k.key);
        }
    }
}
