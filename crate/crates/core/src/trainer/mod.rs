//! SGD with momentum, the step learning-rate schedule and the training loop.
//!
//! One iteration draws a batch, runs the model in training mode, forms
//! `L = L_s + λ·L_c`, backpropagates, applies [`sgd_step`] at
//! [`lr_at`]`(iter)` and finally moves the class centers toward the batch
//! features. Batch order is a pure function of the seed and the iteration
//! number, so a run resumed from a checkpoint replays exactly the batches
//! the uninterrupted run would have drawn.

pub mod checkpoint;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, CenterBank, LossConfig, DEFAULT_CENTER_ALPHA};
use crate::model::{Model, ParamId, ParamStore};
use crate::nn::Mode;
use crate::rng::stream_seed;
use crate::tensor::{Real, Tape, Tensor};

pub const MOMENTUM_PREFIX: &str = "momentum.";
pub const CENTER_PREFIX: &str = "center_";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between learning-rate drops.
    pub lr_step: u64,
    /// Multiplier applied at every drop.
    pub lr_factor: f64,
    pub max_iter: u64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            lr_step: 20000,
            lr_factor: 0.1,
            max_iter: 75000,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            out.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_step == 0 {
            out.push("lr_step must be positive".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            out.push(format!("lr_factor must be in (0, 1), got {}", self.lr_factor));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().as_slice() {
            [] => Ok(()),
            p => Err(Error::Config(p.join("; "))),
        }
    }
}

/// `base_lr · factor^⌊iter / lr_step⌋`.
///
/// The power is applied by repeated multiplication so each plateau equals
/// the value obtained by multiplying the previous plateau by the factor.
pub fn lr_at(iter: u64, cfg: &OptimizerConfig) -> Result<f64> {
    if iter >= cfg.max_iter {
        return Err(Error::IterationOutOfRange {
            iter,
            max_iter: cfg.max_iter,
        });
    }
    let mut lr = cfg.base_lr;
    for _ in 0..iter / cfg.lr_step {
        lr *= cfg.lr_factor;
    }
    Ok(lr)
}

/// One momentum update on raw slices:
/// `g = grad + wd·param`, `buf = μ·buf + g`, `param -= lr·buf`.
pub fn sgd_update(param: &mut [Real], grad: &[Real], buf: &mut [Real], lr: f64, cfg: &OptimizerConfig) {
    let (lr, mu, wd) = (lr as Real, cfg.momentum as Real, cfg.weight_decay as Real);
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let g = g + wd * *p;
        *b = mu * *b + g;
        *p -= lr * *b;
    }
}

/// Momentum buffers of the optimizer-updated parameters, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    bufs: IndexMap<String, Tensor>,
}

impl Momentum {
    pub fn zeros(store: &ParamStore) -> Self {
        let bufs = store
            .iter()
            .filter(|(id, _, _)| store.is_optimized(*id))
            .map(|(_, name, p)| (name.to_owned(), Tensor::zeros_like(&p.tensor)))
            .collect();
        Momentum { bufs }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.bufs.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.bufs.iter()
    }
}

/// Applies [`sgd_update`] to every optimizer-updated parameter. Frozen
/// parameters and running statistics are skipped.
pub fn sgd_step<'g>(
    store: &mut ParamStore,
    grad_of: impl Fn(ParamId) -> Option<&'g [Real]>,
    momentum: &mut Momentum,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(id, _, _)| store.is_optimized(*id))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let name = store.name(id).to_owned();
        let grad = grad_of(id).ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let buf = momentum
            .bufs
            .entry(name)
            .or_insert_with(|| Tensor::zeros_like(&store.get(id).tensor));
        sgd_update(store.get_mut(id).tensor.data_mut(), grad, buf.data_mut(), lr, cfg);
    }
    Ok(())
}

/// Number of whole batches per pass over `len` samples.
pub fn batches_per_epoch(len: usize, batch_size: usize) -> usize {
    len / batch_size
}

/// Sample order of one epoch.
pub fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "shuffle", epoch));
    order.shuffle(&mut rng);
    order
}

/// Dataset indices of the batch drawn at `iter`. Each epoch is a fresh
/// seeded shuffle; the trailing partial batch of an epoch is dropped.
pub fn batch_indices(seed: u64, iter: u64, len: usize, batch_size: usize) -> Result<Vec<usize>> {
    let per_epoch = batches_per_epoch(len, batch_size);
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds the {len} training samples"
        )));
    }
    let epoch = iter / per_epoch as u64;
    let pos = (iter % per_epoch as u64) as usize;
    let perm = epoch_permutation(seed, epoch, len);
    Ok(perm[pos * batch_size..(pos + 1) * batch_size].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimizerConfig,
    pub loss: LossConfig,
    /// Center update rate α.
    pub center_alpha: Real,
    pub seed: u64,
    /// Write a checkpoint after every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Fingerprint of the resolved run configuration, stored in checkpoints.
    pub config_digest: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimizerConfig::default(),
            loss: LossConfig::default(),
            center_alpha: DEFAULT_CENTER_ALPHA,
            seed: 0,
            checkpoint_every: 0,
            config_digest: 0,
        }
    }
}

/// Everything besides model parameters that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub momentum: Momentum,
    pub centers: CenterBank,
    /// Tensors carried through checkpoints unchanged, such as input
    /// normalization statistics.
    pub extras: Vec<(String, Tensor)>,
}

impl TrainState {
    /// Fresh state: zero momentum, zero centers.
    pub fn new<M: Model + ?Sized>(model: &M, center_alpha: Real) -> Result<Self> {
        Ok(TrainState {
            iteration: 0,
            momentum: Momentum::zeros(model.params()),
            centers: CenterBank::new(model.num_classes(), model.feature_dim(), center_alpha)?,
            extras: Vec::new(),
        })
    }

    pub fn with_extras(mut self, extras: Vec<(String, Tensor)>) -> Self {
        self.extras = extras;
        self
    }

    /// Model parameters, running statistics, momentum buffers, centers and
    /// extras, in that order.
    pub fn to_checkpoint<M: Model + ?Sized>(&self, model: &M, config_digest: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.iteration, config_digest);
        for (name, t) in model.params().to_named() {
            ckpt.insert(name, t);
        }
        for (name, t) in self.momentum.iter() {
            ckpt.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
        }
        for (name, t) in self.centers.to_named() {
            ckpt.insert(name, t);
        }
        for (name, t) in &self.extras {
            ckpt.insert(name.clone(), t.clone());
        }
        ckpt
    }

    /// Loads a checkpoint written by [`TrainState::to_checkpoint`] into
    /// `model` and returns the matching state.
    pub fn restore<M: Model + ?Sized>(model: &mut M, ckpt: &Checkpoint, config_digest: u64, center_alpha: Real) -> Result<Self> {
        if ckpt.config_digest != config_digest {
            return Err(Error::Config(format!(
                "checkpoint was written under configuration {:016x}, current is {config_digest:016x}",
                ckpt.config_digest
            )));
        }
        let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_owned()).collect();
        for name in &names {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            model.params_mut().set(name, t.clone())?;
        }
        let mut momentum = Momentum::zeros(model.params());
        for (name, buf) in momentum.bufs.iter_mut() {
            let t = ckpt
                .get(&format!("{MOMENTUM_PREFIX}{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks momentum for `{name}`")))?;
            if t.shape() != buf.shape() {
                return Err(Error::ShapeMismatch {
                    op: "restore momentum",
                    lhs: buf.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *buf = t.clone();
        }
        let rows: Vec<Tensor> = (0..model.num_classes())
            .map(|j| {
                ckpt.get(&format!("{CENTER_PREFIX}{j}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {CENTER_PREFIX}{j}")))
            })
            .collect::<Result<_>>()?;
        let centers = CenterBank::from_rows(&rows, center_alpha)?;
        let extras = ckpt
            .tensors()
            .filter(|(n, _)| {
                !names.contains(n) && !n.starts_with(MOMENTUM_PREFIX) && !n.starts_with(CENTER_PREFIX)
            })
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Ok(TrainState {
            iteration: ckpt.iteration,
            momentum,
            centers,
            extras,
        })
    }
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub loss: Real,
    pub ls: Real,
    pub lc: Real,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.iter, self.loss, self.ls, self.lc, self.lr)
    }
}

impl LogRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed log line `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(LogRecord {
            iter: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            ls: f[2].parse().map_err(|_| bad())?,
            lc: f[3].parse().map_err(|_| bad())?,
            lr: f[4].parse().map_err(|_| bad())?,
        })
    }
}

/// Where a run writes its log lines and checkpoints.
#[derive(Default)]
pub struct Sinks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Iterations run in this call.
    pub steps: u64,
    pub records: Vec<LogRecord>,
    /// Path of `final.dckp` when a checkpoint directory was given.
    pub final_checkpoint: Option<PathBuf>,
    pub checkpoint: Checkpoint,
    pub state: TrainState,
}

pub const FINAL_CHECKPOINT: &str = "final.dckp";

/// Name of the periodic checkpoint written after `iteration` steps.
pub fn checkpoint_file_name(iteration: u64) -> String {
    format!("iter_{iteration:08}.dckp")
}

fn save_into(dir: &Path, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let path = dir.join(name);
    ckpt.save(&path)?;
    Ok(path)
}

/// Runs iterations `state.iteration .. cfg.optim.max_iter`.
pub fn train<M, D>(model: &mut M, data: &D, cfg: &TrainConfig, mut state: TrainState, sinks: &mut Sinks<'_>) -> Result<TrainReport>
where
    M: Model + ?Sized,
    D: Dataset + ?Sized,
{
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    let bs = cfg.optim.batch_size;
    if cfg.optim.max_iter > state.iteration && batches_per_epoch(data.len(), bs) == 0 {
        return Err(Error::Config(format!(
            "batch size {bs} exceeds the {} training samples",
            data.len()
        )));
    }
    let per_epoch = batches_per_epoch(data.len(), bs).max(1) as u64;
    let mut perm: Option<(u64, Vec<usize>)> = None;
    let mut records = Vec::new();
    let start = state.iteration;
    for iter in start..cfg.optim.max_iter {
        let lr = lr_at(iter, &cfg.optim)?;
        let epoch = iter / per_epoch;
        if perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            perm = Some((epoch, epoch_permutation(cfg.seed, epoch, data.len())));
        }
        let pos = (iter % per_epoch) as usize;
        let order = &perm.as_ref().expect("permutation set above").1;
        let idx = &order[pos * bs..(pos + 1) * bs];
        let (x, labels) = data.batch(idx)?;

        let mut tape = Tape::new();
        let input = tape.constant(x);
        let out = model.forward(&mut tape, input, Mode::Training)?;
        let ls = losses::softmax_cross_entropy(&mut tape, out.logits, &labels)?;
        let lc = losses::center_loss(&mut tape, out.features, &labels, &state.centers, cfg.loss.reduction)?;
        let loss = losses::joint_loss(&mut tape, ls, lc, &cfg.loss)?;
        let rec = LogRecord {
            iter,
            loss: tape.value(loss).item()?,
            ls: tape.value(ls).item()?,
            lc: tape.value(lc).item()?,
            lr,
        };
        if !(rec.loss.is_finite() && rec.ls.is_finite() && rec.lc.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                lr,
                batch: idx.iter().map(|&i| data.id(i).to_owned()).collect(),
            });
        }
        tape.backward(loss)?;
        let bindings = &out.bindings;
        sgd_step(
            model.params_mut(),
            |id| bindings.get(id).and_then(|v| tape.grad(v)),
            &mut state.momentum,
            lr,
            &cfg.optim,
        )?;
        state.centers.update(tape.value(out.features), &labels)?;
        state.iteration = iter + 1;

        if let Some(log) = sinks.log.as_deref_mut() {
            writeln!(log, "{rec}").map_err(|e| Error::io("training log", e))?;
        }
        records.push(rec);
        if let Some(dir) = &sinks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
                let ckpt = state.to_checkpoint(model, cfg.config_digest);
                save_into(dir, &checkpoint_file_name(state.iteration), &ckpt)?;
            }
        }
    }
    if let Some(log) = sinks.log.as_deref_mut() {
        log.flush().map_err(|e| Error::io("training log", e))?;
    }
    let checkpoint = state.to_checkpoint(model, cfg.config_digest);
    let final_checkpoint = match &sinks.checkpoint_dir {
        Some(dir) => Some(save_into(dir, FINAL_CHECKPOINT, &checkpoint)?),
        None => None,
    };
    Ok(TrainReport {
        steps: state.iteration - start,
        records,
        final_checkpoint,
        checkpoint,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::InMemoryDataset;
    use crate::model::{MlpClassifier, ParamKind};

    #[test]
    fn schedule_plateaus() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.01);
        assert_eq!(lr_at(19999, &cfg).unwrap(), 0.01);
        assert_eq!(lr_at(20000, &cfg).unwrap(), 0.001);
        assert_eq!(lr_at(40000, &cfg).unwrap(), 0.0001);
        assert_eq!(lr_at(74999, &cfg).unwrap(), 1e-5);
        assert!(matches!(lr_at(75000, &cfg), Err(Error::IterationOutOfRange { .. })));
    }

    #[test]
    fn schedule_drop_count() {
        let cfg = OptimizerConfig::default();
        let mut drops = 0;
        let mut prev = lr_at(0, &cfg).unwrap();
        for it in 1..cfg.max_iter {
            let lr = lr_at(it, &cfg).unwrap();
            assert!(lr <= prev);
            if lr < prev {
                drops += 1;
            }
            prev = lr;
        }
        assert_eq!(drops, (cfg.max_iter - 1) / cfg.lr_step);
        assert_eq!(drops, 3);
    }

    fn cfg(momentum: f64, wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            momentum,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn vanilla_and_fixed_point() {
        let mut p = [1.0, -2.0];
        let mut b = [0.0; 2];
        sgd_update(&mut p, &[0.5, 1.0], &mut b, 0.1, &cfg(0.0, 0.0));
        assert_eq!(p, [1.0 - 0.1 * 0.5, -2.0 - 0.1]);

        let mut p = [3.0];
        let mut b = [0.0];
        sgd_update(&mut p, &[0.0], &mut b, 0.1, &cfg(0.9, 0.0));
        assert_eq!(p, [3.0]);
    }

    #[test]
    fn momentum_hand_iteration() {
        let c = cfg(0.9, 0.0);
        let mut p = [1.0 as Real];
        let mut b = [0.0 as Real];
        sgd_update(&mut p, &[1.0], &mut b, 0.1, &c);
        assert!((b[0] - 1.0).abs() < 1e-6 && (p[0] - 0.9).abs() < 1e-6);
        sgd_update(&mut p, &[1.0], &mut b, 0.1, &c);
        assert!((b[0] - 1.9).abs() < 1e-6 && (p[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut p = [2.0 as Real];
        let mut b = [0.0 as Real];
        sgd_update(&mut p, &[0.0], &mut b, 0.5, &cfg(0.0, 0.1));
        assert!((p[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-6);
    }

    #[test]
    fn sgd_step_skips_frozen_and_requires_grads() {
        let mut store = ParamStore::new();
        let w = store.insert("w".into(), Tensor::ones(&[2]), ParamKind::Weight, true, 2);
        let f = store.insert("f".into(), Tensor::ones(&[2]), ParamKind::Weight, false, 2);
        let bn = store.insert_bn("bn", 2, true);
        let mut m = Momentum::zeros(&store);
        assert!(m.get("f").is_none() && m.get("bn.running_mean").is_none());
        let g = [1.0 as Real; 2];
        sgd_step(&mut store, |id| (id == w || id == bn.gamma || id == bn.beta).then_some(&g[..]), &mut m, 0.5, &cfg(0.0, 0.0)).unwrap();
        assert_eq!(store.get(w).tensor.data(), &[0.5, 0.5]);
        assert_eq!(store.get(f).tensor.data(), &[1.0, 1.0]);
        assert_eq!(store.get(bn.mean).tensor.data(), &[0.0, 0.0]);
        let err = sgd_step(&mut store, |id| (id == w).then_some(&g[..]), &mut m, 0.5, &cfg(0.0, 0.0));
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "bn.gamma"));
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        // f(p) = ½ Σ a_i p_i², gradient a_i p_i
        let a = [0.5 as Real, 2.0, 1.0];
        let c = cfg(0.9, 0.0);
        let mut store = ParamStore::new();
        let id = store.insert("p".into(), Tensor::from_vec(vec![1.0, -1.0, 0.5]), ParamKind::Weight, true, 1);
        let mut m = Momentum::zeros(&store);
        let mut p_ref = [1.0 as Real, -1.0, 0.5];
        let mut b_ref = [0.0 as Real; 3];
        for _ in 0..50 {
            let g: Vec<Real> = store.get(id).tensor.data().iter().zip(&a).map(|(p, a)| a * p).collect();
            sgd_step(&mut store, |_| Some(&g[..]), &mut m, 0.1, &c).unwrap();
            for i in 0..3 {
                let gi = a[i] * p_ref[i];
                b_ref[i] = 0.9 * b_ref[i] + gi;
                p_ref[i] -= 0.1 * b_ref[i];
            }
        }
        assert_eq!(store.get(id).tensor.data(), &p_ref);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|it| batch_indices(3, it, 10, 2).unwrap()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 10, 2).unwrap(), batch_indices(3, 7, 10, 2).unwrap());
        assert!(batch_indices(3, 0, 3, 4).is_err());
    }

    #[test]
    fn log_line_round_trip() {
        let r = LogRecord { iter: 3, loss: 1.5, ls: 1.25, lc: 0.25, lr: 0.01 };
        assert_eq!(r.to_string(), "3,1.5,1.25,0.25,0.01");
        assert_eq!(LogRecord::parse(&r.to_string()).unwrap(), r);
        assert!(LogRecord::parse("1,2").is_err());
    }

    fn toy_data() -> InMemoryDataset {
        // two linearly separable clusters
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            let y = i % 2;
            let s = if y == 0 { -1.0 } else { 1.0 };
            data.extend([s * (1.0 + 0.01 * i as Real), s * 0.5]);
            labels.push(y);
        }
        let ids = (0..32).map(|i| format!("s{i}")).collect();
        InMemoryDataset::new(ids, labels, Tensor::new(&[32, 2], data).unwrap()).unwrap()
    }

    fn toy_cfg(max_iter: u64) -> TrainConfig {
        TrainConfig {
            optim: OptimizerConfig {
                max_iter,
                batch_size: 8,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn empty_run_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MlpClassifier::new(2, 8, 2, 2, 1);
        let state = TrainState::new(&m, 0.5).unwrap();
        let mut sinks = Sinks {
            log: None,
            checkpoint_dir: Some(dir.path().to_owned()),
        };
        let rep = train(&mut m, &toy_data(), &toy_cfg(0), state, &mut sinks).unwrap();
        assert_eq!(rep.steps, 0);
        assert_eq!(rep.checkpoint.iteration, 0);
        assert!(rep.final_checkpoint.unwrap().exists());
    }

    #[test]
    fn smoke_training_reduces_softmax_loss() {
        let mut m = MlpClassifier::new(2, 8, 2, 2, 1);
        let state = TrainState::new(&m, 0.5).unwrap();
        let mut log = Vec::new();
        let mut sinks = Sinks {
            log: Some(&mut log),
            checkpoint_dir: None,
        };
        let rep = train(&mut m, &toy_data(), &toy_cfg(200), state, &mut sinks).unwrap();
        assert_eq!(rep.steps, 200);
        assert!(rep.records.last().unwrap().ls < rep.records[0].ls);
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 200);
    }

    #[test]
    #[cfg_attr(feature = "f64", ignore = "checkpoint files hold 32-bit reals")]
    fn runs_are_deterministic_and_resumable() {
        let data = toy_data();
        let cfg = TrainConfig {
            checkpoint_every: 20,
            ..toy_cfg(60)
        };
        let run = |dir: &Path| {
            let mut m = MlpClassifier::new(2, 8, 2, 2, 1);
            let state = TrainState::new(&m, 0.5).unwrap();
            let mut sinks = Sinks {
                log: None,
                checkpoint_dir: Some(dir.to_owned()),
            };
            train(&mut m, &data, &cfg, state, &mut sinks).unwrap()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = run(d1.path());
        let b = run(d2.path());
        assert_eq!(a.records, b.records);
        assert_eq!(a.checkpoint.digest(), b.checkpoint.digest());

        let mid = Checkpoint::load(&d1.path().join(checkpoint_file_name(20))).unwrap();
        let mut m = MlpClassifier::new(2, 8, 2, 2, 99);
        let state = TrainState::restore(&mut m, &mid, cfg.config_digest, 0.5).unwrap();
        assert_eq!(state.iteration, 20);
        let c = train(&mut m, &data, &cfg, state, &mut Sinks::default()).unwrap();
        assert_eq!(c.steps, 40);
        assert_eq!(c.checkpoint.encode(), a.checkpoint.encode());
        assert_eq!(&a.records[20..], &c.records[..]);
    }

    #[test]
    fn restore_rejects_foreign_config() {
        let m = MlpClassifier::new(2, 8, 2, 2, 1);
        let ckpt = TrainState::new(&m, 0.5).unwrap().to_checkpoint(&m, 5);
        let mut m2 = m.clone();
        assert!(TrainState::restore(&mut m2, &ckpt, 6, 0.5).is_err());
        assert!(TrainState::restore(&mut m2, &ckpt, 5, 0.5).is_ok());
    }

    #[test]
    fn nan_loss_aborts_with_batch_ids() {
        let data = toy_data();
        let mut m = MlpClassifier::new(2, 8, 2, 2, 1);
        m.params_mut().set("fc.weight", Tensor::full(&[2, 2], Real::NAN)).unwrap();
        let state = TrainState::new(&m, 0.5).unwrap();
        let mut sinks = Sinks::default();
        let err = train(&mut m, &data, &toy_cfg(5), state, &mut sinks).unwrap_err();
        match err {
            Error::NonFiniteLoss { iteration, batch, .. } => {
                assert_eq!(iteration, 0);
                assert_eq!(batch.len(), 8);
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
