//! The reduced DenseNet-BC: a 7×7 stem, three dense blocks of bottleneck
//! layers joined by compressing transitions, a final BN-ReLU with global
//! average pooling (`pool5`) and a linear classifier (`fc`).
//!
//! Layer names follow the `concat_{b+1}_{j}` scheme, so the last layer of
//! the default configuration is `concat_4_11` and fine-tuning starts at
//! `concat_4_6`.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{BnIds, Bindings, Model, ModelOutput, ParamId, ParamKind, ParamStore};
use crate::nn::{self, conv_output_size, ConvSpec, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::checkpoint::Checkpoint;

/// Bottleneck width as a multiple of the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

const STEM_KERNEL: usize = 7;
const STEM_CONV: ConvSpec = ConvSpec::new(2, 3);
const POINTWISE: ConvSpec = ConvSpec::new(1, 0);
const SPATIAL: ConvSpec = ConvSpec::new(1, 1);

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub block_sizes: Vec<usize>,
    pub growth_rate: usize,
    pub compression: f64,
    pub stem_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    /// `(block, layer)`, both 1-based: the first trainable dense layer.
    pub freeze_boundary: Option<(usize, usize)>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            block_sizes: vec![6, 12, 11],
            growth_rate: 32,
            compression: 0.5,
            stem_channels: 64,
            num_classes: 7,
            input_size: 224,
            freeze_boundary: Some((3, 6)),
        }
    }
}

impl ArchConfig {
    /// The four-block DenseNet-121 layout.
    pub fn densenet121() -> Self {
        ArchConfig {
            block_sizes: vec![6, 12, 24, 16],
            freeze_boundary: None,
            num_classes: 1000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.block_sizes.is_empty() || self.block_sizes.len() > 4 {
            problems.push(format!("1 to 4 dense blocks required, got {}", self.block_sizes.len()));
        }
        if self.block_sizes.contains(&0) {
            problems.push("every dense block needs at least one layer".to_string());
        }
        if self.growth_rate == 0 || self.stem_channels == 0 || self.num_classes == 0 || self.input_size == 0 {
            problems.push("growth rate, stem channels, classes and input size must be positive".to_string());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            problems.push(format!("compression must be in (0, 1], got {}", self.compression));
        }
        if let Some((b, j)) = self.freeze_boundary {
            let ok = b >= 1 && b <= self.block_sizes.len() && j >= 1 && j <= self.block_sizes[b - 1];
            if !ok {
                problems.push(format!("freeze boundary ({b},{j}) names no dense layer"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn compress(&self, channels: usize) -> usize {
        ((channels as f64 * self.compression) + 1e-9).floor().max(1.0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Stem,
    Bottleneck,
    Transition,
    GlobalPool,
    Classifier,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Stem => "stem",
            LayerKind::Bottleneck => "bottleneck",
            LayerKind::Transition => "transition",
            LayerKind::GlobalPool => "global_pool",
            LayerKind::Classifier => "classifier",
        }
    }

    /// Convolutions contributed by one layer of this kind.
    pub fn conv_count(self) -> usize {
        match self {
            LayerKind::Stem | LayerKind::Transition => 1,
            LayerKind::Bottleneck => 2,
            LayerKind::GlobalPool | LayerKind::Classifier => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub trainable: bool,
    /// Side of the square activation this layer outputs (1 for pool5 and fc).
    pub spatial: usize,
}

/// The realized, named layer sequence of an [`ArchConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    records: Vec<LayerRecord>,
}

/// Name of dense layer `layer` in block `block` (both 1-based).
pub fn dense_layer_name(block: usize, layer: usize) -> String {
    format!("concat_{}_{}", block + 1, layer)
}

impl LayerPlan {
    pub fn from_config(cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let underflow = |what: &str, side: usize| {
            Error::InvalidShape(format!("input size {} underflows at {what} (side {side})", cfg.input_size))
        };
        let k = cfg.growth_rate;
        let s = conv_output_size(cfg.input_size, STEM_KERNEL, 2, 3).ok_or_else(|| underflow("conv1", 0))?;
        let mut side = conv_output_size(s, 3, 2, 1).ok_or_else(|| underflow("stem pool", s))?;
        let mut records = vec![LayerRecord {
            name: "conv1".into(),
            kind: LayerKind::Stem,
            in_channels: 3,
            out_channels: cfg.stem_channels,
            trainable: true,
            spatial: side,
        }];
        let mut width = cfg.stem_channels;
        for (bi, &size) in cfg.block_sizes.iter().enumerate() {
            let block = bi + 1;
            for j in 1..=size {
                records.push(LayerRecord {
                    name: dense_layer_name(block, j),
                    kind: LayerKind::Bottleneck,
                    in_channels: width,
                    out_channels: width + k,
                    trainable: true,
                    spatial: side,
                });
                width += k;
            }
            if block < cfg.block_sizes.len() {
                if side % 2 != 0 || side < 2 {
                    return Err(underflow(&format!("transition_{block}"), side));
                }
                side /= 2;
                let out = cfg.compress(width);
                records.push(LayerRecord {
                    name: format!("transition_{block}"),
                    kind: LayerKind::Transition,
                    in_channels: width,
                    out_channels: out,
                    trainable: true,
                    spatial: side,
                });
                width = out;
            }
        }
        records.push(LayerRecord {
            name: "pool5".into(),
            kind: LayerKind::GlobalPool,
            in_channels: width,
            out_channels: width,
            trainable: true,
            spatial: 1,
        });
        records.push(LayerRecord {
            name: "fc".into(),
            kind: LayerKind::Classifier,
            in_channels: width,
            out_channels: cfg.num_classes,
            trainable: true,
            spatial: 1,
        });
        if let Some((b, j)) = cfg.freeze_boundary {
            let first = dense_layer_name(b, j);
            let pos = records.iter().position(|r| r.name == first).expect("validated boundary");
            for r in &mut records[..pos] {
                r.trainable = false;
            }
        }
        Ok(LayerPlan { records })
    }

    pub fn records(&self) -> &[LayerRecord] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn conv_layer_count(&self) -> usize {
        self.records.iter().map(|r| r.kind.conv_count()).sum()
    }

    /// Dimension of the pool5 features entering the classifier.
    pub fn feature_dim(&self) -> usize {
        self.records.last().map(|r| r.in_channels).unwrap_or(0)
    }

    /// Plain-text table: name, kind, in_ch, out_ch, trainable.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:<12} {:>6} {:>6} {:>9}\n", "name", "kind", "in_ch", "out_ch", "trainable");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:<16} {:<12} {:>6} {:>6} {:>9}",
                r.name,
                r.kind.as_str(),
                r.in_channels,
                r.out_channels,
                r.trainable
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
enum LayerParams {
    Stem { conv: ParamId, bn: BnIds },
    Bottleneck { bn1: BnIds, conv1: ParamId, bn2: BnIds, conv2: ParamId },
    Transition { bn: BnIds, conv: ParamId },
    Pool { bn: BnIds },
    Classifier { weight: ParamId, bias: ParamId },
}

/// A built network: configuration, layer plan and parameters.
#[derive(Clone, Debug)]
pub struct DenseNet {
    config: ArchConfig,
    plan: LayerPlan,
    params: ParamStore,
    layers: Vec<LayerParams>,
}

fn conv_weight(store: &mut ParamStore, name: String, out: usize, inp: usize, kernel: usize, trainable: bool) -> ParamId {
    let fan_in = inp * kernel * kernel;
    store.insert(name, Tensor::zeros(&[out, inp, kernel, kernel]), ParamKind::Weight, trainable, fan_in)
}

impl DenseNet {
    /// Builds the plan and He-initializes every parameter from `seed`.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let plan = LayerPlan::from_config(&config)?;
        let k = config.growth_rate;
        let inner = BOTTLENECK_FACTOR * k;
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(plan.records.len());
        for r in &plan.records {
            let (n, t) = (&r.name, r.trainable);
            let lp = match r.kind {
                LayerKind::Stem => LayerParams::Stem {
                    conv: conv_weight(&mut store, format!("{n}.weight"), r.out_channels, 3, STEM_KERNEL, t),
                    bn: store.insert_bn(&format!("{n}.bn"), r.out_channels, t),
                },
                LayerKind::Bottleneck => LayerParams::Bottleneck {
                    bn1: store.insert_bn(&format!("{n}.bn1"), r.in_channels, t),
                    conv1: conv_weight(&mut store, format!("{n}.conv1.weight"), inner, r.in_channels, 1, t),
                    bn2: store.insert_bn(&format!("{n}.bn2"), inner, t),
                    conv2: conv_weight(&mut store, format!("{n}.conv2.weight"), k, inner, 3, t),
                },
                LayerKind::Transition => LayerParams::Transition {
                    bn: store.insert_bn(&format!("{n}.bn"), r.in_channels, t),
                    conv: conv_weight(&mut store, format!("{n}.conv.weight"), r.out_channels, r.in_channels, 1, t),
                },
                LayerKind::GlobalPool => LayerParams::Pool {
                    bn: store.insert_bn(&format!("{n}.bn"), r.in_channels, t),
                },
                LayerKind::Classifier => LayerParams::Classifier {
                    weight: store.insert(
                        format!("{n}.weight"),
                        Tensor::zeros(&[r.out_channels, r.in_channels]),
                        ParamKind::Weight,
                        t,
                        r.in_channels,
                    ),
                    bias: store.insert(format!("{n}.bias"), Tensor::zeros(&[r.out_channels]), ParamKind::Bias, t, 0),
                },
            };
            layers.push(lp);
        }
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.initialize(id, seed);
        }
        Ok(DenseNet {
            config,
            plan,
            params: store,
            layers,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    /// Forward pass that also returns the output of every plan layer.
    pub fn forward_traced(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<(ModelOutput, Vec<(String, Var)>)> {
        let s = self.config.input_size;
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::InvalidShape(format!(
                "DenseNet expects N×3×{s}×{s} input, got {shape:?}"
            )));
        }
        let b = self.params.register(tape);
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let mut features = None;
        let mut logits = None;
        for i in 0..self.layers.len() {
            let layer_mode = if self.plan.records[i].trainable { mode } else { Mode::Inference };
            let lp = self.layers[i].clone();
            h = match lp {
                LayerParams::Stem { conv, bn } => {
                    let y = nn::conv2d(tape, h, b.var(conv), STEM_CONV)?;
                    let y = self.bn_relu(tape, y, bn, &b, layer_mode)?;
                    nn::max_pool(tape, y, 3, 2, 1)?
                }
                LayerParams::Bottleneck { bn1, conv1, bn2, conv2 } => {
                    let y = self.bn_relu(tape, h, bn1, &b, layer_mode)?;
                    let y = nn::conv2d(tape, y, b.var(conv1), POINTWISE)?;
                    let y = self.bn_relu(tape, y, bn2, &b, layer_mode)?;
                    let y = nn::conv2d(tape, y, b.var(conv2), SPATIAL)?;
                    nn::concat_channels(tape, &[h, y])?
                }
                LayerParams::Transition { bn, conv } => {
                    let y = self.bn_relu(tape, h, bn, &b, layer_mode)?;
                    let y = nn::conv2d(tape, y, b.var(conv), POINTWISE)?;
                    nn::avg_pool(tape, y)?
                }
                LayerParams::Pool { bn } => {
                    let y = self.bn_relu(tape, h, bn, &b, layer_mode)?;
                    let f = nn::global_avg_pool(tape, y)?;
                    features = Some(f);
                    f
                }
                LayerParams::Classifier { weight, bias } => {
                    let y = nn::linear(tape, h, b.var(weight), b.var(bias))?;
                    logits = Some(y);
                    y
                }
            };
            trace.push((self.plan.records[i].name.clone(), h));
        }
        let (Some(logits), Some(features)) = (logits, features) else {
            unreachable!("every plan ends with pool5 and fc");
        };
        Ok((
            ModelOutput {
                logits,
                features,
                bindings: b,
            },
            trace,
        ))
    }

    fn bn_relu(&mut self, tape: &mut Tape, x: Var, ids: BnIds, b: &Bindings, mode: Mode) -> Result<Var> {
        let y = match mode {
            Mode::Training => {
                let (y, stats) = nn::batch_norm_train(tape, x, b.var(ids.gamma), b.var(ids.beta), BN_EPSILON)?;
                let mut mean = self.params.get(ids.mean).tensor.clone();
                let mut var = self.params.get(ids.var).tensor.clone();
                stats.update_running(&mut mean, &mut var, BN_MOMENTUM);
                self.params.get_mut(ids.mean).tensor = mean;
                self.params.get_mut(ids.var).tensor = var;
                y
            }
            Mode::Inference => nn::batch_norm_eval(
                tape,
                x,
                b.var(ids.gamma),
                b.var(ids.beta),
                &self.params.get(ids.mean).tensor,
                &self.params.get(ids.var).tensor,
                BN_EPSILON,
            )?,
        };
        tape.relu(y)
    }

    /// Re-draws every parameter of the trainable layers (running statistics
    /// reset); frozen parameters are left untouched.
    pub fn reinitialize_trainable(&mut self, seed: u64) -> Result<()> {
        if self.config.freeze_boundary.is_none() {
            return Err(Error::Config("reinitialize_trainable needs a freeze boundary".into()));
        }
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .filter(|(_, _, p)| p.trainable)
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            self.params.initialize(id, seed);
        }
        Ok(())
    }

    /// All parameters and running statistics as a checkpoint.
    pub fn export_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(0, 0);
        for (name, t) in self.params.to_named() {
            ckpt.insert(name, t);
        }
        ckpt
    }
}

impl Model for DenseNet {
    fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ModelOutput> {
        Ok(self.forward_traced(tape, input, mode)?.0)
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn feature_dim(&self) -> usize {
        self.plan.feature_dim()
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_shape(&self) -> Vec<usize> {
        let s = self.config.input_size;
        vec![3, s, s]
    }
}

/// Outcome of [`import_weights`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportReport {
    /// Model tensors that were overwritten.
    pub matched: Vec<String>,
    /// Checkpoint tensors with no model counterpart.
    pub skipped: Vec<String>,
    /// Model tensors that kept their current values.
    pub untouched: Vec<String>,
}

/// Copies checkpoint tensors into the model. `name_map` renames checkpoint
/// entries to model names; unmapped entries are looked up under their own
/// name. A shape mismatch on any matched name aborts the import before
/// anything is written.
pub fn import_weights<M: Model>(
    model: &mut M,
    checkpoint: &Checkpoint,
    name_map: &HashMap<String, String>,
) -> Result<ImportReport> {
    let mut report = ImportReport::default();
    let mut writes = Vec::new();
    let mut mismatched = Vec::new();
    for (ckpt_name, tensor) in checkpoint.tensors() {
        let target = name_map.get(ckpt_name).map(String::as_str).unwrap_or(ckpt_name);
        match model.params().by_name(target) {
            Some(p) if p.tensor.shape() == tensor.shape() => writes.push((target.to_owned(), tensor.clone())),
            Some(p) => mismatched.push(format!("{ckpt_name} -> {target}: {:?} vs {:?}", tensor.shape(), p.tensor.shape())),
            None => report.skipped.push(ckpt_name.clone()),
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::ImportShapeMismatch(mismatched));
    }
    for (name, tensor) in writes {
        model.params_mut().set(&name, tensor)?;
        report.matched.push(name);
    }
    report.untouched = model
        .params()
        .iter()
        .map(|(_, n, _)| n.to_owned())
        .filter(|n| !report.matched.contains(n))
        .collect();
    Ok(report)
}

/// Reads `checkpoint_name,model_name` lines; `#` starts a comment.
pub fn parse_name_map(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (from, to) = line.split_once(',').ok_or_else(|| Error::Manifest {
            line: i + 1,
            message: format!("expected `checkpoint_name,model_name`, got `{line}`"),
        })?;
        map.insert(from.trim().to_owned(), to.trim().to_owned());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_tensor;

    fn tiny() -> ArchConfig {
        ArchConfig {
            block_sizes: vec![2, 2, 2],
            growth_rate: 4,
            stem_channels: 8,
            input_size: 32,
            freeze_boundary: Some((3, 1)),
            ..Default::default()
        }
    }

    #[test]
    fn default_plan_names_and_boundary() {
        let plan = LayerPlan::from_config(&ArchConfig::default()).unwrap();
        assert_eq!(plan.records()[0].name, "conv1");
        assert!(plan.get("concat_2_6").is_some());
        assert!(plan.get("concat_3_12").is_some());
        assert!(plan.get("concat_4_11").is_some());
        assert!(plan.get("concat_4_12").is_none());
        assert!(plan.get("transition_3").is_none());
        assert!(!plan.get("concat_4_5").unwrap().trainable);
        assert!(plan.get("concat_4_6").unwrap().trainable);
        assert!(plan.get("fc").unwrap().trainable);
        assert_eq!(plan.records().last().unwrap().name, "fc");
    }

    #[test]
    fn spatial_trace_at_224() {
        let plan = LayerPlan::from_config(&ArchConfig::default()).unwrap();
        assert_eq!(plan.get("conv1").unwrap().spatial, 56);
        assert_eq!(plan.get("concat_2_6").unwrap().spatial, 56);
        assert_eq!(plan.get("transition_1").unwrap().spatial, 28);
        assert_eq!(plan.get("transition_2").unwrap().spatial, 14);
        assert_eq!(plan.get("concat_4_11").unwrap().spatial, 14);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ArchConfig {
            freeze_boundary: Some((3, 12)),
            ..ArchConfig::default()
        };
        assert!(c.validate().is_err());
        c.freeze_boundary = None;
        c.block_sizes = vec![];
        assert!(c.validate().is_err());
        let small = ArchConfig {
            input_size: 8,
            ..Default::default()
        };
        assert!(LayerPlan::from_config(&small).is_err());
    }

    #[test]
    fn table_lists_every_layer() {
        let plan = LayerPlan::from_config(&tiny()).unwrap();
        let table = plan.to_table();
        assert_eq!(table.lines().count(), plan.records().len() + 1);
        assert!(table.starts_with("name"));
        assert!(table.contains("transition_2"));
    }

    #[test]
    fn frozen_tensors_survive_reinitialization() {
        let mut net = DenseNet::new(tiny(), 1).unwrap();
        let before = net.params().clone();
        net.reinitialize_trainable(99).unwrap();
        let mut changed = 0;
        for (id, name, p) in net.params().iter() {
            let old = &before.get(id).tensor;
            if p.trainable {
                if p.kind == ParamKind::Weight && !p.tensor.bit_eq(old) {
                    changed += 1;
                }
            } else {
                assert!(p.tensor.bit_eq(old), "{name} changed");
            }
        }
        assert!(changed > 0);
        let mut other = DenseNet::new(tiny(), 1).unwrap();
        other.reinitialize_trainable(100).unwrap();
        let w = "concat_4_1.conv2.weight";
        assert!(!other.params().by_name(w).unwrap().tensor.bit_eq(&net.params().by_name(w).unwrap().tensor));

        let mut free = DenseNet::new(ArchConfig { freeze_boundary: None, ..tiny() }, 1).unwrap();
        assert!(free.reinitialize_trainable(3).is_err());
    }

    #[test]
    fn import_round_trip_and_partial() {
        let mut src = DenseNet::new(tiny(), 5).unwrap();
        let mut dst = DenseNet::new(tiny(), 6).unwrap();
        let ckpt = src.export_checkpoint();
        let report = import_weights(&mut dst, &ckpt, &HashMap::new()).unwrap();
        assert_eq!(report.matched.len(), dst.params().len());
        assert!(report.skipped.is_empty() && report.untouched.is_empty());
        let x = random_tensor(&[2, 3, 32, 32], -1.0, 1.0, 1);
        let run = |net: &mut DenseNet| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = net.forward(&mut tape, xv, Mode::Inference).unwrap();
            tape.value(out.logits).clone()
        };
        assert!(run(&mut src).bit_eq(&run(&mut dst)));

        let before = dst.params().clone();
        let empty = Checkpoint::new(0, 0);
        let report = import_weights(&mut dst, &empty, &HashMap::new()).unwrap();
        assert!(report.matched.is_empty());
        for (id, _, p) in dst.params().iter() {
            assert!(p.tensor.bit_eq(&before.get(id).tensor));
        }

        let mut renamed = Checkpoint::new(0, 0);
        renamed.insert("stem_w".into(), src.params().by_name("conv1.weight").unwrap().tensor.clone());
        renamed.insert("unrelated".into(), Tensor::ones(&[2]));
        let map = parse_name_map("stem_w, conv1.weight # renamed\n").unwrap();
        let report = import_weights(&mut dst, &renamed, &map).unwrap();
        assert_eq!(report.matched, vec!["conv1.weight".to_string()]);
        assert_eq!(report.skipped, vec!["unrelated".to_string()]);

        let mut bad = Checkpoint::new(0, 0);
        bad.insert("fc.bias".into(), Tensor::ones(&[3]));
        assert!(matches!(
            import_weights(&mut dst, &bad, &HashMap::new()),
            Err(Error::ImportShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut net = DenseNet::new(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 30, 30]));
        assert!(net.forward(&mut tape, x, Mode::Inference).is_err());
    }
}
