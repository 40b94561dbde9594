//! Named parameter storage and the interface the trainer drives.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{self, Mode};
use crate::rng::derive_seed;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not optimizer parameters.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
    /// Fan-in used by He initialization (weights only).
    pub fan_in: usize,
}

/// Parameters in registration order, addressable by name or index.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handles of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor, kind: ParamKind, trainable: bool, fan_in: usize) -> ParamId {
        let param = Param {
            tensor,
            kind,
            trainable,
            fan_in,
        };
        let (idx, prev) = self.params.insert_full(name, param);
        debug_assert!(prev.is_none(), "duplicate parameter name");
        ParamId(idx)
    }

    /// Adds gamma, beta and running statistics for `channels` channels.
    pub fn insert_bn(&mut self, prefix: &str, channels: usize, trainable: bool) -> BnIds {
        BnIds {
            gamma: self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::BnScale, trainable, 0),
            beta: self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::BnShift, trainable, 0),
            mean: self.insert(
                format!("{prefix}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::RunningMean,
                trainable,
                0,
            ),
            var: self.insert(
                format!("{prefix}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::RunningVar,
                trainable,
                0,
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params.iter().enumerate().map(|(i, (k, p))| (ParamId(i), k.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, (k, p))| (ParamId(i), k.as_str(), p))
    }

    /// Parameters the optimizer updates.
    pub fn is_optimized(&self, id: ParamId) -> bool {
        let p = self.get(id);
        p.trainable && !p.kind.is_buffer()
    }

    /// Number of scalar values in optimizer-updated parameters.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(id, _, _)| self.is_optimized(*id))
            .map(|(_, _, p)| p.tensor.len())
            .sum()
    }

    /// Records every non-buffer parameter on `tape`; trainable ones
    /// receive gradients.
    pub fn register(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .values()
            .map(|p| {
                if p.kind.is_buffer() {
                    None
                } else if p.trainable {
                    Some(tape.param(p.tensor.clone()))
                } else {
                    Some(tape.constant(p.tensor.clone()))
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Draws fresh values for one parameter from its kind's initializer.
    pub fn initialize(&mut self, id: ParamId, seed: u64) {
        let name = self.name(id).to_owned();
        let p = self.get_mut(id);
        let shape = p.tensor.shape().to_vec();
        p.tensor = match p.kind {
            ParamKind::Weight => nn::he_init(&shape, p.fan_in, derive_seed(seed, &[b"init", name.as_bytes()])),
            ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => Tensor::zeros(&shape),
            ParamKind::BnScale | ParamKind::RunningVar => Tensor::ones(&shape),
        };
    }

    /// All tensors keyed by name, in registration order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, p)| (k.clone(), p.tensor.clone())).collect()
    }

    /// Replaces a tensor, checking its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }
}

/// Tape variables of the registered parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not registered on the tape")
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}

/// Result of a forward pass.
pub struct ModelOutput {
    /// `N × C` class scores.
    pub logits: Var,
    /// `N × d` deep features fed to the center loss.
    pub features: Var,
    pub bindings: Bindings,
}

/// A feature extractor with a linear classifier head.
pub trait Model {
    fn forward(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ModelOutput>;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn feature_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Shape of one input sample.
    fn input_shape(&self) -> Vec<usize>;
}

/// Two fully connected layers (`in → hidden → features`, ReLU between)
/// followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct MlpClassifier {
    params: ParamStore,
    dims: [usize; 4],
    ids: [ParamId; 6],
}

impl MlpClassifier {
    pub fn new(input: usize, hidden: usize, features: usize, classes: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut ids = Vec::new();
        for (name, out, inp) in [("fc1", hidden, input), ("fc2", features, hidden), ("fc", classes, features)] {
            ids.push(params.insert(format!("{name}.weight"), Tensor::zeros(&[out, inp]), ParamKind::Weight, true, inp));
            ids.push(params.insert(format!("{name}.bias"), Tensor::zeros(&[out]), ParamKind::Bias, true, 0));
        }
        let all: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
        for id in all {
            params.initialize(id, seed);
        }
        MlpClassifier {
            params,
            dims: [input, hidden, features, classes],
            ids: ids.try_into().expect("six parameters"),
        }
    }
}

impl Model for MlpClassifier {
    fn forward(&mut self, tape: &mut Tape, input: Var, _mode: Mode) -> Result<ModelOutput> {
        let b = self.params.register(tape);
        let v = |i: usize| b.var(self.ids[i]);
        let h = nn::linear(tape, input, v(0), v(1))?;
        let h = tape.relu(h)?;
        let features = nn::linear(tape, h, v(2), v(3))?;
        let logits = nn::linear(tape, features, v(4), v(5))?;
        Ok(ModelOutput {
            logits,
            features,
            bindings: b,
        })
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn feature_dim(&self) -> usize {
        self.dims[2]
    }

    fn num_classes(&self) -> usize {
        self.dims[3]
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.dims[0]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_skips_buffers_and_freezes() {
        let mut store = ParamStore::new();
        let w = store.insert("w".into(), Tensor::ones(&[2]), ParamKind::Weight, true, 2);
        let bn = store.insert_bn("bn", 2, false);
        let mut tape = Tape::new();
        let b = store.register(&mut tape);
        assert!(tape.requires_grad(b.var(w)));
        assert!(!tape.requires_grad(b.var(bn.gamma)));
        assert!(b.get(bn.mean).is_none());
        assert_eq!(store.trainable_count(), 2);
        assert_eq!(store.name(bn.var), "bn.running_var");
    }

    #[test]
    fn mlp_shapes() {
        let mut m = MlpClassifier::new(2, 16, 2, 7, 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[5, 2]));
        let out = m.forward(&mut tape, x, Mode::Training).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[5, 7]);
        assert_eq!(tape.value(out.features).shape(), &[5, 2]);
    }
}
