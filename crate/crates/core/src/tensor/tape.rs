use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::{gemm, row_major, transposed};
use super::{broadcast_index_map, broadcast_shape, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Gradient rule attached to a recorded operation.
pub(crate) trait BackwardRule {
    /// Gradients with respect to each input. Entries for inputs whose
    /// `needs[i]` is false may be `None`.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>>;
}

pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
    pub grad: &'a [Real],
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn BackwardRule>>,
    requires_grad: bool,
    op: &'static str,
}

/// Records operations in execution order and replays them backwards.
///
/// Nodes are appended in topological order by construction; `backward`
/// visits each node once, from the loss towards the leaves.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the NaN/Inf check after every recorded operation on or off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. It receives a gradient if
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(Node {
            value: tensor,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
            op: "leaf",
        })
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad())
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `v` was produced by another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        let i = self.check(v).ok()?;
        self.nodes[i].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(std::mem::replace(&mut self.nodes[i].value, Tensor::scalar(0.0)))
    }

    /// Appends an operation output. The rule is kept only when some input
    /// requires a gradient.
    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Node {
            value,
            inputs: idx,
            rule: requires_grad.then_some(rule),
            requires_grad,
            op,
        }))
    }

    /// Populates the gradient of every grad-requiring leaf with
    /// d`loss`/d`leaf`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        let loss_value = &self.nodes[li].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(rule) = &node.rule else {
                // leaf: park the gradient until the sweep is done
                grads[i] = Some(g);
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                needs: node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect(),
                grad: &g,
            };
            let input_grads = rule.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if node.rule.is_none() && node.requires_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: kind.name(),
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let ma = broadcast_index_map(ta.shape(), &shape);
        let mb = broadcast_index_map(tb.shape(), &shape);
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<Real> = ma
            .iter()
            .zip(&mb)
            .map(|(&i, &j)| kind.apply(da[i], db[j]))
            .collect();
        let out = Tensor::from_parts(shape, data);
        self.record(kind.name(), out, &[a, b], Box::new(ElementwiseRule { kind, ma, mb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.record("scale", out, &[a], Box::new(ScaleRule(factor)))
    }

    /// Sum of all elements as a scalar (accumulated in 64-bit).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.record("sum", Tensor::scalar(s as Real), &[a], Box::new(SumRule))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as Real;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.record("relu", out, &[a], Box::new(ReluRule))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.record("reshape", out, &[a], Box::new(ReshapeRule))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (l, r) => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: l.to_vec(),
                    rhs: r.to_vec(),
                })
            }
        };
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), row_major(k), tb.data(), row_major(n), 0.0, &mut c, row_major(n));
        let out = Tensor::from_parts(vec![m, n], c);
        self.record("matmul", out, &[a, b], Box::new(MatMulRule { m, k, n }))
    }
}

#[derive(Clone, Copy, Debug)]
enum Elementwise {
    Add,
    Sub,
    Mul,
}

impl Elementwise {
    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "subtract",
            Elementwise::Mul => "multiply",
        }
    }

    fn apply(self, a: Real, b: Real) -> Real {
        match self {
            Elementwise::Add => a + b,
            Elementwise::Sub => a - b,
            Elementwise::Mul => a * b,
        }
    }
}

struct ElementwiseRule {
    kind: Elementwise,
    ma: Vec<usize>,
    mb: Vec<usize>,
}

impl BackwardRule for ElementwiseRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
        for (o, &g) in ctx.grad.iter().enumerate() {
            let (i, j) = (self.ma[o], self.mb[o]);
            let (da, db) = match self.kind {
                Elementwise::Add => (g, g),
                Elementwise::Sub => (g, -g),
                Elementwise::Mul => (g * b.data()[j], g * a.data()[i]),
            };
            if let Some(ga) = &mut ga {
                ga[i] += da;
            }
            if let Some(gb) = &mut gb {
                gb[j] += db;
            }
        }
        vec![ga, gb]
    }
}

struct ScaleRule(Real);

impl BackwardRule for ScaleRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        vec![Some(ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

struct SumRule;

impl BackwardRule for SumRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]
    }
}

struct ReluRule;

impl BackwardRule for ReluRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let g = ctx
            .inputs[0]
            .data()
            .iter()
            .zip(ctx.grad)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(g)]
    }
}

struct ReshapeRule;

impl BackwardRule for ReshapeRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatMulRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let MatMulRule { m, k, n } = *self;
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        // dA = dC·Bᵀ
        let ga = ctx.needs[0].then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, ctx.grad, row_major(n), b, transposed(n), 0.0, &mut ga, row_major(k));
            ga
        });
        // dB = Aᵀ·dC
        let gb = ctx.needs[1].then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, a, transposed(k), ctx.grad, row_major(n), 0.0, &mut gb, row_major(n));
            gb
        });
        vec![ga, gb]
    }
}
