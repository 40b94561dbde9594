//! Learning objective: softmax cross-entropy, center loss and their
//! λ-weighted sum, plus the mini-batch update of the class centers.

use crate::error::{Error, Result};
use crate::tensor::tape::{BackwardCtx, BackwardRule};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: Real = 0.8;
pub const DEFAULT_CENTER_ALPHA: Real = 0.5;

/// How the per-sample center terms are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterReduction {
    /// `½ Σᵢ ‖xᵢ − c_yᵢ‖²`
    #[default]
    Sum,
    /// The sum divided by the batch size.
    Mean,
}

impl std::str::FromStr for CenterReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CenterReduction::Sum),
            "mean" => Ok(CenterReduction::Mean),
            other => Err(Error::Config(format!("unknown center-loss reduction `{other}`"))),
        }
    }
}

impl std::fmt::Display for CenterReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CenterReduction::Sum => "sum",
            CenterReduction::Mean => "mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the center term.
    pub lambda: Real,
    pub reduction: CenterReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            reduction: CenterReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-class feature centers, `C × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterBank {
    centers: Tensor,
    alpha: Real,
}

impl CenterBank {
    /// Zero-initialized centers.
    pub fn new(classes: usize, dim: usize, alpha: Real) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Config("center bank needs at least one class and one dimension".into()));
        }
        Self::from_centers(Tensor::zeros(&[classes, dim]), alpha)
    }

    pub fn from_centers(centers: Tensor, alpha: Real) -> Result<Self> {
        if centers.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "centers must be C×d, got {:?}",
                centers.shape()
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("center update rate must be in (0, 1], got {alpha}")));
        }
        if !centers.is_finite() {
            return Err(Error::NonFinite("center bank"));
        }
        Ok(CenterBank { centers, alpha })
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn alpha(&self) -> Real {
        self.alpha
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn center(&self, class: usize) -> &[Real] {
        let d = self.dim();
        &self.centers.data()[class * d..(class + 1) * d]
    }

    /// Checkpoint names of the centers, `center_0` … `center_{C-1}`.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        (0..self.classes())
            .map(|j| (format!("center_{j}"), Tensor::from_vec(self.center(j).to_vec())))
            .collect()
    }

    /// Rebuilds a bank from its checkpoint rows.
    pub fn from_rows(rows: &[Tensor], alpha: Real) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Format("center rows are missing or ragged".into()));
        }
        let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
        Self::from_centers(Tensor::new(&[rows.len(), dim], data)?, alpha)
    }

    /// One mini-batch update:
    /// `Δc_j = Σ_{yᵢ=j}(c_j − xᵢ) / (1 + n_j)`, `c_j ← c_j − α·Δc_j`.
    /// Classes absent from the batch keep their center.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        let (m, d) = check_features(features, labels, self)?;
        let (classes, alpha) = (self.classes(), self.alpha);
        let mut delta = vec![0.0f64; classes * d];
        let mut counts = vec![0usize; classes];
        let c = self.centers.data();
        for i in 0..m {
            let j = labels[i];
            counts[j] += 1;
            let x = &features.data()[i * d..(i + 1) * d];
            for k in 0..d {
                delta[j * d + k] += (c[j * d + k] - x[k]) as f64;
            }
        }
        let c = self.centers.data_mut();
        for j in 0..classes {
            if counts[j] == 0 {
                continue;
            }
            let denom = 1.0 + counts[j] as f64;
            for k in 0..d {
                c[j * d + k] -= alpha * (delta[j * d + k] / denom) as Real;
            }
        }
        Ok(())
    }
}

fn check_features(features: &Tensor, labels: &[usize], bank: &CenterBank) -> Result<(usize, usize)> {
    let (m, d) = match features.shape() {
        &[m, d] => (m, d),
        other => return Err(Error::InvalidShape(format!("features must be m×d, got {other:?}"))),
    };
    if d != bank.dim() {
        return Err(Error::ShapeMismatch {
            op: "center_loss",
            lhs: features.shape().to_vec(),
            rhs: bank.centers.shape().to_vec(),
        });
    }
    if labels.len() != m {
        return Err(Error::InvalidShape(format!("{} labels for {m} feature rows", labels.len())));
    }
    check_labels(labels, bank.classes())?;
    Ok((m, d))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[Real], classes: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / z) as Real));
    }
    out
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lt = tape.value(logits);
    let (m, c) = match lt.shape() {
        &[m, c] => (m, c),
        other => return Err(Error::InvalidShape(format!("logits must be m×C, got {other:?}"))),
    };
    if labels.len() != m {
        return Err(Error::InvalidShape(format!("{} labels for {m} logit rows", labels.len())));
    }
    check_labels(labels, c)?;
    let mut total = 0.0f64;
    for (row, &y) in lt.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    let probs = softmax_rows(lt.data(), c);
    let loss = Tensor::scalar((total / m as f64) as Real);
    let rule = SoftmaxXentRule {
        probs,
        labels: labels.to_vec(),
        classes: c,
    };
    tape.record("softmax_cross_entropy", loss, &[logits], Box::new(rule))
}

struct SoftmaxXentRule {
    probs: Vec<Real>,
    labels: Vec<usize>,
    classes: usize,
}

impl BackwardRule for SoftmaxXentRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let m = self.labels.len();
        let scale = ctx.grad[0] / m as Real;
        let mut g: Vec<Real> = self.probs.iter().map(|p| p * scale).collect();
        for (i, &y) in self.labels.iter().enumerate() {
            g[i * self.classes + y] -= scale;
        }
        vec![Some(g)]
    }
}

/// `½ Σᵢ ‖xᵢ − c_yᵢ‖²` (divided by the batch size under
/// [`CenterReduction::Mean`]). Centers are treated as constants; the
/// gradient with respect to `xᵢ` is `xᵢ − c_yᵢ`.
pub fn center_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    bank: &CenterBank,
    reduction: CenterReduction,
) -> Result<Var> {
    let ft = tape.value(features);
    let (m, d) = check_features(ft, labels, bank)?;
    let mut diff = Vec::with_capacity(m * d);
    for (i, &y) in labels.iter().enumerate() {
        let x = &ft.data()[i * d..(i + 1) * d];
        diff.extend(x.iter().zip(bank.center(y)).map(|(a, b)| a - b));
    }
    let sq: f64 = diff.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let scale = match reduction {
        CenterReduction::Sum => 1.0,
        CenterReduction::Mean => 1.0 / m.max(1) as Real,
    };
    let loss = Tensor::scalar((0.5 * sq * scale as f64) as Real);
    tape.record("center_loss", loss, &[features], Box::new(CenterLossRule { diff, scale }))
}

struct CenterLossRule {
    diff: Vec<Real>,
    scale: Real,
}

impl BackwardRule for CenterLossRule {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> {
        let s = ctx.grad[0] * self.scale;
        vec![Some(self.diff.iter().map(|d| d * s).collect())]
    }
}

/// `L = L_s + λ·L_c`.
pub fn joint_loss(tape: &mut Tape, ls: Var, lc: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = tape.scale(lc, cfg.lambda)?;
    tape.add(ls, weighted)
}

/// Scalar form of [`joint_loss`].
pub fn joint_value(ls: Real, lc: Real, lambda: Real) -> Real {
    ls + lambda * lc
}
