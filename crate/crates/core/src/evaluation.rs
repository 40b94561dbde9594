//! Confusion matrices and the accuracy figures derived from them.

use std::fmt::Write as _;
use std::io::Write;

use crate::datapipe::CLASS_NAMES;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::softmax_rows;
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::{Real, Tape, Tensor};

/// `C × C` counts, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidShape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|j| self.get(j, j)).sum()
    }

    /// Element-wise sum of two matrices of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "merge confusion matrices",
                lhs: vec![self.classes; 2],
                rhs: vec![other.classes; 2],
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// `recall_j = cm[j][j] / row_j`; `None` for classes without samples.
pub fn per_class_recall(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|j| match cm.row_sum(j) {
            0 => None,
            n => Some(cm.get(j, j) as f64 / n as f64),
        })
        .collect()
}

/// `precision_j = cm[j][j] / column_j`; `None` for never-predicted classes.
pub fn per_class_precision(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|j| match cm.col_sum(j) {
            0 => None,
            n => Some(cm.get(j, j) as f64 / n as f64),
        })
        .collect()
}

/// Mean recall over the classes that have samples, plus the classes that
/// were excluded for having none.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancedAccuracy {
    pub value: f64,
    pub excluded: Vec<usize>,
}

pub fn balanced_accuracy(cm: &ConfusionMatrix) -> BalancedAccuracy {
    let recalls = per_class_recall(cm);
    let excluded: Vec<usize> = (0..cm.classes()).filter(|&j| recalls[j].is_none()).collect();
    for &j in &excluded {
        log::warn!("class {j} has no samples and is excluded from balanced accuracy");
    }
    let present: Vec<f64> = recalls.into_iter().flatten().collect();
    let value = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    BalancedAccuracy { value, excluded }
}

/// `trace / total`, 0 for an empty matrix.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> f64 {
    match cm.total() {
        0 => 0.0,
        n => cm.trace() as f64 / n as f64,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub truth: usize,
    pub probabilities: Vec<Real>,
    pub predicted: usize,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub matrix: ConfusionMatrix,
    pub scores: Vec<ScoreRow>,
    /// Ids that failed to load, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Builds a matrix from precomputed predictions.
pub fn confusion_from_predictions(classes: usize, truths: &[usize], predictions: &[usize]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in truths.iter().zip(predictions) {
        cm.add(t, p);
    }
    cm
}

/// Scores every sample in inference mode. Samples that fail to load are
/// skipped and reported in [`EvalOutcome::failures`].
pub fn evaluate<M, D>(model: &mut M, data: &D, batch_size: usize) -> Result<EvalOutcome>
where
    M: Model + ?Sized,
    D: Dataset + ?Sized,
{
    if batch_size == 0 {
        return Err(Error::Config("evaluation batch size must be positive".into()));
    }
    let classes = model.num_classes();
    let mut out = EvalOutcome {
        matrix: ConfusionMatrix::new(classes),
        scores: Vec::with_capacity(data.len()),
        failures: Vec::new(),
    };
    let sample_len: usize = data.sample_shape().iter().product();
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let mut buf = Vec::with_capacity((end - start) * sample_len);
        let mut kept = Vec::with_capacity(end - start);
        for i in start..end {
            match data.load(i) {
                Ok(v) => {
                    buf.extend(v);
                    kept.push(i);
                }
                Err(e) => out.failures.push((data.id(i).to_owned(), e.to_string())),
            }
        }
        start = end;
        if kept.is_empty() {
            continue;
        }
        let mut shape = vec![kept.len()];
        shape.extend_from_slice(data.sample_shape());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&shape, buf)?);
        let logits = model.forward(&mut tape, x, Mode::Inference)?.logits;
        let probs = softmax_rows(tape.value(logits).data(), classes);
        for (row, &i) in probs.chunks_exact(classes).zip(&kept) {
            let predicted = argmax(row);
            let truth = data.label(i);
            out.matrix.add(truth, predicted);
            out.scores.push(ScoreRow {
                id: data.id(i).to_owned(),
                truth,
                probabilities: row.to_vec(),
                predicted,
            });
        }
    }
    if !out.failures.is_empty() {
        log::warn!("{} images could not be loaded and were excluded", out.failures.len());
    }
    Ok(out)
}

/// Writes `image,MEL,NV,…` probability rows.
pub fn write_score_table<W: Write>(rows: &[ScoreRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "image,{}", CLASS_NAMES.join(","))?;
    for r in rows {
        write!(w, "{}", r.id)?;
        for p in &r.probabilities {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into())
}

/// Machine-readable `key=value` lines.
pub fn metrics_report(cm: &ConfusionMatrix, failures: usize) -> String {
    let bal = balanced_accuracy(cm);
    let mut s = String::new();
    let _ = writeln!(s, "samples={}", cm.total());
    let _ = writeln!(s, "load_failures={failures}");
    let _ = writeln!(s, "balanced_accuracy={}", bal.value);
    let _ = writeln!(s, "overall_accuracy={}", overall_accuracy(cm));
    let excluded: Vec<&str> = bal.excluded.iter().map(|&j| class_name(j)).collect();
    let _ = writeln!(s, "excluded_classes={}", excluded.join(";"));
    let recall = per_class_recall(cm);
    let precision = per_class_precision(cm);
    for j in 0..cm.classes() {
        let _ = writeln!(s, "recall.{}={}", class_name(j), fmt_opt(recall[j]));
    }
    for j in 0..cm.classes() {
        let _ = writeln!(s, "precision.{}={}", class_name(j), fmt_opt(precision[j]));
    }
    for t in 0..cm.classes() {
        let row: Vec<String> = (0..cm.classes()).map(|p| cm.get(t, p).to_string()).collect();
        let _ = writeln!(s, "confusion.{}={}", class_name(t), row.join(";"));
    }
    s
}

fn class_name(j: usize) -> &'static str {
    CLASS_NAMES.get(j).copied().unwrap_or("?")
}

/// Deep features of every sample, computed in inference mode, `N × d`.
pub fn extract_features<M, D>(model: &mut M, data: &D, batch_size: usize) -> Result<Tensor>
where
    M: Model + ?Sized,
    D: Dataset + ?Sized,
{
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let d = model.feature_dim();
    let mut out = Vec::with_capacity(data.len() * d);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size) {
        let (x, _) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let f = model.forward(&mut tape, x, Mode::Inference)?.features;
        out.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(&[data.len(), d], out)
}

/// Mean over classes of the mean squared distance between a class's
/// feature rows and their centroid. Classes without samples are skipped.
pub fn intra_class_variance(features: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    let (n, d) = match features.shape() {
        &[n, d] if n == labels.len() => (n, d),
        s => {
            return Err(Error::InvalidShape(format!(
                "expected {} feature rows, got shape {s:?}",
                labels.len()
            )))
        }
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let x = features.data();
    let mut sums = vec![0.0f64; classes * d];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for k in 0..d {
            sums[l * d + k] += x[i * d + k] as f64;
        }
    }
    let mut scatter = vec![0.0f64; classes];
    for (i, &l) in labels.iter().enumerate().take(n) {
        for k in 0..d {
            let diff = x[i * d + k] as f64 - sums[l * d + k] / counts[l] as f64;
            scatter[l] += diff * diff;
        }
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&j| counts[j] > 0)
        .map(|j| scatter[j] / counts[j] as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intra_class_variance_hand_case() {
        // class 0: (0,0),(2,0) -> centroid (1,0), mean sq dist 1
        // class 1: (5,5) alone -> 0
        let f = Tensor::new(&[3, 2], vec![0.0, 0.0, 5.0, 5.0, 2.0, 0.0]).unwrap();
        let v = intra_class_variance(&f, &[0, 1, 0], 3).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!(intra_class_variance(&f, &[0, 1], 2).is_err());
        assert!(intra_class_variance(&f, &[0, 3, 0], 3).is_err());
    }
    use proptest::prelude::*;

    #[test]
    fn hand_case() {
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![4, 6]]).unwrap();
        let r = per_class_recall(&cm);
        assert!((r[0].unwrap() - 0.8).abs() < 1e-12 && (r[1].unwrap() - 0.6).abs() < 1e-12);
        assert!((balanced_accuracy(&cm).value - 0.7).abs() < 1e-12);
        assert!((overall_accuracy(&cm) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn diagonal_and_constant_predictors() {
        let truths: Vec<usize> = (0..7).flat_map(|j| std::iter::repeat_n(j, j + 1)).collect();
        let cm = confusion_from_predictions(7, &truths, &truths);
        assert_eq!(balanced_accuracy(&cm).value, 1.0);
        assert_eq!(overall_accuracy(&cm), 1.0);
        let nv = vec![1; truths.len()];
        let cm = confusion_from_predictions(7, &truths, &nv);
        assert!((balanced_accuracy(&cm).value - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn empty_rows_are_excluded() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 0]]).unwrap();
        let b = balanced_accuracy(&cm);
        assert_eq!(b.excluded, vec![1]);
        assert!((b.value - 0.75).abs() < 1e-12);
        let empty = ConfusionMatrix::new(7);
        assert_eq!(empty.total(), 0);
        assert_eq!(overall_accuracy(&empty), 0.0);
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0; 7]), 0);
    }

    #[test]
    fn report_keys() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        let r = metrics_report(&cm, 2);
        assert!(r.contains("balanced_accuracy=1\n"));
        assert!(r.contains("load_failures=2\n"));
        assert!(r.lines().all(|l| l.contains('=')));
    }

    fn matrix() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
        (2usize..6).prop_flat_map(|c| {
            (Just(c), prop::collection::vec((0..c, 0..c), 1..60))
                .prop_map(|(c, pairs)| (c, pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()))
        })
    }

    proptest! {
        #[test]
        fn relabeling_preserves_metrics((c, t, p) in matrix(), shift in 0usize..6) {
            let a = confusion_from_predictions(c, &t, &p);
            let perm = |v: &[usize]| v.iter().map(|x| (x + shift) % c).collect::<Vec<_>>();
            let b = confusion_from_predictions(c, &perm(&t), &perm(&p));
            prop_assert_eq!(a.total(), t.len() as u64);
            prop_assert!((balanced_accuracy(&a).value - balanced_accuracy(&b).value).abs() < 1e-12);
            prop_assert_eq!(overall_accuracy(&a), overall_accuracy(&b));
        }

        #[test]
        fn equal_support_makes_metrics_agree(c in 2usize..6, per in 1usize..8, preds in prop::collection::vec(0usize..6, 40)) {
            let truths: Vec<usize> = (0..c).flat_map(|j| std::iter::repeat_n(j, per)).collect();
            let p: Vec<usize> = truths.iter().enumerate().map(|(i, _)| preds[i % preds.len()] % c).collect();
            let cm = confusion_from_predictions(c, &truths, &p);
            prop_assert!((balanced_accuracy(&cm).value - overall_accuracy(&cm)).abs() < 1e-12);
        }
    }
}
