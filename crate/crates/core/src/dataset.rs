//! Labelled sample collections consumed by training and evaluation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Indexable labelled samples of a fixed shape.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    fn label(&self, index: usize) -> usize;

    /// Shape of one sample, without the batch axis.
    fn sample_shape(&self) -> &[usize];

    /// Loads sample `index` as a flat buffer of `sample_shape` elements.
    fn load(&self, index: usize) -> Result<Vec<Real>>;

    /// Stacks the given samples into a batch tensor and returns their labels.
    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_shape().iter().product::<usize>());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.load(i)?);
            labels.push(self.label(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(&shape, data)?, labels))
    }
}

/// Samples held in one contiguous tensor.
#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    ids: Vec<String>,
    labels: Vec<usize>,
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl InMemoryDataset {
    /// `samples` has shape `N × sample_shape`.
    pub fn new(ids: Vec<String>, labels: Vec<usize>, samples: Tensor) -> Result<Self> {
        let n = samples.shape().first().copied().unwrap_or(0);
        if ids.len() != n || labels.len() != n {
            return Err(Error::InvalidShape(format!(
                "{n} samples but {} ids and {} labels",
                ids.len(),
                labels.len()
            )));
        }
        Ok(InMemoryDataset {
            ids,
            labels,
            shape: samples.shape()[1..].to_vec(),
            data: samples.into_data(),
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// A dataset over a subset of the samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let stride: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.ids.len() {
                return Err(Error::InvalidShape(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        Ok(InMemoryDataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape.clone(),
            data,
        })
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn load(&self, index: usize) -> Result<Vec<Real>> {
        let stride: usize = self.shape.iter().product();
        Ok(self.data[index * stride..(index + 1) * stride].to_vec())
    }
}
