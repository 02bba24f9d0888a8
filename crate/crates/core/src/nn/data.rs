use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::spec::Shape3;
use crate::error::{input_err, shape_err, Result};
use crate::tensor::Tensor;

/// Labelled samples, each of shape `C×H×W`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Shape3,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: Shape3, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return shape_err(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                images.len(),
                labels.len()
            ));
        }
        Ok(Self {
            sample_shape,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> Shape3 {
        self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the given samples into an `N×C×H×W` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return input_err("empty batch");
        }
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return input_err(format!("sample {i} out of range"));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape;
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            sample_shape: self.sample_shape,
            images: self.images[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// A subset with the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            sample_shape: self.sample_shape,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive index chunks of at most `batch_size`, in a permutation
    /// drawn from `rng` (or in order when `rng` is `None`).
    pub fn batches(&self, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
