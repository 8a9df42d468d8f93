//! Datasets and the weight container.

pub mod cifar;
pub mod container;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

pub use cifar::{load_cifar10, load_cifar_file, CIFAR10_MEAN, CIFAR10_STD};
pub use container::{ContainerError, Entry, EntryData, WeightContainer};
pub use synthetic::gen_synthetic;

/// Labelled images, `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: DenseTensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Human-readable provenance (generator seed, normalization constants).
    pub metadata: String,
}

impl Dataset {
    pub fn new(images: DenseTensor<f32>, labels: Vec<usize>, num_classes: usize, metadata: String) -> Result<Self> {
        if images.ndim() != 4 || images.dims()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images of dims {:?}",
                labels.len(),
                images.dims()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    /// Gathers the given samples into a batch, optionally mirrored left-right.
    pub fn batch<T: Real>(&self, indices: &[usize], flip: Option<&[bool]>) -> (DenseTensor<T>, Vec<usize>) {
        let [c, h, w] = self.image_dims();
        let per = c * h * w;
        let src = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * per);
        for (k, &i) in indices.iter().enumerate() {
            let img = &src[i * per..(i + 1) * per];
            let mirror = flip.is_some_and(|f| f[k]);
            for row in img.chunks_exact(w) {
                if mirror {
                    out.extend(row.iter().rev().map(|&v| T::from_f64_lossy(v as f64)));
                } else {
                    out.extend(row.iter().map(|&v| T::from_f64_lossy(v as f64)));
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            DenseTensor::new(vec![indices.len(), c, h, w], out).expect("batch dims"),
            labels,
        )
    }
}
