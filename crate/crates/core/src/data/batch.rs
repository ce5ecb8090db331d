use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{augment, load_image, Normalization};
use super::manifest::{DatasetManifest, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::loss::one_hot;
use crate::tensor::{Scalar, Tensor};

/// Indexed access to preprocessed `H×W×C` images and their labels.
pub trait SampleSource<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    fn image(&self, index: usize) -> Result<Tensor<T>>;
}

/// Decodes images from disk on every access.
pub struct ManifestSource<'a> {
    pub manifest: &'a DatasetManifest,
    pub image_size: usize,
    pub normalization: Normalization,
}

impl<T: Scalar> SampleSource<T> for ManifestSource<'_> {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn label(&self, index: usize) -> usize {
        self.manifest.records[index].label
    }

    fn image(&self, index: usize) -> Result<Tensor<T>> {
        let path = self.manifest.resolve(&self.manifest.records[index]);
        load_image(&path, self.image_size, self.normalization)
    }
}

/// Images decoded once up front.
#[derive(Debug, Clone)]
pub struct MemorySource<T> {
    images: Vec<Tensor<T>>,
    labels: Vec<usize>,
}

impl<T: Scalar> MemorySource<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= NUM_CLASSES) {
            return Err(Error::Contract(format!("label {} at index {i} out of range", labels[i])));
        }
        Ok(MemorySource { images, labels })
    }

    pub fn load(manifest: &DatasetManifest, image_size: usize, normalization: Normalization) -> Result<Self> {
        let src = ManifestSource {
            manifest,
            image_size,
            normalization,
        };
        let images = (0..manifest.len())
            .map(|i| SampleSource::<T>::image(&src, i))
            .collect::<Result<Vec<_>>>()?;
        MemorySource::new(images, manifest.labels())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl<T: Scalar> SampleSource<T> for MemorySource<T> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<Tensor<T>> {
        Ok(self.images[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// Training mode: shuffle the order each epoch.
    pub shuffle: bool,
    /// Training mode: random flips.
    pub augment: bool,
    pub seed: u64,
    pub epoch: u64,
}

impl BatchOptions {
    pub fn training(batch_size: usize, seed: u64, epoch: u64) -> Self {
        BatchOptions {
            batch_size,
            shuffle: true,
            augment: true,
            seed,
            epoch,
        }
    }

    pub fn eval(batch_size: usize) -> Self {
        BatchOptions {
            batch_size,
            shuffle: false,
            augment: false,
            seed: 0,
            epoch: 0,
        }
    }
}

/// Seed of the RNG that drives one epoch's shuffle and flips.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `B×H×W×C`.
    pub images: Tensor<T>,
    /// One-hot `B×4`.
    pub labels: Tensor<T>,
    /// Source indices in batch order.
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn class_labels(&self) -> Vec<usize> {
        let k = self.labels.shape()[1];
        self.labels
            .data()
            .chunks(k)
            .map(|row| row.iter().position(|&v| v == T::one()).unwrap_or(0))
            .collect()
    }
}

pub struct BatchIter<'a, T: Scalar, S: SampleSource<T> + ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: bool,
    rng: ChaCha8Rng,
    _marker: std::marker::PhantomData<T>,
}

/// Every record exactly once per epoch, in batches of at most `batch_size`.
pub fn batch_iter<'a, T: Scalar, S: SampleSource<T> + ?Sized>(
    source: &'a S,
    options: BatchOptions,
) -> Result<BatchIter<'a, T, S>> {
    if options.batch_size == 0 {
        return Err(Error::Param("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(options.seed, options.epoch));
    let mut order: Vec<usize> = (0..source.len()).collect();
    if options.shuffle {
        order.shuffle(&mut rng);
    }
    Ok(BatchIter {
        source,
        order,
        pos: 0,
        batch_size: options.batch_size,
        augment: options.augment,
        rng,
        _marker: std::marker::PhantomData,
    })
}

impl<T: Scalar, S: SampleSource<T> + ?Sized> BatchIter<'_, T, S> {
    fn build(&mut self, indices: Vec<usize>) -> Result<Batch<T>> {
        let mut images = Vec::with_capacity(indices.len());
        for &i in &indices {
            let img = self.source.image(i)?;
            images.push(if self.augment {
                augment(&img, &mut self.rng)?.0
            } else {
                img
            });
        }
        let labels: Vec<usize> = indices.iter().map(|&i| self.source.label(i)).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels: one_hot(&labels, NUM_CLASSES)?,
            indices,
        })
    }
}

impl<T: Scalar, S: SampleSource<T> + ?Sized> Iterator for BatchIter<'_, T, S> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build(indices))
    }
}
