use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::image::{augment, load_image, preprocess, AugmentConfig};
use super::manifest::{DatasetManifest, Entry, Split};
use super::mix_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A manifest bound to the model's input size, optionally holding every
/// preprocessed image in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    input_size: usize,
    images: Option<Vec<Tensor>>,
}

/// One mini-batch: `[n, size, size, 3]` images and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Manifest indices of the samples.
    pub indices: Vec<usize>,
}

impl Dataset {
    /// Images are decoded on demand for every batch.
    pub fn streaming(manifest: DatasetManifest, input_size: usize) -> Result<Self> {
        manifest.validate()?;
        if input_size == 0 {
            return Err(Error::config("input size must be positive"));
        }
        Ok(Self {
            manifest,
            input_size,
            images: None,
        })
    }

    /// Decodes and preprocesses every entry once, up front.
    pub fn cached(manifest: DatasetManifest, input_size: usize) -> Result<Self> {
        let mut ds = Self::streaming(manifest, input_size)?;
        let images = ds
            .manifest
            .entries
            .par_iter()
            .map(|e| ds.decode(e))
            .collect::<Result<Vec<_>>>()?;
        ds.images = Some(images);
        Ok(ds)
    }

    /// An in-memory dataset from already preprocessed `[size, size, 3]` images.
    pub fn from_tensors(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != splits.len() {
            return Err(Error::config("images, labels and splits differ in length"));
        }
        let size = images.first().map(|t| t.shape()[0]).unwrap_or(1);
        for t in &images {
            if t.shape() != [size, size, 3] {
                return Err(Error::shape(format!(
                    "expected [{size}, {size}, 3] images, got {:?}",
                    t.shape()
                )));
            }
        }
        let entries = labels
            .iter()
            .zip(&splits)
            .enumerate()
            .map(|(i, (&class, &split))| Entry {
                path: format!("memory/{i:06}").into(),
                class,
                split: Some(split),
            })
            .collect();
        let manifest = DatasetManifest {
            root: "memory".into(),
            class_names,
            entries,
            seed: None,
        };
        manifest.validate()?;
        Ok(Self {
            manifest,
            input_size: size,
            images: Some(images),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.class_names
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.split_len(split)
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    fn decode(&self, entry: &Entry) -> Result<Tensor> {
        preprocess(&load_image(self.manifest.full_path(entry))?, self.input_size)
    }

    /// Preprocessed, unaugmented image of entry `i`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        match &self.images {
            Some(images) => Ok(images[i].clone()),
            None => self.decode(&self.manifest.entries[i]),
        }
    }

    /// Sample order of `split` for an epoch. With `shuffle_seed` the order is
    /// a permutation keyed by `(seed, epoch)`; without it, manifest order.
    pub fn order(&self, split: Split, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
        let mut idx = self.manifest.indices(split);
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0x5a5a]));
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Mini-batches of `split`. Augmentation applies only to the train split;
    /// each sample's transform is drawn from a generator keyed by
    /// `(seed, epoch, index)`, so the stream does not depend on scheduling.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: u64,
        augment_cfg: &AugmentConfig,
    ) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        augment_cfg.validate()?;
        let augment_cfg = if split == Split::Train {
            *augment_cfg
        } else {
            AugmentConfig::disabled()
        };
        Ok(Batches {
            dataset: self,
            order: self.order(split, shuffle_seed, epoch),
            pos: 0,
            batch_size,
            seed: shuffle_seed.unwrap_or(0),
            epoch,
            augment: augment_cfg,
        })
    }
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    augment: AugmentConfig,
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn load(&self, i: usize) -> Result<Tensor> {
        let img = self.dataset.image(i)?;
        if !self.augment.enabled {
            return Ok(img);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.epoch, i as u64]));
        Ok(augment(&img, &self.augment, &mut rng))
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = indices
            .par_iter()
            .map(|&i| self.load(i))
            .collect::<Result<Vec<_>>>();
        let labels = indices
            .iter()
            .map(|&i| self.dataset.manifest.entries[i].class)
            .collect();
        Some(images.and_then(|imgs| {
            Ok(Batch {
                images: Tensor::stack(&imgs)?,
                labels,
                indices,
            })
        }))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}
