//! Masked-image-modeling pretraining loop.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codebook::{build_codebook, Codebook};
use super::loss::{mim_loss, mim_loss_accumulate, TargetMode};
use super::mask::sample_mask;
use super::model::{ModelDims, ToyMimModel};
use super::optim::SgdMomentum;
use super::patch::{patchify, PatchSequence};
use super::derive_seed;
use crate::datamodel::{ImageDataset, DEFAULT_PATCH_SIZE};
use crate::error::{MoodError, Result};

/// Pretraining hyperparameters. Field defaults are the desk-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub target: TargetMode,
    pub codebook_size: usize,
    pub codebook_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for MimConfig {
    fn default() -> Self {
        MimConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mask_ratio: 0.4,
            target: TargetMode::Pixel,
            codebook_size: 16,
            codebook_iters: 25,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl MimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MoodError::Parameter("batch_size must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(MoodError::Parameter(format!("mask ratio {} outside (0, 1]", self.mask_ratio)));
        }
        if self.target == TargetMode::Codebook && self.codebook_size < 2 {
            return Err(MoodError::Parameter("codebook targets need codebook_size >= 2".into()));
        }
        Ok(())
    }

    /// Model geometry this config implies for images of the given shape.
    pub fn dims_for(&self, image_shape: (usize, usize, usize)) -> Result<ModelDims> {
        let (h, w, c) = image_shape;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(MoodError::Geometry(format!(
                "{h}x{w} images are not divisible into {0}x{0} patches",
                self.patch_size
            )));
        }
        let recon_dim = match self.target {
            TargetMode::Pixel => self.patch_size * self.patch_size * c,
            TargetMode::Codebook => self.codebook_size,
        };
        let dims = ModelDims {
            patch_size: self.patch_size,
            channels: c,
            grid_rows: h / self.patch_size,
            grid_cols: w / self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            recon_dim,
        };
        dims.validate()?;
        Ok(dims)
    }
}

/// Loss history of a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimTrace {
    /// Mean loss of the untrained model over the dataset.
    pub initial_loss: f64,
    /// Mean per-sample loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MimOutcome {
    pub model: ToyMimModel,
    pub codebook: Option<Codebook>,
    pub trace: MimTrace,
}

pub(crate) fn patchify_all(data: &ImageDataset, patch_size: usize) -> Result<Vec<PatchSequence>> {
    data.images().iter().map(|img| patchify(img, patch_size)).collect()
}

/// Pretrains a fresh model by masked patch reconstruction.
///
/// Each epoch visits samples in a seeded random order, in minibatches, and
/// draws a fresh mask per sample. Gradients are averaged within a batch.
pub fn train_mim(data: &ImageDataset, config: &MimConfig, seed: u64) -> Result<MimOutcome> {
    config.validate()?;
    let dims = config.dims_for(data.image_shape())?;
    let patches = patchify_all(data, config.patch_size)?;
    let t = dims.tokens();

    let codebook = match config.target {
        TargetMode::Pixel => None,
        TargetMode::Codebook => {
            let vectors: Vec<&[f64]> = patches
                .iter()
                .flat_map(|p| (0..p.len()).map(move |i| p.token(i)))
                .collect();
            Some(
                build_codebook(&vectors, config.codebook_size, config.codebook_iters, derive_seed(seed, 1))?
                    .codebook,
            )
        }
    };
    let cb = codebook.as_ref();

    let mut model = ToyMimModel::new(dims, derive_seed(seed, 0))?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut initial = 0.0;
    for p in &patches {
        let mask = sample_mask(t, config.mask_ratio, eval_rng.next_u64())?;
        initial += mim_loss(&model, p, &mask, config.target, cb)?;
    }
    let initial_loss = initial / patches.len() as f64;

    let mut opt = SgdMomentum::new(&model, config.learning_rate, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = model.zeros_like();
            for &i in batch {
                let mask = sample_mask(t, config.mask_ratio, rng.next_u64())?;
                let loss = mim_loss_accumulate(&model, &patches[i], &mask, config.target, cb, &mut grad)
                    .map_err(|e| match e {
                        MoodError::Numeric { message, .. } => MoodError::numeric_at(step, message),
                        other => other,
                    })?;
                total += loss;
            }
            opt.step(&mut model, &grad, 1.0 / batch.len() as f64);
            if !model.is_finite() {
                return Err(MoodError::numeric_at(step, "parameters diverged"));
            }
            step += 1;
        }
        epoch_losses.push(total / patches.len() as f64);
    }

    Ok(MimOutcome {
        model,
        codebook,
        trace: MimTrace {
            initial_loss,
            epoch_losses,
        },
    })
}
