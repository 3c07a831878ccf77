//! Masked reconstruction losses and their gradients.

use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use super::encoder::{affine, affine_backward, encode, encode_backward};
use super::mask::MaskSpec;
use super::model::ToyMimModel;
use super::patch::PatchSequence;
use crate::error::{MoodError, Result};
use crate::linalg::{log_softmax, softmax, Matrix};

/// What the reconstruction head predicts for each masked patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Regress the raw patch pixels.
    #[default]
    Pixel,
    /// Classify the patch's nearest codebook centroid.
    Codebook,
}

/// Mean squared error over masked rows only, averaged per element.
pub fn masked_pixel_loss(predictions: &Matrix, targets: &Matrix, mask: &MaskSpec) -> Result<f64> {
    if mask.is_empty() {
        return Err(MoodError::Parameter("empty mask".into()));
    }
    if predictions.rows() != targets.rows() || predictions.cols() != targets.cols() {
        return Err(MoodError::Shape(format!(
            "predictions {}x{} vs targets {}x{}",
            predictions.rows(),
            predictions.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let mut total = 0.0;
    for &t in mask.indices() {
        total += predictions
            .row(t)
            .iter()
            .zip(targets.row(t))
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
    }
    Ok(total / (mask.len() * targets.cols()) as f64)
}

/// Cross-entropy of per-row logits against target indices, over masked rows only.
pub fn masked_codebook_loss(logits: &Matrix, targets: &[usize], mask: &MaskSpec) -> Result<f64> {
    if mask.is_empty() {
        return Err(MoodError::Parameter("empty mask".into()));
    }
    let mut total = 0.0;
    for &t in mask.indices() {
        let target = *targets
            .get(t)
            .ok_or_else(|| MoodError::Shape(format!("no target for token {t}")))?;
        if target >= logits.cols() {
            return Err(MoodError::Shape(format!(
                "target index {target} out of range for {} logits",
                logits.cols()
            )));
        }
        total -= log_softmax(logits.row(t))[target];
    }
    Ok(total / mask.len() as f64)
}

fn check_target(model: &ToyMimModel, patches: &PatchSequence, mode: TargetMode, codebook: Option<&Codebook>) -> Result<()> {
    match (mode, codebook) {
        (TargetMode::Pixel, None) => {
            if model.dims.recon_dim != patches.token_dim() {
                return Err(MoodError::Shape(format!(
                    "pixel target needs recon_dim {}, model has {}",
                    patches.token_dim(),
                    model.dims.recon_dim
                )));
            }
        }
        (TargetMode::Codebook, Some(cb)) => {
            if cb.size() < 2 {
                return Err(MoodError::Config("codebook targets need at least 2 centroids".into()));
            }
            if model.dims.recon_dim != cb.size() {
                return Err(MoodError::Shape(format!(
                    "codebook of {} centroids vs recon_dim {}",
                    cb.size(),
                    model.dims.recon_dim
                )));
            }
            if cb.dim() != patches.token_dim() {
                return Err(MoodError::Shape(format!(
                    "codebook centroids have length {}, patches {}",
                    cb.dim(),
                    patches.token_dim()
                )));
            }
        }
        (TargetMode::Pixel, Some(_)) => {
            return Err(MoodError::Config("pixel targets take no codebook".into()));
        }
        (TargetMode::Codebook, None) => {
            return Err(MoodError::Config("codebook targets require a codebook".into()));
        }
    }
    Ok(())
}

/// Reconstruction loss of `model` on one masked patch sequence.
pub fn mim_loss(
    model: &ToyMimModel,
    patches: &PatchSequence,
    mask: &MaskSpec,
    mode: TargetMode,
    codebook: Option<&Codebook>,
) -> Result<f64> {
    mim_loss_impl(model, patches, mask, mode, codebook, None)
}

/// [`mim_loss`] plus its gradient with respect to every parameter.
pub fn mim_loss_and_grad(
    model: &ToyMimModel,
    patches: &PatchSequence,
    mask: &MaskSpec,
    mode: TargetMode,
    codebook: Option<&Codebook>,
) -> Result<(f64, ToyMimModel)> {
    let mut grad = model.zeros_like();
    let loss = mim_loss_impl(model, patches, mask, mode, codebook, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Accumulating variant used by training loops; adds `∇loss` into `grad`.
pub(crate) fn mim_loss_accumulate(
    model: &ToyMimModel,
    patches: &PatchSequence,
    mask: &MaskSpec,
    mode: TargetMode,
    codebook: Option<&Codebook>,
    grad: &mut ToyMimModel,
) -> Result<f64> {
    mim_loss_impl(model, patches, mask, mode, codebook, Some(grad))
}

fn mim_loss_impl(
    model: &ToyMimModel,
    patches: &PatchSequence,
    mask: &MaskSpec,
    mode: TargetMode,
    codebook: Option<&Codebook>,
    grad: Option<&mut ToyMimModel>,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(MoodError::Parameter("empty mask".into()));
    }
    check_target(model, patches, mode, codebook)?;
    let cache = encode(model, patches, Some(mask))?;
    let head = &model.recon_head;
    let recon = affine(&cache.output, &head.weight, Some(&head.bias));

    let (loss, d_recon) = match mode {
        TargetMode::Pixel => {
            let loss = masked_pixel_loss(&recon, patches.tokens(), mask)?;
            let mut d = Matrix::zeros(recon.rows(), recon.cols());
            let norm = 2.0 / (mask.len() * recon.cols()) as f64;
            for &t in mask.indices() {
                for ((g, &p), &y) in d.row_mut(t).iter_mut().zip(recon.row(t)).zip(patches.token(t)) {
                    *g = norm * (p - y);
                }
            }
            (loss, d)
        }
        TargetMode::Codebook => {
            let cb = codebook.expect("checked above");
            let targets: Vec<usize> = (0..patches.len()).map(|t| cb.nearest(patches.token(t))).collect();
            let loss = masked_codebook_loss(&recon, &targets, mask)?;
            let mut d = Matrix::zeros(recon.rows(), recon.cols());
            let norm = 1.0 / mask.len() as f64;
            for &t in mask.indices() {
                let p = softmax(recon.row(t));
                for (j, (g, pj)) in d.row_mut(t).iter_mut().zip(p).enumerate() {
                    let y = if j == targets[t] { 1.0 } else { 0.0 };
                    *g = norm * (pj - y);
                }
            }
            (loss, d)
        }
    };
    if !loss.is_finite() {
        return Err(MoodError::numeric("reconstruction loss is not finite"));
    }

    if let Some(grad) = grad {
        let d_out = affine_backward(
            &cache.output,
            &head.weight,
            &d_recon,
            &mut grad.recon_head.weight,
            Some(&mut grad.recon_head.bias),
        );
        encode_backward(model, patches, &cache, d_out, grad);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Image;
    use crate::mim::mask::sample_mask;
    use crate::mim::model::ModelDims;
    use crate::mim::patch::patchify;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(recon_dim: usize) -> (ToyMimModel, PatchSequence, MaskSpec) {
        let dims = ModelDims {
            patch_size: 2,
            channels: 1,
            grid_rows: 2,
            grid_cols: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            recon_dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::new(4, 4, 1, (0..16).map(|_| rng.gen()).collect()).unwrap();
        (
            ToyMimModel::new(dims, 3).unwrap(),
            patchify(&img, 2).unwrap(),
            sample_mask(4, 0.5, 2).unwrap(),
        )
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let (_, p, mask) = setup(4);
        let mut pred = Matrix::zeros(4, 4);
        for &t in mask.indices() {
            pred.row_mut(t).copy_from_slice(p.token(t));
        }
        assert_eq!(masked_pixel_loss(&pred, p.tokens(), &mask).unwrap(), 0.0);
    }

    #[test]
    fn unmasked_predictions_do_not_count() {
        let (_, p, mask) = setup(4);
        let pred = Matrix::zeros(4, 4);
        let base = masked_pixel_loss(&pred, p.tokens(), &mask).unwrap();
        let free = (0..4).find(|i| !mask.indices().contains(i)).unwrap();
        let mut moved = pred.clone();
        moved.row_mut(free).iter_mut().for_each(|v| *v += 123.0);
        assert_eq!(masked_pixel_loss(&moved, p.tokens(), &mask).unwrap(), base);

        let logits = Matrix::zeros(4, 3);
        let targets = vec![0, 1, 2, 0];
        let base = masked_codebook_loss(&logits, &targets, &mask).unwrap();
        let mut moved = logits.clone();
        moved.row_mut(free)[1] = 50.0;
        assert_eq!(masked_codebook_loss(&moved, &targets, &mask).unwrap(), base);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (mut m, p, mask) = setup(8);
        m.recon_head.weight = Matrix::zeros(8, 8);
        m.recon_head.bias = vec![0.0; 8];
        let centroids = Matrix::from_vec(8, 4, (0..32).map(f64::from).collect()).unwrap();
        let cb = Codebook::new(centroids).unwrap();
        let loss = mim_loss(&m, &p, &mask, TargetMode::Codebook, Some(&cb)).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn mode_and_codebook_must_agree() {
        let (m, p, mask) = setup(4);
        let cb = Codebook::new(Matrix::from_vec(2, 4, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(mim_loss(&m, &p, &mask, TargetMode::Pixel, Some(&cb)), Err(MoodError::Config(_))));
        assert!(matches!(mim_loss(&m, &p, &mask, TargetMode::Codebook, None), Err(MoodError::Config(_))));
        assert!(mim_loss(&m, &p, &mask, TargetMode::Pixel, None).unwrap() >= 0.0);
    }
}
