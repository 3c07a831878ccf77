//! Classifier fine-tuning with label smoothing, and pooled feature extraction.
//!
//! The classifier reads the mean of the encoder's output tokens. The same
//! [`finetune_classifier`] routine serves three stages:
//!
//! * `intermediate`: supervised training on a broad multi-class corpus
//!   before the in-distribution data is seen;
//! * `multi_class`: ordinary fine-tuning on the in-distribution labels;
//! * `one_class`: every sample is relabelled `target_class`. With a
//!   smoothed target the loss stays strictly positive even at perfect
//!   accuracy, so the encoder keeps receiving gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{FeatureSet, ImageDataset};
use crate::error::{MoodError, Result};
use crate::linalg::{log_softmax, softmax, Matrix};
use crate::mim::{
    affine_backward, derive_seed, encode, encode_backward, mean_rows, patchify, patchify_all, PatchSequence,
    SgdMomentum, ToyMimModel,
};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub alpha: f64,
    pub class_count: usize,
}

impl SmoothingConfig {
    pub fn new(alpha: f64, class_count: usize) -> Result<Self> {
        let cfg = SmoothingConfig { alpha, class_count };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MoodError::Parameter(format!("smoothing alpha {} outside [0, 1]", self.alpha)));
        }
        if self.class_count < 2 {
            return Err(MoodError::Parameter(format!(
                "label smoothing needs at least 2 classes, got {}",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// Smoothed one-hot target: `(1 − α) + α/K` at `class`, `α/K` elsewhere.
pub fn smooth_labels(class: usize, cfg: &SmoothingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = cfg.class_count;
    if class >= k {
        return Err(MoodError::Parameter(format!("class {class} out of range for {k} classes")));
    }
    let off = cfg.alpha / k as f64;
    let mut y = vec![off; k];
    y[class] = (1.0 - cfg.alpha) + off;
    Ok(y)
}

/// `−Σ target_c · log softmax(logits)_c`.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(MoodError::Shape(format!(
            "{} logits vs {} target entries",
            logits.len(),
            target.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MoodError::numeric("non-finite logits"));
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || target.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(MoodError::Parameter(format!("target is not a probability vector (sums to {sum})")));
    }
    let ls = log_softmax(logits);
    Ok(-target.iter().zip(&ls).map(|(t, l)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>())
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    MultiClass,
    OneClass,
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Label assigned to every sample in one-class mode.
    pub target_class: usize,
    /// Classifier head width.
    pub class_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::MultiClass,
            target_class: 0,
            class_count: 10,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ToyMimModel,
    pub trace: Vec<EpochStats>,
}

/// Classifier logits for one patch sequence.
pub fn classifier_logits(model: &ToyMimModel, patches: &PatchSequence) -> Result<Vec<f64>> {
    let head = model
        .cls_head
        .as_ref()
        .ok_or_else(|| MoodError::Config("model has no classifier head".into()))?;
    let cache = encode(model, patches, None)?;
    Ok(head.apply(&mean_rows(&cache.output)))
}

/// Cross-entropy of the pooled classifier against `target`, with its gradient.
pub fn classifier_loss_and_grad(
    model: &ToyMimModel,
    patches: &PatchSequence,
    target: &[f64],
) -> Result<(f64, ToyMimModel)> {
    let mut grad = model.zeros_like();
    let (loss, _) = classifier_accumulate(model, patches, target, &mut grad)?;
    Ok((loss, grad))
}

/// Adds the gradient into `grad`; returns the loss and the predicted class.
fn classifier_accumulate(
    model: &ToyMimModel,
    patches: &PatchSequence,
    target: &[f64],
    grad: &mut ToyMimModel,
) -> Result<(f64, usize)> {
    let head = model
        .cls_head
        .as_ref()
        .ok_or_else(|| MoodError::Config("model has no classifier head".into()))?;
    let cache = encode(model, patches, None)?;
    let pooled = mean_rows(&cache.output);
    let logits = head.apply(&pooled);
    let loss = cross_entropy(&logits, target)?;
    let pred = argmax(&logits);

    let d_logits: Vec<f64> = softmax(&logits).iter().zip(target).map(|(p, y)| p - y).collect();
    let pooled_m = Matrix::from_vec(1, pooled.len(), pooled)?;
    let d_logits_m = Matrix::from_vec(1, d_logits.len(), d_logits)?;
    let g_head = grad.cls_head.as_mut().expect("gradient mirrors model");
    let d_pooled = affine_backward(&pooled_m, &head.weight, &d_logits_m, &mut g_head.weight, Some(&mut g_head.bias));
    let t = cache.output.rows();
    let mut d_out = Matrix::zeros(t, cache.output.cols());
    for r in 0..t {
        for (o, &g) in d_out.row_mut(r).iter_mut().zip(d_pooled.row(0)) {
            *o = g / t as f64;
        }
    }
    encode_backward(model, patches, &cache, d_out, grad);
    Ok((loss, pred))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains the pooled classifier with SGD-with-momentum on smoothed labels.
///
/// A head of width `cfg.class_count` is attached (freshly initialized) unless
/// the model already carries one of that width.
pub fn finetune_classifier(
    model: &ToyMimModel,
    data: &ImageDataset,
    cfg: &FinetuneConfig,
    smoothing: &SmoothingConfig,
) -> Result<FinetuneOutcome> {
    smoothing.validate()?;
    if cfg.batch_size == 0 {
        return Err(MoodError::Parameter("batch_size must be positive".into()));
    }
    if smoothing.class_count != cfg.class_count {
        return Err(MoodError::Config(format!(
            "smoothing over {} classes but head has {}",
            smoothing.class_count, cfg.class_count
        )));
    }
    let labels: Vec<usize> = match cfg.mode {
        FinetuneMode::OneClass => {
            if cfg.target_class >= cfg.class_count {
                return Err(MoodError::Config(format!(
                    "target_class {} outside [0, {})",
                    cfg.target_class, cfg.class_count
                )));
            }
            if smoothing.alpha == 0.0 {
                return Err(MoodError::Config(
                    "one-class fine-tuning needs alpha > 0; with one-hot targets the loss collapses to 0".into(),
                ));
            }
            vec![cfg.target_class; data.len()]
        }
        FinetuneMode::MultiClass | FinetuneMode::Intermediate => {
            if let Some(&l) = data.labels().iter().find(|&&l| l >= cfg.class_count) {
                return Err(MoodError::Config(format!(
                    "label {l} does not fit a {}-way head",
                    cfg.class_count
                )));
            }
            data.labels().to_vec()
        }
    };
    let dims = model.dims;
    data.check_patch_size(dims.patch_size)?;
    let patches = patchify_all(data, dims.patch_size)?;
    if let Some(p) = patches.first() {
        if p.grid() != (dims.grid_rows, dims.grid_cols) || p.channels() != dims.channels {
            return Err(MoodError::Shape(format!(
                "data geometry {:?} does not match the model",
                data.image_shape()
            )));
        }
    }
    let targets: Vec<Vec<f64>> = (0..cfg.class_count)
        .map(|c| smooth_labels(c, smoothing))
        .collect::<Result<_>>()?;

    let mut model = model.clone();
    if model.class_count() != Some(cfg.class_count) {
        model.attach_classifier(cfg.class_count, derive_seed(cfg.seed, 10))?;
    }
    let mut opt = SgdMomentum::new(&model, cfg.learning_rate, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.zeros_like();
            for &i in batch {
                let (loss, pred) = classifier_accumulate(&model, &patches[i], &targets[labels[i]], &mut grad)
                    .map_err(|e| match e {
                        MoodError::Numeric { message, .. } => MoodError::numeric_at(step, message),
                        other => other,
                    })?;
                total += loss;
                correct += usize::from(pred == labels[i]);
            }
            opt.step(&mut model, &grad, 1.0 / batch.len() as f64);
            if !model.is_finite() {
                return Err(MoodError::numeric_at(step, "parameters diverged"));
            }
            step += 1;
        }
        trace.push(EpochStats {
            loss: total / patches.len() as f64,
            accuracy: correct as f64 / patches.len() as f64,
        });
    }
    Ok(FinetuneOutcome { model, trace })
}

/// Fraction of `data` whose classifier argmax equals `labels`.
pub fn classifier_accuracy(model: &ToyMimModel, data: &ImageDataset, labels: &[usize]) -> Result<f64> {
    let logits = extract_logits(model, data)?;
    let hits = (0..logits.n_rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / logits.n_rows() as f64)
}

/// Which activations become features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayer {
    /// Mean of the final block's output tokens.
    #[default]
    PooledFinal,
    /// The classifier input; identical to `PooledFinal` in this encoder.
    PooledPrelogit,
}

fn map_images<F>(model: &ToyMimModel, data: &ImageDataset, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&ToyMimModel, &PatchSequence) -> Result<Vec<f64>> + Sync,
{
    data.images()
        .par_iter()
        .map(|img| {
            let p = patchify(img, model.dims.patch_size)?;
            f(model, &p)
        })
        .collect()
}

/// Unmasked pooled features, one row per image, labels copied from `data`.
pub fn extract_features(model: &ToyMimModel, data: &ImageDataset, layer: FeatureLayer) -> Result<FeatureSet> {
    let rows = map_images(model, data, |m, p| {
        let cache = encode(m, p, None)?;
        Ok(mean_rows(&cache.output))
    })?;
    let source = match layer {
        FeatureLayer::PooledFinal => "toy_mim:pooled_final",
        FeatureLayer::PooledPrelogit => "toy_mim:pooled_prelogit",
    };
    FeatureSet::new(Matrix::from_rows(&rows)?, Some(data.labels().to_vec()), source)
}

/// Classifier logits, one row per image, labels copied from `data`.
pub fn extract_logits(model: &ToyMimModel, data: &ImageDataset) -> Result<FeatureSet> {
    let rows = map_images(model, data, classifier_logits)?;
    FeatureSet::new(Matrix::from_rows(&rows)?, Some(data.labels().to_vec()), "toy_mim:logits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::generate_synthetic;
    use crate::mim::MimConfig;
    use proptest::prelude::*;

    fn small_model(seed: u64) -> ToyMimModel {
        let dims = MimConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            ..MimConfig::default()
        }
        .dims_for((8, 8, 1))
        .unwrap();
        ToyMimModel::new(dims, seed).unwrap()
    }

    #[test]
    fn smoothing_extremes() {
        let one_hot = smooth_labels(2, &SmoothingConfig::new(0.0, 4).unwrap()).unwrap();
        assert_eq!(one_hot, vec![0.0, 0.0, 1.0, 0.0]);
        let uniform = smooth_labels(2, &SmoothingConfig::new(1.0, 4).unwrap()).unwrap();
        assert_eq!(uniform, vec![0.25; 4]);
    }

    #[test]
    fn smoothing_arithmetic() {
        let y = smooth_labels(0, &SmoothingConfig::new(0.2, 5).unwrap()).unwrap();
        let want = [0.84, 0.04, 0.04, 0.04, 0.04];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_errors() {
        assert!(smooth_labels(5, &SmoothingConfig { alpha: 0.1, class_count: 5 }).is_err());
        assert!(SmoothingConfig::new(1.5, 5).is_err());
        assert!(SmoothingConfig::new(0.1, 1).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let u = cross_entropy(&[0.3; 4], &[0.25; 4]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-15);
        // log(1 + e^-20) evaluated at high precision: 2.0611536181902037e-9
        let sharp = cross_entropy(&[10.0, -10.0], &[1.0, 0.0]).unwrap();
        assert!((sharp - 2.061_153_618_190_204e-9).abs() < 1e-15);
        assert!(cross_entropy(&[f64::NAN, 0.0], &[1.0, 0.0]).is_err());
        assert!(cross_entropy(&[0.0, 0.0], &[0.6, 0.6]).is_err());
    }

    proptest! {
        #[test]
        fn smoothed_targets_are_distributions(alpha in 0.0f64..=1.0, k in 2usize..20, c in 0usize..20) {
            let c = c % k;
            let y = smooth_labels(c, &SmoothingConfig::new(alpha, k).unwrap()).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 4.0 * f64::EPSILON * k as f64);
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn target_entry_decreases_in_alpha(a in 0.0f64..1.0, b in 0.0f64..1.0, k in 2usize..10) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let y_lo = smooth_labels(0, &SmoothingConfig::new(lo, k).unwrap()).unwrap()[0];
            let y_hi = smooth_labels(0, &SmoothingConfig::new(hi, k).unwrap()).unwrap()[0];
            prop_assert!(y_hi < y_lo);
        }

        #[test]
        fn gibbs_inequality(logits in proptest::collection::vec(-20.0f64..20.0, 2..8), alpha in 0.01f64..1.0) {
            let k = logits.len();
            let y = smooth_labels(0, &SmoothingConfig::new(alpha, k).unwrap()).unwrap();
            let h = entropy(&y);
            prop_assert!(h > 0.0);
            prop_assert!(cross_entropy(&logits, &y).unwrap() >= h - 1e-12);
        }
    }

    #[test]
    fn cross_entropy_equals_entropy_at_target() {
        let y = smooth_labels(1, &SmoothingConfig::new(0.3, 3).unwrap()).unwrap();
        let logits: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        assert!((cross_entropy(&logits, &y).unwrap() - entropy(&y)).abs() < 1e-14);
    }

    #[test]
    fn one_class_with_zero_alpha_is_config_error() {
        let data = generate_synthetic(2, 4, 8, 1, false, 1).unwrap();
        let cfg = FinetuneConfig {
            mode: FinetuneMode::OneClass,
            class_count: 3,
            ..FinetuneConfig::default()
        };
        let r = finetune_classifier(&small_model(0), &data, &cfg, &SmoothingConfig::new(0.0, 3).unwrap());
        assert!(matches!(r, Err(MoodError::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_encoder_unchanged() {
        let data = generate_synthetic(2, 4, 8, 1, false, 1).unwrap();
        let mut m = small_model(0);
        m.attach_classifier(2, 9).unwrap();
        let cfg = FinetuneConfig {
            class_count: 2,
            epochs: 2,
            learning_rate: 0.0,
            ..FinetuneConfig::default()
        };
        let out = finetune_classifier(&m, &data, &cfg, &SmoothingConfig::new(0.1, 2).unwrap()).unwrap();
        assert_eq!(out.model, m);
    }

    #[test]
    fn deterministic() {
        let data = generate_synthetic(2, 4, 8, 1, false, 1).unwrap();
        let cfg = FinetuneConfig {
            class_count: 2,
            epochs: 2,
            seed: 4,
            ..FinetuneConfig::default()
        };
        let s = SmoothingConfig::new(0.1, 2).unwrap();
        let a = finetune_classifier(&small_model(0), &data, &cfg, &s).unwrap();
        let b = finetune_classifier(&small_model(0), &data, &cfg, &s).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn features_shape_and_purity() {
        let data = generate_synthetic(2, 3, 8, 1, false, 1).unwrap();
        let m = small_model(2);
        let fs = extract_features(&m, &data, FeatureLayer::PooledFinal).unwrap();
        assert_eq!((fs.n_rows(), fs.n_cols()), (6, 16));
        assert_eq!(fs.labels().unwrap(), data.labels());
        let dup = ImageDataset::new(
            vec![data.images()[0].clone(), data.images()[0].clone()],
            vec![0, 0],
            2,
        )
        .unwrap();
        let fd = extract_features(&m, &dup, FeatureLayer::PooledPrelogit).unwrap();
        assert_eq!(fd.row(0), fd.row(1));
        assert_eq!(fd.row(0), fs.row(0));
    }

    #[test]
    fn geometry_mismatch() {
        let data = generate_synthetic(2, 3, 12, 1, false, 1).unwrap();
        assert!(matches!(
            extract_features(&small_model(0), &data, FeatureLayer::PooledFinal),
            Err(MoodError::Shape(_))
        ));
    }
}
