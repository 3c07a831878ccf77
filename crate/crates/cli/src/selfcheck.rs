//! Built-in numerical checks: hand-written gradients against finite
//! differences, and library routines against brute-force oracles.

use mood_core::datamodel::{generate_synthetic, FeatureSet};
use mood_core::evaluate::auroc;
use mood_core::finetune::{classifier_loss_and_grad, smooth_labels, SmoothingConfig};
use mood_core::gaussian::fit_gaussian;
use mood_core::linalg::Matrix;
use mood_core::mim::{
    build_codebook, gradient_check, mim_loss_and_grad, patchify, sample_mask, ModelDims, PatchSequence, TargetMode,
    ToyMimModel,
};
use mood_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn record(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        record("gradient/pixel_mim", grad_pixel()),
        record("gradient/codebook_mim", grad_codebook()),
        record("gradient/finetune", grad_finetune()),
        record("oracle/auroc_pairs", auroc_oracle()),
        record("oracle/mahalanobis_inverse", mahalanobis_oracle()),
        record("oracle/label_smoothing", smoothing_oracle()),
    ]
}

fn tiny(recon_dim: usize, seed: u64) -> Result<ToyMimModel> {
    ToyMimModel::new(
        ModelDims {
            patch_size: 4,
            channels: 1,
            grid_rows: 2,
            grid_cols: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            recon_dim,
        },
        seed,
    )
}

fn patches(n: usize) -> Result<Vec<PatchSequence>> {
    let data = generate_synthetic(2, n, 8, 1, false, 1)?;
    data.images().iter().map(|i| patchify(i, 4)).collect()
}

fn verdict(max_rel: f64, coords: usize) -> (bool, String) {
    (
        max_rel < GRAD_TOL && coords >= 200,
        format!("max rel err {max_rel:.2e} over {coords} coords"),
    )
}

fn grad_pixel() -> Result<(bool, String)> {
    let p = &patches(1)?[0];
    let mask = sample_mask(p.len(), 0.5, 3)?;
    let m = tiny(16, 4)?;
    let r = gradient_check(&m, |mm| mim_loss_and_grad(mm, p, &mask, TargetMode::Pixel, None), 1e-5)?;
    Ok(verdict(r.max_rel_error, r.coordinates))
}

fn grad_codebook() -> Result<(bool, String)> {
    let seqs = patches(4)?;
    let vecs: Vec<&[f64]> = seqs.iter().flat_map(|s| (0..s.len()).map(move |i| s.token(i))).collect();
    let cb = build_codebook(&vecs, 5, 10, 2)?.codebook;
    let mask = sample_mask(seqs[0].len(), 0.5, 7)?;
    let m = tiny(5, 6)?;
    let r = gradient_check(
        &m,
        |mm| mim_loss_and_grad(mm, &seqs[0], &mask, TargetMode::Codebook, Some(&cb)),
        1e-5,
    )?;
    Ok(verdict(r.max_rel_error, r.coordinates))
}

fn grad_finetune() -> Result<(bool, String)> {
    let p = &patches(1)?[1];
    let mut m = tiny(16, 8)?;
    m.attach_classifier(3, 9)?;
    let y = smooth_labels(1, &SmoothingConfig::new(0.1, 3)?)?;
    let r = gradient_check(&m, |mm| classifier_loss_and_grad(mm, p, &y), 1e-5)?;
    Ok(verdict(r.max_rel_error, r.coordinates))
}

fn auroc_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=100);
        let m = rng.gen_range(1..=100);
        let id: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0u8..15))).collect();
        let ood: Vec<f64> = (0..m).map(|_| f64::from(rng.gen_range(0u8..15))).collect();
        let mut wins = 0.0;
        for &o in &ood {
            for &i in &id {
                wins += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
            }
        }
        worst = worst.max((auroc(&id, &ood)? - wins / (n * m) as f64).abs());
    }
    Ok((worst <= 1e-12, format!("max abs diff {worst:.2e} over 200 tied instances")))
}

/// Gauss-Jordan inverse with partial pivoting.
fn inverse(a: &Matrix) -> Matrix {
    let d = a.rows();
    let mut aug: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap_or(c);
        aug.swap(c, p);
        let v = aug[c][c];
        aug[c].iter_mut().for_each(|e| *e /= v);
        let pivot = aug[c].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            if r != c {
                let f = row[c];
                row.iter_mut().zip(&pivot).for_each(|(e, s)| *e -= f * s);
            }
        }
    }
    let mut out = Matrix::zeros(d, d);
    for (i, row) in aug.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row[d..]);
    }
    out
}

fn mahalanobis_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            let centre: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for _ in 0..d + 3 {
                rows.push(centre.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect());
                labels.push(c);
            }
        }
        let fs = FeatureSet::new(Matrix::from_rows(&rows)?, Some(labels), "selfcheck")?;
        let g = fit_gaussian(&fs, 1e-3)?;
        let inv = inverse(&g.regularized_covariance());
        let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        for (c, got) in g.class_distances(&f)?.into_iter().enumerate() {
            let v: Vec<f64> = f.iter().zip(g.means().row(c)).map(|(a, b)| a - b).collect();
            let want: f64 = (0..d).map(|i| (0..d).map(|j| v[i] * inv[(i, j)] * v[j]).sum::<f64>()).sum();
            worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
    }
    Ok((worst <= 1e-8, format!("max rel diff {worst:.2e} over 50 models")))
}

fn smoothing_oracle() -> Result<(bool, String)> {
    let one_hot = smooth_labels(1, &SmoothingConfig::new(0.0, 3)?)? == [0.0, 1.0, 0.0];
    let uniform = smooth_labels(1, &SmoothingConfig::new(1.0, 4)?)? == [0.25; 4];
    let mid = smooth_labels(0, &SmoothingConfig::new(0.2, 5)?)?;
    let mid_ok = mid
        .iter()
        .zip([0.84, 0.04, 0.04, 0.04, 0.04])
        .all(|(a, b)| (a - b).abs() < 1e-15);
    Ok((
        one_hot && uniform && mid_ok,
        format!("one-hot {one_hot}, uniform {uniform}, alpha=0.2 {mid_ok}"),
    ))
}
