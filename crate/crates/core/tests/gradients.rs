use mood_core::datamodel::generate_synthetic;
use mood_core::finetune::{classifier_loss_and_grad, smooth_labels, SmoothingConfig};
use mood_core::mim::{
    build_codebook, gradient_check, mim_loss_and_grad, patchify, sample_mask, ModelDims, TargetMode, ToyMimModel,
};

const EPS: f64 = 1e-5;

fn dims(recon_dim: usize) -> ModelDims {
    ModelDims {
        patch_size: 4,
        channels: 1,
        grid_rows: 2,
        grid_cols: 2,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        recon_dim,
    }
}

#[test]
fn pixel_mim_gradient() {
    let data = generate_synthetic(2, 1, 8, 1, false, 1).unwrap();
    let p = patchify(&data.images()[0], 4).unwrap();
    let mask = sample_mask(4, 0.5, 3).unwrap();
    let m = ToyMimModel::new(dims(16), 4).unwrap();
    let r = gradient_check(&m, |mm| mim_loss_and_grad(mm, &p, &mask, TargetMode::Pixel, None), EPS).unwrap();
    assert!(r.coordinates >= 200);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn codebook_mim_gradient() {
    let data = generate_synthetic(2, 4, 8, 1, false, 1).unwrap();
    let seqs: Vec<_> = data.images().iter().map(|i| patchify(i, 4).unwrap()).collect();
    let vecs: Vec<&[f64]> = seqs.iter().flat_map(|s| (0..s.len()).map(move |i| s.token(i))).collect();
    let cb = build_codebook(&vecs, 5, 10, 2).unwrap().codebook;
    let mask = sample_mask(4, 0.5, 7).unwrap();
    let m = ToyMimModel::new(dims(5), 6).unwrap();
    let r = gradient_check(
        &m,
        |mm| mim_loss_and_grad(mm, &seqs[0], &mask, TargetMode::Codebook, Some(&cb)),
        EPS,
    )
    .unwrap();
    assert!(r.coordinates >= 200);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn finetune_gradient() {
    let data = generate_synthetic(3, 1, 8, 1, false, 1).unwrap();
    let p = patchify(&data.images()[1], 4).unwrap();
    let mut m = ToyMimModel::new(dims(16), 8).unwrap();
    m.attach_classifier(3, 9).unwrap();
    let y = smooth_labels(1, &SmoothingConfig::new(0.1, 3).unwrap()).unwrap();
    let r = gradient_check(&m, |mm| classifier_loss_and_grad(mm, &p, &y), EPS).unwrap();
    assert!(r.coordinates >= 200);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
