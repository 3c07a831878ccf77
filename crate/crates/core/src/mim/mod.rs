//! Desk-scale masked image modeling: patches, masks, a small pre-norm
//! transformer encoder with a hand-written backward pass, reconstruction
//! losses, a k-means codebook target and the pretraining loop.

mod codebook;
mod encoder;
mod gradcheck;
mod loss;
mod mask;
mod model;
mod optim;
mod patch;
mod train;

pub use codebook::{build_codebook, Codebook, CodebookFit};
pub use encoder::{forward_encoder, pooled_features};
pub use gradcheck::{gradient_check, relative_error, sample_coordinates, GradCheckReport, MIN_CHECKED_COORDS};
pub use loss::{masked_codebook_loss, masked_pixel_loss, mim_loss, mim_loss_and_grad, TargetMode};
pub use mask::{masked_count, sample_mask, MaskSpec};
pub use model::{Attention, Block, LayerNorm, Linear, ModelDims, ParamRef, ToyMimModel, LAYER_NORM_EPS};
pub use optim::SgdMomentum;
pub use patch::{patchify, unpatchify, PatchSequence};
pub use train::{train_mim, MimConfig, MimOutcome, MimTrace};

pub(crate) use encoder::{affine_backward, encode, encode_backward, mean_rows};
pub(crate) use train::patchify_all;

/// Derives an independent sub-seed for a named random stream.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
