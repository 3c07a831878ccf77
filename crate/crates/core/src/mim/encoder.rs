//! Forward and hand-derived backward passes of the toy encoder.

use super::mask::MaskSpec;
use super::model::{Block, LayerNorm, ToyMimModel, LAYER_NORM_EPS};
use super::patch::PatchSequence;
use crate::error::{MoodError, Result};
use crate::linalg::Matrix;

/// `x · Wᵀ + b` for a batch of row vectors.
pub(crate) fn affine(x: &Matrix, weight: &Matrix, bias: Option<&[f64]>) -> Matrix {
    debug_assert_eq!(x.cols(), weight.cols());
    let mut out = Matrix::zeros(x.rows(), weight.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (o, (j, wj)) in oi.iter_mut().zip(weight.iter_rows().enumerate()) {
            let b = bias.map_or(0.0, |b| b[j]);
            *o = b + crate::linalg::dot(wj, xi);
        }
    }
    out
}

/// Backward of [`affine`]: accumulates `dW += dyᵀ x`, `db += Σ dy` and
/// returns `dx = dy · W`.
pub(crate) fn affine_backward(
    x: &Matrix,
    weight: &Matrix,
    dy: &Matrix,
    d_weight: &mut Matrix,
    d_bias: Option<&mut [f64]>,
) -> Matrix {
    for i in 0..dy.rows() {
        let dyi = dy.row(i);
        let xi = x.row(i);
        for (j, &g) in dyi.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (dw, &xv) in d_weight.row_mut(j).iter_mut().zip(xi) {
                *dw += g * xv;
            }
        }
    }
    if let Some(db) = d_bias {
        for i in 0..dy.rows() {
            for (b, &g) in db.iter_mut().zip(dy.row(i)) {
                *b += g;
            }
        }
    }
    dy.matmul(weight)
}

struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, ln: &LayerNorm) -> (Matrix, NormCache) {
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        for ((o, &h), (&g, &b)) in y.row_mut(r).iter_mut().zip(xhat.row(r)).zip(ln.gamma.iter().zip(&ln.beta)) {
            *o = g * h + b;
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Matrix, ln: &LayerNorm, cache: &NormCache, grad: &mut LayerNorm) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            grad.gamma[j] += dyr[j] * xh[j];
            grad.beta[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

struct BlockCache {
    norm1: NormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-softmax attention weights, one `T×T` matrix per head.
    probs: Vec<Matrix>,
    ctx: Matrix,
    norm2: NormCache,
    b: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

fn block_forward(x: &Matrix, blk: &Block, heads: usize) -> (Matrix, BlockCache) {
    let t = x.rows();
    let d = x.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, norm1) = layer_norm(x, &blk.norm1);
    let q = affine(&a, &blk.attn.query.weight, Some(&blk.attn.query.bias));
    let k = affine(&a, &blk.attn.key, None);
    let v = affine(&a, &blk.attn.value.weight, Some(&blk.attn.value.bias));

    let mut ctx = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * crate::linalg::dot(qi, &k.row(j)[cols.clone()]);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s /= z;
            }
        }
        for i in 0..t {
            for j in 0..t {
                let w = p[(i, j)];
                let vj = &v.row(j)[cols.clone()];
                for (c, &vv) in ctx.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                    *c += w * vv;
                }
            }
        }
        probs.push(p);
    }
    let attn_out = affine(&ctx, &blk.attn.output.weight, Some(&blk.attn.output.bias));
    let mut mid = x.clone();
    for (m, o) in mid.as_mut_slice().iter_mut().zip(attn_out.as_slice()) {
        *m += o;
    }

    let (b, norm2) = layer_norm(&mid, &blk.norm2);
    let pre_act = affine(&b, &blk.fc1.weight, Some(&blk.fc1.bias));
    let mut act = pre_act.clone();
    for u in act.as_mut_slice() {
        *u = gelu(*u);
    }
    let ffn_out = affine(&act, &blk.fc2.weight, Some(&blk.fc2.bias));
    let mut out = mid;
    for (m, o) in out.as_mut_slice().iter_mut().zip(ffn_out.as_slice()) {
        *m += o;
    }

    (
        out,
        BlockCache {
            norm1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            norm2,
            b,
            pre_act,
            act,
        },
    )
}

fn block_backward(d_out: &Matrix, blk: &Block, cache: &BlockCache, heads: usize, grad: &mut Block) -> Matrix {
    let t = d_out.rows();
    let d = d_out.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    let mut d_act = affine_backward(&cache.act, &blk.fc2.weight, d_out, &mut grad.fc2.weight, Some(&mut grad.fc2.bias));
    for (g, &u) in d_act.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
        *g *= gelu_grad(u);
    }
    let d_b = affine_backward(&cache.b, &blk.fc1.weight, &d_act, &mut grad.fc1.weight, Some(&mut grad.fc1.bias));
    let mut d_mid = layer_norm_backward(&d_b, &blk.norm2, &cache.norm2, &mut grad.norm2);
    for (m, o) in d_mid.as_mut_slice().iter_mut().zip(d_out.as_slice()) {
        *m += o;
    }

    // attention branch
    let d_ctx = affine_backward(
        &cache.ctx,
        &blk.attn.output.weight,
        &d_mid,
        &mut grad.attn.output.weight,
        Some(&mut grad.attn.output.bias),
    );
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &cache.probs[h];
        for i in 0..t {
            let dci = &d_ctx.row(i)[cols.clone()];
            // dP_ij = dctx_i · v_j ; dv_j += P_ij dctx_i
            let mut dp = vec![0.0; t];
            for j in 0..t {
                dp[j] = crate::linalg::dot(dci, &cache.v.row(j)[cols.clone()]);
                let w = p[(i, j)];
                for (g, &c) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                    *g += w * c;
                }
            }
            let pr = p.row(i);
            let inner: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..t {
                let ds = pr[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[cols.clone()];
                for (g, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *g += ds * kv;
                }
                let qi = &cache.q.row(i)[cols.clone()];
                for (g, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *g += ds * qv;
                }
            }
        }
    }
    let mut d_a = affine_backward(&cache.a, &blk.attn.query.weight, &dq, &mut grad.attn.query.weight, Some(&mut grad.attn.query.bias));
    let d_a_k = affine_backward(&cache.a, &blk.attn.key, &dk, &mut grad.attn.key, None);
    let d_a_v = affine_backward(&cache.a, &blk.attn.value.weight, &dv, &mut grad.attn.value.weight, Some(&mut grad.attn.value.bias));
    for ((x, y), z) in d_a.as_mut_slice().iter_mut().zip(d_a_k.as_slice()).zip(d_a_v.as_slice()) {
        *x += y + z;
    }
    let mut d_x = layer_norm_backward(&d_a, &blk.norm1, &cache.norm1, &mut grad.norm1);
    for (x, m) in d_x.as_mut_slice().iter_mut().zip(d_mid.as_slice()) {
        *x += m;
    }
    d_x
}

/// Intermediate state kept by [`encode`] for the backward pass.
pub(crate) struct EncoderCache {
    masked: Vec<bool>,
    blocks: Vec<BlockCache>,
    pub(crate) output: Matrix,
}

fn check_geometry(model: &ToyMimModel, patches: &PatchSequence, mask: Option<&MaskSpec>) -> Result<()> {
    let dims = &model.dims;
    if patches.grid() != (dims.grid_rows, dims.grid_cols)
        || patches.patch_size() != dims.patch_size
        || patches.channels() != dims.channels
    {
        return Err(MoodError::Shape(format!(
            "patch grid {:?} of {}x{}x{} patches does not match model ({}x{} grid, patch {}, {} channels)",
            patches.grid(),
            patches.patch_size(),
            patches.patch_size(),
            patches.channels(),
            dims.grid_rows,
            dims.grid_cols,
            dims.patch_size,
            dims.channels
        )));
    }
    if let Some(m) = mask {
        if m.token_count() != dims.tokens() {
            return Err(MoodError::Shape(format!(
                "mask over {} tokens, model has {}",
                m.token_count(),
                dims.tokens()
            )));
        }
    }
    Ok(())
}

pub(crate) fn encode(model: &ToyMimModel, patches: &PatchSequence, mask: Option<&MaskSpec>) -> Result<EncoderCache> {
    check_geometry(model, patches, mask)?;
    let t = model.dims.tokens();
    let masked = mask.map_or_else(|| vec![false; t], MaskSpec::flags);

    // Masked tokens never touch the patch embedding, so their pixels cannot
    // reach any output.
    let mut x = Matrix::zeros(t, model.dims.embed_dim);
    for (i, &is_masked) in masked.iter().enumerate() {
        let row = if is_masked {
            model.mask_token.clone()
        } else {
            model.patch_embed.apply(patches.token(i))
        };
        for ((o, r), p) in x.row_mut(i).iter_mut().zip(row).zip(model.pos_embed.row(i)) {
            *o = r + p;
        }
    }

    let mut blocks = Vec::with_capacity(model.blocks.len());
    for blk in &model.blocks {
        let (next, cache) = block_forward(&x, blk, model.dims.heads);
        blocks.push(cache);
        x = next;
    }
    if !x.is_finite() {
        return Err(MoodError::numeric("encoder produced non-finite activations"));
    }
    Ok(EncoderCache {
        masked,
        blocks,
        output: x,
    })
}

/// Backpropagates `d_output` (`T×D`) through the encoder, accumulating into `grad`.
pub(crate) fn encode_backward(
    model: &ToyMimModel,
    patches: &PatchSequence,
    cache: &EncoderCache,
    d_output: Matrix,
    grad: &mut ToyMimModel,
) {
    let mut d = d_output;
    for ((blk, bc), g) in model
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        d = block_backward(&d, blk, bc, model.dims.heads, g);
    }
    for (i, &is_masked) in cache.masked.iter().enumerate() {
        let dr = d.row(i);
        for (g, &v) in grad.pos_embed.row_mut(i).iter_mut().zip(dr) {
            *g += v;
        }
        if is_masked {
            for (g, &v) in grad.mask_token.iter_mut().zip(dr) {
                *g += v;
            }
        } else {
            let tok = patches.token(i);
            for (j, &v) in dr.iter().enumerate() {
                grad.patch_embed.bias[j] += v;
                for (w, &p) in grad.patch_embed.weight.row_mut(j).iter_mut().zip(tok) {
                    *w += v * p;
                }
            }
        }
    }
}

/// Encodes a patch sequence, optionally masked, into a `T×D` latent matrix.
pub fn forward_encoder(model: &ToyMimModel, patches: &PatchSequence, mask: Option<&MaskSpec>) -> Result<Matrix> {
    Ok(encode(model, patches, mask)?.output)
}

/// Mean of the encoder's output tokens.
pub fn pooled_features(model: &ToyMimModel, patches: &PatchSequence) -> Result<Vec<f64>> {
    let out = forward_encoder(model, patches, None)?;
    Ok(mean_rows(&out))
}

pub(crate) fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut pooled = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for (p, &v) in pooled.iter_mut().zip(r) {
            *p += v;
        }
    }
    let n = m.rows() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    pooled
}
