//! Parameters of the toy patch transformer and their checkpoint form.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Container, Dtype};
use crate::error::{MoodError, Result};
use crate::linalg::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const EMBED_INIT_RANGE: f64 = 0.02;
const CHECKPOINT_KIND: &str = "toy_mim_model";

/// Geometry and width of a [`ToyMimModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub patch_size: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Output width of the reconstruction head: `P²·C` for pixel targets,
    /// the codebook size for codebook targets.
    pub recon_dim: usize,
}

impl ModelDims {
    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.patch_size,
            self.channels,
            self.grid_rows,
            self.grid_cols,
            self.embed_dim,
            self.heads,
            self.recon_dim,
        ];
        if positive.contains(&0) {
            return Err(MoodError::Parameter(format!("model dimensions must be positive: {self:?}")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(MoodError::Parameter(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn xavier(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: xavier(out_dim, in_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Applies the map to a single vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| b + crate::linalg::dot(w, x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// Multi-head self-attention. The key projection has no bias: a key bias
/// shifts every score in a softmax row equally and so never affects output.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Matrix,
    pub value: Linear,
    pub output: Linear,
}

/// Pre-normalization transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// The toy masked-image-modeling encoder with its heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMimModel {
    pub dims: ModelDims,
    pub patch_embed: Linear,
    pub pos_embed: Matrix,
    pub mask_token: Vec<f64>,
    pub blocks: Vec<Block>,
    pub recon_head: Linear,
    pub cls_head: Option<Linear>,
}

/// Borrowed view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn xavier(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data = (0..out_dim * in_dim).map(|_| rng.gen_range(-s..s)).collect();
    Matrix::from_vec(out_dim, in_dim, data).expect("xavier shape")
}

fn small_uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-EMBED_INIT_RANGE..EMBED_INIT_RANGE))
        .collect()
}

impl ToyMimModel {
    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// norm gains, and `U(-0.02, 0.02)` positional and mask embeddings.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.embed_dim;
        let patch_embed = Linear::xavier(d, dims.patch_dim(), &mut rng);
        let pos_embed =
            Matrix::from_vec(dims.tokens(), d, small_uniform(dims.tokens() * d, &mut rng))?;
        let mask_token = small_uniform(d, &mut rng);
        let blocks = (0..dims.depth)
            .map(|_| Block {
                norm1: LayerNorm::new(d),
                attn: Attention {
                    query: Linear::xavier(d, d, &mut rng),
                    key: xavier(d, d, &mut rng),
                    value: Linear::xavier(d, d, &mut rng),
                    output: Linear::xavier(d, d, &mut rng),
                },
                norm2: LayerNorm::new(d),
                fc1: Linear::xavier(dims.ffn_dim(), d, &mut rng),
                fc2: Linear::xavier(d, dims.ffn_dim(), &mut rng),
            })
            .collect();
        let recon_head = Linear::xavier(dims.recon_dim, d, &mut rng);
        Ok(ToyMimModel {
            dims,
            patch_embed,
            pos_embed,
            mask_token,
            blocks,
            recon_head,
            cls_head: None,
        })
    }

    /// Attaches a freshly initialized `classes`-way classifier head.
    pub fn attach_classifier(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(MoodError::Parameter(format!(
                "classifier needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.cls_head = Some(Linear::xavier(classes, self.dims.embed_dim, &mut rng));
        Ok(())
    }

    /// Width of the classifier head, if any.
    pub fn class_count(&self) -> Option<usize> {
        self.cls_head.as_ref().map(Linear::out_dim)
    }

    /// Same structure with every parameter zero; used for gradients and
    /// optimizer state.
    pub fn zeros_like(&self) -> Self {
        let d = self.dims.embed_dim;
        let f = self.dims.ffn_dim();
        ToyMimModel {
            dims: self.dims,
            patch_embed: Linear::zeros(d, self.dims.patch_dim()),
            pos_embed: Matrix::zeros(self.dims.tokens(), d),
            mask_token: vec![0.0; d],
            blocks: self
                .blocks
                .iter()
                .map(|_| Block {
                    norm1: LayerNorm {
                        gamma: vec![0.0; d],
                        beta: vec![0.0; d],
                    },
                    attn: Attention {
                        query: Linear::zeros(d, d),
                        key: Matrix::zeros(d, d),
                        value: Linear::zeros(d, d),
                        output: Linear::zeros(d, d),
                    },
                    norm2: LayerNorm {
                        gamma: vec![0.0; d],
                        beta: vec![0.0; d],
                    },
                    fc1: Linear::zeros(f, d),
                    fc2: Linear::zeros(d, f),
                })
                .collect(),
            recon_head: Linear::zeros(self.recon_head.out_dim(), d),
            cls_head: self.cls_head.as_ref().map(|h| Linear::zeros(h.out_dim(), d)),
        }
    }

    /// Every parameter tensor in a fixed canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        walk(self, &mut |name, shape, data| out.push(ParamRef { name, shape, data }));
        out
    }

    /// Mutable slices of every parameter, in the order of [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.patch_embed.weight.as_mut_slice());
        out.push(&mut self.patch_embed.bias);
        out.push(self.pos_embed.as_mut_slice());
        out.push(&mut self.mask_token);
        for b in &mut self.blocks {
            out.push(&mut b.norm1.gamma);
            out.push(&mut b.norm1.beta);
            out.push(b.attn.query.weight.as_mut_slice());
            out.push(&mut b.attn.query.bias);
            out.push(b.attn.key.as_mut_slice());
            out.push(b.attn.value.weight.as_mut_slice());
            out.push(&mut b.attn.value.bias);
            out.push(b.attn.output.weight.as_mut_slice());
            out.push(&mut b.attn.output.bias);
            out.push(&mut b.norm2.gamma);
            out.push(&mut b.norm2.beta);
            out.push(b.fc1.weight.as_mut_slice());
            out.push(&mut b.fc1.bias);
            out.push(b.fc2.weight.as_mut_slice());
            out.push(&mut b.fc2.bias);
        }
        out.push(self.recon_head.weight.as_mut_slice());
        out.push(&mut self.recon_head.bias);
        if let Some(h) = &mut self.cls_head {
            out.push(h.weight.as_mut_slice());
            out.push(&mut h.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Writes a float32 checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "dims": self.dims,
            "classes": self.class_count(),
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        for p in self.params() {
            c.push(p.name, Dtype::F32, p.shape, p.data.to_vec());
        }
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, CHECKPOINT_KIND)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let dims: ModelDims = c
            .meta
            .get("dims")
            .cloned()
            .ok_or_else(|| MoodError::Format("checkpoint lacks dims".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| MoodError::Format(format!("bad dims: {e}")))
            })?;
        dims.validate().map_err(|e| MoodError::Format(e.to_string()))?;
        let classes = c.meta.get("classes").and_then(|v| v.as_u64()).map(|v| v as usize);
        let mut model = ToyMimModel::new(dims, 0)?;
        if let Some(k) = classes {
            model.attach_classifier(k, 0).map_err(|e| MoodError::Format(e.to_string()))?;
        }
        let layout: Vec<(String, Vec<usize>)> =
            model.params().into_iter().map(|p| (p.name, p.shape)).collect();
        for ((name, shape), dst) in layout.iter().zip(model.params_mut()) {
            dst.copy_from_slice(c.tensor(name, shape)?);
        }
        Ok(model)
    }
}

fn walk<'a>(m: &'a ToyMimModel, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
    let d = m.dims.embed_dim;
    let lin = |f: &mut dyn FnMut(String, Vec<usize>, &'a [f64]), name: &str, l: &'a Linear| {
        f(format!("{name}.weight"), vec![l.out_dim(), l.in_dim()], l.weight.as_slice());
        f(format!("{name}.bias"), vec![l.out_dim()], &l.bias);
    };
    lin(f, "patch_embed", &m.patch_embed);
    f("pos_embed".into(), vec![m.dims.tokens(), d], m.pos_embed.as_slice());
    f("mask_token".into(), vec![d], &m.mask_token);
    for (i, b) in m.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        f(format!("{p}.norm1.gamma"), vec![d], &b.norm1.gamma);
        f(format!("{p}.norm1.beta"), vec![d], &b.norm1.beta);
        lin(f, &format!("{p}.attn.query"), &b.attn.query);
        f(format!("{p}.attn.key.weight"), vec![d, d], b.attn.key.as_slice());
        lin(f, &format!("{p}.attn.value"), &b.attn.value);
        lin(f, &format!("{p}.attn.output"), &b.attn.output);
        f(format!("{p}.norm2.gamma"), vec![d], &b.norm2.gamma);
        f(format!("{p}.norm2.beta"), vec![d], &b.norm2.beta);
        lin(f, &format!("{p}.fc1"), &b.fc1);
        lin(f, &format!("{p}.fc2"), &b.fc2);
    }
    lin(f, "recon_head", &m.recon_head);
    if let Some(h) = &m.cls_head {
        lin(f, "cls_head", h);
    }
}
