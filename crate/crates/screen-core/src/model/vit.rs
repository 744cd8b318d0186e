//! Vision transformer encoder with CLS-attention capture and stochastic
//! depth on the residual branches.

use candle_core::{Tensor, D};
use candle_nn::ops::softmax;
use candle_nn::{Linear, Module};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::model::EncoderConfig;

/// Per-forward execution mode. Drop path draws from the training stream.
pub enum RunMode<'a> {
    Infer,
    Train { rng: &'a mut ChaCha20Rng, drop_path: f64 },
}

/// What to record during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    /// Keep full (tokens x tokens) attention for every layer.
    pub full_attention: bool,
}

/// CLS-token attention collected during one forward pass.
pub struct AttentionRecord {
    /// Per layer: (batch, heads, 1 + n_patches) -- the CLS query row.
    pub cls_rows: Vec<Tensor>,
    /// Per layer, only when requested: (batch, heads, tokens, tokens).
    pub full: Vec<Tensor>,
}

impl AttentionRecord {
    /// CLS attention over patch tokens only: (batch, heads, n_patches).
    pub fn cls_over_patches(&self, layer: usize) -> Result<Tensor> {
        let row = self
            .cls_rows
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        let n = row.dim(2)? - 1;
        Ok(row.narrow(2, 1, n)?)
    }

    pub fn layers(&self) -> usize {
        self.cls_rows.len()
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

pub struct VitEncoder {
    cfg: EncoderConfig,
    patch_weight: Tensor,
    patch_bias: Tensor,
    cls_token: Tensor,
    /// (1, 1 + base_patches, embed_dim), laid out for the configured side.
    pos_embed: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

fn linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Linear> {
    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
    let w = store.normal(&format!("{name}.weight"), &[out_dim, in_dim], std, rng)?;
    let b = store.zeros(&format!("{name}.bias"), &[out_dim])?;
    Ok(Linear::new(w, Some(b)))
}

/// LayerNorm spelled out with elementary ops: the fused kernel neither
/// supports f64 nor registers a backward pass.
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

fn layer_norm(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<LayerNorm> {
    let w = store.ones(&format!("{name}.weight"), &[dim])?;
    let b = store.zeros(&format!("{name}.bias"), &[dim])?;
    Ok(LayerNorm { weight: w, bias: b, eps })
}

impl VitEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let n_base = (cfg.input_side / cfg.patch_size).pow(2);
        let patch_weight = store.normal(
            "encoder.patch_embed.weight",
            &[d, 1, cfg.patch_size, cfg.patch_size],
            0.02,
            rng,
        )?;
        let patch_bias = store.zeros("encoder.patch_embed.bias", &[d])?;
        let cls_token = store.normal("encoder.cls_token", &[1, 1, d], 0.02, rng)?;
        let pos_embed = store.normal("encoder.pos_embed", &[1, 1 + n_base, d], 0.02, rng)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.block{i}");
            blocks.push(Block {
                norm1: layer_norm(store, &format!("{p}.norm1"), d, cfg.norm_epsilon)?,
                qkv: linear(store, &format!("{p}.qkv"), d, 3 * d, rng)?,
                proj: linear(store, &format!("{p}.proj"), d, d, rng)?,
                norm2: layer_norm(store, &format!("{p}.norm2"), d, cfg.norm_epsilon)?,
                fc1: linear(store, &format!("{p}.mlp.fc1"), d, 4 * d, rng)?,
                fc2: linear(store, &format!("{p}.mlp.fc2"), 4 * d, d, rng)?,
                heads: cfg.heads,
            });
        }
        let final_norm = layer_norm(store, "encoder.norm", d, cfg.norm_epsilon)?;
        Ok(VitEncoder { cfg: cfg.clone(), patch_weight, patch_bias, cls_token, pos_embed, blocks, final_norm })
    }

    /// Token embedding: patches + CLS token + (interpolated) position
    /// embeddings. Input (batch, 1, side, side), output (batch, 1+n, d).
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _c, h, w) = x.dims4()?;
        if h != w || h % self.cfg.patch_size != 0 {
            return Err(Error::IndivisibleInput { side: h.max(w), patch: self.cfg.patch_size });
        }
        let grid = h / self.cfg.patch_size;
        let n = grid * grid;
        let d = self.cfg.embed_dim;
        let patches = x
            .conv2d(&self.patch_weight, 0, self.cfg.patch_size, 1, 1)?
            .reshape((b, d, n))?
            .transpose(1, 2)?
            .broadcast_add(&self.patch_bias)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let tokens = Tensor::cat(&[&cls.contiguous()?, &patches.contiguous()?], 1)?;
        let pos = self.position_embeddings(grid)?;
        Ok(tokens.broadcast_add(&pos)?)
    }

    /// Position embeddings for a grid x grid patch layout, bicubically
    /// interpolated from the base layout when the sides differ.
    fn position_embeddings(&self, grid: usize) -> Result<Tensor> {
        let base_grid = self.cfg.input_side / self.cfg.patch_size;
        if grid == base_grid {
            return Ok(self.pos_embed.clone());
        }
        let d = self.cfg.embed_dim;
        let n_base = base_grid * base_grid;
        let cls_pos = self.pos_embed.narrow(1, 0, 1)?;
        let patch_pos = self.pos_embed.narrow(1, 1, n_base)?.reshape((n_base, d))?;
        // interpolation is linear in the source values, so it is expressed
        // as a fixed matrix and stays differentiable
        let weights = bicubic_matrix(base_grid, grid);
        let wt = Tensor::from_vec(weights, (grid * grid, n_base), patch_pos.device())?
            .to_dtype(patch_pos.dtype())?;
        let interp = wt.matmul(&patch_pos)?.reshape((1, grid * grid, d))?;
        Ok(Tensor::cat(&[&cls_pos, &interp], 1)?)
    }

    /// Returns the final CLS feature and the attention record.
    pub fn forward(
        &self,
        x: &Tensor,
        mode: &mut RunMode,
        capture: Capture,
    ) -> Result<(Tensor, AttentionRecord)> {
        let mut tokens = self.patchify(x)?;
        let b = tokens.dim(0)?;
        let mut record = AttentionRecord { cls_rows: Vec::new(), full: Vec::new() };
        for block in &self.blocks {
            let (attn_out, cls_row, full) = block.attention(&tokens, capture.full_attention)?;
            record.cls_rows.push(cls_row);
            if let Some(full) = full {
                record.full.push(full);
            }
            tokens = (&tokens + drop_path(attn_out, b, mode)?)?;
            let mlp_out = block.mlp(&tokens)?;
            tokens = (&tokens + drop_path(mlp_out, b, mode)?)?;
        }
        let tokens = self.final_norm.forward(&tokens)?;
        let feat = tokens.narrow(1, 0, 1)?.squeeze(1)?;
        Ok((feat, record))
    }
}

impl Block {
    /// Self-attention; returns (output, CLS row (b,h,1+n), optional full map).
    fn attention(&self, x: &Tensor, keep_full: bool) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let normed = self.norm1.forward(x)?;
        let qkv = self
            .qkv
            .forward(&normed)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = (dh as f64).powf(-0.5);
        let scores = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? * scale)?;
        let attn = softmax(&scores, D::Minus1)?;
        let cls_row = attn.narrow(2, 0, 1)?.squeeze(2)?.detach();
        let full = if keep_full { Some(attn.detach()) } else { None };
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, d))?;
        Ok((self.proj.forward(&out)?, cls_row, full))
    }

    fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        let normed = self.norm2.forward(x)?;
        Ok(self.fc2.forward(&self.fc1.forward(&normed)?.gelu_erf()?)?)
    }
}

/// Stochastic depth: per-sample branch dropping, rescaled by the keep
/// probability. Identity in inference mode.
fn drop_path(branch: Tensor, batch: usize, mode: &mut RunMode) -> Result<Tensor> {
    match mode {
        RunMode::Infer => Ok(branch),
        RunMode::Train { rng, drop_path } => {
            if *drop_path <= 0.0 {
                return Ok(branch);
            }
            let keep = 1.0 - *drop_path;
            let mask: Vec<f32> =
                (0..batch).map(|_| if rng.gen_bool(keep) { (1.0 / keep) as f32 } else { 0.0 }).collect();
            let mask = Tensor::from_vec(mask, (batch, 1, 1), branch.device())?
                .to_dtype(branch.dtype())?;
            Ok(branch.broadcast_mul(&mask)?)
        }
    }
}

/// Row-stochastic matrix mapping a base_grid^2 position layout onto a
/// grid^2 layout via Catmull-Rom bicubic interpolation at half-pixel
/// centers.
fn bicubic_matrix(base_grid: usize, grid: usize) -> Vec<f32> {
    let cubic = |t: f64| -> f64 {
        // Catmull-Rom kernel (a = -0.5)
        let a = -0.5;
        let t = t.abs();
        if t <= 1.0 {
            (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
        } else if t < 2.0 {
            a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
        } else {
            0.0
        }
    };
    let n_base = base_grid * base_grid;
    let scale = base_grid as f64 / grid as f64;
    let mut weights = vec![0f32; grid * grid * n_base];
    for ty in 0..grid {
        let sy = (ty as f64 + 0.5) * scale - 0.5;
        let y0 = sy.floor() as isize;
        for tx in 0..grid {
            let sx = (tx as f64 + 0.5) * scale - 0.5;
            let x0 = sx.floor() as isize;
            let row = (ty * grid + tx) * n_base;
            let mut total = 0.0f64;
            let mut contrib = Vec::with_capacity(16);
            for ky in -1..=2isize {
                let wy = cubic(sy - (y0 + ky) as f64);
                let yy = (y0 + ky).clamp(0, base_grid as isize - 1) as usize;
                for kx in -1..=2isize {
                    let wx = cubic(sx - (x0 + kx) as f64);
                    let xx = (x0 + kx).clamp(0, base_grid as isize - 1) as usize;
                    let w = wy * wx;
                    total += w;
                    contrib.push((yy * base_grid + xx, w));
                }
            }
            for (idx, w) in contrib {
                weights[row + idx] += (w / total) as f32;
            }
        }
    }
    weights
}
