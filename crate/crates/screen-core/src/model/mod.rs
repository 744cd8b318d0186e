//! The vision transformer encoder, DINO projection head, binary
//! classifier head, multi-crop wrapper and the vanilla-CNN baseline.

mod checkpoint;
mod params;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use params::ParamStore;
pub use vit::{AttentionRecord, Capture, RunMode, VitEncoder};

pub use candle_core::DType;



use candle_core::{Device, Tensor};
use candle_nn::{Linear, Module};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub norm_epsilon: f64,
    pub drop_path_rate: f64,
    pub input_side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::vit_s()
    }
}

impl EncoderConfig {
    /// ViT-S configuration: 8x8 patches, 384-dim embeddings, 12 layers,
    /// 6 heads.
    pub fn vit_s() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            norm_epsilon: 1e-6,
            drop_path_rate: 0.1,
            input_side: 224,
        }
    }

    /// Reduced preset for desk-scale runs and CI.
    pub fn desk() -> Self {
        EncoderConfig { embed_dim: 192, depth: 4, heads: 3, ..EncoderConfig::vit_s() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side % self.patch_size != 0 {
            return Err(Error::IndivisibleInput { side: self.input_side, patch: self.patch_size });
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid("embed_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::invalid("drop_path_rate must be in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Prototype count K of the projection head.
    pub dino_out_dim: usize,
    pub dino_hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub cls_hidden_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { dino_out_dim: 4096, dino_hidden_dim: 2048, bottleneck_dim: 256, cls_hidden_dim: 256 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dino_out_dim == 0
            || self.dino_hidden_dim == 0
            || self.bottleneck_dim == 0
            || self.cls_hidden_dim == 0
        {
            return Err(Error::invalid("head dims must be positive"));
        }
        Ok(())
    }
}

struct DinoHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    prototypes: Tensor,
}

impl DinoHead {
    fn new(
        embed_dim: usize,
        cfg: &HeadConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let fc1 = linear(store, "dino_head.fc1", embed_dim, cfg.dino_hidden_dim, rng)?;
        let fc2 = linear(store, "dino_head.fc2", cfg.dino_hidden_dim, cfg.dino_hidden_dim, rng)?;
        let fc3 = linear(store, "dino_head.fc3", cfg.dino_hidden_dim, cfg.bottleneck_dim, rng)?;
        let prototypes = store.normal(
            "dino_head.prototypes",
            &[cfg.dino_out_dim, cfg.bottleneck_dim],
            0.02,
            rng,
        )?;
        Ok(DinoHead { fc1, fc2, fc3, prototypes })
    }

    /// (b, embed) -> (b, K): MLP, unit-normalized bottleneck, then a
    /// weight-normalized prototype layer.
    fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        let x = self.fc1.forward(feat)?.gelu_erf()?;
        let x = self.fc2.forward(&x)?.gelu_erf()?;
        let x = self.fc3.forward(&x)?;
        let x = l2_normalize(&x, 1)?;
        let protos = l2_normalize(&self.prototypes, 1)?;
        Ok(x.matmul(&protos.t()?)?)
    }

    /// Bottleneck output before the prototype layer; exposed for tests.
    fn bottleneck(&self, feat: &Tensor) -> Result<Tensor> {
        let x = self.fc1.forward(feat)?.gelu_erf()?;
        let x = self.fc2.forward(&x)?.gelu_erf()?;
        let x = self.fc3.forward(&x)?;
        l2_normalize(&x, 1)
    }
}

struct ClsHead {
    fc1: Linear,
    fc2: Linear,
}

impl ClsHead {
    fn new(
        embed_dim: usize,
        cfg: &HeadConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        Ok(ClsHead {
            fc1: linear(store, "cls_head.fc1", embed_dim, cfg.cls_hidden_dim, rng)?,
            fc2: linear(store, "cls_head.fc2", cfg.cls_hidden_dim, 1, rng)?,
        })
    }

    /// (b, embed) -> (b,) raw logits; p(tb) = sigmoid(logit).
    fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(feat)?.relu()?)?.squeeze(1)?)
    }
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

fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(dim)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Encoder plus both heads, playing either the teacher or student role.
pub struct Screener {
    pub encoder_cfg: EncoderConfig,
    pub head_cfg: HeadConfig,
    pub role: Role,
    pub store: ParamStore,
    encoder: VitEncoder,
    dino_head: DinoHead,
    cls_head: ClsHead,
}

impl Screener {
    pub fn new(
        encoder_cfg: &EncoderConfig,
        head_cfg: &HeadConfig,
        role: Role,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        head_cfg.validate()?;
        let mut store = ParamStore::new(Device::Cpu, dtype);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let encoder = VitEncoder::new(encoder_cfg, &mut store, &mut rng)?;
        let dino_head = DinoHead::new(encoder_cfg.embed_dim, head_cfg, &mut store, &mut rng)?;
        let cls_head = ClsHead::new(encoder_cfg.embed_dim, head_cfg, &mut store, &mut rng)?;
        Ok(Screener {
            encoder_cfg: encoder_cfg.clone(),
            head_cfg: head_cfg.clone(),
            role,
            store,
            encoder,
            dino_head,
            cls_head,
        })
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn grid_to_tensor(&self, grid: &Grid) -> Result<Tensor> {
        let (h, w) = grid.dims();
        let t = Tensor::from_slice(grid.as_slice(), (1, 1, h, w), self.device())?;
        Ok(t.to_dtype(self.dtype())?)
    }

    /// Stack equally sized grids into one (b, 1, h, w) batch.
    pub fn batch_to_tensor(&self, grids: &[&Grid]) -> Result<Tensor> {
        if grids.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (h, w) = grids[0].dims();
        let mut data = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            if g.dims() != (h, w) {
                return Err(Error::ShapeMismatch("mixed resolutions in one batch".into()));
            }
            data.extend_from_slice(g.as_slice());
        }
        let t = Tensor::from_vec(data, (grids.len(), 1, h, w), self.device())?;
        Ok(t.to_dtype(self.dtype())?)
    }

    /// Token embedding sequence: (b, 1 + (side/patch)^2, embed_dim).
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.patchify(x)
    }

    pub fn encoder_forward(
        &self,
        x: &Tensor,
        mode: &mut RunMode,
        capture: Capture,
    ) -> Result<(Tensor, AttentionRecord)> {
        self.encoder.forward(x, mode, capture)
    }

    pub fn dino_head_forward(&self, feat: &Tensor) -> Result<Tensor> {
        self.dino_head.forward(feat)
    }

    pub fn dino_bottleneck(&self, feat: &Tensor) -> Result<Tensor> {
        self.dino_head.bottleneck(feat)
    }

    pub fn cls_head_forward(&self, feat: &Tensor) -> Result<Tensor> {
        self.cls_head.forward(feat)
    }

    /// Forward one batch through encoder and both heads.
    pub fn forward_batch(&self, x: &Tensor, mode: &mut RunMode) -> Result<(Tensor, Tensor)> {
        let (feat, _) = self.encoder.forward(x, mode, Capture::default())?;
        Ok((self.dino_head.forward(&feat)?, self.cls_head.forward(&feat)?))
    }

    /// Multi-crop wrapper: views of equal resolution are processed
    /// together; outputs preserve the input view order.
    pub fn multi_crop_forward(
        &self,
        views: &[&Grid],
        mode: &mut RunMode,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        if views.is_empty() {
            return Err(Error::invalid("empty view list"));
        }
        // group by resolution in first-seen order
        let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
        for (i, v) in views.iter().enumerate() {
            match groups.iter_mut().find(|(dims, _)| *dims == v.dims()) {
                Some((_, idxs)) => idxs.push(i),
                None => groups.push((v.dims(), vec![i])),
            }
        }
        let mut out: Vec<Option<(Tensor, Tensor)>> = vec![None; views.len()];
        for (_dims, idxs) in groups {
            let grids: Vec<&Grid> = idxs.iter().map(|&i| views[i]).collect();
            let batch = self.batch_to_tensor(&grids)?;
            let (dino, logits) = self.forward_batch(&batch, mode)?;
            for (slot, &i) in idxs.iter().enumerate() {
                out[i] = Some((
                    dino.narrow(0, slot, 1)?.squeeze(0)?,
                    logits.narrow(0, slot, 1)?.squeeze(0)?,
                ));
            }
        }
        Ok(out.into_iter().map(|v| v.expect("all views filled")).collect())
    }

    /// Classification logit for one image in inference mode.
    pub fn predict_logit(&self, grid: &Grid) -> Result<f64> {
        let x = self.grid_to_tensor(grid)?;
        let (feat, _) = self.encoder.forward(&x, &mut RunMode::Infer, Capture::default())?;
        let logit = self.cls_head.forward(&feat)?;
        Ok(logit.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Clone with the same parameter values under a different role.
    pub fn clone_as(&self, role: Role, seed: u64) -> Result<Screener> {
        let twin = Screener::new(&self.encoder_cfg, &self.head_cfg, role, self.dtype(), seed)?;
        twin.store.copy_from(&self.store)?;
        Ok(twin)
    }
}

/// Vanilla CNN baseline: conv(16) -> ReLU -> pool -> conv(32) -> ReLU ->
/// pool -> fully connected.
pub struct BaselineCnn {
    pub store: ParamStore,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    fc: Linear,
    input_side: usize,
}

impl BaselineCnn {
    pub fn new(input_side: usize, dtype: DType, seed: u64) -> Result<Self> {
        if input_side % 4 != 0 {
            return Err(Error::invalid("input side must be divisible by 4"));
        }
        let mut store = ParamStore::new(Device::Cpu, dtype);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let conv1_w = store.normal("cnn.conv1.weight", &[16, 1, 3, 3], 0.1, &mut rng)?;
        let conv1_b = store.zeros("cnn.conv1.bias", &[16])?;
        let conv2_w = store.normal("cnn.conv2.weight", &[32, 16, 3, 3], 0.05, &mut rng)?;
        let conv2_b = store.zeros("cnn.conv2.bias", &[32])?;
        let flat = 32 * (input_side / 4) * (input_side / 4);
        let fc = linear(&mut store, "cnn.fc", flat, 1, &mut rng)?;
        Ok(BaselineCnn { store, conv1_w, conv1_b, conv2_w, conv2_b, fc, input_side })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _c, h, w) = x.dims4()?;
        if h != self.input_side || w != self.input_side {
            return Err(Error::ShapeMismatch(format!("expected {0}x{0} input", self.input_side)));
        }
        let x = x
            .conv2d(&self.conv1_w, 1, 1, 1, 1)?
            .broadcast_add(&self.conv1_b.reshape((1, 16, 1, 1))?)?
            .relu()?
            .max_pool2d(2)?;
        let x = x
            .conv2d(&self.conv2_w, 1, 1, 1, 1)?
            .broadcast_add(&self.conv2_b.reshape((1, 32, 1, 1))?)?
            .relu()?
            .max_pool2d(2)?;
        let flat = x.reshape((b, 32 * (self.input_side / 4) * (self.input_side / 4)))?;
        Ok(self.fc.forward(&flat)?.squeeze(1)?)
    }
}
