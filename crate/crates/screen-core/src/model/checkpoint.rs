//! Single-file checkpoint archive: versioned JSON header followed by a
//! safetensors parameter blob. Writes are atomic (temp file + rename).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::DType;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, HeadConfig, Role, Screener};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SCRNCKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub role: Role,
    /// Training-stage counter: 0 after warmup, k after stage k.
    pub stage: u32,
}

pub fn save_checkpoint(path: &Path, model: &Screener, stage: u32) -> Result<()> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        encoder: model.encoder_cfg.clone(),
        heads: model.head_cfg.clone(),
        role: model.role,
        stage,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let exported = model.store.export()?;
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = exported
        .into_iter()
        .map(|(name, shape, data)| {
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, shape, bytes)
        })
        .collect();
    let views: Vec<(&str, TensorView)> = raw
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok((name.as_str(), view))
        })
        .collect::<Result<_>>()?;
    let blob = safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&(meta_json.len() as u64).to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&meta_json).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&blob).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<(Screener, CheckpointMeta)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut meta_json = vec![0u8; meta_len];
    f.read_exact(&mut meta_json).map_err(|e| Error::io(path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", meta.version)));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&blob).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let model = Screener::new(&meta.encoder, &meta.heads, meta.role, dtype, 0)?;
    let mut loaded = BTreeMap::new();
    for (name, view) in tensors.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        loaded.insert(name.to_string(), (view.shape().to_vec(), data));
    }
    model.store.import(&loaded)?;
    Ok((model, meta))
}
