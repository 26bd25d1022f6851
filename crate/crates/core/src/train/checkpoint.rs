//! Single-file checkpoints: `PDSECKPT`, u32 format version, u64 manifest
//! length, JSON manifest, then one `PDSET1` blob per parameter in manifest
//! order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PdseError, Result};
use crate::eval::PostprocessConfig;
use crate::network::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDSECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub input_size: usize,
    pub postprocess: PostprocessConfig,
    pub epoch: usize,
    pub val_map: Option<f64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub store: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(
        model: &ModelConfig,
        store: &ParamStore<T>,
        input_size: usize,
        postprocess: PostprocessConfig,
        epoch: usize,
        val_map: Option<f64>,
    ) -> Self {
        let mut store = store.clone();
        store.zero_grads();
        let params = store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        Self {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                dtype: T::DTYPE.to_string(),
                model: model.clone(),
                input_size,
                postprocess,
                epoch,
                val_map,
                params,
            },
            store,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.manifest.format_version.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, p) in self.store.iter() {
            p.value.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| PdseError::Format("truncated checkpoint header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PdseError::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| PdseError::Format("truncated checkpoint header".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(PdseError::Format(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|_| PdseError::Format("truncated checkpoint header".into()))?;
        let len = u64::from_le_bytes(b8) as usize;
        let start = r.position() as usize;
        let json = bytes
            .get(start..start.saturating_add(len))
            .ok_or_else(|| PdseError::Format("truncated checkpoint manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(json)?;
        if manifest.format_version != version {
            return Err(PdseError::Format("checkpoint header and manifest versions differ".into()));
        }
        if manifest.dtype != T::DTYPE {
            return Err(PdseError::Format(format!(
                "checkpoint holds {} values, expected {}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        r.set_position((start + len) as u64);
        let mut store = ParamStore::new();
        for e in &manifest.params {
            let t: Tensor<T> = Tensor::read_from(&mut r)?;
            if t.shape() != e.shape.as_slice() {
                return Err(PdseError::Format(format!(
                    "parameter {} has shape {:?} in the blob but {:?} in the manifest",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            store.insert(&e.name, t, e.trainable)?;
        }
        if (r.position() as usize) != bytes.len() {
            return Err(PdseError::Format("trailing bytes after the last parameter".into()));
        }
        Ok(Self { manifest, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model for the stored configuration and binds the parameters.
    pub fn into_model(mut self) -> Result<(Model, ParamStore<T>, CheckpointManifest)> {
        let model = Model::bind(&self.manifest.model, &mut self.store)?;
        Ok((model, self.store, self.manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone_blocks: vec![1, 1, 1, 1],
            backbone_widths: vec![4, 8, 8, 8],
            stem_width: 4,
            pyramid_width: 8,
            head_width: 8,
            head_depth: 1,
            se_reduction: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (_, store) = Model::init::<f32>(&tiny(), 5).unwrap();
        let ck = Checkpoint::new(&tiny(), &store, 128, PostprocessConfig::default(), 3, Some(0.25));
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        let (_, s2, m) = back.into_model().unwrap();
        assert_eq!(m.epoch, 3);
        for ((_, p), (_, q)) in store.iter().zip(s2.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn version_and_dtype_checked() {
        let (_, store) = Model::init::<f32>(&tiny(), 5).unwrap();
        let mut bytes = Checkpoint::new(&tiny(), &store, 128, PostprocessConfig::default(), 0, None)
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        bytes[8] = 9;
        let e = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err();
        assert!(e.to_string().contains("version 9"));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..20]).is_err());
    }
}
