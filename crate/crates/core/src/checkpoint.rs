//! Checkpoint file pair: `manifest.json` describing every tensor and
//! `weights.bin` holding little-endian `f32` values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    /// Number of updates applied so far.
    pub updates: u64,
    /// First and second moments, one entry per parameter, named
    /// `m.<param>` / `v.<param>`.
    pub moments: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub stage: String,
    /// Steps completed within `stage`.
    pub step: usize,
    pub params: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<f32>,
}

/// Optimizer moments to store alongside the parameters.
pub struct MomentState<'a> {
    pub updates: u64,
    pub m: &'a [Vec<f64>],
    pub v: &'a [Vec<f64>],
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        config_hash: &str,
        stage: &str,
        step: usize,
        moments: Option<MomentState<'_>>,
    ) -> Self {
        let mut blob = Vec::with_capacity(store.numel());
        let mut params = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            params.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset: blob.len(),
            });
            blob.extend(p.tensor.data().iter().map(|&v| v as f32));
        }
        let optimizer = moments.map(|st| {
            let mut moments = Vec::new();
            for (tag, buf) in [("m", st.m), ("v", st.v)] {
                for ((_, p), vals) in store.iter().zip(buf) {
                    moments.push(TensorEntry {
                        name: format!("{tag}.{}", p.name),
                        shape: p.tensor.shape().to_vec(),
                        offset: blob.len(),
                    });
                    blob.extend(vals.iter().map(|&v| v as f32));
                }
            }
            OptimizerEntry {
                updates: st.updates,
                moments,
            }
        });
        Self {
            manifest: Manifest {
                config_hash: config_hash.to_string(),
                stage: stage.to_string(),
                step,
                params,
                optimizer,
            },
            blob,
        }
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        self.blob.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn values(&self, e: &TensorEntry) -> Result<&[f32]> {
        self.blob.get(e.offset..e.offset + e.len()).ok_or_else(|| {
            Error::Contract(format!("checkpoint entry {} runs past the blob", e.name))
        })
    }

    /// Copies the stored values into `store`, matching by name and shape.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.manifest.params.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, model has {}",
                self.manifest.params.len(),
                store.len()
            )));
        }
        for e in &self.manifest.params {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::Contract(format!("model has no parameter {}", e.name)))?;
            let vals = self.values(e)?;
            let p = store.get_mut(id);
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    e.name,
                    e.shape,
                    p.tensor.shape()
                )));
            }
            for (dst, &src) in p.tensor.data_mut().iter_mut().zip(vals) {
                *dst = f64::from(src);
            }
        }
        Ok(())
    }

    /// Stored optimizer moments in store order, if any.
    pub fn moments(&self, store: &ParamStore) -> Result<Option<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
        let Some(opt) = &self.manifest.optimizer else {
            return Ok(None);
        };
        let find = |name: String| -> Result<Vec<f64>> {
            let e = opt
                .moments
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks moment {name}")))?;
            Ok(self.values(e)?.iter().map(|&v| f64::from(v)).collect())
        };
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            m.push(find(format!("m.{}", p.name))?);
            v.push(find(format!("v.{}", p.name))?);
        }
        Ok(Some((opt.updates, m, v)))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let wpath = dir.join(WEIGHTS_FILE);
        std::fs::write(&wpath, self.blob_bytes()).map_err(|e| Error::io(&wpath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let wpath = dir.join(WEIGHTS_FILE);
        let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format {
                path: wpath,
                detail: "length is not a multiple of 4".into(),
            });
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let expected = manifest
            .params
            .iter()
            .chain(manifest.optimizer.iter().flat_map(|o| &o.moments))
            .map(|e| e.offset + e.len())
            .max()
            .unwrap_or(0);
        if expected != blob.len() {
            return Err(Error::Format {
                path: wpath,
                detail: format!("manifest describes {expected} values, blob has {}", blob.len()),
            });
        }
        Ok(Self { manifest, blob })
    }
}
