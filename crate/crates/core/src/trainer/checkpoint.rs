use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::diff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "cpcseg-ckpt-v1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptManifest {
    format: String,
    dtype: String,
    model: ModelConfig,
    params: Vec<CkptParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

/// Writes `dir/manifest.json` and `dir/params.bin` (parameters in manifest
/// order as little-endian f32).
pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = &model.params;
    let manifest = CkptManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f32-le".into(),
        model: model.config().clone(),
        params: p
            .ids()
            .map(|id| CkptParam {
                name: p.name(id).to_string(),
                shape: p.value(id).shape().to_vec(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(4 * p.num_elements());
    for id in p.ids() {
        for v in p.value(id).data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(BLOB), &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&dir.join(MANIFEST), json.as_bytes())
}

/// Reads a checkpoint. With `expected` the parameters must fit that
/// configuration instead of the stored one; nothing is returned on any
/// mismatch.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Model<f32>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: CkptManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "format `{}` is not {CHECKPOINT_FORMAT}",
            manifest.format
        )));
    }
    if manifest.dtype != "f32-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let blob = fs::read(dir.join(BLOB))?;
    let mut store = ParamStore::new();
    let mut at = 0;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let bytes = blob.get(at..at + 4 * n).ok_or_else(|| {
            Error::Checkpoint(format!(
                "blob holds {} bytes, parameter `{}` needs bytes {at}..{}",
                blob.len(),
                p.name,
                at + 4 * n
            ))
        })?;
        at += 4 * n;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    if at != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob has {} trailing bytes",
            blob.len() - at
        )));
    }
    let config = expected.cloned().unwrap_or(manifest.model);
    Model::from_params(config, store)
}
