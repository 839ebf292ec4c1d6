//! Parameter directories: one `SEMB` blob per matrix plus a JSON manifest
//! naming each matrix and its shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{FusionParams, LoraAdapter};

pub const PARAMS_MANIFEST: &str = "params.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsManifest {
    version: u32,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lora: Option<LoraEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraEntry {
    rank: usize,
    alpha: f64,
}

/// Writes `dir/params.json` and `dir/<name>.semb` for every matrix.
/// Values are stored as `f32`.
pub fn save_params(dir: &Path, params: &FusionParams, adapter: Option<&LoraAdapter>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors: Vec<(&str, &Matrix)> = vec![
        ("w_q", &params.w_q),
        ("w_k", &params.w_k),
        ("w_v", &params.w_v),
        ("w_w", &params.w_w),
    ];
    if let Some(a) = adapter {
        tensors.extend([("lora_base", &a.base), ("lora_a", &a.a), ("lora_b", &a.b)]);
    }
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let file = format!("{name}.semb");
        blob::write(&dir.join(&file), m)?;
        entries.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            file,
        });
    }
    let manifest = ParamsManifest {
        version: blob::VERSION,
        tensors: entries,
        lora: adapter.map(|a| LoraEntry {
            rank: a.rank(),
            alpha: a.alpha(),
        }),
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("params manifest: {e}")))?;
    text.push('\n');
    let path = dir.join(PARAMS_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_params(dir: &Path) -> Result<(FusionParams, Option<LoraAdapter>)> {
    let path = dir.join(PARAMS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ParamsManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.version != blob::VERSION {
        return Err(Error::Format(format!(
            "params manifest version {}",
            manifest.version
        )));
    }
    let tensor = |name: &str| -> Result<Option<Matrix>> {
        let Some(entry) = manifest.tensors.iter().find(|t| t.name == name) else {
            return Ok(None);
        };
        let m = blob::read(&dir.join(&entry.file))?;
        if m.shape() != (entry.rows, entry.cols) {
            return Err(Error::Format(format!(
                "{name}: manifest says {}x{}, blob holds {}x{}",
                entry.rows,
                entry.cols,
                m.rows(),
                m.cols()
            )));
        }
        Ok(Some(m))
    };
    let required = |name: &str| -> Result<Matrix> {
        tensor(name)?.ok_or_else(|| Error::Format(format!("params manifest lacks `{name}`")))
    };
    let params = FusionParams::new(
        required("w_q")?,
        required("w_k")?,
        required("w_v")?,
        required("w_w")?,
    )?;
    let adapter = match manifest.lora {
        None => None,
        Some(LoraEntry { rank, alpha }) => {
            let adapter = LoraAdapter::new(
                required("lora_base")?,
                required("lora_a")?,
                required("lora_b")?,
                alpha,
            )?;
            if adapter.rank() != rank {
                return Err(Error::Format(format!(
                    "manifest rank {rank} but A has {} columns",
                    adapter.rank()
                )));
            }
            Some(adapter)
        }
    };
    Ok((params, adapter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantized(p: &FusionParams) -> FusionParams {
        FusionParams::new(
            blob::quantize(&p.w_q),
            blob::quantize(&p.w_k),
            blob::quantize(&p.w_v),
            blob::quantize(&p.w_w),
        )
        .unwrap()
    }

    #[test]
    fn params_round_trip_with_and_without_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = quantized(&FusionParams::init(FusionDims::default(), &mut rng).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_params(dir.path(), &params, None).unwrap();
        assert_eq!(load_params(dir.path()).unwrap(), (params.clone(), None));

        let a = LoraAdapter::init(6, 8, 4, 8.0, &mut rng).unwrap();
        let a = LoraAdapter::new(
            blob::quantize(a.base()),
            blob::quantize(a.a()),
            a.b().clone(),
            8.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(dir.path(), &params, Some(&a)).unwrap();
        assert_eq!(load_params(dir.path()).unwrap(), (params, Some(a)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params =
            FusionParams::init(FusionDims::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(dir.path(), &params, None).unwrap();
        blob::write(&dir.path().join("w_q.semb"), &Matrix::zeros(2, 2).unwrap()).unwrap();
        assert!(matches!(load_params(dir.path()), Err(Error::Format(_))));
        assert!(matches!(
            load_params(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
