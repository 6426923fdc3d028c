//! Single-file checkpoint archive: a JSON manifest (shapes, variant, wiring,
//! seeds, kernel parameters) followed by raw little-endian float64 blobs per
//! named tensor. Round trips are bit-exact.

use super::{AuxCores, KftModel, Space, TTCore, Variant};
use crate::error::{KftError, Result};
use crate::kernels::{KernelParams, RffMap, SideInfo};
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"KFTCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `meta` plus named tensors to one archive file.
pub fn write_archive(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &DenseTensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            count: t.len() as u64,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = Manifest {
        format: "kft-checkpoint".into(),
        version: 1,
        meta: meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| KftError::Checkpoint(format!("manifest encode: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(8 * t.len());
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

/// Reads an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, DenseTensor>)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(KftError::Checkpoint("bad magic bytes".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| KftError::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.format != "kft-checkpoint" || manifest.version != 1 {
        return Err(KftError::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let mut tensors = BTreeMap::new();
    for entry in manifest.tensors {
        let start = entry.offset as usize;
        let end = start + 8 * entry.count as usize;
        if end > blob.len() {
            return Err(KftError::Checkpoint(format!(
                "tensor `{}` extends past end of file",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.insert(entry.name, DenseTensor::new(entry.shape, data)?);
    }
    Ok((manifest.meta, tensors))
}

#[derive(Debug, Serialize, Deserialize)]
struct RffMeta {
    count: usize,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    variant: Variant,
    space: Space,
    extents: Vec<usize>,
    groups: Vec<Vec<usize>>,
    lambda: f64,
    lambda_prime: f64,
    kernel: Vec<Option<KernelParams>>,
    rff: Vec<Option<RffMeta>>,
    side_modes: Vec<usize>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Tensor table for a frequentist model.
fn model_tensors(model: &KftModel) -> Vec<(String, &DenseTensor)> {
    let mut out: Vec<(String, &DenseTensor)> = Vec::new();
    for (g, c) in model.cores.iter().enumerate() {
        out.push((format!("core.{g}"), &c.tensor));
    }
    match &model.aux {
        AuxCores::None => {}
        AuxCores::Wlr { weights } => {
            for (g, w) in weights.iter().enumerate() {
                out.push((format!("wlr.{g}"), &w.tensor));
            }
        }
        AuxCores::Ls { scale, bias } => {
            for (g, c) in scale.iter().enumerate() {
                out.push((format!("ls_scale.{g}"), &c.tensor));
            }
            for (g, c) in bias.iter().enumerate() {
                out.push((format!("ls_bias.{g}"), &c.tensor));
            }
        }
    }
    for (m, s) in model.side.iter().enumerate() {
        if let Some(s) = s {
            out.push((format!("side.{m}"), &s.features));
        }
    }
    for (m, r) in model.rff.iter().enumerate() {
        if let Some(r) = r {
            out.push((format!("rff_freq.{m}"), &r.frequencies));
        }
    }
    out
}

pub fn save_model(model: &KftModel, extra: serde_json::Value, path: &Path) -> Result<()> {
    let meta = ModelMeta {
        kind: "frequentist".into(),
        variant: model.variant,
        space: model.space,
        extents: model.extents.clone(),
        groups: model.cores.iter().map(|c| c.modes.clone()).collect(),
        lambda: model.lambda,
        lambda_prime: model.lambda_prime,
        kernel: model.kernel_params.clone(),
        rff: model
            .rff
            .iter()
            .map(|r| {
                r.as_ref().map(|r| RffMeta {
                    count: r.count,
                    seed: r.seed,
                })
            })
            .collect(),
        side_modes: model
            .side
            .iter()
            .enumerate()
            .filter_map(|(m, s)| s.as_ref().map(|_| m))
            .collect(),
        extra,
    };
    let meta = serde_json::to_value(&meta)
        .map_err(|e| KftError::Checkpoint(format!("meta encode: {e}")))?;
    write_archive(path, &meta, &model_tensors(model))
}

fn take_tensor(tensors: &mut BTreeMap<String, DenseTensor>, name: &str) -> Result<DenseTensor> {
    tensors
        .remove(name)
        .ok_or_else(|| KftError::Checkpoint(format!("missing tensor `{name}`")))
}

/// Loads a frequentist model. Returns the model and the caller's `extra`
/// metadata block.
pub fn load_model(path: &Path) -> Result<(KftModel, serde_json::Value)> {
    let (meta, mut tensors) = read_archive(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)
        .map_err(|e| KftError::Checkpoint(format!("meta decode: {e}")))?;
    if meta.kind != "frequentist" {
        return Err(KftError::Checkpoint(format!(
            "expected a frequentist checkpoint, found `{}`",
            meta.kind
        )));
    }
    let p = meta.extents.len();
    let mut side: Vec<Option<SideInfo>> = vec![None; p];
    for &m in &meta.side_modes {
        let features = take_tensor(&mut tensors, &format!("side.{m}"))?;
        let mut s = SideInfo::new(m, features)?;
        s.kind = match meta.space {
            Space::Primal => crate::kernels::SideInfoKind::Raw,
            Space::DualExact => crate::kernels::SideInfoKind::Gram,
            Space::DualRff => crate::kernels::SideInfoKind::Rff,
        };
        side[m] = Some(s);
    }
    let mut rff: Vec<Option<RffMap>> = vec![None; p];
    for (m, r) in meta.rff.iter().enumerate() {
        if let Some(r) = r {
            rff[m] = Some(RffMap {
                frequencies: take_tensor(&mut tensors, &format!("rff_freq.{m}"))?,
                count: r.count,
                seed: r.seed,
            });
        }
    }
    let cores: Vec<TTCore> = meta
        .groups
        .iter()
        .enumerate()
        .map(|(g, modes)| {
            Ok(TTCore {
                tensor: take_tensor(&mut tensors, &format!("core.{g}"))?,
                modes: modes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let aux = match meta.variant {
        Variant::Vanilla => AuxCores::None,
        Variant::Wlr => AuxCores::Wlr {
            weights: meta
                .groups
                .iter()
                .enumerate()
                .map(|(g, modes)| {
                    Ok(TTCore {
                        tensor: take_tensor(&mut tensors, &format!("wlr.{g}"))?,
                        modes: modes.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        },
        Variant::Ls => AuxCores::Ls {
            scale: meta
                .groups
                .iter()
                .enumerate()
                .map(|(g, modes)| {
                    Ok(TTCore {
                        tensor: take_tensor(&mut tensors, &format!("ls_scale.{g}"))?,
                        modes: modes.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            bias: meta
                .groups
                .iter()
                .enumerate()
                .map(|(g, modes)| {
                    Ok(TTCore {
                        tensor: take_tensor(&mut tensors, &format!("ls_bias.{g}"))?,
                        modes: modes.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        },
    };
    let model = KftModel {
        variant: meta.variant,
        space: meta.space,
        extents: meta.extents,
        cores,
        aux,
        side,
        kernel_params: meta.kernel,
        rff,
        lambda: meta.lambda,
        lambda_prime: meta.lambda_prime,
    };
    model.validate()?;
    Ok((model, meta.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelKind, KernelParams};
    use crate::model::ModelConfig;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kft");
        let extents = vec![4, 3];
        let side = extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let feats =
                    DenseTensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64 * 0.31).collect())
                        .unwrap();
                Some(SideInfo::new(m, feats).unwrap())
            })
            .collect();
        let mut cfg = ModelConfig::plain(Variant::Wlr, Space::DualRff, extents, 2);
        cfg.kernel = Some(KernelParams::new(KernelKind::Matern25, 1.7).unwrap());
        cfg.rff_count = 6;
        let model = KftModel::init(&cfg, side, 99).unwrap();
        save_model(&model, serde_json::json!({"note": 1}), &path).unwrap();
        let (loaded, extra) = load_model(&path).unwrap();
        assert_eq!(extra["note"], 1);
        for (a, b) in model.cores.iter().zip(&loaded.cores) {
            assert_eq!(a.tensor, b.tensor);
        }
        match (&model.aux, &loaded.aux) {
            (AuxCores::Wlr { weights: a }, AuxCores::Wlr { weights: b }) => {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.tensor, y.tensor);
                }
            }
            _ => panic!("aux mismatch"),
        }
        for (a, b) in model.rff.iter().zip(&loaded.rff) {
            assert_eq!(
                a.as_ref().map(|r| &r.frequencies),
                b.as_ref().map(|r| &r.frequencies)
            );
        }
        // byte-identical re-save
        let path2 = dir.path().join("m2.kft");
        save_model(&loaded, serde_json::json!({"note": 1}), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.kft");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_model(&path).is_err());
    }
}
