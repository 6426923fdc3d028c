//! Checkpointing for variational models, sharing the frequentist archive
//! container.

use super::{AuxVar, CovFactor, MainVar, PriorHyper, ViFamily, ViModel};
use crate::error::{KftError, Result};
use crate::kernels::{KernelParams, RffMap, SideInfo};
use crate::model::checkpoint::{read_archive, write_archive};
use crate::model::{AuxCores, Space, TTCore, Variant};
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct RffMeta {
    count: usize,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViMeta {
    kind: String,
    variant: Variant,
    space: Space,
    family: ViFamily,
    extents: Vec<usize>,
    groups: Vec<Vec<usize>>,
    kernel: Vec<Option<KernelParams>>,
    rff: Vec<Option<RffMeta>>,
    side_modes: Vec<usize>,
    prior: PriorHyper,
    factor_counts: Vec<usize>,
    #[serde(default)]
    extra: serde_json::Value,
}

pub fn save_vi_model(vi: &ViModel, extra: serde_json::Value, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &DenseTensor)> = Vec::new();
    for (g, c) in vi.mean_cores.iter().enumerate() {
        tensors.push((format!("mean.{g}"), &c.tensor));
    }
    match &vi.mean_aux {
        AuxCores::Wlr { weights } => {
            for (g, w) in weights.iter().enumerate() {
                tensors.push((format!("mean_wlr.{g}"), &w.tensor));
            }
        }
        AuxCores::Ls { scale, bias } => {
            for (g, c) in scale.iter().enumerate() {
                tensors.push((format!("mean_ls_scale.{g}"), &c.tensor));
            }
            for (g, c) in bias.iter().enumerate() {
                tensors.push((format!("mean_ls_bias.{g}"), &c.tensor));
            }
        }
        AuxCores::None => {
            return Err(KftError::Checkpoint(
                "variational models carry auxiliary cores".into(),
            ))
        }
    }
    let mut factor_counts = Vec::with_capacity(vi.main_var.len());
    for (g, mv) in vi.main_var.iter().enumerate() {
        match mv {
            MainVar::Univariate { log_var } => {
                factor_counts.push(0);
                tensors.push((format!("logvar.{g}"), log_var));
            }
            MainVar::Multivariate { factors } => {
                factor_counts.push(factors.len());
                for (k, f) in factors.iter().enumerate() {
                    tensors.push((format!("factor_b.{g}.{k}"), &f.b));
                    tensors.push((format!("factor_logd.{g}.{k}"), &f.log_d));
                }
            }
        }
    }
    match &vi.aux_var {
        AuxVar::Wlr { log_var } => {
            for (g, lv) in log_var.iter().enumerate() {
                tensors.push((format!("logvar_wlr.{g}"), lv));
            }
        }
        AuxVar::Ls {
            scale_log_var,
            bias_log_var,
        } => {
            for (g, lv) in scale_log_var.iter().enumerate() {
                tensors.push((format!("logvar_ls_scale.{g}"), lv));
            }
            for (g, lv) in bias_log_var.iter().enumerate() {
                tensors.push((format!("logvar_ls_bias.{g}"), lv));
            }
        }
    }
    for (m, s) in vi.side.iter().enumerate() {
        if let Some(s) = s {
            tensors.push((format!("side.{m}"), &s.features));
        }
    }
    for (m, r) in vi.rff.iter().enumerate() {
        if let Some(r) = r {
            tensors.push((format!("rff_freq.{m}"), &r.frequencies));
        }
    }
    let meta = ViMeta {
        kind: "variational".into(),
        variant: vi.variant,
        space: vi.space,
        family: vi.family,
        extents: vi.extents.clone(),
        groups: vi.mean_cores.iter().map(|c| c.modes.clone()).collect(),
        kernel: vi.kernel_params.clone(),
        rff: vi
            .rff
            .iter()
            .map(|r| {
                r.as_ref().map(|r| RffMeta {
                    count: r.count,
                    seed: r.seed,
                })
            })
            .collect(),
        side_modes: vi
            .side
            .iter()
            .enumerate()
            .filter_map(|(m, s)| s.as_ref().map(|_| m))
            .collect(),
        prior: vi.prior,
        factor_counts,
        extra,
    };
    let meta =
        serde_json::to_value(&meta).map_err(|e| KftError::Checkpoint(format!("meta: {e}")))?;
    write_archive(path, &meta, &tensors)
}

fn take(tensors: &mut BTreeMap<String, DenseTensor>, name: &str) -> Result<DenseTensor> {
    tensors
        .remove(name)
        .ok_or_else(|| KftError::Checkpoint(format!("missing tensor `{name}`")))
}

pub fn load_vi_model(path: &Path) -> Result<(ViModel, serde_json::Value)> {
    let (meta, mut tensors) = read_archive(path)?;
    let meta: ViMeta =
        serde_json::from_value(meta).map_err(|e| KftError::Checkpoint(format!("meta: {e}")))?;
    if meta.kind != "variational" {
        return Err(KftError::Checkpoint(format!(
            "expected a variational checkpoint, found `{}`",
            meta.kind
        )));
    }
    let p = meta.extents.len();
    let mut side: Vec<Option<SideInfo>> = vec![None; p];
    for &m in &meta.side_modes {
        side[m] = Some(SideInfo::new(m, take(&mut tensors, &format!("side.{m}"))?)?);
    }
    let mut rff: Vec<Option<RffMap>> = vec![None; p];
    for (m, r) in meta.rff.iter().enumerate() {
        if let Some(r) = r {
            rff[m] = Some(RffMap {
                frequencies: take(&mut tensors, &format!("rff_freq.{m}"))?,
                count: r.count,
                seed: r.seed,
            });
        }
    }
    let mean_cores: Vec<TTCore> = meta
        .groups
        .iter()
        .enumerate()
        .map(|(g, modes)| {
            Ok(TTCore {
                tensor: take(&mut tensors, &format!("mean.{g}"))?,
                modes: modes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mean_aux = match meta.variant {
        Variant::Wlr => AuxCores::Wlr {
            weights: meta
                .groups
                .iter()
                .enumerate()
                .map(|(g, modes)| {
                    Ok(TTCore {
                        tensor: take(&mut tensors, &format!("mean_wlr.{g}"))?,
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
                        tensor: take(&mut tensors, &format!("mean_ls_scale.{g}"))?,
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
                        tensor: take(&mut tensors, &format!("mean_ls_bias.{g}"))?,
                        modes: modes.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        },
        Variant::Vanilla => {
            return Err(KftError::Checkpoint(
                "variational checkpoints cannot be vanilla".into(),
            ))
        }
    };
    let main_var: Vec<MainVar> = meta
        .factor_counts
        .iter()
        .enumerate()
        .map(|(g, &count)| {
            if count == 0 {
                Ok(MainVar::Univariate {
                    log_var: take(&mut tensors, &format!("logvar.{g}"))?,
                })
            } else {
                Ok(MainVar::Multivariate {
                    factors: (0..count)
                        .map(|k| {
                            Ok(CovFactor {
                                b: take(&mut tensors, &format!("factor_b.{g}.{k}"))?,
                                log_d: take(&mut tensors, &format!("factor_logd.{g}.{k}"))?,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            }
        })
        .collect::<Result<_>>()?;
    let aux_var = match meta.variant {
        Variant::Wlr => AuxVar::Wlr {
            log_var: (0..meta.groups.len())
                .map(|g| take(&mut tensors, &format!("logvar_wlr.{g}")))
                .collect::<Result<_>>()?,
        },
        Variant::Ls => AuxVar::Ls {
            scale_log_var: (0..meta.groups.len())
                .map(|g| take(&mut tensors, &format!("logvar_ls_scale.{g}")))
                .collect::<Result<_>>()?,
            bias_log_var: (0..meta.groups.len())
                .map(|g| take(&mut tensors, &format!("logvar_ls_bias.{g}")))
                .collect::<Result<_>>()?,
        },
        Variant::Vanilla => unreachable!("rejected above"),
    };
    let vi = ViModel {
        variant: meta.variant,
        space: meta.space,
        family: meta.family,
        extents: meta.extents,
        mean_cores,
        mean_aux,
        main_var,
        aux_var,
        side,
        kernel_params: meta.kernel,
        rff,
        prior: meta.prior,
    };
    Ok((vi, meta.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use crate::model::ModelConfig;
    use crate::variational::ViConfig;

    #[test]
    fn vi_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vi.kft");
        let extents = vec![4, 3];
        let side: Vec<Option<SideInfo>> = extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let feats =
                    DenseTensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64 * 0.17).collect())
                        .unwrap();
                Some(SideInfo::new(m, feats).unwrap())
            })
            .collect();
        let mut mc = ModelConfig::plain(Variant::Ls, Space::DualRff, extents, 2);
        mc.kernel = Some(KernelParams::new(KernelKind::Rbf, 0.9).unwrap());
        mc.rff_count = 6;
        let cfg = ViConfig::new(mc, ViFamily::Multivariate, PriorHyper::default());
        let vi = ViModel::init(&cfg, side, 17).unwrap();
        save_vi_model(&vi, serde_json::json!({}), &path).unwrap();
        let (loaded, _) = load_vi_model(&path).unwrap();
        assert_eq!(vi.mean_cores[0].tensor, loaded.mean_cores[0].tensor);
        match (&vi.main_var[0], &loaded.main_var[0]) {
            (MainVar::Multivariate { factors: a }, MainVar::Multivariate { factors: b }) => {
                assert_eq!(a[0].b, b[0].b);
                assert_eq!(a[0].log_d, b[0].log_d);
            }
            _ => panic!("family mismatch"),
        }
        let path2 = dir.path().join("vi2.kft");
        save_vi_model(&loaded, serde_json::json!({}), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
