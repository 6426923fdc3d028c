//! Two-phase Bayesian training: first the means (and lengthscales), then
//! the variances, each phase running epochs of block-coordinate Adam steps
//! on the stochastic negative ELBO with all other blocks frozen.

use super::graph::{build_neg_elbo, ViParamSlot};
use super::{AuxVar, MainVar, ViModel};
use crate::data::CooDataset;
use crate::error::{KftError, Result};
use crate::model::{AuxCores, Space};
use crate::tensor::DenseTensor;
use crate::train::{
    batch_sampler, DivergencePoint, OptimizerState, TraceRow, TrainConfig, TrainTrace,
};
use std::collections::HashMap;

/// Update blocks of the two phases, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViBlock {
    MainMeans,
    AuxMeans,
    Kernel,
    MainVars,
    AuxVars,
}

impl ViBlock {
    pub fn label(self) -> &'static str {
        match self {
            ViBlock::MainMeans => "mean-cores",
            ViBlock::AuxMeans => "mean-aux",
            ViBlock::Kernel => "kernel",
            ViBlock::MainVars => "var-cores",
            ViBlock::AuxVars => "var-aux",
        }
    }

    fn contains(self, slot: ViParamSlot) -> bool {
        matches!(
            (self, slot),
            (ViBlock::MainMeans, ViParamSlot::MainMean(_))
                | (ViBlock::AuxMeans, ViParamSlot::AuxMeanWlr(_))
                | (ViBlock::AuxMeans, ViParamSlot::AuxMeanScale(_))
                | (ViBlock::AuxMeans, ViParamSlot::AuxMeanBias(_))
                | (ViBlock::Kernel, ViParamSlot::Theta(_))
                | (ViBlock::MainVars, ViParamSlot::MainLogVar(_))
                | (ViBlock::MainVars, ViParamSlot::FactorB(_, _))
                | (ViBlock::MainVars, ViParamSlot::FactorLogD(_, _))
                | (ViBlock::AuxVars, ViParamSlot::AuxLogVarWlr(_))
                | (ViBlock::AuxVars, ViParamSlot::AuxLogVarScale(_))
                | (ViBlock::AuxVars, ViParamSlot::AuxLogVarBias(_))
        )
    }
}

pub const MEAN_PHASE: [ViBlock; 3] = [ViBlock::MainMeans, ViBlock::AuxMeans, ViBlock::Kernel];
pub const VAR_PHASE: [ViBlock; 2] = [ViBlock::MainVars, ViBlock::AuxVars];

impl ViModel {
    pub fn block_slots(&self, block: ViBlock) -> Vec<ViParamSlot> {
        let groups = self.mean_cores.len();
        match block {
            ViBlock::MainMeans => (0..groups).map(ViParamSlot::MainMean).collect(),
            ViBlock::AuxMeans => match &self.mean_aux {
                AuxCores::Wlr { weights } => {
                    (0..weights.len()).map(ViParamSlot::AuxMeanWlr).collect()
                }
                AuxCores::Ls { scale, bias } => (0..scale.len())
                    .map(ViParamSlot::AuxMeanScale)
                    .chain((0..bias.len()).map(ViParamSlot::AuxMeanBias))
                    .collect(),
                AuxCores::None => Vec::new(),
            },
            ViBlock::Kernel => {
                if !matches!(self.space, Space::DualExact) {
                    return Vec::new();
                }
                (0..self.mode_count())
                    .filter(|&m| self.side[m].is_some() && self.kernel_params[m].is_some())
                    .map(ViParamSlot::Theta)
                    .collect()
            }
            ViBlock::MainVars => {
                let mut slots = Vec::new();
                for (g, mv) in self.main_var.iter().enumerate() {
                    match mv {
                        MainVar::Univariate { .. } => slots.push(ViParamSlot::MainLogVar(g)),
                        MainVar::Multivariate { factors } => {
                            for k in 0..factors.len() {
                                slots.push(ViParamSlot::FactorB(g, k));
                                slots.push(ViParamSlot::FactorLogD(g, k));
                            }
                        }
                    }
                }
                slots
            }
            ViBlock::AuxVars => match &self.aux_var {
                AuxVar::Wlr { log_var } => (0..log_var.len())
                    .map(ViParamSlot::AuxLogVarWlr)
                    .collect(),
                AuxVar::Ls {
                    scale_log_var,
                    bias_log_var,
                } => (0..scale_log_var.len())
                    .map(ViParamSlot::AuxLogVarScale)
                    .chain((0..bias_log_var.len()).map(ViParamSlot::AuxLogVarBias))
                    .collect(),
            },
        }
    }

    pub fn slot_value(&self, slot: ViParamSlot) -> DenseTensor {
        match slot {
            ViParamSlot::MainMean(g) => self.mean_cores[g].tensor.clone(),
            ViParamSlot::AuxMeanWlr(g) => match &self.mean_aux {
                AuxCores::Wlr { weights } => weights[g].tensor.clone(),
                _ => unreachable!(),
            },
            ViParamSlot::AuxMeanScale(g) => match &self.mean_aux {
                AuxCores::Ls { scale, .. } => scale[g].tensor.clone(),
                _ => unreachable!(),
            },
            ViParamSlot::AuxMeanBias(g) => match &self.mean_aux {
                AuxCores::Ls { bias, .. } => bias[g].tensor.clone(),
                _ => unreachable!(),
            },
            ViParamSlot::Theta(m) => DenseTensor::scalar(
                self.kernel_params[m].expect("kernel params").lengthscale.ln(),
            ),
            ViParamSlot::MainLogVar(g) => match &self.main_var[g] {
                MainVar::Univariate { log_var } => log_var.clone(),
                _ => unreachable!(),
            },
            ViParamSlot::FactorB(g, k) => match &self.main_var[g] {
                MainVar::Multivariate { factors } => factors[k].b.clone(),
                _ => unreachable!(),
            },
            ViParamSlot::FactorLogD(g, k) => match &self.main_var[g] {
                MainVar::Multivariate { factors } => factors[k].log_d.clone(),
                _ => unreachable!(),
            },
            ViParamSlot::AuxLogVarWlr(g) => match &self.aux_var {
                AuxVar::Wlr { log_var } => log_var[g].clone(),
                _ => unreachable!(),
            },
            ViParamSlot::AuxLogVarScale(g) => match &self.aux_var {
                AuxVar::Ls { scale_log_var, .. } => scale_log_var[g].clone(),
                _ => unreachable!(),
            },
            ViParamSlot::AuxLogVarBias(g) => match &self.aux_var {
                AuxVar::Ls { bias_log_var, .. } => bias_log_var[g].clone(),
                _ => unreachable!(),
            },
        }
    }

    pub fn set_slot(&mut self, slot: ViParamSlot, value: DenseTensor) {
        match slot {
            ViParamSlot::MainMean(g) => self.mean_cores[g].tensor = value,
            ViParamSlot::AuxMeanWlr(g) => {
                if let AuxCores::Wlr { weights } = &mut self.mean_aux {
                    weights[g].tensor = value;
                }
            }
            ViParamSlot::AuxMeanScale(g) => {
                if let AuxCores::Ls { scale, .. } = &mut self.mean_aux {
                    scale[g].tensor = value;
                }
            }
            ViParamSlot::AuxMeanBias(g) => {
                if let AuxCores::Ls { bias, .. } = &mut self.mean_aux {
                    bias[g].tensor = value;
                }
            }
            ViParamSlot::Theta(m) => {
                if let Some(kp) = &mut self.kernel_params[m] {
                    kp.lengthscale = value.data()[0].exp();
                }
            }
            ViParamSlot::MainLogVar(g) => {
                if let MainVar::Univariate { log_var } = &mut self.main_var[g] {
                    *log_var = value;
                }
            }
            ViParamSlot::FactorB(g, k) => {
                if let MainVar::Multivariate { factors } = &mut self.main_var[g] {
                    factors[k].b = value;
                }
            }
            ViParamSlot::FactorLogD(g, k) => {
                if let MainVar::Multivariate { factors } = &mut self.main_var[g] {
                    factors[k].log_d = value;
                }
            }
            ViParamSlot::AuxLogVarWlr(g) => {
                if let AuxVar::Wlr { log_var } = &mut self.aux_var {
                    log_var[g] = value;
                }
            }
            ViParamSlot::AuxLogVarScale(g) => {
                if let AuxVar::Ls { scale_log_var, .. } = &mut self.aux_var {
                    scale_log_var[g] = value;
                }
            }
            ViParamSlot::AuxLogVarBias(g) => {
                if let AuxVar::Ls { bias_log_var, .. } = &mut self.aux_var {
                    bias_log_var[g] = value;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViTrainReport {
    pub trace: TrainTrace,
    pub diverged: Option<DivergencePoint>,
}

fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Algorithm-2-style trainer: an outer pass over {means, Θ} then
/// {variances}; within each, per-epoch block passes with Adam updates on
/// the negative ELBO. The trace records (−ELBO, −recon, scaled KL).
pub fn vi_train(
    vi: &mut ViModel,
    dataset: &CooDataset,
    train_ids: &[usize],
    config: &TrainConfig,
) -> Result<ViTrainReport> {
    config.validate()?;
    if train_ids.is_empty() {
        return Err(KftError::Data("empty training split".into()));
    }
    let total = train_ids.len();
    let mut optimizers: HashMap<ViParamSlot, OptimizerState> = HashMap::new();
    let mut trace = TrainTrace::new();
    for (phase_no, phase) in [&MEAN_PHASE[..], &VAR_PHASE[..]].iter().enumerate() {
        for epoch in 0..config.epochs {
            for (block_no, &block) in phase.iter().enumerate() {
                let slots = vi.block_slots(block);
                if slots.is_empty() {
                    continue;
                }
                let sampler_seed = splitmix(
                    config.seed,
                    ((phase_no as u64) << 32) | ((epoch as u64) << 8) | block_no as u64,
                );
                let batches = batch_sampler(train_ids, config.batch_fraction, sampler_seed)?;
                for (iteration, batch) in
                    batches.iter().take(config.iters_per_epoch).enumerate()
                {
                    let (indices, targets) = dataset.gather(batch);
                    let graph = build_neg_elbo(vi, &indices, &targets, total)?;
                    let objective = graph.tape.value(graph.neg_elbo).data()[0];
                    if !objective.is_finite() {
                        return Ok(ViTrainReport {
                            trace,
                            diverged: Some(DivergencePoint { epoch, iteration }),
                        });
                    }
                    trace.push(TraceRow {
                        epoch: phase_no * config.epochs + epoch,
                        phase: block.label().to_string(),
                        iteration,
                        objective,
                        mse: -graph.tape.value(graph.recon).data()[0],
                        reg: graph.tape.value(graph.kl_scaled).data()[0],
                    });
                    let grads = graph.tape.backward(graph.neg_elbo)?;
                    for &(slot, id) in &graph.params {
                        if !block.contains(slot) {
                            continue;
                        }
                        let g = match &grads[id.index()] {
                            Some(g) => g.clone(),
                            None => continue,
                        };
                        if !g.all_finite() {
                            return Err(KftError::NonFinite(format!("gradient of {slot:?}")));
                        }
                        let mut param = vi.slot_value(slot);
                        let state = optimizers
                            .entry(slot)
                            .or_insert_with(|| OptimizerState::new(param.shape()));
                        state.update(&mut param, &g, config.learning_rate);
                        vi.set_slot(slot, param);
                    }
                }
            }
        }
    }
    Ok(ViTrainReport {
        trace,
        diverged: None,
    })
}
