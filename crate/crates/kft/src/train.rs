//! EM-style block-coordinate training: per epoch, each parameter group
//! (cores, then auxiliary cores, then kernel lengthscales) is updated in
//! turn with Adam while every other group stays frozen, sidestepping the
//! mixed partial derivatives a joint first-order step would ignore.

use crate::autodiff::Tape;
use crate::data::CooDataset;
use crate::error::{KftError, Result};
use crate::model::graph::{build_objective, ParamSlot};
use crate::model::{AuxCores, KftModel, Space};
use crate::tensor::DenseTensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Trainable parameter groups, in the fixed per-epoch update order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Cores,
    Aux,
    Kernel,
}

pub const GROUP_ORDER: [ParamGroup; 3] = [ParamGroup::Cores, ParamGroup::Aux, ParamGroup::Kernel];

impl ParamGroup {
    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Cores => "cores",
            ParamGroup::Aux => "aux",
            ParamGroup::Kernel => "kernel",
        }
    }

    fn contains(self, slot: ParamSlot) -> bool {
        matches!(
            (self, slot),
            (ParamGroup::Cores, ParamSlot::Core(_))
                | (ParamGroup::Aux, ParamSlot::WlrWeight(_))
                | (ParamGroup::Aux, ParamSlot::LsScale(_))
                | (ParamGroup::Aux, ParamSlot::LsBias(_))
                | (ParamGroup::Kernel, ParamSlot::LogLengthscale(_))
        )
    }
}

impl KftModel {
    /// The slots a group owns on this model. Lengthscales are trainable only
    /// in dual-exact space; under RFF the sampled frequencies fix them.
    pub fn group_slots(&self, group: ParamGroup) -> Vec<ParamSlot> {
        match group {
            ParamGroup::Cores => (0..self.cores.len()).map(ParamSlot::Core).collect(),
            ParamGroup::Aux => match &self.aux {
                AuxCores::None => Vec::new(),
                AuxCores::Wlr { weights } => {
                    (0..weights.len()).map(ParamSlot::WlrWeight).collect()
                }
                AuxCores::Ls { scale, bias } => (0..scale.len())
                    .map(ParamSlot::LsScale)
                    .chain((0..bias.len()).map(ParamSlot::LsBias))
                    .collect(),
            },
            ParamGroup::Kernel => {
                if !matches!(self.space, Space::DualExact) {
                    return Vec::new();
                }
                (0..self.mode_count())
                    .filter(|&m| self.side[m].is_some() && self.kernel_params[m].is_some())
                    .map(ParamSlot::LogLengthscale)
                    .collect()
            }
        }
    }

    pub fn slot_value(&self, slot: ParamSlot) -> DenseTensor {
        match slot {
            ParamSlot::Core(g) => self.cores[g].tensor.clone(),
            ParamSlot::WlrWeight(g) => match &self.aux {
                AuxCores::Wlr { weights } => weights[g].tensor.clone(),
                _ => unreachable!("WLR slot on non-WLR model"),
            },
            ParamSlot::LsScale(g) => match &self.aux {
                AuxCores::Ls { scale, .. } => scale[g].tensor.clone(),
                _ => unreachable!("LS slot on non-LS model"),
            },
            ParamSlot::LsBias(g) => match &self.aux {
                AuxCores::Ls { bias, .. } => bias[g].tensor.clone(),
                _ => unreachable!("LS slot on non-LS model"),
            },
            ParamSlot::LogLengthscale(m) => DenseTensor::scalar(
                self.kernel_params[m]
                    .expect("kernel params present")
                    .lengthscale
                    .ln(),
            ),
        }
    }

    pub fn set_slot(&mut self, slot: ParamSlot, value: DenseTensor) {
        match slot {
            ParamSlot::Core(g) => self.cores[g].tensor = value,
            ParamSlot::WlrWeight(g) => {
                if let AuxCores::Wlr { weights } = &mut self.aux {
                    weights[g].tensor = value;
                }
            }
            ParamSlot::LsScale(g) => {
                if let AuxCores::Ls { scale, .. } = &mut self.aux {
                    scale[g].tensor = value;
                }
            }
            ParamSlot::LsBias(g) => {
                if let AuxCores::Ls { bias, .. } = &mut self.aux {
                    bias[g].tensor = value;
                }
            }
            ParamSlot::LogLengthscale(m) => {
                if let Some(kp) = &mut self.kernel_params[m] {
                    kp.lengthscale = value.data()[0].exp();
                }
            }
        }
    }
}

/// Adam with the cited defaults; only the learning rate is configurable.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: DenseTensor,
    v: DenseTensor,
    step: usize,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: DenseTensor::zeros(shape),
            v: DenseTensor::zeros(shape),
            step: 0,
        }
    }

    pub fn update(&mut self, param: &mut DenseTensor, grad: &DenseTensor, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let m = ADAM_BETA1 * self.m.data()[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v.data()[i] + (1.0 - ADAM_BETA2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let step = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            param.data_mut()[i] -= step;
        }
    }
}

/// Loop parameters for [`em_train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cap on batches consumed per (group, epoch) pass.
    pub iters_per_epoch: usize,
    pub batch_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// When false, the kernel lengthscale group is skipped.
    #[serde(default = "default_train_kernel")]
    pub train_kernel: bool,
}

fn default_train_kernel() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(KftError::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.iters_per_epoch == 0 {
            return Err(KftError::InvalidArgument(
                "iters_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(KftError::InvalidArgument(format!(
                "batch fraction must be in (0, 1], got {}",
                self.batch_fraction
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(KftError::InvalidArgument("bad learning rate".into()));
        }
        Ok(())
    }
}

/// Uniform without-replacement shuffled batches covering `ids` once,
/// deterministic per seed.
pub fn batch_sampler(ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if ids.is_empty() {
        return Err(KftError::Data("empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(KftError::InvalidArgument(format!(
            "batch fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut shuffled = ids.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let batch = ((ids.len() as f64 * fraction).round() as usize)
        .clamp(1, ids.len());
    Ok(shuffled
        .chunks(batch)
        .map(|c| c.to_vec())
        .collect())
}

fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Exact analytic gradients of the stochastic objective with respect to one
/// parameter group's tensors; everything else is held constant.
pub fn gradients(
    model: &KftModel,
    indices: &[Vec<usize>],
    targets: &[f64],
    total_records: usize,
    group: ParamGroup,
) -> Result<Vec<(ParamSlot, DenseTensor)>> {
    let graph = build_objective(model, indices, targets, total_records)?;
    collect_group_gradients(&graph.tape, graph.objective, &graph.params, group)
}

fn collect_group_gradients(
    tape: &Tape,
    root: crate::autodiff::NodeId,
    params: &[(ParamSlot, crate::autodiff::NodeId)],
    group: ParamGroup,
) -> Result<Vec<(ParamSlot, DenseTensor)>> {
    let grads = tape.backward(root)?;
    let mut out = Vec::new();
    for &(slot, id) in params {
        if !group.contains(slot) {
            continue;
        }
        let g = grads[id_index(id)]
            .clone()
            .unwrap_or_else(|| DenseTensor::zeros(tape.value(id).shape()));
        if !g.all_finite() {
            return Err(KftError::NonFinite(format!("gradient of {slot:?}")));
        }
        out.push((slot, g));
    }
    Ok(out)
}

// NodeId is index-like; autodiff keeps it opaque, so convert through its
// Debug-stable representation.
fn id_index(id: crate::autodiff::NodeId) -> usize {
    id.index()
}

/// One row of the loss trace exported as CSV
/// (epoch, phase, iteration, objective, mse, reg).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub phase: String,
    pub iteration: usize,
    pub objective: f64,
    pub mse: f64,
    pub reg: f64,
}

pub type TrainTrace = Vec<TraceRow>;

pub fn write_trace_csv(trace: &TrainTrace, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KftError::Data(e.to_string()))?;
    w.write_record(["epoch", "phase", "iteration", "objective", "mse", "reg"])
        .map_err(|e| KftError::Data(e.to_string()))?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            r.phase.clone(),
            r.iteration.to_string(),
            format!("{}", r.objective),
            format!("{}", r.mse),
            format!("{}", r.reg),
        ])
        .map_err(|e| KftError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Where training stopped when the objective became non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub epoch: usize,
    pub iteration: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: TrainTrace,
    pub diverged: Option<DivergencePoint>,
}

/// Block-coordinate trainer. For each epoch and each parameter group in
/// fixed order, runs the inner batch loop with Adam updates on that group
/// only. Returns the per-iteration objective trace; a non-finite objective
/// aborts the loop and is reported in the outcome.
pub fn em_train(
    model: &mut KftModel,
    dataset: &CooDataset,
    train_ids: &[usize],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_ids.is_empty() {
        return Err(KftError::Data("empty training split".into()));
    }
    let total = train_ids.len();
    let mut optimizers: HashMap<ParamSlot, OptimizerState> = HashMap::new();
    let mut trace = TrainTrace::new();
    for epoch in 0..config.epochs {
        for (phase_idx, &group) in GROUP_ORDER.iter().enumerate() {
            if matches!(group, ParamGroup::Kernel) && !config.train_kernel {
                continue;
            }
            let slots = model.group_slots(group);
            if slots.is_empty() {
                continue;
            }
            let sampler_seed = splitmix(
                config.seed,
                (epoch as u64) << 8 | phase_idx as u64,
            );
            let batches = batch_sampler(train_ids, config.batch_fraction, sampler_seed)?;
            for (iteration, batch) in batches.iter().take(config.iters_per_epoch).enumerate() {
                let (indices, targets) = dataset.gather(batch);
                let graph = build_objective(model, &indices, &targets, total)?;
                let objective = graph.tape.value(graph.objective).data()[0];
                if !objective.is_finite() {
                    return Ok(TrainReport {
                        trace,
                        diverged: Some(DivergencePoint { epoch, iteration }),
                    });
                }
                trace.push(TraceRow {
                    epoch,
                    phase: group.label().to_string(),
                    iteration,
                    objective,
                    mse: graph.tape.value(graph.mse).data()[0],
                    reg: graph.tape.value(graph.reg).data()[0],
                });
                let grads =
                    collect_group_gradients(&graph.tape, graph.objective, &graph.params, group)?;
                for (slot, grad) in grads {
                    let mut param = model.slot_value(slot);
                    let state = optimizers
                        .entry(slot)
                        .or_insert_with(|| OptimizerState::new(param.shape()));
                    state.update(&mut param, &grad, config.learning_rate);
                    model.set_slot(slot, param);
                }
            }
        }
    }
    Ok(TrainReport {
        trace,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, SideSignal, SynthSpec};
    use crate::eval::r2;
    use crate::model::{ModelConfig, Variant};

    #[test]
    fn sampler_full_fraction_is_single_batch() {
        let ids: Vec<usize> = (0..17).collect();
        let batches = batch_sampler(&ids, 1.0, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 17);
    }

    #[test]
    fn sampler_is_deterministic_and_covering() {
        let ids: Vec<usize> = (0..200).collect();
        let a = batch_sampler(&ids, 0.01, 5).unwrap();
        let b = batch_sampler(&ids, 0.01, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|batch| batch.len() == 2));
        let mut union: Vec<usize> = a.into_iter().flatten().collect();
        union.sort_unstable();
        assert_eq!(union, ids);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_exact() {
        let data = synth(&SynthSpec {
            extents: vec![5, 4],
            rank: 2,
            side_signal: SideSignal::None,
            side_dim: 0,
            noise_sd: 0.1,
            seed: 3,
            n_records: None,
        })
        .unwrap();
        let cfg = ModelConfig::plain(
            Variant::Vanilla,
            crate::model::Space::Primal,
            vec![5, 4],
            2,
        );
        let mut model = KftModel::init(&cfg, vec![None, None], 11).unwrap();
        let before: Vec<DenseTensor> = model.cores.iter().map(|c| c.tensor.clone()).collect();
        let ids: Vec<usize> = (0..data.dataset.len()).collect();
        em_train(
            &mut model,
            &data.dataset,
            &ids,
            &TrainConfig {
                epochs: 2,
                iters_per_epoch: 10,
                batch_fraction: 0.5,
                learning_rate: 0.0,
                seed: 1,
                train_kernel: true,
            },
        )
        .unwrap();
        for (a, b) in before.iter().zip(&model.cores) {
            assert_eq!(a.data(), b.tensor.data());
        }
    }

    #[test]
    fn block_updates_freeze_other_groups() {
        let data = synth(&SynthSpec {
            extents: vec![4, 4],
            rank: 2,
            side_signal: SideSignal::GaussianNoise,
            side_dim: 2,
            noise_sd: 0.05,
            seed: 7,
            n_records: None,
        })
        .unwrap();
        let mut cfg = ModelConfig::plain(
            Variant::Wlr,
            crate::model::Space::DualExact,
            vec![4, 4],
            2,
        );
        cfg.kernel = Some(
            crate::kernels::KernelParams::new(crate::kernels::KernelKind::Rbf, 1.0).unwrap(),
        );
        let mut model = KftModel::init(&cfg, data.side.clone(), 2).unwrap();
        let ids: Vec<usize> = (0..data.dataset.len()).collect();
        let aux_before = model.slot_value(ParamSlot::WlrWeight(0));
        let theta_before = model.slot_value(ParamSlot::LogLengthscale(0));
        // one Cores-only step
        let (indices, targets) = data.dataset.gather(&ids);
        let grads = gradients(&model, &indices, &targets, ids.len(), ParamGroup::Cores).unwrap();
        let mut opt = OptimizerState::new(model.cores[0].tensor.shape());
        let (slot, g) = &grads[0];
        let mut p = model.slot_value(*slot);
        opt.update(&mut p, g, 0.1);
        model.set_slot(*slot, p);
        assert_eq!(
            aux_before.data(),
            model.slot_value(ParamSlot::WlrWeight(0)).data()
        );
        assert_eq!(
            theta_before.data(),
            model.slot_value(ParamSlot::LogLengthscale(0)).data()
        );
    }

    #[test]
    fn planted_vanilla_recovery() {
        let data = synth(&SynthSpec {
            extents: vec![12, 9],
            rank: 2,
            side_signal: SideSignal::None,
            side_dim: 0,
            noise_sd: 0.0,
            seed: 21,
            n_records: None,
        })
        .unwrap();
        let cfg = ModelConfig::plain(
            Variant::Vanilla,
            crate::model::Space::Primal,
            vec![12, 9],
            2,
        );
        let mut model = KftModel::init(&cfg, vec![None, None], 4).unwrap();
        let ids: Vec<usize> = (0..data.dataset.len()).collect();
        let report = em_train(
            &mut model,
            &data.dataset,
            &ids,
            &TrainConfig {
                epochs: 20,
                iters_per_epoch: 40,
                batch_fraction: 0.25,
                learning_rate: 0.05,
                seed: 8,
                train_kernel: true,
            },
        )
        .unwrap();
        assert!(report.diverged.is_none());
        let (indices, targets) = data.dataset.gather(&ids);
        let preds = model.forward(&indices).unwrap();
        let score = r2(&preds, &targets).unwrap();
        assert!(score >= 0.99, "train R² {score}");
    }
}
