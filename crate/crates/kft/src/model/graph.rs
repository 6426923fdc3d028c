//! Differentiable objective graphs for [`KftModel`]: the training-time
//! counterpart of the plain forward/regularizer evaluation, built on the
//! gradient tape so every parameter group gets exact reverse-mode gradients.

use super::{AuxCores, KftModel, Space, TTCore};
use crate::autodiff::{NodeId, Tape};
use crate::error::{KftError, Result};
use crate::kernels::pairwise_distances;
use crate::tensor::{Axis, DenseTensor};

/// Handle to one trainable tensor of the frequentist model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    Core(usize),
    WlrWeight(usize),
    LsScale(usize),
    LsBias(usize),
    /// Log-lengthscale of one mode's kernel (dual-exact only).
    LogLengthscale(usize),
}

/// A built objective graph plus the leaf ids of every trainable tensor.
pub struct ModelGraph {
    pub tape: Tape,
    pub objective: NodeId,
    pub mse: NodeId,
    pub reg: NodeId,
    pub prediction: NodeId,
    pub params: Vec<(ParamSlot, NodeId)>,
}

struct Builder<'m> {
    model: &'m KftModel,
    tape: Tape,
    core_ids: Vec<NodeId>,
    wlr_ids: Vec<NodeId>,
    scale_ids: Vec<NodeId>,
    bias_ids: Vec<NodeId>,
    gram_ids: Vec<Option<NodeId>>,
    params: Vec<(ParamSlot, NodeId)>,
}

impl<'m> Builder<'m> {
    fn new(model: &'m KftModel) -> Result<Self> {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let core_ids: Vec<NodeId> = model
            .cores
            .iter()
            .enumerate()
            .map(|(g, c)| {
                let id = tape.leaf(c.tensor.clone());
                params.push((ParamSlot::Core(g), id));
                id
            })
            .collect();
        let mut wlr_ids = Vec::new();
        let mut scale_ids = Vec::new();
        let mut bias_ids = Vec::new();
        match &model.aux {
            AuxCores::None => {}
            AuxCores::Wlr { weights } => {
                for (g, w) in weights.iter().enumerate() {
                    let id = tape.leaf(w.tensor.clone());
                    params.push((ParamSlot::WlrWeight(g), id));
                    wlr_ids.push(id);
                }
            }
            AuxCores::Ls { scale, bias } => {
                for (g, c) in scale.iter().enumerate() {
                    let id = tape.leaf(c.tensor.clone());
                    params.push((ParamSlot::LsScale(g), id));
                    scale_ids.push(id);
                }
                for (g, c) in bias.iter().enumerate() {
                    let id = tape.leaf(c.tensor.clone());
                    params.push((ParamSlot::LsBias(g), id));
                    bias_ids.push(id);
                }
            }
        }
        let p = model.mode_count();
        let mut gram_ids = vec![None; p];
        if matches!(model.space, Space::DualExact) {
            for m in 0..p {
                if let (Some(side), Some(kp)) = (&model.side[m], &model.kernel_params[m]) {
                    let theta = tape.leaf(DenseTensor::scalar(kp.lengthscale.ln()));
                    params.push((ParamSlot::LogLengthscale(m), theta));
                    let dists = pairwise_distances(&side.features)?;
                    gram_ids[m] = Some(tape.gram(kp.kind, dists, theta)?);
                }
            }
        }
        Ok(Self {
            model,
            tape,
            core_ids,
            wlr_ids,
            scale_ids,
            bias_ids,
            gram_ids,
            params,
        })
    }

    /// Side information applied to one group's core node.
    fn kernelized_core(&mut self, g: usize) -> Result<NodeId> {
        let core = &self.model.cores[g];
        let mut node = self.core_ids[g];
        for (k, &m) in core.modes.iter().enumerate() {
            let axis = Axis::Index(1 + k);
            node = match (&self.model.side[m], self.model.space) {
                (None, _) => node,
                (Some(s), Space::Primal) => {
                    let d = self.tape.leaf(s.features.clone());
                    self.tape.mode_product(node, d, axis)?
                }
                (Some(_), Space::DualExact) => {
                    let k_node = self.gram_ids[m].expect("gram node built");
                    self.tape.mode_product(node, k_node, axis)?
                }
                (Some(_), Space::DualRff) => {
                    let phi = self.model.feature_matrix(m)?.expect("phi");
                    let phi_node = self.tape.leaf(phi);
                    self.tape.mode_product(node, phi_node, axis)?
                }
            };
        }
        Ok(node)
    }

    /// Gathered (B, R_left, R_right) slice stack of a core node.
    fn gather(&mut self, node: NodeId, core: &TTCore, indices: &[Vec<usize>]) -> Result<NodeId> {
        match core.modes.len() {
            1 => {
                let m = core.modes[0];
                let col: Vec<usize> = indices.iter().map(|t| t[m]).collect();
                self.tape.gather_mid(node, col)
            }
            2 => {
                let (m1, m2) = (core.modes[0], core.modes[1]);
                let pairs: Vec<(usize, usize)> =
                    indices.iter().map(|t| (t[m1], t[m2])).collect();
                self.tape.gather_mid2(node, pairs)
            }
            n => Err(KftError::InvalidArgument(format!(
                "cores over {n} modes are not supported"
            ))),
        }
    }

    /// Folds gathered stacks into the (B)-vector of chain values.
    fn chain(&mut self, stacks: &[NodeId]) -> Result<NodeId> {
        let mut acc = stacks[0];
        for &s in &stacks[1..] {
            acc = self.tape.bmm(acc, s)?;
        }
        let b = self.tape.value(acc).extent(0);
        self.tape.reshape(acc, vec![b])
    }

    fn prediction(&mut self, indices: &[Vec<usize>]) -> Result<NodeId> {
        let groups = self.model.cores.len();
        let mut main_stacks = Vec::with_capacity(groups);
        for g in 0..groups {
            let w = self.kernelized_core(g)?;
            let mut stack = self.gather(w, &self.model.cores[g], indices)?;
            if matches!(self.model.aux, AuxCores::Wlr { .. }) {
                let w_stack = self.gather(self.wlr_ids[g], &self.model.cores[g], indices)?;
                stack = self.tape.mul(stack, w_stack)?;
            }
            main_stacks.push(stack);
        }
        let main = self.chain(&main_stacks)?;
        match &self.model.aux {
            AuxCores::Ls { scale, bias } => {
                let mut s_stacks = Vec::with_capacity(groups);
                let mut b_stacks = Vec::with_capacity(groups);
                for g in 0..groups {
                    s_stacks.push(self.gather(self.scale_ids[g], &scale[g], indices)?);
                    b_stacks.push(self.gather(self.bias_ids[g], &bias[g], indices)?);
                }
                let s = self.chain(&s_stacks)?;
                let b = self.chain(&b_stacks)?;
                let sm = self.tape.mul(s, main)?;
                self.tape.add(sm, b)
            }
            _ => Ok(main),
        }
    }

    /// ∏ (V'∘V') ×_q 1_{n×n}: per-cell sums broadcast over the data axes.
    fn sum_broadcast(&mut self, node: NodeId) -> Result<NodeId> {
        let order = self.tape.value(node).order();
        let mut out = node;
        for axis in 1..order - 1 {
            let n = self.tape.value(out).extent(axis);
            let ones = self.tape.leaf(DenseTensor::ones(&[n, n]));
            out = self.tape.mode_product(out, ones, Axis::Index(axis))?;
        }
        Ok(out)
    }

    /// Per-cell sums over the data axes, collapsing each middle axis to 1.
    fn cell_sums(&mut self, node: NodeId) -> Result<NodeId> {
        let order = self.tape.value(node).order();
        let mut out = node;
        for axis in 1..order - 1 {
            let n = self.tape.value(out).extent(axis);
            let ones = self.tape.leaf(DenseTensor::ones(&[1, n]));
            out = self.tape.mode_product(out, ones, Axis::Index(axis))?;
        }
        Ok(out)
    }

    fn frobenius(&mut self, node: NodeId) -> Result<NodeId> {
        let sq = self.tape.square(node)?;
        Ok(self.tape.sum(sq))
    }

    fn regularizer(&mut self) -> Result<NodeId> {
        let model = self.model;
        let mut terms: Vec<NodeId> = Vec::new();
        match model.space {
            Space::Primal => {
                for g in 0..model.cores.len() {
                    let f = self.frobenius(self.core_ids[g])?;
                    terms.push(self.tape.scale(f, model.lambda));
                }
                let aux_ids: Vec<NodeId> = self
                    .wlr_ids
                    .iter()
                    .chain(&self.scale_ids)
                    .chain(&self.bias_ids)
                    .copied()
                    .collect();
                for id in aux_ids {
                    let f = self.frobenius(id)?;
                    terms.push(self.tape.scale(f, model.lambda_prime));
                }
            }
            Space::DualExact => {
                for g in 0..model.cores.len() {
                    let vk = self.kernelized_core(g)?;
                    match &model.aux {
                        AuxCores::Wlr { .. } => {
                            let w2 = self.tape.square(self.wlr_ids[g])?;
                            let w2b = self.sum_broadcast(w2)?;
                            let inner = self.tape.mul(w2b, self.core_ids[g])?;
                            let prod = self.tape.mul(vk, inner)?;
                            let s = self.tape.sum(prod);
                            terms.push(self.tape.scale(s, model.lambda));
                        }
                        AuxCores::Ls { .. } => {
                            let prod = self.tape.mul(vk, self.core_ids[g])?;
                            let mid = self.tape.sum(prod);
                            let fs = self.frobenius(self.scale_ids[g])?;
                            let fb = self.frobenius(self.bias_ids[g])?;
                            let a = self.tape.add(fs, mid)?;
                            let b = self.tape.add(a, fb)?;
                            terms.push(self.tape.scale(b, model.lambda));
                        }
                        AuxCores::None => {
                            let prod = self.tape.mul(vk, self.core_ids[g])?;
                            let s = self.tape.sum(prod);
                            terms.push(self.tape.scale(s, model.lambda));
                        }
                    }
                }
            }
            Space::DualRff => {
                for g in 0..model.cores.len() {
                    match &model.aux {
                        AuxCores::Wlr { .. } => {
                            let w2 = self.tape.square(self.wlr_ids[g])?;
                            let w2c = self.cell_sums(w2)?;
                            let v2 = self.tape.square(self.core_ids[g])?;
                            let v2c = self.cell_sums(v2)?;
                            let prod = self.tape.mul(w2c, v2c)?;
                            let s = self.tape.sum(prod);
                            terms.push(self.tape.scale(s, model.lambda));
                        }
                        AuxCores::Ls { .. } => {
                            let fv = self.frobenius(self.core_ids[g])?;
                            let fs = self.frobenius(self.scale_ids[g])?;
                            let fb = self.frobenius(self.bias_ids[g])?;
                            let a = self.tape.add(fs, fv)?;
                            let b = self.tape.add(a, fb)?;
                            terms.push(self.tape.scale(b, model.lambda));
                        }
                        AuxCores::None => {
                            let f = self.frobenius(self.core_ids[g])?;
                            terms.push(self.tape.scale(f, model.lambda));
                        }
                    }
                }
            }
        }
        let mut total = self.tape.scalar(0.0);
        for t in terms {
            total = self.tape.add(total, t)?;
        }
        Ok(total)
    }
}

/// Builds the stochastic objective MSE(batch) + (|B|/N)·Λ as a graph.
pub fn build_objective(
    model: &KftModel,
    indices: &[Vec<usize>],
    targets: &[f64],
    total_records: usize,
) -> Result<ModelGraph> {
    if indices.is_empty() || indices.len() != targets.len() {
        return Err(KftError::InvalidArgument(
            "objective needs a nonempty batch with matching targets".into(),
        ));
    }
    model.check_indices(indices)?;
    let mut b = Builder::new(model)?;
    let prediction = b.prediction(indices)?;
    let y = b.tape.leaf(DenseTensor::new(vec![targets.len()], targets.to_vec())?);
    let resid = b.tape.sub(prediction, y)?;
    let sq = b.tape.square(resid)?;
    let sse = b.tape.sum(sq);
    let mse = b.tape.scale(sse, 1.0 / indices.len() as f64);
    let reg = b.regularizer()?;
    let frac = indices.len() as f64 / total_records.max(1) as f64;
    let scaled = b.tape.scale(reg, frac);
    let objective = b.tape.add(mse, scaled)?;
    Ok(ModelGraph {
        tape: b.tape,
        objective,
        mse,
        reg,
        prediction,
        params: b.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelKind, KernelParams, SideInfo};
    use crate::model::{ModelConfig, Variant};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_side(extents: &[usize], dim: usize, seed: u64) -> Vec<Option<SideInfo>> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Some(SideInfo::new(m, DenseTensor::new(vec![n, dim], data).unwrap()).unwrap())
            })
            .collect()
    }

    #[test]
    fn graph_prediction_matches_plain_forward() {
        let extents = vec![3, 4, 2];
        for (variant, space) in [
            (Variant::Vanilla, Space::Primal),
            (Variant::Wlr, Space::DualExact),
            (Variant::Ls, Space::DualRff),
        ] {
            let mut cfg = ModelConfig::plain(variant, space, extents.clone(), 2);
            cfg.kernel = Some(KernelParams::new(KernelKind::Rbf, 1.0).unwrap());
            cfg.rff_count = 8;
            cfg.lambda = 0.3;
            cfg.lambda_prime = 0.1;
            let model = KftModel::init(&cfg, random_side(&extents, 2, 5), 42).unwrap();
            let indices: Vec<Vec<usize>> =
                vec![vec![0, 0, 0], vec![2, 3, 1], vec![1, 2, 0], vec![2, 0, 1]];
            let targets = vec![0.5, -1.0, 0.25, 2.0];
            let g = build_objective(&model, &indices, &targets, 24).unwrap();
            let plain = model.forward(&indices).unwrap();
            for (a, b) in g.tape.value(g.prediction).data().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            let obj = model.objective(&indices, &targets, 24).unwrap();
            assert!((g.tape.value(g.objective).data()[0] - obj).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_core_graph_matches_plain_forward() {
        let extents = vec![3, 4, 2];
        let mut cfg = ModelConfig::plain(Variant::Wlr, Space::DualExact, extents.clone(), 2);
        cfg.groups = Some(vec![vec![0], vec![1, 2]]);
        cfg.kernel = Some(KernelParams::new(KernelKind::Matern15, 0.8).unwrap());
        let mut side = random_side(&extents, 2, 6);
        side[1] = None; // mixed: one mode of the joint group without side info
        let model = KftModel::init(&cfg, side, 7).unwrap();
        let indices: Vec<Vec<usize>> = vec![vec![0, 1, 0], vec![2, 3, 1], vec![1, 0, 1]];
        let targets = vec![1.0, 0.0, -0.5];
        let g = build_objective(&model, &indices, &targets, 24).unwrap();
        let plain = model.forward(&indices).unwrap();
        for (a, b) in g.tape.value(g.prediction).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
