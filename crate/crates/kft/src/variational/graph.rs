//! Differentiable negative-ELBO graphs for [`ViModel`]: the exact
//! closed-form reconstruction (paired-rank second moments) and every KL
//! term, so both optimization phases get analytic gradients.

use super::{AuxVar, MainVar, ViModel};
use crate::autodiff::{NodeId, Tape};
use crate::error::{KftError, Result};
use crate::kernels::pairwise_distances;
use crate::model::{AuxCores, Space, TTCore};
use crate::tensor::{hadamard, transposed_khatri_rao, Axis, DenseTensor};

/// Handle to one trainable tensor of the variational model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViParamSlot {
    MainMean(usize),
    AuxMeanWlr(usize),
    AuxMeanScale(usize),
    AuxMeanBias(usize),
    Theta(usize),
    MainLogVar(usize),
    FactorB(usize, usize),
    FactorLogD(usize, usize),
    AuxLogVarWlr(usize),
    AuxLogVarScale(usize),
    AuxLogVarBias(usize),
}

pub struct ViGraph {
    pub tape: Tape,
    pub neg_elbo: NodeId,
    pub recon: NodeId,
    pub kl_scaled: NodeId,
    pub params: Vec<(ViParamSlot, NodeId)>,
}

struct Builder<'m> {
    vi: &'m ViModel,
    tape: Tape,
    mean_ids: Vec<NodeId>,
    aux_wlr_ids: Vec<NodeId>,
    aux_scale_ids: Vec<NodeId>,
    aux_bias_ids: Vec<NodeId>,
    main_log_var_ids: Vec<Option<NodeId>>,
    factor_ids: Vec<Vec<(NodeId, NodeId)>>,
    aux_lv_wlr_ids: Vec<NodeId>,
    aux_lv_scale_ids: Vec<NodeId>,
    aux_lv_bias_ids: Vec<NodeId>,
    gram_ids: Vec<Option<NodeId>>,
    params: Vec<(ViParamSlot, NodeId)>,
}

impl<'m> Builder<'m> {
    fn new(vi: &'m ViModel) -> Result<Self> {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mean_ids: Vec<NodeId> = vi
            .mean_cores
            .iter()
            .enumerate()
            .map(|(g, c)| {
                let id = tape.leaf(c.tensor.clone());
                params.push((ViParamSlot::MainMean(g), id));
                id
            })
            .collect();
        let mut aux_wlr_ids = Vec::new();
        let mut aux_scale_ids = Vec::new();
        let mut aux_bias_ids = Vec::new();
        match &vi.mean_aux {
            AuxCores::Wlr { weights } => {
                for (g, w) in weights.iter().enumerate() {
                    let id = tape.leaf(w.tensor.clone());
                    params.push((ViParamSlot::AuxMeanWlr(g), id));
                    aux_wlr_ids.push(id);
                }
            }
            AuxCores::Ls { scale, bias } => {
                for (g, c) in scale.iter().enumerate() {
                    let id = tape.leaf(c.tensor.clone());
                    params.push((ViParamSlot::AuxMeanScale(g), id));
                    aux_scale_ids.push(id);
                }
                for (g, c) in bias.iter().enumerate() {
                    let id = tape.leaf(c.tensor.clone());
                    params.push((ViParamSlot::AuxMeanBias(g), id));
                    aux_bias_ids.push(id);
                }
            }
            AuxCores::None => {
                return Err(KftError::InvalidArgument(
                    "variational models need auxiliary cores".into(),
                ))
            }
        }
        let mut main_log_var_ids = vec![None; vi.mean_cores.len()];
        let mut factor_ids: Vec<Vec<(NodeId, NodeId)>> =
            vec![Vec::new(); vi.mean_cores.len()];
        for (g, mv) in vi.main_var.iter().enumerate() {
            match mv {
                MainVar::Univariate { log_var } => {
                    let id = tape.leaf(log_var.clone());
                    params.push((ViParamSlot::MainLogVar(g), id));
                    main_log_var_ids[g] = Some(id);
                }
                MainVar::Multivariate { factors } => {
                    for (k, f) in factors.iter().enumerate() {
                        let b = tape.leaf(f.b.clone());
                        params.push((ViParamSlot::FactorB(g, k), b));
                        let d = tape.leaf(f.log_d.clone());
                        params.push((ViParamSlot::FactorLogD(g, k), d));
                        factor_ids[g].push((b, d));
                    }
                }
            }
        }
        let mut aux_lv_wlr_ids = Vec::new();
        let mut aux_lv_scale_ids = Vec::new();
        let mut aux_lv_bias_ids = Vec::new();
        match &vi.aux_var {
            AuxVar::Wlr { log_var } => {
                for (g, lv) in log_var.iter().enumerate() {
                    let id = tape.leaf(lv.clone());
                    params.push((ViParamSlot::AuxLogVarWlr(g), id));
                    aux_lv_wlr_ids.push(id);
                }
            }
            AuxVar::Ls {
                scale_log_var,
                bias_log_var,
            } => {
                for (g, lv) in scale_log_var.iter().enumerate() {
                    let id = tape.leaf(lv.clone());
                    params.push((ViParamSlot::AuxLogVarScale(g), id));
                    aux_lv_scale_ids.push(id);
                }
                for (g, lv) in bias_log_var.iter().enumerate() {
                    let id = tape.leaf(lv.clone());
                    params.push((ViParamSlot::AuxLogVarBias(g), id));
                    aux_lv_bias_ids.push(id);
                }
            }
        }
        let p = vi.mode_count();
        let mut gram_ids = vec![None; p];
        if matches!(vi.space, Space::DualExact) {
            for m in 0..p {
                if let (Some(side), Some(kp)) = (&vi.side[m], &vi.kernel_params[m]) {
                    let theta = tape.leaf(DenseTensor::scalar(kp.lengthscale.ln()));
                    params.push((ViParamSlot::Theta(m), theta));
                    let dists = pairwise_distances(&side.features)?;
                    gram_ids[m] = Some(tape.gram(kp.kind, dists, theta)?);
                }
            }
        }
        Ok(Self {
            vi,
            tape,
            mean_ids,
            aux_wlr_ids,
            aux_scale_ids,
            aux_bias_ids,
            main_log_var_ids,
            factor_ids,
            aux_lv_wlr_ids,
            aux_lv_scale_ids,
            aux_lv_bias_ids,
            gram_ids,
            params,
        })
    }

    /// Mean-map kernel application on one covered mode of a node.
    fn apply_kernel(&mut self, node: NodeId, mode: usize, axis: usize) -> Result<NodeId> {
        match (&self.vi.side[mode], self.vi.space) {
            (None, _) => Ok(node),
            (Some(s), Space::Primal) => {
                let d = self.tape.leaf(s.features.clone());
                self.tape.mode_product(node, d, Axis::Index(axis))
            }
            (Some(_), Space::DualExact) => {
                let k = self.gram_ids[mode].expect("gram node");
                self.tape.mode_product(node, k, Axis::Index(axis))
            }
            (Some(_), Space::DualRff) => {
                let phi = self.vi.feature_matrix(mode)?.expect("phi");
                let phi_t = self.tape.leaf(phi.transpose()?);
                let phi_n = self.tape.leaf(phi);
                let inner = self.tape.mode_product(node, phi_t, Axis::Index(axis))?;
                self.tape.mode_product(inner, phi_n, Axis::Index(axis))
            }
        }
    }

    /// Squared-kernel application (K², D², or the Khatri-Rao route).
    fn apply_squared_kernel(&mut self, node: NodeId, mode: usize, axis: usize) -> Result<NodeId> {
        match (&self.vi.side[mode], self.vi.space) {
            (None, _) => Ok(node),
            (Some(s), Space::Primal) => {
                let d2 = self.tape.leaf(hadamard(&s.features, &s.features)?);
                self.tape.mode_product(node, d2, Axis::Index(axis))
            }
            (Some(_), Space::DualExact) => {
                let k = self.gram_ids[mode].expect("gram node");
                let k2 = self.tape.mul(k, k)?;
                self.tape.mode_product(node, k2, Axis::Index(axis))
            }
            (Some(_), Space::DualRff) => {
                let phi = self.vi.feature_matrix(mode)?.expect("phi");
                let tkr = transposed_khatri_rao(&phi, &phi)?;
                let tkr_t = self.tape.leaf(tkr.transpose()?);
                let tkr_n = self.tape.leaf(tkr);
                let inner = self.tape.mode_product(node, tkr_t, Axis::Index(axis))?;
                self.tape.mode_product(inner, tkr_n, Axis::Index(axis))
            }
        }
    }

    /// Lower-triangular 𝔹 node of an exact-space factor.
    fn ltri_factor_node(&mut self, g: usize, k: usize) -> Result<NodeId> {
        let (b, log_d) = self.factor_ids[g][k];
        let bt = self.tape.transpose(b)?;
        let bbt = self.tape.matmul(b, bt)?;
        let lt = self.tape.ltri(bbt)?;
        let d = self.tape.exp(log_d);
        let dm = self.tape.diag_from_vec(d)?;
        self.tape.add(lt, dm)
    }

    /// diag(K Σ Kᵀ) vector node for one covered mode of a multivariate core.
    fn mode_variance_node(&mut self, g: usize, k: usize, mode: usize) -> Result<NodeId> {
        match (&self.vi.side[mode], self.vi.space) {
            (Some(_), Space::DualExact) => {
                let l = self.ltri_factor_node(g, k)?;
                let kn = self.gram_ids[mode].expect("gram node");
                let kl = self.tape.matmul(kn, l)?;
                let sq = self.tape.square(kl)?;
                self.tape.row_sums(sq)
            }
            (Some(_), Space::DualRff) => {
                let (b, log_d) = self.factor_ids[g][k];
                let phi = self.vi.feature_matrix(mode)?.expect("phi");
                let phi_t = self.tape.leaf(phi.transpose()?);
                let phi_n = self.tape.leaf(phi);
                let inner = self.tape.matmul(phi_t, b)?;
                let outer = self.tape.matmul(phi_n, inner)?;
                let sq = self.tape.square(outer)?;
                let rs = self.tape.row_sums(sq)?;
                let two_ld = self.tape.scale(log_d, 2.0);
                let d2 = self.tape.exp(two_ld);
                self.tape.add(rs, d2)
            }
            (None, _) => {
                let l = self.ltri_factor_node(g, k)?;
                let sq = self.tape.square(l)?;
                self.tape.row_sums(sq)
            }
            (Some(_), Space::Primal) => Err(KftError::InvalidArgument(
                "multivariate family needs a dual space".into(),
            )),
        }
    }

    /// Data-indexed variance tensor of one main core's kernelized map.
    fn kernelized_variance_node(&mut self, g: usize) -> Result<NodeId> {
        let core = &self.vi.mean_cores[g];
        match &self.vi.main_var[g] {
            MainVar::Univariate { .. } => {
                let lv = self.main_log_var_ids[g].expect("log var");
                let mut node = self.tape.exp(lv);
                for (k, &m) in core.modes.iter().enumerate() {
                    node = self.apply_squared_kernel(node, m, 1 + k)?;
                }
                Ok(node)
            }
            MainVar::Multivariate { .. } => {
                let rl = core.left_rank();
                let rr = core.right_rank();
                let mut svecs = Vec::with_capacity(core.modes.len());
                for (k, &m) in core.modes.iter().enumerate() {
                    svecs.push(self.mode_variance_node(g, k, m)?);
                }
                let mid = match svecs.len() {
                    1 => svecs[0],
                    2 => {
                        let n1 = self.tape.value(svecs[0]).extent(0);
                        let n2 = self.tape.value(svecs[1]).extent(0);
                        let c1 = self.tape.reshape(svecs[0], vec![n1, 1])?;
                        let c2 = self.tape.reshape(svecs[1], vec![1, n2])?;
                        self.tape.matmul(c1, c2)?
                    }
                    n => {
                        return Err(KftError::InvalidArgument(format!(
                            "cores over {n} modes are not supported"
                        )))
                    }
                };
                self.tape.broadcast_middle(mid, rl, rr)
            }
        }
    }

    /// Mean core A and paired-rank second-moment core G of the main chain.
    fn main_moment_nodes(&mut self, g: usize) -> Result<(NodeId, NodeId)> {
        let core = &self.vi.mean_cores[g];
        let mut mean_k = self.mean_ids[g];
        for (k, &m) in core.modes.iter().enumerate() {
            mean_k = self.apply_kernel(mean_k, m, 1 + k)?;
        }
        let var_k = self.kernelized_variance_node(g)?;
        let (a, c) = match &self.vi.mean_aux {
            AuxCores::Wlr { .. } => {
                let m_aux = self.aux_wlr_ids[g];
                let lv_aux = self.aux_lv_wlr_ids[g];
                let v_aux = self.tape.exp(lv_aux);
                let a = self.tape.mul(m_aux, mean_k)?;
                let mk2 = self.tape.square(mean_k)?;
                let t1 = self.tape.mul(v_aux, mk2)?;
                let m_aux2 = self.tape.square(m_aux)?;
                let m2pv = self.tape.add(m_aux2, v_aux)?;
                let t2 = self.tape.mul(m2pv, var_k)?;
                let c = self.tape.add(t1, t2)?;
                (a, c)
            }
            _ => (mean_k, var_k),
        };
        let gnode = self.tape.rank_pair_square(a, c)?;
        Ok((a, gnode))
    }

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

    fn chain(&mut self, stacks: &[NodeId]) -> Result<NodeId> {
        let mut acc = stacks[0];
        for &s in &stacks[1..] {
            acc = self.tape.bmm(acc, s)?;
        }
        let b = self.tape.value(acc).extent(0);
        self.tape.reshape(acc, vec![b])
    }

    /// First- and second-moment (B)-vectors of the prediction.
    fn predictive_moment_nodes(&mut self, indices: &[Vec<usize>]) -> Result<(NodeId, NodeId)> {
        let groups = self.vi.mean_cores.len();
        let mut a_stacks = Vec::with_capacity(groups);
        let mut g_stacks = Vec::with_capacity(groups);
        for g in 0..groups {
            let (a, gn) = self.main_moment_nodes(g)?;
            let core = &self.vi.mean_cores[g];
            a_stacks.push(self.gather(a, core, indices)?);
            g_stacks.push(self.gather(gn, core, indices)?);
        }
        let m_main = self.chain(&a_stacks)?;
        let m2_main = self.chain(&g_stacks)?;
        match &self.vi.mean_aux {
            AuxCores::Ls { scale, bias } => {
                let mut s_mean = Vec::new();
                let mut s_second = Vec::new();
                let mut b_mean = Vec::new();
                let mut b_second = Vec::new();
                for g in 0..groups {
                    let s_id = self.aux_scale_ids[g];
                    let s_lv = self.aux_lv_scale_ids[g];
                    let s_var = self.tape.exp(s_lv);
                    let s_g = self.tape.rank_pair_square(s_id, s_var)?;
                    s_mean.push(self.gather(s_id, &scale[g], indices)?);
                    s_second.push(self.gather(s_g, &scale[g], indices)?);
                    let b_id = self.aux_bias_ids[g];
                    let b_lv = self.aux_lv_bias_ids[g];
                    let b_var = self.tape.exp(b_lv);
                    let b_g = self.tape.rank_pair_square(b_id, b_var)?;
                    b_mean.push(self.gather(b_id, &bias[g], indices)?);
                    b_second.push(self.gather(b_g, &bias[g], indices)?);
                }
                let ms = self.chain(&s_mean)?;
                let m2s = self.chain(&s_second)?;
                let mb = self.chain(&b_mean)?;
                let m2b = self.chain(&b_second)?;
                let mean = {
                    let sm = self.tape.mul(ms, m_main)?;
                    self.tape.add(sm, mb)?
                };
                let second = {
                    let t1 = self.tape.mul(m2s, m2_main)?;
                    let smb = self.tape.mul(ms, m_main)?;
                    let smb2 = self.tape.mul(smb, mb)?;
                    let t2 = self.tape.scale(smb2, 2.0);
                    let t12 = self.tape.add(t1, t2)?;
                    self.tape.add(t12, m2b)?
                };
                Ok((mean, second))
            }
            _ => Ok((m_main, m2_main)),
        }
    }

    /// Σ-over-entries KL of a diagonal Gaussian against a scalar prior.
    fn kl_univariate_node(
        &mut self,
        mean: NodeId,
        log_var: NodeId,
        prior_mean: f64,
        prior_var: f64,
    ) -> Result<NodeId> {
        let count = self.tape.value(mean).len() as f64;
        let mu_p = self
            .tape
            .leaf(DenseTensor::filled(self.tape.value(mean).shape(), prior_mean));
        let diff = self.tape.sub(mean, mu_p)?;
        let sq = self.tape.square(diff)?;
        let quad_sum = self.tape.sum(sq);
        let quad = self.tape.scale(quad_sum, 1.0 / (2.0 * prior_var));
        let ev = self.tape.exp(log_var);
        let ev_sum = self.tape.sum(ev);
        let ratio = self.tape.scale(ev_sum, 1.0 / (2.0 * prior_var));
        let lv_sum = self.tape.sum(log_var);
        let neg_log = self.tape.scale(lv_sum, -0.5);
        let cst = self.tape.scalar(0.5 * count * (prior_var.ln() - 1.0));
        let a = self.tape.add(quad, ratio)?;
        let b = self.tape.add(a, neg_log)?;
        self.tape.add(b, cst)
    }

    /// KL of one multivariate core against its Kronecker kernelized prior.
    fn kl_multivariate_node(&mut self, g: usize) -> Result<NodeId> {
        let core = &self.vi.mean_cores[g];
        let sp2 = self.vi.prior.var_main;
        let cells = (core.left_rank() * core.right_rank()) as f64;
        let n_total: usize = core
            .modes
            .iter()
            .enumerate()
            .map(|(k, _)| core.tensor.extent(1 + k))
            .product();
        let mu_p = self
            .tape
            .leaf(DenseTensor::filled(core.tensor.shape(), self.vi.prior.mean_main));
        let delta0 = self.tape.sub(self.mean_ids[g], mu_p)?;
        let mut delta = delta0;
        let mut trace: Option<NodeId> = None;
        let mut logdet_terms: Vec<(NodeId, f64)> = Vec::new(); // (node, coefficient)
        let mut logdet_const = 0.0;
        for (k, &m) in core.modes.iter().enumerate() {
            let n = core.tensor.extent(1 + k);
            let weight = n_total as f64 / n as f64;
            let axis = 1 + k;
            let tr_k: NodeId;
            match (&self.vi.side[m], self.vi.space) {
                (Some(_), Space::DualExact) => {
                    let l = self.ltri_factor_node(g, k)?;
                    let kn = self.gram_ids[m].expect("gram");
                    let kl_mat = self.tape.matmul(kn, l)?;
                    let prod = self.tape.mul(kl_mat, l)?;
                    tr_k = self.tape.sum(prod);
                    let ld_k = self.tape.logdet_pd(kn)?;
                    logdet_terms.push((ld_k, -weight));
                    let dg = self.tape.diag_of(l)?;
                    let ln_dg = self.tape.ln(dg);
                    let s = self.tape.sum(ln_dg);
                    logdet_terms.push((s, -2.0 * weight));
                    delta = self.tape.mode_product(delta, kn, Axis::Index(axis))?;
                }
                (Some(_), Space::DualRff) => {
                    let (b, log_d) = self.factor_ids[g][k];
                    let phi = self.vi.feature_matrix(m)?.expect("phi");
                    let phi_t_const = self.tape.leaf(phi.transpose()?);
                    let phi_const = self.tape.leaf(phi.clone());
                    let pb = self.tape.matmul(phi_t_const, b)?;
                    let pb2 = self.tape.square(pb)?;
                    let t_a = self.tape.sum(pb2);
                    let row_norms: Vec<f64> = (0..n)
                        .map(|i| {
                            (0..phi.extent(1))
                                .map(|j| phi.get(&[i, j]).powi(2))
                                .sum()
                        })
                        .collect();
                    let rn = self.tape.leaf(DenseTensor::new(vec![n], row_norms)?);
                    let two_ld = self.tape.scale(log_d, 2.0);
                    let d2 = self.tape.exp(two_ld);
                    let d2rn = self.tape.mul(d2, rn)?;
                    let t_b = self.tape.sum(d2rn);
                    let b2 = self.tape.square(b)?;
                    let b2s = self.tape.sum(b2);
                    let d2s = self.tape.sum(d2);
                    let bd = self.tape.add(b2s, d2s)?;
                    let t_c = self.tape.scale(bd, sp2);
                    let t_ab = self.tape.add(t_a, t_b)?;
                    tr_k = self.tape.add(t_ab, t_c)?;
                    // prior log det is a constant in this phase
                    let i_count = phi.extent(1);
                    let mut inner = phi.transpose()?.matmul(&phi)?;
                    for i in 0..i_count {
                        inner.data_mut()[i * i_count + i] += sp2;
                    }
                    logdet_const -= weight
                        * ((n as f64 - i_count as f64) * sp2.ln()
                            + crate::linalg::logdet_pd(&inner)?);
                    // posterior: 2Σ log d + log det(I_r + Bᵀ D⁻² B)
                    let ld_sum = self.tape.sum(log_d);
                    logdet_terms.push((ld_sum, -2.0 * weight));
                    let neg_ld = self.tape.scale(log_d, -1.0);
                    let dinv = self.tape.exp(neg_ld);
                    let bd_scaled = self.tape.scale_rows(b, dinv)?;
                    let bdt = self.tape.transpose(bd_scaled)?;
                    let small = self.tape.matmul(bdt, bd_scaled)?;
                    let eye = self.tape.leaf(DenseTensor::eye(self.vi.factor_rank_of(g, k)));
                    let small_pd = self.tape.add(small, eye)?;
                    let ld_small = self.tape.logdet_pd(small_pd)?;
                    logdet_terms.push((ld_small, -weight));
                    // precision application: ΦΦᵀ + σ²I on this axis
                    let inner_d = self.tape.mode_product(delta, phi_t_const, Axis::Index(axis))?;
                    let kd = self.tape.mode_product(inner_d, phi_const, Axis::Index(axis))?;
                    let sd = self.tape.scale(delta, sp2);
                    delta = self.tape.add(kd, sd)?;
                }
                (None, _) => {
                    let l = self.ltri_factor_node(g, k)?;
                    let sq = self.tape.square(l)?;
                    let ss = self.tape.sum(sq);
                    tr_k = self.tape.scale(ss, 1.0 / sp2);
                    logdet_const -= weight * (n as f64) * (1.0 / sp2).ln();
                    let dg = self.tape.diag_of(l)?;
                    let ln_dg = self.tape.ln(dg);
                    let s = self.tape.sum(ln_dg);
                    logdet_terms.push((s, -2.0 * weight));
                    delta = self.tape.scale(delta, 1.0 / sp2);
                }
                (Some(_), Space::Primal) => {
                    return Err(KftError::InvalidArgument(
                        "multivariate family needs a dual space".into(),
                    ))
                }
            }
            trace = Some(match trace {
                None => tr_k,
                Some(t) => self.tape.mul(t, tr_k)?,
            });
        }
        let quad_t = self.tape.mul(delta, delta0)?;
        let quad = self.tape.sum(quad_t);
        let trace = trace.expect("at least one mode");
        let t_scaled = self.tape.scale(trace, 0.5 * cells);
        let q_scaled = self.tape.scale(quad, 0.5);
        let mut total = self.tape.add(t_scaled, q_scaled)?;
        let base_const = self
            .tape
            .scalar(0.5 * (cells * logdet_const - cells * n_total as f64));
        total = self.tape.add(total, base_const)?;
        for (node, coeff) in logdet_terms {
            let scaled = self.tape.scale(node, 0.5 * cells * coeff);
            total = self.tape.add(total, scaled)?;
        }
        Ok(total)
    }

    fn kl_total_node(&mut self) -> Result<NodeId> {
        let prior = self.vi.prior;
        let mut total = self.tape.scalar(0.0);
        for g in 0..self.vi.mean_cores.len() {
            let term = match &self.vi.main_var[g] {
                MainVar::Univariate { .. } => {
                    let lv = self.main_log_var_ids[g].expect("log var");
                    self.kl_univariate_node(self.mean_ids[g], lv, prior.mean_main, prior.var_main)?
                }
                MainVar::Multivariate { .. } => self.kl_multivariate_node(g)?,
            };
            total = self.tape.add(total, term)?;
        }
        let aux_pairs: Vec<(NodeId, NodeId)> = match &self.vi.aux_var {
            AuxVar::Wlr { .. } => self
                .aux_wlr_ids
                .iter()
                .zip(&self.aux_lv_wlr_ids)
                .map(|(&a, &b)| (a, b))
                .collect(),
            AuxVar::Ls { .. } => self
                .aux_scale_ids
                .iter()
                .zip(&self.aux_lv_scale_ids)
                .chain(self.aux_bias_ids.iter().zip(&self.aux_lv_bias_ids))
                .map(|(&a, &b)| (a, b))
                .collect(),
        };
        for (mean, lv) in aux_pairs {
            let term = self.kl_univariate_node(mean, lv, prior.mean_aux, prior.var_aux)?;
            total = self.tape.add(total, term)?;
        }
        Ok(total)
    }
}

impl ViModel {
    fn factor_rank_of(&self, g: usize, k: usize) -> usize {
        match &self.main_var[g] {
            MainVar::Multivariate { factors } => factors[k].b.extent(1),
            _ => 0,
        }
    }
}

/// Builds −ELBO = −recon(batch) + (|B|/N)·ΣKL as a differentiable graph.
pub fn build_neg_elbo(
    vi: &ViModel,
    indices: &[Vec<usize>],
    targets: &[f64],
    total_records: usize,
) -> Result<ViGraph> {
    if indices.is_empty() || indices.len() != targets.len() {
        return Err(KftError::InvalidArgument(
            "ELBO needs a nonempty batch with matching targets".into(),
        ));
    }
    let mut b = Builder::new(vi)?;
    let (mean, second) = b.predictive_moment_nodes(indices)?;
    let y = b.tape.leaf(DenseTensor::new(vec![targets.len()], targets.to_vec())?);
    let s2 = vi.prior.noise_var;
    let batch = targets.len() as f64;
    let y2_sum: f64 = targets.iter().map(|v| v * v).sum();
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let ym = b.tape.mul(y, mean)?;
    let ym_sum = b.tape.sum(ym);
    let cross = b.tape.scale(ym_sum, 1.0 / s2);
    let m2_sum = b.tape.sum(second);
    let m2_term = b.tape.scale(m2_sum, -1.0 / (2.0 * s2));
    let cst = b.tape.scalar(batch * log_norm - y2_sum / (2.0 * s2));
    let r1 = b.tape.add(cross, m2_term)?;
    let recon = b.tape.add(r1, cst)?;
    let kl = b.kl_total_node()?;
    let frac = batch / total_records.max(1) as f64;
    let kl_scaled = b.tape.scale(kl, frac);
    let elbo = b.tape.sub(recon, kl_scaled)?;
    let neg_elbo = b.tape.scale(elbo, -1.0);
    Ok(ViGraph {
        tape: b.tape,
        neg_elbo,
        recon,
        kl_scaled,
        params: b.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelKind, KernelParams, SideInfo};
    use crate::model::{ModelConfig, Variant};
    use crate::variational::{PriorHyper, ViConfig, ViFamily};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn build_vi(
        variant: Variant,
        space: Space,
        family: ViFamily,
        extents: Vec<usize>,
        seed: u64,
    ) -> ViModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let side = extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let data: Vec<f64> = (0..n * 2)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                Some(SideInfo::new(m, DenseTensor::new(vec![n, 2], data).unwrap()).unwrap())
            })
            .collect();
        let mut mc = ModelConfig::plain(variant, space, extents, 2);
        mc.kernel = Some(KernelParams::new(KernelKind::Rbf, 1.1).unwrap());
        mc.rff_count = 6;
        let mut cfg = ViConfig::new(
            mc,
            family,
            PriorHyper {
                mean_main: 0.1,
                var_main: 0.8,
                mean_aux: 0.2,
                var_aux: 1.3,
                noise_var: 0.25,
            },
        );
        cfg.init_var = 0.07;
        cfg.factor_rank = 2;
        let mut vi = ViModel::init(&cfg, side, seed).unwrap();
        // generic parameter values so gradients are informative
        match &mut vi.mean_aux {
            AuxCores::Wlr { weights } => {
                for w in weights {
                    for v in w.tensor.data_mut() {
                        *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            AuxCores::Ls { scale, bias } => {
                for c in scale.iter_mut().chain(bias.iter_mut()) {
                    for v in c.tensor.data_mut() {
                        *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            AuxCores::None => {}
        }
        for mv in &mut vi.main_var {
            if let MainVar::Multivariate { factors } = mv {
                for f in factors {
                    for v in f.b.data_mut() {
                        *v = 0.15 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        vi
    }

    #[test]
    fn graph_elbo_matches_plain_elbo() {
        for (variant, space, family) in [
            (Variant::Wlr, Space::DualExact, ViFamily::Univariate),
            (Variant::Wlr, Space::DualExact, ViFamily::Multivariate),
            (Variant::Wlr, Space::DualRff, ViFamily::Univariate),
            (Variant::Wlr, Space::DualRff, ViFamily::Multivariate),
            (Variant::Ls, Space::DualExact, ViFamily::Univariate),
            (Variant::Ls, Space::DualRff, ViFamily::Multivariate),
            (Variant::Wlr, Space::Primal, ViFamily::Univariate),
        ] {
            let vi = build_vi(variant, space, family, vec![4, 3], 11);
            let indices: Vec<Vec<usize>> = vec![vec![0, 0], vec![3, 2], vec![1, 1], vec![2, 0]];
            let targets = vec![0.4, -1.0, 0.0, 0.9];
            let total = 12;
            let graph = build_neg_elbo(&vi, &indices, &targets, total).unwrap();
            let got = -graph.tape.value(graph.neg_elbo).data()[0];
            let want = vi.elbo_with_total(&indices, &targets, total).unwrap();
            assert!(
                (got - want).abs() < 1e-8,
                "{variant:?} {space:?} {family:?}: graph {got} vs plain {want}"
            );
        }
    }

    #[test]
    fn joint_core_elbo_matches_plain() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let extents = vec![3, 3, 2];
        let side: Vec<Option<SideInfo>> = extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let data: Vec<f64> = (0..n * 2)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                Some(SideInfo::new(m, DenseTensor::new(vec![n, 2], data).unwrap()).unwrap())
            })
            .collect();
        let mut mc = ModelConfig::plain(Variant::Wlr, Space::DualExact, extents, 2);
        mc.groups = Some(vec![vec![0], vec![1, 2]]);
        mc.kernel = Some(KernelParams::new(KernelKind::Matern15, 0.9).unwrap());
        let cfg = ViConfig::new(mc, ViFamily::Multivariate, PriorHyper::default());
        let vi = ViModel::init(&cfg, side, 3).unwrap();
        let indices: Vec<Vec<usize>> = vec![vec![0, 1, 0], vec![2, 2, 1], vec![1, 0, 1]];
        let targets = vec![0.2, -0.4, 1.0];
        let graph = build_neg_elbo(&vi, &indices, &targets, 18).unwrap();
        let got = -graph.tape.value(graph.neg_elbo).data()[0];
        let want = vi.elbo_with_total(&indices, &targets, 18).unwrap();
        assert!((got - want).abs() < 1e-8, "graph {got} vs plain {want}");
    }
}
