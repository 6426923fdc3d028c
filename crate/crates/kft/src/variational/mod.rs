//! Variational Bayesian layer: Gaussian mean-field posteriors over the
//! chain cores (univariate per entry, or multivariate with Kronecker
//! covariance factors per mode), closed-form reconstruction and KL terms,
//! posterior sampling and calibration metrics.
//!
//! Reconstruction second moments are computed exactly with a paired-rank
//! chain: for independent cores with per-entry mean A and variance C, the
//! core G[(r,q), i, (r',q')] = A[r,i,r']·A[q,i,q'] + δδ·C[r,i,r'] chains to
//! E[(∏ ×₋₁ W)²]. At a single mode this reduces to the familiar four-term
//! mean/variance expansion.

pub mod checkpoint;
pub mod graph;
mod train;

pub use train::{vi_train, ViTrainReport};

use crate::error::{KftError, Result};
use crate::kernels::{gram, rff_feature_matrix, KernelParams, RffMap, SideInfo};
use crate::linalg;
use crate::model::{apply_kernels, chain_entry, AuxCores, KernelOp, ModelConfig, Space, TTCore, Variant};
use crate::tensor::{hadamard, mode_product, transposed_khatri_rao, Axis, DenseTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViFamily {
    Univariate,
    Multivariate,
}

/// Prior and likelihood hyperparameters. In the multivariate RFF prior,
/// `var_main` is the σ² ridge added to ΦΦᵀ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    pub mean_main: f64,
    pub var_main: f64,
    pub mean_aux: f64,
    pub var_aux: f64,
    pub noise_var: f64,
}

impl PriorHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.var_main > 0.0) || !(self.var_aux > 0.0) || !(self.noise_var > 0.0) {
            return Err(KftError::InvalidArgument(
                "prior and noise variances must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PriorHyper {
    fn default() -> Self {
        Self {
            mean_main: 0.0,
            var_main: 1.0,
            mean_aux: 0.0,
            var_aux: 1.0,
            noise_var: 0.1,
        }
    }
}

/// One mode's covariance factor of a multivariate core: the implied
/// per-mode covariance is 𝔹𝔹ᵀ with 𝔹 = ltri(BBᵀ) + diag(d) in exact mode,
/// or BBᵀ + diag(d)² in RFF mode. d is stored in log.
#[derive(Debug, Clone, PartialEq)]
pub struct CovFactor {
    pub b: DenseTensor,
    pub log_d: DenseTensor,
}

impl CovFactor {
    pub fn rows(&self) -> usize {
        self.b.extent(0)
    }

    pub fn d(&self) -> DenseTensor {
        self.log_d.map(f64::exp)
    }

    /// Lower-triangular 𝔹 = ltri(BBᵀ) + diag(d) (exact-kernel mode).
    pub fn ltri_factor(&self) -> Result<DenseTensor> {
        let n = self.rows();
        let bbt = self.b.matmul(&self.b.transpose()?)?;
        let mut l = bbt;
        let d = self.d();
        for i in 0..n {
            for j in (i + 1)..n {
                l.data_mut()[i * n + j] = 0.0;
            }
            l.data_mut()[i * n + i] += d.data()[i];
        }
        Ok(l)
    }

    /// A matrix F with FFᵀ equal to the mode covariance, used for sampling.
    pub fn sampling_factor(&self, rff: bool) -> Result<DenseTensor> {
        if !rff {
            return self.ltri_factor();
        }
        // [B | diag(d)]: covariance BBᵀ + D².
        let n = self.rows();
        let r = self.b.extent(1);
        let d = self.d();
        let mut f = DenseTensor::zeros(&[n, r + n]);
        for i in 0..n {
            for j in 0..r {
                f.data_mut()[i * (r + n) + j] = self.b.data()[i * r + j];
            }
            f.data_mut()[i * (r + n) + r + i] = d.data()[i];
        }
        Ok(f)
    }

    /// Explicit per-mode covariance (test- and oracle-sized inputs only).
    pub fn covariance(&self, rff: bool) -> Result<DenseTensor> {
        if rff {
            let mut c = self.b.matmul(&self.b.transpose()?)?;
            let n = self.rows();
            let d = self.d();
            for i in 0..n {
                c.data_mut()[i * n + i] += d.data()[i] * d.data()[i];
            }
            Ok(c)
        } else {
            let l = self.ltri_factor()?;
            l.matmul(&l.transpose()?)
        }
    }
}

/// Posterior variance state of one main core.
#[derive(Debug, Clone, PartialEq)]
pub enum MainVar {
    /// Per-entry log-variance, same shape as the mean core.
    Univariate { log_var: DenseTensor },
    /// Per-mode Kronecker covariance factors, shared across rank cells.
    Multivariate { factors: Vec<CovFactor> },
}

/// Per-entry log-variances of the (always univariate) auxiliary cores.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxVar {
    Wlr { log_var: Vec<DenseTensor> },
    Ls {
        scale_log_var: Vec<DenseTensor>,
        bias_log_var: Vec<DenseTensor>,
    },
}

/// Variational model: mean cores (the "mean chain" doubles as the point
/// predictor), posterior variance state, wiring and prior hyperparameters.
#[derive(Debug, Clone)]
pub struct ViModel {
    pub variant: Variant,
    pub space: Space,
    pub family: ViFamily,
    pub extents: Vec<usize>,
    pub mean_cores: Vec<TTCore>,
    pub mean_aux: AuxCores,
    pub main_var: Vec<MainVar>,
    pub aux_var: AuxVar,
    pub side: Vec<Option<SideInfo>>,
    pub kernel_params: Vec<Option<KernelParams>>,
    pub rff: Vec<Option<RffMap>>,
    pub prior: PriorHyper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViConfig {
    pub model: ModelConfig,
    pub family: ViFamily,
    /// Column count of the multivariate covariance factors B_q.
    pub factor_rank: usize,
    pub prior: PriorHyper,
    /// Initial per-entry posterior variance.
    pub init_var: f64,
}

impl ViConfig {
    pub fn new(model: ModelConfig, family: ViFamily, prior: PriorHyper) -> Self {
        Self {
            model,
            family,
            factor_rank: 2,
            prior,
            init_var: 1e-2,
        }
    }
}

fn gaussian(shape: &[usize], sd: f64, rng: &mut ChaCha20Rng) -> DenseTensor {
    let n: usize = shape.iter().product();
    DenseTensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * sd
            })
            .collect(),
    )
    .expect("valid shape")
}

impl ViModel {
    /// Builds and initializes the variational model. Mean cores follow the
    /// frequentist initialization; posterior variances start at `init_var`.
    ///
    /// Unlike the frequentist RFF wiring, cores stay data-indexed in every
    /// dual space: the feature map enters through ΦΦᵀ applications.
    pub fn init(config: &ViConfig, side: Vec<Option<SideInfo>>, seed: u64) -> Result<Self> {
        config.prior.validate()?;
        if matches!(config.model.variant, Variant::Vanilla) {
            return Err(KftError::InvalidArgument(
                "the Bayesian layer requires the WLR or LS variant".into(),
            ));
        }
        if matches!(config.family, ViFamily::Multivariate)
            && matches!(config.model.space, Space::Primal)
        {
            return Err(KftError::InvalidArgument(
                "multivariate mean-field needs a dual (kernelized) space".into(),
            ));
        }
        if !(config.init_var > 0.0) {
            return Err(KftError::InvalidArgument("init_var must be positive".into()));
        }
        let p = config.model.extents.len();
        if side.len() != p {
            return Err(KftError::InvalidArgument(format!(
                "{} side slots for {p} modes",
                side.len()
            )));
        }

        // Reuse the frequentist initializer for shapes and mean cores; force
        // data indexing for dual spaces by building in dual-exact and then
        // restoring the requested space.
        let mut base_cfg = config.model.clone();
        let target_space = config.model.space;
        if matches!(target_space, Space::DualRff) {
            base_cfg.space = Space::DualExact;
        }
        let base = crate::model::KftModel::init(&base_cfg, side.clone(), seed)?;
        let mut rff = vec![None; p];
        if matches!(target_space, Space::DualRff) {
            for m in 0..p {
                if let Some(s) = &side[m] {
                    let params = config.model.kernel.ok_or_else(|| {
                        KftError::InvalidArgument("dual spaces need kernel parameters".into())
                    })?;
                    rff[m] = Some(crate::kernels::rff_sample(
                        &params,
                        config.model.rff_count,
                        s.feature_dim(),
                        config.model.rff_seed.wrapping_add(m as u64),
                    )?);
                }
            }
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(0x5EED));
        let log_init = config.init_var.ln();
        let main_var: Vec<MainVar> = base
            .cores
            .iter()
            .map(|core| match config.family {
                ViFamily::Univariate => MainVar::Univariate {
                    log_var: DenseTensor::filled(core.tensor.shape(), log_init),
                },
                ViFamily::Multivariate => MainVar::Multivariate {
                    factors: core
                        .modes
                        .iter()
                        .enumerate()
                        .map(|(k, _)| {
                            let n = core.tensor.extent(1 + k);
                            CovFactor {
                                b: gaussian(&[n, config.factor_rank], 1e-2, &mut rng),
                                log_d: DenseTensor::filled(
                                    &[n],
                                    (config.init_var.sqrt()).ln(),
                                ),
                            }
                        })
                        .collect(),
                },
            })
            .collect();

        let aux_var = match &base.aux {
            AuxCores::Wlr { weights } => AuxVar::Wlr {
                log_var: weights
                    .iter()
                    .map(|w| DenseTensor::filled(w.tensor.shape(), log_init))
                    .collect(),
            },
            AuxCores::Ls { scale, bias } => AuxVar::Ls {
                scale_log_var: scale
                    .iter()
                    .map(|c| DenseTensor::filled(c.tensor.shape(), log_init))
                    .collect(),
                bias_log_var: bias
                    .iter()
                    .map(|c| DenseTensor::filled(c.tensor.shape(), log_init))
                    .collect(),
            },
            AuxCores::None => unreachable!("vanilla rejected above"),
        };

        Ok(Self {
            variant: config.model.variant,
            space: target_space,
            family: config.family,
            extents: config.model.extents.clone(),
            mean_cores: base.cores,
            mean_aux: base.aux,
            main_var,
            aux_var,
            side,
            kernel_params: base.kernel_params,
            rff,
            prior: config.prior,
        })
    }

    pub fn mode_count(&self) -> usize {
        self.extents.len()
    }

    pub fn total_cells(&self) -> usize {
        self.extents.iter().product()
    }

    /// Exact Gram matrix for a mode in dual-exact space.
    pub fn kernel_matrix(&self, mode: usize) -> Result<Option<DenseTensor>> {
        match (&self.side[mode], self.space) {
            (Some(s), Space::DualExact) => {
                let params = self.kernel_params[mode].ok_or_else(|| {
                    KftError::InvalidArgument(format!("mode {mode} lacks kernel params"))
                })?;
                Ok(Some(gram(s, &params)?))
            }
            _ => Ok(None),
        }
    }

    pub fn feature_matrix(&self, mode: usize) -> Result<Option<DenseTensor>> {
        match (&self.side[mode], self.space) {
            (Some(s), Space::DualRff) => {
                let map = self.rff[mode].as_ref().ok_or_else(|| {
                    KftError::InvalidArgument(format!("mode {mode} lacks an RFF map"))
                })?;
                Ok(Some(rff_feature_matrix(&s.features, map)?))
            }
            _ => Ok(None),
        }
    }

    /// Kernel application for the mean map of one mode.
    pub fn kernel_op(&self, mode: usize) -> Result<KernelOp> {
        Ok(match (&self.side[mode], self.space) {
            (None, _) => KernelOp::None,
            (Some(s), Space::Primal) => KernelOp::Exact(s.features.clone()),
            (Some(_), Space::DualExact) => {
                KernelOp::Exact(self.kernel_matrix(mode)?.expect("gram"))
            }
            (Some(_), Space::DualRff) => KernelOp::Rff(self.feature_matrix(mode)?.expect("phi")),
        })
    }

    /// Squared kernel application (the K² of the variance terms): entrywise
    /// squared feature matrix in primal, K∘K in dual-exact, and the
    /// transposed-Khatri-Rao route (Φ•Φ) in RFF mode.
    pub fn squared_kernel_op(&self, mode: usize) -> Result<KernelOp> {
        Ok(match (&self.side[mode], self.space) {
            (None, _) => KernelOp::None,
            (Some(s), Space::Primal) => {
                KernelOp::Exact(hadamard(&s.features, &s.features)?)
            }
            (Some(_), Space::DualExact) => {
                let k = self.kernel_matrix(mode)?.expect("gram");
                KernelOp::Exact(hadamard(&k, &k)?)
            }
            (Some(_), Space::DualRff) => {
                let phi = self.feature_matrix(mode)?.expect("phi");
                KernelOp::Rff(transposed_khatri_rao(&phi, &phi)?)
            }
        })
    }

    fn group_kernel_ops(&self, g: usize, squared: bool) -> Result<Vec<KernelOp>> {
        self.mean_cores[g]
            .modes
            .iter()
            .map(|&m| {
                if squared {
                    self.squared_kernel_op(m)
                } else {
                    self.kernel_op(m)
                }
            })
            .collect()
    }

    /// Kernel-applied mean cores (middle extents become index counts).
    pub fn kernelized_means(&self) -> Result<Vec<DenseTensor>> {
        (0..self.mean_cores.len())
            .map(|g| {
                let ops = self.group_kernel_ops(g, false)?;
                apply_kernels(&self.mean_cores[g].tensor, &ops)
            })
            .collect()
    }

    fn check_indices(&self, indices: &[Vec<usize>]) -> Result<()> {
        for tuple in indices {
            if tuple.len() != self.mode_count() {
                return Err(KftError::IndexOutOfRange(format!(
                    "index tuple of length {} for {} modes",
                    tuple.len(),
                    self.mode_count()
                )));
            }
            for (m, &i) in tuple.iter().enumerate() {
                if i >= self.extents[m] {
                    return Err(KftError::IndexOutOfRange(format!(
                        "index {i} on mode {m} (extent {})",
                        self.extents[m]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Point predictions from the mean chain (the Eq.-49-style R² model).
    pub fn mean_forward(&self, indices: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.check_indices(indices)?;
        let w = self.kernelized_means()?;
        Ok(match &self.mean_aux {
            AuxCores::Wlr { weights } => indices
                .iter()
                .map(|t| chain_entry(&self.mean_cores, &w, Some(weights), t))
                .collect(),
            AuxCores::Ls { scale, bias } => {
                let s_t: Vec<DenseTensor> = scale.iter().map(|c| c.tensor.clone()).collect();
                let b_t: Vec<DenseTensor> = bias.iter().map(|c| c.tensor.clone()).collect();
                indices
                    .iter()
                    .map(|t| {
                        let m = chain_entry(&self.mean_cores, &w, None, t);
                        let s = chain_entry(scale, &s_t, None, t);
                        let b = chain_entry(bias, &b_t, None, t);
                        s * m + b
                    })
                    .collect()
            }
            AuxCores::None => unreachable!("vanilla rejected at init"),
        })
    }

    /// Per-entry variance of the kernelized core, as a tensor matching the
    /// data-indexed core shape (shared across rank cells in the
    /// multivariate family).
    fn kernelized_variance(&self, g: usize) -> Result<DenseTensor> {
        let core = &self.mean_cores[g];
        match &self.main_var[g] {
            MainVar::Univariate { log_var } => {
                let var = log_var.map(f64::exp);
                let ops = self.group_kernel_ops(g, true)?;
                apply_kernels(&var, &ops)
            }
            MainVar::Multivariate { factors } => {
                let rl = core.left_rank();
                let rr = core.right_rank();
                let mut per_mode: Vec<DenseTensor> = Vec::with_capacity(core.modes.len());
                for (k, &m) in core.modes.iter().enumerate() {
                    per_mode.push(self.mode_variance_vector(m, &factors[k])?);
                }
                // Outer product over covered modes, broadcast over rank axes.
                let mut mid_shape: Vec<usize> = Vec::new();
                for v in &per_mode {
                    mid_shape.push(v.extent(0));
                }
                let mid: usize = mid_shape.iter().product();
                let mut outer = vec![1.0; mid];
                for (i, slot) in outer.iter_mut().enumerate() {
                    let mut rest = i;
                    let mut prod = 1.0;
                    for (k, v) in per_mode.iter().enumerate().rev() {
                        let extent = mid_shape[k];
                        prod *= v.data()[rest % extent];
                        if k > 0 {
                            rest /= extent;
                        }
                    }
                    *slot = prod;
                }
                let mut shape = vec![rl];
                shape.extend_from_slice(&mid_shape);
                shape.push(rr);
                let mut data = Vec::with_capacity(rl * mid * rr);
                for _ in 0..rl {
                    for &v in &outer {
                        for _ in 0..rr {
                            data.push(v);
                        }
                    }
                }
                DenseTensor::new(shape, data)
            }
        }
    }

    /// diag(K Σ Kᵀ) for one mode's multivariate factor: row sums of the
    /// squared kernel-factor product, plus the Eq.-38 diagonal in RFF mode.
    fn mode_variance_vector(&self, mode: usize, factor: &CovFactor) -> Result<DenseTensor> {
        match self.kernel_op(mode)? {
            KernelOp::None => {
                // Identity kernel: diag(Σ) = row norms of 𝔹.
                let l = factor.ltri_factor()?;
                let n = l.extent(0);
                let data: Vec<f64> = (0..n)
                    .map(|i| (0..n).map(|j| l.get(&[i, j]).powi(2)).sum())
                    .collect();
                DenseTensor::new(vec![n], data)
            }
            KernelOp::Exact(k) => {
                let l = factor.ltri_factor()?;
                let kl = k.matmul(&l)?;
                let (n, c) = (kl.extent(0), kl.extent(1));
                let data: Vec<f64> = (0..n)
                    .map(|i| (0..c).map(|j| kl.get(&[i, j]).powi(2)).sum())
                    .collect();
                DenseTensor::new(vec![n], data)
            }
            KernelOp::Rff(phi) => {
                let inner = phi.transpose()?.matmul(&factor.b)?;
                let outer = phi.matmul(&inner)?;
                let (n, c) = (outer.extent(0), outer.extent(1));
                let d = factor.d();
                let data: Vec<f64> = (0..n)
                    .map(|i| {
                        (0..c).map(|j| outer.get(&[i, j]).powi(2)).sum::<f64>()
                            + d.data()[i] * d.data()[i]
                    })
                    .collect();
                DenseTensor::new(vec![n], data)
            }
        }
    }

    /// Mean and paired-rank second-moment cores of the main (kernelized,
    /// aux-weighted where WLR) chain.
    fn main_moment_cores(&self) -> Result<(Vec<TTCore>, Vec<TTCore>)> {
        let kernelized = self.kernelized_means()?;
        let mut mean_cores = Vec::with_capacity(self.mean_cores.len());
        let mut second_cores = Vec::with_capacity(self.mean_cores.len());
        for (g, core) in self.mean_cores.iter().enumerate() {
            let mean_k = &kernelized[g];
            let var_k = self.kernelized_variance(g)?;
            let (a, c) = match (&self.mean_aux, &self.aux_var) {
                (AuxCores::Wlr { weights }, AuxVar::Wlr { log_var }) => {
                    let m_aux = &weights[g].tensor;
                    let v_aux = log_var[g].map(f64::exp);
                    let a = hadamard(m_aux, mean_k)?;
                    let mk2 = hadamard(mean_k, mean_k)?;
                    let m_aux2 = hadamard(m_aux, m_aux)?;
                    let c = hadamard(&v_aux, &mk2)?
                        .add(&hadamard(&m_aux2.add(&v_aux)?, &var_k)?)?;
                    (a, c)
                }
                _ => (mean_k.clone(), var_k),
            };
            mean_cores.push(TTCore {
                tensor: a,
                modes: core.modes.clone(),
            });
            second_cores.push(TTCore {
                tensor: rank_pair_square_plain(&mean_cores[g].tensor, &c),
                modes: core.modes.clone(),
            });
        }
        Ok((mean_cores, second_cores))
    }

    /// First and second moments of the predictive function (without
    /// observation noise) at the requested indices.
    pub fn predictive_moments(&self, indices: &[Vec<usize>]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_indices(indices)?;
        let (main_a, main_g) = self.main_moment_cores()?;
        let a_t: Vec<DenseTensor> = main_a.iter().map(|c| c.tensor.clone()).collect();
        let g_t: Vec<DenseTensor> = main_g.iter().map(|c| c.tensor.clone()).collect();
        match (&self.mean_aux, &self.aux_var) {
            (AuxCores::Ls { scale, bias }, AuxVar::Ls { scale_log_var, bias_log_var }) => {
                let s_mean: Vec<DenseTensor> = scale.iter().map(|c| c.tensor.clone()).collect();
                let b_mean: Vec<DenseTensor> = bias.iter().map(|c| c.tensor.clone()).collect();
                let s_second: Vec<DenseTensor> = scale
                    .iter()
                    .zip(scale_log_var)
                    .map(|(c, lv)| rank_pair_square_plain(&c.tensor, &lv.map(f64::exp)))
                    .collect();
                let b_second: Vec<DenseTensor> = bias
                    .iter()
                    .zip(bias_log_var)
                    .map(|(c, lv)| rank_pair_square_plain(&c.tensor, &lv.map(f64::exp)))
                    .collect();
                let mut means = Vec::with_capacity(indices.len());
                let mut seconds = Vec::with_capacity(indices.len());
                for t in indices {
                    let em = chain_entry(&main_a, &a_t, None, t);
                    let em2 = chain_entry(&main_a, &g_t, None, t);
                    let es = chain_entry(scale, &s_mean, None, t);
                    let es2 = chain_entry(scale, &s_second, None, t);
                    let eb = chain_entry(bias, &b_mean, None, t);
                    let eb2 = chain_entry(bias, &b_second, None, t);
                    means.push(es * em + eb);
                    seconds.push(es2 * em2 + 2.0 * es * em * eb + eb2);
                }
                Ok((means, seconds))
            }
            _ => {
                let mut means = Vec::with_capacity(indices.len());
                let mut seconds = Vec::with_capacity(indices.len());
                for t in indices {
                    means.push(chain_entry(&main_a, &a_t, None, t));
                    seconds.push(chain_entry(&main_a, &g_t, None, t));
                }
                Ok((means, seconds))
            }
        }
    }

    /// Closed-form E_q[log p(batch | cores)]: the Gaussian log-likelihood
    /// with the exact posterior second moment of the prediction.
    pub fn recon_log_lik(&self, indices: &[Vec<usize>], targets: &[f64]) -> Result<f64> {
        if indices.len() != targets.len() {
            return Err(KftError::ShapeMismatch(
                "batch indices and targets differ in length".into(),
            ));
        }
        let (means, seconds) = self.predictive_moments(indices)?;
        let s2 = self.prior.noise_var;
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let mut total = 0.0;
        for ((y, m), m2) in targets.iter().zip(&means).zip(&seconds) {
            total += log_norm - (y * y - 2.0 * y * m + m2) / (2.0 * s2);
        }
        Ok(total)
    }

    /// Sum of all KL(q‖prior) terms.
    pub fn kl_total(&self) -> Result<f64> {
        let mut total = 0.0;
        for g in 0..self.mean_cores.len() {
            total += match &self.main_var[g] {
                MainVar::Univariate { log_var } => kl_univariate(
                    &self.mean_cores[g].tensor,
                    &log_var.map(f64::exp),
                    self.prior.mean_main,
                    self.prior.var_main,
                )?,
                MainVar::Multivariate { .. } => self.kl_multivariate_core(g)?,
            };
        }
        match (&self.mean_aux, &self.aux_var) {
            (AuxCores::Wlr { weights }, AuxVar::Wlr { log_var }) => {
                for (w, lv) in weights.iter().zip(log_var) {
                    total += kl_univariate(
                        &w.tensor,
                        &lv.map(f64::exp),
                        self.prior.mean_aux,
                        self.prior.var_aux,
                    )?;
                }
            }
            (AuxCores::Ls { scale, bias }, AuxVar::Ls { scale_log_var, bias_log_var }) => {
                for (c, lv) in scale.iter().zip(scale_log_var).chain(bias.iter().zip(bias_log_var))
                {
                    total += kl_univariate(
                        &c.tensor,
                        &lv.map(f64::exp),
                        self.prior.mean_aux,
                        self.prior.var_aux,
                    )?;
                }
            }
            _ => {
                return Err(KftError::InvalidArgument(
                    "inconsistent auxiliary state".into(),
                ))
            }
        }
        Ok(total)
    }

    /// KL of one multivariate core against its Kronecker kernel prior.
    fn kl_multivariate_core(&self, g: usize) -> Result<f64> {
        let core = &self.mean_cores[g];
        let factors = match &self.main_var[g] {
            MainVar::Multivariate { factors } => factors,
            _ => {
                return Err(KftError::InvalidArgument(
                    "kl_multivariate_core on a univariate state".into(),
                ))
            }
        };
        let cells = (core.left_rank() * core.right_rank()) as f64;
        let n_total: usize = core
            .modes
            .iter()
            .enumerate()
            .map(|(k, _)| core.tensor.extent(1 + k))
            .product();
        let sp2 = self.prior.var_main;

        let mut trace_prod = 1.0;
        let mut logdet_prior_precision = 0.0;
        let mut logdet_posterior = 0.0;
        let mut delta = core.tensor.map(|v| v - self.prior.mean_main);
        let delta0 = delta.clone();
        for (k, &m) in core.modes.iter().enumerate() {
            let axis = Axis::Index(1 + k);
            let n = core.tensor.extent(1 + k);
            let weight = n_total as f64 / n as f64;
            match (self.kernel_op(m)?, self.space) {
                (KernelOp::Exact(kmat), Space::DualExact) => {
                    let l = factors[k].ltri_factor()?;
                    let kl_mat = kmat.matmul(&l)?;
                    trace_prod *= hadamard(&kl_mat, &l)?.sum();
                    logdet_prior_precision += weight * linalg::logdet_pd(&kmat)?;
                    logdet_posterior +=
                        weight * 2.0 * (0..n).map(|i| l.get(&[i, i]).ln()).sum::<f64>();
                    delta = mode_product(&delta, &kmat, axis)?;
                }
                (KernelOp::Rff(phi), _) => {
                    let f = &factors[k];
                    let d = f.d();
                    let phit_b = phi.transpose()?.matmul(&f.b)?;
                    let phi_row_norms: Vec<f64> = (0..n)
                        .map(|i| {
                            (0..phi.extent(1))
                                .map(|j| phi.get(&[i, j]).powi(2))
                                .sum()
                        })
                        .collect();
                    let tr = phit_b.sum_squares()
                        + d.data()
                            .iter()
                            .zip(&phi_row_norms)
                            .map(|(di, pn)| di * di * pn)
                            .sum::<f64>()
                        + sp2 * (f.b.sum_squares() + d.data().iter().map(|di| di * di).sum::<f64>());
                    trace_prod *= tr;
                    let i_count = phi.extent(1);
                    let mut inner = phi.transpose()?.matmul(&phi)?;
                    for i in 0..i_count {
                        inner.data_mut()[i * i_count + i] += sp2;
                    }
                    logdet_prior_precision += weight
                        * ((n as f64 - i_count as f64) * sp2.ln() + linalg::logdet_pd(&inner)?);
                    // det(BBᵀ + D²) = det(D²)·det(I_r + Bᵀ D⁻² B)
                    let r = f.b.extent(1);
                    let mut scaled = f.b.clone();
                    for i in 0..n {
                        for j in 0..r {
                            scaled.data_mut()[i * r + j] /= d.data()[i];
                        }
                    }
                    let mut small = scaled.transpose()?.matmul(&scaled)?;
                    for i in 0..r {
                        small.data_mut()[i * r + i] += 1.0;
                    }
                    logdet_posterior += weight
                        * (2.0 * f.log_d.sum() + linalg::logdet_pd(&small)?);
                    let k_applied = crate::kernels::rff_gram_apply(&delta, &phi, axis)?;
                    delta = k_applied.add(&delta.scale(sp2))?;
                }
                (KernelOp::None, _) => {
                    let l = factors[k].ltri_factor()?;
                    trace_prod *= l.sum_squares() / sp2;
                    logdet_prior_precision += weight * (n as f64) * (1.0 / sp2).ln();
                    logdet_posterior +=
                        weight * 2.0 * (0..n).map(|i| l.get(&[i, i]).ln()).sum::<f64>();
                    delta = delta.scale(1.0 / sp2);
                }
                (KernelOp::Exact(_), _) => {
                    return Err(KftError::InvalidArgument(
                        "multivariate family needs a dual space".into(),
                    ))
                }
            }
        }
        let quad = hadamard(&delta, &delta0)?.sum();
        Ok(0.5
            * (cells * trace_prod + quad - cells * n_total as f64
                + cells * (-logdet_prior_precision - logdet_posterior)))
    }

    /// Draws one full set of cores from q.
    pub fn sample_cores(&self, rng: &mut ChaCha20Rng) -> Result<SampledCores> {
        let mut main = Vec::with_capacity(self.mean_cores.len());
        for (g, core) in self.mean_cores.iter().enumerate() {
            main.push(match &self.main_var[g] {
                MainVar::Univariate { log_var } => {
                    let sd = log_var.map(|v| (0.5 * v).exp());
                    let noise = gaussian(core.tensor.shape(), 1.0, rng);
                    core.tensor.add(&hadamard(&sd, &noise)?)?
                }
                MainVar::Multivariate { factors } => {
                    sample_core(&core.tensor, factors, matches!(self.space, Space::DualRff), rng)?
                }
            });
        }
        let sample_univariate = |mean: &DenseTensor,
                                 log_var: &DenseTensor,
                                 rng: &mut ChaCha20Rng|
         -> Result<DenseTensor> {
            let sd = log_var.map(|v| (0.5 * v).exp());
            let noise = gaussian(mean.shape(), 1.0, rng);
            mean.add(&hadamard(&sd, &noise)?)
        };
        let aux = match (&self.mean_aux, &self.aux_var) {
            (AuxCores::Wlr { weights }, AuxVar::Wlr { log_var }) => SampledAux::Wlr(
                weights
                    .iter()
                    .zip(log_var)
                    .map(|(w, lv)| sample_univariate(&w.tensor, lv, rng))
                    .collect::<Result<_>>()?,
            ),
            (AuxCores::Ls { scale, bias }, AuxVar::Ls { scale_log_var, bias_log_var }) => {
                SampledAux::Ls {
                    scale: scale
                        .iter()
                        .zip(scale_log_var)
                        .map(|(c, lv)| sample_univariate(&c.tensor, lv, rng))
                        .collect::<Result<_>>()?,
                    bias: bias
                        .iter()
                        .zip(bias_log_var)
                        .map(|(c, lv)| sample_univariate(&c.tensor, lv, rng))
                        .collect::<Result<_>>()?,
                }
            }
            _ => return Err(KftError::InvalidArgument("inconsistent aux state".into())),
        };
        Ok(SampledCores { main, aux })
    }

    /// Forward pass of one posterior core sample.
    pub fn forward_sampled(
        &self,
        sampled: &SampledCores,
        indices: &[Vec<usize>],
    ) -> Result<Vec<f64>> {
        let mut kernelized = Vec::with_capacity(sampled.main.len());
        for (g, tensor) in sampled.main.iter().enumerate() {
            let ops = self.group_kernel_ops(g, false)?;
            kernelized.push(apply_kernels(tensor, &ops)?);
        }
        let main_cores: Vec<TTCore> = sampled
            .main
            .iter()
            .zip(&self.mean_cores)
            .map(|(t, c)| TTCore {
                tensor: t.clone(),
                modes: c.modes.clone(),
            })
            .collect();
        match &sampled.aux {
            SampledAux::Wlr(weights) => {
                let w_cores: Vec<TTCore> = weights
                    .iter()
                    .zip(&self.mean_cores)
                    .map(|(t, c)| TTCore {
                        tensor: t.clone(),
                        modes: c.modes.clone(),
                    })
                    .collect();
                Ok(indices
                    .iter()
                    .map(|t| chain_entry(&main_cores, &kernelized, Some(&w_cores), t))
                    .collect())
            }
            SampledAux::Ls { scale, bias } => {
                let s_cores: Vec<TTCore> = scale
                    .iter()
                    .zip(&self.mean_cores)
                    .map(|(t, c)| TTCore {
                        tensor: t.clone(),
                        modes: c.modes.clone(),
                    })
                    .collect();
                let b_cores: Vec<TTCore> = bias
                    .iter()
                    .zip(&self.mean_cores)
                    .map(|(t, c)| TTCore {
                        tensor: t.clone(),
                        modes: c.modes.clone(),
                    })
                    .collect();
                let s_t: Vec<DenseTensor> = scale.to_vec();
                let b_t: Vec<DenseTensor> = bias.to_vec();
                Ok(indices
                    .iter()
                    .map(|t| {
                        let m = chain_entry(&main_cores, &kernelized, None, t);
                        let s = chain_entry(&s_cores, &s_t, None, t);
                        let b = chain_entry(&b_cores, &b_t, None, t);
                        s * m + b
                    })
                    .collect())
            }
        }
    }

    /// Posterior predictive samples: cores drawn from q, pushed through the
    /// variant forward, plus N(0, σ_y²) observation noise. Returns one
    /// sample vector per index; deterministic per seed.
    pub fn posterior_predictive(
        &self,
        indices: &[Vec<usize>],
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_indices(indices)?;
        if n_samples == 0 {
            return Err(KftError::InvalidArgument("n_samples must be >= 1".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let noise_sd = self.prior.noise_var.sqrt();
        let mut out = vec![Vec::with_capacity(n_samples); indices.len()];
        for _ in 0..n_samples {
            let sampled = self.sample_cores(&mut rng)?;
            let preds = self.forward_sampled(&sampled, indices)?;
            for (slot, p) in out.iter_mut().zip(preds) {
                let eps: f64 = StandardNormal.sample(&mut rng);
                slot.push(p + noise_sd * eps);
            }
        }
        Ok(out)
    }

    /// The stochastic ELBO estimate: recon(batch) − (|batch|/N)·ΣKL.
    pub fn elbo(&self, indices: &[Vec<usize>], targets: &[f64]) -> Result<f64> {
        if indices.is_empty() {
            return Err(KftError::InvalidArgument("empty batch".into()));
        }
        let recon = self.recon_log_lik(indices, targets)?;
        let frac = indices.len() as f64 / self.total_cells().max(1) as f64;
        Ok(recon - frac * self.kl_total()?)
    }

    /// ELBO with an explicit dataset size for the KL weight.
    pub fn elbo_with_total(
        &self,
        indices: &[Vec<usize>],
        targets: &[f64],
        total_records: usize,
    ) -> Result<f64> {
        if indices.is_empty() {
            return Err(KftError::InvalidArgument("empty batch".into()));
        }
        let recon = self.recon_log_lik(indices, targets)?;
        let frac = indices.len() as f64 / total_records.max(1) as f64;
        Ok(recon - frac * self.kl_total()?)
    }
}

/// One posterior draw of every core.
#[derive(Debug, Clone)]
pub struct SampledCores {
    pub main: Vec<DenseTensor>,
    pub aux: SampledAux,
}

#[derive(Debug, Clone)]
pub enum SampledAux {
    Wlr(Vec<DenseTensor>),
    Ls {
        scale: Vec<DenseTensor>,
        bias: Vec<DenseTensor>,
    },
}

/// Paired-rank second-moment core (plain-tensor counterpart of the tape op).
pub(crate) fn rank_pair_square_plain(a: &DenseTensor, c: &DenseTensor) -> DenseTensor {
    let rl = a.extent(0);
    let rr = a.extent(a.order() - 1);
    let mid: usize = a.shape()[1..a.order() - 1].iter().product();
    let ad = a.data();
    let cd = c.data();
    let at = |l: usize, m: usize, r: usize| ad[(l * mid + m) * rr + r];
    let mut out = vec![0.0; rl * rl * mid * rr * rr];
    for l in 0..rl {
        for q in 0..rl {
            for m in 0..mid {
                for r in 0..rr {
                    for t in 0..rr {
                        let mut v = at(l, m, r) * at(q, m, t);
                        if l == q && r == t {
                            v += cd[(l * mid + m) * rr + r];
                        }
                        out[(((l * rl + q) * mid + m) * rr + r) * rr + t] = v;
                    }
                }
            }
        }
    }
    let mut shape = vec![rl * rl];
    shape.extend_from_slice(&a.shape()[1..a.order() - 1]);
    shape.push(rr * rr);
    DenseTensor::new(shape, out).expect("shape consistent")
}

/// Entrywise KL between diagonal Gaussians q = N(mean, var) and the scalar
/// prior N(prior_mean, prior_var), summed over the tensor.
pub fn kl_univariate(
    mean: &DenseTensor,
    var: &DenseTensor,
    prior_mean: f64,
    prior_var: f64,
) -> Result<f64> {
    if mean.shape() != var.shape() {
        return Err(KftError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            mean.shape(),
            var.shape()
        )));
    }
    if !(prior_var > 0.0) {
        return Err(KftError::InvalidArgument("prior variance must be positive".into()));
    }
    let mut total = 0.0;
    for (&mu, &s2) in mean.data().iter().zip(var.data()) {
        if !(s2 > 0.0) {
            return Err(KftError::InvalidArgument(
                "posterior variance must be positive".into(),
            ));
        }
        let ratio = s2 / prior_var;
        total += (mu - prior_mean) * (mu - prior_mean) / (2.0 * prior_var)
            + 0.5 * (ratio - 1.0 - ratio.ln());
    }
    Ok(total)
}

/// Multivariate KL for one single-mode core with the RFF-regularized prior
/// N(prior_mean·1, (ΦΦᵀ + σ_p²I)⁻¹) and posterior covariance BBᵀ + D² per
/// rank cell, evaluated without materializing any n×n matrix.
pub fn kl_multivariate_rff(
    mean: &DenseTensor,
    factor: &CovFactor,
    prior_mean: f64,
    prior_var: f64,
    phi: &DenseTensor,
) -> Result<f64> {
    if mean.order() != 3 {
        return Err(KftError::ShapeMismatch(
            "kl_multivariate_rff expects a single-mode core (order 3)".into(),
        ));
    }
    let n = mean.extent(1);
    if factor.rows() != n || phi.extent(0) != n {
        return Err(KftError::ShapeMismatch(format!(
            "mode extent {n} vs factor rows {} and feature rows {}",
            factor.rows(),
            phi.extent(0)
        )));
    }
    let cells = (mean.extent(0) * mean.extent(2)) as f64;
    let sp2 = prior_var;
    let d = factor.d();
    let phit_b = phi.transpose()?.matmul(&factor.b)?;
    let phi_row_norms: Vec<f64> = (0..n)
        .map(|i| (0..phi.extent(1)).map(|j| phi.get(&[i, j]).powi(2)).sum())
        .collect();
    let trace = phit_b.sum_squares()
        + d.data()
            .iter()
            .zip(&phi_row_norms)
            .map(|(di, pn)| di * di * pn)
            .sum::<f64>()
        + sp2 * (factor.b.sum_squares() + d.data().iter().map(|di| di * di).sum::<f64>());
    let delta = mean.map(|v| v - prior_mean);
    let k_applied = crate::kernels::rff_gram_apply(&delta, phi, Axis::Index(1))?;
    let p_applied = k_applied.add(&delta.scale(sp2))?;
    let quad = hadamard(&p_applied, &delta)?.sum();
    let i_count = phi.extent(1);
    let mut inner = phi.transpose()?.matmul(phi)?;
    for i in 0..i_count {
        inner.data_mut()[i * i_count + i] += sp2;
    }
    let logdet_prior_precision =
        (n as f64 - i_count as f64) * sp2.ln() + linalg::logdet_pd(&inner)?;
    let r = factor.b.extent(1);
    let mut scaled = factor.b.clone();
    for i in 0..n {
        for j in 0..r {
            scaled.data_mut()[i * r + j] /= d.data()[i];
        }
    }
    let mut small = scaled.transpose()?.matmul(&scaled)?;
    for i in 0..r {
        small.data_mut()[i * r + i] += 1.0;
    }
    let logdet_posterior = 2.0 * factor.log_d.sum() + linalg::logdet_pd(&small)?;
    Ok(0.5
        * (cells * trace + quad - cells * n as f64
            + cells * (-logdet_prior_precision - logdet_posterior)))
}

/// Draws one core with covariance ∏⊗(per-mode factor covariance): iid
/// normals pushed through per-mode factor mode products, added to the mean.
pub fn sample_core(
    mean: &DenseTensor,
    factors: &[CovFactor],
    rff: bool,
    rng: &mut ChaCha20Rng,
) -> Result<DenseTensor> {
    let fs: Vec<DenseTensor> = factors
        .iter()
        .map(|f| f.sampling_factor(rff))
        .collect::<Result<_>>()?;
    let mut z_shape = vec![mean.extent(0)];
    for f in &fs {
        z_shape.push(f.extent(1));
    }
    z_shape.push(mean.extent(mean.order() - 1));
    let z = gaussian(&z_shape, 1.0, rng);
    let mut noise = z;
    for (k, f) in fs.iter().enumerate() {
        noise = mode_product(&noise, f, Axis::Index(1 + k))?;
    }
    mean.add(&noise)
}

pub const ALPHA_GRID: [f64; 5] = [0.05, 0.15, 0.25, 0.35, 0.45];

/// Calibration of a predictive sample set against held-out targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub alphas: Vec<f64>,
    /// ξ_{1−2α}: fraction of targets inside the central (1−2α) interval.
    pub rates: Vec<f64>,
    /// |ξ_{1−2α} − (1−2α)| per α.
    pub deviations: Vec<f64>,
    /// Ξ = Σ_α deviations.
    pub total: f64,
    pub r2: f64,
    /// η = Ξ − R².
    pub eta: f64,
}

/// Linear-interpolation empirical quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Empirical central-interval coverage over the α grid, plus the η
/// selection criterion computed from the mean-chain predictions.
pub fn calibration(
    samples: &[Vec<f64>],
    targets: &[f64],
    mean_predictions: &[f64],
) -> Result<CalibrationReport> {
    if samples.len() != targets.len() || samples.len() != mean_predictions.len() {
        return Err(KftError::ShapeMismatch(
            "samples, targets and mean predictions must align".into(),
        ));
    }
    if samples.is_empty() {
        return Err(KftError::InvalidArgument("no calibration points".into()));
    }
    for s in samples {
        if s.len() < 100 {
            return Err(KftError::InvalidArgument(format!(
                "need at least 100 predictive samples per point, got {}",
                s.len()
            )));
        }
    }
    let mut sorted: Vec<Vec<f64>> = samples.to_vec();
    for s in &mut sorted {
        s.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    }
    let mut rates = Vec::with_capacity(ALPHA_GRID.len());
    let mut deviations = Vec::with_capacity(ALPHA_GRID.len());
    let mut total = 0.0;
    for &alpha in &ALPHA_GRID {
        let mut inside = 0usize;
        for (s, &y) in sorted.iter().zip(targets) {
            let lo = quantile_sorted(s, alpha);
            let hi = quantile_sorted(s, 1.0 - alpha);
            if y >= lo && y <= hi {
                inside += 1;
            }
        }
        let xi = inside as f64 / targets.len() as f64;
        let dev = (xi - (1.0 - 2.0 * alpha)).abs();
        rates.push(xi);
        deviations.push(dev);
        total += dev;
    }
    let r2 = crate::eval::r2(mean_predictions, targets)?;
    Ok(CalibrationReport {
        alphas: ALPHA_GRID.to_vec(),
        rates,
        deviations,
        total,
        r2,
        eta: total - r2,
    })
}

/// Coverage aggregated over cells of two modes, for heatmap export:
/// (mode-A index, mode-B index, α, coverage) rows.
pub fn calibration_heatmap(
    indices: &[Vec<usize>],
    samples: &[Vec<f64>],
    targets: &[f64],
    mode_a: usize,
    mode_b: usize,
) -> Result<Vec<(usize, usize, f64, f64)>> {
    if indices.len() != samples.len() || indices.len() != targets.len() {
        return Err(KftError::ShapeMismatch(
            "indices, samples and targets must align".into(),
        ));
    }
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, tuple) in indices.iter().enumerate() {
        cells
            .entry((tuple[mode_a], tuple[mode_b]))
            .or_default()
            .push(i);
    }
    let mut rows = Vec::new();
    for ((ia, ib), members) in cells {
        for &alpha in &ALPHA_GRID {
            let mut inside = 0usize;
            for &i in &members {
                let mut s = samples[i].clone();
                s.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
                let lo = quantile_sorted(&s, alpha);
                let hi = quantile_sorted(&s, 1.0 - alpha);
                if targets[i] >= lo && targets[i] <= hi {
                    inside += 1;
                }
            }
            rows.push((ia, ib, alpha, inside as f64 / members.len() as f64));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use rand::Rng;

    fn wlr_vi(space: Space, family: ViFamily, extents: Vec<usize>, seed: u64) -> ViModel {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let side = extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let data: Vec<f64> = (0..n * 2)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Some(SideInfo::new(m, DenseTensor::new(vec![n, 2], data).unwrap()).unwrap())
            })
            .collect();
        let mut mc = ModelConfig::plain(Variant::Wlr, space, extents, 2);
        mc.kernel = Some(KernelParams::new(KernelKind::Rbf, 1.0).unwrap());
        mc.rff_count = 8;
        let mut cfg = ViConfig::new(mc, family, PriorHyper::default());
        cfg.init_var = 0.05;
        let mut vi = ViModel::init(&cfg, side, seed).unwrap();
        // de-neutralize the aux means so tests see generic values
        if let AuxCores::Wlr { weights } = &mut vi.mean_aux {
            for w in weights {
                for v in w.tensor.data_mut() {
                    *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        vi
    }

    #[test]
    fn kl_univariate_cases() {
        let zero = DenseTensor::zeros(&[1]);
        let one = DenseTensor::ones(&[1]);
        assert!(kl_univariate(&zero, &one, 0.0, 1.0).unwrap().abs() < 1e-15);
        let mean1 = DenseTensor::ones(&[1]);
        let kl = kl_univariate(&mean1, &one, 0.0, 1.0).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let bad = DenseTensor::zeros(&[1]);
        assert!(kl_univariate(&zero, &bad, 0.0, 1.0).is_err());
    }

    #[test]
    fn kl_univariate_matches_quadrature() {
        // ∫ q ln(q/p) via trapezoid on a wide grid
        let cases = [
            (0.3, 0.8, -0.1, 1.4),
            (-1.0, 0.2, 0.5, 0.9),
            (2.0, 2.5, 0.0, 1.0),
        ];
        for (mq, vq, mp, vp) in cases {
            let mean = DenseTensor::scalar(mq);
            let var = DenseTensor::scalar(vq);
            let kl = kl_univariate(&mean, &var, mp, vp).unwrap();
            let steps = 400_000;
            let lo = mq - 12.0 * vq.sqrt();
            let hi = mq + 12.0 * vq.sqrt();
            let h = (hi - lo) / steps as f64;
            let logq = |x: f64| {
                -0.5 * ((x - mq) * (x - mq) / vq) - 0.5 * (2.0 * std::f64::consts::PI * vq).ln()
            };
            let logp = |x: f64| {
                -0.5 * ((x - mp) * (x - mp) / vp) - 0.5 * (2.0 * std::f64::consts::PI * vp).ln()
            };
            let f = |x: f64| (logq(x) - logp(x)) * logq(x).exp();
            let mut acc = 0.5 * (f(lo) + f(hi));
            for i in 1..steps {
                acc += f(lo + i as f64 * h);
            }
            let quad = acc * h;
            assert!((kl - quad).abs() < 1e-6, "kl {kl} vs quad {quad}");
        }
    }

    #[test]
    fn recon_reduces_to_squared_residual_at_zero_variance() {
        for space in [Space::Primal, Space::DualExact, Space::DualRff] {
            let mut vi = wlr_vi(space, ViFamily::Univariate, vec![3, 4], 3);
            for mv in &mut vi.main_var {
                if let MainVar::Univariate { log_var } = mv {
                    *log_var = DenseTensor::filled(log_var.shape(), -60.0);
                }
            }
            if let AuxVar::Wlr { log_var } = &mut vi.aux_var {
                for lv in log_var {
                    *lv = DenseTensor::filled(lv.shape(), -60.0);
                }
            }
            let indices: Vec<Vec<usize>> = vec![vec![0, 0], vec![2, 3], vec![1, 1]];
            let targets = vec![0.3, -0.7, 1.1];
            let means = vi.mean_forward(&indices).unwrap();
            let s2 = vi.prior.noise_var;
            let want: f64 = targets
                .iter()
                .zip(&means)
                .map(|(y, m)| {
                    -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (y - m) * (y - m) / (2.0 * s2)
                })
                .sum();
            let got = vi.recon_log_lik(&indices, &targets).unwrap();
            assert!((got - want).abs() < 1e-8, "{space:?}: {got} vs {want}");
        }
    }

    #[test]
    fn single_mode_recon_matches_four_term_expansion() {
        // At one mode the paired-rank chain equals the printed
        // mean/variance four-term expansion.
        let mut vi = wlr_vi(Space::DualExact, ViFamily::Univariate, vec![5], 7);
        if let MainVar::Univariate { log_var } = &mut vi.main_var[0] {
            for v in log_var.data_mut() {
                *v = -1.2;
            }
        }
        let indices: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let targets = vec![0.5, -0.2, 0.9, 0.0, 1.5];
        let k = vi.kernel_matrix(0).unwrap().unwrap();
        let m = &vi.mean_cores[0].tensor;
        let (mp, sp) = match (&vi.mean_aux, &vi.aux_var) {
            (AuxCores::Wlr { weights }, AuxVar::Wlr { log_var }) => {
                (weights[0].tensor.clone(), log_var[0].map(f64::exp))
            }
            _ => unreachable!(),
        };
        let sv = match &vi.main_var[0] {
            MainVar::Univariate { log_var } => log_var.map(f64::exp),
            _ => unreachable!(),
        };
        let mk = mode_product(m, &k, Axis::Index(1)).unwrap();
        let k2 = hadamard(&k, &k).unwrap();
        let s_k2 = mode_product(&sv, &k2, Axis::Index(1)).unwrap();
        let a = hadamard(&mp, &mk).unwrap();
        let t2 = hadamard(&sp, &s_k2).unwrap();
        let t3 = hadamard(&sp, &hadamard(&mk, &mk).unwrap()).unwrap();
        let t4 = hadamard(&hadamard(&mp, &mp).unwrap(), &s_k2).unwrap();
        let s2 = vi.prior.noise_var;
        let mut want = 0.0;
        for (i, y) in targets.iter().enumerate() {
            let mean = a.get(&[0, i, 0]);
            let second =
                mean * mean + t2.get(&[0, i, 0]) + t3.get(&[0, i, 0]) + t4.get(&[0, i, 0]);
            want += -0.5 * (2.0 * std::f64::consts::PI * s2).ln()
                - (y * y - 2.0 * y * mean + second) / (2.0 * s2);
        }
        let got = vi.recon_log_lik(&indices, &targets).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn sample_core_zero_factors_returns_mean() {
        let mean = DenseTensor::new(vec![1, 3, 1], vec![0.1, -0.5, 2.0]).unwrap();
        let factors = vec![CovFactor {
            b: DenseTensor::zeros(&[3, 2]),
            log_d: DenseTensor::filled(&[3], -700.0),
        }];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let s = sample_core(&mean, &factors, true, &mut rng).unwrap();
        for (a, b) in s.data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_degenerate_interval_gives_total_2_5() {
        let samples = vec![vec![1.0; 120]; 50];
        let targets = vec![2.0; 50];
        let means = targets.iter().map(|t| t * 0.9).collect::<Vec<_>>();
        let report = calibration(&samples, &targets, &means);
        // zero target variance makes R² undefined; use varied targets instead
        assert!(report.is_err());
        let targets: Vec<f64> = (0..50).map(|i| 2.0 + i as f64 * 0.01).collect();
        let means: Vec<f64> = targets.iter().map(|t| t - 0.5).collect();
        let report = calibration(&samples, &targets, &means).unwrap();
        assert!((report.total - 2.5).abs() < 1e-12);
        for r in report.rates {
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn calibration_requires_100_samples() {
        let samples = vec![vec![0.0; 99]; 3];
        let targets = vec![0.0, 1.0, 2.0];
        let means = targets.clone();
        assert!(calibration(&samples, &targets, &means).is_err());
    }
}
