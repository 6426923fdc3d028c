//! Frequentist tensor-train regression models: vanilla, weighted latent
//! regression (WLR) and latent scaling (LS) forward passes in primal and
//! dual (exact kernel or random Fourier feature) spaces, joint cores and the
//! regularization terms that go with each wiring.

pub mod checkpoint;
pub mod graph;

use crate::error::{KftError, Result};
use crate::kernels::{
    gram, rff_feature_matrix, rff_gram_apply, rff_sample, KernelParams, RffMap, SideInfo,
};
use crate::tensor::{hadamard, mode_product, Axis, DenseTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Wlr,
    Ls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    Primal,
    DualExact,
    DualRff,
}

/// One latent factor of the chain. `tensor` has shape
/// (R_left, e_1, …, e_Q, R_right) where the middle extents are the covered
/// modes' wiring extents (feature count, index count or feature-map size).
#[derive(Debug, Clone, PartialEq)]
pub struct TTCore {
    pub tensor: DenseTensor,
    pub modes: Vec<usize>,
}

impl TTCore {
    pub fn left_rank(&self) -> usize {
        self.tensor.extent(0)
    }

    pub fn right_rank(&self) -> usize {
        self.tensor.extent(self.tensor.order() - 1)
    }
}

/// Auxiliary cores restoring per-entry flexibility.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxCores {
    None,
    /// Data-indexed Hadamard weights, one per group, same ranks as the main
    /// chain.
    Wlr { weights: Vec<TTCore> },
    /// Independent scale and bias chains with their own ranks.
    Ls { scale: Vec<TTCore>, bias: Vec<TTCore> },
}

/// Full model: chain cores, auxiliary cores, side-information wiring and
/// regularization weights.
#[derive(Debug, Clone)]
pub struct KftModel {
    pub variant: Variant,
    pub space: Space,
    pub extents: Vec<usize>,
    pub cores: Vec<TTCore>,
    pub aux: AuxCores,
    pub side: Vec<Option<SideInfo>>,
    pub kernel_params: Vec<Option<KernelParams>>,
    pub rff: Vec<Option<RffMap>>,
    pub lambda: f64,
    pub lambda_prime: f64,
}

/// Construction-time choices for [`KftModel::init`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub space: Space,
    pub extents: Vec<usize>,
    /// Contiguous partition of modes into cores; `None` means one core per
    /// mode.
    pub groups: Option<Vec<Vec<usize>>>,
    pub rank: usize,
    /// Rank of the LS scale/bias chains; defaults to `rank`.
    pub ls_rank: Option<usize>,
    pub kernel: Option<KernelParams>,
    pub rff_count: usize,
    pub rff_seed: u64,
    pub lambda: f64,
    pub lambda_prime: f64,
}

impl ModelConfig {
    pub fn plain(variant: Variant, space: Space, extents: Vec<usize>, rank: usize) -> Self {
        Self {
            variant,
            space,
            extents,
            groups: None,
            rank,
            ls_rank: None,
            kernel: None,
            rff_count: 64,
            rff_seed: 0,
            lambda: 0.0,
            lambda_prime: 0.0,
        }
    }
}

fn gaussian_tensor(shape: &[usize], sd: f64, rng: &mut ChaCha20Rng) -> DenseTensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect();
    DenseTensor::new(shape.to_vec(), data).expect("shape valid")
}

impl KftModel {
    /// Builds and initializes a model: main cores ~ N(0, 1/R), WLR weights
    /// exactly 1, LS scale 1 + small noise and bias small noise (the noise
    /// breaks rank-path symmetry that would otherwise pin the auxiliary
    /// chains at effective rank one).
    pub fn init(
        config: &ModelConfig,
        side: Vec<Option<SideInfo>>,
        seed: u64,
    ) -> Result<Self> {
        let p = config.extents.len();
        if p == 0 {
            return Err(KftError::InvalidArgument("no modes".into()));
        }
        if side.len() != p {
            return Err(KftError::InvalidArgument(format!(
                "{} side slots for {} modes",
                side.len(),
                p
            )));
        }
        if config.rank == 0 {
            return Err(KftError::InvalidArgument("rank must be >= 1".into()));
        }
        if config.lambda < 0.0 || config.lambda_prime < 0.0 {
            return Err(KftError::InvalidArgument(
                "regularization weights must be >= 0".into(),
            ));
        }
        for (m, s) in side.iter().enumerate() {
            if let Some(s) = s {
                if s.rows() != config.extents[m] {
                    return Err(KftError::ShapeMismatch(format!(
                        "side info for mode {m} has {} rows, extent is {}",
                        s.rows(),
                        config.extents[m]
                    )));
                }
            }
        }
        let groups = match &config.groups {
            Some(g) => {
                let flat: Vec<usize> = g.iter().flatten().copied().collect();
                if flat != (0..p).collect::<Vec<_>>() {
                    return Err(KftError::InvalidArgument(format!(
                        "groups {g:?} must partition modes 0..{p} in order"
                    )));
                }
                if g.iter().any(|grp| grp.is_empty() || grp.len() > 2) {
                    return Err(KftError::InvalidArgument(
                        "each group must cover one or two modes".into(),
                    ));
                }
                g.clone()
            }
            None => (0..p).map(|m| vec![m]).collect(),
        };

        let needs_kernel = !matches!(config.space, Space::Primal);
        let mut kernel_params = vec![None; p];
        let mut rff = vec![None; p];
        if needs_kernel {
            for m in 0..p {
                if side[m].is_some() {
                    let params = config.kernel.ok_or_else(|| KftError::InvalidArgument(
                        "dual spaces need kernel parameters".into(),
                    ))?;
                    kernel_params[m] = Some(params);
                    if matches!(config.space, Space::DualRff) {
                        let dim = side[m].as_ref().unwrap().feature_dim();
                        rff[m] = Some(rff_sample(
                            &params,
                            config.rff_count,
                            dim,
                            config.rff_seed.wrapping_add(m as u64),
                        )?);
                    }
                }
            }
        }

        let mid_extent = |m: usize| -> usize {
            match (&side[m], config.space) {
                (None, _) => config.extents[m],
                (Some(s), Space::Primal) => s.feature_dim(),
                (Some(_), Space::DualExact) => config.extents[m],
                (Some(_), Space::DualRff) => config.rff_count,
            }
        };

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let g = groups.len();
        let rank_at = |b: usize| if b == 0 || b == g { 1 } else { config.rank };
        let mut cores = Vec::with_capacity(g);
        for (gi, grp) in groups.iter().enumerate() {
            let mut shape = vec![rank_at(gi)];
            shape.extend(grp.iter().map(|&m| mid_extent(m)));
            shape.push(rank_at(gi + 1));
            let sd = 1.0 / (config.rank as f64).sqrt();
            cores.push(TTCore {
                tensor: gaussian_tensor(&shape, sd, &mut rng),
                modes: grp.clone(),
            });
        }

        let ls_rank = config.ls_rank.unwrap_or(config.rank);
        let ls_rank_at = |b: usize| if b == 0 || b == g { 1 } else { ls_rank };
        let data_shape = |gi: usize, grp: &[usize], rank_fn: &dyn Fn(usize) -> usize| {
            let mut shape = vec![rank_fn(gi)];
            shape.extend(grp.iter().map(|&m| config.extents[m]));
            shape.push(rank_fn(gi + 1));
            shape
        };
        let aux = match config.variant {
            Variant::Vanilla => AuxCores::None,
            Variant::Wlr => {
                let weights = groups
                    .iter()
                    .enumerate()
                    .map(|(gi, grp)| TTCore {
                        tensor: DenseTensor::ones(&data_shape(gi, grp, &rank_at)),
                        modes: grp.clone(),
                    })
                    .collect();
                AuxCores::Wlr { weights }
            }
            Variant::Ls => {
                let mut scale = Vec::with_capacity(g);
                let mut bias = Vec::with_capacity(g);
                for (gi, grp) in groups.iter().enumerate() {
                    let shape = data_shape(gi, grp, &ls_rank_at);
                    let mut s = gaussian_tensor(&shape, 1e-2, &mut rng);
                    for v in s.data_mut() {
                        *v += 1.0;
                    }
                    scale.push(TTCore {
                        tensor: s,
                        modes: grp.clone(),
                    });
                    bias.push(TTCore {
                        tensor: gaussian_tensor(&shape, 1e-2, &mut rng),
                        modes: grp.clone(),
                    });
                }
                AuxCores::Ls { scale, bias }
            }
        };

        let mut model = Self {
            variant: config.variant,
            space: config.space,
            extents: config.extents.clone(),
            cores,
            aux,
            side,
            kernel_params,
            rff,
            lambda: config.lambda,
            lambda_prime: config.lambda_prime,
        };
        model.validate()?;
        model.normalize_core_scales()?;
        Ok(model)
    }

    /// Rescales each freshly initialized main core so its kernelized map has
    /// the same RMS a plain N(0, 1/R) core would have. Side information can
    /// otherwise inflate the initial chain by orders of magnitude (an
    /// all-ones Gram sums n entries per row), which destabilizes the first
    /// epochs.
    fn normalize_core_scales(&mut self) -> Result<()> {
        let kernelized = self.kernelized_cores()?;
        for (core, w) in self.cores.iter_mut().zip(&kernelized) {
            let rank = core.tensor.extent(0).max(core.tensor.extent(core.tensor.order() - 1));
            let target = 1.0 / (rank as f64).sqrt();
            let rms = (w.sum_squares() / w.len() as f64).sqrt();
            if rms > 1e-12 {
                let factor = target / rms;
                core.tensor = core.tensor.scale(factor);
            }
        }
        Ok(())
    }

    pub fn mode_count(&self) -> usize {
        self.extents.len()
    }

    pub fn total_cells(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let flat: Vec<usize> = self.cores.iter().flat_map(|c| c.modes.clone()).collect();
        if flat != (0..self.mode_count()).collect::<Vec<_>>() {
            return Err(KftError::InvalidArgument(
                "cores must cover all modes exactly once, in order".into(),
            ));
        }
        if self.cores[0].left_rank() != 1
            || self.cores.last().unwrap().right_rank() != 1
        {
            return Err(KftError::RankMismatch("boundary ranks must be 1".into()));
        }
        for w in self.cores.windows(2) {
            if w[0].right_rank() != w[1].left_rank() {
                return Err(KftError::RankMismatch(format!(
                    "{} vs {}",
                    w[0].right_rank(),
                    w[1].left_rank()
                )));
            }
        }
        for core in &self.cores {
            if core.tensor.order() != core.modes.len() + 2 {
                return Err(KftError::ShapeMismatch(format!(
                    "core over modes {:?} has order {}",
                    core.modes,
                    core.tensor.order()
                )));
            }
            for (k, &m) in core.modes.iter().enumerate() {
                let want = self.wiring_extent(m);
                let got = core.tensor.extent(1 + k);
                if want != got {
                    return Err(KftError::ShapeMismatch(format!(
                        "core extent {got} on mode {m}, wiring expects {want}"
                    )));
                }
            }
        }
        let check_data_chain = |chain: &[TTCore]| -> Result<()> {
            for (core, main) in chain.iter().zip(&self.cores) {
                if core.modes != main.modes {
                    return Err(KftError::InvalidArgument(
                        "auxiliary cores must mirror the main grouping".into(),
                    ));
                }
                for (k, &m) in core.modes.iter().enumerate() {
                    if core.tensor.extent(1 + k) != self.extents[m] {
                        return Err(KftError::ShapeMismatch(format!(
                            "auxiliary core on mode {m} must be data-indexed (extent {})",
                            self.extents[m]
                        )));
                    }
                }
            }
            Ok(())
        };
        match &self.aux {
            AuxCores::None => {
                if !matches!(self.variant, Variant::Vanilla) {
                    return Err(KftError::InvalidArgument(
                        "non-vanilla variant without auxiliary cores".into(),
                    ));
                }
            }
            AuxCores::Wlr { weights } => {
                check_data_chain(weights)?;
                for (w, c) in weights.iter().zip(&self.cores) {
                    if w.left_rank() != c.left_rank() || w.right_rank() != c.right_rank() {
                        return Err(KftError::RankMismatch(
                            "WLR weights must share the main chain ranks".into(),
                        ));
                    }
                }
            }
            AuxCores::Ls { scale, bias } => {
                check_data_chain(scale)?;
                check_data_chain(bias)?;
            }
        }
        if self.lambda < 0.0 || self.lambda_prime < 0.0 {
            return Err(KftError::InvalidArgument("negative reg weight".into()));
        }
        Ok(())
    }

    /// Middle extent the wiring implies for `mode` in the main cores.
    pub fn wiring_extent(&self, mode: usize) -> usize {
        match (&self.side[mode], self.space) {
            (None, _) => self.extents[mode],
            (Some(s), Space::Primal) => s.feature_dim(),
            (Some(_), Space::DualExact) => self.extents[mode],
            (Some(s), Space::DualRff) => self
                .rff[mode]
                .as_ref()
                .map(|m| m.count)
                .unwrap_or_else(|| s.feature_dim()),
        }
    }

    /// Exact Gram matrix for a mode, when the wiring uses one.
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

    /// Feature matrix Φ for a mode, when the wiring uses one.
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

    /// The per-group cores after side information is applied: every middle
    /// extent becomes the mode's index count.
    pub fn kernelized_cores(&self) -> Result<Vec<DenseTensor>> {
        self.cores
            .iter()
            .map(|core| {
                let mut w = core.tensor.clone();
                for (k, &m) in core.modes.iter().enumerate() {
                    let axis = Axis::Index(1 + k);
                    w = match (&self.side[m], self.space) {
                        (None, _) => w,
                        (Some(s), Space::Primal) => mode_product(&w, &s.features, axis)?,
                        (Some(_), Space::DualExact) => {
                            let k_mat = self.kernel_matrix(m)?.expect("dual-exact has gram");
                            mode_product(&w, &k_mat, axis)?
                        }
                        (Some(_), Space::DualRff) => {
                            let phi = self.feature_matrix(m)?.expect("dual-rff has features");
                            mode_product(&w, &phi, axis)?
                        }
                    };
                }
                Ok(w)
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

    /// Evaluates the model at the requested indices only; the full tensor is
    /// never materialized. Slices are gathered per group and contracted left
    /// to right.
    pub fn forward(&self, indices: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.check_indices(indices)?;
        let w = self.kernelized_cores()?;
        match &self.aux {
            AuxCores::None => Ok(indices
                .iter()
                .map(|tuple| chain_entry(&self.cores, &w, None, tuple))
                .collect()),
            AuxCores::Wlr { weights } => Ok(indices
                .iter()
                .map(|tuple| chain_entry(&self.cores, &w, Some(weights), tuple))
                .collect()),
            AuxCores::Ls { scale, bias } => {
                let s_t: Vec<DenseTensor> = scale.iter().map(|c| c.tensor.clone()).collect();
                let b_t: Vec<DenseTensor> = bias.iter().map(|c| c.tensor.clone()).collect();
                Ok(indices
                    .iter()
                    .map(|tuple| {
                        let m = chain_entry(&self.cores, &w, None, tuple);
                        let s = chain_entry(scale, &s_t, None, tuple);
                        let b = chain_entry(bias, &b_t, None, tuple);
                        s * m + b
                    })
                    .collect())
            }
        }
    }

    /// Squared Frobenius regularization for primal models.
    pub fn reg_primal(&self) -> f64 {
        let mut total = 0.0;
        for core in &self.cores {
            total += self.lambda * core.tensor.sum_squares();
        }
        match &self.aux {
            AuxCores::None => {}
            AuxCores::Wlr { weights } => {
                for w in weights {
                    total += self.lambda_prime * w.tensor.sum_squares();
                }
            }
            AuxCores::Ls { scale, bias } => {
                for c in scale.iter().chain(bias) {
                    total += self.lambda_prime * c.tensor.sum_squares();
                }
            }
        }
        total
    }

    fn kernel_ops(&self, core: &TTCore) -> Result<Vec<KernelOp>> {
        core.modes
            .iter()
            .map(|&m| {
                Ok(match (&self.side[m], self.space) {
                    (Some(_), Space::DualExact) => {
                        KernelOp::Exact(self.kernel_matrix(m)?.expect("gram"))
                    }
                    (Some(_), Space::DualRff) => {
                        KernelOp::Rff(self.feature_matrix(m)?.expect("phi"))
                    }
                    _ => KernelOp::None,
                })
            })
            .collect()
    }

    /// Dual-space regularizer for the current variant. For feature-indexed
    /// (RFF) cores the RKHS norm reduces to weighted Frobenius norms in the
    /// feature basis.
    pub fn reg_dual(&self) -> Result<f64> {
        let mut total = 0.0;
        match (&self.aux, self.space) {
            (AuxCores::Wlr { weights }, Space::DualExact) => {
                for (core, w) in self.cores.iter().zip(weights) {
                    let ops = self.kernel_ops(core)?;
                    total += self.lambda * wlr_dual_penalty(&core.tensor, &w.tensor, &ops)?;
                }
            }
            (AuxCores::Wlr { weights }, Space::DualRff) => {
                for (core, w) in self.cores.iter().zip(weights) {
                    let w2 = cell_sums(&hadamard(&w.tensor, &w.tensor)?);
                    let v2 = cell_sums(&hadamard(&core.tensor, &core.tensor)?);
                    total += self.lambda
                        * w2.data()
                            .iter()
                            .zip(v2.data())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
            }
            (AuxCores::Ls { scale, bias }, Space::DualExact) => {
                for ((core, s), b) in self.cores.iter().zip(scale).zip(bias) {
                    let ops = self.kernel_ops(core)?;
                    total += self.lambda
                        * (s.tensor.sum_squares()
                            + ls_dual_penalty_mid(&core.tensor, &ops)?
                            + b.tensor.sum_squares());
                }
            }
            (AuxCores::Ls { scale, bias }, Space::DualRff) => {
                for ((core, s), b) in self.cores.iter().zip(scale).zip(bias) {
                    total += self.lambda
                        * (s.tensor.sum_squares()
                            + core.tensor.sum_squares()
                            + b.tensor.sum_squares());
                }
            }
            (AuxCores::None, Space::DualExact) => {
                for core in &self.cores {
                    let ops = self.kernel_ops(core)?;
                    total += self.lambda * ls_dual_penalty_mid(&core.tensor, &ops)?;
                }
            }
            (AuxCores::None, Space::DualRff) => {
                for core in &self.cores {
                    total += self.lambda * core.tensor.sum_squares();
                }
            }
            (_, Space::Primal) => {
                return Err(KftError::InvalidArgument(
                    "dual regularizer on a primal model".into(),
                ))
            }
        }
        Ok(total)
    }

    /// Regularizer matching the model's space.
    pub fn regularizer(&self) -> Result<f64> {
        match self.space {
            Space::Primal => Ok(self.reg_primal()),
            _ => self.reg_dual(),
        }
    }

    /// Mean squared error over a batch plus the batch-fraction-scaled
    /// regularizer.
    pub fn objective(
        &self,
        indices: &[Vec<usize>],
        targets: &[f64],
        total_records: usize,
    ) -> Result<f64> {
        if indices.is_empty() || indices.len() != targets.len() {
            return Err(KftError::InvalidArgument(
                "objective needs a nonempty batch with matching targets".into(),
            ));
        }
        let preds = self.forward(indices)?;
        let mse = preds
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / indices.len() as f64;
        let frac = indices.len() as f64 / total_records.max(1) as f64;
        Ok(mse + frac * self.regularizer()?)
    }
}

/// Contract one entry of the chain: gathers the (R_left × R_right) slice per
/// group (Hadamard-weighted when WLR weights are given) and multiplies left
/// to right.
pub(crate) fn chain_entry(
    cores: &[TTCore],
    kernelized: &[DenseTensor],
    weights: Option<&[TTCore]>,
    tuple: &[usize],
) -> f64 {
    let mut row: Vec<f64> = vec![1.0];
    for (g, core) in cores.iter().enumerate() {
        let w = &kernelized[g];
        let rl = w.extent(0);
        let rr = w.extent(w.order() - 1);
        let mut offset = 0usize;
        for (k, &m) in core.modes.iter().enumerate() {
            offset = offset * w.extent(1 + k) + tuple[m];
        }
        let mid: usize = w.shape()[1..w.order() - 1].iter().product();
        let mut next = vec![0.0; rr];
        match weights {
            None => {
                for (l, &rv) in row.iter().enumerate() {
                    if rv == 0.0 {
                        continue;
                    }
                    let base = (l * mid + offset) * rr;
                    for r in 0..rr {
                        next[r] += rv * w.data()[base + r];
                    }
                }
            }
            Some(ws) => {
                let wt = &ws[g].tensor;
                for (l, &rv) in row.iter().enumerate() {
                    if rv == 0.0 {
                        continue;
                    }
                    let base = (l * mid + offset) * rr;
                    for r in 0..rr {
                        next[r] += rv * w.data()[base + r] * wt.data()[base + r];
                    }
                }
            }
        }
        debug_assert_eq!(row.len(), rl);
        row = next;
    }
    debug_assert_eq!(row.len(), 1);
    row[0]
}

/// How a covered mode's kernel enters a regularizer.
pub enum KernelOp {
    None,
    Exact(DenseTensor),
    Rff(DenseTensor),
}

/// Applies each covered mode's kernel (or ΦΦᵀ) to the matching axis of a
/// core, middle axes starting at 1.
pub fn apply_kernels(core: &DenseTensor, ops: &[KernelOp]) -> Result<DenseTensor> {
    let mut out = core.clone();
    for (k, op) in ops.iter().enumerate() {
        let axis = Axis::Index(1 + k);
        out = match op {
            KernelOp::None => out,
            KernelOp::Exact(k_mat) => mode_product(&out, k_mat, axis)?,
            KernelOp::Rff(phi) => rff_gram_apply(&out, phi, axis)?,
        };
    }
    Ok(out)
}

/// Sums a core over its middle (data) axes and broadcasts the per-rank-cell
/// totals back, i.e. the ∏ (·) ×_q 1_{n×n} factor.
fn sum_broadcast_middle(x: &DenseTensor) -> DenseTensor {
    let rl = x.extent(0);
    let rr = x.extent(x.order() - 1);
    let mid: usize = x.shape()[1..x.order() - 1].iter().product();
    let mut out = x.clone();
    for l in 0..rl {
        for r in 0..rr {
            let mut s = 0.0;
            for m in 0..mid {
                s += x.data()[(l * mid + m) * rr + r];
            }
            for m in 0..mid {
                out.data_mut()[(l * mid + m) * rr + r] = s;
            }
        }
    }
    out
}

/// Per-rank-cell sums over the middle axes, returned as an (R_left × R_right)
/// matrix.
fn cell_sums(x: &DenseTensor) -> DenseTensor {
    let rl = x.extent(0);
    let rr = x.extent(x.order() - 1);
    let mid: usize = x.shape()[1..x.order() - 1].iter().product();
    let mut out = DenseTensor::zeros(&[rl, rr]);
    for l in 0..rl {
        for r in 0..rr {
            let mut s = 0.0;
            for m in 0..mid {
                s += x.data()[(l * mid + m) * rr + r];
            }
            out.set(&[l, r], s);
        }
    }
    out
}

/// WLR dual-space penalty for one data-indexed core:
/// ((∏ V×K) ∘ ((∏ (V'∘V') × 1) ∘ V))_{++}, with ΦΦᵀ in place of K when the
/// kernel is RFF-approximated (never materializing the n×n Gram).
pub fn wlr_dual_penalty(
    core: &DenseTensor,
    weights: &DenseTensor,
    ops: &[KernelOp],
) -> Result<f64> {
    if core.shape() != weights.shape() {
        return Err(KftError::ShapeMismatch(format!(
            "core {:?} vs weights {:?}",
            core.shape(),
            weights.shape()
        )));
    }
    let vk = apply_kernels(core, ops)?;
    let w2 = sum_broadcast_middle(&hadamard(weights, weights)?);
    Ok(hadamard(&vk, &hadamard(&w2, core)?)?.sum())
}

/// LS dual-space middle term for one data-indexed core: ((∏ V×K) ∘ V)_{++}.
pub fn ls_dual_penalty_mid(core: &DenseTensor, ops: &[KernelOp]) -> Result<f64> {
    let vk = apply_kernels(core, ops)?;
    Ok(hadamard(&vk, core)?.sum())
}
