//! Side-information kernelization: exact Gram matrices for the RBF and
//! Matérn family plus Random Fourier Feature maps approximating them.

use crate::error::{KftError, Result};
use crate::tensor::{mode_product, Axis, DenseTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Shift-invariant kernel family. The Matérn smoothness is encoded in the
/// name; spectral measures are Gaussian (RBF) or multivariate Student-t with
/// 2ν degrees of freedom (Matérn).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Rbf,
    #[serde(rename = "matern-0.5")]
    Matern05,
    #[serde(rename = "matern-1.5")]
    Matern15,
    #[serde(rename = "matern-2.5")]
    Matern25,
}

impl KernelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(Self::Rbf),
            "matern-0.5" => Ok(Self::Matern05),
            "matern-1.5" => Ok(Self::Matern15),
            "matern-2.5" => Ok(Self::Matern25),
            other => Err(KftError::InvalidArgument(format!(
                "unknown kernel kind `{other}`"
            ))),
        }
    }

    /// k(d) for unit lengthscale where d is the scaled Euclidean distance.
    fn value(self, d: f64) -> f64 {
        match self {
            Self::Rbf => (-0.5 * d * d).exp(),
            Self::Matern05 => (-d).exp(),
            Self::Matern15 => {
                let a = 3f64.sqrt() * d;
                (1.0 + a) * (-a).exp()
            }
            Self::Matern25 => {
                let a = 5f64.sqrt() * d;
                (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }

    /// ∂k/∂ln ℓ at raw distance r and lengthscale ℓ.
    fn dvalue_dlog_lengthscale(self, r: f64, lengthscale: f64) -> f64 {
        let d = r / lengthscale;
        // dk/dℓ · ℓ = -dk/dd · d
        match self {
            Self::Rbf => d * d * (-0.5 * d * d).exp(),
            Self::Matern05 => d * (-d).exp(),
            Self::Matern15 => {
                let a = 3f64.sqrt() * d;
                a * a * (-a).exp()
            }
            Self::Matern25 => {
                let a = 5f64.sqrt() * d;
                (a * a / 3.0) * (1.0 + a) * (-a).exp()
            }
        }
    }

    /// Degrees of freedom of the Student-t spectral measure, if Matérn.
    fn student_dof(self) -> Option<f64> {
        match self {
            Self::Rbf => None,
            Self::Matern05 => Some(1.0),
            Self::Matern15 => Some(3.0),
            Self::Matern25 => Some(5.0),
        }
    }
}

/// Kernel configuration for one mode: family plus a single shared
/// lengthscale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub kind: KernelKind,
    pub lengthscale: f64,
}

impl KernelParams {
    pub fn new(kind: KernelKind, lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(KftError::InvalidArgument(format!(
                "lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(Self { kind, lengthscale })
    }
}

/// How a mode's side information enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideInfoKind {
    Raw,
    Gram,
    Rff,
}

/// Per-mode feature matrix: one row per index of the mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInfo {
    pub mode: usize,
    pub features: DenseTensor,
    pub kind: SideInfoKind,
}

impl SideInfo {
    pub fn new(mode: usize, features: DenseTensor) -> Result<Self> {
        if features.order() != 2 {
            return Err(KftError::ShapeMismatch(
                "side information must be a matrix".into(),
            ));
        }
        if !features.all_finite() {
            return Err(KftError::NonFinite(format!("side info for mode {mode}")));
        }
        Ok(Self {
            mode,
            features,
            kind: SideInfoKind::Raw,
        })
    }

    pub fn rows(&self) -> usize {
        self.features.extent(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.extent(1)
    }
}

/// Pairwise Euclidean distances between the rows of `features`.
pub fn pairwise_distances(features: &DenseTensor) -> Result<DenseTensor> {
    if features.order() != 2 {
        return Err(KftError::ShapeMismatch("features must be a matrix".into()));
    }
    let (n, c) = (features.extent(0), features.extent(1));
    let mut out = DenseTensor::zeros(&[n, n]);
    let d = features.data();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..c {
                let diff = d[i * c + k] - d[j * c + k];
                s += diff * diff;
            }
            let r = s.sqrt();
            out.set(&[i, j], r);
            out.set(&[j, i], r);
        }
    }
    Ok(out)
}

/// Gram matrix K = k(D, D) for the given kernel.
pub fn gram(side: &SideInfo, params: &KernelParams) -> Result<DenseTensor> {
    if !side.features.all_finite() {
        return Err(KftError::NonFinite(format!(
            "side info for mode {}",
            side.mode
        )));
    }
    let dists = pairwise_distances(&side.features)?;
    Ok(gram_from_distances(params.kind, &dists, params.lengthscale))
}

/// Gram matrix from precomputed raw distances.
pub fn gram_from_distances(kind: KernelKind, dists: &DenseTensor, lengthscale: f64) -> DenseTensor {
    dists.map(|r| kind.value(r / lengthscale))
}

/// Entrywise ∂K/∂ln ℓ from precomputed raw distances.
pub fn gram_grad_log_lengthscale(
    kind: KernelKind,
    dists: &DenseTensor,
    lengthscale: f64,
) -> DenseTensor {
    dists.map(|r| kind.dvalue_dlog_lengthscale(r, lengthscale))
}

/// Frozen Random Fourier Feature map: I/2 frequency rows, reproducible from
/// the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    pub frequencies: DenseTensor,
    pub count: usize,
    pub seed: u64,
}

/// Draws I/2 frequencies from the kernel's normalized spectral measure,
/// scaled by 1/lengthscale. Deterministic per seed.
pub fn rff_sample(params: &KernelParams, count: usize, dim: usize, seed: u64) -> Result<RffMap> {
    if count < 2 || count % 2 != 0 {
        return Err(KftError::InvalidArgument(format!(
            "feature count must be even and >= 2, got {count}"
        )));
    }
    let half = count / 2;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(half * dim);
    match params.kind.student_dof() {
        None => {
            for _ in 0..half * dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(z / params.lengthscale);
            }
        }
        Some(dof) => {
            let chi = ChiSquared::new(dof).expect("valid dof");
            for _ in 0..half {
                // One chi-squared draw per frequency vector: multivariate t.
                let u: f64 = chi.sample(&mut rng);
                let scale = (dof / u).sqrt() / params.lengthscale;
                for _ in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(z * scale);
                }
            }
        }
    }
    Ok(RffMap {
        frequencies: DenseTensor::new(vec![half, dim], data)?,
        count,
        seed,
    })
}

/// φ(x) = √(2/I)·[cos(ωᵀx)…, sin(ωᵀx)…]; ‖φ(x)‖² = 1 exactly.
pub fn rff_features(x: &[f64], map: &RffMap) -> Result<Vec<f64>> {
    let half = map.count / 2;
    let dim = map.frequencies.extent(1);
    if x.len() != dim {
        return Err(KftError::ShapeMismatch(format!(
            "input dimension {} vs frequency columns {dim}",
            x.len()
        )));
    }
    let norm = (2.0 / map.count as f64).sqrt();
    let mut out = vec![0.0; map.count];
    for i in 0..half {
        let w = &map.frequencies.data()[i * dim..(i + 1) * dim];
        let dot: f64 = w.iter().zip(x).map(|(&a, &b)| a * b).sum();
        out[i] = norm * dot.cos();
        out[half + i] = norm * dot.sin();
    }
    Ok(out)
}

/// Feature matrix Φ = φ(D) with one row per side-information row.
pub fn rff_feature_matrix(features: &DenseTensor, map: &RffMap) -> Result<DenseTensor> {
    let (n, c) = (features.extent(0), features.extent(1));
    let mut data = Vec::with_capacity(n * map.count);
    for i in 0..n {
        let row = &features.data()[i * c..(i + 1) * c];
        data.extend(rff_features(row, map)?);
    }
    DenseTensor::new(vec![n, map.count], data)
}

/// Applies ΦΦᵀ ≈ K along `axis` as two successive mode products, never
/// materializing the n×n Gram.
pub fn rff_gram_apply(v: &DenseTensor, phi: &DenseTensor, axis: Axis) -> Result<DenseTensor> {
    let n = axis.resolve(v.order())?;
    if phi.order() != 2 || phi.extent(0) != v.extent(n) {
        return Err(KftError::ShapeMismatch(format!(
            "feature rows {:?} vs tensor extent {} on axis {n}",
            phi.shape(),
            v.extent(n)
        )));
    }
    let phi_t = phi.transpose()?;
    let inner = mode_product(v, &phi_t, Axis::Index(n))?;
    mode_product(&inner, phi, Axis::Index(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn side_1d(xs: &[f64]) -> SideInfo {
        let n = xs.len();
        SideInfo::new(0, DenseTensor::new(vec![n, 1], xs.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn unit_diagonal_all_kernels() {
        let side = side_1d(&[0.3, -1.2, 4.0]);
        for kind in [
            KernelKind::Rbf,
            KernelKind::Matern05,
            KernelKind::Matern15,
            KernelKind::Matern25,
        ] {
            let k = gram(&side, &KernelParams::new(kind, 0.7).unwrap()).unwrap();
            for i in 0..3 {
                assert!((k.get(&[i, i]) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rbf_closed_form() {
        let side = side_1d(&[0.0, 1.0]);
        let k = gram(&side, &KernelParams::new(KernelKind::Rbf, 1.0).unwrap()).unwrap();
        assert!((k.get(&[0, 1]) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn matern05_closed_form() {
        let side = side_1d(&[0.0, 1.0]);
        let k = gram(&side, &KernelParams::new(KernelKind::Matern05, 1.0).unwrap()).unwrap();
        assert!((k.get(&[0, 1]) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gram_rejects_non_finite() {
        let mut side = side_1d(&[0.0, 1.0]);
        side.features.data_mut()[0] = f64::NAN;
        assert!(gram(&side, &KernelParams::new(KernelKind::Rbf, 1.0).unwrap()).is_err());
    }

    #[test]
    fn rff_same_seed_is_deterministic() {
        let p = KernelParams::new(KernelKind::Rbf, 2.0).unwrap();
        let a = rff_sample(&p, 64, 3, 7).unwrap();
        let b = rff_sample(&p, 64, 3, 7).unwrap();
        assert_eq!(a.frequencies, b.frequencies);
    }

    #[test]
    fn rff_rejects_odd_count() {
        let p = KernelParams::new(KernelKind::Rbf, 1.0).unwrap();
        assert!(rff_sample(&p, 33, 2, 0).is_err());
    }

    #[test]
    fn rbf_frequency_variance_is_inverse_lengthscale() {
        let p = KernelParams::new(KernelKind::Rbf, 1.0).unwrap();
        let map = rff_sample(&p, 40000, 1, 11).unwrap();
        let var =
            map.frequencies.sum_squares() / map.frequencies.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn matern05_frequencies_are_cauchy() {
        let p = KernelParams::new(KernelKind::Matern05, 1.0).unwrap();
        let map = rff_sample(&p, 40000, 1, 13).unwrap();
        let mut abs: Vec<f64> = map.frequencies.data().iter().map(|w| w.abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = abs[abs.len() / 2];
        assert!((median - 1.0).abs() < 0.1, "median {median}");
    }

    #[test]
    fn feature_norm_is_one() {
        let p = KernelParams::new(KernelKind::Matern15, 0.8).unwrap();
        let map = rff_sample(&p, 128, 2, 3).unwrap();
        let phi = rff_features(&[0.4, -2.0], &map).unwrap();
        let norm: f64 = phi.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_at_zero() {
        let p = KernelParams::new(KernelKind::Rbf, 1.0).unwrap();
        let map = rff_sample(&p, 8, 2, 3).unwrap();
        let phi = rff_features(&[0.0, 0.0], &map).unwrap();
        let c = (2.0 / 8.0f64).sqrt();
        for &v in &phi[..4] {
            assert!((v - c).abs() < 1e-15);
        }
        for &v in &phi[4..] {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn rff_inner_product_approximates_rbf() {
        let p = KernelParams::new(KernelKind::Rbf, 1.3).unwrap();
        let map = rff_sample(&p, 1024, 2, 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut err = 0.0;
        let pairs = 100;
        for _ in 0..pairs {
            let x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let px = rff_features(&x, &map).unwrap();
            let py = rff_features(&y, &map).unwrap();
            let approx: f64 = px.iter().zip(&py).map(|(a, b)| a * b).sum();
            let r: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let exact = KernelKind::Rbf.value(r / 1.3);
            err += (approx - exact).abs();
        }
        assert!(err / pairs as f64 <= 0.05);
    }

    #[test]
    fn rff_gram_apply_matches_explicit_product() {
        let p = KernelParams::new(KernelKind::Rbf, 1.0).unwrap();
        let map = rff_sample(&p, 16, 1, 21).unwrap();
        let feats = DenseTensor::new(vec![5, 1], vec![0.0, 0.3, -1.0, 2.0, 0.7]).unwrap();
        let phi = rff_feature_matrix(&feats, &map).unwrap();
        let v = DenseTensor::new(vec![2, 5, 2], (0..20).map(|i| i as f64 * 0.1 - 1.0).collect())
            .unwrap();
        let fast = rff_gram_apply(&v, &phi, Axis::Index(1)).unwrap();
        let explicit = phi.matmul(&phi.transpose().unwrap()).unwrap();
        let slow = mode_product(&v, &explicit, Axis::Index(1)).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let zeros = DenseTensor::zeros(&[2, 5, 2]);
        let z = rff_gram_apply(&zeros, &phi, Axis::Index(1)).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }
}
