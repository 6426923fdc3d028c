//! Metrics, uniform random hyperparameter search and the synthetic ablation
//! harness probing robustness to constant and noise side information.

use crate::data::{split, synth, CooDataset, SideSignal, SynthSpec};
use crate::error::{KftError, Result};
use crate::kernels::{KernelKind, KernelParams, SideInfo};
use crate::model::{KftModel, ModelConfig, Space, Variant};
use crate::train::{em_train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Coefficient of determination: 1 − SS_res/SS_tot.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() < 2 {
        return Err(KftError::InvalidArgument(
            "r2 needs two equal-length series with >= 2 points".into(),
        ));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot <= 0.0 {
        return Err(KftError::InvalidArgument(
            "target variance is zero".into(),
        ));
    }
    let ss_res: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(KftError::InvalidArgument(
            "rmse needs two equal-length nonempty series".into(),
        ));
    }
    let mse: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Per-split metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub rmse: f64,
}

pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        r2: r2(pred, target)?,
        rmse: rmse(pred, target)?,
    })
}

/// Uniform sampling ranges for the searched hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub batch_fraction: (f64, f64),
    pub learning_rates: Vec<f64>,
    pub rank: (usize, usize),
    pub lambda: (f64, f64),
    pub lambda_prime: (f64, f64),
    pub lengthscale: (f64, f64),
    pub kernels: Vec<KernelKind>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            batch_fraction: (0.01, 0.1),
            learning_rates: vec![1e-3, 1e-2, 1e-1],
            rank: (2, 8),
            lambda: (0.0, 1.0),
            lambda_prime: (0.0, 1.0),
            lengthscale: (0.3, 3.0),
            kernels: vec![
                KernelKind::Rbf,
                KernelKind::Matern05,
                KernelKind::Matern15,
                KernelKind::Matern25,
            ],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b && a.is_finite() && b.is_finite();
        if !ordered(self.batch_fraction)
            || !ordered(self.lambda)
            || !ordered(self.lambda_prime)
            || !ordered(self.lengthscale)
            || self.rank.0 > self.rank.1
            || self.rank.0 == 0
            || self.learning_rates.is_empty()
            || self.kernels.is_empty()
        {
            return Err(KftError::InvalidArgument("search space bounds unordered".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha20Rng) -> SampledConfig {
        let unif = |rng: &mut ChaCha20Rng, (a, b): (f64, f64)| {
            if a == b {
                a
            } else {
                rng.gen_range(a..b)
            }
        };
        SampledConfig {
            batch_fraction: unif(rng, self.batch_fraction),
            learning_rate: self.learning_rates[rng.gen_range(0..self.learning_rates.len())],
            rank: rng.gen_range(self.rank.0..=self.rank.1),
            lambda: unif(rng, self.lambda),
            lambda_prime: unif(rng, self.lambda_prime),
            lengthscale: unif(rng, self.lengthscale),
            kernel: self.kernels[rng.gen_range(0..self.kernels.len())],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledConfig {
    pub batch_fraction: f64,
    pub learning_rate: f64,
    pub rank: usize,
    pub lambda: f64,
    pub lambda_prime: f64,
    pub lengthscale: f64,
    pub kernel: KernelKind,
}

/// One completed search trial, emitted as a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: SampledConfig,
    pub val_r2: Option<f64>,
    pub diverged: bool,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: SampledConfig,
    pub best_val_r2: f64,
    pub trials: Vec<Trial>,
}

/// Uniform random search over `space`: trains one model per sampled config
/// and selects by validation R². Errors when every trial diverged.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    space: &SearchSpace,
    variant: Variant,
    model_space: Space,
    dataset: &CooDataset,
    side: &[Option<SideInfo>],
    base_train: &TrainConfig,
    n_iters: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    if n_iters == 0 {
        return Err(KftError::InvalidArgument("n_iters must be >= 1".into()));
    }
    let split = split(dataset, seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_iters);
    let mut best: Option<(SampledConfig, f64)> = None;
    for index in 0..n_iters {
        let sampled = space.sample(&mut rng);
        let t0 = std::time::Instant::now();
        let result = run_trial(
            &sampled,
            variant,
            model_space,
            dataset,
            side,
            &split.train,
            &split.val,
            base_train,
            seed.wrapping_add(index as u64),
        );
        let wall_secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(val_r2) => {
                if best.as_ref().map_or(true, |(_, b)| val_r2 > *b) {
                    best = Some((sampled, val_r2));
                }
                trials.push(Trial {
                    index,
                    config: sampled,
                    val_r2: Some(val_r2),
                    diverged: false,
                    wall_secs,
                });
            }
            Err(KftError::Diverged { .. }) | Err(KftError::NonFinite(_)) => {
                trials.push(Trial {
                    index,
                    config: sampled,
                    val_r2: None,
                    diverged: true,
                    wall_secs,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let (best, best_val_r2) = best.ok_or_else(|| {
        KftError::InvalidArgument("all search trials diverged".into())
    })?;
    Ok(SearchOutcome {
        best,
        best_val_r2,
        trials,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    sampled: &SampledConfig,
    variant: Variant,
    space: Space,
    dataset: &CooDataset,
    side: &[Option<SideInfo>],
    train_ids: &[usize],
    val_ids: &[usize],
    base_train: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut cfg = ModelConfig::plain(variant, space, dataset.extents.clone(), sampled.rank);
    cfg.kernel = Some(KernelParams::new(sampled.kernel, sampled.lengthscale)?);
    cfg.lambda = sampled.lambda;
    cfg.lambda_prime = sampled.lambda_prime;
    let mut model = KftModel::init(&cfg, side.to_vec(), seed)?;
    let train_cfg = TrainConfig {
        batch_fraction: sampled.batch_fraction,
        learning_rate: sampled.learning_rate,
        seed,
        ..base_train.clone()
    };
    let report = em_train(&mut model, dataset, train_ids, &train_cfg)?;
    if report.diverged.is_some() {
        return Err(KftError::Diverged {
            epoch: report.diverged.unwrap().epoch,
            iteration: report.diverged.unwrap().iteration,
        });
    }
    let (indices, targets) = dataset.gather(val_ids);
    let preds = model.forward(&indices)?;
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(KftError::NonFinite("validation predictions".into()));
    }
    r2(&preds, &targets)
}

/// Conditions of the robustness ablation, in reporting order.
pub const ABLATION_CONDITIONS: [&str; 5] = [
    "vanilla-no-side",
    "vanilla-side",
    "wlr-constant",
    "wlr-noise",
    "wlr-informative",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub seed: u64,
    pub test_r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean test R² for a condition over its seeds.
    pub fn mean(&self, condition: &str) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.condition == condition)
            .map(|r| r.test_r2)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn sd(&self, condition: &str) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.condition == condition)
            .map(|r| r.test_r2)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len().max(1) as f64)
            .sqrt()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| KftError::Data(e.to_string()))?;
        w.write_record(["condition", "seed", "test_r2"])
            .map_err(|e| KftError::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record([r.condition.clone(), r.seed.to_string(), format!("{}", r.test_r2)])
                .map_err(|e| KftError::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The shared synthetic family the ablation conditions run on. The signal is
/// generated through informative side features; conditions swap the side
/// matrices seen by the model.
pub fn ablation_synth_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        extents: vec![14, 12, 10],
        rank: 2,
        side_signal: SideSignal::Informative,
        side_dim: 3,
        noise_sd: 0.15,
        seed,
        n_records: Some(700),
    }
}

fn replace_side(
    template: &[Option<SideInfo>],
    kind: SideSignal,
    seed: u64,
) -> Vec<Option<SideInfo>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    template
        .iter()
        .map(|s| match (s, kind) {
            (None, _) | (_, SideSignal::None) => None,
            (Some(s), SideSignal::Constant) => Some(
                SideInfo::new(
                    s.mode,
                    crate::tensor::DenseTensor::ones(&[s.rows(), s.feature_dim()]),
                )
                .expect("ones side"),
            ),
            (Some(s), SideSignal::GaussianNoise) => {
                let data: Vec<f64> = (0..s.rows() * s.feature_dim())
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Some(
                    SideInfo::new(
                        s.mode,
                        crate::tensor::DenseTensor::new(
                            vec![s.rows(), s.feature_dim()],
                            data,
                        )
                        .expect("noise side"),
                    )
                    .expect("noise side"),
                )
            }
            (Some(s), SideSignal::Informative) => Some(s.clone()),
        })
        .collect()
}

/// One ablation run: five dual-space conditions on a common synthetic
/// dataset, one seed. Returns (condition, test R²) pairs.
pub fn ablation_run(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut data = synth(&ablation_synth_spec(seed))?;
    data.dataset.scale_targets();
    let sp = split(&data.dataset, seed)?;
    let train_cfg = TrainConfig {
        epochs: 40,
        iters_per_epoch: 100,
        batch_fraction: 0.25,
        learning_rate: 0.03,
        seed,
        train_kernel: false,
    };
    let kernel = KernelParams::new(KernelKind::Rbf, 2.0)?;
    let mut out = Vec::new();
    for condition in ABLATION_CONDITIONS {
        let (variant, side) = match condition {
            "vanilla-no-side" => (Variant::Vanilla, replace_side(&data.side, SideSignal::None, 0)),
            "vanilla-side" => (
                Variant::Vanilla,
                replace_side(&data.side, SideSignal::Informative, 0),
            ),
            "wlr-constant" => (
                Variant::Wlr,
                replace_side(&data.side, SideSignal::Constant, 0),
            ),
            "wlr-noise" => (
                Variant::Wlr,
                replace_side(&data.side, SideSignal::GaussianNoise, seed.wrapping_add(77)),
            ),
            "wlr-informative" => (
                Variant::Wlr,
                replace_side(&data.side, SideSignal::Informative, 0),
            ),
            _ => unreachable!(),
        };
        let mut cfg = ModelConfig::plain(
            variant,
            Space::DualExact,
            data.dataset.extents.clone(),
            3,
        );
        cfg.kernel = Some(kernel);
        cfg.lambda = 1e-3;
        let mut model = KftModel::init(&cfg, side, seed.wrapping_add(13))?;
        let report = em_train(&mut model, &data.dataset, &sp.train, &train_cfg)?;
        let test_r2 = if report.diverged.is_some() {
            f64::NEG_INFINITY
        } else {
            let (indices, targets) = data.dataset.gather(&sp.test);
            r2(&model.forward(&indices)?, &targets)?
        };
        out.push((condition.to_string(), test_r2));
    }
    Ok(out)
}

/// Runs the ablation over five seeds derived from `seed`.
pub fn ablation_suite(seed: u64) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for k in 0..5u64 {
        let s = seed.wrapping_add(k);
        for (condition, test_r2) in ablation_run(s)? {
            rows.push(AblationRow {
                condition,
                seed: s,
                test_r2,
            });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_boundary_cases() {
        let y = vec![1.0, -1.0, 2.0];
        assert!((r2(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let mean = vec![2.0 / 3.0; 3];
        assert!(r2(&mean, &y).unwrap().abs() < 1e-15);
        assert!((r2(&[0.0, 0.0], &[1.0, -1.0]).unwrap()).abs() < 1e-15);
        assert!(r2(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn search_space_sampling_is_deterministic() {
        let space = SearchSpace::default();
        let mut a = ChaCha20Rng::seed_from_u64(4);
        let mut b = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..10 {
            assert_eq!(space.sample(&mut a), space.sample(&mut b));
        }
    }
}
