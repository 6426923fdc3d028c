//! Run configuration: one JSON file selects the command and all blocks;
//! `--set dotted.path=value` overrides any leaf.

use kft::data::{LoadOptions, SideSignal, SynthSpec};
use kft::error::{KftError, Result};
use kft::eval::SearchSpace;
use kft::kernels::KernelParams;
use kft::model::{ModelConfig, Space, Variant};
use kft::train::TrainConfig;
use kft::variational::{PriorHyper, ViFamily};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    ViTrain,
    Predict,
    Evaluate,
    Calibrate,
    Search,
    Ablate,
    Synth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub path: Option<PathBuf>,
    /// Mode index (as a string key) to side-file path.
    #[serde(default)]
    pub side: BTreeMap<String, PathBuf>,
    #[serde(default = "default_true")]
    pub scale_targets: bool,
    #[serde(default = "default_onehot_cap")]
    pub onehot_cap: usize,
}

fn default_true() -> bool {
    true
}

fn default_onehot_cap() -> usize {
    64
}

impl Default for DataBlock {
    fn default() -> Self {
        Self {
            path: None,
            side: BTreeMap::new(),
            scale_targets: true,
            onehot_cap: 64,
        }
    }
}

impl DataBlock {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            onehot_cap: self.onehot_cap,
            scale_targets: self.scale_targets,
        }
    }

    pub fn side_paths(&self) -> Result<Vec<(usize, PathBuf)>> {
        self.side
            .iter()
            .map(|(k, v)| {
                let mode: usize = k.parse().map_err(|_| KftError::Config {
                    field: format!("data.side.{k}"),
                    msg: "keys must be mode indices".into(),
                })?;
                Ok((mode, v.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub variant: Variant,
    pub space: Space,
    pub rank: usize,
    #[serde(default)]
    pub ls_rank: Option<usize>,
    #[serde(default)]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub kernel: Option<KernelParams>,
    #[serde(default = "default_rff_count")]
    pub rff_count: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub lambda_prime: f64,
}

fn default_rff_count() -> usize {
    64
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            variant: Variant::Wlr,
            space: Space::DualExact,
            rank: 4,
            ls_rank: None,
            groups: None,
            kernel: None,
            rff_count: 64,
            lambda: 0.0,
            lambda_prime: 0.0,
        }
    }
}

impl ModelBlock {
    pub fn to_model_config(&self, extents: Vec<usize>, seed: u64) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            space: self.space,
            extents,
            groups: self.groups.clone(),
            rank: self.rank,
            ls_rank: self.ls_rank,
            kernel: self.kernel,
            rff_count: self.rff_count,
            rff_seed: seed,
            lambda: self.lambda,
            lambda_prime: self.lambda_prime,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_iters")]
    pub iters_per_epoch: usize,
    #[serde(default = "default_batch_fraction")]
    pub batch_fraction: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_true_train")]
    pub train_kernel: bool,
}

fn default_true_train() -> bool {
    true
}

fn default_epochs() -> usize {
    10
}
fn default_iters() -> usize {
    100
}
fn default_batch_fraction() -> f64 {
    0.1
}
fn default_learning_rate() -> f64 {
    0.01
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            epochs: 10,
            iters_per_epoch: 100,
            batch_fraction: 0.1,
            learning_rate: 0.01,
            train_kernel: true,
        }
    }
}

impl TrainBlock {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            iters_per_epoch: self.iters_per_epoch,
            batch_fraction: self.batch_fraction,
            learning_rate: self.learning_rate,
            seed,
            train_kernel: self.train_kernel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViBlock {
    #[serde(default = "default_family")]
    pub family: ViFamily,
    #[serde(default = "default_factor_rank")]
    pub factor_rank: usize,
    #[serde(default = "default_init_var")]
    pub init_var: f64,
    pub prior: PriorHyper,
}

fn default_family() -> ViFamily {
    ViFamily::Univariate
}
fn default_factor_rank() -> usize {
    2
}
fn default_init_var() -> f64 {
    1e-2
}

impl Default for ViBlock {
    fn default() -> Self {
        Self {
            family: ViFamily::Univariate,
            factor_rank: 2,
            init_var: 1e-2,
            prior: PriorHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBlock {
    #[serde(default = "default_n_iters")]
    pub n_iters: usize,
    #[serde(default)]
    pub space: Option<SearchSpace>,
}

fn default_n_iters() -> usize {
    8
}

impl Default for SearchBlock {
    fn default() -> Self {
        Self {
            n_iters: 8,
            space: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictBlock {
    /// Posterior samples per point (variational checkpoints).
    #[serde(default = "default_samples")]
    pub n_samples: usize,
}

fn default_samples() -> usize {
    500
}

impl Default for PredictBlock {
    fn default() -> Self {
        Self { n_samples: 500 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateBlock {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// Modes the heatmap aggregates over.
    #[serde(default = "default_heatmap_modes")]
    pub heatmap_modes: [usize; 2],
}

fn default_heatmap_modes() -> [usize; 2] {
    [0, 1]
}

impl Default for CalibrateBlock {
    fn default() -> Self {
        Self {
            n_samples: 500,
            heatmap_modes: [0, 1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBlock {
    pub extents: Vec<usize>,
    #[serde(default = "default_synth_rank")]
    pub rank: usize,
    #[serde(default = "default_side_signal")]
    pub side_signal: SideSignal,
    #[serde(default = "default_side_dim")]
    pub side_dim: usize,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default)]
    pub n_records: Option<usize>,
}

fn default_synth_rank() -> usize {
    2
}
fn default_side_signal() -> SideSignal {
    SideSignal::Informative
}
fn default_side_dim() -> usize {
    3
}
fn default_noise_sd() -> f64 {
    0.05
}

impl SynthBlock {
    pub fn to_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            extents: self.extents.clone(),
            rank: self.rank,
            side_signal: self.side_signal,
            side_dim: self.side_dim,
            noise_sd: self.noise_sd,
            seed,
            n_records: self.n_records,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub vi: ViBlock,
    #[serde(default)]
    pub search: SearchBlock,
    #[serde(default)]
    pub predict: PredictBlock,
    #[serde(default)]
    pub calibrate: CalibrateBlock,
    #[serde(default)]
    pub synth: Option<SynthBlock>,
}

/// Applies one `dotted.path=value` override to a JSON tree. The value is
/// parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| KftError::Config {
        field: spec.to_string(),
        msg: "overrides take the form path.to.field=value".into(),
    })?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(KftError::Config {
                field: parts[..i].join("."),
                msg: "cannot descend into a non-object".into(),
            });
        }
        let map = cursor.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on last segment")
}

/// Reads a config file and applies overrides; reports the offending field
/// path on schema violations.
pub fn load_config(path: &std::path::Path, overrides: &[String]) -> Result<(RunConfig, serde_json::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| KftError::Config {
        field: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| KftError::Config {
        field: path.display().to_string(),
        msg: format!("invalid JSON: {e}"),
    })?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let config: RunConfig =
        serde_json::from_value(value.clone()).map_err(|e| KftError::Config {
            field: path.display().to_string(),
            msg: e.to_string(),
        })?;
    Ok((config, value))
}

/// A complete example configuration, printed by `kft schema`.
pub fn example_config() -> serde_json::Value {
    serde_json::json!({
        "command": "train",
        "seed": 42,
        "output_dir": "runs/example",
        "checkpoint": null,
        "data": {
            "path": "data.csv",
            "side": {"0": "side_0.csv", "1": "side_1.csv"},
            "scale_targets": true,
            "onehot_cap": 64
        },
        "model": {
            "variant": "wlr",
            "space": "dual-exact",
            "rank": 4,
            "ls_rank": null,
            "groups": null,
            "kernel": {"kind": "rbf", "lengthscale": 1.0},
            "rff_count": 64,
            "lambda": 0.01,
            "lambda_prime": 0.01
        },
        "train": {
            "epochs": 10,
            "iters_per_epoch": 100,
            "batch_fraction": 0.1,
            "learning_rate": 0.01
        },
        "vi": {
            "family": "univariate",
            "factor_rank": 2,
            "init_var": 0.01,
            "prior": {
                "mean_main": 0.0,
                "var_main": 1.0,
                "mean_aux": 0.0,
                "var_aux": 1.0,
                "noise_var": 0.1
            }
        },
        "search": {"n_iters": 8, "space": null},
        "predict": {"n_samples": 500},
        "calibrate": {"n_samples": 500, "heatmap_modes": [0, 1]},
        "synth": {
            "extents": [14, 12, 10],
            "rank": 2,
            "side_signal": "informative",
            "side_dim": 3,
            "noise_sd": 0.05,
            "n_records": 1400
        }
    })
}
