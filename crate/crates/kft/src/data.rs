//! Dataset ingestion and preparation: sparse coordinate-format observations,
//! per-mode side-information files, z-transforms, seeded splits and the
//! synthetic generators the robustness experiments run on.

use crate::error::{KftError, Result};
use crate::kernels::SideInfo;
use crate::model::{AuxCores, KftModel, ModelConfig, Space, Variant};
use crate::tensor::DenseTensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// Affine transform retained so predictions can be mapped back to the
/// original target scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub mean: f64,
    pub std: f64,
}

impl Transform {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Sparse observations of a multi-way target: one (index tuple, value)
/// record per observed cell.
#[derive(Debug, Clone)]
pub struct CooDataset {
    pub extents: Vec<usize>,
    pub records: Vec<(Vec<usize>, f64)>,
    /// Statistics of the original targets (before any scaling).
    pub target_mean: f64,
    pub target_std: f64,
    /// Present when the stored targets are z-scores.
    pub target_transform: Option<Transform>,
}

impl CooDataset {
    pub fn new(extents: Vec<usize>, records: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let p = extents.len();
        let mut seen = HashSet::with_capacity(records.len());
        for (tuple, y) in &records {
            if tuple.len() != p {
                return Err(KftError::Data(format!(
                    "index tuple {tuple:?} has wrong arity (expected {p})"
                )));
            }
            for (m, (&i, &e)) in tuple.iter().zip(&extents).enumerate() {
                if i >= e {
                    return Err(KftError::Data(format!(
                        "index {i} out of range {e} on mode {m}"
                    )));
                }
            }
            if !y.is_finite() {
                return Err(KftError::Data("non-finite target".into()));
            }
            if !seen.insert(tuple.clone()) {
                return Err(KftError::Data(format!("duplicate index tuple {tuple:?}")));
            }
        }
        let n = records.len().max(1) as f64;
        let mean = records.iter().map(|(_, y)| y).sum::<f64>() / n;
        let var = records.iter().map(|(_, y)| (y - mean) * (y - mean)).sum::<f64>() / n;
        Ok(Self {
            extents,
            records,
            target_mean: mean,
            target_std: var.sqrt(),
            target_transform: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mode_count(&self) -> usize {
        self.extents.len()
    }

    /// Replaces targets by z-scores (population std). No-op when the targets
    /// are constant.
    pub fn scale_targets(&mut self) {
        if self.target_transform.is_some() || self.target_std <= 1e-12 {
            return;
        }
        let t = Transform {
            mean: self.target_mean,
            std: self.target_std,
        };
        for (_, y) in &mut self.records {
            *y = t.apply(*y);
        }
        self.target_transform = Some(t);
    }

    pub fn gather(&self, ids: &[usize]) -> (Vec<Vec<usize>>, Vec<f64>) {
        let mut idx = Vec::with_capacity(ids.len());
        let mut y = Vec::with_capacity(ids.len());
        for &i in ids {
            idx.push(self.records[i].0.clone());
            y.push(self.records[i].1);
        }
        (idx, y)
    }
}

/// Disjoint, exhaustive record index lists in 60/20/20 proportions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded shuffle then 60/20/20 cut; integer rounding is assigned to the
/// training portion.
pub fn split(dataset: &CooDataset, seed: u64) -> Result<Split> {
    let n = dataset.len();
    if n < 5 {
        return Err(KftError::Data(format!(
            "need at least 5 records to split, have {n}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = n / 5;
    let n_test = n / 5;
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
        seed,
    })
}

/// Column-wise z-transform with population std. Columns with (near) zero
/// spread are left untouched so constant side information survives loading.
pub fn z_transform_columns(features: &mut DenseTensor) -> Vec<Option<Transform>> {
    let (n, c) = (features.extent(0), features.extent(1));
    let mut transforms = Vec::with_capacity(c);
    for j in 0..c {
        let mean = (0..n).map(|i| features.data()[i * c + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| {
                let d = features.data()[i * c + j] - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if std <= 1e-12 {
            transforms.push(None);
            continue;
        }
        let t = Transform { mean, std };
        for i in 0..n {
            let v = features.data()[i * c + j];
            features.data_mut()[i * c + j] = t.apply(v);
        }
        transforms.push(Some(t));
    }
    transforms
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Cap on distinct values a categorical side column may take.
    pub onehot_cap: usize,
    /// Replace targets by z-scores at load.
    pub scale_targets: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            onehot_cap: 64,
            scale_targets: true,
        }
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| KftError::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| KftError::DataAt {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let fields: Vec<String> = rec.iter().map(|s| s.to_string()).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

fn looks_like_header(fields: &[String]) -> bool {
    fields.iter().any(|f| f.parse::<f64>().is_err())
}

/// Loads the observation file (columns i₁,…,i_P,y) and one side file per
/// mode (first column = mode index). Features are one-hot encoded where
/// categorical and z-transformed; targets are optionally z-scored.
pub fn load(
    data_path: &Path,
    side_paths: &[(usize, std::path::PathBuf)],
    options: &LoadOptions,
) -> Result<(CooDataset, Vec<Option<SideInfo>>)> {
    let mut rows = read_csv_rows(data_path)?;
    if rows.is_empty() {
        return Err(KftError::Data(format!(
            "{}: no records",
            data_path.display()
        )));
    }
    if looks_like_header(&rows[0].1) {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(KftError::Data(format!(
            "{}: no records after header",
            data_path.display()
        )));
    }
    let arity = rows[0].1.len();
    if arity < 2 {
        return Err(KftError::Data(format!(
            "{}: need at least one index column and a target",
            data_path.display()
        )));
    }
    let p = arity - 1;
    let mut records = Vec::with_capacity(rows.len());
    let mut extents = vec![0usize; p];
    for (line, fields) in &rows {
        if fields.len() != arity {
            return Err(KftError::DataAt {
                path: data_path.display().to_string(),
                line: *line,
                msg: format!("expected {arity} fields, found {}", fields.len()),
            });
        }
        let mut tuple = Vec::with_capacity(p);
        for (m, f) in fields[..p].iter().enumerate() {
            let i: usize = f.parse().map_err(|_| KftError::DataAt {
                path: data_path.display().to_string(),
                line: *line,
                msg: format!("non-integer index `{f}` in column {m}"),
            })?;
            extents[m] = extents[m].max(i + 1);
            tuple.push(i);
        }
        let y: f64 = fields[p].parse().map_err(|_| KftError::DataAt {
            path: data_path.display().to_string(),
            line: *line,
            msg: format!("non-numeric target `{}`", fields[p]),
        })?;
        records.push((tuple, y));
    }

    let mut side: Vec<Option<SideInfo>> = vec![None; p];
    for (mode, path) in side_paths {
        if *mode >= p {
            return Err(KftError::Data(format!(
                "side file for mode {mode}, dataset has {p} modes"
            )));
        }
        let (features, n_rows) = load_side_file(path, options)?;
        extents[*mode] = extents[*mode].max(n_rows);
        if n_rows < extents[*mode] {
            return Err(KftError::Data(format!(
                "{}: mode {mode} has {} side rows but indices up to {}",
                path.display(),
                n_rows,
                extents[*mode] - 1
            )));
        }
        let mut s = SideInfo::new(*mode, features)?;
        s.kind = crate::kernels::SideInfoKind::Raw;
        side[*mode] = Some(s);
    }

    let mut ds = CooDataset::new(extents, records).map_err(|e| match e {
        KftError::Data(msg) => KftError::Data(format!("{}: {msg}", data_path.display())),
        e => e,
    })?;
    if options.scale_targets {
        ds.scale_targets();
    }
    Ok((ds, side))
}

/// One side file: first column is the mode index, remaining columns are
/// numeric or categorical features. Returns the processed matrix ordered by
/// mode index and the row count.
fn load_side_file(path: &Path, options: &LoadOptions) -> Result<(DenseTensor, usize)> {
    let mut rows = read_csv_rows(path)?;
    if rows.is_empty() {
        return Err(KftError::Data(format!("{}: empty side file", path.display())));
    }
    if looks_like_header(&rows[0].1) {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(KftError::Data(format!("{}: no side rows", path.display())));
    }
    let width = rows[0].1.len();
    if width < 2 {
        return Err(KftError::Data(format!(
            "{}: side files need an index column and at least one feature",
            path.display()
        )));
    }
    let n_cols = width - 1;
    // Column typing: numeric unless some entry fails to parse.
    let mut is_numeric = vec![true; n_cols];
    for (_, fields) in &rows {
        for j in 0..n_cols.min(fields.len().saturating_sub(1)) {
            if fields[j + 1].parse::<f64>().is_err() {
                is_numeric[j] = false;
            }
        }
    }
    let mut categories: Vec<Vec<String>> = vec![Vec::new(); n_cols];
    for (line, fields) in &rows {
        if fields.len() != width {
            return Err(KftError::DataAt {
                path: path.display().to_string(),
                line: *line,
                msg: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        for j in 0..n_cols {
            if !is_numeric[j] && !categories[j].contains(&fields[j + 1]) {
                categories[j].push(fields[j + 1].clone());
            }
        }
    }
    for (j, cats) in categories.iter_mut().enumerate() {
        cats.sort();
        if !is_numeric[j] && cats.len() > options.onehot_cap {
            return Err(KftError::Data(format!(
                "{}: categorical column {j} has {} levels (cap {})",
                path.display(),
                cats.len(),
                options.onehot_cap
            )));
        }
    }
    let out_cols: usize = (0..n_cols)
        .map(|j| if is_numeric[j] { 1 } else { categories[j].len() })
        .sum();

    let n = rows.len();
    let mut seen = vec![false; n];
    let mut data = vec![0.0; n * out_cols];
    for (line, fields) in &rows {
        let idx: usize = fields[0].parse().map_err(|_| KftError::DataAt {
            path: path.display().to_string(),
            line: *line,
            msg: format!("non-integer mode index `{}`", fields[0]),
        })?;
        if idx >= n {
            return Err(KftError::DataAt {
                path: path.display().to_string(),
                line: *line,
                msg: format!("mode index {idx} out of range for {n} rows"),
            });
        }
        if seen[idx] {
            return Err(KftError::DataAt {
                path: path.display().to_string(),
                line: *line,
                msg: format!("duplicate side row for index {idx}"),
            });
        }
        seen[idx] = true;
        let mut col = 0usize;
        for j in 0..n_cols {
            if is_numeric[j] {
                let v: f64 = fields[j + 1].parse().map_err(|_| KftError::DataAt {
                    path: path.display().to_string(),
                    line: *line,
                    msg: format!("non-numeric field `{}`", fields[j + 1]),
                })?;
                data[idx * out_cols + col] = v;
                col += 1;
            } else {
                let pos = categories[j]
                    .iter()
                    .position(|c| c == &fields[j + 1])
                    .expect("seen during scan");
                data[idx * out_cols + col + pos] = 1.0;
                col += categories[j].len();
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(KftError::Data(format!(
            "{}: missing side row for index {missing}",
            path.display()
        )));
    }
    let mut features = DenseTensor::new(vec![n, out_cols], data)?;
    z_transform_columns(&mut features);
    Ok((features, n))
}

/// Writes a dataset (and side info) back to CSV files that [`load`] accepts.
pub fn save_dataset(
    dataset: &CooDataset,
    side: &[Option<SideInfo>],
    data_path: &Path,
    side_path: impl Fn(usize) -> std::path::PathBuf,
) -> Result<Vec<(usize, std::path::PathBuf)>> {
    let mut w = csv::Writer::from_path(data_path)
        .map_err(|e| KftError::Data(format!("{}: {e}", data_path.display())))?;
    for (tuple, y) in &dataset.records {
        let mut row: Vec<String> = tuple.iter().map(|i| i.to_string()).collect();
        row.push(format!("{y}"));
        w.write_record(&row)
            .map_err(|e| KftError::Data(e.to_string()))?;
    }
    w.flush()?;
    let mut paths = Vec::new();
    for s in side.iter().flatten() {
        let path = side_path(s.mode);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| KftError::Data(format!("{}: {e}", path.display())))?;
        let (n, c) = (s.features.extent(0), s.features.extent(1));
        for i in 0..n {
            let mut row = vec![i.to_string()];
            for j in 0..c {
                row.push(format!("{}", s.features.get(&[i, j])));
            }
            w.write_record(&row)
                .map_err(|e| KftError::Data(e.to_string()))?;
        }
        w.flush()?;
        paths.push((s.mode, path));
    }
    Ok(paths)
}

/// Kind of side information a synthetic dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideSignal {
    /// Targets are generated through the side features (WLR-style truth).
    Informative,
    /// All-ones side matrices; the planted signal is index-only.
    Constant,
    /// Standard Gaussian side matrices; the planted signal is index-only.
    GaussianNoise,
    /// No side information at all.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub extents: Vec<usize>,
    pub rank: usize,
    pub side_signal: SideSignal,
    pub side_dim: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Number of observed cells; `None` observes every cell.
    pub n_records: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: CooDataset,
    pub side: Vec<Option<SideInfo>>,
    /// Noise-free target per record, aligned with `dataset.records`.
    pub truth: Vec<f64>,
}

/// Plants a TT model (optionally generating through side features), samples
/// observed cells and adds Gaussian noise.
pub fn synth(spec: &SynthSpec) -> Result<SynthData> {
    if spec.extents.is_empty() || spec.rank == 0 {
        return Err(KftError::InvalidArgument("empty synthetic spec".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let p = spec.extents.len();

    let side: Vec<Option<SideInfo>> = match spec.side_signal {
        SideSignal::None => vec![None; p],
        SideSignal::Constant => spec
            .extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                Some(SideInfo::new(m, DenseTensor::ones(&[n, spec.side_dim])).unwrap())
            })
            .collect(),
        SideSignal::GaussianNoise => spec
            .extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let data: Vec<f64> = (0..n * spec.side_dim)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Some(
                    SideInfo::new(m, DenseTensor::new(vec![n, spec.side_dim], data).unwrap())
                        .unwrap(),
                )
            })
            .collect(),
        // Informative side information is categorical: each row is one of a
        // few prototype feature vectors, the common shape of covariates in
        // this domain. Signal generated through the features is then
        // category-structured, which an index-free kernelized chain can
        // capture but never refine per index.
        SideSignal::Informative => spec
            .extents
            .iter()
            .enumerate()
            .map(|(m, &n)| {
                let n_cats = 3usize.min(n);
                let protos: Vec<Vec<f64>> = (0..n_cats)
                    .map(|_| {
                        (0..spec.side_dim)
                            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                            .collect()
                    })
                    .collect();
                let mut data = Vec::with_capacity(n * spec.side_dim);
                for i in 0..n {
                    // cycle categories so each is populated
                    let proto = &protos[i % n_cats];
                    data.extend_from_slice(proto);
                }
                Some(
                    SideInfo::new(m, DenseTensor::new(vec![n, spec.side_dim], data).unwrap())
                        .unwrap(),
                )
            })
            .collect(),
    };

    // Planted model: informative data is generated through the features via
    // a WLR-style reweighted primal chain; otherwise the signal is a plain
    // TT chain over the indices.
    let truth_model = match spec.side_signal {
        SideSignal::Informative => {
            let mut cfg = ModelConfig::plain(
                Variant::Wlr,
                Space::Primal,
                spec.extents.clone(),
                spec.rank,
            );
            cfg.lambda = 0.0;
            let mut model = KftModel::init(&cfg, side.clone(), spec.seed.wrapping_add(1))?;
            if let AuxCores::Wlr { weights } = &mut model.aux {
                for w in weights {
                    for v in w.tensor.data_mut() {
                        *v = 1.0
                            + std::env::var("KFT_TUNE_WIGGLE")
                                .ok()
                                .and_then(|w| w.parse().ok())
                                .unwrap_or(0.4)
                                * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
            }
            model
        }
        _ => {
            let cfg = ModelConfig::plain(
                Variant::Vanilla,
                Space::Primal,
                spec.extents.clone(),
                spec.rank,
            );
            KftModel::init(&cfg, vec![None; p], spec.seed.wrapping_add(1))?
        }
    };

    let total: usize = spec.extents.iter().product();
    let n_records = spec.n_records.unwrap_or(total).min(total);
    let mut cells: Vec<usize> = (0..total).collect();
    cells.shuffle(&mut rng);
    // Informative datasets carry a popularity skew on mode 0: half the
    // indices are observed an order of magnitude more often, the long-tailed
    // shape sparse interaction data has in the wild. Weighted reservoir-less
    // selection: keep a cell with probability proportional to its weight.
    if matches!(spec.side_signal, SideSignal::Informative) && spec.n_records.is_some() {
        let head = (spec.extents[0] / 2).min(20);
        let stride: usize = spec.extents[1..].iter().product();
        let tail_weight = 0.08;
        let mut kept = Vec::with_capacity(n_records);
        let mut rest = Vec::new();
        for &c in &cells {
            let i0 = c / stride;
            if i0 < head || rng.gen_range(0.0..1.0) < tail_weight {
                kept.push(c);
            } else {
                rest.push(c);
            }
            if kept.len() == n_records {
                break;
            }
        }
        for &c in &rest {
            if kept.len() == n_records {
                break;
            }
            kept.push(c);
        }
        cells = kept;
    }
    cells.truncate(n_records);
    cells.sort_unstable();
    let unravel = |mut flat: usize| -> Vec<usize> {
        let mut tuple = vec![0usize; p];
        for m in (0..p).rev() {
            tuple[m] = flat % spec.extents[m];
            flat /= spec.extents[m];
        }
        tuple
    };
    let indices: Vec<Vec<usize>> = cells.into_iter().map(unravel).collect();
    let truth = truth_model.forward(&indices)?;
    let records: Vec<(Vec<usize>, f64)> = indices
        .into_iter()
        .zip(&truth)
        .map(|(tuple, &t)| {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            (tuple, t + spec.noise_sd * eps)
        })
        .collect();
    let dataset = CooDataset::new(spec.extents.clone(), records)?;
    Ok(SynthData {
        dataset,
        side,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> CooDataset {
        let records: Vec<(Vec<usize>, f64)> =
            (0..n).map(|i| (vec![i % 5, i / 5], i as f64)).collect();
        CooDataset::new(vec![5, (n + 4) / 5], records).unwrap()
    }

    #[test]
    fn duplicate_records_rejected() {
        let records = vec![(vec![0, 0], 1.0), (vec![0, 0], 2.0)];
        assert!(CooDataset::new(vec![2, 2], records).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = tiny_dataset(10);
        let s = split(&ds, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s, split(&ds, 3).unwrap());
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn different_seeds_differ() {
        let ds = tiny_dataset(1000);
        let a = split(&ds, 1).unwrap();
        let b = split(&ds, 2).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn split_requires_five_records() {
        let ds = tiny_dataset(4);
        assert!(split(&ds, 0).is_err());
    }

    #[test]
    fn z_scores_match_closed_form() {
        let mut f = DenseTensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        z_transform_columns(&mut f);
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in f.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn z_transform_leaves_constant_columns() {
        let mut f = DenseTensor::ones(&[4, 2]);
        z_transform_columns(&mut f);
        assert!(f.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn target_scaling_round_trips() {
        let mut ds = tiny_dataset(10);
        let originals: Vec<f64> = ds.records.iter().map(|(_, y)| *y).collect();
        ds.scale_targets();
        let t = ds.target_transform.unwrap();
        for ((_, z), y) in ds.records.iter().zip(&originals) {
            assert!((t.invert(*z) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn synth_constant_side_is_all_ones() {
        let data = synth(&SynthSpec {
            extents: vec![4, 3],
            rank: 2,
            side_signal: SideSignal::Constant,
            side_dim: 2,
            noise_sd: 0.0,
            seed: 5,
            n_records: None,
        })
        .unwrap();
        for s in data.side.iter().flatten() {
            assert!(s.features.data().iter().all(|&v| v == 1.0));
        }
        assert_eq!(data.dataset.len(), 12);
    }

    #[test]
    fn synth_is_seed_reproducible() {
        let spec = SynthSpec {
            extents: vec![4, 3],
            rank: 2,
            side_signal: SideSignal::GaussianNoise,
            side_dim: 2,
            noise_sd: 0.1,
            seed: 9,
            n_records: Some(8),
        };
        let a = synth(&spec).unwrap();
        let b = synth(&spec).unwrap();
        assert_eq!(a.dataset.records, b.dataset.records);
        assert_eq!(
            a.side[0].as_ref().unwrap().features,
            b.side[0].as_ref().unwrap().features
        );
    }
}
