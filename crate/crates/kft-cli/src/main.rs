//! `kft` command line: config-driven train / vi-train / predict / evaluate /
//! calibrate / search / ablate / synth workflows writing their artifacts
//! under a single run directory.

mod config;

use clap::{Parser, Subcommand};
use config::{load_config, Command as RunCommand, RunConfig};
use kft::data::{load, save_dataset, split, CooDataset};
use kft::error::{KftError, Result};
use kft::eval::{ablation_suite, metrics, random_search, SearchSpace};
use kft::kernels::SideInfo;
use kft::model::checkpoint::{load_model, save_model};
use kft::model::KftModel;
use kft::train::{em_train, write_trace_csv};
use kft::variational::checkpoint::{load_vi_model, save_vi_model};
use kft::variational::{calibration, calibration_heatmap, vi_train, ViConfig, ViModel};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kft", version, about = "Tensor-train regression with kernelized side information")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Executes the command named in a JSON config file.
    Run {
        /// Path to the run configuration.
        config: PathBuf,
        /// Override any config leaf: --set train.epochs=20
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    /// Prints a complete example configuration.
    Schema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        CliCommand::Schema => {
            println!(
                "{}",
                serde_json::to_string_pretty(&config::example_config()).expect("static json")
            );
            ExitCode::SUCCESS
        }
        CliCommand::Run { config, set } => match run(&config, &set) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_code(&e))
            }
        },
    }
}

fn exit_code(e: &KftError) -> u8 {
    match e {
        KftError::Config { .. } | KftError::InvalidArgument(_) => 2,
        KftError::ShapeMismatch(_) | KftError::RankMismatch(_) | KftError::AxisOutOfRange { .. } => 2,
        KftError::Data(_)
        | KftError::DataAt { .. }
        | KftError::Io(_)
        | KftError::IndexOutOfRange(_)
        | KftError::Checkpoint(_) => 3,
        KftError::Diverged { .. } | KftError::NonFinite(_) | KftError::NotPositiveDefinite(_) => 4,
    }
}

fn run(config_path: &Path, overrides: &[String]) -> Result<()> {
    let (config, resolved) = load_config(config_path, overrides)?;
    std::fs::create_dir_all(&config.output_dir)?;
    write_manifest(&config, &resolved)?;
    match config.command {
        RunCommand::Synth => cmd_synth(&config),
        RunCommand::Train => cmd_train(&config),
        RunCommand::ViTrain => cmd_vi_train(&config),
        RunCommand::Predict => cmd_predict(&config),
        RunCommand::Evaluate => cmd_evaluate(&config),
        RunCommand::Calibrate => cmd_calibrate(&config),
        RunCommand::Search => cmd_search(&config),
        RunCommand::Ablate => cmd_ablate(&config),
    }
}

fn write_manifest(config: &RunConfig, resolved: &serde_json::Value) -> Result<()> {
    let manifest = serde_json::json!({
        "tool": "kft",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config": resolved,
    });
    write_json(&config.output_dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| KftError::Data(format!("json encode: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_data(config: &RunConfig) -> Result<(CooDataset, Vec<Option<SideInfo>>)> {
    let path = config.data.path.as_ref().ok_or_else(|| KftError::Config {
        field: "data.path".into(),
        msg: "this command needs an input dataset".into(),
    })?;
    load(path, &config.data.side_paths()?, &config.data.load_options())
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    let block = config.synth.as_ref().ok_or_else(|| KftError::Config {
        field: "synth".into(),
        msg: "the synth command needs a synth block".into(),
    })?;
    let data = kft::data::synth(&block.to_spec(config.seed))?;
    let out = &config.output_dir;
    let side_paths = save_dataset(
        &data.dataset,
        &data.side,
        &out.join("data.csv"),
        |m| out.join(format!("side_{m}.csv")),
    )?;
    let summary = serde_json::json!({
        "records": data.dataset.len(),
        "extents": data.dataset.extents,
        "data": out.join("data.csv"),
        "side": side_paths.iter().map(|(m, p)| (m.to_string(), p)).collect::<std::collections::BTreeMap<_, _>>(),
    });
    write_json(&out.join("synth.json"), &summary)?;
    println!("wrote {} records to {}", data.dataset.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitMetrics {
    train: kft::eval::Metrics,
    val: kft::eval::Metrics,
    test: kft::eval::Metrics,
}

fn split_metrics(
    dataset: &CooDataset,
    sp: &kft::data::Split,
    predict: impl Fn(&[Vec<usize>]) -> Result<Vec<f64>>,
) -> Result<SplitMetrics> {
    let eval_ids = |ids: &[usize]| -> Result<kft::eval::Metrics> {
        let (indices, targets) = dataset.gather(ids);
        metrics(&predict(&indices)?, &targets)
    };
    Ok(SplitMetrics {
        train: eval_ids(&sp.train)?,
        val: eval_ids(&sp.val)?,
        test: eval_ids(&sp.test)?,
    })
}

fn extra_meta(config: &RunConfig, dataset: &CooDataset) -> serde_json::Value {
    serde_json::json!({
        "target_transform": dataset.target_transform,
        "split_seed": config.seed,
    })
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let (dataset, side) = load_data(config)?;
    let sp = split(&dataset, config.seed)?;
    let mc = config
        .model
        .to_model_config(dataset.extents.clone(), config.seed);
    let mut model = KftModel::init(&mc, side, config.seed)?;
    let report = em_train(
        &mut model,
        &dataset,
        &sp.train,
        &config.train.to_train_config(config.seed),
    )?;
    write_trace_csv(&report.trace, &config.output_dir.join("loss_trace.csv"))?;
    if let Some(d) = report.diverged {
        return Err(KftError::Diverged {
            epoch: d.epoch,
            iteration: d.iteration,
        });
    }
    save_model(
        &model,
        extra_meta(config, &dataset),
        &config.output_dir.join("checkpoint.kft"),
    )?;
    let m = split_metrics(&dataset, &sp, |idx| model.forward(idx))?;
    write_json(&config.output_dir.join("metrics.json"), &m)?;
    println!(
        "train R² {:.4}  val R² {:.4}  test R² {:.4}",
        m.train.r2, m.val.r2, m.test.r2
    );
    Ok(())
}

fn cmd_vi_train(config: &RunConfig) -> Result<()> {
    let (dataset, side) = load_data(config)?;
    let sp = split(&dataset, config.seed)?;
    let mc = config
        .model
        .to_model_config(dataset.extents.clone(), config.seed);
    let mut vc = ViConfig::new(mc, config.vi.family, config.vi.prior);
    vc.factor_rank = config.vi.factor_rank;
    vc.init_var = config.vi.init_var;
    let mut vi = ViModel::init(&vc, side, config.seed)?;
    let report = vi_train(
        &mut vi,
        &dataset,
        &sp.train,
        &config.train.to_train_config(config.seed),
    )?;
    write_trace_csv(&report.trace, &config.output_dir.join("loss_trace.csv"))?;
    if let Some(d) = report.diverged {
        return Err(KftError::Diverged {
            epoch: d.epoch,
            iteration: d.iteration,
        });
    }
    save_vi_model(
        &vi,
        extra_meta(config, &dataset),
        &config.output_dir.join("checkpoint.kft"),
    )?;
    let m = split_metrics(&dataset, &sp, |idx| vi.mean_forward(idx))?;
    write_json(&config.output_dir.join("metrics.json"), &m)?;
    println!(
        "mean-chain R²: train {:.4}  val {:.4}  test {:.4}",
        m.train.r2, m.val.r2, m.test.r2
    );
    Ok(())
}

fn checkpoint_path(config: &RunConfig) -> Result<&PathBuf> {
    config.checkpoint.as_ref().ok_or_else(|| KftError::Config {
        field: "checkpoint".into(),
        msg: "this command needs a checkpoint path".into(),
    })
}

fn target_transform_of(extra: &serde_json::Value) -> Option<kft::data::Transform> {
    serde_json::from_value(extra.get("target_transform")?.clone()).ok()
}

fn cmd_predict(config: &RunConfig) -> Result<()> {
    let ckpt = checkpoint_path(config)?;
    let (dataset, _) = load_data(config)?;
    let indices: Vec<Vec<usize>> = dataset.records.iter().map(|(t, _)| t.clone()).collect();
    // Everything is computed before any output file is created.
    let mut header: Vec<String> = (0..dataset.mode_count()).map(|m| format!("i{m}")).collect();
    header.push("prediction".into());
    let rows: Vec<Vec<f64>> = match load_model(ckpt) {
        Ok((model, extra)) => {
            let transform = target_transform_of(&extra);
            let preds = model.forward(&indices)?;
            preds
                .into_iter()
                .map(|p| vec![transform.map_or(p, |t| t.invert(p))])
                .collect()
        }
        Err(_) => {
            let (vi, extra) = load_vi_model(ckpt)?;
            let transform = target_transform_of(&extra);
            let samples =
                vi.posterior_predictive(&indices, config.predict.n_samples, config.seed)?;
            let means = vi.mean_forward(&indices)?;
            let levels: Vec<f64> = (0..10).map(|k| 0.05 + 0.1 * k as f64).collect();
            for l in &levels {
                header.push(format!("p{:02.0}", l * 100.0));
            }
            means
                .into_iter()
                .zip(samples)
                .map(|(m, mut s)| {
                    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                    let mut row = vec![m];
                    for &l in &levels {
                        let pos = l * (s.len() - 1) as f64;
                        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
                        let w = pos - lo as f64;
                        row.push(s[lo] * (1.0 - w) + s[hi] * w);
                    }
                    if let Some(t) = transform {
                        for v in &mut row {
                            *v = t.invert(*v);
                        }
                    }
                    row
                })
                .collect()
        }
    };
    let path = config.output_dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| KftError::Data(e.to_string()))?;
    w.write_record(&header)
        .map_err(|e| KftError::Data(e.to_string()))?;
    for (tuple, row) in indices.iter().zip(rows) {
        let mut rec: Vec<String> = tuple.iter().map(|i| i.to_string()).collect();
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)
            .map_err(|e| KftError::Data(e.to_string()))?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(config: &RunConfig) -> Result<()> {
    let ckpt = checkpoint_path(config)?;
    let (dataset, _) = load_data(config)?;
    let sp = split(&dataset, config.seed)?;
    let m = match load_model(ckpt) {
        Ok((model, _)) => split_metrics(&dataset, &sp, |idx| model.forward(idx))?,
        Err(_) => {
            let (vi, _) = load_vi_model(ckpt)?;
            split_metrics(&dataset, &sp, |idx| vi.mean_forward(idx))?
        }
    };
    write_json(&config.output_dir.join("metrics.json"), &m)?;
    println!(
        "train R² {:.4}  val R² {:.4}  test R² {:.4}",
        m.train.r2, m.val.r2, m.test.r2
    );
    Ok(())
}

fn cmd_calibrate(config: &RunConfig) -> Result<()> {
    let ckpt = checkpoint_path(config)?;
    let (vi, _) = load_vi_model(ckpt)?;
    let (dataset, _) = load_data(config)?;
    let sp = split(&dataset, config.seed)?;
    let (indices, targets) = dataset.gather(&sp.test);
    let samples = vi.posterior_predictive(&indices, config.calibrate.n_samples, config.seed)?;
    let means = vi.mean_forward(&indices)?;
    let report = calibration(&samples, &targets, &means)?;
    write_json(&config.output_dir.join("calibration.json"), &report)?;
    let [ma, mb] = config.calibrate.heatmap_modes;
    if ma >= dataset.mode_count() || mb >= dataset.mode_count() {
        return Err(KftError::Config {
            field: "calibrate.heatmap_modes".into(),
            msg: format!("modes must be < {}", dataset.mode_count()),
        });
    }
    let rows = calibration_heatmap(&indices, &samples, &targets, ma, mb)?;
    let path = config.output_dir.join("calibration_heatmap.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| KftError::Data(e.to_string()))?;
    w.write_record(["mode_a", "mode_b", "alpha", "coverage"])
        .map_err(|e| KftError::Data(e.to_string()))?;
    for (ia, ib, alpha, cov) in rows {
        w.write_record([ia.to_string(), ib.to_string(), format!("{alpha}"), format!("{cov}")])
            .map_err(|e| KftError::Data(e.to_string()))?;
    }
    w.flush()?;
    println!("Ξ = {:.4}  R² = {:.4}  η = {:.4}", report.total, report.r2, report.eta);
    Ok(())
}

fn cmd_search(config: &RunConfig) -> Result<()> {
    let (dataset, side) = load_data(config)?;
    let space = config.search.space.clone().unwrap_or_else(SearchSpace::default);
    let outcome = random_search(
        &space,
        config.model.variant,
        config.model.space,
        &dataset,
        &side,
        &config.train.to_train_config(config.seed),
        config.search.n_iters,
        config.seed,
    )?;
    let log_path = config.output_dir.join("search.jsonl");
    let mut lines = String::new();
    for t in &outcome.trials {
        lines.push_str(
            &serde_json::to_string(t).map_err(|e| KftError::Data(format!("json: {e}")))?,
        );
        lines.push('\n');
    }
    std::fs::write(&log_path, lines)?;
    write_json(
        &config.output_dir.join("best_config.json"),
        &serde_json::json!({"config": outcome.best, "val_r2": outcome.best_val_r2}),
    )?;
    println!("best val R² {:.4}", outcome.best_val_r2);
    Ok(())
}

fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let table = ablation_suite(config.seed)?;
    table.write_csv(&config.output_dir.join("ablation.csv"))?;
    let mut summary = serde_json::Map::new();
    for cond in kft::eval::ABLATION_CONDITIONS {
        summary.insert(
            cond.to_string(),
            serde_json::json!({"mean": table.mean(cond), "sd": table.sd(cond)}),
        );
    }
    write_json(
        &config.output_dir.join("ablation_summary.json"),
        &serde_json::Value::Object(summary),
    )?;
    for cond in kft::eval::ABLATION_CONDITIONS {
        println!("{cond}: R² {:.3} ± {:.3}", table.mean(cond), table.sd(cond));
    }
    Ok(())
}
