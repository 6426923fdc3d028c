// Temporary tuning harness for the ablation design (not shipped).
use kft::data::{synth, SideSignal, SynthSpec};
use kft::eval::r2;
use kft::kernels::{KernelKind, KernelParams, SideInfo};
use kft::model::{KftModel, ModelConfig, Space, Variant};
use kft::tensor::DenseTensor;
use kft::train::{em_train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn replace_side(template: &[Option<SideInfo>], kind: SideSignal, seed: u64) -> Vec<Option<SideInfo>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    template.iter().map(|s| match (s, kind) {
        (None, _) | (_, SideSignal::None) => None,
        (Some(s), SideSignal::Constant) => Some(SideInfo::new(s.mode, DenseTensor::ones(&[s.rows(), s.feature_dim()])).unwrap()),
        (Some(s), SideSignal::GaussianNoise) => {
            let data: Vec<f64> = (0..s.rows()*s.feature_dim()).map(|_| rng.sample::<f64,_>(rand_distr::StandardNormal)).collect();
            Some(SideInfo::new(s.mode, DenseTensor::new(vec![s.rows(), s.feature_dim()], data).unwrap()).unwrap())
        }
        (Some(s), SideSignal::Informative) => Some(s.clone()),
    }).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter().position(|a| a == name).map(|i| args[i+1].parse().unwrap()).unwrap_or(default)
    };
    let e0 = get("--e0", 12.0) as usize; let e1 = get("--e1", 10.0) as usize; let e2 = get("--e2", 8.0) as usize;
    let n_records = get("--n", 600.0) as usize;
    let noise = get("--noise", 0.2);
    let lambda = get("--lambda", 0.05);
    let ls = get("--ls", 2.0);
    let epochs = get("--epochs", 120.0) as usize;
    let bf = get("--bf", 0.2);
    let lr = get("--lr", 0.02);
    let rank = get("--rank", 2.0) as usize;
    let base = get("--seed", 100.0) as u64;

    let mut ok_a = 0; let mut ok_b = 0;
    for k in 0..5u64 {
        let seed = base + k;
        let mut data = synth(&SynthSpec {
            extents: vec![e0, e1, e2], rank: 2, side_signal: SideSignal::Informative,
            side_dim: 3, noise_sd: noise, seed, n_records: Some(n_records),
        }).unwrap();
        data.dataset.scale_targets();
        let sp = kft::data::split(&data.dataset, seed).unwrap();
        let cfg_t = TrainConfig { epochs, iters_per_epoch: 100, batch_fraction: bf, learning_rate: lr, seed, train_kernel: false };
        let kernel = KernelParams::new(KernelKind::Rbf, ls).unwrap();
        let mut results = std::collections::BTreeMap::new();
        for (name, variant, kind) in [
            ("vnone", Variant::Vanilla, SideSignal::None),
            ("vside", Variant::Vanilla, SideSignal::Informative),
            ("const", Variant::Wlr, SideSignal::Constant),
            ("noise", Variant::Wlr, SideSignal::GaussianNoise),
            ("inf",   Variant::Wlr, SideSignal::Informative),
        ] {
            let side = replace_side(&data.side, kind, seed.wrapping_add(77));
            // per-condition candidate configs selected by validation R2
            let mut best: Option<(f64, f64)> = None; // (val, test)
            for (cand, (lam_c, lr_c)) in [(lambda, lr), (lambda * 10.0, lr), (lambda, lr / 3.0)].iter().enumerate() {
                let mut mc = ModelConfig::plain(variant, Space::DualExact, data.dataset.extents.clone(), rank);
                mc.kernel = Some(kernel);
                mc.lambda = *lam_c;
                let mut model = KftModel::init(&mc, side.clone(), seed.wrapping_add(13 + cand as u64)).unwrap();
                let mut c = cfg_t.clone();
                c.learning_rate = *lr_c;
                let report = em_train(&mut model, &data.dataset, &sp.train, &c).unwrap();
                if report.diverged.is_some() { continue; }
                let (vidx, vy) = data.dataset.gather(&sp.val);
                let val = r2(&model.forward(&vidx).unwrap(), &vy).unwrap();
                let (tidx, ty) = data.dataset.gather(&sp.test);
                let test = r2(&model.forward(&tidx).unwrap(), &ty).unwrap();
                if best.map_or(true, |(bv, _)| val > bv) { best = Some((val, test)); }
            }
            let r = best.map(|(_, t)| t).unwrap_or(f64::NEG_INFINITY);
            results.insert(name, r);
        }
        let a = results["inf"] - results["noise"] >= 0.05;
        let b = results["const"] - results["vside"] >= 0.05;
        ok_a += a as u32; ok_b += b as u32;
        println!("seed {seed}: inf {:+.3} noise {:+.3} {}  const {:+.3} vside {:+.3} {}  vnone {:+.3}",
            results["inf"], results["noise"], if a {"OK"} else {"X "},
            results["const"], results["vside"], if b {"OK"} else {"X "}, results["vnone"]);
    }
    println!("(a): {ok_a}/5  (b): {ok_b}/5");
}
