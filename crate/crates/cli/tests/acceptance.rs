//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. `LSBQ_ACCEPTANCE=1,5,9` runs a subset;
//! `MNIST_DIR` overrides the dataset location (default `<workspace>/data/mnist`).

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use lsbq_core::accounting::{param_accounting, resnet18, resnet20, resnet50};
use lsbq_core::data::{DataSpec, MNIST_TRAIN_IMAGES};
use lsbq_core::io::RunReport;
use lsbq_core::model::ModelSpec;
use lsbq_core::numerics::{gemm, RngStream, Tensor};
use lsbq_core::quantize::{lsb_code, quant_code, LayerQuantState, QuantizerKind};
use lsbq_core::regularize::{lsb_l1_grad, lsb_l1_layer};
use lsbq_core::schedule::{LayerBits, Phase, ScheduleConfig, ScheduleState};
use lsbq_core::sensitivity::{hutchinson_samples, hvp};
use lsbq_core::train::{build_model, train_run, HessianConfig, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"))
}

fn mnist_available() -> bool {
    mnist_dir().join(MNIST_TRAIN_IMAGES).is_file()
}

fn mlp_spec() -> serde_json::Value {
    serde_json::to_value(ModelSpec::mlp(&[784, 256, 128, 10])).unwrap()
}

fn lsbq_train(config: &serde_json::Value, dir: &Path) -> Result<RunReport, String> {
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    let out = dir.join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_lsbq"))
        .args([
            "train",
            cfg_path.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ])
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).trim().to_string());
    }
    RunReport::load(&out.join("report.json")).map_err(|e| e.to_string())
}

// 1. Quantizer oracle suite over a 2^20-point grid.
fn quantizer_oracle() -> Verdict {
    let start = Instant::now();
    let points = 1usize << 20;
    let mut identity_breaks = 0usize;
    let mut first_violation: Option<(u8, u8, f64, i64)> = None;
    let mut counts = [[0u64; 9]; 3];
    for i in 0..points {
        let u = i as f64 / (points - 1) as f64;
        for n in 2..=8u8 {
            // k = n would leave a 0-bit coarse code.
            for k in (1..=2u8).filter(|&k| k < n) {
                for kind in [QuantizerKind::RoundClamp, QuantizerKind::DoReFa] {
                    let full = quant_code(u, n, kind).unwrap();
                    let coarse = quant_code(u, n - k, kind).unwrap();
                    let c = lsb_code(u, n, k, kind).unwrap();
                    if full != (coarse << k) + c {
                        identity_breaks += 1;
                    }
                    if kind == QuantizerKind::RoundClamp && c.abs() > 1 << (k - 1) {
                        counts[k as usize][n as usize] += 1;
                        first_violation.get_or_insert((n, k, u, c));
                    }
                }
            }
        }
    }
    let dorefa_u08 = lsb_code(0.8, 3, 1, QuantizerKind::DoReFa).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let total: u64 = counts.iter().flatten().sum();
    let mut detail = format!(
        "identity breaks {identity_breaks}; RoundClamp |lsb| bound violations {total}; \
         DoReFa (n=3,k=1) u=0.8 code {dorefa_u08}; {elapsed:.1}s"
    );
    if let Some((n, k, u, c)) = first_violation {
        let ks: Vec<u8> = (1..=2u8)
            .filter(|&k| counts[k as usize].iter().any(|&x| x > 0))
            .collect();
        detail +=
            &format!("; violations only at k={ks:?}, first n={n} k={k} u={u:.6} code {c} (coarse code saturated)");
    }
    verdict(
        identity_breaks == 0 && total == 0 && dorefa_u08 == 2 && elapsed < 10.0,
        detail,
    )
}

// 2. Regularizer gradient vs finite differences, and STE pass-through.
fn gradient_suite() -> Verdict {
    let mut rng = RngStream::new(2, 0);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    while checked < 10_000 {
        let s = rng.uniform(0.1, 2.0);
        let w = rng.uniform(-s, s);
        let n = 2 + rng.below(7) as u8;
        let p = 1 + rng.below(2) as u8;
        let make = |w: f64| {
            let mut l =
                LayerQuantState::with_scale(Tensor::from_vec(vec![w]), s, n, QuantizerKind::RoundClamp).unwrap();
            l.set_prune_speed(p).unwrap();
            l
        };
        let layer = make(w);
        let k = layer.lsb_width().unwrap();
        let r = layer.lsb_slice(k).unwrap().residuals.data()[0];
        if r.abs() <= 1e-4 {
            continue;
        }
        let h = 1e-8;
        let fd = (lsb_l1_layer(&make(w + h)).unwrap() - lsb_l1_layer(&make(w - h)).unwrap()) / (2.0 * h);
        let g = lsb_l1_grad(&layer).unwrap().data()[0];
        worst = worst.max((g - fd).abs());
        checked += 1;
    }

    let latent: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let toy = LayerQuantState::restore(
        Tensor::from_vec(latent.clone()),
        0.8,
        4,
        1,
        QuantizerKind::RoundClamp,
        false,
    )
    .unwrap();
    let upstream = Tensor::from_vec((0..64).map(|_| rng.normal()).collect());
    let passed = toy.quantized_forward().backward(&upstream).unwrap();
    let ste_exact = passed
        .data()
        .iter()
        .zip(upstream.data())
        .zip(&latent)
        .all(|((&g, &u), &w)| if w.abs() <= 0.8 { g == u } else { g == 0.0 });
    verdict(
        worst <= 1e-6 && ste_exact,
        format!("max |grad − fd| {worst:.2e} over {checked} points; STE pass-through exact: {ste_exact}"),
    )
}

fn quadratic(a: &Tensor) -> impl FnMut(&Tensor) -> lsbq_core::Result<Tensor> + '_ {
    let n = a.dims2().unwrap().0;
    move |w: &Tensor| gemm(a, &w.clone().reshape(vec![n, 1])?)?.reshape(vec![n])
}

// 3. Hessian suite: hvp and Hutchinson on quadratics.
fn hessian_suite() -> Verdict {
    let mut rng = RngStream::new(3, 0);
    let n = 10;

    let diag: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 5.0)).collect();
    let mut d = Tensor::zeros(&[n, n]);
    for i in 0..n {
        d.data_mut()[i * n + i] = diag[i];
    }
    let exact_diag: f64 = diag.iter().sum();
    let w0 = Tensor::from_vec((0..n).map(|_| rng.normal()).collect());
    let per_sample = hutchinson_samples(quadratic(&d), &w0, 100, &mut rng, 1e-3).unwrap();
    let diag_err = per_sample.iter().map(|x| (x - exact_diag).abs()).fold(0.0, f64::max);

    let b = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.normal()).collect()).unwrap();
    let mut a = gemm(&b.transpose().unwrap(), &b).unwrap();
    for i in 0..n {
        a.data_mut()[i * n + i] += 1.0;
    }
    let exact: f64 = (0..n).map(|i| a.data()[i * n + i]).sum();
    let v = Tensor::from_vec((0..n).map(|_| rng.normal()).collect());
    let hv = hvp(quadratic(&a), &w0, &v, 1e-3).unwrap();
    let av = quadratic(&a)(&v).unwrap();
    let hvp_err = hv
        .data()
        .iter()
        .zip(av.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let samples = hutchinson_samples(quadratic(&a), &w0, 10_000, &mut rng, 1e-3).unwrap();
    let estimate = samples.iter().sum::<f64>() / samples.len() as f64;
    let rel = (estimate - exact).abs() / exact;
    verdict(
        diag_err < 1e-9 * exact_diag.abs().max(1.0) && hvp_err < 1e-8 && rel < 0.02,
        format!(
            "diagonal per-sample err {diag_err:.1e}; hvp err {hvp_err:.1e}; \
             dense SPD trace {estimate:.3} vs {exact:.3} ({:.2}%)",
            100.0 * rel
        ),
    )
}

// 4. Parameter accounting on the three reference shape tables.
fn accounting() -> Verdict {
    let rows = [
        ("ResNet-20", resnet20(), 0.27, 2, 2.16),
        ("ResNet-18", resnet18(), 11.69, 2, 93.52),
        ("ResNet-50", resnet50(), 25.6, 1, 204.8),
    ];
    let round = |x: f64, places: i32| (x * 10f64.powi(places)).round() / 10f64.powi(places);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, table, per_weight_ref, places, split_ref) in rows {
        let a = param_accounting(&table.counts(), 8).unwrap();
        let per_weight_m = a.per_weight_params as f64 / 1e6;
        let split_m = a.bit_split_params as f64 / 1e6;
        // The reference bit-split column is 8 × the printed per-weight count.
        let from_printed = round(8.0 * round(per_weight_m, places), 2);
        let ok = round(per_weight_m, places) == per_weight_ref
            && a.ratio == 8.0
            && a.bit_split_params == 8 * a.per_weight_params
            && from_printed == split_ref;
        pass &= ok;
        parts.push(format!(
            "{name} {split_m:.2}M vs {per_weight_m:.2}M ratio {:.2}",
            a.ratio
        ));
    }
    verdict(pass, parts.join("; "))
}

// 5. Scheduler golden trace against a hand-simulated event log.
fn scheduler_trace() -> Verdict {
    let cfg = ScheduleConfig {
        interval: 1,
        alpha: 0.3,
        target: 0.15,
        deadline: Some(4),
        min_bits: 1,
        hessian_aware: true,
        ..ScheduleConfig::default()
    };
    let mut layers: Vec<LayerBits> = [100, 200, 300, 400]
        .iter()
        .map(|&params| LayerBits {
            bits: 8,
            prune_speed: 1,
            params,
            pinned: false,
        })
        .collect();
    let mut state = ScheduleState::new(&layers, &cfg);
    let script: [([f64; 4], [f64; 4]); 4] = [
        // α gate skips L0; order L1, L2, L3. Speeds become [1, 2, 2, 1].
        ([0.5, 0.1, 0.2, 0.25], [5.0, 1.0, 1.0, 9.0]),
        // Two-bit prune on L2; L1 gated. Speeds become [2, 2, 1, 2].
        ([0.1, 0.35, 0.05, 0.2], [1.0, 1.0, 8.0, 2.0]),
        // Only L1 under α. Speeds become [1, 1, 1, 2].
        ([0.6, 0.25, 0.7, 0.8], [3.0, 3.0, 3.0, 1.0]),
        // Deadline: nothing under α, forced pass L2, L1, then L3 downgraded
        // from 2 bits to 1 because that reaches the target; L0 never visited.
        ([0.9, 0.5, 0.4, 0.6], [1.0, 1.0, 1.0, 1.0]),
    ];
    let mut events_ok = true;
    for (i, (betas, omegas)) in script.iter().enumerate() {
        events_ok &= state.apply_event(&mut layers, betas, omegas, &cfg, 4, i + 1).is_ok();
    }
    let expected: [(usize, usize, u8, u8, bool); 10] = [
        (1, 1, 8, 7, false),
        (1, 2, 8, 7, false),
        (1, 3, 8, 7, false),
        (2, 2, 7, 5, false),
        (2, 0, 8, 7, false),
        (2, 3, 7, 6, false),
        (3, 1, 7, 5, false),
        (4, 2, 5, 4, true),
        (4, 1, 5, 4, true),
        (4, 3, 6, 5, true),
    ];
    let log: Vec<_> = state
        .log
        .iter()
        .map(|r| (r.epoch, r.layer, r.old_bits, r.new_bits, r.forced))
        .collect();
    let bits: Vec<u8> = layers.iter().map(|l| l.bits).collect();
    let gamma = state.events.last().map(|e| e.gamma_after).unwrap_or(1.0);
    let frozen = state
        .apply_event(&mut layers, &[0.0; 4], &[1.0; 4], &cfg, 4, 5)
        .is_err();
    let pass = events_ok
        && log == expected
        && bits == [7, 4, 4, 5]
        && gamma == 4700.0 / 32000.0
        && state.phase == Phase::Finetune
        && state.target_reached_at == Some(4)
        && frozen;
    verdict(
        pass,
        format!(
            "{} log entries (expected 10); final bits {bits:?}; γ {gamma:.6}; phase {:?}",
            log.len(),
            state.phase
        ),
    )
}

fn mnist_config(train: serde_json::Value, data: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "model": mlp_spec(), "data": data, "train": train })
}

fn desk_train(full_precision: bool) -> serde_json::Value {
    serde_json::json!({
        "epochs": 60, "batch_size": 128, "lr": 0.1, "seed": 1, "full_precision": full_precision,
        "schedule": { "lambda": 5e-5, "alpha": 0.3, "interval": 5, "target": 0.125 }
    })
}

// 6. Full MNIST: FP baseline vs mixed-precision run through the CLI.
fn desk_scale(scratch: &Path) -> (Verdict, Option<RunReport>) {
    if !mnist_available() {
        return (
            verdict(false, format!("MNIST not found in {}", mnist_dir().display())),
            None,
        );
    }
    let data = serde_json::json!({ "source": "mnist", "dir": mnist_dir() });
    let start = Instant::now();
    let fp_dir = scratch.join("fp");
    let q_dir = scratch.join("mixed");
    std::fs::create_dir_all(&fp_dir).unwrap();
    std::fs::create_dir_all(&q_dir).unwrap();
    let fp = lsbq_train(&mnist_config(desk_train(true), data.clone()), &fp_dir);
    let q = lsbq_train(&mnist_config(desk_train(false), data), &q_dir);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let (fp, q) = match (fp, q) {
        (Ok(fp), Ok(q)) => (fp, q),
        (Err(e), _) | (_, Err(e)) => return (verdict(false, format!("train failed: {e}")), None),
    };
    let fp_acc = fp.outcome.final_val_acc;
    let q_acc = q.outcome.final_val_acc;
    let gamma = q.outcome.scheme.size_fraction();
    let widths = q.outcome.scheme.distinct_bit_widths();
    let bits: Vec<u8> = q.outcome.scheme.layers.iter().map(|l| l.bits).collect();
    let pass = fp_acc >= 0.975 && fp_acc - q_acc <= 0.01 && gamma <= 0.125 && widths >= 2 && minutes <= 45.0;
    let detail = format!(
        "FP {:.2}%, mixed {:.2}% (gap {:.2} pt), γ {gamma:.4}, bits {bits:?}, both runs {minutes:.1} min",
        100.0 * fp_acc,
        100.0 * q_acc,
        100.0 * (fp_acc - q_acc)
    );
    (verdict(pass, detail), Some(q))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

// 7. Hessian-aware prune speeds vs fixed one-bit speed, 3 seeds.
fn hessian_ablation() -> Verdict {
    if !mnist_available() {
        return verdict(false, format!("MNIST not found in {}", mnist_dir().display()));
    }
    let data: DataSpec = serde_json::from_value(serde_json::json!({
        "source": "mnist", "dir": mnist_dir(), "train_limit": 10_000
    }))
    .unwrap();
    let (train, val) = data.load(Path::new(".")).unwrap();
    let spec = ModelSpec::mlp(&[784, 256, 128, 10]);
    let (mut reach, mut acc) = ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()]);
    let mut never = 0;
    for seed in 1..=3u64 {
        for (i, aware) in [true, false].into_iter().enumerate() {
            let cfg = TrainConfig {
                epochs: 30,
                batch_size: 128,
                lr: 0.1,
                warmup_epochs: 0,
                momentum: 0.9,
                seed,
                initial_bits: 8,
                quantizer: QuantizerKind::RoundClamp,
                full_precision: false,
                activation_bits: None,
                activation_clip: 1.0,
                schedule: ScheduleConfig {
                    interval: 3,
                    hessian_aware: aware,
                    ..ScheduleConfig::default()
                },
                hessian: HessianConfig {
                    samples: 8,
                    batch: 256,
                    eps: 1e-3,
                },
            };
            let mut model = build_model(&spec, &cfg).unwrap();
            let out = train_run(&mut model, &train, &val, &cfg).unwrap();
            match out.schedule.target_reached_at {
                Some(e) => reach[i].push(e as f64),
                None => {
                    never += 1;
                    reach[i].push(f64::INFINITY);
                }
            }
            acc[i].push(out.final_val_acc);
        }
    }
    let (ra, rf) = (median(reach[0].clone()), median(reach[1].clone()));
    let (aa, af) = (median(acc[0].clone()), median(acc[1].clone()));
    verdict(
        ra <= rf && aa >= af - 0.003,
        format!(
            "median target epoch {ra} (aware) vs {rf} (fixed); median acc {:.2}% vs {:.2}%; \
             reach {:?} vs {:?}; runs missing target {never}",
            100.0 * aa,
            100.0 * af,
            reach[0],
            reach[1]
        ),
    )
}

// 8. LSB-zero fraction rises between init and the first pruning event.
fn lsb_sparsification(run: Option<&RunReport>) -> Verdict {
    let Some(run) = run else {
        return verdict(false, "needs the mixed-precision run from criterion 6".into());
    };
    let Some(first) = run.outcome.schedule.events.first() else {
        return verdict(false, "no pruning event fired".into());
    };
    let init: Vec<f64> = run.outcome.initial_betas.iter().map(|b| 1.0 - b).collect();
    let at_event: Vec<f64> = first.betas.iter().map(|b| 1.0 - b).collect();
    let pass = init.len() == at_event.len() && init.iter().zip(&at_event).all(|(a, b)| b > a);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    verdict(
        pass,
        format!(
            "zero-LSB fraction init [{}] -> epoch {} [{}]",
            fmt(&init),
            first.epoch,
            fmt(&at_event)
        ),
    )
}

// 9. Two identical `train` invocations give byte-identical metrics.
fn determinism(scratch: &Path) -> Verdict {
    if !mnist_available() {
        return verdict(false, format!("MNIST not found in {}", mnist_dir().display()));
    }
    let cfg = mnist_config(
        serde_json::json!({
            "epochs": 6, "batch_size": 128, "lr": 0.1, "seed": 4,
            "schedule": { "interval": 2 }, "hessian": { "samples": 4, "batch": 256 }
        }),
        serde_json::json!({ "source": "mnist", "dir": mnist_dir(), "train_limit": 5000, "val_limit": 2000 }),
    );
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let dir = scratch.join(run);
        std::fs::create_dir_all(&dir).unwrap();
        if let Err(e) = lsbq_train(&cfg, &dir) {
            return verdict(false, format!("train failed: {e}"));
        }
        csvs.push(std::fs::read(dir.join("out/metrics.csv")).unwrap());
    }
    verdict(
        csvs[0] == csvs[1],
        format!("metrics.csv {} bytes, identical: {}", csvs[0].len(), csvs[0] == csvs[1]),
    )
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("LSBQ_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let scratch = tempfile::tempdir().unwrap();
    let mut desk_run = None;
    let mut failed = 0;
    let names = [
        "quantizer oracle",
        "regularizer gradient",
        "hessian estimators",
        "parameter accounting",
        "scheduler golden trace",
        "mnist desk scale",
        "hessian ablation",
        "lsb sparsification",
        "determinism",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let v = match n {
            1 => quantizer_oracle(),
            2 => gradient_suite(),
            3 => hessian_suite(),
            4 => accounting(),
            5 => scheduler_trace(),
            6 => {
                let (v, run) = desk_scale(&scratch.path().join("desk"));
                desk_run = run;
                v
            }
            7 => hessian_ablation(),
            8 => {
                if desk_run.is_none() && wanted(6) {
                    verdict(false, "criterion 6 run unavailable".into())
                } else if desk_run.is_none() {
                    let (_, run) = desk_scale(&scratch.path().join("desk"));
                    desk_run = run;
                    lsb_sparsification(desk_run.as_ref())
                } else {
                    lsb_sparsification(desk_run.as_ref())
                }
            }
            _ => determinism(&scratch.path().join("det")),
        };
        failed += usize::from(!v.pass);
        println!(
            "criterion {n} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
