//! Acceptance criteria. Each criterion prints one `PASS` or `FAIL` line; the
//! process fails if any criterion fails. Pass name fragments as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- padding metric`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{auprc_walk, auroc_pairs, check_transform, random_grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpformer::dataio::{Batch, TaskKind};
use warpformer::harness::gradsuite::run_suite;
use warpformer::harness::metrics::{auprc, auroc, mean_std};
use warpformer::harness::train::{evaluate, train, RunConfig};
use warpformer::harness::SyntheticSpec;
use warpformer::model::{ModelConfig, ModelDims, Warpformer};
use warpformer::nn::ForwardCtx;
use warpformer::warp::{apply_warp, transform_matrix, warping_curve, TransformOptions, WarpMode};
use warpformer::{ParamStore, Tape, Tensor};

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = run_suite(0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("empty suite")?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed checks: {failed:?}"))?;
    for group in ["warp_layer", "attention_block", "model"] {
        ensure(cases.iter().any(|c| c.name.starts_with(group)), || format!("no {group} check"))?;
    }
    ensure(secs < 300.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!(
        "{} checks, worst {:.2e} ({}), {secs:.1}s",
        cases.len(),
        worst.max_rel_error,
        worst.name
    ))
}

fn warp_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let lo = rng.random_range(1..=32);
        let ln = rng.random_range(1..=4 * lo);
        let scores: Vec<f64> = (0..lo)
            .map(|_| match rng.random_range(0..8) {
                0 | 1 => 0.0,
                2 => rng.random_range(1e-9..1e-3),
                _ => rng.random_range(1e-3..1.0),
            })
            .collect();
        let lam = warping_curve(&scores);
        let a = transform_matrix(&lam, ln, TransformOptions::default()).map_err(|e| e.to_string())?;
        check_transform(&a, ln, lo, true).map_err(|e| format!("case {case} ({lo}->{ln}): {e}"))?;

        let d = 2;
        let h: Vec<f64> = (0..lo * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::new(&[1, 1, ln, lo], a).unwrap());
        let hv = tape.constant(Tensor::new(&[1, 1, lo, d], h.clone()).unwrap());
        let mv = tape.constant(Tensor::new(&[1, 1, lo], vec![1.0; lo]).unwrap());
        let tv = tape.constant(Tensor::new(&[1, 1, lo], (0..lo).map(|i| i as f64).collect()).unwrap());
        let w = apply_warp(&mut tape, av, hv, mv, tv, None).map_err(|e| e.to_string())?;
        let z = tape.value(w.z).data();
        for c in 0..d {
            let col = (0..lo).map(|i| h[i * d + c]);
            let (min, max) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            for j in 0..ln {
                let x = z[j * d + c];
                ensure(x >= min - 1e-9 && x <= max + 1e-9, || {
                    format!("case {case}: output {x} outside [{min}, {max}]")
                })?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("1000 cases, {secs:.2}s"))
}

fn hand_oracles() -> Outcome {
    let lam = warping_curve(&[1.0; 4]);
    let a = transform_matrix(&lam, 2, TransformOptions::default()).map_err(|e| e.to_string())?;
    let third = 1.0 / 3.0;
    let want = [0.5, 0.5, 0.0, 0.0, 0.0, third, third, third];
    ensure(a == want, || format!("L=4->2 gave {a:?}"))?;

    let lam = warping_curve(&[0.7]);
    let a = transform_matrix(&lam, 3, TransformOptions::default()).map_err(|e| e.to_string())?;
    ensure(a == [1.0; 3], || format!("L=1->3 gave {a:?}"))?;
    let mut tape = Tape::new();
    let av = tape.constant(Tensor::new(&[1, 1, 3, 1], a).unwrap());
    let hv = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.4, -1.5]).unwrap());
    let mv = tape.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
    let tv = tape.constant(Tensor::new(&[1, 1, 1], vec![2.5]).unwrap());
    let w = apply_warp(&mut tape, av, hv, mv, tv, None).map_err(|e| e.to_string())?;
    let z = tape.value(w.z).data();
    ensure(z == [0.4, -1.5, 0.4, -1.5, 0.4, -1.5], || format!("copies {z:?}"))?;
    Ok("L=4->2 matrix exact, L=1->3 gives three copies".into())
}

fn toy_model(warp: WarpMode, k: usize, median: f64, seed: u64) -> (Warpformer, ParamStore) {
    let config = ModelConfig {
        d_model: 16,
        heads: 2,
        depth: 2,
        scales: vec![1.0, 0.2, 1.0],
        warp,
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        num_variates: k,
        num_classes: 2,
        task: TaskKind::Sequence,
        median_length: median,
    };
    let mut store = ParamStore::new();
    let m = Warpformer::new(config, dims, &mut store, seed).unwrap();
    (m, store)
}

fn identity_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, store) = toy_model(WarpMode::Adaptive, 4, 10.0, 3);
    for i in 0..100 {
        let g = random_grid(&mut rng, 4, 8);
        let batch = Batch::new(&[&g], None).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &store, &batch, &mut ForwardCtx::eval()).map_err(|e| e.to_string())?;
        ensure(tape.value(out.layers[0].z) == tape.value(out.encoded), || {
            format!("instance {i}: layer 1 differs from the encoder output")
        })?;
    }
    Ok("100 instances bitwise equal".into())
}

fn padding_inertness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, store) = toy_model(WarpMode::Adaptive, 3, 9.0, 4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let g = random_grid(&mut rng, 3, 7);
        let extra = rng.random_range(1..=8);
        let logits = |pad: Option<usize>| -> Result<Vec<f64>, String> {
            let batch = Batch::new(&[&g], pad).map_err(|e| e.to_string())?;
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &store, &batch, &mut ForwardCtx::eval()).map_err(|e| e.to_string())?;
            Ok(tape.value(out.logits).data().to_vec())
        };
        let a = logits(None)?;
        let b = logits(Some(g.len() + extra))?;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        ensure(diff < 1e-5, || format!("instance {i} (+{extra} columns): {diff:e}"))?;
    }
    Ok(format!("50 instances, max logit change {worst:.2e}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(1..=50);
        let levels = rng.random_range(2..=60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        for (fast, slow) in [
            (auroc(&scores, &labels), auroc_pairs(&scores, &labels)),
            (auprc(&scores, &labels), auprc_walk(&scores, &labels)),
        ] {
            match (fast, slow) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    ensure((a - b).abs() < 1e-10, || format!("case {case}: {a} vs {b}"))?;
                }
                (a, b) => ensure(a == b, || format!("case {case}: {a:?} vs {b:?}"))?,
            }
        }
    }
    Ok(format!("500 cases, max difference {worst:.1e}"))
}

fn synthetic_ablation() -> Outcome {
    let start = Instant::now();
    let base = RunConfig::load(&configs().join("synthetic.toml")).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec::load(&configs().join("synthetic_spec.toml")).map_err(|e| e.to_string())?;
    ensure((spec.train, spec.val, spec.test) == (2000, 500, 500), || "split sizes".into())?;
    let modes = [WarpMode::Adaptive, WarpMode::Identity, WarpMode::NoUpsample];
    let mut scores = vec![Vec::new(); modes.len()];
    for seed in 0..3u64 {
        let data = spec.generate(seed).map_err(|e| e.to_string())?;
        for (i, mode) in modes.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.model.warp = *mode;
            cfg.train.seed = seed;
            let run_start = Instant::now();
            let t = train(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
            let mut test = data.test.clone();
            t.norm.apply_all(&mut test);
            let report = evaluate(&t.model, &t.store, &test, cfg.train.batch_size).map_err(|e| e.to_string())?;
            let a = report.auroc.ok_or("undefined test AUROC")?;
            println!(
                "    seed={seed} warp={mode} test_auroc={a:.4} epochs={} best_epoch={} seconds={:.1}",
                t.history.len(),
                t.best_epoch,
                run_start.elapsed().as_secs_f64()
            );
            scores[i].push(a);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let stats: Vec<(f64, f64)> = scores.iter().map(|s| mean_std(s)).collect();
    let (adaptive, identity, no_up) = (stats[0].0, stats[1].0, stats[2].0);
    let detail = format!(
        "adaptive {:.4}±{:.4}, identity {:.4}±{:.4}, no-upsample {:.4}±{:.4}, {:.0}s",
        stats[0].0, stats[0].1, stats[1].0, stats[1].1, stats[2].0, stats[2].1, secs
    );
    let mut problems = Vec::new();
    if adaptive < identity + 0.02 {
        problems.push("adaptive < identity + 0.02");
    }
    if adaptive < no_up {
        problems.push("adaptive < no-upsample");
    }
    if adaptive < 0.85 {
        problems.push("adaptive < 0.85");
    }
    if secs >= 1800.0 {
        problems.push("runtime >= 30 min");
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", problems.join(", ")))
    }
}

fn early_stopping_and_determinism() -> Outcome {
    let data = SyntheticSpec {
        train: 48,
        val: 24,
        test: 0,
        horizon: 12.0,
        sparse_interval: 4.0,
        noise_interval: 2.0,
        ..SyntheticSpec::default()
    }
    .generate(11)
    .map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 8;
    cfg.model.scales = vec![1.0, 0.5];
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 0.0;
    cfg.train.max_epochs = 50;
    cfg.train.patience = 5;
    let frozen = train(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
    ensure(frozen.history.len() == cfg.train.patience + 1, || {
        format!("constant metric ran {} epochs", frozen.history.len())
    })?;

    cfg.train.learning_rate = 3e-3;
    cfg.train.max_epochs = 4;
    cfg.train.patience = 3;
    cfg.model.dropout = 0.1;
    cfg.train.seed = 21;
    let a = train(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
    let b = train(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
    ensure(a.history == b.history, || "histories differ".into())?;
    let same = a.store.iter().zip(b.store.iter()).all(|((_, x), (_, y))| x.value() == y.value());
    ensure(same, || "parameters differ".into())?;
    Ok(format!(
        "stopped after {} epochs with patience {}; {}-epoch histories identical",
        frozen.history.len(),
        5,
        a.history.len()
    ))
}

fn default_configs() -> Outcome {
    let load = |name: &str| RunConfig::load(&configs().join(name)).map_err(|e| format!("{name}: {e}"));
    let check = |name: &str, d, heads, depth, batch, scales: &[f64]| -> Result<(), String> {
        let c = load(name)?;
        let got = (c.model.d_model, c.model.heads, c.model.depth, c.train.batch_size);
        ensure(got == (d, heads, depth, batch), || format!("{name}: {got:?}"))?;
        ensure(c.model.scales == scales, || format!("{name}: scales {:?}", c.model.scales))?;
        ensure(c.model.warp == WarpMode::Adaptive, || format!("{name}: warp {}", c.model.warp))?;
        let t = &c.train;
        ensure((t.learning_rate, t.max_epochs, t.patience) == (1e-3, 50, 5), || {
            format!("{name}: optimizer settings {t:?}")
        })
    };
    check("physionet.toml", 32, 1, 2, 32, &[1.0, 0.2, 1.0])?;
    check("mimic.toml", 32, 1, 2, 32, &[1.0, 1.0])?;
    check("activity.toml", 64, 8, 3, 64, &[1.0, 1.2, 1.0])?;
    Ok("physionet, mimic and activity configs match".into())
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient-suite", gradient_suite),
        ("warp-invariants", warp_invariants),
        ("hand-warp-oracles", hand_oracles),
        ("identity-layer-exactness", identity_exactness),
        ("padding-inertness", padding_inertness),
        ("metric-oracles", metric_oracles),
        ("synthetic-ablation", synthetic_ablation),
        ("early-stopping-determinism", early_stopping_and_determinism),
        ("default-configs", default_configs),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
