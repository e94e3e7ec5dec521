//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mrf_core::data::{chrono_split, synth_multiperiodic, SplitSpec, SynthSpec};
use mrf_core::metrics::{
    linear_cka, mase, mse, naive_forecast, owa, seasonal_naive_forecast, smape,
};
use mrf_core::model::{revin_denormalize, revin_normalize, ModelConfig, MultiResFormer};
use mrf_core::patching::{flatten_truncate, pad_to_multiple, resize_linear, segment};
use mrf_core::spectral::{amplitude_spectrum, amplitude_spectrum_of, detect_salient_periods};
use mrf_core::tensor::{Graph, Tensor};
use mrf_core::training::{
    adam_step, gradient_check, make_windows, mse_loss, predict_windows, stack_batch, train,
    AdamState, GradCheckOptions, TrainConfig, WindowSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        lookback: 16,
        horizon: 4,
        width: 8,
        blocks: 1,
        resolutions: 2,
        heads: 2,
        ffn_width: 16,
        ..ModelConfig::default()
    };
    let model = MultiResFormer::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..2 * 16 * 2)
        .map(|i| (i as f64 * 0.7).sin() + rng.random_range(-0.3..0.3))
        .collect();
    let x = Tensor::new([2, 16, 2], x).unwrap();
    let y = random_tensor(&mut rng, &[2, 4, 2], 1.0);
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        ..GradCheckOptions::default()
    };
    let r = gradient_check(&model, &x, &y, &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(
        r.coords_checked == model.count_parameters() && r.max_rel_error <= 1e-4 && secs < 60.0,
        format!(
            "{} of {} coordinates, max rel. error {:.2e} at {}, {secs:.1}s",
            r.coords_checked,
            model.count_parameters(),
            r.max_rel_error,
            r.worst_param
        ),
    )
}

fn naive_dft_amplitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (1..=n / 2)
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let theta = -2.0 * PI * ((f * t) % n) as f64 / n as f64;
                re += v * theta.cos();
                im += v * theta.sin();
            }
            re.hypot(im)
        })
        .collect()
}

fn spectral_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for n in 2..=512 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = amplitude_spectrum(&Tensor::new([1, n, 1], x.clone()).unwrap()).unwrap();
        let slow = naive_dft_amplitudes(&x);
        if fast.amplitudes().len() != slow.len() {
            return Err(format!(
                "I={n}: {} bins, expected {}",
                fast.amplitudes().len(),
                slow.len()
            ));
        }
        for (a, b) in fast.amplitudes().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 60.0,
        format!("I = 2..=512, max |Δ| {worst:.2e}, {secs:.1}s"),
    )
}

fn detection() -> Outcome {
    let start = Instant::now();
    let noiseless = SynthSpec {
        noise_std: 0.0,
        ..SynthSpec::two_tone(336, 0)
    };
    let ts = synth_multiperiodic(&noiseless).unwrap();
    let clean = detect_salient_periods(&amplitude_spectrum_of(ts.values()).unwrap(), 2).unwrap();
    if clean.periods != [24, 56] {
        return Err(format!("noiseless periods {:?}", clean.periods));
    }
    let hits = (0..100)
        .filter(|&seed| {
            let ts = synth_multiperiodic(&SynthSpec::two_tone(336, seed)).unwrap();
            let set =
                detect_salient_periods(&amplitude_spectrum_of(ts.values()).unwrap(), 2).unwrap();
            set.periods == [24, 56]
        })
        .count();
    let secs = start.elapsed().as_secs_f64();
    check(
        hits >= 95 && secs < 30.0,
        format!("noiseless [24, 56]; noisy {hits}/100 seeds, {secs:.1}s"),
    )
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[2, 96, 3], 5.0);
    for p in 1..=96 {
        let mut g = Graph::eval();
        let xv = g.constant(x.clone());
        let padded = pad_to_multiple(&mut g, xv, p).unwrap();
        let patches = segment(&mut g, padded, p).unwrap();
        let back = flatten_truncate(&mut g, patches, 96).unwrap();
        if g.data(back) != x.data() {
            return Err(format!("pad/segment/flatten not identity at period {p}"));
        }
    }
    let mut resize_worst: f64 = 0.0;
    for p in 2..=48 {
        for d in [p, 8, 16, 64, 128] {
            let slope = rng.random_range(-3.0..3.0);
            let offset = rng.random_range(-3.0..3.0);
            let line: Vec<f64> = (0..p).map(|i| offset + slope * i as f64).collect();
            let mut g = Graph::eval();
            let v = g.constant(Tensor::new([1, 1, 1, p], line.clone()).unwrap());
            let up = resize_linear(&mut g, v, d).unwrap();
            let down = resize_linear(&mut g, up, p).unwrap();
            for (a, b) in g.data(down).iter().zip(&line) {
                resize_worst = resize_worst.max((a - b).abs());
            }
        }
    }
    let mut revin_worst: f64 = 0.0;
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[3, 96, 4], 1e3);
        let mut g = Graph::eval();
        let xv = g.constant(x.clone());
        let (n, stats) = revin_normalize(&mut g, xv, 1e-5).unwrap();
        let back = revin_denormalize(&mut g, n, stats).unwrap();
        for (a, b) in g.data(back).iter().zip(x.data()) {
            revin_worst = revin_worst.max((a - b).abs());
        }
    }
    check(
        resize_worst <= 1e-9 && revin_worst <= 1e-9,
        format!("(a) exact for periods 1..=96; (b) max |Δ| {resize_worst:.1e}; (c) max |Δ| {revin_worst:.1e}"),
    )
}

fn shape_and_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum: f64 = 0.0;
    let configs = 220;
    for c in 0..configs {
        let heads = rng.random_range(1..=4);
        let lookback = rng.random_range(4..=64);
        let cfg = ModelConfig {
            lookback,
            horizon: rng.random_range(1..=16),
            width: heads * rng.random_range(1..=4),
            blocks: rng.random_range(1..=2),
            resolutions: rng.random_range(1..=(lookback / 2).min(4)),
            heads,
            ffn_width: rng.random_range(1..=16),
            dropout: rng.random_range(0.0..0.5),
            use_res_emb: rng.random_bool(0.8),
            share_re_globally: rng.random_bool(0.7),
            learned_pos_emb: rng.random_bool(0.2),
            block_residual: rng.random_bool(0.3),
            ..ModelConfig::default()
        };
        let (b, v) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let model = MultiResFormer::new(cfg.clone(), c).unwrap();
        let x = random_tensor(&mut rng, &[b, lookback, v], 2.0);
        let mut g = Graph::eval();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv).unwrap();
        if g.shape(out.prediction) != [b, cfg.horizon, v] {
            return Err(format!("config {c}: output {:?}", g.shape(out.prediction)));
        }
        for set in &out.periodicities {
            worst_sum = worst_sum.max((set.weights.iter().sum::<f64>() - 1.0).abs());
        }
        let again = model.predict(&x).unwrap();
        if again.data() != g.data(out.prediction) {
            return Err(format!("config {c}: eval forward not deterministic"));
        }
    }
    check(
        worst_sum <= 1e-12,
        format!("{configs} configs, shapes and determinism hold, max |Σw − 1| {worst_sum:.1e}"),
    )
}

fn parameter_sharing() -> Outcome {
    let counts: Vec<usize> = [1, 3, 5, 8]
        .iter()
        .map(|&k| {
            MultiResFormer::new(
                ModelConfig {
                    resolutions: k,
                    ..ModelConfig::default()
                },
                0,
            )
            .unwrap()
            .count_parameters()
        })
        .collect();
    check(
        counts.iter().all(|&c| c == counts[0]),
        format!("k = 1, 3, 5, 8 -> {counts:?}"),
    )
}

struct Task {
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    test: Vec<WindowSample>,
    naive: f64,
    seasonal: f64,
}

fn synthetic_task() -> Task {
    let ts = synth_multiperiodic(&SynthSpec::two_tone(2000, 0)).unwrap();
    let split = chrono_split(&ts, &SplitSpec::default()).unwrap();
    let windows = |s| make_windows(s, 96, 24, 1).unwrap();
    let test = windows(&split.test);
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, y) = stack_batch(&test, &all).unwrap();
    Task {
        train: windows(&split.train),
        val: windows(&split.val),
        naive: mse(&naive_forecast(&x, 24).unwrap(), &y).unwrap(),
        seasonal: mse(&seasonal_naive_forecast(&x, 24, 24).unwrap(), &y).unwrap(),
        test,
    }
}

fn test_mse(model: &MultiResFormer, task: &Task) -> f64 {
    let (p, y) = predict_windows(model, &task.test, 64).unwrap();
    mse(&p, &y).unwrap()
}

fn task_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 32,
        learning_rate: 1e-3,
        patience: 2,
        ..TrainConfig::default()
    }
}

fn learning_sanity(task: &Task) -> Outcome {
    let start = Instant::now();
    let mut model = MultiResFormer::new(ModelConfig::default(), 0).unwrap();
    let batch: Vec<usize> = (0..32).map(|i| i * 37).collect();
    let (x, y) = stack_batch(&task.train, &batch).unwrap();
    let cfg = TrainConfig::default();
    let mut state = AdamState::new(&model.params.store);
    let mut overfit = f64::INFINITY;
    let mut steps = 0;
    while start.elapsed() < Duration::from_secs(120) && overfit >= 1e-2 {
        let mut g = Graph::train(steps);
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let out = model.forward(&mut g, xv).unwrap();
        let loss = mse_loss(&mut g, out.prediction, yv).unwrap();
        g.backward(loss).unwrap();
        model.params.store.zero_grad();
        model.params.store.accumulate_grads(&g);
        adam_step(&mut model.params.store, &mut state, &cfg, 3e-3);
        steps += 1;
        if steps % 10 == 0 {
            overfit = mse(&model.predict(&x).unwrap(), &y).unwrap();
        }
    }
    let overfit_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut model = MultiResFormer::new(ModelConfig::default(), 0).unwrap();
    train(&mut model, &task.train, &task.val, &task_config()).unwrap();
    let test = test_mse(&model, task);
    let secs = start.elapsed().as_secs_f64();
    check(
        overfit < 1e-2 && test < task.naive && test < task.seasonal && secs < 600.0,
        format!(
            "(a) single-batch MSE {overfit:.2e} after {steps} steps, {overfit_secs:.0}s; \
             (b) test MSE {test:.4} vs naive {:.4}, seasonal-naive {:.4}, {secs:.0}s",
            task.naive, task.seasonal
        ),
    )
}

fn ablation(task: &Task) -> Outcome {
    let mut means = Vec::new();
    let mut all_below = true;
    for use_res_emb in [true, false] {
        let mut total = 0.0;
        for seed in 0..5 {
            let cfg = ModelConfig {
                use_res_emb,
                ..ModelConfig::default()
            };
            let mut model = MultiResFormer::new(cfg, seed).unwrap();
            let tc = TrainConfig {
                seed,
                ..task_config()
            };
            train(&mut model, &task.train, &task.val, &tc).unwrap();
            let m = test_mse(&model, task);
            all_below &= m < task.naive && m < task.seasonal;
            total += m;
        }
        means.push(total / 5.0);
    }
    check(
        all_below,
        format!(
            "mean test MSE with RE {:.4}, without {:.4}; baselines {:.4} / {:.4}",
            means[0], means[1], task.naive, task.seasonal
        ),
    )
}

fn metric_fixtures() -> Outcome {
    let t = |v: [f64; 3]| Tensor::from_vec(v.to_vec());
    let s = smape(&t([0.0, 2.0, 3.0]), &t([0.0, 2.0, 1.0])).unwrap();
    let s_oracle = (0.0 + 0.0 + 200.0 * 2.0 / 4.0) / 3.0;
    let s2 = smape(&t([110.0, 1.0, 5.0]), &t([100.0, 3.0, 5.0])).unwrap();
    let s2_oracle = (200.0 * 10.0 / 210.0 + 200.0 * 2.0 / 4.0 + 0.0) / 3.0;
    let m = mase(
        &t([1.0, 1.0, 1.0]),
        &t([1.0, 2.0, 4.0]),
        &[1.0, 2.0, 4.0],
        1,
    )
    .unwrap();
    let m_oracle = ((0.0 + 1.0 + 3.0) / 3.0) / ((1.0 + 2.0) / 2.0);
    let o = owa(10.0, 2.0, 20.0, 1.0).unwrap();
    let o_oracle = 0.5 * (10.0 / 20.0 + 2.0 / 1.0);
    let exact = s == s_oracle && s2 == s2_oracle && m == m_oracle && o == o_oracle;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_tensor(&mut rng, &[30, 4], 1.0);
    let b = random_tensor(&mut rng, &[30, 3], 1.0);
    let self_sim = linear_cka(&a, &a).unwrap();
    // random orthogonal 4x4 via Gram-Schmidt
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < 4 {
        let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    let rotated: Vec<f64> = (0..30)
        .flat_map(|r| {
            let row = &a.data()[r * 4..r * 4 + 4];
            let q = &q;
            (0..4).map(move |c| (0..4).map(|k| row[k] * q[k][c]).sum::<f64>())
        })
        .collect();
    let rotated = Tensor::new([30, 4], rotated).unwrap();
    let drift = (linear_cka(&rotated, &b).unwrap() - linear_cka(&a, &b).unwrap()).abs();
    check(
        exact && (self_sim - 1.0).abs() <= 1e-12 && drift <= 1e-9,
        format!(
            "SMAPE/MASE/OWA fixtures exact: {exact}; CKA(X, X) = {self_sim}; orthogonal drift {drift:.1e}"
        ),
    )
}

fn run_mrf(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mrf"))
        .args(args)
        .current_dir(dir)
        .env_remove("MRF_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = run_mrf(
        &[
            "train",
            "--data",
            "synth",
            "--lookback",
            "48",
            "--horizon",
            "12",
            "--width",
            "16",
            "--epochs",
            "2",
            "--seed",
            "7",
            "--out",
            "first",
            "--quiet",
        ],
        dir.path(),
    );
    if !first.status.success() {
        return Err(format!(
            "first run failed: {}",
            String::from_utf8_lossy(&first.stderr)
        ));
    }
    let again = run_mrf(
        &[
            "train",
            "--manifest",
            "first/manifest.json",
            "--out",
            "again",
            "--quiet",
        ],
        dir.path(),
    );
    if !again.status.success() {
        return Err(format!(
            "rerun failed: {}",
            String::from_utf8_lossy(&again.stderr)
        ));
    }
    let a = std::fs::read(dir.path().join("first/history.csv")).unwrap();
    let b = std::fs::read(dir.path().join("again/history.csv")).unwrap();
    check(
        a == b && !a.is_empty(),
        format!("history.csv {} bytes, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let started = Instant::now();
    let task = synthetic_task();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient integrity", Box::new(gradient_integrity)),
        ("2 spectral oracle equivalence", Box::new(spectral_oracle)),
        ("3 detection correctness", Box::new(detection)),
        ("4 pipeline round trips", Box::new(round_trips)),
        ("5 shape and weight contracts", Box::new(shape_and_weights)),
        ("6 parameter sharing", Box::new(parameter_sharing)),
        ("7 learning sanity", Box::new(|| learning_sanity(&task))),
        ("8 ablation direction", Box::new(|| ablation(&task))),
        ("9 metric correctness", Box::new(metric_fixtures)),
        ("10 reproducibility", Box::new(reproducibility)),
    ];
    let mut failed = 0;
    for (name, criterion) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
