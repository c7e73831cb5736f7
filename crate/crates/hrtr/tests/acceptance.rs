//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values. Run with
//! `cargo test --test acceptance -- --nocapture`.

use std::time::Instant;

use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hrtr::data::Dataset;
use hrtr::loss::{cross_entropy, focal_loss, focal_loss_grad, full_mask, FocalSpec};
use hrtr::metrics::{
    aer, edit_score, evaluate, evaluate_with, levenshtein, oracle_probs, Aggregation,
    Transcript,
};
use hrtr::model::{
    backward, forward_eval, forward_eval_with_cache, ModelConfig, ModelParams,
};
use hrtr::optim::{
    clip_gradients, plateau_update, sgd_step, train, ModelSelection, OptimizerState,
    PlateauMonitor, TrainConfig,
};
use hrtr::synthgen::{generate, SynthSpec};
use hrtr::windowing::{
    make_inference_windows, make_training_windows, reassemble, smooth, SmoothSpec, WindowSpec,
};

fn naive_levenshtein(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((&ha, ta)), Some((&hb, tb))) => {
            let sub = naive_levenshtein(ta, tb) + usize::from(ha != hb);
            let del = naive_levenshtein(ta, b) + 1;
            let ins = naive_levenshtein(a, tb) + 1;
            sub.min(del).min(ins)
        }
    }
}

#[test]
fn criterion_metric_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let la = rng.gen_range(0..=8);
        let lb = rng.gen_range(0..=8);
        let a: Vec<usize> = (0..la).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(0..5)).collect();
        assert_eq!(
            levenshtein(&Transcript(a.clone()), &Transcript(b.clone())),
            naive_levenshtein(&a, &b)
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "oracle comparison took {elapsed:?}");
    println!("PASS metric oracle: 1000 random pairs match naive recursion in {elapsed:?}");
}

#[test]
fn criterion_paper_worked_example() {
    // G = [reach, idle, retract], P = [reach, stabilize]
    let g = Transcript(vec![0, 1, 2]);
    let p = Transcript(vec![0, 3]);
    let l = levenshtein(&g, &p);
    assert_eq!(l, 2);
    let es = edit_score(&g, &p);
    assert!((es - 33.33).abs() <= 0.01 + 1e-9, "ES {es}");
    let a = aer(&g, &p).unwrap();
    assert!((a - 0.6667).abs() <= 0.0001, "AER {a}");
    println!("PASS paper worked example: L=2, ES={es:.2}, AER={a:.4}");
}

#[test]
fn criterion_focal_loss_reduction() {
    let ce_spec = FocalSpec { alpha: 1.0, gamma: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_diff = 0.0f64;
    let mut tried = 0;
    while tried < 100 {
        let (b, w, c) = (2, 4, rng.gen_range(2..6));
        let logits = Array3::from_shape_fn((b, w, c), |_| rng.gen_range(-3.0..3.0));
        let labels = Array2::from_shape_fn((b, w), |_| rng.gen_range(0..c));
        let mask = Array2::from_shape_fn((b, w), |_| rng.gen::<f64>() < 0.7);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        tried += 1;
        let fl = focal_loss(logits.view(), labels.view(), mask.view(), &ce_spec).unwrap();
        let ce = cross_entropy(logits.view(), labels.view(), mask.view()).unwrap();
        max_diff = max_diff.max((fl - ce).abs());
    }
    assert!(max_diff < 1e-9, "max |focal - ce| = {max_diff}");

    let logits = array![[[0.0, 0.0]]];
    let labels = array![[0usize]];
    let mask = full_mask(1, 1);
    let loss = focal_loss(
        logits.view(),
        labels.view(),
        mask.view(),
        &FocalSpec { alpha: 25.0, gamma: 2.0 },
    )
    .unwrap();
    assert!((loss - 4.33217).abs() < 1e-5, "closed form {loss}");
    println!("PASS focal loss reduction: max CE diff {max_diff:.2e}, closed form {loss:.5}");
}

#[test]
fn criterion_gradient_checks() {
    let start = Instant::now();

    // focal loss gradient vs central finite differences
    let spec = FocalSpec { alpha: 25.0, gamma: 2.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut logits = Array3::from_shape_fn((1, 4, 3), |_| rng.gen_range(-2.0..2.0));
    let labels = Array2::from_shape_fn((1, 4), |_| rng.gen_range(0..3));
    let mask = full_mask(1, 4);
    let grad = focal_loss_grad(logits.view(), labels.view(), mask.view(), &spec).unwrap();
    let step = 1e-6;
    let mut max_rel_loss = 0.0f64;
    for wi in 0..4 {
        for c in 0..3 {
            let orig = logits[[0, wi, c]];
            logits[[0, wi, c]] = orig + step;
            let lp = focal_loss(logits.view(), labels.view(), mask.view(), &spec).unwrap();
            logits[[0, wi, c]] = orig - step;
            let lm = focal_loss(logits.view(), labels.view(), mask.view(), &spec).unwrap();
            logits[[0, wi, c]] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let an = grad[[0, wi, c]];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            max_rel_loss = max_rel_loss.max(rel);
        }
    }
    assert!(max_rel_loss < 1e-6, "focal grad rel err {max_rel_loss}");

    // full tiny-model gradient of the focal loss over random labels
    let config = ModelConfig {
        input_dim: 3,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 4,
        dropout: 0.0,
        num_classes: 2,
    };
    let mut prng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ModelParams::init(&config, &mut prng);
    let x = Array3::from_shape_fn((2, 5, 3), |_| prng.gen_range(-1.0..1.0));
    let labels = Array2::from_shape_fn((2, 5), |_| prng.gen_range(0..2));
    let mask = full_mask(2, 5);

    let (logits, cache) = forward_eval_with_cache(&params, &x).unwrap();
    let dlogits = focal_loss_grad(logits.view(), labels.view(), mask.view(), &spec).unwrap();
    let mut analytic = backward(&params, &cache, &dlogits);

    let loss_at = |params: &ModelParams| {
        let logits = forward_eval(params, &x).unwrap();
        focal_loss(logits.view(), labels.view(), mask.view(), &spec).unwrap()
    };
    let step = 1e-4;
    let mut max_rel_model = 0.0f64;
    let num_tensors = params.tensors_mut().len();
    for ti in 0..num_tensors {
        let len = params.tensors_mut()[ti].1.len();
        for j in 0..len {
            let orig = params.tensors_mut()[ti].1[j];
            params.tensors_mut()[ti].1[j] = orig + step;
            let lp = loss_at(&params);
            params.tensors_mut()[ti].1[j] = orig - step;
            let lm = loss_at(&params);
            params.tensors_mut()[ti].1[j] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let an = analytic.tensors_mut()[ti].1[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel_model = max_rel_model.max(rel);
        }
    }
    assert!(max_rel_model < 1e-3, "model grad rel err {max_rel_model}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "gradient checks took {elapsed:?}");
    println!(
        "PASS gradient checks: focal rel err {max_rel_loss:.2e}, model rel err {max_rel_model:.2e}, {elapsed:?}"
    );
}

#[test]
fn criterion_windowing_arithmetic() {
    let spec = WindowSpec { size: 200, stride: 10 };
    assert_eq!(make_training_windows(1000, &spec).len(), 81);
    assert_eq!(
        make_inference_windows(450, 200),
        vec![(0, 200), (200, 200), (400, 50)]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array2::from_shape_fn((1000, 4), |_| rng.gen::<f64>());
    let pieces: Vec<(usize, usize, Array2<f64>)> = make_inference_windows(1000, 128)
        .into_iter()
        .map(|(start, len)| (start, len, x.slice(ndarray::s![start..start + len, ..]).to_owned()))
        .collect();
    assert_eq!(reassemble(&pieces, 1000, 4).unwrap(), x);
    println!("PASS windowing arithmetic: 81 training windows, exact tiling, identity reassembly");
}

#[test]
fn criterion_smoothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut probs = Array2::from_shape_fn((50, 4), |_| rng.gen::<f64>());
    for mut row in probs.rows_mut() {
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let identity = smooth(probs.view(), &SmoothSpec { kernel: 1 });
    assert_eq!(identity, probs);

    let impulse = array![[0.0], [0.0], [1.0], [0.0], [0.0]];
    let out = smooth(impulse.view(), &SmoothSpec { kernel: 3 });
    let expected = [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
    for (a, b) in out.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut max_row_err = 0.0f64;
    for k in [2, 3, 7, 25] {
        let s = smooth(probs.view(), &SmoothSpec { kernel: k });
        for row in s.rows() {
            max_row_err = max_row_err.max((row.sum() - 1.0).abs());
        }
    }
    assert!(max_row_err < 1e-9);
    println!("PASS smoothing: k=1 identity, impulse spread, row sum err {max_row_err:.2e}");
}

fn overfit_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-3,
        momentum: 0.9,
        weight_decay: 1e-4,
        plateau_factor: 0.01,
        plateau_patience: 5,
        clip_max_norm: 5.0,
        seed: 17,
        min_lr: 1e-6,
        model_selection: ModelSelection::Final,
        plateau_monitor: PlateauMonitor::TrainLoss,
    }
}

#[test]
fn criterion_optimizer_trace() {
    let config = ModelConfig {
        input_dim: 3,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 4,
        dropout: 0.0,
        num_classes: 2,
    };
    let mut tc = overfit_train_config(1);
    tc.learning_rate = 0.1;
    tc.weight_decay = 0.0;

    let mut params = ModelParams::zeros(&config);
    params.tensors_mut()[0].1[0] = 1.0;
    let mut grads = ModelParams::zeros(&config);
    grads.tensors_mut()[0].1[0] = 0.5;
    let mut state = OptimizerState::new(&config, &tc);
    sgd_step(&mut params, &mut grads.clone(), &mut state, &tc);
    assert!((params.tensors_mut()[0].1[0] - 0.95).abs() < 1e-15);
    sgd_step(&mut params, &mut grads, &mut state, &tc);
    assert!((params.tensors_mut()[0].1[0] - 0.855).abs() < 1e-15);

    let mut grads = ModelParams::zeros(&config);
    grads.tensors_mut()[0].1[0] = 6.0;
    grads.tensors_mut()[0].1[1] = 8.0;
    clip_gradients(&mut grads, 5.0);
    assert!((grads.tensors_mut()[0].1[0] - 3.0).abs() < 1e-12);
    assert!((grads.tensors_mut()[0].1[1] - 4.0).abs() < 1e-12);

    let tc = overfit_train_config(1);
    let mut state = OptimizerState::new(&config, &tc);
    for _ in 0..6 {
        plateau_update(&mut state, 1.0, &tc);
    }
    assert!((state.lr - 1e-5).abs() < 1e-18, "lr {}", state.lr);
    println!("PASS optimizer trace: SGD 0.95/0.855, clip (3,4), plateau lr 1e-3 -> 1e-5");
}

fn overfit_dataset() -> Dataset {
    generate(&SynthSpec {
        num_trials: 20,
        num_classes: 5,
        duration_range: (20, 150),
        segments_range: (3, 6),
        feature_dim: 8,
        noise_std: 0.1,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn criterion_overfit_oracle() {
    let start = Instant::now();
    let dataset = overfit_dataset();
    let mc = ModelConfig {
        input_dim: 8,
        embed_dim: 64,
        num_layers: 1,
        num_heads: 2,
        ffn_hidden: 32,
        dropout: 0.1,
        num_classes: 5,
    };
    let ws = WindowSpec { size: 100, stride: 10 };
    let focal = FocalSpec { alpha: 25.0, gamma: 2.0 };
    let tc = overfit_train_config(200);
    let (params, log) = train(&dataset, &mc, &tc, &ws, &focal).unwrap();
    let report = evaluate(
        &dataset,
        &dataset.split.train,
        &params,
        &ws,
        None,
        Aggregation::PerTrialMean,
    )
    .unwrap();
    let elapsed = start.elapsed();
    assert!(
        report.frame_accuracy >= 0.95,
        "train frame accuracy {} (final loss {})",
        report.frame_accuracy,
        log.last().unwrap().train_loss
    );
    assert!(report.edit_score >= 90.0, "train ES {}", report.edit_score);
    assert!(elapsed.as_secs_f64() < 600.0, "overfit run took {elapsed:?}");
    println!(
        "PASS overfit oracle: frame acc {:.4}, ES {:.2}, {elapsed:?}",
        report.frame_accuracy, report.edit_score
    );
}

#[test]
fn criterion_smoothing_efficacy() {
    // Long segments, oracle probabilities corrupted by isolated single-frame
    // flips. Smoothing must recover the transcript; raw argmax must not.
    let dataset = generate(&SynthSpec {
        num_trials: 10,
        num_classes: 4,
        duration_range: (60, 120),
        segments_range: (4, 7),
        feature_dim: 6,
        noise_std: 0.1,
        seed: 23,
        ..Default::default()
    })
    .unwrap();
    let c = dataset.num_classes();
    let flipped = |id: &str| -> hrtr::error::Result<Array2<f64>> {
        let (_, labels) = dataset.trial(id)?;
        let mut probs = oracle_probs(&dataset, id)?;
        let t = labels.labels.len();
        let mut last_flip = usize::MAX;
        for i in 13..t.saturating_sub(13) {
            let class = labels.labels[i];
            let interior = (i - 13..=i + 13).all(|j| labels.labels[j] == class);
            let spaced = last_flip == usize::MAX || i - last_flip >= 41;
            if interior && spaced {
                probs.row_mut(i).fill(0.0);
                probs[[i, (class + 1) % c]] = 1.0;
                last_flip = i;
            }
        }
        Ok(probs)
    };
    let ids: Vec<String> = dataset.split.all_ids().cloned().collect();
    let raw = evaluate_with(&dataset, &ids, &flipped, None, Aggregation::PerTrialMean).unwrap();
    let smoothed = evaluate_with(
        &dataset,
        &ids,
        &flipped,
        Some(SmoothSpec { kernel: 25 }),
        Aggregation::PerTrialMean,
    )
    .unwrap();
    assert!(
        smoothed.edit_score > raw.edit_score,
        "smoothed ES {} vs raw ES {}",
        smoothed.edit_score,
        raw.edit_score
    );
    println!(
        "PASS smoothing efficacy: ES {:.2} raw -> {:.2} with k=25",
        raw.edit_score, smoothed.edit_score
    );
}

#[test]
fn criterion_end_to_end_determinism() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_hrtr");
    let dir = tempfile::TempDir::new().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("synth.toml");
    std::fs::write(
        &spec_path,
        r#"
num_trials = 4
num_classes = 3
duration_range = [10, 30]
segments_range = [2, 4]
feature_dim = 4
noise_std = 0.1
seed = 3
"#,
    )
    .unwrap();
    let status = Command::new(bin)
        .args(["gen", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(&data_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
seed = 5
output_dir = "unused"

[data]
features_dir = "{d}/features"
labels_dir = "{d}/labels"
vocab_file = "{d}/vocab.txt"
split_file = "{d}/split.txt"

[model]
embed_dim = 16
num_layers = 1
num_heads = 2
ffn_hidden = 8
dropout = 0.1

[window]
size = 32
stride = 16

[smooth]
kernel = 0

[focal]
alpha = 25.0
gamma = 2.0

[train]
epochs = 2
batch_size = 4
learning_rate = 1e-3
momentum = 0.9
weight_decay = 1e-4
plateau_factor = 0.01
plateau_patience = 5
clip_max_norm = 5.0
min_lr = 1e-6
"#,
            d = data_dir.display()
        ),
    )
    .unwrap();

    let run = |out: &std::path::Path| {
        let status = Command::new(bin)
            .args(["train", "--config"])
            .arg(&config_path)
            .arg("--output-dir")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read(out.join("checkpoint.ckpt")).unwrap(),
            std::fs::read(out.join("train_log.jsonl")).unwrap(),
        )
    };
    let (ckpt1, log1) = run(&dir.path().join("run1"));
    let (ckpt2, log2) = run(&dir.path().join("run2"));
    assert_eq!(ckpt1, ckpt2, "checkpoints differ between identical runs");
    assert_eq!(log1, log2, "training logs differ between identical runs");
    println!(
        "PASS end-to-end determinism: {}-byte checkpoints and logs bitwise identical",
        ckpt1.len()
    );
}
