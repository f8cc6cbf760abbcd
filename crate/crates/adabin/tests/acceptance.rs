//! Acceptance suite: one criterion per test, each printing a single
//! PASS/FAIL (or SKIP) line. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.

use adabin::bitconv::{binary_conv_packed, ConvSpecs};
use adabin::bundle::{export_packed_model, Bundle};
use adabin::config::RunConfig;
use adabin::costmodel::{conv_cost, model_cost, CostMode};
use adabin::data::synthetic_dataset;
use adabin::layers::{Maxout, Nonlinearity};
use adabin::autograd::Layer;
use adabin::quantize::{
    activation_binarize_backward, activation_binarize_forward, adabin_quantize, equalize_weights,
    kld_numeric, AlphaGradMode, BinarySpec,
};
use adabin::run::{train, SYNTH_TEST};
use adabin::tensor::{conv2d_ref, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, what: &str, ok: bool) {
    println!("criterion {n} ({what}): {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({what}) failed");
}

/// Packed XNOR/popcount convolution agrees with the float reference on the
/// dequantized operands across a wide sweep of random geometries.
#[test]
fn criterion_1_packed_conv_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let sizes = [1usize, 2, 3, 4, 5, 6, 7, 8, 64, 65];
    let mut checked = 0usize;
    let mut worst = 0.0f32;
    for _ in 0..300 {
        let n = sizes[rng.random_range(0..sizes.len())];
        let c = sizes[rng.random_range(0..sizes.len())];
        let k = [1usize, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2usize);
        let pad = rng.random_range(0..=1usize);
        let h = rng.random_range(k..k + 5);
        let w = rng.random_range(k..k + 5);

        let a = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[n, c, k, k], 0.2, &mut rng);
        let w_spec = equalize_weights(&wt).unwrap();
        let a_spec = BinarySpec::per_layer(
            0.2 + rng.random_range(0.0..1.0f32),
            rng.random_range(-0.3..0.3f32),
        )
        .unwrap();
        let aq = adabin_quantize(&a, &a_spec).unwrap();
        let wq = adabin_quantize(&wt, &w_spec).unwrap();

        let (alpha_w, beta_w) = match &w_spec {
            BinarySpec::PerFilter { alpha, beta } => (alpha.clone(), beta.clone()),
            _ => unreachable!(),
        };
        let (alpha_a, beta_a) = match &a_spec {
            BinarySpec::PerLayer { alpha, beta } => (*alpha, *beta),
            _ => unreachable!(),
        };
        let specs = ConvSpecs { alpha_w, beta_w, alpha_a, beta_a };
        let fast = binary_conv_packed(&aq.bits, &wq.bits, &specs, stride, pad).unwrap();
        let slow = conv2d_ref(&aq.dequantized, &wq.dequantized, stride, pad).unwrap();
        assert_eq!(fast.shape(), slow.shape());
        let scale = slow.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
        for (x, y) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((x - y).abs() / scale);
        }
        checked += 1;
    }
    report(1, &format!("packed conv vs reference, {checked} geometries, max rel err {worst:.2e}"), checked >= 300 && worst <= 1e-4);
}

/// Analytic gradients match central finite differences: the activation
/// straight-through estimator tightly, Maxout and float convolution layers
/// at looser float tolerance. Points near the estimator's clip kinks are
/// excluded since the surrogate is not differentiable there.
#[test]
fn criterion_2_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut ok = true;

    // activation STE: per-element surrogate FD over 1000 points
    let (alpha, beta) = (0.7f32, 0.15f32);
    let spec = BinarySpec::per_layer(alpha, beta).unwrap();
    let a = Tensor::randn(&[1, 10, 10, 10], 1.0, &mut rng);
    let upstream = Tensor::randn(a.shape(), 1.0, &mut rng);
    let (_, ctx) = activation_binarize_forward(&a, &spec).unwrap();
    let (da, dalpha, dbeta) =
        activation_binarize_backward(&upstream, &ctx, AlphaGradMode::Consistent).unwrap();
    let sur = |x: f32, al: f32, be: f32| be + al * ((x - be) / al).clamp(-1.0, 1.0);
    let eps = 1e-3f32;
    let mut checked = 0;
    for i in 0..a.numel() {
        let x = a.data()[i];
        let u = (x - beta) / alpha;
        if (u.abs() - 1.0).abs() < 2.0 * eps / alpha {
            continue; // clip kink
        }
        let fd = upstream.data()[i] * (sur(x + eps, alpha, beta) - sur(x - eps, alpha, beta))
            / (2.0 * eps);
        let err = (fd - da.data()[i]).abs() / fd.abs().max(1.0);
        if err > 1e-4 {
            ok = false;
        }
        checked += 1;
    }
    assert!(checked >= 900, "only {checked} FD points away from kinks");
    // scalar (alpha, beta) gradients against the same surrogate
    let total = |al: f32, be: f32| -> f64 {
        a.data()
            .iter()
            .zip(upstream.data())
            .map(|(&x, &r)| (r * sur(x, al, be)) as f64)
            .sum()
    };
    let fd_alpha = ((total(alpha + eps, beta) - total(alpha - eps, beta)) / (2.0 * eps as f64)) as f32;
    let fd_beta = ((total(alpha, beta + eps) - total(alpha, beta - eps)) / (2.0 * eps as f64)) as f32;
    ok &= (fd_alpha - dalpha).abs() / fd_alpha.abs().max(1.0) < 1e-2;
    ok &= (fd_beta - dbeta).abs() / fd_beta.abs().max(1.0) < 1e-2;

    // Maxout layer: input and slope gradients at float tolerance
    let mut maxout = Maxout::new(6, Nonlinearity::Maxout);
    let x = Tensor::randn(&[2, 6, 5, 5], 1.0, &mut rng);
    let r = Tensor::randn(x.shape(), 1.0, &mut rng);
    let y = maxout.forward(&x, true).unwrap();
    let _ = y;
    let dx = maxout.backward(&r).unwrap();
    let loss = |m: &mut Maxout, x: &Tensor| -> f32 {
        let y = m.forward(x, true).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    for i in (0..x.numel()).step_by(7) {
        if x.data()[i].abs() < 2.0 * eps {
            continue; // kink at zero
        }
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fd = (loss(&mut maxout, &xp) - loss(&mut maxout, &xm)) / (2.0 * eps);
        if (fd - dx.data()[i]).abs() / fd.abs().max(1.0) > 1e-3 {
            ok = false;
        }
    }

    // float convolution layer: weight gradients at float tolerance
    let mut conv = adabin::layers::Conv2dFloat::new(3, 4, 3, 1, 1, false, &mut rng);
    let x = Tensor::randn(&[1, 3, 6, 6], 1.0, &mut rng);
    let r = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng);
    let y = conv.forward(&x, true).unwrap();
    let _ = y;
    let _ = conv.backward(&r).unwrap();
    let grads: Vec<f32> = conv.weight.grad.data().to_vec();
    for i in (0..conv.weight.value.numel()).step_by(11) {
        let orig = conv.weight.value.data()[i];
        conv.weight.value.data_mut()[i] = orig + eps;
        let yp: f32 = conv.forward(&x, true).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        conv.weight.value.data_mut()[i] = orig - eps;
        let ym: f32 = conv.forward(&x, true).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        conv.weight.value.data_mut()[i] = orig;
        let fd = (yp - ym) / (2.0 * eps);
        if (fd - grads[i]).abs() / fd.abs().max(1.0) > 1e-3 {
            ok = false;
        }
    }

    report(2, "analytic gradients vs finite differences", ok);
}

/// Weight equalization is exactly the analytic center/scale (filter mean
/// and population standard deviation), is equivariant under affine maps of
/// the weights, and sits near the KL-divergence-minimizing scale.
#[test]
fn criterion_3_weight_equalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let w = Tensor::randn(&[6, 8, 3, 3], 0.1, &mut rng);
    let per = w.numel() / 6;
    let mut ok = true;

    // exact analytic values
    let spec = equalize_weights(&w).unwrap();
    if let BinarySpec::PerFilter { alpha, beta } = &spec {
        for f in 0..6 {
            let chunk = &w.data()[f * per..(f + 1) * per];
            let mean = chunk.iter().sum::<f32>() / per as f32;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / per as f32;
            ok &= (beta[f] - mean).abs() <= 1e-6;
            ok &= (alpha[f] - var.sqrt()).abs() <= 1e-6;
        }
    } else {
        ok = false;
    }

    // shift/scale equivariance: w -> s*w + t maps (alpha, beta) -> (s*alpha, s*beta + t)
    let (s, t) = (2.5f32, -0.3f32);
    let w2 = w.map(|v| s * v + t);
    let spec2 = equalize_weights(&w2).unwrap();
    if let (BinarySpec::PerFilter { alpha: a1, beta: b1 }, BinarySpec::PerFilter { alpha: a2, beta: b2 }) =
        (&spec, &spec2)
    {
        for f in 0..6 {
            ok &= (a2[f] - s * a1[f]).abs() <= 1e-5;
            ok &= (b2[f] - (s * b1[f] + t)).abs() <= 1e-5;
        }
    }

    // the equalized alpha is close to the KLD grid minimizer
    let samples = Tensor::randn(&[4000], 1.0, &mut rng).map(|v| 0.6 * v + 0.2);
    let eq = equalize_weights(&samples.clone().reshaped(vec![1, 1, 1, 4000]).unwrap()).unwrap();
    let (alpha_star, beta_star) = match &eq {
        BinarySpec::PerFilter { alpha, beta } => (alpha[0], beta[0]),
        _ => unreachable!(),
    };
    let mut best = (f32::INFINITY, 0.0f32);
    let mut a = 0.5 * alpha_star;
    while a <= 1.5 * alpha_star {
        let kld = kld_numeric(&samples, &BinarySpec::per_layer(a, beta_star).unwrap(), 64).unwrap();
        if kld < best.0 {
            best = (kld, a);
        }
        a += 0.01 * alpha_star;
    }
    ok &= ((best.1 - alpha_star) / alpha_star).abs() <= 0.15;

    report(3, "weight equalization analytic + equivariance + divergence minimizer", ok);
}

/// The calibrated cost convention reproduces the canonical overhead and
/// savings figures for a 256->256 3x3 convolution on a 14x14 map.
#[test]
fn criterion_4_cost_model_canonical_figures() {
    let sign = conv_cost(256, 256, 3, 14, 14, CostMode::SignBinary).unwrap();
    let ada = conv_cost(256, 256, 3, 14, 14, CostMode::Adabin).unwrap();
    let float = conv_cost(256, 256, 3, 14, 14, CostMode::Float).unwrap();
    let extra_ops = 100.0 * (ada.total_ops() - sign.total_ops()) / sign.total_ops();
    let extra_params =
        100.0 * (ada.total_bits() as f64 - sign.total_bits() as f64) / sign.total_bits() as f64;
    let speedup = float.total_ops() / ada.total_ops();
    let memory = float.total_bits() as f64 / ada.total_bits() as f64;
    let ok = (extra_ops - 2.74).abs() <= 0.2
        && (extra_params - 1.37).abs() <= 0.1
        && (speedup - 60.85).abs() <= 1.5
        && (memory - 31.0).abs() <= 1.0;
    report(
        4,
        &format!("cost model: +{extra_ops:.2}% ops, +{extra_params:.2}% params, {speedup:.2}x, {memory:.2}x"),
        ok,
    );
}

/// The binary sets are genuinely adaptive: a layer's values sit on
/// {beta - alpha, beta + alpha}, products of two binarized operands span a
/// four-value alphabet, and (alpha, beta) = (1, 0) collapses to plain sign.
#[test]
fn criterion_5_adaptive_alphabet() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
    let mut ok = true;

    let spec = BinarySpec::per_layer(0.8, 0.3).unwrap();
    let q = adabin_quantize(&x, &spec).unwrap();
    for &v in q.dequantized.data() {
        ok &= (v - (0.3 - 0.8)).abs() < 1e-6 || (v - (0.3 + 0.8)).abs() < 1e-6;
    }

    // product alphabet of two independent binary sets has 4 values
    let w = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
    let wq = adabin_quantize(&w, &BinarySpec::per_layer(0.5, -0.1).unwrap()).unwrap();
    let mut products: Vec<f32> = q
        .dequantized
        .data()
        .iter()
        .zip(wq.dequantized.data())
        .map(|(a, b)| a * b)
        .collect();
    products.sort_by(f32::total_cmp);
    products.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    ok &= products.len() == 4;

    // unit spec reduces to sign
    let unit = adabin_quantize(&x, &BinarySpec::per_layer(1.0, 0.0).unwrap()).unwrap();
    for (&v, &orig) in unit.dequantized.data().iter().zip(x.data()) {
        ok &= v == if orig >= 0.0 { 1.0 } else { -1.0 };
    }

    report(5, "adaptive binary sets and product alphabet", ok);
}

/// Full CIFAR-10 ablation ordering: adaptive sets beat a sign+PReLU
/// baseline by at least half a point, averaged over seeds. Needs the real
/// dataset, so it is skipped unless ADABIN_DATA points at it.
#[test]
fn criterion_6_cifar10_ablation_ordering() {
    let data = match std::env::var("ADABIN_DATA") {
        Ok(v) if !v.is_empty() => v,
        _ => {
            println!("criterion 6 (CIFAR-10 ablation ordering): SKIP (ADABIN_DATA not set)");
            return;
        }
    };
    let run = |weight: &str, act: &str, nonlin: &str, seed: u64, out: &str| -> f32 {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("arch", "resnet20-adabin"),
            ("dataset", "cifar10"),
            ("subset", "10000"),
            ("epochs", "30"),
            ("batch_size", "128"),
            ("lr0", "0.1"),
            ("weight_mode", weight),
            ("act_mode", act),
            ("nonlin", nonlin),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg.seed = seed;
        cfg.data_dir = data.clone();
        cfg.out_dir = format!("target/acceptance6/{out}-{seed}");
        train(&cfg).unwrap().best_acc
    };
    let mut baseline = 0.0;
    let mut adaptive = 0.0;
    for seed in 0..3u64 {
        baseline += run("scaled-sign", "sign", "prelu", seed, "baseline") / 3.0;
        adaptive += run("adabin", "adabin", "maxout", seed, "adabin") / 3.0;
    }
    let gap = (adaptive - baseline) * 100.0;
    report(
        6,
        &format!("CIFAR-10 ordering: adaptive {:.2}% vs baseline {:.2}% (gap {gap:.2}pp)", adaptive * 100.0, baseline * 100.0),
        gap >= 0.5,
    );
}

/// A trained model exported to the packed bundle predicts identically to
/// the training-path evaluation on 1000 held-out images, and the bundle's
/// size on disk matches the cost model's storage prediction within 5%.
#[test]
fn criterion_7_export_parity_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("arch", "smallcnn-adabin"),
        ("dataset", "synthetic"),
        ("subset", "300"),
        ("epochs", "2"),
        ("batch_size", "50"),
        ("lr0", "0.05"),
        ("width", "0.5"),
        ("seed", "12"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.out_dir = dir.path().to_string_lossy().into_owned();
    let outcome = train(&cfg).unwrap();
    let mut model = outcome.model;

    let test = synthetic_dataset(SYNTH_TEST, 3, 32, 10, cfg.seed + 1);
    assert_eq!(test.len(), 1000);
    let bundle = export_packed_model(&model).unwrap();
    let bytes = bundle.to_bytes();
    let packed = Bundle::from_bytes(&bytes).unwrap();

    let mut mismatches = 0usize;
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(100) {
        let (raw, _) = test.batch_raw(chunk).unwrap();
        let x = test.normalize(&raw);
        let y1 = model.forward_logits(&x, false).unwrap();
        let y2 = packed.forward(&x).unwrap();
        let classes = y1.shape()[1];
        for row in 0..chunk.len() {
            let am = |t: &Tensor| -> usize {
                let d = &t.data()[row * classes..(row + 1) * classes];
                (0..classes).max_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap()
            };
            if am(&y1) != am(&y2) {
                mismatches += 1;
            }
        }
    }

    let predicted_bits = model_cost(&model.layers, &[1, 3, 32, 32]).unwrap().total.total_bits();
    let predicted_bytes = predicted_bits as f64 / 8.0;
    let rel = (bytes.len() as f64 - predicted_bytes).abs() / predicted_bytes;

    report(
        7,
        &format!("packed export: {mismatches}/1000 prediction mismatches, size off by {:.2}%", rel * 100.0),
        mismatches == 0 && rel <= 0.05,
    );
}

/// Training is deterministic: two runs with the same seed produce
/// byte-identical metrics logs.
#[test]
fn criterion_8_deterministic_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("arch", "smallcnn-adabin"),
            ("dataset", "synthetic"),
            ("subset", "200"),
            ("epochs", "2"),
            ("batch_size", "32"),
            ("lr0", "0.05"),
            ("width", "0.25"),
            ("seed", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg.out_dir = dir.path().join(name).to_string_lossy().into_owned();
        let out = train(&cfg).unwrap();
        logs.push(std::fs::read(out.out_dir.join("metrics.jsonl")).unwrap());
    }
    report(8, "identical seeds give identical metrics logs", logs[0] == logs[1]);
}
