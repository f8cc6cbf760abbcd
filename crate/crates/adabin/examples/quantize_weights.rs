//! Weight equalization: derive per-filter (alpha, beta) analytically from
//! each filter's mean and population standard deviation, then binarize the
//! weights onto {beta - alpha, beta + alpha} and measure what was lost.
//!
//! Run with: cargo run --example quantize_weights

use adabin::quantize::{adabin_quantize, equalize_weights, kld_numeric, BinarySpec};
use adabin::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adabin::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // 8 filters of a 16-channel 3x3 conv; shift filter 0 so the centers differ
    let mut w = Tensor::randn(&[8, 16, 3, 3], 0.05, &mut rng);
    let per = w.numel() / 8;
    for v in &mut w.data_mut()[..per] {
        *v += 0.1;
    }

    let spec = equalize_weights(&w)?;
    if let BinarySpec::PerFilter { alpha, beta } = &spec {
        println!("filter  alpha     beta");
        for f in 0..8 {
            println!("{f:>6}  {:<8.5}  {:<8.5}", alpha[f], beta[f]);
        }
    }

    let q = adabin_quantize(&w, &spec)?;
    let mse: f32 = w
        .data()
        .iter()
        .zip(q.dequantized.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f32>()
        / w.numel() as f32;
    println!("\nreconstruction mse: {mse:.6}");

    // the equalized spec should also be close to the KL-divergence minimizer
    let flat = Tensor::from_vec(vec![w.numel()], w.data().to_vec())?;
    if let BinarySpec::PerFilter { alpha, beta } = &spec {
        let equalized = BinarySpec::per_layer(alpha[1], beta[1])?;
        let kld = kld_numeric(&flat, &equalized, 64)?;
        println!("kld(data || binary set) at the equalized point: {kld:.4}");
    }

    // contrast: plain sign binarization is the special case beta = 0
    let sign_spec = BinarySpec::per_layer(1.0, 0.0)?;
    let sign = adabin_quantize(&w, &sign_spec)?;
    let values: std::collections::BTreeSet<String> =
        sign.dequantized.data().iter().map(|v| format!("{v}")).collect();
    println!("sign binarization alphabet: {values:?}");
    Ok(())
}
