//! Activation binarization and its straight-through gradients.
//!
//! The quantizer picks beta - alpha or beta + alpha per element; backward
//! clips the pass-through gradient to the unit window of the centered
//! input u = (a - beta)/alpha and also produces scalar gradients for
//! (alpha, beta) themselves, so both are learned by SGD. Two alpha rules
//! are available; the default one matches finite differences of the
//! hard-tanh surrogate exactly.
//!
//! Run with: cargo run --example activation_ste

use adabin::quantize::{
    activation_binarize_backward, activation_binarize_forward, AlphaGradMode, BinarySpec,
};
use adabin::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adabin::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng);
    let (alpha, beta) = (0.8f32, 0.1f32);
    let spec = BinarySpec::per_layer(alpha, beta)?;

    let (pair, ctx) = activation_binarize_forward(&a, &spec)?;
    let upper = pair.dequantized.data().iter().filter(|&&v| v > beta).count();
    println!(
        "binarized {} values onto {{{:.2}, {:.2}}} ({upper} upper / {} lower)",
        a.numel(),
        beta - alpha,
        beta + alpha,
        a.numel() - upper
    );

    let upstream = Tensor::randn(a.shape(), 1.0, &mut rng);
    for mode in [AlphaGradMode::Consistent, AlphaGradMode::PaperVerbatim] {
        let (da, dalpha, dbeta) = activation_binarize_backward(&upstream, &ctx, mode)?;
        let passed = da.data().iter().filter(|&&v| v != 0.0).count();
        println!(
            "{mode:?}: d_alpha = {dalpha:+.5}, d_beta = {dbeta:+.5}, \
             input grads pass through at {passed}/{} positions",
            a.numel()
        );
    }

    // check the default mode against a finite difference of the surrogate
    // loss sum(upstream * (beta + alpha*htanh((a-beta)/alpha)))
    let surrogate = |al: f32, be: f32| -> f32 {
        a.data()
            .iter()
            .zip(upstream.data())
            .map(|(&x, &u)| u * (be + al * ((x - be) / al).clamp(-1.0, 1.0)))
            .sum()
    };
    let eps = 1e-3;
    let fd_alpha = (surrogate(alpha + eps, beta) - surrogate(alpha - eps, beta)) / (2.0 * eps);
    let (_, dalpha, _) = activation_binarize_backward(&upstream, &ctx, AlphaGradMode::Consistent)?;
    println!("finite-difference d_alpha = {fd_alpha:+.5} vs analytic {dalpha:+.5}");
    assert!((fd_alpha - dalpha).abs() < 1e-2);
    Ok(())
}
