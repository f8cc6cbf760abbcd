//! XNOR/popcount convolution and the packed inference bundle.
//!
//! Binarized activations and weights live in {beta - alpha, beta + alpha},
//! so a convolution decomposes into a popcount term plus two correction
//! terms driven by per-pixel bit sums and a precomputed bias. The packed
//! kernel reproduces a float convolution on the dequantized operands, and
//! a model exported to a bundle reproduces its own training-path
//! predictions bit for bit.
//!
//! Run with: cargo run --example packed_inference

use adabin::bitconv::{binary_conv_packed, ConvSpecs};
use adabin::bitpack::pack;
use adabin::bundle::export_packed_model;
use adabin::config::RunConfig;
use adabin::layers::build_model;
use adabin::quantize::{adabin_quantize, equalize_weights, BinarySpec};
use adabin::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adabin::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // --- single layer: packed kernel vs float reference -------------------
    let a = Tensor::randn(&[2, 16, 10, 10], 1.0, &mut rng);
    let w = Tensor::randn(&[8, 16, 3, 3], 0.1, &mut rng);
    let w_spec = equalize_weights(&w)?;
    let a_spec = BinarySpec::per_layer(0.9, 0.05)?;
    let wq = adabin_quantize(&w, &w_spec)?;
    let aq = adabin_quantize(&a, &a_spec)?;

    let (alpha_w, beta_w) = match &w_spec {
        BinarySpec::PerFilter { alpha, beta } => (alpha.clone(), beta.clone()),
        _ => unreachable!(),
    };
    let specs = ConvSpecs { alpha_w, beta_w, alpha_a: 0.9, beta_a: 0.05 };
    let fast = binary_conv_packed(&aq.bits, &wq.bits, &specs, 1, 1)?;
    let reference = adabin::tensor::conv2d_ref(&aq.dequantized, &wq.dequantized, 1, 1)?;
    let max_err = fast
        .data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    println!("packed conv vs float reference, max |error| = {max_err:.2e}");

    // --- whole model: training path vs exported bundle --------------------
    let mut cfg = RunConfig::default();
    cfg.set("arch", "smallcnn-adabin")?;
    cfg.set("width", "0.5")?;
    let mut model = build_model(&cfg.model_config())?;
    let x = Tensor::randn(&[4, 3, 32, 32], 1.0, &mut rng);
    let y_train_path = model.forward_logits(&x, false)?;

    let bundle = export_packed_model(&model)?;
    let bytes = bundle.to_bytes();
    let restored = adabin::bundle::Bundle::from_bytes(&bytes)?;
    let y_packed = restored.forward(&x)?;

    assert_eq!(y_train_path.data(), y_packed.data());
    println!(
        "bundle of {} records, {} bytes: logits identical bit for bit",
        bundle.records.len(),
        bytes.len()
    );
    let pack_demo = pack(&Tensor::from_vec(vec![1, 64, 1, 1], vec![1.0; 64])?)?;
    println!(
        "(storage: 64 signs pack into {} machine word(s))",
        pack_demo.words().len()
    );
    Ok(())
}
