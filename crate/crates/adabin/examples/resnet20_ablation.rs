//! Build the ResNet-20 binary network and sweep the quantizer/nonlinearity
//! ablation grid, comparing parameter counts and a few training steps of
//! each variant on synthetic data.
//!
//! Variants: weights in {scaled-sign, adaptive, adaptive-learnable} x
//! activations in {sign, adaptive} x nonlinearity in
//! {none, prelu, maxout-pos, maxout}.
//!
//! Run with: cargo run --release --example resnet20_ablation

use adabin::config::RunConfig;
use adabin::layers::build_model;
use adabin::run::train;

fn main() -> adabin::error::Result<()> {
    // structure of the full-size model
    let mut full = RunConfig::default();
    full.set("arch", "resnet20-adabin")?;
    let mut model = build_model(&full.model_config())?;
    println!(
        "resnet20-adabin: {} binary convs, {} float convs, {} parameters\n",
        model.count_kind("binary_conv"),
        model.count_kind("conv2d_float"),
        model.num_parameters()
    );

    // a few quick variants, trained 2 epochs on a small synthetic split
    let variants: [(&str, &str, &str); 4] = [
        ("scaled-sign", "sign", "prelu"),   // classic XNOR-style baseline
        ("adabin", "sign", "prelu"),        // adaptive weights only
        ("adabin", "adabin", "prelu"),      // + adaptive activations
        ("adabin", "adabin", "maxout"),     // full configuration
    ];
    println!("{:<14} {:<8} {:<12} {:>10} {:>9}", "weights", "acts", "nonlin", "loss", "acc");
    for (w, a, n) in variants {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("arch", "resnet20-adabin"),
            ("dataset", "synthetic"),
            ("subset", "200"),
            ("epochs", "2"),
            ("batch_size", "50"),
            ("lr0", "0.05"),
            ("width", "0.25"),
            ("weight_mode", w),
            ("act_mode", a),
            ("nonlin", n),
        ] {
            cfg.set(k, v)?;
        }
        cfg.out_dir = format!("runs/ablation/{w}-{a}-{n}");
        let outcome = train(&cfg)?;
        let last = outcome.metrics.last().unwrap();
        println!(
            "{w:<14} {a:<8} {n:<12} {:>10.4} {:>8.1}%",
            last.train_loss,
            last.test_acc * 100.0
        );
    }
    Ok(())
}
