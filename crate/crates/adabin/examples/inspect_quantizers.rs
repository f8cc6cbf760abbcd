//! Watch the adaptive binary sets move during training.
//!
//! Every binary conv starts with the activation set {-1, +1}
//! (alpha = 1, beta = 0); training shifts the center and rescales the
//! distance per layer. This trains briefly, then prints the inspect
//! report: per-layer activation (alpha, beta), per-filter weight
//! (alpha, beta) summaries, and Maxout slope ranges.
//!
//! Run with: cargo run --release --example inspect_quantizers

use adabin::config::RunConfig;
use adabin::layers::build_model;
use adabin::run::{inspect_model, quantizer_stats, train};

fn main() -> adabin::error::Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("arch", "smallcnn-adabin"),
        ("dataset", "synthetic"),
        ("subset", "300"),
        ("epochs", "4"),
        ("batch_size", "50"),
        ("lr0", "0.1"),
        ("width", "0.25"),
        ("out_dir", "runs/inspect_quantizers"),
    ] {
        cfg.set(k, v)?;
    }

    let mut fresh = build_model(&cfg.model_config())?;
    println!("fresh model:");
    for q in quantizer_stats(&mut fresh) {
        println!("  {:<24} alpha_a = {:.4}  beta_a = {:+.4}", q.layer, q.alpha_a, q.beta_a);
    }

    let outcome = train(&cfg)?;
    let mut model = outcome.model;
    println!("\nafter {} epochs:", cfg.epochs);
    for q in quantizer_stats(&mut model) {
        println!("  {:<24} alpha_a = {:.4}  beta_a = {:+.4}", q.layer, q.alpha_a, q.beta_a);
    }

    let report = inspect_model(&model)?;
    println!("\nfull report:\n{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
