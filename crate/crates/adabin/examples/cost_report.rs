//! Cost model: operations and parameter storage of a binarized network.
//!
//! Binary convolutions run as XNOR/popcount on 64-bit words, so their work
//! counts as binary_ops/64; the adaptive binary sets add a small float
//! correction per output pixel and two extra constants per filter. This
//! prints the per-layer table for ResNet-20 and the canonical mid-network
//! conv whose overhead figures are known in closed form.
//!
//! Run with: cargo run --example cost_report

use adabin::config::RunConfig;
use adabin::run::bench;

fn main() -> adabin::error::Result<()> {
    let cfg = RunConfig::default(); // resnet20-adabin on 32x32 RGB
    let (text, lines) = bench(&cfg)?;
    print!("{text}");

    let st = lines
        .iter()
        .find(|l| l["kind"] == "self_test")
        .expect("bench always emits the self-test row");
    assert_eq!(st["ok"], serde_json::json!(true));
    println!("\nJSON form of the self-test row:\n{st}");
    Ok(())
}
