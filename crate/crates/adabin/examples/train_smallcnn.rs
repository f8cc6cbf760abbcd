//! Short end-to-end training run on the built-in synthetic dataset:
//! binary convolutions with learned activation quantizers, SGD with
//! momentum and a cosine schedule, per-epoch JSON metrics, checkpoints,
//! and a final packed-bundle export.
//!
//! No dataset files are needed. For real data, point data_dir (or the
//! ADABIN_DATA environment variable) at a CIFAR-10 or MNIST directory
//! and switch the `dataset` key.
//!
//! Run with: cargo run --release --example train_smallcnn

use adabin::config::RunConfig;
use adabin::run::{export, train};

fn main() -> adabin::error::Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("arch", "smallcnn-adabin"),
        ("dataset", "synthetic"),
        ("subset", "500"),
        ("epochs", "6"),
        ("batch_size", "50"),
        ("lr0", "0.05"),
        ("width", "0.5"),
        ("seed", "1"),
        ("out_dir", "runs/train_smallcnn"),
    ] {
        cfg.set(k, v)?;
    }

    let outcome = train(&cfg)?;
    for m in &outcome.metrics {
        println!(
            "epoch {:>2}  lr {:.4}  train loss {:.4}  test acc {:>5.1}%",
            m.epoch,
            m.lr,
            m.train_loss,
            m.test_acc * 100.0
        );
    }
    println!("best test accuracy: {:.1}%", outcome.best_acc * 100.0);

    let first = &outcome.metrics[0];
    let last = outcome.metrics.last().unwrap();
    assert!(last.train_loss < first.train_loss, "loss should decrease");

    let bundle = outcome.out_dir.join("model.adbn");
    let size = export(outcome.out_dir.join("best.ckpt"), &bundle)?;
    println!("packed best checkpoint into {} ({size} bytes)", bundle.display());
    Ok(())
}
