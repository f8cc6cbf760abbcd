//! Dataset plumbing: the built-in synthetic generator, normalization,
//! stratified subsetting, and the pad-crop-flip training augmentation.
//!
//! The same `Dataset` type backs CIFAR-10 (binary batches) and MNIST
//! (IDX files); point `load_cifar10`/`load_mnist` at a directory to use
//! real data. See scripts/fetch_cifar10.sh for downloading CIFAR-10.
//!
//! Run with: cargo run --example dataset_tour

use adabin::data::{augment, crop_padded, flip_horizontal, synthetic_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> adabin::error::Result<()> {
    let mut ds = synthetic_dataset(600, 3, 32, 10, 42);
    println!(
        "synthetic dataset: {} images, {}x{}x{}, {} classes",
        ds.len(),
        ds.channels,
        ds.height,
        ds.width,
        ds.classes
    );

    // balanced subset
    let sub = ds.stratified_subset(100, 0)?;
    let mut counts = vec![0usize; sub.classes];
    for &l in &sub.labels {
        counts[l as usize] += 1;
    }
    println!("stratified 100-image subset per-class counts: {counts:?}");

    // raw batch in [0,1], then per-channel normalization
    let (raw, labels) = ds.batch_raw(&[0, 1, 2, 3])?;
    let x = ds.normalize(&raw);
    println!(
        "batch of {:?} (labels {labels:?}): raw range [{:.2}, {:.2}], normalized mean {:+.3}",
        raw.shape(),
        raw.data().iter().cloned().fold(f32::INFINITY, f32::min),
        raw.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        x.data().iter().sum::<f32>() / x.numel() as f32
    );

    // augmentation building blocks: a centered crop after pad-4 is the
    // identity, and flipping twice returns the original
    let centered = crop_padded(&raw, 4, 4, 4)?;
    assert_eq!(centered.data(), raw.data());
    let flipped_twice = flip_horizontal(&flip_horizontal(&raw)?)?;
    assert_eq!(flipped_twice.data(), raw.data());
    println!("centered crop = identity, double flip = identity: ok");

    // the full training policy (random crop + coin-flip mirror) only runs
    // on splits marked augmentable
    ds.augmentable = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aug = augment(&ds, &raw, &mut rng)?;
    let changed = aug.data().iter().zip(raw.data()).filter(|(a, b)| a != b).count();
    println!("augmented batch differs from the original at {changed} values");
    Ok(())
}
