//! Dataset ingestion (CIFAR-10 binary batches, MNIST IDX), the standard
//! training-time augmentation, and stratified subsetting.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const MNIST_MEAN: [f32; 1] = [0.1307];
pub const MNIST_STD: [f32; 1] = [0.3081];

/// Images are kept as raw bytes and scaled to [0, 1] when a batch is
/// materialized; normalization constants are applied separately so the
/// augmentation can run pre-normalization.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Whether `augment` should apply the pad-crop-flip policy.
    pub augmentable: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_elems(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Raw [0,1] images for the given indices, plus their labels.
    pub fn batch_raw(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let elems = self.image_elems();
        let mut data = Vec::with_capacity(idx.len() * elems);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend(self.pixels[i * elems..(i + 1) * elems].iter().map(|&b| b as f32 / 255.0));
            labels.push(self.labels[i] as usize);
        }
        Ok((
            Tensor::from_vec(vec![idx.len(), self.channels, self.height, self.width], data)?,
            labels,
        ))
    }

    /// Apply the per-channel normalization to a raw [0,1] batch.
    pub fn normalize(&self, raw: &Tensor) -> Tensor {
        let c = self.channels;
        let n = raw.shape()[0];
        let hw = raw.numel() / (n * c);
        let mut out = raw.clone();
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (m, s) = (self.mean[ch], self.std[ch]);
                for v in &mut out.data_mut()[base..base + hw] {
                    *v = (*v - m) / s;
                }
            }
        }
        out
    }

    /// Deterministic stratified subset: `total` examples spread evenly
    /// over the classes, sampled without replacement per class.
    pub fn stratified_subset(&self, total: usize, seed: u64) -> Result<Dataset> {
        if total == 0 || total > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset size {total} out of range (dataset has {})",
                self.len()
            )));
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let per = total / self.classes;
        let mut extra = total - per * self.classes;
        let mut chosen = Vec::with_capacity(total);
        for pool in &mut by_class {
            let want = per + usize::from(extra > 0);
            if extra > 0 {
                extra -= 1;
            }
            if pool.len() < want {
                return Err(Error::InvalidArgument(format!(
                    "class has only {} examples, need {want}",
                    pool.len()
                )));
            }
            // partial Fisher-Yates
            for j in 0..want {
                let pick = j + rng.random_range(0..pool.len() - j);
                pool.swap(j, pick);
                chosen.push(pool[j]);
            }
        }
        chosen.sort_unstable();
        let elems = self.image_elems();
        let mut pixels = Vec::with_capacity(chosen.len() * elems);
        let mut labels = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            pixels.extend_from_slice(&self.pixels[i * elems..(i + 1) * elems]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset { pixels, labels, ..self.clone() })
    }
}

// ----------------------------------------------------------------- loaders

const CIFAR_RECORD: usize = 3073;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

fn read_cifar_file(path: &Path, pixels: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            what: path.display().to_string(),
            detail: format!(
                "file size {} is not a multiple of the {CIFAR_RECORD}-byte record (next multiple: {})",
                bytes.len(),
                bytes.len().div_ceil(CIFAR_RECORD) * CIFAR_RECORD
            ),
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
        });
    }
    for (ri, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                what: path.display().to_string(),
                detail: format!("label byte {} > 9", rec[0]),
                offset: (ri * CIFAR_RECORD) as u64,
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn cifar_dataset(pixels: Vec<u8>, labels: Vec<u8>, augmentable: bool) -> Dataset {
    Dataset {
        pixels,
        labels,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
        augmentable,
    }
}

/// Load the CIFAR-10 binary batches: 3073-byte records, label byte then
/// the R, G, B planes of a 32×32 image.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        read_cifar_file(&dir.join(f), &mut pixels, &mut labels)?;
    }
    let train = cifar_dataset(pixels, labels, true);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut pixels, &mut labels)?;
    Ok((train, cifar_dataset(pixels, labels, false)))
}

const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            what: what.into(),
            detail: "truncated header".into(),
            offset: pos as u64,
        })
}

fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let what = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, &what)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::Format {
            what,
            detail: format!("bad magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}"),
            offset: 0,
        });
    }
    let n = read_be_u32(&bytes, 4, &what)? as usize;
    let h = read_be_u32(&bytes, 8, &what)? as usize;
    let w = read_be_u32(&bytes, 12, &what)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() != need {
        return Err(Error::Format {
            what,
            detail: format!("expected {need} bytes for {n} images, got {}", bytes.len()),
            offset: bytes.len().min(need) as u64,
        });
    }
    Ok((bytes[16..].to_vec(), n, h, w))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let what = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let magic = read_be_u32(&bytes, 0, &what)?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::Format {
            what,
            detail: format!("bad magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}"),
            offset: 0,
        });
    }
    let n = read_be_u32(&bytes, 4, &what)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            what,
            detail: format!("expected {} bytes for {n} labels, got {}", 8 + n, bytes.len()),
            offset: bytes.len().min(8 + n) as u64,
        });
    }
    Ok(bytes[8..].to_vec())
}

fn mnist_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let (pixels, n, h, w) = read_idx_images(&dir.join(images))?;
    let labels = read_idx_labels(&dir.join(labels))?;
    if labels.len() != n {
        return Err(Error::Format {
            what: dir.join(images).display().to_string(),
            detail: format!("{n} images but {} labels", labels.len()),
            offset: 0,
        });
    }
    Ok(Dataset {
        pixels,
        labels,
        channels: 1,
        height: h,
        width: w,
        classes: 10,
        mean: MNIST_MEAN.to_vec(),
        std: MNIST_STD.to_vec(),
        augmentable: false,
    })
}

/// Load the MNIST IDX pair (`train-*` and `t10k-*` conventional names).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((
        mnist_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

/// Class-separable random images for runs without real data: each class
/// gets a fixed random template, samples are noisy copies.
pub fn synthetic_dataset(n: usize, channels: usize, side: usize, classes: usize, seed: u64) -> Dataset {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elems = channels * side * side;
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..elems).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let mut pixels = Vec::with_capacity(n * elems);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        for &t in &templates[class] {
            let v = (t + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    Dataset {
        pixels,
        labels,
        channels,
        height: side,
        width: side,
        classes,
        mean: vec![0.5; channels],
        std: vec![0.25; channels],
        augmentable: false,
    }
}

// -------------------------------------------------------------- augmentation

/// Zero-pad `pad` pixels per side, then crop at offset (oy, ox).
/// Offset (pad, pad) reproduces the original image.
pub fn crop_padded(batch: &Tensor, pad: usize, oy: usize, ox: usize) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::shapes(&[0, 0, 0, 0], s, "crop input"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if oy > 2 * pad || ox > 2 * pad {
        return Err(Error::InvalidArgument(format!("crop offset ({oy},{ox}) exceeds 2·pad")));
    }
    let mut out = vec![0.0f32; batch.numel()];
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + oy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + ox) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[((img * c + ch) * h + y) * w + x] =
                        batch.data()[((img * c + ch) * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out))
}

/// Mirror every image left-right.
pub fn flip_horizontal(batch: &Tensor) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::shapes(&[0, 0, 0, 0], s, "flip input"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0f32; batch.numel()];
    for row in 0..n * c * h {
        for x in 0..w {
            out[row * w + x] = batch.data()[row * w + (w - 1 - x)];
        }
    }
    Ok(Tensor::new(s.to_vec(), out))
}

/// Training augmentation on a raw [0,1] batch: pad-4 random crop plus
/// horizontal flip with probability 1/2, per image. Identity when the
/// dataset is not augmentable (MNIST, synthetic).
pub fn augment(ds: &Dataset, batch: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !ds.augmentable {
        return Ok(batch.clone());
    }
    let pad = 4;
    let n = batch.shape()[0];
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let one = slice_image(batch, img);
        let (oy, ox) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
        let mut one = crop_padded(&one, pad, oy, ox)?;
        if rng.random_range(0..2) == 1 {
            one = flip_horizontal(&one)?;
        }
        out.push(one);
    }
    let mut data = Vec::with_capacity(batch.numel());
    for t in &out {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(batch.shape().to_vec(), data))
}

fn slice_image(batch: &Tensor, img: usize) -> Tensor {
    let s = batch.shape();
    let per = batch.numel() / s[0];
    Tensor::new(
        vec![1, s[1], s[2], s[3]],
        batch.data()[img * per..(img + 1) * per].to_vec(),
    )
}
