//! 1-bit tensor storage: ±1 values packed 64 per word along the channel
//! axis, with a validity mask covering channel padding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Packed ±1 tensor. `+1 -> 1`, `-1 -> 0`, LSB = lowest channel index.
///
/// The channel axis (axis 1 of NCHW activations or nckk weights) is padded
/// up to a multiple of 64; every other axis combination forms one "group"
/// of `words_per_group` contiguous words.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    words_per_group: usize,
    words: Vec<u64>,
    mask: Vec<u64>,
}

impl PackedBitTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn words_per_group(&self) -> usize {
        self.words_per_group
    }

    pub fn groups(&self) -> usize {
        self.words.len() / self.words_per_group.max(1)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn mask(&self) -> &[u64] {
        &self.mask
    }

    pub fn group(&self, idx: usize) -> &[u64] {
        &self.words[idx * self.words_per_group..(idx + 1) * self.words_per_group]
    }

    pub fn group_mask(&self, idx: usize) -> &[u64] {
        &self.mask[idx * self.words_per_group..(idx + 1) * self.words_per_group]
    }

    /// Rebuild a packed tensor from raw little-endian words (bundle loading).
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let c = *shape.get(1).ok_or_else(|| {
            Error::InvalidArgument("packed tensor needs at least 2 dims".into())
        })?;
        let wpg = c.div_ceil(64);
        let groups: usize = shape.iter().enumerate().filter(|&(i, _)| i != 1).map(|(_, &d)| d).product();
        if words.len() != groups * wpg {
            return Err(Error::InvalidArgument(format!(
                "packed word count {} does not match shape {:?}",
                words.len(),
                shape
            )));
        }
        let mask = channel_mask(c, wpg, groups);
        // clear any stray bits beyond the mask
        let mut words = words;
        for (w, m) in words.iter_mut().zip(&mask) {
            *w &= m;
        }
        Ok(PackedBitTensor {
            shape,
            words_per_group: wpg,
            words,
            mask,
        })
    }
}

fn channel_mask(c: usize, wpg: usize, groups: usize) -> Vec<u64> {
    let mut group_mask = vec![0u64; wpg];
    for ch in 0..c {
        group_mask[ch / 64] |= 1u64 << (ch % 64);
    }
    let mut mask = Vec::with_capacity(groups * wpg);
    for _ in 0..groups {
        mask.extend_from_slice(&group_mask);
    }
    mask
}

/// Pack a ±1 tensor along its channel axis. Any other value is an error;
/// callers quantize first.
pub fn pack(x: &Tensor) -> Result<PackedBitTensor> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(
            "pack expects a tensor with a channel axis (dim 1)".into(),
        ));
    }
    let c = shape[1];
    let outer = shape[0];
    let inner: usize = shape[2..].iter().product();
    let wpg = c.div_ceil(64);
    let groups = outer * inner;
    let mut words = vec![0u64; groups * wpg];
    let data = x.data();
    for o in 0..outer {
        for ch in 0..c {
            for i in 0..inner {
                let v = data[(o * c + ch) * inner + i];
                let bit = if v == 1.0 {
                    1u64
                } else if v == -1.0 {
                    0u64
                } else {
                    return Err(Error::InvalidValue(format!(
                        "pack requires ±1 values, found {v}"
                    )));
                };
                let group = o * inner + i;
                words[group * wpg + ch / 64] |= bit << (ch % 64);
            }
        }
    }
    let mask = channel_mask(c, wpg, groups);
    Ok(PackedBitTensor {
        shape,
        words_per_group: wpg,
        words,
        mask,
    })
}

/// Inverse of [`pack`]; padding lanes never reappear.
pub fn unpack(p: &PackedBitTensor) -> Tensor {
    let c = p.shape[1];
    let outer = p.shape[0];
    let inner: usize = p.shape[2..].iter().product();
    let wpg = p.words_per_group;
    let mut data = vec![0.0f32; outer * c * inner];
    for o in 0..outer {
        for i in 0..inner {
            let group = o * inner + i;
            for ch in 0..c {
                let bit = (p.words[group * wpg + ch / 64] >> (ch % 64)) & 1;
                data[(o * c + ch) * inner + i] = if bit == 1 { 1.0 } else { -1.0 };
            }
        }
    }
    Tensor::new(p.shape.clone(), data)
}

/// Σ over valid lanes of the ±1 product:
/// `2·popcount(XNOR(a, w) AND mask) − popcount(mask)`.
#[inline]
pub fn xnor_popcount_dot(a: &[u64], w: &[u64], mask: &[u64]) -> i32 {
    debug_assert!(a.len() == w.len() && w.len() == mask.len());
    let mut agree = 0u32;
    let mut valid = 0u32;
    for ((&x, &y), &m) in a.iter().zip(w).zip(mask) {
        agree += (!(x ^ y) & m).count_ones();
        valid += m.count_ones();
    }
    2 * agree as i32 - valid as i32
}
