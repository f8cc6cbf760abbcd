//! Bit-exact packed binary convolution.
//!
//! With `a_b = α_a·b_a + β_a` on valid taps (padding contributes 0) and
//! `w_b = α_w·b_w + β_w`, the convolution splits into three terms:
//!
//! ```text
//! y = α_a·α_w·Σ b_a·b_w  +  α_a·β_w·Σ b_a  +  β_a·Σ w_b
//!        (XNOR/popcount)     (per-position,     (precomputed,
//!                             shared over n)     border-aware)
//! ```
//!
//! The first term is the classic BNN kernel; the second needs one popcount
//! pass per spatial position regardless of the output channel count; the
//! third depends only on the weights and is precomputed, with a per-tap
//! table handling zero-padded borders exactly.

use crate::bitpack::{xnor_popcount_dot, PackedBitTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dequantization constants of one binary conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpecs {
    pub alpha_w: Vec<f32>,
    pub beta_w: Vec<f32>,
    pub alpha_a: f32,
    pub beta_a: f32,
}

impl ConvSpecs {
    fn validate(&self, n: usize) -> Result<()> {
        if self.alpha_w.len() != n || self.beta_w.len() != n {
            return Err(Error::shapes(&[n], &[self.alpha_w.len()], "conv specs vs filters"));
        }
        let finite = self.alpha_w.iter().chain(&self.beta_w).all(|v| v.is_finite())
            && self.alpha_a.is_finite()
            && self.beta_a.is_finite();
        if !finite {
            return Err(Error::InvalidValue("non-finite conv spec".into()));
        }
        Ok(())
    }
}

/// The weight-only bias term of the decomposition.
///
/// `tap_sums[f][ky][kx] = β_a · Σ_c w_b[f, c, ky, kx]`; summing the taps a
/// given output position actually covers yields its bias. `f_w` caches the
/// full-window (interior) sum per filter.
#[derive(Debug, Clone)]
pub struct PrecomputedBias {
    pub f_w: Vec<f32>,
    pub tap_sums: Vec<f32>,
    k: usize,
}

impl PrecomputedBias {
    #[inline]
    fn tap(&self, f: usize, ky: usize, kx: usize) -> f32 {
        self.tap_sums[(f * self.k + ky) * self.k + kx]
    }
}

/// Precompute the third term from packed weights (inference-time specs).
pub fn precompute_bias(
    w_bits: &PackedBitTensor,
    alpha_w: &[f32],
    beta_w: &[f32],
    beta_a: f32,
) -> Result<PrecomputedBias> {
    let shape = w_bits.shape();
    if shape.len() != 4 {
        return Err(Error::shapes(&[0, 0, 0, 0], shape, "packed weight"));
    }
    let (n, c, k) = (shape[0], shape[1], shape[2]);
    if alpha_w.len() != n || beta_w.len() != n {
        return Err(Error::shapes(&[n], &[alpha_w.len()], "bias specs"));
    }
    let mut tap_sums = vec![0.0f32; n * k * k];
    let mut f_w = vec![0.0f32; n];
    for f in 0..n {
        for ky in 0..k {
            for kx in 0..k {
                let group = (f * k + ky) * k + kx;
                let words = w_bits.group(group);
                let mask = w_bits.group_mask(group);
                let pc: u32 = words
                    .iter()
                    .zip(mask)
                    .map(|(&w, &m)| (w & m).count_ones())
                    .sum();
                // Σ_c b_w = 2·popcount − c; w_b sums add β_w per channel
                let sum_wb = alpha_w[f] * (2.0 * pc as f32 - c as f32) + beta_w[f] * c as f32;
                tap_sums[(f * k + ky) * k + kx] = beta_a * sum_wb;
                f_w[f] += beta_a * sum_wb;
            }
        }
    }
    Ok(PrecomputedBias { f_w, tap_sums, k })
}

/// Packed inference convolution; equals `conv2d_ref` on the dequantized
/// operands (padding contributes exactly 0 to all three terms).
pub fn binary_conv_packed(
    a_bits: &PackedBitTensor,
    w_bits: &PackedBitTensor,
    specs: &ConvSpecs,
    stride: usize,
    zero_pad: usize,
) -> Result<Tensor> {
    let (ashape, wshape) = (a_bits.shape(), w_bits.shape());
    if ashape.len() != 4 || wshape.len() != 4 || ashape[1] != wshape[1] {
        return Err(Error::shapes(wshape, ashape, "binary_conv_packed operands"));
    }
    if stride < 1 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (n_img, c, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
    let (n_out, k) = (wshape[0], wshape[2]);
    specs.validate(n_out)?;
    if k > h + 2 * zero_pad || k > w + 2 * zero_pad {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} exceeds padded input {}x{}",
            h + 2 * zero_pad,
            w + 2 * zero_pad
        )));
    }
    let ho = (h + 2 * zero_pad - k) / stride + 1;
    let wo = (w + 2 * zero_pad - k) / stride + 1;
    let bias = precompute_bias(w_bits, &specs.alpha_w, &specs.beta_w, specs.beta_a)?;

    // per-pixel Σ b_a, shared across output channels
    let hw = h * w;
    let mut s_pix = vec![0i32; n_img * hw];
    for (i, s) in s_pix.iter_mut().enumerate() {
        let words = a_bits.group(i);
        let mask = a_bits.group_mask(i);
        let pc: u32 = words.iter().zip(mask).map(|(&a, &m)| (a & m).count_ones()).sum();
        *s = 2 * pc as i32 - c as i32;
    }

    let mut out = vec![0.0f32; n_img * n_out * ho * wo];
    for img in 0..n_img {
        for oy in 0..ho {
            let y0 = oy * stride;
            let ky_lo = zero_pad.saturating_sub(y0);
            let ky_hi = k.min(h + zero_pad - y0);
            for ox in 0..wo {
                let x0 = ox * stride;
                let kx_lo = zero_pad.saturating_sub(x0);
                let kx_hi = k.min(w + zero_pad - x0);
                let full = ky_lo == 0 && kx_lo == 0 && ky_hi == k && kx_hi == k;
                // second term: window sum of per-pixel bit sums
                let mut s_win = 0i32;
                for ky in ky_lo..ky_hi {
                    let iy = y0 + ky - zero_pad;
                    for kx in kx_lo..kx_hi {
                        let ix = x0 + kx - zero_pad;
                        s_win += s_pix[img * hw + iy * w + ix];
                    }
                }
                for f in 0..n_out {
                    let mut d = 0i32;
                    for ky in ky_lo..ky_hi {
                        let iy = y0 + ky - zero_pad;
                        for kx in kx_lo..kx_hi {
                            let ix = x0 + kx - zero_pad;
                            let ag = img * hw + iy * w + ix;
                            let wg = (f * k + ky) * k + kx;
                            d += xnor_popcount_dot(
                                a_bits.group(ag),
                                w_bits.group(wg),
                                a_bits.group_mask(ag),
                            );
                        }
                    }
                    let t = if full {
                        bias.f_w[f]
                    } else {
                        let mut acc = 0.0f32;
                        for ky in ky_lo..ky_hi {
                            for kx in kx_lo..kx_hi {
                                acc += bias.tap(f, ky, kx);
                            }
                        }
                        acc
                    };
                    out[((img * n_out + f) * ho + oy) * wo + ox] = specs.alpha_a
                        * specs.alpha_w[f]
                        * d as f32
                        + specs.alpha_a * specs.beta_w[f] * s_win as f32
                        + t;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n_img, n_out, ho, wo], out))
}
