//! Dense NCHW tensor and the reference float kernels the rest of the
//! crate is checked against.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense real-valued tensor, row-major, f32.
///
/// Activations are `[N, C, H, W]`, conv weights `[n, c, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Construct from external data; rejects NaN/Inf and shape/len mismatch.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidValue(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite value {v}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values we computed ourselves.
    pub(crate) fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Standard-normal init scaled by `std`.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        // Box-Muller on the crate-wide deterministic RNG.
        while data.len() < numel {
            let u1: f32 = rng.random::<f32>().max(1e-12);
            let u2: f32 = rng.random::<f32>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f32::consts::PI * u2).sin_cos();
            data.push(r * c * std);
            if data.len() < numel {
                data.push(r * s * std);
            }
        }
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shapes(&shape, &self.shape, "reshape"));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// {0,1}-valued tensor; ties (x == threshold) map to 1.
    pub fn compare_ge(&self, threshold: f32) -> Tensor {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }

    /// Elementwise with limited broadcasting: equal shapes, scalar rhs, or
    /// per-channel rhs `[C]` against an NCHW lhs.
    fn zip_broadcast(
        &self,
        other: &Tensor,
        what: &str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor::new(self.shape.clone(), data));
        }
        if other.numel() == 1 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.shape.len() == 4 && other.shape.len() == 1 && other.shape[0] == self.shape[1] {
            let (c, hw) = (self.shape[1], self.shape[2] * self.shape[3]);
            let mut data = Vec::with_capacity(self.numel());
            for (i, &a) in self.data.iter().enumerate() {
                let ch = (i / hw) % c;
                data.push(f(a, other.data[ch]));
            }
            return Ok(Tensor::new(self.shape.clone(), data));
        }
        Err(Error::shapes(&self.shape, &other.shape, what))
    }
}

fn conv_geometry(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride < 1 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Reference direct convolution; the oracle every other conv path is
/// compared against. Zero padding contributes 0 to the accumulation.
pub fn conv2d_ref(input: &Tensor, weight: &Tensor, stride: usize, zero_pad: usize) -> Result<Tensor> {
    let (ishape, wshape) = (input.shape(), weight.shape());
    if ishape.len() != 4 || wshape.len() != 4 || ishape[1] != wshape[1] || wshape[2] != wshape[3] {
        return Err(Error::shapes(wshape, ishape, "conv2d_ref input/weight"));
    }
    let (n_img, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (n_out, k) = (wshape[0], wshape[2]);
    let (ho, wo) = conv_geometry(h, w, k, stride, zero_pad)?;
    let mut out = vec![0.0f32; n_img * n_out * ho * wo];
    for img in 0..n_img {
        for f in 0..n_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - zero_pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - zero_pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data
                                    [((img * c + ch) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data[((f * c + ch) * k + ky) * k + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((img * n_out + f) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::new(vec![n_img, n_out, ho, wo], out))
}

/// Per-output-filter mean and l2 norm of the centered filter.
pub fn channel_stats(w: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = w.shape();
    if shape.len() != 4 {
        return Err(Error::shapes(&[0, 0, 0, 0], shape, "channel_stats weight"));
    }
    let n = shape[0];
    let per = shape[1] * shape[2] * shape[3];
    if per == 0 {
        return Err(Error::InvalidArgument("empty filter".into()));
    }
    let mut means = Vec::with_capacity(n);
    let mut l2s = Vec::with_capacity(n);
    for f in 0..n {
        let filt = &w.data[f * per..(f + 1) * per];
        let mean = filt.iter().sum::<f32>() / per as f32;
        let ss = filt.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>();
        means.push(mean);
        l2s.push(ss.sqrt());
    }
    Ok((Tensor::new(vec![n], means), Tensor::new(vec![n], l2s)))
}

// ---------------------------------------------------------------------
// im2col path used by the training layers; checked against conv2d_ref.
// ---------------------------------------------------------------------

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(ishape: &[usize], wshape: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
        if ishape[1] != wshape[1] {
            return Err(Error::shapes(wshape, ishape, "conv channels"));
        }
        let (h, w, k) = (ishape[2], ishape[3], wshape[2]);
        let (ho, wo) = conv_geometry(h, w, k, stride, pad)?;
        Ok(ConvGeom {
            c: ishape[1],
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }
}

fn im2col(image: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo, k) = (g.ho, g.wo, g.k);
    let cols = ho * wo;
    let mut out = vec![0.0f32; g.c * k * k * cols];
    for ch in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        out[row + oy * wo + ox] = image[src + ix as usize];
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_grad: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo, k) = (g.ho, g.wo, g.k);
    let cols = ho * wo;
    let mut out = vec![0.0f32; g.c * g.h * g.w];
    for ch in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = (ch * g.h + iy as usize) * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        out[dst + ix as usize] += cols_grad[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

/// Forward conv via im2col; identical semantics to `conv2d_ref`.
pub(crate) fn conv2d_fast(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    let n_img = input.shape()[0];
    let n_out = weight.shape()[0];
    let ckk = g.c * g.k * g.k;
    let cols = g.ho * g.wo;
    let img_in = g.c * g.h * g.w;
    let img_out = n_out * cols;
    let mut out = vec![0.0f32; n_img * img_out];
    use rayon::prelude::*;
    out.par_chunks_mut(img_out)
        .zip(input.data.par_chunks(img_in))
        .for_each(|(dst, image)| {
            let col = im2col(image, &g);
            for f in 0..n_out {
                let wrow = &weight.data[f * ckk..(f + 1) * ckk];
                let orow = &mut dst[f * cols..(f + 1) * cols];
                for (l, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let crow = &col[l * cols..(l + 1) * cols];
                    for (o, &cv) in orow.iter_mut().zip(crow) {
                        *o += wv * cv;
                    }
                }
            }
        });
    Ok(Tensor::new(vec![n_img, n_out, g.ho, g.wo], out))
}

/// Gradients of a conv wrt input and weight given the upstream gradient.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    let n_img = input.shape()[0];
    let n_out = weight.shape()[0];
    let ckk = g.c * g.k * g.k;
    let cols = g.ho * g.wo;
    let img_in = g.c * g.h * g.w;
    let img_out = n_out * cols;
    let mut grad_in = vec![0.0f32; n_img * img_in];
    let mut grad_w = vec![0.0f32; n_out * ckk];
    use rayon::prelude::*;
    let per_image: Vec<Vec<f32>> = grad_in
        .par_chunks_mut(img_in)
        .zip(input.data.par_chunks(img_in))
        .zip(grad_out.data.par_chunks(img_out))
        .map(|((gin, image), gout)| {
            let col = im2col(image, &g);
            let mut gw = vec![0.0f32; n_out * ckk];
            let mut gcol = vec![0.0f32; ckk * cols];
            for f in 0..n_out {
                let grow = &gout[f * cols..(f + 1) * cols];
                for l in 0..ckk {
                    let wv = weight.data[f * ckk + l];
                    let crow = &col[l * cols..(l + 1) * cols];
                    let gcrow = &mut gcol[l * cols..(l + 1) * cols];
                    let mut acc = 0.0f32;
                    for j in 0..cols {
                        acc += grow[j] * crow[j];
                        gcrow[j] += wv * grow[j];
                    }
                    gw[f * ckk + l] += acc;
                }
            }
            gin.copy_from_slice(&col2im(&gcol, &g));
            gw
        })
        .collect();
    for gw in &per_image {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(input.shape.clone(), grad_in),
        Tensor::new(weight.shape.clone(), grad_w),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Independently written nested-loop conv used as a second route.
    fn conv_naive(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n_img, c, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (n_out, k) = (weight.shape()[0], weight.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n_img, n_out, ho, wo]);
        // accumulate by scattering each input pixel's contribution
        for img in 0..n_img {
            for ch in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let iv = input.data()[((img * c + ch) * h + iy) * w + ix];
                        for f in 0..n_out {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let py = iy + pad;
                                    let px = ix + pad;
                                    if py < ky || px < kx {
                                        continue;
                                    }
                                    let (ry, rx) = (py - ky, px - kx);
                                    if ry % stride != 0 || rx % stride != 0 {
                                        continue;
                                    }
                                    let (oy, ox) = (ry / stride, rx / stride);
                                    if oy >= ho || ox >= wo {
                                        continue;
                                    }
                                    let wv = weight.data()[((f * c + ch) * k + ky) * k + kx];
                                    out.data_mut()[((img * n_out + f) * ho + oy) * wo + ox] +=
                                        iv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() / denom <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_scalar_product() {
        let a = Tensor::from_vec(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_ref(&a, &w, 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_zero_input() {
        let a = Tensor::zeros(&[1, 2, 4, 4]);
        let mut r = rng();
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let y = conv2d_ref(&a, &w, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_independent_nested_loop() {
        let mut r = rng();
        let a = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let y = conv2d_ref(&a, &w, 1, 1).unwrap();
        let z = conv_naive(&a, &w, 1, 1);
        assert_close(&y, &z, 1e-5);
    }

    #[test]
    fn conv_fast_matches_ref() {
        let mut r = rng();
        for &(c, n, k, s, p) in &[(1, 1, 1, 1, 0), (3, 4, 3, 1, 1), (5, 2, 3, 2, 1), (2, 3, 1, 2, 0)] {
            let a = Tensor::randn(&[2, c, 7, 6], 1.0, &mut r);
            let w = Tensor::randn(&[n, c, k, k], 1.0, &mut r);
            let y = conv2d_ref(&a, &w, s, p).unwrap();
            let z = conv2d_fast(&a, &w, s, p).unwrap();
            assert_close(&y, &z, 1e-5);
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut r = rng();
        let a1 = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let a2 = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let lhs = conv2d_ref(&a1.add(&a2).unwrap(), &w, 1, 1).unwrap();
        let rhs = conv2d_ref(&a1, &w, 1, 1)
            .unwrap()
            .add(&conv2d_ref(&a2, &w, 1, 1).unwrap())
            .unwrap();
        assert_close(&lhs, &rhs, 1e-5);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut r = rng();
        let a = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r);
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_ref(&a, &w, 1, 0).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng();
        let a = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[2, 2, 3, 3], 0.5, &mut r);
        let gout = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
        let (gin, gw) = conv2d_backward(&a, &w, &gout, 1, 1).unwrap();
        let loss = |a: &Tensor, w: &Tensor| -> f32 {
            conv2d_ref(a, w, 1, 1)
                .unwrap()
                .data()
                .iter()
                .zip(gout.data())
                .map(|(y, g)| y * g)
                .sum()
        };
        let h = 1e-2f32;
        for idx in [0usize, 5, 17, 31] {
            let mut ap = a.clone();
            ap.data_mut()[idx] += h;
            let mut am = a.clone();
            am.data_mut()[idx] -= h;
            let fd = (loss(&ap, &w) - loss(&am, &w)) / (2.0 * h);
            assert!((fd - gin.data()[idx]).abs() <= 1e-2 * fd.abs().max(1.0));
        }
        for idx in [0usize, 7, 20] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += h;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= h;
            let fd = (loss(&a, &wp) - loss(&a, &wm)) / (2.0 * h);
            assert!((fd - gw.data()[idx]).abs() <= 1e-2 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn channel_stats_basics() {
        let w = Tensor::from_vec(vec![3, 1, 2, 2], vec![
            2.0, 2.0, 2.0, 2.0, // constant
            -3.0, -1.0, 1.0, 3.0, // centered
            0.0, 0.0, 0.0, 0.0, // zero
        ])
        .unwrap();
        let (mean, l2) = channel_stats(&w).unwrap();
        assert_eq!(mean.data(), &[2.0, 0.0, 0.0]);
        assert!((l2.data()[0]).abs() < 1e-6);
        assert!((l2.data()[1] - 20.0f32.sqrt()).abs() < 1e-6);
        assert_eq!(l2.data()[2], 0.0);
    }

    #[test]
    fn channel_stats_matches_two_pass() {
        let mut r = rng();
        let w = Tensor::randn(&[4, 3, 3, 3], 2.0, &mut r);
        let (mean, l2) = channel_stats(&w).unwrap();
        let per = 27;
        for f in 0..4 {
            let filt = &w.data()[f * per..(f + 1) * per];
            let m: f32 = filt.iter().sum::<f32>() / per as f32;
            let ss: f32 = filt.iter().map(|v| (v - m).powi(2)).sum();
            assert!((mean.data()[f] - m).abs() <= 1e-6 * m.abs().max(1.0));
            assert!((l2.data()[f] - ss.sqrt()).abs() <= 1e-6 * ss.sqrt().max(1.0));
        }
    }

    #[test]
    fn elementwise_examples() {
        let t = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.compare_ge(0.0).data(), &[0.0, 1.0, 1.0]);
        let s = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(s.scale(0.5).data(), &[0.5, 1.0]);
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        let bias = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(x.add(&bias).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::from_vec(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0]).is_err());
    }
}
