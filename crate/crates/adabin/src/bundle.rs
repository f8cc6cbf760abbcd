//! Packed inference bundle: a flat record stream holding binary conv
//! weights as a dense sign bitstream (one bit per weight) plus the float
//! layers, replayable without any training machinery.

use std::path::Path;

use crate::autograd::Model;
use crate::bitconv::{binary_conv_packed, ConvSpecs};
use crate::bitpack::pack;
use crate::error::{Error, Result};
use crate::quantize::{adabin_quantize, BinarySpec};
use crate::tensor::{conv2d_fast, Tensor};

pub const MAGIC: [u8; 4] = *b"ADBN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Conv2dFloat {
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    BinaryConv {
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        /// Row-major sign bits of the latent weights (set = upper value).
        sign_bits: Vec<u8>,
        alpha_w: Vec<f32>,
        beta_w: Vec<f32>,
        alpha_a: f32,
        beta_a: f32,
    },
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    },
    Maxout {
        gpos: Vec<f32>,
        gneg: Vec<f32>,
    },
    AvgPool {
        k: usize,
    },
    GlobalAvgPool {
        keep_spatial: bool,
    },
    Flatten,
    Linear {
        out_f: usize,
        in_f: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    /// Save the current activation (pooled by `pool` if > 1) for a later add.
    ResidualEnter {
        pool: usize,
    },
    /// Pop the saved activation, zero-pad its channels, add in place.
    ResidualAdd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub version: u16,
    pub records: Vec<Record>,
}

/// Flatten a trained model into its inference bundle.
pub fn export_packed_model(model: &Model) -> Result<Bundle> {
    if model.layers.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty model".into()));
    }
    let mut records = Vec::new();
    for layer in &model.layers {
        layer.export(&mut records)?;
    }
    Ok(Bundle { version: VERSION, records })
}

// ------------------------------------------------------------- serialization

use crate::wire::{Reader, Writer};

impl Bundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u16(self.version);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            match r {
                Record::Conv2dFloat { out_c, in_c, k, stride, pad, weight, bias } => {
                    w.u8(1);
                    for &v in [out_c, in_c, k, stride, pad].iter() {
                        w.usize32(*v);
                    }
                    w.f32s(weight);
                    w.f32s(bias);
                }
                Record::BinaryConv {
                    out_c, in_c, k, stride, pad, sign_bits, alpha_w, beta_w, alpha_a, beta_a,
                } => {
                    w.u8(2);
                    for &v in [out_c, in_c, k, stride, pad].iter() {
                        w.usize32(*v);
                    }
                    w.bytes(sign_bits);
                    w.f32s(alpha_w);
                    w.f32s(beta_w);
                    w.f32(*alpha_a);
                    w.f32(*beta_a);
                }
                Record::BatchNorm { gamma, beta, mean, var, eps } => {
                    w.u8(3);
                    w.f32s(gamma);
                    w.f32s(beta);
                    w.f32s(mean);
                    w.f32s(var);
                    w.f32(*eps);
                }
                Record::Maxout { gpos, gneg } => {
                    w.u8(4);
                    w.f32s(gpos);
                    w.f32s(gneg);
                }
                Record::AvgPool { k } => {
                    w.u8(5);
                    w.usize32(*k);
                }
                Record::GlobalAvgPool { keep_spatial } => {
                    w.u8(6);
                    w.u8(u8::from(*keep_spatial));
                }
                Record::Flatten => w.u8(7),
                Record::Linear { out_f, in_f, weight, bias } => {
                    w.u8(8);
                    w.usize32(*out_f);
                    w.usize32(*in_f);
                    w.f32s(weight);
                    w.f32s(bias);
                }
                Record::ResidualEnter { pool } => {
                    w.u8(9);
                    w.usize32(*pool);
                }
                Record::ResidualAdd => w.u8(10),
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bundle> {
        let mut r = Reader::new(bytes, "bundle");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = r.u8()?;
            records.push(match tag {
                1 => Record::Conv2dFloat {
                    out_c: r.usize32()?,
                    in_c: r.usize32()?,
                    k: r.usize32()?,
                    stride: r.usize32()?,
                    pad: r.usize32()?,
                    weight: r.f32s()?,
                    bias: r.f32s()?,
                },
                2 => Record::BinaryConv {
                    out_c: r.usize32()?,
                    in_c: r.usize32()?,
                    k: r.usize32()?,
                    stride: r.usize32()?,
                    pad: r.usize32()?,
                    sign_bits: r.bytes()?,
                    alpha_w: r.f32s()?,
                    beta_w: r.f32s()?,
                    alpha_a: r.f32()?,
                    beta_a: r.f32()?,
                },
                3 => Record::BatchNorm {
                    gamma: r.f32s()?,
                    beta: r.f32s()?,
                    mean: r.f32s()?,
                    var: r.f32s()?,
                    eps: r.f32()?,
                },
                4 => Record::Maxout { gpos: r.f32s()?, gneg: r.f32s()? },
                5 => Record::AvgPool { k: r.usize32()? },
                6 => Record::GlobalAvgPool { keep_spatial: r.u8()? != 0 },
                7 => Record::Flatten,
                8 => Record::Linear {
                    out_f: r.usize32()?,
                    in_f: r.usize32()?,
                    weight: r.f32s()?,
                    bias: r.f32s()?,
                },
                9 => Record::ResidualEnter { pool: r.usize32()? },
                10 => Record::ResidualAdd,
                other => return Err(r.err(format!("unknown record tag {other}"))),
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bundle { version, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Bundle> {
        Bundle::from_bytes(&std::fs::read(path)?)
    }

    // ---------------------------------------------------------- inference

    /// Replay the record stream on a batch, using the packed XNOR kernel
    /// for binary convs.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        let mut stack: Vec<Tensor> = Vec::new();
        for rec in &self.records {
            x = match rec {
                Record::Conv2dFloat { out_c, in_c, k, stride, pad, weight, bias } => {
                    let w = Tensor::from_vec(vec![*out_c, *in_c, *k, *k], weight.clone())?;
                    let mut y = conv2d_fast(&x, &w, *stride, *pad)?;
                    if !bias.is_empty() {
                        add_channel_bias(&mut y, bias);
                    }
                    y
                }
                Record::BinaryConv {
                    out_c, in_c, k, stride, pad, sign_bits, alpha_w, beta_w, alpha_a, beta_a,
                } => {
                    let numel = out_c * in_c * k * k;
                    if sign_bits.len() != numel.div_ceil(8) {
                        return Err(Error::Format {
                            what: "bundle".into(),
                            detail: format!(
                                "sign bitstream holds {} bytes, layer needs {}",
                                sign_bits.len(),
                                numel.div_ceil(8)
                            ),
                            offset: 0,
                        });
                    }
                    let signs: Vec<f32> = (0..numel)
                        .map(|i| if sign_bits[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { -1.0 })
                        .collect();
                    let w_bits =
                        pack(&Tensor::from_vec(vec![*out_c, *in_c, *k, *k], signs)?)?;
                    let spec = BinarySpec::per_layer(*alpha_a, *beta_a)?;
                    let a_bits = adabin_quantize(&x, &spec)?.bits;
                    let specs = ConvSpecs {
                        alpha_w: alpha_w.clone(),
                        beta_w: beta_w.clone(),
                        alpha_a: *alpha_a,
                        beta_a: *beta_a,
                    };
                    binary_conv_packed(&a_bits, &w_bits, &specs, *stride, *pad)?
                }
                Record::BatchNorm { gamma, beta, mean, var, eps } => {
                    let c = gamma.len();
                    check_channels(&x, c, "batchnorm")?;
                    let istd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                    let mut y = x.clone();
                    apply_per_channel(&mut y, c, |ch, v| {
                        gamma[ch] * ((v - mean[ch]) * istd[ch]) + beta[ch]
                    });
                    y
                }
                Record::Maxout { gpos, gneg } => {
                    let c = gpos.len();
                    check_channels(&x, c, "maxout")?;
                    let mut y = x.clone();
                    apply_per_channel(&mut y, c, |ch, v| {
                        if v >= 0.0 {
                            gpos[ch] * v
                        } else {
                            gneg[ch] * v
                        }
                    });
                    y
                }
                Record::AvgPool { k } => avgpool(&x, *k)?,
                Record::GlobalAvgPool { keep_spatial } => {
                    let (n, c) = (x.shape()[0], x.shape()[1]);
                    let hw = x.numel() / (n * c);
                    let mut y = vec![0.0f32; n * c];
                    for i in 0..n * c {
                        y[i] = x.data()[i * hw..(i + 1) * hw].iter().sum::<f32>() / hw as f32;
                    }
                    let shape = if *keep_spatial { vec![n, c, 1, 1] } else { vec![n, c] };
                    Tensor::from_vec(shape, y)?
                }
                Record::Flatten => {
                    let n = x.shape()[0];
                    let rest = x.numel() / n;
                    x.clone().reshaped(vec![n, rest])?
                }
                Record::Linear { out_f, in_f, weight, bias } => {
                    if x.shape().len() != 2 || x.shape()[1] != *in_f {
                        return Err(Error::shapes(&[0, *in_f], x.shape(), "bundle linear"));
                    }
                    let n = x.shape()[0];
                    let mut y = vec![0.0f32; n * out_f];
                    for img in 0..n {
                        for f in 0..*out_f {
                            let row = &weight[f * in_f..(f + 1) * in_f];
                            let mut acc = bias[f];
                            for (a, b) in x.data()[img * in_f..(img + 1) * in_f].iter().zip(row) {
                                acc += a * b;
                            }
                            y[img * out_f + f] = acc;
                        }
                    }
                    Tensor::from_vec(vec![n, *out_f], y)?
                }
                Record::ResidualEnter { pool } => {
                    stack.push(if *pool > 1 { avgpool(&x, *pool)? } else { x.clone() });
                    x
                }
                Record::ResidualAdd => {
                    let s = stack.pop().ok_or_else(|| {
                        Error::GraphState("residual add without matching enter".into())
                    })?;
                    add_channel_padded(&x, &s)?
                }
            };
        }
        Ok(x)
    }
}

fn check_channels(x: &Tensor, c: usize, what: &str) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != c {
        return Err(Error::shapes(&[0, c, 0, 0], x.shape(), what));
    }
    Ok(())
}

fn apply_per_channel(y: &mut Tensor, c: usize, f: impl Fn(usize, f32) -> f32) {
    let n = y.shape()[0];
    let hw = y.numel() / (n * c);
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            for v in &mut y.data_mut()[base..base + hw] {
                *v = f(ch, *v);
            }
        }
    }
}

fn add_channel_bias(y: &mut Tensor, bias: &[f32]) {
    let c = bias.len();
    apply_per_channel(y, c, |ch, v| v + bias[ch]);
}

fn avgpool(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[2] < k || s[3] < k {
        return Err(Error::shapes(&[0, 0, k, k], s, "avgpool"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / k, w / k);
    let mut y = vec![0.0f32; n * c * ho * wo];
    let norm = 1.0 / (k * k) as f32;
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.data()[((img * c + ch) * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    y[((img * c + ch) * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], y)
}

/// `x + s` where `s` may have fewer channels; missing ones add zero.
fn add_channel_padded(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (xs, ss) = (x.shape(), s.shape());
    if xs.len() != 4
        || ss.len() != 4
        || xs[0] != ss[0]
        || xs[2] != ss[2]
        || xs[3] != ss[3]
        || ss[1] > xs[1]
    {
        return Err(Error::shapes(xs, ss, "residual add"));
    }
    let (n, cx, cs, hw) = (xs[0], xs[1], ss[1], xs[2] * xs[3]);
    let mut y = x.clone();
    for img in 0..n {
        for ch in 0..cs {
            let xb = (img * cx + ch) * hw;
            let sb = (img * cs + ch) * hw;
            for i in 0..hw {
                y.data_mut()[xb + i] += s.data()[sb + i];
            }
        }
    }
    Ok(y)
}
