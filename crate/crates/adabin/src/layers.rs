//! Network layers: float conv, adaptive binary conv, batch norm, maxout,
//! pooling, linear, the residual block, and the model builder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Layer, Model, Parameter, ParamRole, Slot};
use crate::bundle::Record;
use crate::costmodel::{conv_cost, elementwise_cost, linear_cost, CostEntry, CostMode, LayerCost};
use crate::error::{Error, Result};
use crate::quantize::{
    activation_binarize_backward, activation_binarize_forward, adabin_quantize, equalize_weights,
    ActContext, AlphaGradMode, BinarySpec, EPS_ALPHA,
};
use crate::tensor::{conv2d_backward, conv2d_fast, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightQuant {
    /// β = 0, α = ‖w‖₂/√(c·k·k), recomputed each forward.
    ScaledSign,
    /// β = filter mean, α = population std, recomputed each forward.
    #[default]
    Adabin,
    /// (α, β) are trainable parameters initialized analytically.
    AdabinLearnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActQuant {
    /// Fixed (α, β) = (1, 0): plain sign binarization.
    Sign,
    /// Learnable per-layer (α, β).
    #[default]
    Adabin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    /// Identity: both slopes frozen at 1.
    None,
    /// Negative slope learnable, positive frozen at 1.
    Prelu,
    /// Positive slope learnable, negative frozen.
    MaxoutPos,
    /// Both per-channel slopes learnable.
    #[default]
    Maxout,
}

fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

fn channel_add_bias(y: &mut Tensor, bias: &[f32]) {
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let hw = y.numel() / (n * c);
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            for v in &mut y.data_mut()[base..base + hw] {
                *v += bias[ch];
            }
        }
    }
}

// ---------------------------------------------------------------- float conv

pub struct Conv2dFloat {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    stride: usize,
    pad: usize,
    ctx: Option<Tensor>,
}

impl Conv2dFloat {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_init(&[out_c, in_c, k, k], in_c * k * k, rng);
        Conv2dFloat {
            weight: Parameter::new(w, ParamRole::Weight),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[out_c]), ParamRole::Weight)),
            stride,
            pad,
            ctx: None,
        }
    }
}

impl Layer for Conv2dFloat {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut y = conv2d_fast(x, &self.weight.value, self.stride, self.pad)?;
        if let Some(b) = &self.bias {
            channel_add_bias(&mut y, b.value.data());
        }
        self.ctx = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("conv backward before forward".into()))?;
        let (dx, dw) = conv2d_backward(&x, &self.weight.value, grad, self.stride, self.pad)?;
        for (a, b) in self.weight.grad.data_mut().iter_mut().zip(dw.data()) {
            *a += b;
        }
        if let Some(b) = &mut self.bias {
            let (n, c) = (grad.shape()[0], grad.shape()[1]);
            let hw = grad.numel() / (n * c);
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let s: f32 = grad.data()[base..base + hw].iter().sum();
                    b.grad.data_mut()[ch] += s;
                }
            }
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot)) {
        f(format!("{prefix}.weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), Slot::Param(b));
        }
    }

    fn kind(&self) -> &'static str {
        "conv2d_float"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        let s = self.weight.value.shape();
        out.push(Record::Conv2dFloat {
            out_c: s[0],
            in_c: s[1],
            k: s[2],
            stride: self.stride,
            pad: self.pad,
            weight: self.weight.value.data().to_vec(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.value.data().to_vec())
                .unwrap_or_default(),
        });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let s = self.weight.value.shape();
        let (ho, wo) = conv_out_hw(in_shape, s[2], self.stride, self.pad)?;
        let mut cost = conv_cost(s[0], s[1], s[2], ho, wo, CostMode::Float)?;
        if self.bias.is_some() {
            cost.float_ops += (s[0] * ho * wo) as u64;
            cost.params_bits += 32 * s[0] as u64;
        }
        out.push(CostEntry { name: self.kind().into(), cost });
        Ok(vec![in_shape[0], s[0], ho, wo])
    }
}

fn conv_out_hw(in_shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if in_shape.len() != 4 {
        return Err(Error::shapes(&[0, 0, 0, 0], in_shape, "conv input"));
    }
    let (h, w) = (in_shape[2], in_shape[3]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} larger than padded input {h}x{w}"
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

// --------------------------------------------------------------- binary conv

struct BinConvCtx {
    act: ActContext,
    a_b: Tensor,
    w_b: Tensor,
    alpha_w: Vec<f32>,
    beta_w: Vec<f32>,
}

pub struct BinaryConv2d {
    pub weight: Parameter,
    pub w_alpha: Option<Parameter>,
    pub w_beta: Option<Parameter>,
    pub a_alpha: Parameter,
    pub a_beta: Parameter,
    pub weight_mode: WeightQuant,
    pub act_mode: ActQuant,
    pub alpha_grad: AlphaGradMode,
    stride: usize,
    pad: usize,
    ctx: Option<BinConvCtx>,
}

impl BinaryConv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        weight_mode: WeightQuant,
        act_mode: ActQuant,
        alpha_grad: AlphaGradMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = he_init(&[out_c, in_c, k, k], in_c * k * k, rng);
        let (w_alpha, w_beta) = if weight_mode == WeightQuant::AdabinLearnable {
            let (alpha, beta) = match equalize_weights(&w)? {
                BinarySpec::PerFilter { alpha, beta } => (alpha, beta),
                BinarySpec::PerLayer { .. } => unreachable!(),
            };
            let alpha: Vec<f32> = alpha.iter().map(|&a| a.max(EPS_ALPHA)).collect();
            (
                Some(Parameter::new(
                    Tensor::from_vec(vec![out_c], alpha)?,
                    ParamRole::QuantAlpha,
                )),
                Some(Parameter::new(
                    Tensor::from_vec(vec![out_c], beta)?,
                    ParamRole::QuantBeta,
                )),
            )
        } else {
            (None, None)
        };
        let trainable_act = act_mode == ActQuant::Adabin;
        let mut a_alpha = Parameter::new(Tensor::scalar(1.0), ParamRole::QuantAlpha);
        let mut a_beta = Parameter::new(Tensor::scalar(0.0), ParamRole::QuantBeta);
        a_alpha.trainable = trainable_act;
        a_beta.trainable = trainable_act;
        Ok(BinaryConv2d {
            weight: Parameter::new(w, ParamRole::Weight),
            w_alpha,
            w_beta,
            a_alpha,
            a_beta,
            weight_mode,
            act_mode,
            alpha_grad,
            stride,
            pad,
            ctx: None,
        })
    }

    /// Current per-filter (α, β) under the configured weight mode.
    pub fn weight_spec(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let n = self.weight.value.shape()[0];
        match self.weight_mode {
            WeightQuant::ScaledSign => {
                let m = (self.weight.value.numel() / n) as f32;
                let mut alpha = vec![0.0f32; n];
                let per = self.weight.value.numel() / n;
                for f in 0..n {
                    let chunk = &self.weight.value.data()[f * per..(f + 1) * per];
                    let l2: f32 = chunk.iter().map(|v| v * v).sum::<f32>().sqrt();
                    alpha[f] = l2 / m.sqrt();
                }
                Ok((alpha, vec![0.0; n]))
            }
            WeightQuant::Adabin => match equalize_weights(&self.weight.value)? {
                BinarySpec::PerFilter { alpha, beta } => Ok((alpha, beta)),
                BinarySpec::PerLayer { .. } => unreachable!(),
            },
            WeightQuant::AdabinLearnable => Ok((
                self.w_alpha.as_ref().unwrap().value.data().to_vec(),
                self.w_beta.as_ref().unwrap().value.data().to_vec(),
            )),
        }
    }

    fn act_spec(&self) -> Result<BinarySpec> {
        BinarySpec::per_layer(self.a_alpha.value.item(), self.a_beta.value.item())
    }
}

impl Layer for BinaryConv2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let (alpha_w, beta_w) = self.weight_spec()?;
        let w_pair = adabin_quantize(
            &self.weight.value,
            &BinarySpec::per_filter(alpha_w.clone(), beta_w.clone())?,
        )?;
        let (a_pair, act) = activation_binarize_forward(x, &self.act_spec()?)?;
        // same kernel the exported bundle runs, so eval and packed
        // inference agree bit for bit
        let y = crate::bitconv::binary_conv_packed(
            &a_pair.bits,
            &w_pair.bits,
            &crate::bitconv::ConvSpecs {
                alpha_w: alpha_w.clone(),
                beta_w: beta_w.clone(),
                alpha_a: act.alpha,
                beta_a: act.beta,
            },
            self.stride,
            self.pad,
        )?;
        self.ctx = Some(BinConvCtx {
            act,
            a_b: a_pair.dequantized,
            w_b: w_pair.dequantized,
            alpha_w,
            beta_w,
        });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let ctx = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("binary conv backward before forward".into()))?;
        let (d_ab, d_wb) = conv2d_backward(&ctx.a_b, &ctx.w_b, grad, self.stride, self.pad)?;

        // activation STE
        let (dx, dalpha_a, dbeta_a) = activation_binarize_backward(&d_ab, &ctx.act, self.alpha_grad)?;
        if self.a_alpha.trainable {
            self.a_alpha.grad.data_mut()[0] += dalpha_a;
            self.a_beta.grad.data_mut()[0] += dbeta_a;
        }

        // weight STE: clip at |(w − β)/α| ≤ 1, pass through when α = 0
        let n = self.weight.value.shape()[0];
        let per = self.weight.value.numel() / n;
        let learnable = self.weight_mode == WeightQuant::AdabinLearnable;
        let mut dalpha_w = vec![0.0f32; n];
        let mut dbeta_w = vec![0.0f32; n];
        for f in 0..n {
            let (aw, bw) = (ctx.alpha_w[f], ctx.beta_w[f]);
            for i in f * per..(f + 1) * per {
                let g = d_wb.data()[i];
                let w = self.weight.value.data()[i];
                if aw <= 0.0 {
                    self.weight.grad.data_mut()[i] += g;
                    continue;
                }
                let u = (w - bw) / aw;
                let gp = if u.abs() <= 1.0 { 1.0f32 } else { 0.0 };
                self.weight.grad.data_mut()[i] += g * gp;
                if learnable {
                    let dda = match self.alpha_grad {
                        AlphaGradMode::Consistent => u.clamp(-1.0, 1.0) - u * gp,
                        AlphaGradMode::PaperVerbatim => {
                            let s = if u >= 0.0 { 1.0 } else { -1.0 };
                            s - (w / aw) * gp
                        }
                    };
                    dalpha_w[f] += g * dda;
                    dbeta_w[f] += g * (1.0 - gp);
                }
            }
        }
        if learnable {
            let pa = self.w_alpha.as_mut().unwrap();
            for (a, b) in pa.grad.data_mut().iter_mut().zip(&dalpha_w) {
                *a += b;
            }
            let pb = self.w_beta.as_mut().unwrap();
            for (a, b) in pb.grad.data_mut().iter_mut().zip(&dbeta_w) {
                *a += b;
            }
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot)) {
        f(format!("{prefix}.weight"), Slot::Param(&mut self.weight));
        if let Some(p) = &mut self.w_alpha {
            f(format!("{prefix}.w_alpha"), Slot::Param(p));
        }
        if let Some(p) = &mut self.w_beta {
            f(format!("{prefix}.w_beta"), Slot::Param(p));
        }
        f(format!("{prefix}.a_alpha"), Slot::Param(&mut self.a_alpha));
        f(format!("{prefix}.a_beta"), Slot::Param(&mut self.a_beta));
    }

    fn kind(&self) -> &'static str {
        "binary_conv"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        let alpha_a = self.a_alpha.value.item();
        let beta_a = self.a_beta.value.item();
        if !alpha_a.is_finite() || !beta_a.is_finite() {
            return Err(Error::InvalidValue(format!(
                "activation quantizer not exportable: alpha={alpha_a} beta={beta_a}"
            )));
        }
        let (alpha_w, beta_w) = self.weight_spec()?;
        let s = self.weight.value.shape();
        let per = self.weight.value.numel() / s[0];
        // dense sign bitstream, row-major, bit set means the upper value
        let mut sign_bits = vec![0u8; self.weight.value.numel().div_ceil(8)];
        for (i, &w) in self.weight.value.data().iter().enumerate() {
            if w >= beta_w[i / per] {
                sign_bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.push(Record::BinaryConv {
            out_c: s[0],
            in_c: s[1],
            k: s[2],
            stride: self.stride,
            pad: self.pad,
            sign_bits,
            alpha_w,
            beta_w,
            alpha_a,
            beta_a,
        });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let s = self.weight.value.shape();
        let (ho, wo) = conv_out_hw(in_shape, s[2], self.stride, self.pad)?;
        let mode = if as_float {
            CostMode::Float
        } else if self.weight_mode == WeightQuant::ScaledSign && self.act_mode == ActQuant::Sign {
            CostMode::SignBinary
        } else {
            CostMode::Adabin
        };
        out.push(CostEntry {
            name: self.kind().into(),
            cost: conv_cost(s[0], s[1], s[2], ho, wo, mode)?,
        });
        Ok(vec![in_shape[0], s[0], ho, wo])
    }
}

// ---------------------------------------------------------------- batch norm

struct BnCtx {
    xhat: Tensor,
    invstd: Vec<f32>,
    train: bool,
}

pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
    ctx: Option<BnCtx>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(Tensor::full(&[channels], 1.0), ParamRole::BatchNorm),
            beta: Parameter::new(Tensor::zeros(&[channels]), ParamRole::BatchNorm),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            ctx: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let c = self.gamma.value.numel();
        if x.shape().len() != 4 || x.shape()[1] != c {
            return Err(Error::shapes(&[0, c, 0, 0], x.shape(), "batchnorm input"));
        }
        let n = x.shape()[0];
        Ok((n, c, x.numel() / (n * c)))
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, hw) = self.check(x)?;
        let m = (n * hw) as f32;
        let mut y = vec![0.0f32; x.numel()];
        let mut xhat = vec![0.0f32; x.numel()];
        let mut invstd = vec![0.0f32; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for &v in &x.data()[base..base + hw] {
                        s += v as f64;
                        s2 += (v as f64) * (v as f64);
                    }
                }
                let mean = (s / m as f64) as f32;
                let var = ((s2 / m as f64) - (s / m as f64).powi(2)).max(0.0) as f32;
                self.running_mean.data_mut()[ch] =
                    (1.0 - self.momentum) * self.running_mean.data()[ch] + self.momentum * mean;
                self.running_var.data_mut()[ch] =
                    (1.0 - self.momentum) * self.running_var.data()[ch] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean.data()[ch], self.running_var.data()[ch])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            invstd[ch] = istd;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean) * istd;
                    xhat[i] = xh;
                    y[i] = g * xh + b;
                }
            }
        }
        self.ctx = Some(BnCtx {
            xhat: Tensor::new(x.shape().to_vec(), xhat),
            invstd,
            train,
        });
        Ok(Tensor::new(x.shape().to_vec(), y))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let ctx = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("batchnorm backward before forward".into()))?;
        let (n, c, hw) = self.check(grad)?;
        let m = (n * hw) as f32;
        let mut dx = vec![0.0f32; grad.numel()];
        for ch in 0..c {
            let g = self.gamma.value.data()[ch];
            let istd = ctx.invstd[ch];
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    sum_g += grad.data()[i] as f64;
                    sum_gx += (grad.data()[i] * ctx.xhat.data()[i]) as f64;
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx as f32;
            self.beta.grad.data_mut()[ch] += sum_g as f32;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    dx[i] = if ctx.train {
                        g * istd / m
                            * (m * grad.data()[i]
                                - sum_g as f32
                                - ctx.xhat.data()[i] * sum_gx as f32)
                    } else {
                        g * istd * grad.data()[i]
                    };
                }
            }
        }
        Ok(Tensor::new(grad.shape().to_vec(), dx))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot)) {
        f(format!("{prefix}.gamma"), Slot::Param(&mut self.gamma));
        f(format!("{prefix}.beta"), Slot::Param(&mut self.beta));
        f(format!("{prefix}.running_mean"), Slot::Buffer(&mut self.running_mean));
        f(format!("{prefix}.running_var"), Slot::Buffer(&mut self.running_var));
    }

    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        out.push(Record::BatchNorm {
            gamma: self.gamma.value.data().to_vec(),
            beta: self.beta.value.data().to_vec(),
            mean: self.running_mean.data().to_vec(),
            var: self.running_var.data().to_vec(),
            eps: self.eps,
        });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let elems: usize = in_shape.iter().product();
        out.push(CostEntry {
            name: self.kind().into(),
            cost: elementwise_cost(elems, 2, 4 * self.gamma.value.numel()),
        });
        Ok(in_shape.to_vec())
    }
}

// -------------------------------------------------------------------- maxout

pub struct Maxout {
    pub gamma_pos: Parameter,
    pub gamma_neg: Parameter,
    ctx: Option<Tensor>,
}

impl Maxout {
    pub fn new(channels: usize, nonlin: Nonlinearity) -> Self {
        let (pos_init, neg_init, pos_train, neg_train) = match nonlin {
            Nonlinearity::None => (1.0, 1.0, false, false),
            Nonlinearity::Prelu => (1.0, 0.25, false, true),
            Nonlinearity::MaxoutPos => (1.0, 0.25, true, false),
            Nonlinearity::Maxout => (1.0, 0.25, true, true),
        };
        let mut gamma_pos =
            Parameter::new(Tensor::full(&[channels], pos_init), ParamRole::MaxoutGamma);
        let mut gamma_neg =
            Parameter::new(Tensor::full(&[channels], neg_init), ParamRole::MaxoutGamma);
        gamma_pos.trainable = pos_train;
        gamma_neg.trainable = neg_train;
        Maxout { gamma_pos, gamma_neg, ctx: None }
    }
}

impl Layer for Maxout {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let c = self.gamma_pos.value.numel();
        if x.shape().len() != 4 || x.shape()[1] != c {
            return Err(Error::shapes(&[0, c, 0, 0], x.shape(), "maxout input"));
        }
        let (n, hw) = (x.shape()[0], x.numel() / (x.shape()[0] * c));
        let mut y = vec![0.0f32; x.numel()];
        for img in 0..n {
            for ch in 0..c {
                let (gp, gn) = (self.gamma_pos.value.data()[ch], self.gamma_neg.value.data()[ch]);
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    let v = x.data()[i];
                    y[i] = if v >= 0.0 { gp * v } else { gn * v };
                }
            }
        }
        self.ctx = Some(x.clone());
        Ok(Tensor::new(x.shape().to_vec(), y))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("maxout backward before forward".into()))?;
        let c = self.gamma_pos.value.numel();
        let (n, hw) = (x.shape()[0], x.numel() / (x.shape()[0] * c));
        let mut dx = vec![0.0f32; x.numel()];
        for img in 0..n {
            for ch in 0..c {
                let (gp, gn) = (self.gamma_pos.value.data()[ch], self.gamma_neg.value.data()[ch]);
                let base = (img * c + ch) * hw;
                let mut dgp = 0.0f32;
                let mut dgn = 0.0f32;
                for i in base..base + hw {
                    let (v, g) = (x.data()[i], grad.data()[i]);
                    if v >= 0.0 {
                        dx[i] = gp * g;
                        dgp += g * v;
                    } else {
                        dx[i] = gn * g;
                        dgn += g * v;
                    }
                }
                self.gamma_pos.grad.data_mut()[ch] += dgp;
                self.gamma_neg.grad.data_mut()[ch] += dgn;
            }
        }
        Ok(Tensor::new(x.shape().to_vec(), dx))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot)) {
        f(format!("{prefix}.gamma_pos"), Slot::Param(&mut self.gamma_pos));
        f(format!("{prefix}.gamma_neg"), Slot::Param(&mut self.gamma_neg));
    }

    fn kind(&self) -> &'static str {
        "maxout"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        out.push(Record::Maxout {
            gpos: self.gamma_pos.value.data().to_vec(),
            gneg: self.gamma_neg.value.data().to_vec(),
        });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let elems: usize = in_shape.iter().product();
        out.push(CostEntry {
            name: self.kind().into(),
            cost: elementwise_cost(elems, 1, 2 * self.gamma_pos.value.numel()),
        });
        Ok(in_shape.to_vec())
    }
}

// ------------------------------------------------------------------- pooling

pub struct AvgPool {
    pub k: usize,
    ctx: Option<Vec<usize>>,
}

impl AvgPool {
    pub fn new(k: usize) -> Self {
        AvgPool { k, ctx: None }
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s.len() != 4 || s[2] < self.k || s[3] < self.k {
            return Err(Error::shapes(&[0, 0, self.k, self.k], s, "avgpool input"));
        }
        Ok(vec![s[0], s[1], s[2] / self.k, s[3] / self.k])
    }
}

impl Layer for AvgPool {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let os = self.out_shape(x.shape())?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (os[2], os[3]);
        let mut y = vec![0.0f32; n * c * ho * wo];
        let norm = 1.0 / (self.k * self.k) as f32;
        for img in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0f32;
                        for dy in 0..self.k {
                            for dx in 0..self.k {
                                s += x.data()
                                    [((img * c + ch) * h + oy * self.k + dy) * w + ox * self.k + dx];
                            }
                        }
                        y[((img * c + ch) * ho + oy) * wo + ox] = s * norm;
                    }
                }
            }
        }
        self.ctx = Some(x.shape().to_vec());
        Ok(Tensor::new(os, y))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let is = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("avgpool backward before forward".into()))?;
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let mut dx = vec![0.0f32; n * c * h * w];
        let norm = 1.0 / (self.k * self.k) as f32;
        for img in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = grad.data()[((img * c + ch) * ho + oy) * wo + ox] * norm;
                        for dy in 0..self.k {
                            for dx_ in 0..self.k {
                                dx[((img * c + ch) * h + oy * self.k + dy) * w + ox * self.k + dx_] +=
                                    g;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(is, dx))
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, Slot)) {}

    fn kind(&self) -> &'static str {
        "avgpool"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        out.push(Record::AvgPool { k: self.k });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let os = self.out_shape(in_shape)?;
        let elems: usize = os.iter().product();
        out.push(CostEntry {
            name: self.kind().into(),
            cost: elementwise_cost(elems, self.k * self.k, 0),
        });
        Ok(os)
    }
}

pub struct GlobalAvgPool {
    /// Emit `[n, c, 1, 1]` instead of `[n, c]` (feeds a 1×1 binary head).
    pub keep_spatial: bool,
    ctx: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new(keep_spatial: bool) -> Self {
        GlobalAvgPool { keep_spatial, ctx: None }
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        if x.shape().len() != 4 {
            return Err(Error::shapes(&[0, 0, 0, 0], x.shape(), "global avgpool input"));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw = x.numel() / (n * c);
        let mut y = vec![0.0f32; n * c];
        for i in 0..n * c {
            y[i] = x.data()[i * hw..(i + 1) * hw].iter().sum::<f32>() / hw as f32;
        }
        self.ctx = Some(x.shape().to_vec());
        let shape = if self.keep_spatial { vec![n, c, 1, 1] } else { vec![n, c] };
        Ok(Tensor::new(shape, y))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let is = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("global avgpool backward before forward".into()))?;
        let (n, c) = (is[0], is[1]);
        let hw = is[2] * is[3];
        let mut dx = vec![0.0f32; n * c * hw];
        for i in 0..n * c {
            let g = grad.data()[i] / hw as f32;
            dx[i * hw..(i + 1) * hw].fill(g);
        }
        Ok(Tensor::new(is, dx))
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, Slot)) {}

    fn kind(&self) -> &'static str {
        "global_avgpool"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        out.push(Record::GlobalAvgPool { keep_spatial: self.keep_spatial });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let elems: usize = in_shape.iter().product();
        out.push(CostEntry {
            name: self.kind().into(),
            cost: elementwise_cost(elems, 1, 0),
        });
        let (n, c) = (in_shape[0], in_shape[1]);
        Ok(if self.keep_spatial { vec![n, c, 1, 1] } else { vec![n, c] })
    }
}

pub struct Flatten {
    ctx: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten { ctx: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        self.ctx = Some(x.shape().to_vec());
        let n = x.shape()[0];
        let rest = x.numel() / n;
        x.clone().reshaped(vec![n, rest])
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let is = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("flatten backward before forward".into()))?;
        grad.clone().reshaped(is)
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, Slot)) {}

    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        out.push(Record::Flatten);
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, _out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let n = in_shape[0];
        let rest: usize = in_shape[1..].iter().product();
        Ok(vec![n, rest])
    }
}

// -------------------------------------------------------------------- linear

pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
    ctx: Option<Tensor>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Parameter::new(he_init(&[out_f, in_f], in_f, rng), ParamRole::Weight),
            bias: Parameter::new(Tensor::zeros(&[out_f]), ParamRole::Weight),
            ctx: None,
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let (o, i) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        if x.shape().len() != 2 || x.shape()[1] != i {
            return Err(Error::shapes(&[0, i], x.shape(), "linear input"));
        }
        let n = x.shape()[0];
        let mut y = vec![0.0f32; n * o];
        for img in 0..n {
            let row = &x.data()[img * i..(img + 1) * i];
            for f in 0..o {
                let wrow = &self.weight.value.data()[f * i..(f + 1) * i];
                let mut acc = self.bias.value.data()[f];
                for (a, b) in row.iter().zip(wrow) {
                    acc += a * b;
                }
                y[img * o + f] = acc;
            }
        }
        self.ctx = Some(x.clone());
        Ok(Tensor::new(vec![n, o], y))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("linear backward before forward".into()))?;
        let (o, i) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let n = x.shape()[0];
        let mut dx = vec![0.0f32; n * i];
        for img in 0..n {
            for f in 0..o {
                let g = grad.data()[img * o + f];
                self.bias.grad.data_mut()[f] += g;
                for j in 0..i {
                    self.weight.grad.data_mut()[f * i + j] += g * x.data()[img * i + j];
                    dx[img * i + j] += g * self.weight.value.data()[f * i + j];
                }
            }
        }
        Ok(Tensor::new(vec![n, i], dx))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot)) {
        f(format!("{prefix}.weight"), Slot::Param(&mut self.weight));
        f(format!("{prefix}.bias"), Slot::Param(&mut self.bias));
    }

    fn kind(&self) -> &'static str {
        "linear"
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        out.push(Record::Linear {
            out_f: self.weight.value.shape()[0],
            in_f: self.weight.value.shape()[1],
            weight: self.weight.value.data().to_vec(),
            bias: self.bias.value.data().to_vec(),
        });
        Ok(())
    }

    fn cost(&self, in_shape: &[usize], _as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let (o, i) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        out.push(CostEntry { name: self.kind().into(), cost: linear_cost(i, o, true) });
        Ok(vec![in_shape[0], o])
    }
}

// ------------------------------------------------------------ residual block

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// Average-pool by `stride`, zero-pad channels up to the conv width.
    Downsample { stride: usize },
}

/// One binarized unit: conv → batch norm → (optional shortcut add) →
/// maxout, with the nonlinearity applied after the residual join.
pub struct BinaryBlock {
    pub conv: BinaryConv2d,
    pub bn: BatchNorm2d,
    pub act: Maxout,
    pub shortcut: Option<Shortcut>,
    ctx: Option<Vec<usize>>, // input shape, for shortcut backward
}

impl BinaryBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        stride: usize,
        shortcut: Option<Shortcut>,
        weight_mode: WeightQuant,
        act_mode: ActQuant,
        nonlin: Nonlinearity,
        alpha_grad: AlphaGradMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let Some(Shortcut::Identity) = shortcut {
            if in_c != out_c || stride != 1 {
                return Err(Error::InvalidArgument(
                    "identity shortcut needs matching shape".into(),
                ));
            }
        }
        Ok(BinaryBlock {
            conv: BinaryConv2d::new(in_c, out_c, 3, stride, 1, weight_mode, act_mode, alpha_grad, rng)?,
            bn: BatchNorm2d::new(out_c),
            act: Maxout::new(out_c, nonlin),
            shortcut,
            ctx: None,
        })
    }

    fn shortcut_forward(&self, x: &Tensor, y_shape: &[usize]) -> Result<Tensor> {
        match self.shortcut {
            None => unreachable!(),
            Some(Shortcut::Identity) => Ok(x.clone()),
            Some(Shortcut::Downsample { stride }) => {
                let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let co = y_shape[1];
                let (ho, wo) = (y_shape[2], y_shape[3]);
                let mut s = vec![0.0f32; n * co * ho * wo];
                let norm = 1.0 / (stride * stride) as f32;
                for img in 0..n {
                    for ch in 0..ci.min(co) {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = 0.0f32;
                                for dy in 0..stride {
                                    for dx in 0..stride {
                                        let (iy, ix) = (oy * stride + dy, ox * stride + dx);
                                        if iy < h && ix < w {
                                            acc += x.data()[((img * ci + ch) * h + iy) * w + ix];
                                        }
                                    }
                                }
                                s[((img * co + ch) * ho + oy) * wo + ox] = acc * norm;
                            }
                        }
                    }
                }
                Ok(Tensor::new(y_shape.to_vec(), s))
            }
        }
    }

    fn shortcut_backward(&self, grad: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
        match self.shortcut {
            None => unreachable!(),
            Some(Shortcut::Identity) => Ok(grad.clone()),
            Some(Shortcut::Downsample { stride }) => {
                let (n, ci, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (co, ho, wo) = (grad.shape()[1], grad.shape()[2], grad.shape()[3]);
                let mut dx = vec![0.0f32; n * ci * h * w];
                let norm = 1.0 / (stride * stride) as f32;
                for img in 0..n {
                    for ch in 0..ci.min(co) {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = grad.data()[((img * co + ch) * ho + oy) * wo + ox] * norm;
                                for dy in 0..stride {
                                    for dx_ in 0..stride {
                                        let (iy, ix) = (oy * stride + dy, ox * stride + dx_);
                                        if iy < h && ix < w {
                                            dx[((img * ci + ch) * h + iy) * w + ix] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(Tensor::new(in_shape.to_vec(), dx))
            }
        }
    }
}

impl Layer for BinaryBlock {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x, train)?, train)?;
        let z = if self.shortcut.is_some() {
            let s = self.shortcut_forward(x, y.shape())?;
            y.add(&s)?
        } else {
            y
        };
        self.ctx = Some(x.shape().to_vec());
        self.act.forward(&z, train)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let in_shape = self
            .ctx
            .take()
            .ok_or_else(|| Error::GraphState("block backward before forward".into()))?;
        let gz = self.act.backward(grad)?;
        let g_main = self.conv.backward(&self.bn.backward(&gz)?)?;
        if self.shortcut.is_some() {
            let g_short = self.shortcut_backward(&gz, &in_shape)?;
            g_main.add(&g_short)
        } else {
            Ok(g_main)
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
        self.act.visit(&format!("{prefix}.act"), f);
    }

    fn kind(&self) -> &'static str {
        "binary_block"
    }

    fn children(&self) -> Vec<&dyn Layer> {
        vec![&self.conv, &self.bn, &self.act]
    }

    fn export(&self, out: &mut Vec<Record>) -> Result<()> {
        if let Some(sc) = self.shortcut {
            out.push(Record::ResidualEnter {
                pool: match sc {
                    Shortcut::Identity => 1,
                    Shortcut::Downsample { stride } => stride,
                },
            });
        }
        self.conv.export(out)?;
        self.bn.export(out)?;
        if self.shortcut.is_some() {
            out.push(Record::ResidualAdd);
        }
        self.act.export(out)
    }

    fn cost(&self, in_shape: &[usize], as_float: bool, out: &mut Vec<CostEntry>) -> Result<Vec<usize>> {
        let mut shape = self.conv.cost(in_shape, as_float, out)?;
        shape = self.bn.cost(&shape, as_float, out)?;
        if self.shortcut.is_some() {
            let elems: usize = shape.iter().product();
            out.push(CostEntry {
                name: "residual_add".into(),
                cost: LayerCost { float_ops: elems as u64, ..Default::default() },
            });
        }
        self.act.cost(&shape, as_float, out)
    }
}

// ------------------------------------------------------------- model builder

pub const VALID_ARCHS: [&str; 2] = ["resnet20-adabin", "smallcnn-adabin"];

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: String,
    pub classes: usize,
    pub in_channels: usize,
    pub width: f32,
    pub weight_mode: WeightQuant,
    pub act_mode: ActQuant,
    pub nonlin: Nonlinearity,
    pub alpha_grad: AlphaGradMode,
    /// Binarize the stem conv and the classifier head too.
    pub binarize_first_last: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "resnet20-adabin".into(),
            classes: 10,
            in_channels: 3,
            width: 1.0,
            weight_mode: WeightQuant::default(),
            act_mode: ActQuant::default(),
            nonlin: Nonlinearity::default(),
            alpha_grad: AlphaGradMode::default(),
            binarize_first_last: false,
            seed: 42,
        }
    }
}

fn scaled(c: usize, width: f32) -> usize {
    ((c as f32 * width).round() as usize).max(1)
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.arch.as_str() {
        "resnet20-adabin" => build_resnet20(cfg, &mut rng),
        "smallcnn-adabin" => build_smallcnn(cfg, &mut rng),
        other => Err(Error::Config(format!(
            "unknown architecture '{other}'; valid: {}",
            VALID_ARCHS.join(", ")
        ))),
    }
}

fn stem(cfg: &ModelConfig, out_c: usize, rng: &mut ChaCha8Rng, layers: &mut Vec<Box<dyn Layer>>) -> Result<()> {
    if cfg.binarize_first_last {
        layers.push(Box::new(BinaryConv2d::new(
            cfg.in_channels,
            out_c,
            3,
            1,
            1,
            cfg.weight_mode,
            cfg.act_mode,
            cfg.alpha_grad,
            rng,
        )?));
    } else {
        layers.push(Box::new(Conv2dFloat::new(cfg.in_channels, out_c, 3, 1, 1, false, rng)));
    }
    layers.push(Box::new(BatchNorm2d::new(out_c)));
    layers.push(Box::new(Maxout::new(out_c, cfg.nonlin)));
    Ok(())
}

fn head(cfg: &ModelConfig, in_c: usize, rng: &mut ChaCha8Rng, layers: &mut Vec<Box<dyn Layer>>) -> Result<()> {
    if cfg.binarize_first_last {
        layers.push(Box::new(GlobalAvgPool::new(true)));
        layers.push(Box::new(BinaryConv2d::new(
            in_c,
            cfg.classes,
            1,
            1,
            0,
            cfg.weight_mode,
            cfg.act_mode,
            cfg.alpha_grad,
            rng,
        )?));
        layers.push(Box::new(Flatten::new()));
    } else {
        layers.push(Box::new(GlobalAvgPool::new(false)));
        layers.push(Box::new(Linear::new(in_c, cfg.classes, rng)));
    }
    Ok(())
}

/// Three stages of six conv units each, every unit carrying its own
/// real-valued shortcut; stage transitions stride by 2 and widen.
fn build_resnet20(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    let widths = [scaled(16, cfg.width), scaled(32, cfg.width), scaled(64, cfg.width)];
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    stem(cfg, widths[0], rng, &mut layers)?;
    let mut in_c = widths[0];
    for (s, &out_c) in widths.iter().enumerate() {
        for unit in 0..6 {
            let stride = if s > 0 && unit == 0 { 2 } else { 1 };
            let shortcut = if stride == 1 && in_c == out_c {
                Shortcut::Identity
            } else {
                Shortcut::Downsample { stride }
            };
            layers.push(Box::new(BinaryBlock::new(
                in_c,
                out_c,
                stride,
                Some(shortcut),
                cfg.weight_mode,
                cfg.act_mode,
                cfg.nonlin,
                cfg.alpha_grad,
                rng,
            )?));
            in_c = out_c;
        }
    }
    head(cfg, in_c, rng, &mut layers)?;
    Ok(Model::new(layers))
}

/// Stem plus four plain binary conv blocks and a linear classifier.
fn build_smallcnn(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    let c = [scaled(16, cfg.width), scaled(32, cfg.width), scaled(64, cfg.width)];
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    stem(cfg, c[0], rng, &mut layers)?;
    let plan = [(c[0], c[1], 2), (c[1], c[1], 1), (c[1], c[2], 2), (c[2], c[2], 1)];
    for (ic, oc, stride) in plan {
        layers.push(Box::new(BinaryBlock::new(
            ic,
            oc,
            stride,
            None,
            cfg.weight_mode,
            cfg.act_mode,
            cfg.nonlin,
            cfg.alpha_grad,
            rng,
        )?));
    }
    head(cfg, c[2], rng, &mut layers)?;
    Ok(Model::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_ref;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_float_gradients_match_fd() {
        let mut r = rng();
        let mut conv = Conv2dFloat::new(2, 3, 3, 1, 1, true, &mut r);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
        let y = conv.forward(&x, true).unwrap();
        let up = Tensor::randn(y.shape(), 1.0, &mut r);
        let dx = conv.backward(&up).unwrap();
        // input grad at a few slots
        for idx in [0usize, 17, 49] {
            let mut xp = x.clone();
            let h = 1e-2;
            xp.data_mut()[idx] += h;
            let yp: f32 = conv.forward(&xp, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
            xp.data_mut()[idx] -= 2.0 * h;
            let ym: f32 = conv.forward(&xp, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
            let fd = (yp - ym) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-2, "slot {idx}: {fd} vs {}", dx.data()[idx]);
        }
        // weight grad at a few slots
        conv.zero_grad_all();
        conv.forward(&x, true).unwrap();
        conv.backward(&up).unwrap();
        for idx in [0usize, 13, 40] {
            let got = conv.weight.grad.data()[idx];
            let fd = {
                let h = 1e-2;
                conv.weight.value.data_mut()[idx] += h;
                let yp: f32 = conv.forward(&x, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
                conv.weight.value.data_mut()[idx] -= 2.0 * h;
                let ym: f32 = conv.forward(&x, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
                conv.weight.value.data_mut()[idx] += h;
                (yp - ym) / (2.0 * h)
            };
            assert!((fd - got).abs() < 2e-2, "w slot {idx}: {fd} vs {got}");
        }
    }

    impl Conv2dFloat {
        fn zero_grad_all(&mut self) {
            self.weight.zero_grad();
            if let Some(b) = &mut self.bias {
                b.zero_grad();
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_backward_matches_fd() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(2);
        let x = Tensor::randn(&[3, 2, 4, 4], 2.0, &mut r);
        let y = bn.forward(&x, true).unwrap();
        // per-channel output stats ~ (0, 1)
        for ch in 0..2 {
            let mut vals = Vec::new();
            for img in 0..3 {
                let base = (img * 2 + ch) * 16;
                vals.extend_from_slice(&y.data()[base..base + 16]);
            }
            let m: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let v: f32 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / vals.len() as f32;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-3);
        }
        let up = Tensor::randn(y.shape(), 1.0, &mut r);
        bn.forward(&x, true).unwrap();
        let dx = bn.backward(&up).unwrap();
        for idx in [0usize, 20, 77] {
            let h = 1e-2;
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let yp: f32 = bn.forward(&xp, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
            xp.data_mut()[idx] -= 2.0 * h;
            let ym: f32 = bn.forward(&xp, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
            let fd = (yp - ym) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 2e-2, "{fd} vs {}", dx.data()[idx]);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut r);
        for _ in 0..200 {
            bn.forward(&x, true).unwrap();
        }
        let y_train = bn.forward(&x, true).unwrap();
        let y_eval = bn.forward(&x, false).unwrap();
        for (a, b) in y_train.data().iter().zip(y_eval.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn maxout_values_and_gradients() {
        let mut mo = Maxout::new(1, Nonlinearity::Maxout);
        mo.gamma_pos.value.data_mut()[0] = 2.0;
        mo.gamma_neg.value.data_mut()[0] = 0.5;
        let x = Tensor::from_vec(vec![1, 1, 1, 4], vec![-2.0, 0.0, 1.0, 3.0]).unwrap();
        let y = mo.forward(&x, true).unwrap();
        assert_eq!(y.data(), &[-1.0, 0.0, 2.0, 6.0]);
        let up = Tensor::from_vec(vec![1, 1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        mo.forward(&x, true).unwrap();
        let dx = mo.backward(&up).unwrap();
        assert_eq!(dx.data(), &[0.5, 2.0, 2.0, 2.0]);
        assert!((mo.gamma_pos.grad.data()[0] - 4.0).abs() < 1e-6); // 0 + 1 + 3
        assert!((mo.gamma_neg.grad.data()[0] + 2.0).abs() < 1e-6); // -2
    }

    #[test]
    fn maxout_gamma_fd() {
        let mut r = rng();
        let mut mo = Maxout::new(2, Nonlinearity::Maxout);
        let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r);
        let up = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r);
        mo.forward(&x, true).unwrap();
        mo.backward(&up).unwrap();
        let got = mo.gamma_neg.grad.data()[1];
        let h = 1e-3;
        mo.gamma_neg.value.data_mut()[1] += h;
        let yp: f32 = mo.forward(&x, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        mo.gamma_neg.value.data_mut()[1] -= 2.0 * h;
        let ym: f32 = mo.forward(&x, true).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        let fd = (yp - ym) / (2.0 * h);
        assert!((fd - got).abs() < 1e-2, "{fd} vs {got}");
    }

    #[test]
    fn maxout_unused_branch_gets_no_gradient() {
        let mut mo = Maxout::new(1, Nonlinearity::Maxout);
        let x = Tensor::from_vec(vec![1, 1, 1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        let up = Tensor::full(&[1, 1, 1, 3], 1.0);
        mo.forward(&x, true).unwrap();
        mo.backward(&up).unwrap();
        assert_eq!(mo.gamma_neg.grad.data()[0], 0.0);
        assert!(mo.gamma_pos.grad.data()[0] != 0.0);
    }

    #[test]
    fn binary_conv_sign_mode_equals_scaled_xnor_reference() {
        let mut r = rng();
        let mut conv = BinaryConv2d::new(
            3, 4, 3, 1, 1,
            WeightQuant::ScaledSign,
            ActQuant::Sign,
            AlphaGradMode::Consistent,
            &mut r,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let y = conv.forward(&x, true).unwrap();
        // independent route: conv(sign(x), sign(w)) scaled per filter
        let sx = x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let sw = conv.weight.value.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let raw = conv2d_ref(&sx, &sw, 1, 1).unwrap();
        let (alpha, _) = conv.weight_spec().unwrap();
        let n_out = 4;
        let per = raw.numel() / (2 * n_out);
        for img in 0..2 {
            for f in 0..n_out {
                for i in 0..per {
                    let idx = (img * n_out + f) * per + i;
                    let want = raw.data()[idx] * alpha[f];
                    assert!((want - y.data()[idx]).abs() < 1e-4 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn binary_conv_product_alphabet_has_four_values() {
        let mut r = rng();
        let mut conv = BinaryConv2d::new(
            2, 3, 3, 1, 1,
            WeightQuant::Adabin,
            ActQuant::Adabin,
            AlphaGradMode::Consistent,
            &mut r,
        )
        .unwrap();
        conv.a_alpha.value.data_mut()[0] = 1.3;
        conv.a_beta.value.data_mut()[0] = 0.2;
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        conv.forward(&x, true).unwrap();
        let ctx = conv.ctx.as_ref().unwrap();
        // activations take exactly two values; weights two per filter
        let mut avals: Vec<f32> = ctx.a_b.data().to_vec();
        avals.sort_by(f32::total_cmp);
        avals.dedup();
        assert_eq!(avals.len(), 2);
        assert!((avals[0] - (0.2 - 1.3)).abs() < 1e-6);
        assert!((avals[1] - (0.2 + 1.3)).abs() < 1e-6);
        let per = ctx.w_b.numel() / 3;
        for f in 0..3 {
            let mut wvals: Vec<f32> = ctx.w_b.data()[f * per..(f + 1) * per].to_vec();
            wvals.sort_by(f32::total_cmp);
            wvals.dedup();
            assert!(wvals.len() <= 2);
            // so the elementwise product alphabet has at most 4 values
        }
    }

    #[test]
    fn binary_conv_weight_gradient_clips_outside_window() {
        let mut r = rng();
        let mut conv = BinaryConv2d::new(
            1, 1, 3, 1, 0,
            WeightQuant::Adabin,
            ActQuant::Sign,
            AlphaGradMode::Consistent,
            &mut r,
        )
        .unwrap();
        // one far outlier weight: |u| > 1 there, so its latent grad is 0
        conv.weight.value.data_mut()[4] = 100.0;
        let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut r);
        let y = conv.forward(&x, true).unwrap();
        let up = Tensor::full(y.shape(), 1.0);
        conv.backward(&up).unwrap();
        assert_eq!(conv.weight.grad.data()[4], 0.0);
        let nonzero = conv.weight.grad.data().iter().filter(|&&g| g != 0.0).count();
        assert!(nonzero > 0);
    }

    #[test]
    fn learnable_weight_spec_receives_gradients() {
        let mut r = rng();
        let mut conv = BinaryConv2d::new(
            2, 2, 3, 1, 1,
            WeightQuant::AdabinLearnable,
            ActQuant::Adabin,
            AlphaGradMode::Consistent,
            &mut r,
        )
        .unwrap();
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let y = conv.forward(&x, true).unwrap();
        let up = Tensor::randn(y.shape(), 1.0, &mut r);
        conv.backward(&up).unwrap();
        let ga = conv.w_alpha.as_ref().unwrap().grad.data();
        let gb = conv.w_beta.as_ref().unwrap().grad.data();
        assert!(ga.iter().any(|&g| g != 0.0));
        assert!(gb.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn residual_shortcut_changes_output() {
        let cfgs = [Some(Shortcut::Identity), None];
        let mut outs = Vec::new();
        for sc in cfgs {
            let mut r2 = rng();
            let mut block = BinaryBlock::new(
                4, 4, 1, sc,
                WeightQuant::Adabin,
                ActQuant::Adabin,
                Nonlinearity::Maxout,
                AlphaGradMode::Consistent,
                &mut r2,
            )
            .unwrap();
            let x = Tensor::full(&[1, 4, 6, 6], 0.7);
            outs.push(block.forward(&x, false).unwrap());
        }
        let diff: f32 = outs[0]
            .data()
            .iter()
            .zip(outs[1].data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn downsample_shortcut_shapes_and_backward() {
        let mut r = rng();
        let mut block = BinaryBlock::new(
            4, 8, 2,
            Some(Shortcut::Downsample { stride: 2 }),
            WeightQuant::Adabin,
            ActQuant::Adabin,
            Nonlinearity::Maxout,
            AlphaGradMode::Consistent,
            &mut r,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut r);
        let y = block.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
        let dx = block.backward(&Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn resnet20_has_eighteen_binary_convs() {
        let model = build_model(&ModelConfig::default()).unwrap();
        assert_eq!(model.count_kind("binary_conv"), 18);
        assert_eq!(model.count_kind("conv2d_float"), 1);
        assert_eq!(model.count_kind("linear"), 1);
    }

    #[test]
    fn smallcnn_has_four_binary_convs() {
        let cfg = ModelConfig { arch: "smallcnn-adabin".into(), ..Default::default() };
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.count_kind("binary_conv"), 4);
    }

    #[test]
    fn unknown_arch_error_lists_valid_ids() {
        let cfg = ModelConfig { arch: "resnet18".into(), ..Default::default() };
        let err = match build_model(&cfg) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("unknown arch accepted"),
        };
        assert!(err.contains("resnet20-adabin") && err.contains("smallcnn-adabin"), "{err}");
    }

    #[test]
    fn smallcnn_end_to_end_step_reduces_loss_and_is_deterministic() {
        let cfg = ModelConfig {
            arch: "smallcnn-adabin".into(),
            width: 0.25,
            ..Default::default()
        };
        let run = |cfg: &ModelConfig| {
            let mut model = build_model(cfg).unwrap();
            let mut r = rng();
            let x = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut r);
            let labels = [0usize, 1, 2, 3];
            let mut losses = Vec::new();
            for _ in 0..5 {
                model.zero_grads();
                let (loss, _) = model.forward(&x, &labels, true).unwrap();
                model.backward().unwrap();
                model.sgd_step(0.05, 0.9, 1e-4).unwrap();
                losses.push(loss);
            }
            losses
        };
        let l1 = run(&cfg);
        let l2 = run(&cfg);
        assert_eq!(l1, l2, "training not deterministic");
        assert!(l1.last().unwrap() < l1.first().unwrap(), "{l1:?}");
    }

    #[test]
    fn sgd_decays_weights_only_and_clamps_alpha() {
        let cfg = ModelConfig { arch: "smallcnn-adabin".into(), width: 0.25, ..Default::default() };
        let mut model = build_model(&cfg).unwrap();
        // force a huge positive alpha gradient; after the step alpha
        // must sit at the clamp floor rather than going negative
        model.visit(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                if name.ends_with(".a_alpha") {
                    p.grad.data_mut()[0] = 1e6;
                }
            }
        });
        model.sgd_step(0.1, 0.0, 0.0).unwrap();
        model.visit(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                if name.ends_with(".a_alpha") {
                    assert_eq!(p.value.data()[0], EPS_ALPHA, "{name}");
                }
            }
        });
        // weight decay moves weights with zero grad; leaves gammas alone
        let mut model = build_model(&cfg).unwrap();
        let mut before = Vec::new();
        model.visit(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                before.push((name, p.value.data()[0], p.role));
            }
        });
        model.sgd_step(0.1, 0.0, 0.5).unwrap();
        let mut i = 0;
        model.visit(&mut |name, slot| {
            if let Slot::Param(p) = slot {
                let (ref n0, v0, role) = before[i];
                assert_eq!(n0, &name);
                let v1 = p.value.data()[0];
                if role == ParamRole::Weight && v0 != 0.0 {
                    assert!((v1 - v0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6, "{name}");
                } else {
                    assert_eq!(v0, v1, "{name}");
                }
                i += 1;
            }
        });
    }

    #[test]
    fn negative_lr_rejected() {
        let cfg = ModelConfig { arch: "smallcnn-adabin".into(), width: 0.25, ..Default::default() };
        let mut model = build_model(&cfg).unwrap();
        assert!(model.sgd_step(-0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn avgpool_example() {
        let mut p = AvgPool::new(2);
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = p.forward(&x, false).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = p.backward(&Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(dx.data(), &[0.25, 0.25, 0.25, 0.25]);
    }
}
