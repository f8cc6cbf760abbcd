//! Minimal reverse-mode differentiation over a static layer graph.
//!
//! Each layer owns its forward context and exposes an explicit backward;
//! the model is a sequential list (residual blocks nest their own
//! sublayers). Custom backward rules (the quantizer STEs) live in the
//! layers themselves.

use crate::costmodel::CostEntry;
use crate::error::{Error, Result};
use crate::quantize::EPS_ALPHA;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    QuantAlpha,
    QuantBeta,
    MaxoutGamma,
    BatchNorm,
}

impl ParamRole {
    pub fn tag(&self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::QuantAlpha => 1,
            ParamRole::QuantBeta => 2,
            ParamRole::MaxoutGamma => 3,
            ParamRole::BatchNorm => 4,
        }
    }
}

/// Trainable leaf: value, gradient, and SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    pub role: ParamRole,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, role: ParamRole) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            value,
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
            role,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor, role: ParamRole) -> Self {
        let mut p = Parameter::new(value, role);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Checkpoint/visit handle: trainable parameter or plain state buffer
/// (batch-norm running statistics).
pub enum Slot<'a> {
    Param(&'a mut Parameter),
    Buffer(&'a mut Tensor),
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor>;
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;
    /// Visit every parameter and buffer with a stable hierarchical name.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot));
    fn kind(&self) -> &'static str;
    /// Append bundle records for packed inference export.
    fn export(&self, out: &mut Vec<crate::bundle::Record>) -> Result<()>;
    /// Append cost entries; `as_float` costs binary convs as if float
    /// (the reference model of the speedup ratio). Returns output shape.
    fn cost(&self, in_shape: &[usize], as_float: bool, out: &mut Vec<CostEntry>)
        -> Result<Vec<usize>>;
    /// Nested sublayers (residual blocks); leaves return none.
    fn children(&self) -> Vec<&dyn Layer> {
        Vec::new()
    }
}

fn count_kind_rec(layer: &dyn Layer, kind: &str) -> usize {
    usize::from(layer.kind() == kind)
        + layer
            .children()
            .iter()
            .map(|c| count_kind_rec(*c, kind))
            .sum::<usize>()
}

/// Sequential model with a cross-entropy head.
pub struct Model {
    pub layers: Vec<Box<dyn Layer>>,
    head: Option<HeadCtx>,
}

struct HeadCtx {
    dlogits: Tensor,
}

impl Model {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Model { layers, head: None }
    }

    pub fn forward_logits(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, train)?;
        }
        Ok(x)
    }

    /// Full forward: cross-entropy loss averaged over the batch plus the
    /// pre-softmax logits; saves what backward needs.
    pub fn forward(&mut self, input: &Tensor, labels: &[usize], train: bool) -> Result<(f32, Tensor)> {
        let logits = self.forward_logits(input, train)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        self.head = Some(HeadCtx { dlogits });
        Ok((loss, logits))
    }

    /// Populate every reachable parameter gradient.
    pub fn backward(&mut self) -> Result<()> {
        let head = self
            .head
            .take()
            .ok_or_else(|| Error::GraphState("backward called before forward".into()))?;
        let mut grad = head.dlogits;
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, Slot)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("{}.{}", i, layer.kind());
            layer.visit(&prefix, f);
        }
    }

    /// SGD with momentum; weight decay applies to `Weight` parameters
    /// only, and quantizer alphas are re-clamped after the step.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("negative lr {lr}")));
        }
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                if !p.trainable {
                    return;
                }
                let wd = if p.role == ParamRole::Weight { weight_decay } else { 0.0 };
                let clamp_alpha = p.role == ParamRole::QuantAlpha;
                for i in 0..p.value.numel() {
                    let g = p.grad.data()[i] + wd * p.value.data()[i];
                    let v = momentum * p.momentum.data()[i] + g;
                    p.momentum.data_mut()[i] = v;
                    let mut new = p.value.data()[i] - lr * v;
                    if clamp_alpha && new < EPS_ALPHA {
                        new = EPS_ALPHA;
                    }
                    p.value.data_mut()[i] = new;
                }
            }
        });
        Ok(())
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().map(|l| count_kind_rec(l.as_ref(), kind)).sum()
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                total += p.value.numel();
            }
        });
        total
    }
}

/// Mean cross-entropy over the batch from raw logits. Returns the loss
/// and dL/dlogits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shapes(&[labels.len(), 0], shape, "logits vs labels"));
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * k];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - row[label]) as f64;
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    Ok((
        (loss / n as f64) as f32,
        Tensor::new(vec![n, k], grad),
    ))
}

/// Cosine-annealed learning rate: `0.5·lr0·(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f32) -> Result<f32> {
    if total_epochs == 0 {
        return Err(Error::InvalidArgument("total_epochs must be > 0".into()));
    }
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range for {total_epochs}"
        )));
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok((0.5 * lr0 as f64 * (1.0 + (std::f64::consts::PI * t).cos())) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::zeros(&[4, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 5, 9]).unwrap();
        assert!((loss - 10.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_logit_loss_near_zero() {
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[2] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn label_out_of_range_errors() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = Tensor::from_vec(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let labels = [2usize, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-3f32;
        for idx in 0..6 {
            let mut lp = logits.clone();
            lp.data_mut()[idx] += h;
            let mut lm = logits.clone();
            lm.data_mut()[idx] -= h;
            let (fp, _) = softmax_cross_entropy(&lp, &labels).unwrap();
            let (fm, _) = softmax_cross_entropy(&lm, &labels).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad.data()[idx]).abs() < 1e-3);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0, 400, 0.1).unwrap() - 0.1).abs() < 1e-9);
        assert!((cosine_lr(200, 400, 0.1).unwrap() - 0.05).abs() < 1e-7);
        let last = cosine_lr(399, 400, 0.1).unwrap();
        assert!((last - 1.542e-6).abs() < 2e-8, "{last}");
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }

    #[test]
    fn plain_sgd_and_momentum_displacement() {
        // value <- value − lr·v with v accumulating momentum
        let mut p = Parameter::new(Tensor::scalar(1.0), ParamRole::Weight);
        p.grad = Tensor::scalar(2.0);
        // momentum 0: one plain step
        let lr = 0.1;
        let g = p.grad.data()[0];
        let v = 0.0 * p.momentum.data()[0] + g;
        p.momentum.data_mut()[0] = v;
        p.value.data_mut()[0] -= lr * v;
        assert!((p.value.data()[0] - 0.8).abs() < 1e-6);
        // two steps momentum 0.9 with constant grad: displacement lr·g·(1+1.9)
        let mut p = Parameter::new(Tensor::scalar(0.0), ParamRole::Weight);
        let g = 1.0f32;
        let mut v = 0.0f32;
        for _ in 0..2 {
            v = 0.9 * v + g;
            p.value.data_mut()[0] -= lr * v;
        }
        assert!((p.value.data()[0] + lr * g * 2.9).abs() < 1e-6);
    }
}
