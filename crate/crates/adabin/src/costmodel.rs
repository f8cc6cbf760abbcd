//! Static operation and parameter accounting.
//!
//! Convention: one multiply-accumulate is two floating-point ops; an
//! XNOR-popcount lane processes 64 binary ops per equivalent float op,
//! so total OPs = FLOPs + BOPs/64. A binarized conv keeps one per-filter
//! float scale; the adaptive quantizer adds one per-window shared sum
//! term on top (multiply + accumulate per output pixel per filter) while
//! the constant offset term folds into accumulator initialization. Its
//! parameter overhead is the per-filter offset plus the two activation
//! scalars.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Float,
    SignBinary,
    Adabin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub float_ops: u64,
    pub binary_ops: u64,
    pub extra_float_ops: u64,
    pub params_bits: u64,
    pub extra_param_bits: u64,
}

impl LayerCost {
    /// Equivalent float operation count.
    pub fn total_ops(&self) -> f64 {
        self.float_ops as f64 + self.extra_float_ops as f64 + self.binary_ops as f64 / 64.0
    }

    pub fn total_bits(&self) -> u64 {
        self.params_bits + self.extra_param_bits
    }

    pub fn add(&mut self, other: &LayerCost) {
        self.float_ops += other.float_ops;
        self.binary_ops += other.binary_ops;
        self.extra_float_ops += other.extra_float_ops;
        self.params_bits += other.params_bits;
        self.extra_param_bits += other.extra_param_bits;
    }
}

#[derive(Debug, Clone)]
pub struct CostEntry {
    pub name: String,
    pub cost: LayerCost,
}

/// Cost of a single conv layer producing `n` maps of `h_out`×`w_out`
/// from `c` input channels with a `k`×`k` kernel.
pub fn conv_cost(
    n: usize,
    c: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    mode: CostMode,
) -> Result<LayerCost> {
    if n == 0 || c == 0 || k == 0 || h_out == 0 || w_out == 0 {
        return Err(Error::InvalidArgument(
            "conv_cost dimensions must be nonzero".into(),
        ));
    }
    let (n, c, k, h, w) = (n as u64, c as u64, k as u64, h_out as u64, w_out as u64);
    let macs = n * c * k * k * h * w;
    let weights = n * c * k * k;
    Ok(match mode {
        CostMode::Float => LayerCost {
            float_ops: 2 * macs,
            params_bits: 32 * weights,
            ..Default::default()
        },
        CostMode::SignBinary => LayerCost {
            binary_ops: 2 * macs,
            float_ops: n * h * w, // per-filter scale applied per output pixel
            params_bits: weights + 32 * n,
            ..Default::default()
        },
        CostMode::Adabin => LayerCost {
            binary_ops: 2 * macs,
            float_ops: n * h * w,
            extra_float_ops: 2 * n * h * w, // shared-sum term: mul + acc per pixel
            params_bits: weights + 32 * n,
            extra_param_bits: 32 * n + 64, // per-filter offset + activation pair
            ..Default::default()
        },
    })
}

pub fn linear_cost(in_features: usize, out_features: usize, bias: bool) -> LayerCost {
    let (i, o) = (in_features as u64, out_features as u64);
    LayerCost {
        float_ops: 2 * i * o + if bias { o } else { 0 },
        params_bits: 32 * (i * o + if bias { o } else { 0 }),
        ..Default::default()
    }
}

/// Per-element affine layers (batch norm at inference, maxout).
pub fn elementwise_cost(elems: usize, ops_per_elem: usize, params: usize) -> LayerCost {
    LayerCost {
        float_ops: (elems * ops_per_elem) as u64,
        params_bits: 32 * params as u64,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
pub struct ModelCost {
    pub entries: Vec<CostEntry>,
    pub total: LayerCost,
    /// Same network costed with every conv in float mode.
    pub float_reference: LayerCost,
}

impl ModelCost {
    pub fn speedup(&self) -> f64 {
        self.float_reference.total_ops() / self.total.total_ops()
    }

    pub fn memory_saving(&self) -> f64 {
        self.float_reference.total_bits() as f64 / self.total.total_bits() as f64
    }

    /// Overhead of the adaptive binary sets relative to the same network
    /// with plain sign binarization, in percent.
    pub fn extra_ops_pct(&self) -> f64 {
        let base = self.total.total_ops() - self.total.extra_float_ops as f64;
        100.0 * self.total.extra_float_ops as f64 / base
    }

    pub fn extra_params_pct(&self) -> f64 {
        100.0 * self.total.extra_param_bits as f64 / self.total.params_bits as f64
    }
}

/// Walk a model's layers, tallying actual cost and the all-float
/// reference for a given single-image input shape `[1, c, h, w]`.
pub fn model_cost(
    layers: &[Box<dyn crate::autograd::Layer>],
    input_shape: &[usize],
) -> Result<ModelCost> {
    let mut entries = Vec::new();
    let mut shape = input_shape.to_vec();
    for layer in layers {
        shape = layer.cost(&shape, false, &mut entries)?;
    }
    let mut total = LayerCost::default();
    for e in &entries {
        total.add(&e.cost);
    }
    let mut ref_entries = Vec::new();
    let mut shape = input_shape.to_vec();
    for layer in layers {
        shape = layer.cost(&shape, true, &mut ref_entries)?;
    }
    let mut float_reference = LayerCost::default();
    for e in &ref_entries {
        float_reference.add(&e.cost);
    }
    Ok(ModelCost {
        entries,
        total,
        float_reference,
    })
}
