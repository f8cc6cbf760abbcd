//! The adaptive binary quantizer: a value is mapped onto the two-element
//! set `{β−α, β+α}` (ties at β go to the upper cluster). Weights get an
//! analytic per-filter (α, β); activations carry one learned pair per
//! layer with a clipped straight-through estimator.

use crate::bitpack::{pack, PackedBitTensor};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Tensor};

/// Lower clamp for activation α; keeps the surrogate's division defined.
pub const EPS_ALPHA: f32 = 1e-3;

/// Center/distance pair(s) defining the binary set.
#[derive(Debug, Clone, PartialEq)]
pub enum BinarySpec {
    /// Per-output-filter pairs (weights): vectors of length n.
    PerFilter { alpha: Vec<f32>, beta: Vec<f32> },
    /// One scalar pair for the whole layer (activations).
    PerLayer { alpha: f32, beta: f32 },
}

impl BinarySpec {
    pub fn per_filter(alpha: Vec<f32>, beta: Vec<f32>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::InvalidArgument("alpha/beta length mismatch".into()));
        }
        if alpha.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::InvalidValue("per-filter alpha must be >= 0".into()));
        }
        Ok(BinarySpec::PerFilter { alpha, beta })
    }

    pub fn per_layer(alpha: f32, beta: f32) -> Result<Self> {
        if !(alpha >= EPS_ALPHA) {
            return Err(Error::InvalidValue(format!(
                "per-layer alpha must be >= {EPS_ALPHA}, got {alpha}"
            )));
        }
        Ok(BinarySpec::PerLayer { alpha, beta })
    }

    fn check_compat(&self, x: &Tensor) -> Result<()> {
        if let BinarySpec::PerFilter { alpha, .. } = self {
            if x.shape().len() != 4 || x.shape()[0] != alpha.len() {
                return Err(Error::shapes(
                    &[alpha.len()],
                    x.shape(),
                    "per-filter spec vs weight tensor",
                ));
            }
        }
        Ok(())
    }
}

/// A binarized tensor in both representations: dequantized values in
/// `{β−α, β+α}` and the packed ±1 bits.
#[derive(Debug, Clone)]
pub struct BinarizedPair {
    pub dequantized: Tensor,
    pub bits: PackedBitTensor,
}

/// Core quantizer: `x < β -> β−α`, `x >= β -> β+α`; bits record the branch.
pub fn adabin_quantize(x: &Tensor, spec: &BinarySpec) -> Result<BinarizedPair> {
    spec.check_compat(x)?;
    let mut dequant = vec![0.0f32; x.numel()];
    let mut signs = vec![0.0f32; x.numel()];
    match spec {
        BinarySpec::PerLayer { alpha, beta } => {
            for (i, &v) in x.data().iter().enumerate() {
                let up = v >= *beta;
                signs[i] = if up { 1.0 } else { -1.0 };
                dequant[i] = if up { beta + alpha } else { beta - alpha };
            }
        }
        BinarySpec::PerFilter { alpha, beta } => {
            let per = x.numel() / alpha.len();
            for (i, &v) in x.data().iter().enumerate() {
                let f = i / per;
                let up = v >= beta[f];
                signs[i] = if up { 1.0 } else { -1.0 };
                dequant[i] = if up {
                    beta[f] + alpha[f]
                } else {
                    beta[f] - alpha[f]
                };
            }
        }
    }
    let bits = pack(&Tensor::new(x.shape().to_vec(), signs))?;
    Ok(BinarizedPair {
        dequantized: Tensor::new(x.shape().to_vec(), dequant),
        bits,
    })
}

/// Analytic weight equalization: β is the filter mean, α the population
/// standard deviation (l2 of the centered filter over sqrt(c·k·k)).
pub fn equalize_weights(w: &Tensor) -> Result<BinarySpec> {
    let (mean, l2) = channel_stats(w)?;
    let per = (w.numel() / w.shape()[0]) as f32;
    let alpha = l2.data().iter().map(|&v| v / per.sqrt()).collect();
    BinarySpec::per_filter(alpha, mean.data().to_vec())
}

/// Which α-gradient formula the activation STE uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaGradMode {
    /// Exact derivative of the Htanh surrogate: Htanh(u) − u·1{|u|≤1}.
    #[default]
    Consistent,
    /// The printed formula: g(u) − (a/α)·1{|u|≤1} with g = Sign∘Htanh.
    PaperVerbatim,
}

/// Forward context the activation STE needs for backward.
#[derive(Debug, Clone)]
pub struct ActContext {
    pub input: Tensor,
    pub alpha: f32,
    pub beta: f32,
}

/// Binarize activations with the per-layer spec, saving STE context.
pub fn activation_binarize_forward(
    a: &Tensor,
    spec: &BinarySpec,
) -> Result<(BinarizedPair, ActContext)> {
    let (alpha, beta) = match spec {
        BinarySpec::PerLayer { alpha, beta } => (*alpha, *beta),
        BinarySpec::PerFilter { .. } => {
            return Err(Error::InvalidArgument(
                "activation binarization takes a per-layer spec".into(),
            ))
        }
    };
    if alpha < EPS_ALPHA {
        return Err(Error::InvalidValue(format!(
            "activation alpha {alpha} below {EPS_ALPHA}"
        )));
    }
    let pair = adabin_quantize(a, spec)?;
    Ok((
        pair,
        ActContext {
            input: a.clone(),
            alpha,
            beta,
        },
    ))
}

fn htanh(u: f32) -> f32 {
    u.clamp(-1.0, 1.0)
}

fn sign_pos(u: f32) -> f32 {
    if u >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Clipped-STE backward for the activation binarizer.
///
/// Returns `(dL/da, dL/dα, dL/dβ)`; the parameter gradients are scalars
/// summed over the whole layer.
pub fn activation_binarize_backward(
    upstream: &Tensor,
    ctx: &ActContext,
    mode: AlphaGradMode,
) -> Result<(Tensor, f32, f32)> {
    if upstream.shape() != ctx.input.shape() {
        return Err(Error::shapes(
            ctx.input.shape(),
            upstream.shape(),
            "activation STE upstream",
        ));
    }
    let (alpha, beta) = (ctx.alpha, ctx.beta);
    let mut da = vec![0.0f32; upstream.numel()];
    let mut dalpha = 0.0f64;
    let mut dbeta = 0.0f64;
    for (i, (&g, &a)) in upstream.data().iter().zip(ctx.input.data()).enumerate() {
        let u = (a - beta) / alpha;
        let in_window = u.abs() <= 1.0;
        let gp = if in_window { 1.0f32 } else { 0.0 };
        da[i] = g * gp;
        dbeta += (g * (1.0 - gp)) as f64;
        let dda = match mode {
            AlphaGradMode::Consistent => htanh(u) - u * gp,
            AlphaGradMode::PaperVerbatim => sign_pos(u) - (a / alpha) * gp,
        };
        dalpha += (g * dda) as f64;
    }
    Ok((
        Tensor::new(upstream.shape().to_vec(), da),
        dalpha as f32,
        dbeta as f32,
    ))
}

/// Diagnostic KL divergence between the sample distribution and the
/// binary set, both replaced by their max-entropy (Gaussian) surrogates
/// with matched first and second moments and discretized onto shared
/// bins. The bell-shape assumption behind the analytic α makes the
/// Gaussian envelope the natural smoothing; an atomic two-spike density
/// would make the divergence degenerate.
pub fn kld_numeric(samples: &Tensor, spec: &BinarySpec, bins: usize) -> Result<f32> {
    if samples.numel() == 0 {
        return Err(Error::InvalidArgument("kld_numeric: empty samples".into()));
    }
    if bins < 8 {
        return Err(Error::InvalidArgument("kld_numeric: bins must be >= 8".into()));
    }
    let (alpha, beta) = match spec {
        BinarySpec::PerLayer { alpha, beta } => (*alpha, *beta),
        BinarySpec::PerFilter { alpha, beta } => {
            if alpha.len() != 1 {
                return Err(Error::InvalidArgument(
                    "kld_numeric takes a single (alpha, beta) pair".into(),
                ));
            }
            (alpha[0], beta[0])
        }
    };
    let n = samples.numel() as f64;
    let mean = samples.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = samples
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-8);
    let (alpha, beta) = (alpha.max(1e-8) as f64, beta as f64);
    let lo = (mean - 6.0 * std).min(beta - 6.0 * alpha);
    let hi = (mean + 6.0 * std).max(beta + 6.0 * alpha);
    let step = (hi - lo) / bins as f64;
    let gauss = |x: f64, mu: f64, sd: f64| (-0.5 * ((x - mu) / sd).powi(2)).exp() / sd;
    let mut pr = Vec::with_capacity(bins);
    let mut pb = Vec::with_capacity(bins);
    for i in 0..bins {
        let x = lo + (i as f64 + 0.5) * step;
        pr.push(gauss(x, mean, std));
        pb.push(gauss(x, beta, alpha));
    }
    let (sr, sb) = (pr.iter().sum::<f64>(), pb.iter().sum::<f64>());
    let mut kld = 0.0f64;
    for (r, b) in pr.iter().zip(&pb) {
        let r = r / sr;
        let b = b / sb + 1e-12;
        if r > 0.0 {
            kld += r * (r / b).ln();
        }
    }
    Ok(kld as f32)
}
