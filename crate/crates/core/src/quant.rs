//! Uniform affine fake quantization with per-tensor, per-channel, and
//! per-token granularity, in static (calibrated) and dynamic modes.
//!
//! A value is quantized as `q = clamp(round(x/s + z), 0, 2^b - 1)` and
//! dequantized as `(q - z) * s`, with `s = (max - min)/(2^b - 1)` and
//! `z = -min/s`. The zero point is kept as an unrounded float and enters
//! before rounding, which makes every representable grid point
//! `(k - z) * s` an exact fixed point and bounds the in-range error by
//! `s/2`. Rounding ties go to even.

use crate::error::{MqError, Result};
use crate::tensor::{quantile_sorted, Tensor};
use serde::{Deserialize, Serialize};

/// Grouping axis for quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One scale/zero-point for the whole tensor.
    PerTensor,
    /// One group per column (weight output channels).
    PerChannel,
    /// One group per row (activation tokens).
    PerToken,
}

/// Activation quantization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    /// Ranges frozen from calibration statistics.
    Static,
    /// Ranges recomputed from each live tensor.
    Dynamic,
}

/// Quantization settings for a whole pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub w_granularity: Granularity,
    pub a_mode: ActMode,
    pub a_granularity: Granularity,
    /// Optional symmetric quantile clip applied to calibrated ranges;
    /// 1.0 means pure min/max.
    pub clip_quantile: f64,
}

impl QuantConfig {
    pub fn new(bits_w: u32, bits_a: u32) -> Self {
        QuantConfig {
            bits_w,
            bits_a,
            w_granularity: Granularity::PerChannel,
            a_mode: ActMode::Static,
            a_granularity: Granularity::PerTensor,
            clip_quantile: 1.0,
        }
    }

    /// Validate bit widths, granularity combinations, and the clip range.
    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !(2..=16).contains(&bits) {
                return Err(MqError::InvalidConfig(format!("{name} = {bits}, expected 2..=16")));
            }
        }
        if self.w_granularity == Granularity::PerToken {
            return Err(MqError::InvalidConfig("weights cannot use per-token grouping".into()));
        }
        if self.a_mode == ActMode::Static && self.a_granularity == Granularity::PerToken {
            return Err(MqError::InvalidConfig(
                "static activation quantization requires per-tensor grouping (token ranges cannot be calibrated ahead of time)".into(),
            ));
        }
        if !(self.clip_quantile > 0.5 && self.clip_quantile <= 1.0) {
            return Err(MqError::InvalidConfig(format!(
                "clip_quantile = {}, expected (0.5, 1]",
                self.clip_quantile
            )));
        }
        Ok(())
    }
}

/// Scale and zero point per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub granularity: Granularity,
    /// One per group; strictly positive.
    pub scales: Vec<f64>,
    /// One per group; stored unrounded.
    pub zero_points: Vec<f64>,
}

fn params_from_range(lo: f64, hi: f64, bits: u32) -> (f64, f64) {
    let levels = ((1u64 << bits) - 1) as f64;
    if hi > lo {
        let s = (hi - lo) / levels;
        (s, -lo / s)
    } else {
        // degenerate group: represent the constant exactly
        (1.0, -lo)
    }
}

/// Derive quantization parameters from live tensor content.
pub fn calc_qparams(x: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    calc_qparams_clipped(x, bits, granularity, 1.0)
}

/// Same as [`calc_qparams`] but with a symmetric quantile clip `q`:
/// the group range becomes `[Q(1-q), Q(q)]`. `q = 1` is exact min/max.
pub fn calc_qparams_clipped(
    x: &Tensor,
    bits: u32,
    granularity: Granularity,
    q: f64,
) -> Result<QuantParams> {
    if x.numel() == 0 {
        return Err(MqError::InvalidConfig("cannot quantize an empty tensor".into()));
    }
    let group_range = |vals: &mut Vec<f64>| -> (f64, f64) {
        if q >= 1.0 {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        } else {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (quantile_sorted(vals, 1.0 - q), quantile_sorted(vals, q))
        }
    };
    let mut scales = Vec::new();
    let mut zero_points = Vec::new();
    match granularity {
        Granularity::PerTensor => {
            let mut vals = x.data().to_vec();
            let (lo, hi) = group_range(&mut vals);
            let (s, z) = params_from_range(lo, hi, bits);
            scales.push(s);
            zero_points.push(z);
        }
        Granularity::PerChannel => {
            for j in 0..x.ncols() {
                let mut vals: Vec<f64> = (0..x.nrows()).map(|i| x.at(i, j)).collect();
                let (lo, hi) = group_range(&mut vals);
                let (s, z) = params_from_range(lo, hi, bits);
                scales.push(s);
                zero_points.push(z);
            }
        }
        Granularity::PerToken => {
            for i in 0..x.nrows() {
                let mut vals = x.row(i).to_vec();
                let (lo, hi) = group_range(&mut vals);
                let (s, z) = params_from_range(lo, hi, bits);
                scales.push(s);
                zero_points.push(z);
            }
        }
    }
    Ok(QuantParams { bits, granularity, scales, zero_points })
}

/// Parameters for a pre-calibrated per-tensor range.
pub fn qparams_from_range(lo: f64, hi: f64, bits: u32) -> QuantParams {
    let (s, z) = params_from_range(lo, hi, bits);
    QuantParams {
        bits,
        granularity: Granularity::PerTensor,
        scales: vec![s],
        zero_points: vec![z],
    }
}

#[inline]
fn quantize_value(x: f64, s: f64, z: f64, levels: f64) -> f64 {
    let q = (x / s + z).round_ties_even().clamp(0.0, levels);
    (q - z) * s
}

/// Quantize-then-dequantize simulation.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    let levels = ((1u64 << qp.bits) - 1) as f64;
    let check = |expected: usize| -> Result<()> {
        if qp.scales.len() != expected {
            return Err(MqError::shape(
                "quant params group count",
                &[qp.scales.len()],
                &[expected],
            ));
        }
        Ok(())
    };
    let mut out = x.clone();
    match qp.granularity {
        Granularity::PerTensor => {
            check(1)?;
            let (s, z) = (qp.scales[0], qp.zero_points[0]);
            for v in out.data_mut() {
                *v = quantize_value(*v, s, z, levels);
            }
        }
        Granularity::PerChannel => {
            check(x.ncols())?;
            let n = x.ncols();
            for row in out.data_mut().chunks_mut(n) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = quantize_value(*v, qp.scales[j], qp.zero_points[j], levels);
                }
            }
        }
        Granularity::PerToken => {
            check(x.nrows())?;
            let n = x.ncols();
            for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
                let (s, z) = (qp.scales[i], qp.zero_points[i]);
                for v in row.iter_mut() {
                    *v = quantize_value(*v, s, z, levels);
                }
            }
        }
    }
    Ok(out)
}

/// Derive parameters from the live tensor and quantize in one step.
pub fn dynamic_fake_quant(x: &Tensor, bits: u32, granularity: Granularity) -> Result<Tensor> {
    let qp = calc_qparams(x, bits, granularity)?;
    fake_quant(x, &qp)
}

/// Elementwise quantization-error summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantErrorReport {
    pub l1_total: f64,
    pub l1_mean: f64,
    pub max_err: f64,
    /// Equal-width bins over `[0, max_err]`.
    pub histogram: Vec<u64>,
}

/// Summarize `|x - x_hat|` with an `n_bins` histogram over `[0, max_err]`.
pub fn quant_error_report(x: &Tensor, x_hat: &Tensor, n_bins: usize) -> Result<QuantErrorReport> {
    if x.shape() != x_hat.shape() {
        return Err(MqError::shape("quant_error_report", x.shape(), x_hat.shape()));
    }
    let errs: Vec<f64> = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let l1_total: f64 = errs.iter().sum();
    let max_err = errs.iter().cloned().fold(0.0, f64::max);
    let mut histogram = vec![0u64; n_bins.max(1)];
    let nb = histogram.len();
    for &e in &errs {
        let bin = if max_err == 0.0 {
            0
        } else {
            (((e / max_err) * nb as f64) as usize).min(nb - 1)
        };
        histogram[bin] += 1;
    }
    Ok(QuantErrorReport {
        l1_total,
        l1_mean: l1_total / errs.len().max(1) as f64,
        max_err,
        histogram,
    })
}
