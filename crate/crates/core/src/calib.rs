//! Calibration statistics: streaming per-tap accumulators (covariance,
//! range, quantiles), smoothing-vector derivation, and the holdout
//! generalization report.

use std::collections::BTreeMap;

use crate::error::{MqError, Result};
use crate::model::{MambaModel, Tap, TapRecorder};
use crate::rotation::{rotated_channel_variances, KltRotation};
use crate::tensor::{quantile_sorted, spread_ratio, Tensor};

/// Quantile grid stored per tap; dense enough to interpolate clip ranges.
pub const QUANTILE_GRID: [f64; 13] = [
    0.0, 0.0001, 0.001, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 0.999, 0.9999, 1.0,
];

/// Row cap for the retained quantile sample. Exceeding it halves the sample
/// deterministically (every other row), so quantiles degrade to a stride
/// subsample on very large runs while moments and ranges stay exact.
const SAMPLE_ROW_CAP: usize = 1 << 17;

/// Streaming accumulator for one tap: exact sums for mean/covariance, exact
/// per-channel ranges, and a deterministic row sample for quantiles.
#[derive(Debug, Clone)]
pub struct TapAccumulator {
    pub ncols: usize,
    pub count: u64,
    pub row_sum: Vec<f64>,
    /// Sum of outer products, row-major `ncols x ncols`.
    pub cov_sum: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    sample: Vec<f64>,
    sample_stride: u64,
    cursor: u64,
    /// Set when a finalized accumulator was reloaded from disk and the raw
    /// sample is gone.
    frozen_quantiles: Option<FrozenQuantiles>,
}

#[derive(Debug, Clone)]
pub struct FrozenQuantiles {
    /// `QUANTILE_GRID.len() x ncols`.
    pub per_channel: Vec<f64>,
    /// `QUANTILE_GRID.len()`, pooled over all channels.
    pub pooled: Vec<f64>,
}

impl TapAccumulator {
    pub fn new(ncols: usize) -> Self {
        TapAccumulator {
            ncols,
            count: 0,
            row_sum: vec![0.0; ncols],
            cov_sum: vec![0.0; ncols * ncols],
            min: vec![f64::INFINITY; ncols],
            max: vec![f64::NEG_INFINITY; ncols],
            sample: Vec::new(),
            sample_stride: 1,
            cursor: 0,
            frozen_quantiles: None,
        }
    }

    pub fn push_rows(&mut self, rows: &Tensor) {
        let m = self.ncols;
        assert_eq!(rows.ncols(), m, "tap channel count changed");
        for row in rows.data().chunks(m) {
            self.count += 1;
            for (j, &v) in row.iter().enumerate() {
                self.row_sum[j] += v;
                self.min[j] = self.min[j].min(v);
                self.max[j] = self.max[j].max(v);
            }
            for i in 0..m {
                let vi = row[i];
                let base = i * m;
                for (j, &vj) in row.iter().enumerate() {
                    self.cov_sum[base + j] += vi * vj;
                }
            }
            if self.cursor.is_multiple_of(self.sample_stride) {
                self.sample.extend_from_slice(row);
                if self.sample.len() / m > SAMPLE_ROW_CAP {
                    self.decimate();
                }
            }
            self.cursor += 1;
        }
    }

    fn decimate(&mut self) {
        let m = self.ncols;
        let rows = self.sample.len() / m;
        let mut kept = Vec::with_capacity(self.sample.len() / 2 + m);
        for r in (0..rows).step_by(2) {
            kept.extend_from_slice(&self.sample[r * m..(r + 1) * m]);
        }
        self.sample = kept;
        self.sample_stride *= 2;
    }

    /// Associative merge of two accumulators over disjoint data.
    pub fn merge(&mut self, other: &TapAccumulator) {
        assert_eq!(self.ncols, other.ncols);
        self.count += other.count;
        for (a, b) in self.row_sum.iter_mut().zip(&other.row_sum) {
            *a += b;
        }
        for (a, b) in self.cov_sum.iter_mut().zip(&other.cov_sum) {
            *a += b;
        }
        for (a, b) in self.min.iter_mut().zip(&other.min) {
            *a = a.min(*b);
        }
        for (a, b) in self.max.iter_mut().zip(&other.max) {
            *a = a.max(*b);
        }
        self.sample.extend_from_slice(&other.sample);
        self.sample_stride = self.sample_stride.max(other.sample_stride);
        while self.sample.len() / self.ncols > SAMPLE_ROW_CAP {
            self.decimate();
        }
        self.frozen_quantiles = None;
    }

    pub fn mean(&self) -> Vec<f64> {
        self.row_sum.iter().map(|&s| s / self.count as f64).collect()
    }

    /// Centered covariance `(sum xx^T - n mu mu^T) / (n - 1)`.
    pub fn covariance(&self) -> Result<Tensor> {
        let n = self.count;
        if n < 2 {
            return Err(MqError::TooFewRows { what: "finalized covariance", rows: n as usize });
        }
        let m = self.ncols;
        let mu = self.mean();
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                data[i * m + j] =
                    (self.cov_sum[i * m + j] - n as f64 * mu[i] * mu[j]) / (n - 1) as f64;
            }
        }
        Tensor::from_vec(vec![m, m], data)
    }

    /// Per-channel unbiased variances from the moment sums.
    pub fn variances(&self) -> Result<Vec<f64>> {
        let cov = self.covariance()?;
        Ok((0..self.ncols).map(|i| cov.at(i, i)).collect())
    }

    pub fn absmax(&self) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| lo.abs().max(hi.abs()))
            .collect()
    }

    /// Pooled min/max over all channels (static per-tensor range).
    pub fn pooled_range(&self) -> (f64, f64) {
        let lo = self.min.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.max.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Pooled range clipped to the symmetric quantile `q` (1.0 = exact).
    pub fn clipped_range(&self, q: f64) -> (f64, f64) {
        if q >= 1.0 {
            return self.pooled_range();
        }
        let pooled = self.pooled_quantiles();
        let interp = |target: f64| -> f64 {
            // piecewise-linear in the stored grid
            let g = &QUANTILE_GRID;
            let mut k = 0;
            while k + 1 < g.len() && g[k + 1] < target {
                k += 1;
            }
            if k + 1 >= g.len() {
                return pooled[g.len() - 1];
            }
            let w = (target - g[k]) / (g[k + 1] - g[k]);
            pooled[k] + w * (pooled[k + 1] - pooled[k])
        };
        (interp(1.0 - q), interp(q))
    }

    /// Per-channel values at [`QUANTILE_GRID`], flattened grid-major.
    pub fn channel_quantiles(&self) -> Vec<f64> {
        if let Some(fz) = &self.frozen_quantiles {
            return fz.per_channel.clone();
        }
        let m = self.ncols;
        let rows = self.sample.len() / m;
        let mut out = vec![0.0; QUANTILE_GRID.len() * m];
        let mut col = Vec::with_capacity(rows);
        for j in 0..m {
            col.clear();
            for r in 0..rows {
                col.push(self.sample[r * m + j]);
            }
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (qi, &q) in QUANTILE_GRID.iter().enumerate() {
                out[qi * m + j] = if col.is_empty() { 0.0 } else { quantile_sorted(&col, q) };
            }
        }
        out
    }

    /// Pooled values at [`QUANTILE_GRID`].
    pub fn pooled_quantiles(&self) -> Vec<f64> {
        if let Some(fz) = &self.frozen_quantiles {
            return fz.pooled.clone();
        }
        let mut all = self.sample.clone();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        QUANTILE_GRID
            .iter()
            .map(|&q| if all.is_empty() { 0.0 } else { quantile_sorted(&all, q) })
            .collect()
    }

    /// Rebuild a finalized accumulator from serialized pieces (no sample).
    pub fn from_parts(
        ncols: usize,
        count: u64,
        row_sum: Vec<f64>,
        cov_sum: Vec<f64>,
        min: Vec<f64>,
        max: Vec<f64>,
        quantiles: FrozenQuantiles,
    ) -> Self {
        TapAccumulator {
            ncols,
            count,
            row_sum,
            cov_sum,
            min,
            max,
            sample: Vec::new(),
            sample_stride: 1,
            cursor: 0,
            frozen_quantiles: Some(quantiles),
        }
    }
}

/// Per-tap accumulated statistics for one model + calibration set.
#[derive(Debug, Clone, Default)]
pub struct CalibStats {
    pub taps: BTreeMap<Tap, TapAccumulator>,
}

impl CalibStats {
    pub fn tap(&self, tap: Tap) -> Result<&TapAccumulator> {
        self.taps.get(&tap).ok_or_else(|| MqError::MissingTap(tap.to_string()))
    }

    /// Merge statistics accumulated over disjoint batches.
    pub fn merge(&mut self, other: &CalibStats) {
        for (tap, acc) in &other.taps {
            match self.taps.get_mut(tap) {
                Some(mine) => mine.merge(acc),
                None => {
                    self.taps.insert(*tap, acc.clone());
                }
            }
        }
    }
}

/// Run calibration batches through the model and accumulate tap statistics.
///
/// `calib` is `[batch, tokens, d_model]`. Per-block recordings pool into a
/// single accumulator per tap: the residual stream shares one rotation
/// everywhere it flows, and the smoothing vectors are likewise shared.
pub fn collect_stats(model: &MambaModel, calib: &Tensor, taps: &[Tap]) -> Result<CalibStats> {
    let shape = calib.shape();
    if shape.len() != 3 || shape[2] != model.config.d_model {
        return Err(MqError::shape(
            "calibration data must be [batch, tokens, d_model]",
            shape,
            &[model.config.d_model],
        ));
    }
    if !calib.all_finite() {
        return Err(MqError::InvalidConfig("calibration data contains non-finite values".into()));
    }
    let (batch, tokens, d) = (shape[0], shape[1], shape[2]);
    let mut stats = CalibStats::default();
    for b in 0..batch {
        let start = b * tokens * d;
        let seq = Tensor::from_vec(
            vec![tokens, d],
            calib.data()[start..start + tokens * d].to_vec(),
        )?;
        let mut rec = TapRecorder::new();
        model.forward_traced(&seq, &mut rec)?;
        for &tap in taps {
            if let Some(rows) = rec.pooled_matrix(tap) {
                stats
                    .taps
                    .entry(tap)
                    .or_insert_with(|| TapAccumulator::new(rows.ncols()))
                    .push_rows(&rows);
            } else {
                return Err(MqError::MissingTap(tap.to_string()));
            }
        }
    }
    Ok(stats)
}

/// Positive per-channel scaling that equalizes channel standard deviations.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingVector {
    pub tap: String,
    pub s: Vec<f64>,
    pub clamp: (f64, f64),
}

pub const SMOOTH_EPS: f64 = 1e-10;
pub const SMOOTH_CLAMP: (f64, f64) = (1e-5, 1e5);

/// `s_j = sqrt(var_j + eps) / geomean_k sqrt(var_k + eps)`, clamped.
///
/// Dividing channel `j` by `s_j` moves every channel standard deviation to
/// the geometric mean, and the geometric mean of `s` itself is one so the
/// overall scale is untouched.
pub fn smoothing_factors(stats: &CalibStats, tap: Tap) -> Result<SmoothingVector> {
    let acc = stats.tap(tap)?;
    let vars = acc.variances()?;
    let stds: Vec<f64> = vars.iter().map(|&v| (v + SMOOTH_EPS).sqrt()).collect();
    let log_mean = stds.iter().map(|s| s.ln()).sum::<f64>() / stds.len() as f64;
    let geomean = log_mean.exp();
    let s: Vec<f64> = stds
        .iter()
        .map(|&sd| (sd / geomean).clamp(SMOOTH_CLAMP.0, SMOOTH_CLAMP.1))
        .collect();
    for (i, &v) in s.iter().enumerate() {
        if !v.is_finite() || v <= 0.0 {
            return Err(MqError::NonPositive { what: "smoothing factor", index: i, value: v });
        }
    }
    Ok(SmoothingVector { tap: tap.to_string(), s, clamp: SMOOTH_CLAMP })
}

/// Variance and absmax spreads at one tap under three rotations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HoldoutTapReport {
    pub tap: String,
    pub variance_spread_raw: f64,
    pub variance_spread_hadamard: f64,
    pub variance_spread_enhanced: f64,
    pub absmax_spread_raw: f64,
    pub absmax_spread_hadamard: f64,
    pub absmax_spread_enhanced: f64,
    pub rotation_orthogonality_residual: f64,
}

/// Re-measure rotation quality on held-out data.
///
/// Rotations are the ones built from earlier calibration; the report has no
/// pass/fail threshold by design (the quantitative bar for generalization is
/// a judgement call left to the reader).
pub fn holdout_generalization_report(
    model: &MambaModel,
    rotations: &BTreeMap<Tap, KltRotation>,
    holdout: &Tensor,
) -> Result<Vec<HoldoutTapReport>> {
    let taps: Vec<Tap> = rotations.keys().copied().collect();
    let stats = collect_stats(model, holdout, &taps)?;
    let mut out = Vec::new();
    for (&tap, rot) in rotations {
        let acc = stats.tap(tap)?;
        // rebuild the holdout rows from a fresh traced pass to measure
        // absmax after rotation (the accumulator only has raw ranges)
        let shape = holdout.shape();
        let (batch, tokens, d) = (shape[0], shape[1], shape[2]);
        let mut rows_all: Option<Tensor> = None;
        for b in 0..batch {
            let start = b * tokens * d;
            let seq = Tensor::from_vec(
                vec![tokens, d],
                holdout.data()[start..start + tokens * d].to_vec(),
            )?;
            let mut rec = TapRecorder::new();
            model.forward_traced(&seq, &mut rec)?;
            let rows = rec.pooled_matrix(tap).ok_or_else(|| MqError::MissingTap(tap.to_string()))?;
            rows_all = Some(match rows_all {
                None => rows,
                Some(prev) => {
                    let mut data = prev.into_data();
                    data.extend_from_slice(rows.data());
                    Tensor::from_vec(vec![data.len() / rows.ncols(), rows.ncols()], data)?
                }
            });
        }
        let rows = rows_all.unwrap();
        let var_raw = acc.variances()?;
        let rv_h = rotated_channel_variances(&rows, rot.hadamard.matrix())?;
        let rv_k = rotated_channel_variances(&rows, &rot.h_k)?;
        let absmax_of = |t: &Tensor| -> Vec<f64> {
            (0..t.ncols())
                .map(|j| (0..t.nrows()).map(|i| t.at(i, j).abs()).fold(0.0, f64::max))
                .collect()
        };
        let rot_h = crate::tensor::matmul(&rows, rot.hadamard.matrix())?;
        let rot_k = crate::tensor::matmul(&rows, &rot.h_k)?;
        out.push(HoldoutTapReport {
            tap: tap.to_string(),
            variance_spread_raw: spread_ratio(&var_raw),
            variance_spread_hadamard: spread_ratio(&rv_h.variances),
            variance_spread_enhanced: spread_ratio(&rv_k.variances),
            absmax_spread_raw: spread_ratio(&acc.absmax()),
            absmax_spread_hadamard: spread_ratio(&absmax_of(&rot_h)),
            absmax_spread_enhanced: spread_ratio(&absmax_of(&rot_k)),
            rotation_orthogonality_residual: rv_k.orthogonality_residual,
        });
    }
    Ok(out)
}
