//! A faithful toy-scale selective state-space stack: gate/state projections,
//! depthwise causal convolution, the low-rank step-size module, the state
//! recurrence, the gated output path, and pre-norm residual wiring.
//!
//! Rewrites fused by the transform module live here as optional per-block
//! runtime hooks: a smoothed gate activation, an additive first-token
//! correction on the discretization exponent, and online Hadamard rotations
//! ahead of the output projection and the state mixing matmul.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{MqError, Result};
use crate::quant::{dynamic_fake_quant, fake_quant, qparams_from_range, Granularity};
use crate::rng::Xoshiro256PlusPlus;
use crate::rotation::{fwht_apply, hadamard_recipe};
use crate::scan::{pscan_parallel, pscan_sequential, ScanInputs, ScanOutput};
use crate::tensor::{matmul, Tensor};

pub const RMSNORM_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// activations

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) = ln(1 + e^x)`, returning `x` directly above 30 where the
/// correction term is below double precision.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `silu(x) = x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Smoothed gate activation: `x * sigmoid(s * x)`. With `s = 1` this is
/// exactly [`silu`]; dividing the incoming weight columns by `s` and routing
/// `s` here leaves the gated product unchanged.
pub fn s_silu(x: f64, s: f64) -> f64 {
    x * sigmoid(s * x)
}

/// Row-wise RMS normalization with scale `gamma`.
pub fn rmsnorm(x: &Tensor, gamma: &[f64]) -> Tensor {
    let n = x.ncols();
    debug_assert_eq!(gamma.len(), n);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gamma) {
            *v = *v * inv * g;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// taps

/// Named activation interfaces where statistics are collected and transforms
/// attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    /// Stream entering each block (pre-norm residual).
    ResidStream,
    /// Low-rank step-size interface between the down and up projections.
    LoraMid,
    /// Gate projection output, pre-activation.
    GateOut,
    /// State-path output after the skip term.
    SsmOut,
    /// Gated product entering the output projection (post online rotation).
    OutprojIn,
    /// Hidden states entering the state mixing matmul (post online rotation).
    MatmulH,
    /// Mixing vectors entering the state matmul.
    MatmulC,
    /// Driving term entering the scan.
    PscanIn,
    /// Hidden states leaving the scan.
    PscanOut,
}

impl Tap {
    pub const ALL: [Tap; 9] = [
        Tap::ResidStream,
        Tap::LoraMid,
        Tap::GateOut,
        Tap::SsmOut,
        Tap::OutprojIn,
        Tap::MatmulH,
        Tap::MatmulC,
        Tap::PscanIn,
        Tap::PscanOut,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Tap::ResidStream => "resid_stream",
            Tap::LoraMid => "lora_mid",
            Tap::GateOut => "gate_out",
            Tap::SsmOut => "ssm_out",
            Tap::OutprojIn => "outproj_in",
            Tap::MatmulH => "matmul_h",
            Tap::MatmulC => "matmul_c",
            Tap::PscanIn => "pscan_in",
            Tap::PscanOut => "pscan_out",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = MqError;
    fn from_str(s: &str) -> Result<Tap> {
        Tap::ALL
            .iter()
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| MqError::UnknownTap(s.to_string()))
    }
}

/// Rows captured at `(block, tap)` interfaces during a forward pass.
///
/// Confined to a single pass; merge across passes by reusing the recorder.
#[derive(Debug, Default)]
pub struct TapRecorder {
    bufs: BTreeMap<(usize, Tap), (usize, Vec<f64>)>,
}

impl TapRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, block: usize, tap: Tap, rows: &Tensor) {
        let ncols = rows.ncols();
        let entry = self.bufs.entry((block, tap)).or_insert_with(|| (ncols, Vec::new()));
        assert_eq!(entry.0, ncols, "tap {tap} column count changed");
        entry.1.extend_from_slice(rows.data());
    }

    /// Rows of one tap at one block, if recorded.
    pub fn block_matrix(&self, block: usize, tap: Tap) -> Option<Tensor> {
        self.bufs.get(&(block, tap)).map(|(ncols, data)| {
            Tensor::from_vec(vec![data.len() / ncols, *ncols], data.clone()).unwrap()
        })
    }

    /// Rows of one tap pooled over all blocks.
    pub fn pooled_matrix(&self, tap: Tap) -> Option<Tensor> {
        let mut ncols = None;
        let mut data = Vec::new();
        for ((_, t), (nc, buf)) in &self.bufs {
            if *t == tap {
                match ncols {
                    None => ncols = Some(*nc),
                    Some(c) => assert_eq!(c, *nc),
                }
                data.extend_from_slice(buf);
            }
        }
        ncols.map(|nc| Tensor::from_vec(vec![data.len() / nc, nc], data).unwrap())
    }

    pub fn blocks_for(&self, tap: Tap) -> Vec<usize> {
        self.bufs.keys().filter(|(_, t)| *t == tap).map(|(b, _)| *b).collect()
    }
}

// ---------------------------------------------------------------------------
// configuration and parameters

/// Dimensions and seeding for a toy stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
    pub n_blocks: usize,
    pub seed: u64,
    /// Fraction of inner channels whose gate columns / output-projection
    /// rows get scaled up to create outlier structure. 0 disables.
    pub outlier_frac: f64,
    pub outlier_gain: f64,
}

impl ModelConfig {
    pub fn new(
        d_model: usize,
        d_inner: usize,
        d_state: usize,
        d_conv: usize,
        dt_rank: usize,
        n_blocks: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            d_model,
            d_inner,
            d_state,
            d_conv,
            dt_rank,
            n_blocks,
            seed,
            outlier_frac: 0.0,
            outlier_gain: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("dt_rank", self.dt_rank),
        ] {
            if v == 0 {
                return Err(MqError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("d_model", self.d_model), ("d_inner", self.d_inner)] {
            if hadamard_recipe(v).is_err() {
                return Err(MqError::InvalidConfig(format!(
                    "{name} = {v} must factor as 2^k * b with b in {{1, 12, 20}}"
                )));
            }
        }
        if !self.d_state.is_power_of_two() {
            return Err(MqError::InvalidConfig(format!(
                "d_state = {} must be a power of two",
                self.d_state
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_frac) {
            return Err(MqError::InvalidConfig("outlier_frac must be in [0, 1]".into()));
        }
        if self.outlier_gain <= 0.0 {
            return Err(MqError::InvalidConfig("outlier_gain must be positive".into()));
        }
        Ok(())
    }
}

/// All parameters of one block plus the runtime hooks fused transforms use.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams {
    /// d_model x d_inner.
    pub w_gate: Tensor,
    /// d_model x d_inner.
    pub w_state: Tensor,
    /// d_inner x d_conv depthwise causal kernel.
    pub conv_w: Tensor,
    pub conv_b: Vec<f64>,
    /// d_inner x d_state.
    pub w_b: Tensor,
    /// d_inner x d_state.
    pub w_c: Tensor,
    /// d_inner x dt_rank.
    pub w_dt_down: Tensor,
    /// dt_rank x d_inner.
    pub w_dt_up: Tensor,
    pub dt_bias: Vec<f64>,
    /// d_inner x d_state, all entries negative.
    pub a: Tensor,
    /// d_inner skip vector.
    pub d_skip: Vec<f64>,
    /// d_model RMS norm scale.
    pub norm_gamma: Vec<f64>,
    /// d_inner x d_model output projection.
    pub w_out: Tensor,

    /// Smoothing vector routed through the gate activation (length d_inner).
    pub gate_smooth: Option<Vec<f64>>,
    /// Additive first-token correction on the discretization exponent
    /// (length d_state).
    pub delta1_corr: Option<Vec<f64>>,
    /// Online Hadamard ahead of the output projection.
    pub had_outproj: bool,
    /// Online Hadamard on hidden states ahead of the state matmul.
    pub had_matmul: bool,
}

/// Which scan evaluation the forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScanKind {
    Sequential,
    Parallel,
}

/// Activation fake-quantization attached to a model by the quantize step.
#[derive(Debug, Clone, PartialEq)]
pub enum ActQuant {
    /// Ranges frozen from calibration; per-tensor per tap.
    Static { bits: u32, ranges: BTreeMap<Tap, (f64, f64)> },
    /// Ranges recomputed per invocation.
    Dynamic { bits: u32, granularity: Granularity },
}

/// The quantized-activation interfaces.
pub const ACT_QUANT_TAPS: [Tap; 5] =
    [Tap::ResidStream, Tap::LoraMid, Tap::OutprojIn, Tap::MatmulH, Tap::MatmulC];

/// A full stack: blocks, final norm, and the explicit stream adapters that
/// carry a fused stream rotation at toy scale (a full-size model would absorb
/// them into embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct MambaModel {
    pub config: ModelConfig,
    pub blocks: Vec<MambaBlockParams>,
    pub final_gamma: Vec<f64>,
    pub input_adapter: Option<Tensor>,
    pub output_adapter: Option<Tensor>,
    pub scan_kind: ScanKind,
    pub act_quant: Option<ActQuant>,
    /// Rewrites applied so far, in application order.
    pub provenance: Vec<String>,
}

// ---------------------------------------------------------------------------
// init

fn uniform_tensor(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(vec![rows, cols], data).unwrap()
}

/// Deterministic model construction.
///
/// Projection weights are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); the
/// state decay matrix is `-exp(u)` with `u ~ uniform(0, ln 16)` so every
/// entry is negative; skip and norm scales start at one. The optional
/// outlier knob scales a deterministic channel set of gate columns and
/// output-projection rows.
pub fn init_model(cfg: &ModelConfig) -> Result<MambaModel> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let (d, e, n, k, r) = (cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank);
    let ln16 = 16.0f64.ln();

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for _ in 0..cfg.n_blocks {
        let w_gate = uniform_tensor(&mut rng, d, e, 1.0 / (d as f64).sqrt());
        let w_state = uniform_tensor(&mut rng, d, e, 1.0 / (d as f64).sqrt());
        let conv_w = uniform_tensor(&mut rng, e, k, 1.0 / (k as f64).sqrt());
        let conv_b: Vec<f64> = (0..e)
            .map(|_| rng.uniform(-1.0 / (k as f64).sqrt(), 1.0 / (k as f64).sqrt()))
            .collect();
        let w_b = uniform_tensor(&mut rng, e, n, 1.0 / (e as f64).sqrt());
        let w_c = uniform_tensor(&mut rng, e, n, 1.0 / (e as f64).sqrt());
        let w_dt_down = uniform_tensor(&mut rng, e, r, 1.0 / (e as f64).sqrt());
        let w_dt_up = uniform_tensor(&mut rng, r, e, 1.0 / (r as f64).sqrt());
        let dt_bias: Vec<f64> = (0..e)
            .map(|_| rng.uniform(-1.0 / (r as f64).sqrt(), 1.0 / (r as f64).sqrt()))
            .collect();
        let a_data: Vec<f64> = (0..e * n).map(|_| -(rng.uniform(0.0, ln16).exp())).collect();
        let a = Tensor::from_vec(vec![e, n], a_data).unwrap();
        let w_out = uniform_tensor(&mut rng, e, d, 1.0 / (e as f64).sqrt());
        blocks.push(MambaBlockParams {
            w_gate,
            w_state,
            conv_w,
            conv_b,
            w_b,
            w_c,
            w_dt_down,
            w_dt_up,
            dt_bias,
            a,
            d_skip: vec![1.0; e],
            norm_gamma: vec![1.0; d],
            w_out,
            gate_smooth: None,
            delta1_corr: None,
            had_outproj: false,
            had_matmul: false,
        });
    }

    let mut model = MambaModel {
        config: *cfg,
        blocks,
        final_gamma: vec![1.0; d],
        input_adapter: None,
        output_adapter: None,
        scan_kind: ScanKind::Parallel,
        act_quant: None,
        provenance: Vec::new(),
    };

    if cfg.outlier_frac > 0.0 && cfg.outlier_gain != 1.0 {
        let channels = outlier_channels(cfg);
        for b in &mut model.blocks {
            for &ch in &channels {
                for row in 0..d {
                    let v = b.w_gate.at(row, ch) * cfg.outlier_gain;
                    b.w_gate.set(row, ch, v);
                }
                for col in 0..d {
                    let v = b.w_out.at(ch, col) * cfg.outlier_gain;
                    b.w_out.set(ch, col, v);
                }
            }
        }
    }
    Ok(model)
}

/// The deterministic channel set the outlier knob scales. Drawn from a
/// stream independent of the weight stream so the base weights are identical
/// with and without the knob.
pub fn outlier_channels(cfg: &ModelConfig) -> Vec<usize> {
    let count = ((cfg.outlier_frac * cfg.d_inner as f64).round() as usize).min(cfg.d_inner);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x6f75_746c_6965_7273);
    let mut idx: Vec<usize> = (0..cfg.d_inner).collect();
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx.into_iter().take(count).collect();
    chosen.sort_unstable();
    chosen
}

// ---------------------------------------------------------------------------
// forward

struct BlockCtx<'a> {
    index: usize,
    recorder: Option<&'a mut TapRecorder>,
    h0: Option<&'a Tensor>,
    act_quant: Option<&'a ActQuant>,
    scan_kind: ScanKind,
}

fn act_quantize(aq: Option<&ActQuant>, tap: Tap, x: &Tensor) -> Result<Tensor> {
    match aq {
        None => Ok(x.clone()),
        Some(ActQuant::Static { bits, ranges }) => match ranges.get(&tap) {
            Some(&(lo, hi)) => fake_quant(x, &qparams_from_range(lo, hi, *bits)),
            None => Ok(x.clone()),
        },
        Some(ActQuant::Dynamic { bits, granularity }) => dynamic_fake_quant(x, *bits, *granularity),
    }
}

/// Depthwise causal convolution along time with left-zero padding.
fn causal_dwconv(u: &Tensor, w: &Tensor, bias: &[f64]) -> Tensor {
    let (t, e) = (u.nrows(), u.ncols());
    let k = w.ncols();
    let mut out = Tensor::zeros(vec![t, e]);
    for ti in 0..t {
        for ei in 0..e {
            let mut acc = bias[ei];
            for ki in 0..k {
                let tau = ti as isize + ki as isize - (k as isize - 1);
                if tau >= 0 {
                    acc += w.at(ei, ki) * u.at(tau as usize, ei);
                }
            }
            out.set(ti, ei, acc);
        }
    }
    out
}

/// Apply the normalized Hadamard transform to the state axis of a
/// `[T, E, N]` tensor.
fn fwht_state_axis(h: &Tensor) -> Result<Tensor> {
    let shape = h.shape().to_vec();
    let n = shape[2];
    let rows = shape[0] * shape[1];
    let flat = Tensor::from_vec(vec![rows, n], h.data().to_vec())?;
    let rotated = fwht_apply(&flat, true)?;
    Tensor::from_vec(shape, rotated.into_data())
}

fn block_forward_impl(p: &MambaBlockParams, x: &Tensor, ctx: BlockCtx<'_>) -> Result<Tensor> {
    let BlockCtx { index, mut recorder, h0, act_quant: aq, scan_kind } = ctx;
    let t = x.nrows();
    let e = p.w_gate.ncols();
    let n = p.w_b.ncols();

    let xn = rmsnorm(x, &p.norm_gamma);

    // gate path (pre-activation tap)
    let gate_pre = matmul(&xn, &p.w_gate)?;
    if let Some(rec) = recorder.as_deref_mut() {
        rec.record(index, Tap::GateOut, &gate_pre);
    }

    // state path
    let u = matmul(&xn, &p.w_state)?;
    let xprime = causal_dwconv(&u, &p.conv_w, &p.conv_b).map(silu);

    // step sizes through the low-rank module
    let dt_mid = matmul(&xprime, &p.w_dt_down)?;
    if let Some(rec) = recorder.as_deref_mut() {
        rec.record(index, Tap::LoraMid, &dt_mid);
    }
    let dt_mid_q = act_quantize(aq, Tap::LoraMid, &dt_mid)?;
    let mut dt = matmul(&dt_mid_q, &p.w_dt_up)?;
    for row in dt.data_mut().chunks_mut(e) {
        for (v, b) in row.iter_mut().zip(&p.dt_bias) {
            *v = softplus(*v + b);
        }
    }
    let delta = dt;

    let b_mat = matmul(&xprime, &p.w_b)?;
    let c_mat = matmul(&xprime, &p.w_c)?;

    // discretization; the first-token exponent takes the fused correction
    let mut a_bar = Tensor::zeros(vec![t, e, n]);
    let mut b_bar_x = Tensor::zeros(vec![t, e, n]);
    {
        let ad = p.a.data();
        let abar = a_bar.data_mut();
        let bbar = b_bar_x.data_mut();
        for ti in 0..t {
            for ei in 0..e {
                let dte = delta.at(ti, ei);
                let xe = xprime.at(ti, ei);
                let base = (ti * e + ei) * n;
                for ni in 0..n {
                    let mut expo = ad[ei * n + ni] * dte;
                    if ti == 0 {
                        if let Some(corr) = &p.delta1_corr {
                            expo += corr[ni];
                        }
                    }
                    abar[base + ni] = expo.exp();
                    bbar[base + ni] = b_mat.at(ti, ni) * dte * xe;
                }
            }
        }
    }

    let h0_t = match h0 {
        Some(h) => h.clone(),
        None => Tensor::zeros(vec![e, n]),
    };
    let inputs = ScanInputs { a_bar, b_bar_x, c_bar: c_mat.clone(), h0: h0_t };
    if let Some(rec) = recorder.as_deref_mut() {
        let flat = Tensor::from_vec(vec![t * e, n], inputs.b_bar_x.data().to_vec())?;
        rec.record(index, Tap::PscanIn, &flat);
    }
    let ScanOutput { h, .. } = match scan_kind {
        ScanKind::Sequential => pscan_sequential(&inputs)?,
        ScanKind::Parallel => pscan_parallel(&inputs)?,
    };
    if let Some(rec) = recorder.as_deref_mut() {
        let flat = Tensor::from_vec(vec![t * e, n], h.data().to_vec())?;
        rec.record(index, Tap::PscanOut, &flat);
    }

    // state mixing matmul, with the optional online rotation on h
    let h_used = if p.had_matmul { fwht_state_axis(&h)? } else { h };
    let h_flat = Tensor::from_vec(vec![t * e, n], h_used.data().to_vec())?;
    if let Some(rec) = recorder.as_deref_mut() {
        rec.record(index, Tap::MatmulH, &h_flat);
    }
    if let Some(rec) = recorder.as_deref_mut() {
        rec.record(index, Tap::MatmulC, &c_mat);
    }
    let h_q = act_quantize(aq, Tap::MatmulH, &h_flat)?;
    let c_q = act_quantize(aq, Tap::MatmulC, &c_mat)?;
    let mut y_ssm = Tensor::zeros(vec![t, e]);
    for ti in 0..t {
        let crow = c_q.row(ti);
        for ei in 0..e {
            let hrow = h_q.row(ti * e + ei);
            let mut acc = 0.0;
            for ni in 0..n {
                acc += crow[ni] * hrow[ni];
            }
            y_ssm.set(ti, ei, acc + p.d_skip[ei] * xprime.at(ti, ei));
        }
    }
    if let Some(rec) = recorder.as_deref_mut() {
        rec.record(index, Tap::SsmOut, &y_ssm);
    }

    // gate and output projection
    let mut gated = Tensor::zeros(vec![t, e]);
    for ti in 0..t {
        for ei in 0..e {
            let g = gate_pre.at(ti, ei);
            let z = match &p.gate_smooth {
                Some(s) => s_silu(g, s[ei]),
                None => silu(g),
            };
            gated.set(ti, ei, y_ssm.at(ti, ei) * z);
        }
    }
    let outproj_in = if p.had_outproj { fwht_apply(&gated, true)? } else { gated };
    if let Some(rec) = recorder {
        rec.record(index, Tap::OutprojIn, &outproj_in);
    }
    let outproj_q = act_quantize(aq, Tap::OutprojIn, &outproj_in)?;
    matmul(&outproj_q, &p.w_out)
}

/// Run a single block on a `[T, d_model]` slice with zero initial state.
pub fn block_forward(
    p: &MambaBlockParams,
    x: &Tensor,
    taps: Option<&mut TapRecorder>,
) -> Result<Tensor> {
    block_forward_with_state(p, x, None, taps)
}

/// Run a single block with an explicit initial hidden state.
pub fn block_forward_with_state(
    p: &MambaBlockParams,
    x: &Tensor,
    h0: Option<&Tensor>,
    taps: Option<&mut TapRecorder>,
) -> Result<Tensor> {
    block_forward_impl(
        p,
        x,
        BlockCtx {
            index: 0,
            recorder: taps,
            h0,
            act_quant: None,
            scan_kind: ScanKind::Sequential,
        },
    )
}

impl MambaModel {
    /// Pre-norm residual stack: `x <- x + block(norm(x))`, a final norm, and
    /// the optional stream adapters on either end.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, None, None)
    }

    /// Forward pass recording every tap.
    pub fn forward_traced(&self, x: &Tensor, recorder: &mut TapRecorder) -> Result<Tensor> {
        self.forward_with(x, None, Some(recorder))
    }

    /// Forward pass with optional per-block initial states and tap recording.
    pub fn forward_with(
        &self,
        x: &Tensor,
        h0: Option<&[Tensor]>,
        mut recorder: Option<&mut TapRecorder>,
    ) -> Result<Tensor> {
        if !x.is_matrix() || x.ncols() != self.config.d_model {
            return Err(MqError::shape(
                "model input",
                x.shape(),
                &[self.config.d_model],
            ));
        }
        if !x.all_finite() {
            return Err(MqError::InvalidConfig("model input contains non-finite values".into()));
        }
        if let Some(states) = h0 {
            if states.len() != self.blocks.len() {
                return Err(MqError::shape(
                    "initial states per block",
                    &[states.len()],
                    &[self.blocks.len()],
                ));
            }
        }
        let mut cur = match &self.input_adapter {
            Some(ain) => matmul(x, ain)?,
            None => x.clone(),
        };
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(rec) = recorder.as_deref_mut() {
                rec.record(i, Tap::ResidStream, &cur);
            }
            let block_in = act_quantize(self.act_quant.as_ref(), Tap::ResidStream, &cur)?;
            let out = block_forward_impl(
                block,
                &block_in,
                BlockCtx {
                    index: i,
                    recorder: recorder.as_deref_mut(),
                    h0: h0.map(|s| &s[i]),
                    act_quant: self.act_quant.as_ref(),
                    scan_kind: self.scan_kind,
                },
            )?;
            for (c, o) in cur.data_mut().iter_mut().zip(out.data()) {
                *c += o;
            }
        }
        let mut final_out = rmsnorm(&cur, &self.final_gamma);
        if let Some(aout) = &self.output_adapter {
            final_out = matmul(&final_out, aout)?;
        }
        Ok(final_out)
    }
}
