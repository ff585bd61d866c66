//! On-disk formats: the tensor container (checkpoints, calibration
//! statistics) and the raw calibration-data file, plus the codecs between
//! containers and in-memory types.
//!
//! Container layout, all little-endian: magic `MQCK`, version u32, entry
//! count u32, then per entry {name: u16 length + UTF-8, dtype u8 (0 = f32,
//! 1 = f64), rank u8, dims u32 x rank, payload offset u64}, then the packed
//! payload. Offsets are relative to the payload start. Writers emit entries
//! sorted by name and pack the payload in the same order, so output bytes
//! are deterministic. Model weights are stored f32; rotation matrices,
//! fused hooks, and calibration statistics are stored f64 because they feed
//! high-precision transforms.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::calib::{CalibStats, FrozenQuantiles, TapAccumulator, QUANTILE_GRID};
use crate::error::{FormatError, MqError, Result};
use crate::model::{ActQuant, MambaBlockParams, MambaModel, ModelConfig, ScanKind, Tap};
use crate::quant::Granularity;
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"MQCK";
pub const CALIB_MAGIC: &[u8; 4] = b"MQCD";
pub const CONTAINER_VERSION: u32 = 1;
pub const CALIB_VERSION: u32 = 1;

/// Storage precision of one entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(c: u8, path: &str, name: &str) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(MqError::format(
                path,
                FormatError::BadEntry {
                    name: name.to_string(),
                    reason: format!("unknown dtype code {other}"),
                },
            )),
        }
    }
}

/// One named tensor in a container (values widened to f64 in memory).
#[derive(Debug, Clone)]
pub struct Entry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn f32(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Entry { dtype: DType::F32, shape, values }
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Entry { dtype: DType::F64, shape, values }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.shape.clone(), self.values.clone())
    }
}

/// Write a container atomically (temp file + rename), entries sorted by name.
pub fn write_container(path: &Path, entries: &BTreeMap<String, Entry>) -> Result<()> {
    let pstr = path.display().to_string();
    let mut table = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, e) in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.values.len() {
            return Err(MqError::shape("container entry shape", &e.shape, &[e.values.len()]));
        }
        let offset = payload.len() as u64;
        match e.dtype {
            DType::F32 => {
                for &v in &e.values {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &e.values {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let name_bytes = name.as_bytes();
        table.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        table.extend_from_slice(name_bytes);
        table.push(e.dtype.code());
        table.push(e.shape.len() as u8);
        for &d in &e.shape {
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        table.extend_from_slice(&offset.to_le_bytes());
    }
    let mut bytes = Vec::with_capacity(12 + table.len() + payload.len());
    bytes.extend_from_slice(CONTAINER_MAGIC);
    bytes.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&table);
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes).map_err(|e| MqError::io(&pstr, e))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MqError::format(
                self.path,
                FormatError::TruncatedPayload {
                    needed: (self.pos + n) as u64,
                    have: self.bytes.len() as u64,
                },
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read and fully validate a container.
///
/// Rejected corruption classes: bad magic, version mismatch, truncated
/// payload, overlapping entries, duplicate names; non-finite payload values
/// are also refused.
pub fn read_container(path: &Path) -> Result<BTreeMap<String, Entry>> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| MqError::io(&pstr, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: &pstr };
    let magic = cur.take(4)?;
    if magic != CONTAINER_MAGIC {
        return Err(MqError::format(&pstr, FormatError::BadMagic { expected: "MQCK" }));
    }
    let version = cur.u32()?;
    if version != CONTAINER_VERSION {
        return Err(MqError::format(
            &pstr,
            FormatError::VersionMismatch { expected: CONTAINER_VERSION, found: version },
        ));
    }
    let count = cur.u32()? as usize;
    let mut meta: Vec<(String, DType, Vec<usize>, u64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| {
            MqError::format(
                &pstr,
                FormatError::BadEntry { name: "<invalid utf8>".into(), reason: "name".into() },
            )
        })?;
        let dtype = DType::from_code(cur.u8()?, &pstr, &name)?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let offset = cur.u64()?;
        meta.push((name, dtype, shape, offset));
    }
    let payload_start = cur.pos;
    let payload_len = (bytes.len() - payload_start) as u64;

    // duplicate names
    for i in 1..meta.len() {
        for j in 0..i {
            if meta[i].0 == meta[j].0 {
                return Err(MqError::format(
                    &pstr,
                    FormatError::DuplicateName(meta[i].0.clone()),
                ));
            }
        }
    }
    // spans in bounds and non-overlapping
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(meta.len());
    for (name, dtype, shape, offset) in &meta {
        let numel: usize = shape.iter().product();
        let span = (numel * dtype.size()) as u64;
        if offset + span > payload_len {
            return Err(MqError::format(
                &pstr,
                FormatError::TruncatedPayload { needed: offset + span, have: payload_len },
            ));
        }
        spans.push((*offset, offset + span, name));
    }
    let mut sorted = spans.clone();
    sorted.sort_by_key(|s| s.0);
    for w in sorted.windows(2) {
        if w[0].1 > w[1].0 && w[0].0 != w[1].0 || (w[0].0 == w[1].0 && w[0].1 > w[1].0) {
            return Err(MqError::format(
                &pstr,
                FormatError::OverlappingEntries {
                    first: w[0].2.to_string(),
                    second: w[1].2.to_string(),
                },
            ));
        }
    }

    let mut out = BTreeMap::new();
    for (name, dtype, shape, offset) in meta {
        let numel: usize = shape.iter().product();
        let start = payload_start + offset as usize;
        let mut values = Vec::with_capacity(numel);
        match dtype {
            DType::F32 => {
                for k in 0..numel {
                    let b = &bytes[start + 4 * k..start + 4 * k + 4];
                    values.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
                }
            }
            DType::F64 => {
                for k in 0..numel {
                    let b = &bytes[start + 8 * k..start + 8 * k + 8];
                    values.push(f64::from_le_bytes(b.try_into().unwrap()));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MqError::format(&pstr, FormatError::NonFinite(name)));
        }
        out.insert(name, Entry { dtype, shape, values });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// calibration-data file

/// Write `[batch, tokens, d_model]` calibration data as f32.
pub fn write_calib(path: &Path, data: &Tensor) -> Result<()> {
    let pstr = path.display().to_string();
    let s = data.shape();
    if s.len() != 3 {
        return Err(MqError::shape("calibration data must be rank 3", s, &[]));
    }
    let mut bytes = Vec::with_capacity(20 + data.numel() * 4);
    bytes.extend_from_slice(CALIB_MAGIC);
    bytes.extend_from_slice(&CALIB_VERSION.to_le_bytes());
    for &d in s {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &bytes).map_err(|e| MqError::io(&pstr, e))
}

/// Read a calibration-data file back into `[batch, tokens, d_model]`.
pub fn read_calib(path: &Path) -> Result<Tensor> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| MqError::io(&pstr, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: &pstr };
    if cur.take(4)? != CALIB_MAGIC {
        return Err(MqError::format(&pstr, FormatError::BadMagic { expected: "MQCD" }));
    }
    let version = cur.u32()?;
    if version != CALIB_VERSION {
        return Err(MqError::format(
            &pstr,
            FormatError::VersionMismatch { expected: CALIB_VERSION, found: version },
        ));
    }
    let batch = cur.u32()? as usize;
    let tokens = cur.u32()? as usize;
    let d_model = cur.u32()? as usize;
    let numel = batch * tokens * d_model;
    let need = cur.pos + numel * 4;
    if bytes.len() < need {
        return Err(MqError::format(
            &pstr,
            FormatError::TruncatedPayload { needed: need as u64, have: bytes.len() as u64 },
        ));
    }
    let mut values = Vec::with_capacity(numel);
    for k in 0..numel {
        let b = &bytes[cur.pos + 4 * k..cur.pos + 4 * k + 4];
        values.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MqError::format(&pstr, FormatError::NonFinite("payload".into())));
    }
    Tensor::from_vec(vec![batch, tokens, d_model], values)
}

// ---------------------------------------------------------------------------
// model codec

fn tap_by_name(name: &str) -> Result<Tap> {
    name.parse()
}

/// Encode a model into container entries.
pub fn model_to_entries(m: &MambaModel) -> BTreeMap<String, Entry> {
    let mut e = BTreeMap::new();
    let c = &m.config;
    e.insert(
        "meta/config".to_string(),
        Entry::f64(
            vec![9],
            vec![
                c.d_model as f64,
                c.d_inner as f64,
                c.d_state as f64,
                c.d_conv as f64,
                c.dt_rank as f64,
                c.n_blocks as f64,
                c.seed as f64,
                c.outlier_frac,
                c.outlier_gain,
            ],
        ),
    );
    e.insert(
        "meta/scan_kind".to_string(),
        Entry::f64(vec![1], vec![if m.scan_kind == ScanKind::Parallel { 1.0 } else { 0.0 }]),
    );
    e.insert("final_gamma".to_string(), Entry::f32(vec![c.d_model], m.final_gamma.clone()));
    if let Some(a) = &m.input_adapter {
        e.insert("adapter/input".to_string(), Entry::f64(a.shape().to_vec(), a.data().to_vec()));
    }
    if let Some(a) = &m.output_adapter {
        e.insert("adapter/output".to_string(), Entry::f64(a.shape().to_vec(), a.data().to_vec()));
    }
    for (i, b) in m.blocks.iter().enumerate() {
        let p = |suffix: &str| format!("block{i}/{suffix}");
        let mat = |t: &Tensor| Entry::f32(t.shape().to_vec(), t.data().to_vec());
        e.insert(p("w_gate"), mat(&b.w_gate));
        e.insert(p("w_state"), mat(&b.w_state));
        e.insert(p("conv_w"), mat(&b.conv_w));
        e.insert(p("conv_b"), Entry::f32(vec![b.conv_b.len()], b.conv_b.clone()));
        e.insert(p("w_b"), mat(&b.w_b));
        e.insert(p("w_c"), mat(&b.w_c));
        e.insert(p("w_dt_down"), mat(&b.w_dt_down));
        e.insert(p("w_dt_up"), mat(&b.w_dt_up));
        e.insert(p("dt_bias"), Entry::f32(vec![b.dt_bias.len()], b.dt_bias.clone()));
        e.insert(p("a"), mat(&b.a));
        e.insert(p("d_skip"), Entry::f32(vec![b.d_skip.len()], b.d_skip.clone()));
        e.insert(p("norm_gamma"), Entry::f32(vec![b.norm_gamma.len()], b.norm_gamma.clone()));
        e.insert(p("w_out"), mat(&b.w_out));
        if let Some(s) = &b.gate_smooth {
            e.insert(p("gate_smooth"), Entry::f64(vec![s.len()], s.clone()));
        }
        if let Some(s) = &b.delta1_corr {
            e.insert(p("delta1_corr"), Entry::f64(vec![s.len()], s.clone()));
        }
        e.insert(
            p("online_had"),
            Entry::f64(
                vec![2],
                vec![
                    if b.had_outproj { 1.0 } else { 0.0 },
                    if b.had_matmul { 1.0 } else { 0.0 },
                ],
            ),
        );
    }
    if let Some(aq) = &m.act_quant {
        match aq {
            ActQuant::Static { bits, ranges } => {
                e.insert("quant/act".to_string(), Entry::f64(vec![3], vec![*bits as f64, 0.0, 0.0]));
                for (tap, (lo, hi)) in ranges {
                    e.insert(format!("quant/range/{tap}"), Entry::f64(vec![2], vec![*lo, *hi]));
                }
            }
            ActQuant::Dynamic { bits, granularity } => {
                let g = match granularity {
                    Granularity::PerTensor => 0.0,
                    Granularity::PerToken => 1.0,
                    Granularity::PerChannel => 2.0,
                };
                e.insert("quant/act".to_string(), Entry::f64(vec![3], vec![*bits as f64, 1.0, g]));
            }
        }
    }
    e
}

pub fn write_model(path: &Path, m: &MambaModel) -> Result<()> {
    write_container(path, &model_to_entries(m))
}

fn take_entry<'a>(
    entries: &'a BTreeMap<String, Entry>,
    name: &str,
    path: &str,
) -> Result<&'a Entry> {
    entries.get(name).ok_or_else(|| {
        MqError::format(
            path,
            FormatError::BadEntry { name: name.to_string(), reason: "missing".into() },
        )
    })
}

/// Decode a model from container entries.
pub fn model_from_entries(entries: &BTreeMap<String, Entry>, path: &str) -> Result<MambaModel> {
    let cfgv = &take_entry(entries, "meta/config", path)?.values;
    if cfgv.len() != 9 {
        return Err(MqError::format(
            path,
            FormatError::BadEntry { name: "meta/config".into(), reason: "length".into() },
        ));
    }
    let mut config = ModelConfig::new(
        cfgv[0] as usize,
        cfgv[1] as usize,
        cfgv[2] as usize,
        cfgv[3] as usize,
        cfgv[4] as usize,
        cfgv[5] as usize,
        cfgv[6] as u64,
    );
    config.outlier_frac = cfgv[7];
    config.outlier_gain = cfgv[8];
    let scan_kind = if take_entry(entries, "meta/scan_kind", path)?.values[0] == 0.0 {
        ScanKind::Sequential
    } else {
        ScanKind::Parallel
    };
    let tensor_of = |name: &str| -> Result<Tensor> { take_entry(entries, name, path)?.tensor() };
    let vec_of = |name: &str| -> Result<Vec<f64>> {
        Ok(take_entry(entries, name, path)?.values.clone())
    };
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for i in 0..config.n_blocks {
        let p = |s: &str| format!("block{i}/{s}");
        let online = vec_of(&p("online_had"))?;
        blocks.push(MambaBlockParams {
            w_gate: tensor_of(&p("w_gate"))?,
            w_state: tensor_of(&p("w_state"))?,
            conv_w: tensor_of(&p("conv_w"))?,
            conv_b: vec_of(&p("conv_b"))?,
            w_b: tensor_of(&p("w_b"))?,
            w_c: tensor_of(&p("w_c"))?,
            w_dt_down: tensor_of(&p("w_dt_down"))?,
            w_dt_up: tensor_of(&p("w_dt_up"))?,
            dt_bias: vec_of(&p("dt_bias"))?,
            a: tensor_of(&p("a"))?,
            d_skip: vec_of(&p("d_skip"))?,
            norm_gamma: vec_of(&p("norm_gamma"))?,
            w_out: tensor_of(&p("w_out"))?,
            gate_smooth: entries.get(&p("gate_smooth")).map(|e| e.values.clone()),
            delta1_corr: entries.get(&p("delta1_corr")).map(|e| e.values.clone()),
            had_outproj: online[0] != 0.0,
            had_matmul: online[1] != 0.0,
        });
    }
    let act_quant = match entries.get("quant/act") {
        None => None,
        Some(e) => {
            let bits = e.values[0] as u32;
            if e.values[1] == 0.0 {
                let mut ranges = BTreeMap::new();
                for (name, entry) in entries.range("quant/range/".to_string()..) {
                    if let Some(tapname) = name.strip_prefix("quant/range/") {
                        ranges.insert(tap_by_name(tapname)?, (entry.values[0], entry.values[1]));
                    }
                }
                Some(ActQuant::Static { bits, ranges })
            } else {
                let granularity = if e.values[2] == 1.0 {
                    Granularity::PerToken
                } else if e.values[2] == 2.0 {
                    Granularity::PerChannel
                } else {
                    Granularity::PerTensor
                };
                Some(ActQuant::Dynamic { bits, granularity })
            }
        }
    };
    Ok(MambaModel {
        config,
        blocks,
        final_gamma: vec_of("final_gamma")?,
        input_adapter: entries.get("adapter/input").map(|e| e.tensor()).transpose()?,
        output_adapter: entries.get("adapter/output").map(|e| e.tensor()).transpose()?,
        scan_kind,
        act_quant,
        provenance: Vec::new(),
    })
}

pub fn read_model(path: &Path) -> Result<MambaModel> {
    let entries = read_container(path)?;
    model_from_entries(&entries, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// calibration-statistics codec

pub fn stats_to_entries(stats: &CalibStats) -> BTreeMap<String, Entry> {
    let mut e = BTreeMap::new();
    for (tap, acc) in &stats.taps {
        let p = |s: &str| format!("calib/{tap}/{s}");
        let m = acc.ncols;
        e.insert(p("count"), Entry::f64(vec![1], vec![acc.count as f64]));
        e.insert(p("row_sum"), Entry::f64(vec![m], acc.row_sum.clone()));
        e.insert(p("cov_sum"), Entry::f64(vec![m, m], acc.cov_sum.clone()));
        e.insert(p("min"), Entry::f64(vec![m], acc.min.clone()));
        e.insert(p("max"), Entry::f64(vec![m], acc.max.clone()));
        e.insert(
            p("quantiles"),
            Entry::f64(vec![QUANTILE_GRID.len(), m], acc.channel_quantiles()),
        );
        e.insert(
            p("quantiles_pooled"),
            Entry::f64(vec![QUANTILE_GRID.len()], acc.pooled_quantiles()),
        );
    }
    e
}

pub fn write_stats(path: &Path, stats: &CalibStats) -> Result<()> {
    write_container(path, &stats_to_entries(stats))
}

pub fn stats_from_entries(entries: &BTreeMap<String, Entry>, path: &str) -> Result<CalibStats> {
    let mut stats = CalibStats::default();
    let mut tap_names: Vec<String> = Vec::new();
    for name in entries.keys() {
        if let Some(rest) = name.strip_prefix("calib/") {
            if let Some(tap) = rest.strip_suffix("/count") {
                tap_names.push(tap.to_string());
            }
        }
    }
    for tapname in tap_names {
        let tap = tap_by_name(&tapname)?;
        let p = |s: &str| format!("calib/{tapname}/{s}");
        let count = take_entry(entries, &p("count"), path)?.values[0] as u64;
        let row_sum = take_entry(entries, &p("row_sum"), path)?.values.clone();
        let m = row_sum.len();
        let cov_sum = take_entry(entries, &p("cov_sum"), path)?.values.clone();
        let min = take_entry(entries, &p("min"), path)?.values.clone();
        let max = take_entry(entries, &p("max"), path)?.values.clone();
        let per_channel = take_entry(entries, &p("quantiles"), path)?.values.clone();
        let pooled = take_entry(entries, &p("quantiles_pooled"), path)?.values.clone();
        stats.taps.insert(
            tap,
            TapAccumulator::from_parts(
                m,
                count,
                row_sum,
                cov_sum,
                min,
                max,
                FrozenQuantiles { per_channel, pooled },
            ),
        );
    }
    Ok(stats)
}

pub fn read_stats(path: &Path) -> Result<CalibStats> {
    let entries = read_container(path)?;
    stats_from_entries(&entries, &path.display().to_string())
}
