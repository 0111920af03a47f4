//! Normalized time axis, value normalization, windowing, output binning,
//! CSV ingestion and context curation.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use latpfn_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Features per time step: normalized time, normalized value, observed flag.
pub const FEATURES: usize = 3;

pub const TAU_START: f64 = -3.0;
pub const TAU_END: f64 = 1.0;

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Normalized time axis of a window of length `s` whose last `h` steps are
/// the forecast horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAxis {
    pub tau: Vec<f64>,
    /// First horizon index; `tau[split - 1] == 0`.
    pub split: usize,
}

/// History steps `0..s-h` are spread evenly over `[-3, 0]` with the last
/// observation at the origin; horizon steps are spread evenly over `(0, 1]`.
pub fn normalize_time_axis(s: usize, h: usize) -> Result<TimeAxis> {
    if h == 0 || h >= s || s - h < 2 {
        return Err(domain(
            "normalize_time_axis",
            format!("need 0 < H and at least 2 history steps, got S={s} H={h}"),
        ));
    }
    let hist = s - h;
    let last = (hist - 1) as f64;
    let mut tau = Vec::with_capacity(s);
    for i in 0..hist {
        // written as a ratio so that both endpoints are exact
        tau.push(TAU_START * ((hist - 1 - i) as f64) / last);
    }
    for j in 1..=h {
        tau.push(TAU_END * j as f64 / h as f64);
    }
    Ok(TimeAxis { tau, split: hist })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub scale: f64,
    /// History was constant and the floor was applied.
    pub flagged: bool,
}

impl NormStats {
    pub fn from_history(history: &[f64]) -> Result<Self> {
        if history.is_empty() {
            return Err(domain("znorm_2std", "empty history"));
        }
        let n = history.len() as f64;
        let mean = history.iter().sum::<f64>() / n;
        let var = history.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let raw = var.sqrt();
        let flagged = !(raw > SIGMA_FLOOR);
        let std = if flagged { SIGMA_FLOOR } else { raw };
        Ok(Self {
            mean,
            std,
            scale: 2.0 * std,
            flagged,
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

/// 2-std z-normalization using statistics of `values[..history_len]` only.
pub fn znorm_2std(values: &[f64], history_len: usize) -> Result<(Vec<f64>, NormStats)> {
    if history_len > values.len() {
        return Err(domain(
            "znorm_2std",
            format!("history length {history_len} exceeds series length {}", values.len()),
        ));
    }
    let stats = NormStats::from_history(&values[..history_len])?;
    Ok((values.iter().map(|&v| stats.apply(v)).collect(), stats))
}

pub fn denorm(values: &[f64], stats: &NormStats) -> Vec<f64> {
    values.iter().map(|&v| stats.invert(v)).collect()
}

/// Start offsets of rolling windows; empty when the series is too short.
pub fn window_starts(len: usize, seq_len: usize, stride: usize) -> Vec<usize> {
    if seq_len == 0 || stride == 0 || len < seq_len {
        return Vec::new();
    }
    (0..=(len - seq_len) / stride).map(|k| k * stride).collect()
}

pub fn window_series(series: &[f64], seq_len: usize, stride: usize) -> Vec<&[f64]> {
    window_starts(series.len(), seq_len, stride)
        .into_iter()
        .map(|s| &series[s..s + seq_len])
        .collect()
}

/// Horizon length for a window whose last `target_fraction` is forecast.
pub fn horizon_for(seq_len: usize, target_fraction: f64) -> usize {
    (seq_len as f64 * target_fraction).round() as usize
}

/// Equal-width bins over the normalized output range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            count: 100,
            lo: -3.5,
            hi: 3.5,
        }
    }
}

impl BinSpec {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn edge(&self, i: usize) -> f64 {
        if i == self.count {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * i as f64 / self.count as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.count).map(|i| self.edge(i)).collect()
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.edge(i) + self.edge(i + 1))
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.center(i)).collect()
    }

    /// Half-open bins `[lo, hi)`; values outside the range clamp to the end
    /// bins.
    pub fn index(&self, v: f64) -> Result<usize> {
        if v.is_nan() {
            return Err(domain("bin_index", "NaN value"));
        }
        // number of interior edges at or below v
        let (mut lo, mut hi) = (1usize, self.count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.edge(mid) <= v {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(lo - 1)
    }

    pub fn dist_mean(&self, probs: &[f64]) -> Result<f64> {
        self.check_probs(probs)?;
        Ok(probs.iter().enumerate().map(|(i, p)| p * self.center(i)).sum())
    }

    pub fn dist_var(&self, probs: &[f64]) -> Result<f64> {
        let mean = self.dist_mean(probs)?;
        Ok(probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * (self.center(i) - mean).powi(2))
            .sum())
    }

    fn check_probs(&self, probs: &[f64]) -> Result<()> {
        if probs.len() != self.count {
            return Err(domain(
                "dist_mean",
                format!("{} probabilities for {} bins", probs.len(), self.count),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(domain("dist_mean", format!("probabilities sum to {total}")));
        }
        Ok(())
    }
}

/// One context of example series plus held-out series to forecast, all on
/// the normalized axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    /// `[N, S, 3]`, fully observed.
    pub context: Tensor<f32>,
    /// `[N_h, S - H, 3]`.
    pub history: Tensor<f32>,
    /// `[N_h, H]`, normalized with the history statistics.
    pub target: Tensor<f32>,
    pub stats: Vec<NormStats>,
    /// Unit-normalized generating parameters of each held-out series, `[N_h, K]`.
    pub si_target: Option<Tensor<f32>>,
}

impl ContextBatch {
    pub fn n(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn n_h(&self) -> usize {
        self.history.shape()[0]
    }

    pub fn s(&self) -> usize {
        self.context.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.target.shape()[1]
    }

    pub fn history_len(&self) -> usize {
        self.history.shape()[1]
    }

    pub fn axis(&self) -> Result<TimeAxis> {
        normalize_time_axis(self.s(), self.h())
    }

    /// Normalized history values of held-out series `j`.
    pub fn history_values(&self, j: usize) -> Vec<f64> {
        let hl = self.history_len();
        let d = self.history.data();
        (0..hl).map(|i| d[(j * hl + i) * FEATURES + 1] as f64).collect()
    }

    pub fn target_values(&self, j: usize) -> Vec<f64> {
        let h = self.h();
        self.target.data()[j * h..(j + 1) * h]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    /// Keeps only the listed context examples, in the given order.
    pub fn select_context(&self, idx: &[usize]) -> Result<ContextBatch> {
        if idx.is_empty() {
            return Err(Error::Shape("empty context selection".into()));
        }
        let (n, s) = (self.n(), self.s());
        let row = s * FEATURES;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(Error::Shape(format!("context index {i} >= {n}")));
            }
            data.extend_from_slice(&self.context.data()[i * row..(i + 1) * row]);
        }
        Ok(ContextBatch {
            context: Tensor::new(&[idx.len(), s, FEATURES], data).map_err(Error::from)?,
            ..self.clone()
        })
    }

    /// Held-out features with horizon values hidden: `[N_h, S, 3]`.
    pub fn prompt_features(&self) -> Result<Tensor<f32>> {
        self.held_out_features(false)
    }

    /// Held-out features with the true horizon values visible: `[N_h, S, 3]`.
    pub fn target_features(&self) -> Result<Tensor<f32>> {
        self.held_out_features(true)
    }

    fn held_out_features(&self, reveal: bool) -> Result<Tensor<f32>> {
        let axis = self.axis()?;
        let (n_h, s, h, hl) = (self.n_h(), self.s(), self.h(), self.history_len());
        let mut out = Vec::with_capacity(n_h * s * FEATURES);
        for j in 0..n_h {
            out.extend_from_slice(&self.history.data()[j * hl * FEATURES..(j + 1) * hl * FEATURES]);
            for k in 0..h {
                let tau = axis.tau[hl + k] as f32;
                if reveal {
                    out.extend_from_slice(&[tau, self.target.data()[j * h + k], 1.0]);
                } else {
                    out.extend_from_slice(&[tau, 0.0, 0.0]);
                }
            }
        }
        Ok(Tensor::new(&[n_h, s, FEATURES], out)?)
    }
}

/// Feature rows for one window: `(tau, value, observed)` per step.
pub fn window_features(values: &[f64], axis: &TimeAxis, observed: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(values.len() * FEATURES);
    for (i, &v) in values.iter().enumerate() {
        let seen = i < observed;
        out.push(axis.tau[i] as f32);
        out.push(if seen { v as f32 } else { 0.0 });
        out.push(if seen { 1.0 } else { 0.0 });
    }
    out
}

/// Builds a batch from raw windows of length `S`. Every window is
/// value-normalized from its own first `S - H` steps.
pub fn assemble_batch(
    context: &[Vec<f64>],
    held_out: &[Vec<f64>],
    h: usize,
    si_target: Option<Tensor<f32>>,
) -> Result<ContextBatch> {
    if context.is_empty() || held_out.is_empty() {
        return Err(Error::Shape("context and held-out sets must be non-empty".into()));
    }
    let s = context[0].len();
    if context.iter().chain(held_out).any(|w| w.len() != s) {
        return Err(Error::Shape("all windows must share one length".into()));
    }
    let axis = normalize_time_axis(s, h)?;
    let hl = axis.split;
    let mut ctx = Vec::with_capacity(context.len() * s * FEATURES);
    for w in context {
        let (v, _) = znorm_2std(w, hl)?;
        ctx.extend(window_features(&v, &axis, s));
    }
    let mut hist = Vec::with_capacity(held_out.len() * hl * FEATURES);
    let mut target = Vec::with_capacity(held_out.len() * h);
    let mut stats = Vec::with_capacity(held_out.len());
    for w in held_out {
        let (v, st) = znorm_2std(w, hl)?;
        hist.extend(window_features(&v[..hl], &axis, hl));
        target.extend(v[hl..].iter().map(|&x| x as f32));
        stats.push(st);
    }
    Ok(ContextBatch {
        context: Tensor::new(&[context.len(), s, FEATURES], ctx)?,
        history: Tensor::new(&[held_out.len(), hl, FEATURES], hist)?,
        target: Tensor::new(&[held_out.len(), h], target)?,
        stats,
        si_target,
    })
}

// ------------------------------------------------------------------ CSV input

/// One numeric column of a CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub times: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvLoad {
    pub series: Vec<RawSeries>,
    /// Rows dropped because the timestamp did not parse.
    pub skipped_rows: usize,
    /// Individual cells dropped because the value did not parse.
    pub skipped_cells: usize,
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

pub fn load_csv_dataset(path: &Path, timestamp_column: &str) -> Result<CsvLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    read_csv(file, timestamp_column)
}

pub fn read_csv<R: std::io::Read>(reader: R, timestamp_column: &str) -> Result<CsvLoad> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ts = headers
        .iter()
        .position(|h| h.trim() == timestamp_column)
        .ok_or_else(|| Error::Data(format!("missing timestamp column '{timestamp_column}'")))?;
    let mut series: Vec<RawSeries> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ts)
        .map(|(_, h)| RawSeries {
            name: h.trim().to_string(),
            times: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    let (mut skipped_rows, mut skipped_cells) = (0, 0);
    for record in rdr.records() {
        let Ok(record) = record else {
            skipped_rows += 1;
            continue;
        };
        let Some(t) = record.get(ts).and_then(parse_timestamp) else {
            skipped_rows += 1;
            continue;
        };
        let mut k = 0;
        for (i, cell) in record.iter().enumerate() {
            if i == ts {
                continue;
            }
            if k >= series.len() {
                break;
            }
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    series[k].times.push(t);
                    series[k].values.push(v);
                }
                _ => skipped_cells += 1,
            }
            k += 1;
        }
    }
    // columns that never held a number are not series
    series.retain(|s| !s.values.is_empty());
    Ok(CsvLoad {
        series,
        skipped_rows,
        skipped_cells,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    None,
    Daily,
    Monthly,
}

/// Mean over calendar buckets, stamped at the bucket start.
pub fn aggregate(series: &RawSeries, rule: Aggregation) -> RawSeries {
    let key = |t: &NaiveDateTime| -> NaiveDateTime {
        match rule {
            Aggregation::None => *t,
            Aggregation::Daily => t.date().and_hms_opt(0, 0, 0).expect("midnight"),
            Aggregation::Monthly => NaiveDate::from_ymd_opt(t.year(), t.month(), 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("first of month"),
        }
    };
    if rule == Aggregation::None {
        return series.clone();
    }
    let mut buckets: BTreeMap<NaiveDateTime, (f64, usize)> = BTreeMap::new();
    for (t, v) in series.times.iter().zip(&series.values) {
        let e = buckets.entry(key(t)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let (times, values) = buckets.into_iter().map(|(t, (s, n))| (t, s / n as f64)).unzip();
    RawSeries {
        name: series.name.clone(),
        times,
        values,
    }
}

// ---------------------------------------------------------- context curation

/// A date range of one column, inclusive on both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRef {
    pub column: String,
    pub start: String,
    pub end: String,
}

impl WindowRef {
    fn bounds(&self) -> Result<(NaiveDateTime, NaiveDateTime)> {
        let parse = |s: &str| parse_timestamp(s).ok_or_else(|| Error::Data(format!("unparsable date '{s}'")));
        let (a, b) = (parse(&self.start)?, parse(&self.end)?);
        if a > b {
            return Err(Error::Data(format!("window {}: start after end", self.column)));
        }
        Ok((a, b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub dataset: String,
    #[serde(default = "default_timestamp")]
    pub timestamp_column: String,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub seq_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub target_fraction: f64,
    pub context: Vec<WindowRef>,
    pub held_out: Vec<WindowRef>,
}

fn default_timestamp() -> String {
    "date".into()
}

fn default_stride() -> usize {
    1
}

/// Windowing conventions of the reference benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetPreset {
    Illness,
    Ett,
    Ecl,
    Traffic,
}

impl DatasetPreset {
    /// `(seq_len, stride, target_fraction, aggregation)`.
    pub fn windowing(self) -> (usize, usize, f64, Aggregation) {
        match self {
            Self::Illness => (160, 1, 0.25, Aggregation::None),
            Self::Ett => (240, 10, 0.25, Aggregation::Monthly),
            Self::Ecl => (240, 10, 0.25, Aggregation::Daily),
            Self::Traffic => (240, 1, 0.25, Aggregation::Monthly),
        }
    }
}

impl ContextSpec {
    pub fn horizon(&self) -> usize {
        horizon_for(self.seq_len, self.target_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return Err(Error::Config(format!(
                "target_fraction {} not in (0, 1)",
                self.target_fraction
            )));
        }
        if self.context.is_empty() {
            return Err(Error::Config("context list is empty".into()));
        }
        if self.held_out.is_empty() {
            return Err(Error::Config("held-out list is empty".into()));
        }
        normalize_time_axis(self.seq_len, self.horizon())?;
        for c in &self.context {
            let (a0, a1) = c.bounds()?;
            for h in &self.held_out {
                let (b0, b1) = h.bounds()?;
                if c.column == h.column && a0 <= b1 && b0 <= a1 {
                    return Err(Error::Config(format!(
                        "context window {} {}..{} overlaps held-out window {}..{}",
                        c.column, c.start, c.end, h.start, h.end
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Linear interpolation of `values` onto `len` evenly spaced positions.
pub fn resample(values: &[f64], len: usize) -> Vec<f64> {
    if values.len() == len {
        return values.to_vec();
    }
    let last = (values.len() - 1) as f64;
    (0..len)
        .map(|i| {
            let x = if len == 1 {
                0.0
            } else {
                i as f64 * last / (len - 1) as f64
            };
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(values.len() - 1);
            let f = x - lo as f64;
            values[lo] * (1.0 - f) + values[hi] * f
        })
        .collect()
}

fn extract(window: &WindowRef, series: &[RawSeries], seq_len: usize) -> Result<Vec<f64>> {
    let s = series
        .iter()
        .find(|s| s.name == window.column)
        .ok_or_else(|| Error::Data(format!("no column '{}' in dataset", window.column)))?;
    let (a, b) = window.bounds()?;
    let vals: Vec<f64> = s
        .times
        .iter()
        .zip(&s.values)
        .filter(|(t, _)| **t >= a && **t <= b)
        .map(|(_, v)| *v)
        .collect();
    if vals.len() < 2 {
        return Err(Error::Data(format!(
            "window {} {}..{} holds {} points",
            window.column,
            window.start,
            window.end,
            vals.len()
        )));
    }
    Ok(resample(&vals, seq_len))
}

/// Resolves every window of `spec` against `series` (already aggregated) and
/// assembles a batch. Each selected date range is resampled to `seq_len`
/// points.
pub fn curate_context(spec: &ContextSpec, series: &[RawSeries]) -> Result<ContextBatch> {
    spec.validate()?;
    let ctx = spec
        .context
        .iter()
        .map(|w| extract(w, series, spec.seq_len))
        .collect::<Result<Vec<_>>>()?;
    let held = spec
        .held_out
        .iter()
        .map(|w| extract(w, series, spec.seq_len))
        .collect::<Result<Vec<_>>>()?;
    assemble_batch(&ctx, &held, spec.horizon(), None)
}
