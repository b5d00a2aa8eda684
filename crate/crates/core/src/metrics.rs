//! Evaluation metrics and the gate-saturation diagnostic.
//!
//! All frame metrics take `[N, T, C, H, W]` tensors and return one value per
//! frame index (averaged over sequences) plus the mean over frames.
//! Aggregates sort their inputs and use compensated summation, so they do not
//! depend on the order of sequences.
//!
//! Definitions, with `Y` the target and `P` the prediction of one frame:
//!
//! * MSE: `sum (s·(P - Y))²` and MAE: `sum |s·(P - Y)|`, with `s` = 1 or 255.
//! * SSIM: Gaussian-weighted local statistics (11x11 window, sigma 1.5,
//!   K1 = 0.01, K2 = 0.03, `C1 = (K1·L)²`, `C2 = (K2·L)²` for data range
//!   `L`) averaged over every window position that fits inside the frame.
//!   Frames narrower than the window use the largest odd window that fits.
//! * CSI: `hits / (hits + misses + false alarms)` with a pixel positive when
//!   `value >= threshold`; defined as 1 when nothing is positive anywhere.
//! * Sharpness: with `gi(Z) = |Z[i,j] - Z[i-1,j]|` and
//!   `gj(Z) = |Z[i,j] - Z[i,j-1]|` over the `(H-1)(W-1)` pixels having both
//!   neighbours,
//!   `10·log10(L² / mean |(gi(Y) + gj(Y)) - (gi(P) + gj(P))|)`, capped at
//!   [`SHARPNESS_CAP_DB`].

use serde::Serialize;

use crate::cells::CellDiagnostics;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Score reported when the gradient difference vanishes.
pub const SHARPNESS_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// Intensities in `[0, 1]`.
    Unit,
    /// Intensities reported on a `[0, 255]` scale.
    #[serde(rename = "255")]
    Byte,
}

impl PixelScale {
    pub fn factor(self) -> f64 {
        match self {
            PixelScale::Unit => 1.0,
            PixelScale::Byte => 255.0,
        }
    }
}

impl std::str::FromStr for PixelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(PixelScale::Unit),
            "255" => Ok(PixelScale::Byte),
            _ => Err(Error::invalid(format!("unknown pixel scale `{s}` (expected unit or 255)"))),
        }
    }
}

/// Per-frame values plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameSeries {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

/// Kahan summation over the values in ascending order.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in sorted {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    stable_sum(values) / values.len() as f64
}

struct Layout {
    n: usize,
    t: usize,
    frame: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn layout(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<Layout> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape())));
    }
    let &[n, t, c, h, w] = pred.shape() else {
        return Err(Error::shape(op, format!("expected [N, T, C, H, W], got {:?}", pred.shape())));
    };
    Ok(Layout {
        n,
        t,
        frame: c * h * w,
        c,
        h,
        w,
    })
}

/// Applies `f` to every (sequence, frame) pair and averages over sequences.
fn per_frame(
    op: &'static str,
    pred: &Tensor,
    gt: &Tensor,
    mut f: impl FnMut(&[f32], &[f32], &Layout) -> Result<f64>,
) -> Result<FrameSeries> {
    let l = layout(op, pred, gt)?;
    let mut per_frame = Vec::with_capacity(l.t);
    for ti in 0..l.t {
        let mut vals = Vec::with_capacity(l.n);
        for ni in 0..l.n {
            let off = (ni * l.t + ti) * l.frame;
            vals.push(f(&pred.data()[off..][..l.frame], &gt.data()[off..][..l.frame], &l)?);
        }
        per_frame.push(stable_mean(&vals));
    }
    let mean = stable_mean(&per_frame);
    Ok(FrameSeries { per_frame, mean })
}

/// Per-frame summed squared error.
pub fn mse(pred: &Tensor, gt: &Tensor, scale: PixelScale) -> Result<FrameSeries> {
    let s = scale.factor();
    per_frame("mse", pred, gt, |p, y, _| {
        let terms: Vec<f64> = p
            .iter()
            .zip(y)
            .map(|(&a, &b)| {
                let d = (a as f64 - b as f64) * s;
                d * d
            })
            .collect();
        Ok(stable_sum(&terms))
    })
}

/// Per-frame summed absolute error.
pub fn mae(pred: &Tensor, gt: &Tensor, scale: PixelScale) -> Result<FrameSeries> {
    let s = scale.factor();
    per_frame("mae", pred, gt, |p, y, _| {
        let terms: Vec<f64> = p
            .iter()
            .zip(y)
            .map(|(&a, &b)| ((a as f64 - b as f64) * s).abs())
            .collect();
        Ok(stable_sum(&terms))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range `L` of the inputs.
    pub data_range: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        SsimConstants {
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

impl SsimConstants {
    /// Side of the window actually used on an `h x w` frame.
    pub fn effective_window(&self, h: usize, w: usize) -> Result<usize> {
        let fit = h.min(w);
        let side = self.window.min(if fit % 2 == 1 { fit } else { fit.saturating_sub(1) });
        if side < 3 {
            return Err(Error::invalid(format!(
                "frame {h}x{w} too small for an SSIM window (need at least 3x3)"
            )));
        }
        Ok(side)
    }

    /// Normalized 2-D Gaussian weights, row-major.
    pub fn weights(&self, side: usize) -> Vec<f64> {
        let c = (side as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..side)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        let mut out = Vec::with_capacity(side * side);
        for &a in &g {
            for &b in &g {
                out.push(a * b / (total * total));
            }
        }
        out
    }
}

fn ssim_frame(p: &[f32], y: &[f32], l: &Layout, k: &SsimConstants) -> Result<f64> {
    let side = k.effective_window(l.h, l.w)?;
    let weights = k.weights(side);
    let c1 = (k.k1 * k.data_range).powi(2);
    let c2 = (k.k2 * k.data_range).powi(2);
    let mut scores = Vec::with_capacity(l.c * (l.h - side + 1) * (l.w - side + 1));
    for ci in 0..l.c {
        let base = ci * l.h * l.w;
        for oy in 0..=l.h - side {
            for ox in 0..=l.w - side {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..side {
                    for wx in 0..side {
                        let wgt = weights[wy * side + wx];
                        let idx = base + (oy + wy) * l.w + ox + wx;
                        let (a, b) = (p[idx] as f64, y[idx] as f64);
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                scores.push(num / den);
            }
        }
    }
    Ok(stable_mean(&scores))
}

pub fn ssim(pred: &Tensor, gt: &Tensor, constants: &SsimConstants) -> Result<FrameSeries> {
    per_frame("ssim", pred, gt, |p, y, l| ssim_frame(p, y, l, constants))
}

/// Hits, misses and false alarms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Contingency {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
}

impl Contingency {
    pub fn csi(&self) -> f64 {
        let den = self.hits + self.misses + self.false_alarms;
        if den == 0 {
            1.0
        } else {
            self.hits as f64 / den as f64
        }
    }

    fn add(&mut self, p: &[f32], y: &[f32], threshold: f64, scale: f64) {
        for (&a, &b) in p.iter().zip(y) {
            match (a as f64 * scale >= threshold, b as f64 * scale >= threshold) {
                (true, true) => self.hits += 1,
                (false, true) => self.misses += 1,
                (true, false) => self.false_alarms += 1,
                (false, false) => {}
            }
        }
    }
}

/// CSI per frame (counts pooled over sequences) and over the whole tensor.
/// `threshold` is on the `scale` given.
pub fn csi(pred: &Tensor, gt: &Tensor, threshold: f64, scale: PixelScale) -> Result<FrameSeries> {
    let l = layout("csi", pred, gt)?;
    let s = scale.factor();
    let mut total = Contingency::default();
    let mut per_frame = Vec::with_capacity(l.t);
    for ti in 0..l.t {
        let mut counts = Contingency::default();
        for ni in 0..l.n {
            let off = (ni * l.t + ti) * l.frame;
            counts.add(&pred.data()[off..][..l.frame], &gt.data()[off..][..l.frame], threshold, s);
        }
        total.hits += counts.hits;
        total.misses += counts.misses;
        total.false_alarms += counts.false_alarms;
        per_frame.push(counts.csi());
    }
    Ok(FrameSeries {
        per_frame,
        mean: total.csi(),
    })
}

fn sharpness_frame(p: &[f32], y: &[f32], l: &Layout, max_value: f64) -> Result<f64> {
    if l.h < 2 || l.w < 2 {
        return Err(Error::invalid(format!("sharpness needs frames of at least 2x2, got {}x{}", l.h, l.w)));
    }
    let grad = |z: &[f32], base: usize, i: usize, j: usize| {
        let at = |i: usize, j: usize| z[base + i * l.w + j] as f64;
        (at(i, j) - at(i - 1, j)).abs() + (at(i, j) - at(i, j - 1)).abs()
    };
    let mut terms = Vec::with_capacity(l.c * (l.h - 1) * (l.w - 1));
    for ci in 0..l.c {
        let base = ci * l.h * l.w;
        for i in 1..l.h {
            for j in 1..l.w {
                terms.push((grad(y, base, i, j) - grad(p, base, i, j)).abs());
            }
        }
    }
    let mean = stable_mean(&terms);
    if mean <= 0.0 {
        return Ok(SHARPNESS_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mean).log10()).min(SHARPNESS_CAP_DB))
}

/// Gradient-difference sharpness in dB; `max_value` is the peak intensity.
pub fn sharpness(pred: &Tensor, gt: &Tensor, max_value: f64) -> Result<FrameSeries> {
    per_frame("sharpness", pred, gt, |p, y, l| sharpness_frame(p, y, l, max_value))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationMode {
    /// `f_t < threshold` on a conventional forget gate.
    ForgetGate,
    /// `|T_t / C_{t-1}| < threshold` on a MIM block, skipping guarded cells.
    VirtualRatio,
}

impl std::str::FromStr for SaturationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forget" | "f" => Ok(SaturationMode::ForgetGate),
            "ratio" | "tc" => Ok(SaturationMode::VirtualRatio),
            _ => Err(Error::invalid(format!("unknown saturation mode `{s}` (expected forget or ratio)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaturationReport {
    pub mode: SaturationMode,
    pub threshold: f64,
    /// Saturated fraction per timestamp; 0 where no cell was counted.
    pub per_timestamp: Vec<f64>,
    /// Cells entering each rate (the ratio guard can exclude some).
    pub counted: Vec<u64>,
    /// Saturated cells over counted cells across all timestamps.
    pub mean: f64,
}

/// Saturation rate of one layer's diagnostics, one entry per timestamp.
pub fn saturation_rate(diagnostics: &[&CellDiagnostics], threshold: f64, mode: SaturationMode) -> Result<SaturationReport> {
    if diagnostics.is_empty() {
        return Err(Error::invalid("no diagnostics recorded"));
    }
    let mut per_timestamp = Vec::with_capacity(diagnostics.len());
    let mut counted = Vec::with_capacity(diagnostics.len());
    let (mut sat_total, mut count_total) = (0u64, 0u64);
    for (t, d) in diagnostics.iter().enumerate() {
        let (sat, count) = match mode {
            SaturationMode::ForgetGate => {
                let f = d.gates.get("f").ok_or_else(|| {
                    Error::invalid(format!("timestamp {t}: no forget gate recorded (not a conventional cell)"))
                })?;
                let sat = f.data().iter().filter(|&&v| (v as f64) < threshold).count();
                (sat as u64, f.numel() as u64)
            }
            SaturationMode::VirtualRatio => {
                let vf = d.virtual_forget.as_ref().ok_or_else(|| {
                    Error::invalid(format!("timestamp {t}: no T/C record (not a MIM block)"))
                })?;
                let (mut sat, mut count) = (0u64, 0u64);
                for r in vf.ratios().flatten() {
                    count += 1;
                    if (r.abs() as f64) < threshold {
                        sat += 1;
                    }
                }
                (sat, count)
            }
        };
        per_timestamp.push(if count == 0 { 0.0 } else { sat as f64 / count as f64 });
        counted.push(count);
        sat_total += sat;
        count_total += count;
    }
    Ok(SaturationReport {
        mode,
        threshold,
        per_timestamp,
        counted,
        mean: if count_total == 0 {
            0.0
        } else {
            sat_total as f64 / count_total as f64
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub scale: PixelScale,
    pub ssim: SsimConstants,
    pub sharpness: bool,
    /// CSI thresholds on the chosen scale; empty disables CSI.
    pub thresholds: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            scale: PixelScale::Unit,
            ssim: SsimConstants::default(),
            sharpness: false,
            thresholds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub horizon: usize,
    pub scale: PixelScale,
    pub ssim_constants: SsimConstants,
    pub mse: FrameSeries,
    pub mae: FrameSeries,
    pub ssim: FrameSeries,
    pub sharpness: Option<FrameSeries>,
    pub csi: Vec<(f64, FrameSeries)>,
}

/// All metrics for predictions of data in `[0, 1]`.
pub fn evaluate(pred: &Tensor, gt: &Tensor, options: &EvalOptions) -> Result<MetricReport> {
    let horizon = layout("evaluate", pred, gt)?.t;
    let ssim_constants = SsimConstants {
        data_range: 1.0,
        ..options.ssim
    };
    Ok(MetricReport {
        horizon,
        scale: options.scale,
        ssim_constants,
        mse: mse(pred, gt, options.scale)?,
        mae: mae(pred, gt, options.scale)?,
        // SSIM and sharpness are invariant to rescaling data and range
        // together, so they are computed on the unit scale.
        ssim: ssim(pred, gt, &ssim_constants)?,
        sharpness: options.sharpness.then(|| sharpness(pred, gt, 1.0)).transpose()?,
        csi: options
            .thresholds
            .iter()
            .map(|&thr| Ok((thr, csi(pred, gt, thr, options.scale)?)))
            .collect::<Result<_>>()?,
    })
}

impl MetricReport {
    /// One JSON object per line: a `meta` record, one `frame` record per
    /// frame index, then a `mean` record.
    pub fn to_json_lines(&self) -> String {
        use serde_json::{json, Map, Value};
        let mut out = String::new();
        let meta = json!({
            "record": "meta",
            "horizon": self.horizon,
            "scale": self.scale,
            "ssim": self.ssim_constants,
            "csi_thresholds": self.csi.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
            "sharpness_cap_db": self.sharpness.as_ref().map(|_| SHARPNESS_CAP_DB),
        });
        out.push_str(&meta.to_string());
        out.push('\n');
        let row = |label: Value, pick: &dyn Fn(&FrameSeries) -> f64| {
            let mut m = Map::new();
            m.insert("record".into(), label);
            m.insert("mse".into(), json!(pick(&self.mse)));
            m.insert("mae".into(), json!(pick(&self.mae)));
            m.insert("ssim".into(), json!(pick(&self.ssim)));
            if let Some(s) = &self.sharpness {
                m.insert("sharpness".into(), json!(pick(s)));
            }
            for (thr, series) in &self.csi {
                m.insert(format!("csi@{thr}"), json!(pick(series)));
            }
            Value::Object(m)
        };
        for t in 0..self.horizon {
            let mut v = row(json!("frame"), &|s| s.per_frame[t]);
            v["frame"] = json!(t + 1);
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out.push_str(&row(json!("mean"), &|s| s.mean).to_string());
        out.push('\n');
        out
    }
}

impl SaturationReport {
    /// One JSON object per timestamp, then a `mean` record.
    pub fn to_json_lines(&self, layer: usize) -> String {
        use serde_json::json;
        let mut out = String::new();
        for (t, (&rate, &counted)) in self.per_timestamp.iter().zip(&self.counted).enumerate() {
            let v = json!({
                "record": "timestamp",
                "layer": layer,
                "mode": self.mode,
                "threshold": self.threshold,
                "t": t + 1,
                "rate": rate,
                "counted": counted,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let v = json!({
            "record": "mean",
            "layer": layer,
            "mode": self.mode,
            "threshold": self.threshold,
            "rate": self.mean,
            "counted": self.counted.iter().sum::<u64>(),
        });
        out.push_str(&v.to_string());
        out.push('\n');
        out
    }
}
