//! Fidelity (PSNR, SSIM) and temporal consistency (flow warping error).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::curator::flow::{compute_flow, FlowField};
use crate::error::{Error, Result};
use crate::media::{self, Frame, Plane, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Warp,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Warp => "warp",
        }
    }

    pub fn needs_reference(self) -> bool {
        !matches!(self, Metric::Warp)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "warp" | "ewarp" | "warping_error" => Ok(Metric::Warp),
            other => Err(Error::Argument(format!("unknown metric `{other}` (psnr, ssim, warp)"))),
        }
    }
}

/// Comma-separated metric list.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

/// A metric value; `+inf` is written as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue(pub f64);

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MetricValue(v)),
            Raw::Str(s) if s == "inf" => Ok(MetricValue(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad metric value `{s}`"))),
        }
    }
}

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`, `+inf` for identical inputs.
pub fn psnr_values(x: &[f32], y: &[f32], peak: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("psnr inputs have {} and {} values", x.len(), y.len())));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

pub fn psnr(x: &Frame, y: &Frame) -> Result<f64> {
    check_same(x, y)?;
    psnr_values(x.data(), y.data(), 1.0)
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with a 1-D kernel.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one channel pair, peak 1.
pub fn ssim_plane(x: &[f32], y: &[f32], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let (mx, oh, ow) = filter_valid(&xs, h, w, &k);
    let (my, ..) = filter_valid(&ys, h, w, &k);
    let (sxx, ..) = filter_valid(&prod(&xs, &xs), h, w, &k);
    let (syy, ..) = filter_valid(&prod(&ys, &ys), h, w, &k);
    let (sxy, ..) = filter_valid(&prod(&xs, &ys), h, w, &k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean of per-channel SSIM.
pub fn ssim(x: &Frame, y: &Frame) -> Result<f64> {
    check_same(x, y)?;
    let (h, w) = (x.height(), x.width());
    let mut s = 0.0;
    for c in 0..3 {
        s += ssim_plane(x.channel(c), y.channel(c), h, w)?;
    }
    Ok(s / 3.0)
}

/// Source of flow fields for the warping error.
pub trait FlowEstimator: Sync {
    /// Flow with `prev(p) ~ next(p + F(p))`.
    fn flow(&self, prev: &Frame, next: &Frame) -> Result<FlowField>;
}

/// The curator's pyramidal Lucas-Kanade.
#[derive(Debug, Clone, Copy, Default)]
pub struct LucasKanade;

impl FlowEstimator for LucasKanade {
    fn flow(&self, prev: &Frame, next: &Frame) -> Result<FlowField> {
        compute_flow(prev, next)
    }
}

/// Forward-backward disagreement (px) beyond which a pixel is occluded.
pub const FB_THRESHOLD: f32 = 1.0;

/// Masked MSE between frame `cur` and `prev` warped onto it.
pub fn pair_warp_error(prev: &Frame, cur: &Frame, est: &dyn FlowEstimator) -> Result<f64> {
    check_same(prev, cur)?;
    // cur(p) ~ prev(p + f(p)), prev(q) ~ cur(q + b(q))
    let f = est.flow(cur, prev)?;
    let b = est.flow(prev, cur)?;
    let (h, w) = (cur.height(), cur.width());
    let planes: Vec<Plane> = (0..3)
        .map(|c| Plane {
            height: h,
            width: w,
            data: prev.channel(c).to_vec(),
        })
        .collect();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = f.at(y, x);
            let (ty, tx) = (y as f32 + v, x as f32 + u);
            if ty < 0.0 || tx < 0.0 || ty > (h - 1) as f32 || tx > (w - 1) as f32 {
                continue;
            }
            let (bu, bv) = b.sample(ty, tx);
            if ((u + bu).powi(2) + (v + bv).powi(2)).sqrt() >= FB_THRESHOLD {
                continue;
            }
            for (c, p) in planes.iter().enumerate() {
                let d = (cur.get(c, y, x) - p.sample(ty, tx)) as f64;
                sum += d * d / 3.0;
            }
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean masked warping MSE over consecutive pairs, before scaling.
pub fn warping_error_raw(clip: &VideoClip, est: &dyn FlowEstimator) -> Result<f64> {
    if clip.len() < 2 {
        return Err(Error::Argument("warping error needs at least 2 frames".into()));
    }
    let frames = clip.frames();
    let errs = frames
        .windows(2)
        .map(|p| pair_warp_error(&p[0], &p[1], est))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Reported warping error: the raw mean times 1000.
pub fn warping_error(clip: &VideoClip) -> Result<f64> {
    Ok(warping_error_raw(clip, &LucasKanade)? * 1e3)
}

/// Per-frame mean of a full-reference metric over a clip pair.
fn clip_mean(pred: &VideoClip, reference: &VideoClip, f: fn(&Frame, &Frame) -> Result<f64>) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "prediction has {} frames, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in pred.frames().iter().zip(reference.frames()) {
        total += f(a, b)?;
    }
    Ok(total / pred.len() as f64)
}

pub fn clip_psnr(pred: &VideoClip, reference: &VideoClip) -> Result<f64> {
    clip_mean(pred, reference, psnr)
}

pub fn clip_ssim(pred: &VideoClip, reference: &VideoClip) -> Result<f64> {
    clip_mean(pred, reference, ssim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Psnr, Metric::Ssim, Metric::Warp],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::config("eval.metrics", "at least one metric is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub values: BTreeMap<String, MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub warp_scale: f64,
    pub clips: Vec<ClipMetrics>,
    /// Arithmetic mean over clips; `inf` if any clip is infinite.
    pub mean: BTreeMap<String, MetricValue>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn mean_of(&self, m: Metric) -> Option<f64> {
        self.mean.get(m.name()).map(|v| v.0)
    }
}

/// Metrics for a single clip (pair).
pub fn evaluate_clip(pred: &VideoClip, reference: Option<&VideoClip>, metrics: &[Metric]) -> Result<BTreeMap<String, MetricValue>> {
    let mut out = BTreeMap::new();
    for &m in metrics {
        let v = match (m, reference) {
            (Metric::Warp, _) => warping_error(pred)?,
            (_, None) => return Err(Error::Argument(format!("metric `{}` needs a reference", m.name()))),
            (Metric::Psnr, Some(r)) => clip_psnr(pred, r)?,
            (Metric::Ssim, Some(r)) => clip_ssim(pred, r)?,
        };
        out.insert(m.name().to_string(), MetricValue(v));
    }
    Ok(out)
}

/// Builds a report from named per-clip values.
pub fn assemble_report(metrics: &[Metric], clips: Vec<ClipMetrics>) -> MetricReport {
    let mut mean = BTreeMap::new();
    if !clips.is_empty() {
        for m in metrics {
            let vals: Vec<f64> = clips.iter().filter_map(|c| c.values.get(m.name()).map(|v| v.0)).collect();
            mean.insert(m.name().to_string(), MetricValue(vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    MetricReport {
        metrics: metrics.to_vec(),
        warp_scale: 1e3,
        clips,
        mean,
    }
}

/// Evaluates every clip directory under `pred`, pairing with the same-named
/// directory under `reference`.
pub fn evaluate(pred: &Path, reference: Option<&Path>, metrics: &[Metric]) -> Result<MetricReport> {
    if metrics.is_empty() {
        return Err(Error::Argument("no metrics requested".into()));
    }
    if reference.is_none() {
        if let Some(m) = metrics.iter().find(|m| m.needs_reference()) {
            return Err(Error::Argument(format!("metric `{}` needs --ref", m.name())));
        }
    }
    let dirs = media::list_clip_dirs(pred)?;
    if dirs.is_empty() {
        return Err(Error::Argument(format!("no clips under {}", pred.display())));
    }
    let clips = dirs
        .par_iter()
        .map(|dir| {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let p = media::read_clip(dir)?;
            let r = match reference {
                Some(root) => {
                    let rdir = if media::is_clip_dir(root) && dirs.len() == 1 {
                        root.to_path_buf()
                    } else {
                        root.join(&name)
                    };
                    Some(media::read_clip(&rdir)?)
                }
                None => None,
            };
            Ok(ClipMetrics {
                clip: name,
                values: evaluate_clip(&p, r.as_ref(), metrics)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_report(metrics, clips))
}
