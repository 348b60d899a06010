//! Raw corpus to training set: metadata filter, scene split, quality filter,
//! then motion-area cropping. Every input gets one manifest record.

pub mod flow;
pub mod motion;
pub mod plugin;
pub mod quality;
pub mod scene;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use flow::{compute_flow, compute_flow_planes, FlowField, FlowParams};
pub use motion::{mask_bbox, motion_bbox, motion_map, MotionBBox};
pub use plugin::{PluginScorer, PluginSpec};
pub use scene::{detect_scenes, keep_long, Segment};

use crate::error::{Error, Result};
use crate::media::{self, ClipMeta, VideoClip};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    /// Short side must be strictly greater.
    pub min_short_side: usize,
    /// Frame count must be strictly greater; scene segments need at least this many.
    pub min_frames: usize,
    /// Mean absolute luma difference between consecutive thumbnails that marks a cut.
    pub scene_threshold: f64,
    /// Thumbnail side used by scene detection.
    pub scene_thumbnail: usize,
    /// Built-in scorers to run.
    pub scorers: Vec<String>,
    /// Minimum score per scorer name; unlisted scores always pass.
    pub quality_thresholds: BTreeMap<String, f64>,
    pub plugins: Vec<PluginSpec>,
    pub plugin_timeout_secs: f64,
    /// Flow magnitude (px/frame) above which a pixel counts as moving.
    pub tau: f64,
    pub padding: usize,
    /// Crops with a shorter side are discarded.
    pub min_crop_short_side: usize,
    /// Crop height and width are floored to a multiple of this.
    pub crop_align: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            min_short_side: 720,
            min_frames: 50,
            scene_threshold: 0.15,
            scene_thumbnail: 32,
            scorers: quality::BUILTIN_SCORERS.iter().map(|s| s.to_string()).collect(),
            quality_thresholds: BTreeMap::new(),
            plugins: Vec::new(),
            plugin_timeout_secs: 60.0,
            tau: 1.0,
            padding: 16,
            min_crop_short_side: 720,
            crop_align: 1,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_frames < 2 {
            return Err(Error::config("curate.min_frames", "must be at least 2"));
        }
        for (key, v) in [
            ("curate.scene_threshold", self.scene_threshold),
            ("curate.tau", self.tau),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        if !self.plugin_timeout_secs.is_finite() || self.plugin_timeout_secs <= 0.0 {
            return Err(Error::config("curate.plugin_timeout_secs", "must be positive"));
        }
        if self.scene_thumbnail == 0 {
            return Err(Error::config("curate.scene_thumbnail", "must be positive"));
        }
        if self.crop_align == 0 {
            return Err(Error::config("curate.crop_align", "must be positive"));
        }
        if self.scorers.is_empty() && self.plugins.is_empty() {
            return Err(Error::config("curate.scorers", "at least one scorer or plugin is required"));
        }
        for s in &self.scorers {
            if !quality::BUILTIN_SCORERS.contains(&s.as_str()) {
                return Err(Error::config(
                    "curate.scorers",
                    format!("unknown scorer `{s}` (built-ins: {})", quality::BUILTIN_SCORERS.join(", ")),
                ));
            }
        }
        for (name, v) in &self.quality_thresholds {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::config(format!("curate.quality_thresholds.{name}"), "must be finite and >= 0"));
            }
        }
        for (k, p) in self.plugins.iter().enumerate() {
            if p.name.is_empty() || p.command.is_empty() {
                return Err(Error::config(format!("curate.plugins.{k}"), "needs a name and a command"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    LowResolution,
    TooFewFrames,
    NoLongScene,
    LowQuality,
    ScorerError,
    Static,
    CropTooSmall,
    LoadError,
}

/// Step 1.
pub fn filter_metadata(meta: &ClipMeta, cfg: &CurationConfig) -> std::result::Result<(), Rejection> {
    if meta.height.min(meta.width) <= cfg.min_short_side {
        return Err(Rejection::LowResolution);
    }
    if meta.frame_count <= cfg.min_frames {
        return Err(Rejection::TooFewFrames);
    }
    Ok(())
}

/// Every score at or above its threshold. A threshold naming a score that
/// was not produced fails.
pub fn passes_thresholds(scores: &BTreeMap<String, f64>, thresholds: &BTreeMap<String, f64>) -> bool {
    thresholds.iter().all(|(name, t)| scores.get(name).is_some_and(|s| s >= t))
}

/// Pixel rectangle a motion box is cropped to, after alignment; `None` when
/// the short side falls below the minimum.
pub fn crop_rect(bbox: &MotionBBox, cfg: &CurationConfig) -> Option<CropRect> {
    let h = bbox.height() / cfg.crop_align * cfg.crop_align;
    let w = bbox.width() / cfg.crop_align * cfg.crop_align;
    (h > 0 && w > 0 && h.min(w) >= cfg.min_crop_short_side).then_some(CropRect {
        top: bbox.i_min,
        left: bbox.j_min,
        height: h,
        width: w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Step 4 tail: crop every frame, or reject the segment.
pub fn crop_and_emit(clip: &VideoClip, bbox: &MotionBBox, cfg: &CurationConfig) -> std::result::Result<VideoClip, Rejection> {
    let r = crop_rect(bbox, cfg).ok_or(Rejection::CropTooSmall)?;
    clip.crop(r.top, r.left, r.height, r.width).map_err(|_| Rejection::CropTooSmall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub start: usize,
    pub end: usize,
    pub scores: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub scorer_errors: Vec<String>,
    pub bbox: Option<MotionBBox>,
    pub crop: Option<CropRect>,
    pub rejection: Option<Rejection>,
    /// Output directory name relative to the output root.
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Input directory name.
    pub input: String,
    pub meta: Option<ClipMeta>,
    /// All detected scene segments before the length filter.
    pub scenes: Vec<Segment>,
    pub segments: Vec<SegmentRecord>,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub config_fingerprint: String,
    pub config: CurationConfig,
    pub inputs: usize,
    pub accepted_clips: usize,
    pub emitted_segments: usize,
    pub records: Vec<ClipRecord>,
}

impl CurationManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn accepted_inputs(&self) -> Vec<&str> {
        self.records.iter().filter(|r| r.accepted).map(|r| r.input.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CurateOptions {
    pub jobs: usize,
    pub force: bool,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self { jobs: 1, force: false }
    }
}

pub struct Curator {
    cfg: CurationConfig,
    plugins: Vec<PluginScorer>,
}

impl Curator {
    pub fn new(cfg: CurationConfig) -> Result<Self> {
        cfg.validate()?;
        let timeout = Duration::from_secs_f64(cfg.plugin_timeout_secs);
        let plugins = cfg.plugins.iter().map(|p| PluginScorer::new(p.clone(), timeout)).collect();
        Ok(Self { cfg, plugins })
    }

    pub fn config(&self) -> &CurationConfig {
        &self.cfg
    }

    /// Built-in proxies plus plugin scores for one segment. Failures are
    /// returned alongside whatever scores were produced.
    pub fn score_quality(&self, clip: &VideoClip, id: &str, clip_path: &Path) -> (BTreeMap<String, f64>, Vec<String>) {
        let mut scores = BTreeMap::new();
        let mut errors = Vec::new();
        for name in &self.cfg.scorers {
            if let Some(v) = quality::score_builtin(name, clip) {
                scores.insert(name.clone(), v);
            }
        }
        for p in &self.plugins {
            match p.score(id, clip_path) {
                Ok(s) => scores.extend(s),
                Err(e) => errors.push(e.to_string()),
            }
        }
        (scores, errors)
    }

    /// Steps 3 and 4 for one kept segment.
    fn process_segment(&self, input: &str, dir: &Path, clip: &VideoClip, seg: Segment) -> Result<(SegmentRecord, Option<VideoClip>)> {
        let part = clip.slice(seg.start, seg.end)?;
        let id = format!("{input}#{}-{}", seg.start, seg.end);
        let (scores, scorer_errors) = self.score_quality(&part, &id, dir);
        let mut rec = SegmentRecord {
            start: seg.start,
            end: seg.end,
            scores,
            scorer_errors,
            bbox: None,
            crop: None,
            rejection: None,
            output: None,
        };
        if !rec.scorer_errors.is_empty() {
            rec.rejection = Some(Rejection::ScorerError);
            return Ok((rec, None));
        }
        if !passes_thresholds(&rec.scores, &self.cfg.quality_thresholds) {
            rec.rejection = Some(Rejection::LowQuality);
            return Ok((rec, None));
        }
        let frames = part.frames();
        let flows = frames
            .windows(2)
            .map(|w| compute_flow(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        rec.bbox = motion_bbox(&flows, self.cfg.tau, self.cfg.padding);
        let Some(bbox) = rec.bbox else {
            rec.rejection = Some(Rejection::Static);
            return Ok((rec, None));
        };
        match crop_and_emit(&part, &bbox, &self.cfg) {
            Ok(out) => {
                rec.crop = crop_rect(&bbox, &self.cfg);
                rec.output = Some(format!("{input}_{:06}_{:06}", seg.start, seg.end));
                Ok((rec, Some(out)))
            }
            Err(r) => {
                rec.rejection = Some(r);
                Ok((rec, None))
            }
        }
    }

    /// All four steps for one input directory; accepted crops are written
    /// under `output`.
    pub fn process_clip(&self, dir: &Path, output: &Path, force: bool) -> ClipRecord {
        let input = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.to_string_lossy().into_owned());
        let mut rec = ClipRecord {
            input: input.clone(),
            meta: None,
            scenes: Vec::new(),
            segments: Vec::new(),
            accepted: false,
            rejection: None,
            error: None,
        };
        if let Err(e) = self.process_into(dir, output, force, &mut rec) {
            rec.accepted = false;
            rec.rejection = rec.rejection.or(Some(Rejection::LoadError));
            rec.error = Some(e.to_string());
        }
        rec
    }

    fn process_into(&self, dir: &Path, output: &Path, force: bool, rec: &mut ClipRecord) -> Result<()> {
        let meta = media::read_meta(dir)?;
        rec.meta = Some(meta.clone());
        if let Err(r) = filter_metadata(&meta, &self.cfg) {
            rec.rejection = Some(r);
            return Ok(());
        }
        let clip = media::read_clip(dir)?;
        rec.scenes = detect_scenes(clip.frames(), self.cfg.scene_threshold, self.cfg.scene_thumbnail);
        let kept = keep_long(&rec.scenes, self.cfg.min_frames);
        if kept.is_empty() {
            rec.rejection = Some(Rejection::NoLongScene);
            return Ok(());
        }
        let mut last = None;
        for seg in kept {
            let (srec, out) = self.process_segment(&rec.input, dir, &clip, seg)?;
            if let (Some(out), Some(name)) = (out, &srec.output) {
                media::write_clip(&out, &output.join(name), force)?;
                rec.accepted = true;
            }
            last = srec.rejection.or(last);
            rec.segments.push(srec);
        }
        if !rec.accepted {
            rec.rejection = last;
        }
        Ok(())
    }
}

/// Runs the pipeline over every clip directory under `input` and writes the
/// crops plus `manifest.json` under `output`. Per-clip failures are recorded
/// and the run continues.
pub fn run_pipeline(input: &Path, output: &Path, cfg: &CurationConfig, opts: &CurateOptions) -> Result<CurationManifest> {
    let curator = Curator::new(cfg.clone())?;
    let dirs = media::list_clip_dirs(input)?;
    let manifest_path = output.join(MANIFEST_FILE);
    if manifest_path.exists() && !opts.force {
        return Err(Error::Exists(manifest_path));
    }
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("worker pool: {e}")))?;
    let records: Vec<ClipRecord> = pool.install(|| {
        dirs.par_iter()
            .map(|d| curator.process_clip(d, output, opts.force))
            .collect()
    });
    let manifest = CurationManifest {
        config_fingerprint: crate::config::fingerprint_of(cfg),
        config: cfg.clone(),
        inputs: records.len(),
        accepted_clips: records.iter().filter(|r| r.accepted).count(),
        emitted_segments: records.iter().flat_map(|r| &r.segments).filter(|s| s.output.is_some()).count(),
        records,
    };
    std::fs::write(&manifest_path, manifest.to_json()?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Output directories of every emitted segment, in manifest order.
pub fn emitted_dirs(manifest: &CurationManifest, output: &Path) -> Vec<PathBuf> {
    manifest
        .records
        .iter()
        .flat_map(|r| &r.segments)
        .filter_map(|s| s.output.as_ref().map(|o| output.join(o)))
        .collect()
}
