//! Procedural test data: textured scenes of gratings and antialiased shapes
//! under a global pan plus per-shape motion, and the labeled corpora used by
//! the curation and smoke tests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curator::{CurationConfig, Rejection};
use crate::error::Result;
use crate::media::{self, Frame, VideoClip};

#[derive(Debug, Clone, PartialEq)]
struct Grating {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Shape {
    disc: bool,
    cy: f32,
    cx: f32,
    /// Radius or half side.
    size: f32,
    vy: f32,
    vx: f32,
    color: [f32; 3],
}

/// How content moves over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    /// Everything shifts by `(vx, vy)` px/frame; shapes add their own drift.
    Pan { vx: f32, vy: f32 },
    /// Nothing changes between frames.
    Still,
    /// Still background with one small shape oscillating by `amplitude` px.
    Local { amplitude: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    base: [f32; 3],
    gratings: Vec<Grating>,
    shapes: Vec<Shape>,
    motion: Motion,
}

impl Scene {
    /// Random scene whose mean brightness sits near `level`.
    pub fn random(seed: u64, level: f32, motion: Motion) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        let base = tint.map(|t| (level + t).clamp(0.05, 0.95));
        let gratings = (0..4)
            .map(|_| {
                let period: f32 = rng.random_range(5.0..24.0);
                let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
                let k = std::f32::consts::TAU / period;
                let a: f32 = rng.random_range(0.03..0.08);
                Grating {
                    fx: k * angle.cos(),
                    fy: k * angle.sin(),
                    phase: rng.random_range(0.0..std::f32::consts::TAU),
                    amp: std::array::from_fn(|_| a * rng.random_range(0.6..1.4)),
                }
            })
            .collect();
        let shapes = (0..6)
            .map(|_| Shape {
                disc: rng.random_bool(0.5),
                cy: rng.random_range(0.0..1.0),
                cx: rng.random_range(0.0..1.0),
                size: rng.random_range(4.0..14.0),
                vy: rng.random_range(-0.5..0.5),
                vx: rng.random_range(-0.5..0.5),
                color: std::array::from_fn(|_| (level + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0)),
            })
            .collect();
        Self {
            base,
            gratings,
            shapes,
            motion,
        }
    }

    /// Frame `t` at `h x w`.
    pub fn render(&self, t: usize, h: usize, w: usize) -> Frame {
        let tf = t as f32;
        let (px, py, shape_dt) = match self.motion {
            Motion::Pan { vx, vy } => (vx * tf, vy * tf, tf),
            Motion::Still | Motion::Local { .. } => (0.0, 0.0, 0.0),
        };
        // Shape centres for this frame, in pixels.
        let centres: Vec<(f32, f32)> = self
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut cy = s.cy * h as f32 + py + s.vy * shape_dt;
                let mut cx = s.cx * w as f32 + px + s.vx * shape_dt;
                if let (Motion::Local { amplitude }, 0) = (self.motion, i) {
                    cy = 0.5 * h as f32 + amplitude * (tf * 0.5).sin();
                    cx = 0.5 * w as f32 + amplitude * (tf * 0.35).cos();
                }
                (cy, cx)
            })
            .collect();
        let shapes: &[Shape] = match self.motion {
            Motion::Local { .. } => &self.shapes[..1],
            _ => &self.shapes,
        };
        Frame::from_fn(h, w, |c, y, x| {
            let (yf, xf) = (y as f32 - py, x as f32 - px);
            let mut v = self.base[c];
            for g in &self.gratings {
                v += g.amp[c] * (g.fx * xf + g.fy * yf + g.phase).sin();
            }
            for (s, &(cy, cx)) in shapes.iter().zip(&centres) {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let dist = if s.disc {
                    (dy * dy + dx * dx).sqrt() - s.size
                } else {
                    dy.abs().max(dx.abs()) - s.size
                };
                let cover = (0.5 - dist).clamp(0.0, 1.0);
                v = v * (1.0 - cover) + s.color[c] * cover;
            }
            v.clamp(0.0, 1.0)
        })
        .expect("positive size")
    }

    pub fn clip(&self, frames: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new((0..frames).map(|t| self.render(t, h, w)).collect(), 24.0).expect("nonempty")
    }
}

/// A panning textured clip with per-seed direction and speed.
pub fn moving_clip(seed: u64, frames: usize, h: usize, w: usize) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7665);
    let speed: f32 = rng.random_range(0.5..2.0);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let level = rng.random_range(0.3..0.7);
    Scene::random(
        seed,
        level,
        Motion::Pan {
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
        },
    )
    .clip(frames, h, w)
}

/// Expected pipeline outcome for a labeled clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    Accept,
    Reject(Rejection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledClip {
    pub name: String,
    pub kind: String,
    pub expected: Expected,
}

/// Thresholds the labeled corpus is built around.
pub fn desk_curation_config() -> CurationConfig {
    CurationConfig {
        min_short_side: 64,
        min_frames: 50,
        min_crop_short_side: 64,
        tau: 0.5,
        padding: 8,
        quality_thresholds: BTreeMap::from([("sharpness".to_string(), 0.05)]),
        ..Default::default()
    }
}

fn concat(a: VideoClip, b: VideoClip) -> VideoClip {
    let mut frames = a.into_frames();
    frames.extend(b.into_frames());
    VideoClip::new(frames, 24.0).expect("nonempty")
}

/// The 20-clip labeled curation corpus, in name order.
pub fn curation_corpus() -> Vec<(LabeledClip, VideoClip)> {
    let (h, w) = (96, 128);
    let mut out = Vec::new();
    let mut push = |kind: &str, expected: Expected, clip: VideoClip| {
        let name = format!("{:02}_{kind}", out.len());
        out.push((
            LabeledClip {
                name,
                kind: kind.to_string(),
                expected,
            },
            clip,
        ));
    };
    use Expected::{Accept, Reject};
    for s in 0..7 {
        push("valid", Accept, moving_clip(100 + s, 52, h, w));
    }
    push("lowres", Reject(Rejection::LowResolution), moving_clip(200, 52, 64, 96));
    push("lowres", Reject(Rejection::LowResolution), moving_clip(201, 52, 48, 64));
    push("lowres", Reject(Rejection::LowResolution), moving_clip(202, 52, 128, 64));
    push("short", Reject(Rejection::TooFewFrames), moving_clip(300, 50, h, w));
    push("short", Reject(Rejection::TooFewFrames), moving_clip(301, 30, h, w));
    push("short", Reject(Rejection::TooFewFrames), moving_clip(302, 12, h, w));
    let pan = Motion::Pan { vx: 1.0, vy: 0.5 };
    for s in 0..2 {
        let a = Scene::random(400 + s, 0.25, pan).clip(30, h, w);
        let b = Scene::random(410 + s, 0.75, pan).clip(30, h, w);
        push("cut30", Reject(Rejection::NoLongScene), concat(a, b));
    }
    let a = Scene::random(420, 0.25, pan).clip(60, h, w);
    let b = Scene::random(421, 0.75, pan).clip(60, h, w);
    push("cut60", Accept, concat(a, b));
    for s in 0..2 {
        push("static", Reject(Rejection::Static), Scene::random(500 + s, 0.5, Motion::Still).clip(52, h, w));
    }
    let gray = VideoClip::new(vec![Frame::filled(h, w, 0.5).expect("size"); 52], 24.0).expect("nonempty");
    push("gray", Reject(Rejection::LowQuality), gray);
    push(
        "smallmotion",
        Reject(Rejection::CropTooSmall),
        Scene::random(600, 0.5, Motion::Local { amplitude: 3.0 }).clip(52, h, w),
    );
    out
}

/// Writes the labeled corpus under `dir` plus `labels.json`.
pub fn write_curation_corpus(dir: &Path, force: bool) -> Result<Vec<LabeledClip>> {
    let corpus = curation_corpus();
    let mut labels = Vec::new();
    for (label, clip) in corpus {
        media::write_clip(&clip, &dir.join(&label.name), force)?;
        labels.push(label);
    }
    let path = dir.join("labels.json");
    std::fs::write(&path, serde_json::to_string_pretty(&labels)? + "\n").map_err(|e| crate::Error::io(&path, e))?;
    Ok(labels)
}

/// Curation thresholds for the smoke corpus: small clips, crops aligned so
/// that degradation and the restorer accept them.
pub fn smoke_curation_config() -> CurationConfig {
    CurationConfig {
        min_short_side: 32,
        min_frames: 8,
        min_crop_short_side: 32,
        tau: 0.25,
        padding: 8,
        crop_align: 32,
        ..Default::default()
    }
}

/// Eight small moving clips (12 frames, 64x96).
pub fn write_smoke_corpus(dir: &Path, seed: u64, force: bool) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for k in 0..8u64 {
        let name = format!("smoke_{k:02}");
        media::write_clip(&moving_clip(seed.wrapping_mul(31).wrapping_add(k), 12, 64, 96), &dir.join(&name), force)?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curator::scene::frame_differences;

    #[test]
    fn rendering_is_deterministic() {
        let a = moving_clip(3, 4, 16, 24);
        let b = moving_clip(3, 4, 16, 24);
        assert_eq!(a, b);
        assert_ne!(a.frames()[0], a.frames()[1]);
        assert!(a.frames()[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn still_scene_is_static() {
        let c = Scene::random(1, 0.5, Motion::Still).clip(3, 16, 16);
        assert_eq!(c.frames()[0], c.frames()[2]);
    }

    #[test]
    fn corpus_shape() {
        let corpus = curation_corpus();
        assert_eq!(corpus.len(), 20);
        let accepts = corpus.iter().filter(|(l, _)| l.expected == Expected::Accept).count();
        assert_eq!(accepts, 8);
        // Motion within a scene stays well below the cut threshold; the cut does not.
        let cfg = desk_curation_config();
        let (_, cut) = corpus.iter().find(|(l, _)| l.kind == "cut60").unwrap();
        let d = frame_differences(cut.frames(), cfg.scene_thumbnail);
        let within = d.iter().enumerate().filter(|(i, _)| *i != 59).map(|(_, v)| *v).fold(0.0, f64::max);
        assert!(within < cfg.scene_threshold / 2.0, "{within}");
        assert!(d[59] > 2.0 * cfg.scene_threshold, "{}", d[59]);
    }
}
