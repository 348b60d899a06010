//! Hard-cut detection on downscaled luma.

use crate::media::{Frame, Plane};

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Box-averaged luma on a grid of at most `side x side` cells.
fn thumbnail(frame: &Frame, side: usize) -> Plane {
    let l = frame.luminance();
    let th = l.height.min(side).max(1);
    let tw = l.width.min(side).max(1);
    let mut out = Plane::zeros(th, tw);
    for ty in 0..th {
        let (y0, y1) = (ty * l.height / th, (ty + 1) * l.height / th);
        for tx in 0..tw {
            let (x0, x1) = (tx * l.width / tw, (tx + 1) * l.width / tw);
            let mut s = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += l.at(y, x) as f64;
                }
            }
            out.data[ty * tw + tx] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
        }
    }
    out
}

/// Mean absolute thumbnail difference between each consecutive pair.
pub fn frame_differences(frames: &[Frame], side: usize) -> Vec<f64> {
    let thumbs: Vec<Plane> = frames.iter().map(|f| thumbnail(f, side)).collect();
    thumbs
        .windows(2)
        .map(|w| {
            let s: f64 = w[0].data.iter().zip(&w[1].data).map(|(a, b)| (a - b).abs() as f64).sum();
            s / w[0].data.len() as f64
        })
        .collect()
}

/// Splits the clip before every frame whose difference to its predecessor
/// exceeds `threshold`. The segments partition `0..n`.
pub fn detect_scenes(frames: &[Frame], threshold: f64, side: usize) -> Vec<Segment> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut segments = Vec::new();
    let mut start = 0;
    for (i, d) in frame_differences(frames, side).into_iter().enumerate() {
        if d > threshold {
            segments.push(Segment { start, end: i + 1 });
            start = i + 1;
        }
    }
    segments.push(Segment {
        start,
        end: frames.len(),
    });
    segments
}

/// Segments with at least `min_frames` frames.
pub fn keep_long(segments: &[Segment], min_frames: usize) -> Vec<Segment> {
    segments.iter().copied().filter(|s| s.len() >= min_frames).collect()
}
