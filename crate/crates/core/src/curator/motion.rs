//! Motion-area detection: aggregate flow magnitude, threshold, pad, clamp.

use serde::{Deserialize, Serialize};

use super::flow::FlowField;
use crate::media::Plane;

/// Inclusive pixel box: rows `i_min..=i_max`, columns `j_min..=j_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionBBox {
    pub i_min: usize,
    pub j_min: usize,
    pub i_max: usize,
    pub j_max: usize,
}

impl MotionBBox {
    pub fn height(&self) -> usize {
        self.i_max - self.i_min + 1
    }

    pub fn width(&self) -> usize {
        self.j_max - self.j_min + 1
    }
}

/// Per-pixel maximum of `|F|` over all flow fields.
pub fn motion_map(flows: &[FlowField]) -> Plane {
    let first = &flows[0];
    let mut m = Plane::zeros(first.height, first.width);
    for f in flows {
        for (dst, (u, v)) in m.data.iter_mut().zip(f.u.iter().zip(&f.v)) {
            *dst = dst.max((u * u + v * v).sqrt());
        }
    }
    m
}

/// Box of the mask, padded by `padding` and clamped to the grid.
pub fn mask_bbox(mask: &[bool], height: usize, width: usize, padding: usize) -> Option<MotionBBox> {
    let (mut i_min, mut j_min, mut i_max, mut j_max) = (usize::MAX, usize::MAX, 0, 0);
    let mut any = false;
    for i in 0..height {
        for j in 0..width {
            if mask[i * width + j] {
                any = true;
                i_min = i_min.min(i);
                j_min = j_min.min(j);
                i_max = i_max.max(i);
                j_max = j_max.max(j);
            }
        }
    }
    any.then(|| MotionBBox {
        i_min: i_min.saturating_sub(padding),
        j_min: j_min.saturating_sub(padding),
        i_max: (i_max + padding).min(height - 1),
        j_max: (j_max + padding).min(width - 1),
    })
}

/// `None` when no pixel moves faster than `tau` (a static clip).
pub fn motion_bbox(flows: &[FlowField], tau: f64, padding: usize) -> Option<MotionBBox> {
    if flows.is_empty() {
        return None;
    }
    let m = motion_map(flows);
    let mask: Vec<bool> = m.data.iter().map(|&v| v as f64 > tau).collect();
    mask_bbox(&mask, m.height, m.width, padding)
}
