//! Dense pyramidal Lucas-Kanade optical flow.
//!
//! Convention: `prev(p) ~ next(p + F(p))`, with `F = (u, v)` in pixels along
//! x (columns) and y (rows). Work is fixed (levels, window, iterations), and
//! there is no randomness, so results are exactly reproducible.

use crate::error::{Error, Result};
use crate::media::{Frame, Plane};

/// Per-pixel motion vectors between two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    /// Constant flow, e.g. a known global translation.
    pub fn uniform(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Euclidean length of every vector.
    pub fn magnitude(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.u.iter().zip(&self.v).map(|(u, v)| (u * u + v * v).sqrt()).collect(),
        }
    }

    /// Bilinearly interpolated vector at a continuous position.
    pub fn sample(&self, y: f32, x: f32) -> (f32, f32) {
        (sample_slice(&self.u, self.height, self.width, y, x), sample_slice(&self.v, self.height, self.width, y, x))
    }
}

fn sample_slice(data: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Fixed solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// Pyramid depth upper bound; levels stop before a side drops below 16.
    pub max_levels: usize,
    /// Half-width of the square aggregation window.
    pub radius: usize,
    pub iterations: usize,
    /// Tikhonov term added to the structure tensor diagonal.
    pub regularization: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            max_levels: 4,
            radius: 4,
            iterations: 6,
            regularization: 1e-4,
        }
    }
}

/// 5-tap binomial blur then 2x decimation.
fn pyr_down(p: &Plane) -> Plane {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = (p.height, p.width);
    let mut tmp = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wt) in K.iter().enumerate() {
                acc += wt * p.at_clamped(y as isize, x as isize + k as isize - 2);
            }
            tmp.data[y * w + x] = acc;
        }
    }
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Plane::zeros(nh, nw);
    for y in 0..nh {
        for x in 0..nw {
            let mut acc = 0.0;
            for (k, wt) in K.iter().enumerate() {
                acc += wt * tmp.at_clamped(2 * y as isize + k as isize - 2, 2 * x as isize);
            }
            out.data[y * nw + x] = acc;
        }
    }
    out
}

/// Box sums over a `(2r+1)^2` window, edge-clamped, via an integral image.
fn box_sum(data: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0f64;
        for x in 0..w {
            row += data[y * w + x] as f64;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s as f32;
        }
    }
    out
}

/// Central-difference gradients `(d/dx, d/dy)`.
fn gradients(p: &Plane) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (p.height, p.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = 0.5 * (p.at_clamped(y, x + 1) - p.at_clamped(y, x - 1));
            gy[i] = 0.5 * (p.at_clamped(y + 1, x) - p.at_clamped(y - 1, x));
        }
    }
    (gx, gy)
}

fn refine(prev: &Plane, next: &Plane, flow: &mut FlowField, params: &FlowParams) {
    let (h, w) = (prev.height, prev.width);
    let (px, py) = gradients(prev);
    let n = h * w;
    for _ in 0..params.iterations {
        let mut warped = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                warped.data[i] = next.sample(y as f32 + flow.v[i], x as f32 + flow.u[i]);
            }
        }
        let (wx, wy) = gradients(&warped);
        let mut ixx = vec![0.0; n];
        let mut ixy = vec![0.0; n];
        let mut iyy = vec![0.0; n];
        let mut ixt = vec![0.0; n];
        let mut iyt = vec![0.0; n];
        for i in 0..n {
            let gx = 0.5 * (px[i] + wx[i]);
            let gy = 0.5 * (py[i] + wy[i]);
            let it = warped.data[i] - prev.data[i];
            ixx[i] = gx * gx;
            ixy[i] = gx * gy;
            iyy[i] = gy * gy;
            ixt[i] = gx * it;
            iyt[i] = gy * it;
        }
        let r = params.radius;
        let (sxx, sxy, syy) = (box_sum(&ixx, h, w, r), box_sum(&ixy, h, w, r), box_sum(&iyy, h, w, r));
        let (sxt, syt) = (box_sum(&ixt, h, w, r), box_sum(&iyt, h, w, r));
        for i in 0..n {
            let a = sxx[i] + params.regularization;
            let d = syy[i] + params.regularization;
            let b = sxy[i];
            let det = a * d - b * b;
            if det <= 0.0 {
                continue;
            }
            let du = -(d * sxt[i] - b * syt[i]) / det;
            let dv = -(a * syt[i] - b * sxt[i]) / det;
            flow.u[i] += du;
            flow.v[i] += dv;
        }
    }
}

/// Resets the flow to zero wherever zero motion explains the windowed data
/// at least as well as the estimate. Static regions next to moving ones
/// would otherwise inherit motion from coarse levels.
fn prefer_zero(prev: &Plane, next: &Plane, flow: &mut FlowField, radius: usize) {
    let (h, w) = (prev.height, prev.width);
    let mut r_flow = vec![0.0f32; h * w];
    let mut r_zero = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = prev.data[i];
            r_flow[i] = (next.sample(y as f32 + flow.v[i], x as f32 + flow.u[i]) - p).powi(2);
            r_zero[i] = (next.data[i] - p).powi(2);
        }
    }
    let (r_flow, r_zero) = (box_sum(&r_flow, h, w, radius), box_sum(&r_zero, h, w, radius));
    for i in 0..h * w {
        if r_zero[i] <= r_flow[i] {
            flow.u[i] = 0.0;
            flow.v[i] = 0.0;
        }
    }
}

fn upsample_flow(coarse: &FlowField, h: usize, w: usize) -> FlowField {
    let mut out = FlowField::zeros(h, w);
    let sy = coarse.height as f32 / h as f32;
    let sx = coarse.width as f32 / w as f32;
    for y in 0..h {
        for x in 0..w {
            let cy = (y as f32 + 0.5) * sy - 0.5;
            let cx = (x as f32 + 0.5) * sx - 0.5;
            let (u, v) = coarse.sample(cy, cx);
            out.u[y * w + x] = u / sx;
            out.v[y * w + x] = v / sy;
        }
    }
    out
}

/// Flow between two luma planes.
pub fn compute_flow_planes(prev: &Plane, next: &Plane, params: &FlowParams) -> Result<FlowField> {
    if prev.height != next.height || prev.width != next.width {
        return Err(Error::Argument(format!(
            "flow frames differ in size: {}x{} vs {}x{}",
            prev.height, prev.width, next.height, next.width
        )));
    }
    let mut pyr = vec![(prev.clone(), next.clone())];
    while pyr.len() < params.max_levels.max(1) {
        let (p, q) = pyr.last().unwrap();
        if p.height / 2 < 16 || p.width / 2 < 16 {
            break;
        }
        let down = (pyr_down(p), pyr_down(q));
        pyr.push(down);
    }
    let mut flow: Option<FlowField> = None;
    for (p, q) in pyr.iter().rev() {
        let mut f = match flow {
            Some(coarse) => upsample_flow(&coarse, p.height, p.width),
            None => FlowField::zeros(p.height, p.width),
        };
        refine(p, q, &mut f, params);
        prefer_zero(p, q, &mut f, params.radius);
        flow = Some(f);
    }
    Ok(flow.unwrap())
}

/// Dense flow from `prev` to `next` on luminance with default settings.
pub fn compute_flow(prev: &Frame, next: &Frame) -> Result<FlowField> {
    compute_flow_planes(&prev.luminance(), &next.luminance(), &FlowParams::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth random-ish texture sampled at a continuous offset.
    pub(crate) fn texture(h: usize, w: usize, dx: f32, dy: f32) -> Frame {
        Frame::from_fn(h, w, |c, y, x| {
            let (x, y) = (x as f32 - dx, y as f32 - dy);
            let v = 0.5
                + 0.18 * (0.31 * x + 0.17 * y).sin()
                + 0.14 * (0.23 * y - 0.11 * x + 1.3).sin()
                + 0.1 * (0.41 * x + 0.37 * y + c as f32).cos()
                + 0.06 * (0.57 * y + 0.05 * x).sin();
            v.clamp(0.0, 1.0)
        })
        .unwrap()
    }

    fn interior_mean(f: &FlowField, margin: usize) -> (f32, f32) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for y in margin..f.height - margin {
            for x in margin..f.width - margin {
                let (u, v) = f.at(y, x);
                su += u;
                sv += v;
                n += 1.0;
            }
        }
        (su / n, sv / n)
    }

    #[test]
    fn identical_frames_have_zero_flow() {
        let a = texture(48, 64, 0.0, 0.0);
        let f = compute_flow(&a, &a).unwrap();
        assert_eq!((f.height, f.width), (48, 64));
        assert!(f.magnitude().data.iter().all(|&m| m < 0.05));
    }

    #[test]
    fn recovers_translations() {
        for (dx, dy) in [(2.0, 1.0), (-3.0, 0.0)] {
            let a = texture(64, 80, 0.0, 0.0);
            let b = texture(64, 80, dx, dy);
            let f = compute_flow(&a, &b).unwrap();
            let (u, v) = interior_mean(&f, 8);
            assert!((u - dx).abs() < 0.25 && (v - dy).abs() < 0.25, "({u}, {v}) vs ({dx}, {dy})");
        }
    }

    #[test]
    fn deterministic_and_checked() {
        let a = texture(32, 32, 0.0, 0.0);
        let b = texture(32, 32, 1.0, 0.5);
        assert_eq!(compute_flow(&a, &b).unwrap(), compute_flow(&a, &b).unwrap());
        let c = texture(32, 16, 0.0, 0.0);
        assert!(matches!(compute_flow(&a, &c), Err(Error::Argument(_))));
    }
}
