//! Classical quality proxies, each mapped into `[0, 1]`.

use crate::media::{Frame, VideoClip};

pub const SHARPNESS: &str = "sharpness";
pub const CONTRAST: &str = "contrast";
pub const COLORFULNESS: &str = "colorfulness";
pub const BUILTIN_SCORERS: [&str; 3] = [SHARPNESS, CONTRAST, COLORFULNESS];

/// Laplacian variance `v` squashed as `v / (v + 1e-3)`.
pub fn sharpness(frame: &Frame) -> f64 {
    let l = frame.luminance();
    let (h, w) = (l.height as isize, l.width as isize);
    let mut vals = Vec::with_capacity(l.data.len());
    for y in 0..h {
        for x in 0..w {
            let lap = l.at_clamped(y - 1, x) + l.at_clamped(y + 1, x) + l.at_clamped(y, x - 1) + l.at_clamped(y, x + 1)
                - 4.0 * l.at_clamped(y, x);
            vals.push(lap as f64);
        }
    }
    let var = variance(&vals);
    var / (var + 1e-3)
}

/// RMS contrast of luma, doubled so a full-range binary pattern scores 1.
pub fn contrast(frame: &Frame) -> f64 {
    let l = frame.luminance();
    let vals: Vec<f64> = l.data.iter().map(|&v| v as f64).collect();
    (2.0 * variance(&vals).sqrt()).min(1.0)
}

/// Hasler-Susstrunk colorfulness on `[0, 1]` RGB, divided by 0.6 and capped.
pub fn colorfulness(frame: &Frame) -> f64 {
    let (r, g, b) = (frame.channel(0), frame.channel(1), frame.channel(2));
    let mut rg = Vec::with_capacity(r.len());
    let mut yb = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        rg.push((r[i] - g[i]) as f64);
        yb.push(0.5 * (r[i] + g[i]) as f64 - b[i] as f64);
    }
    let (mrg, myb) = (mean(&rg), mean(&yb));
    let c = (variance(&rg) + variance(&yb)).sqrt() + 0.3 * (mrg * mrg + myb * myb).sqrt();
    (c / 0.6).min(1.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Frames a clip-level score is averaged over: at most 8, evenly spaced.
fn sample_indices(n: usize) -> Vec<usize> {
    let k = n.min(8);
    (0..k).map(|i| if k == 1 { 0 } else { i * (n - 1) / (k - 1) }).collect()
}

/// Clip-level score of a built-in scorer, or `None` for an unknown name.
pub fn score_builtin(name: &str, clip: &VideoClip) -> Option<f64> {
    let f: fn(&Frame) -> f64 = match name {
        SHARPNESS => sharpness,
        CONTRAST => contrast,
        COLORFULNESS => colorfulness,
        _ => return None,
    };
    let idx = sample_indices(clip.len());
    Some(idx.iter().map(|&i| f(&clip.frames()[i])).sum::<f64>() / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_scores_zero() {
        let f = Frame::filled(16, 16, 0.5).unwrap();
        assert_eq!(sharpness(&f), 0.0);
        assert_eq!(contrast(&f), 0.0);
        assert_eq!(colorfulness(&f), 0.0);
    }

    #[test]
    fn checkerboard_is_sharp_and_contrasty() {
        let f = Frame::from_fn(16, 16, |_, y, x| ((x + y) % 2) as f32).unwrap();
        // Laplacian is +-4 everywhere except the replicated border.
        assert!(sharpness(&f) > 0.99);
        assert!((contrast(&f) - 1.0).abs() < 1e-9);
        assert_eq!(colorfulness(&f), 0.0);
    }

    #[test]
    fn pure_red_is_colorful() {
        let f = Frame::from_fn(8, 8, |c, _, _| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        // sigma = 0, mean rg = 1, mean yb = 0.5 -> 0.3 * sqrt(1.25)
        let expected = 0.3 * 1.25f64.sqrt() / 0.6;
        assert!((colorfulness(&f) - expected).abs() < 1e-6);
    }

    #[test]
    fn sample_indices_cover_ends() {
        assert_eq!(sample_indices(1), vec![0]);
        assert_eq!(sample_indices(3), vec![0, 1, 2]);
        let idx = sample_indices(60);
        assert_eq!((idx.len(), idx[0], idx[7]), (8, 0, 59));
    }
}
