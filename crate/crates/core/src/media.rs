//! Pixel-space media: frames, clips, still images, and the frame-directory
//! format they live in on disk.
//!
//! A clip directory holds `000001.png`, `000002.png`, ... (8-bit RGB, lossless)
//! next to a `meta.json` sidecar:
//!
//! ```json
//! { "fps": 24.0, "width": 64, "height": 48, "frame_count": 60, "colorspace": "rgb8" }
//! ```
//!
//! In memory, pixels are `f32` in `[0, 1]`, channel-major (`3 x H x W`).

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};

pub const META_FILE: &str = "meta.json";
pub const COLORSPACE: &str = "rgb8";

/// One RGB frame, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    /// Wraps a `3 x height x width` buffer. Values must be finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("frame dims must be positive, got {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "frame buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Like [`Frame::new`] but clamps into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    /// Builds a frame from `f(channel, y, x)`; the result is clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Rec.601 luma plane.
    pub fn luminance(&self) -> Plane {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        let data = r
            .iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect();
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Rows `top..top+height`, columns `left..left+width`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Frame> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Frame {
            height,
            width,
            data,
        })
    }

    fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Frame {
        let n = height * width;
        let mut data = vec![0.0f32; 3 * n];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Frame {
            height,
            width,
            data,
        }
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[3 * i + c] = (self.data[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

/// Single-channel float image, used for luma, flow components and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Edge-clamped read.
    #[inline]
    pub fn at_clamped(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous position (pixel centers at integers),
    /// edge-clamped.
    #[inline]
    pub fn sample(&self, y: f32, x: f32) -> f32 {
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// A sequence of same-shaped frames at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    fps: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Argument("a clip needs at least one frame".into()))?;
        let (h, w) = (first.height, first.width);
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.height != h || f.width != w) {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, clip is {h}x{w}",
                f.height, f.width
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Argument(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// `x(t) - x(t-1)` for `t = 1..n`, flattened like the frames.
    pub fn deltas(&self) -> Vec<Vec<f32>> {
        self.frames
            .windows(2)
            .map(|w| w[1].data.iter().zip(&w[0].data).map(|(b, a)| b - a).collect())
            .collect()
    }

    /// Frames `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<VideoClip> {
        if start >= end || end > self.len() {
            return Err(Error::Argument(format!("bad frame range {start}..{end} of {}", self.len())));
        }
        VideoClip::new(self.frames[start..end].to_vec(), self.fps)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<VideoClip> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.crop(top, left, height, width))
            .collect::<Result<Vec<_>>>()?;
        VideoClip::new(frames, self.fps)
    }

    pub fn map_frames(&self, f: impl FnMut(&Frame) -> Result<Frame>) -> Result<VideoClip> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        VideoClip::new(frames, self.fps)
    }

    pub fn meta(&self) -> ClipMeta {
        ClipMeta {
            fps: self.fps,
            width: self.width(),
            height: self.height(),
            frame_count: self.len(),
            colorspace: COLORSPACE.to_string(),
        }
    }
}

/// A still image; behaves as a one-frame clip wherever a clip is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample(pub Frame);

impl ImageSample {
    pub fn frame(&self) -> &Frame {
        &self.0
    }

    pub fn into_clip(self) -> VideoClip {
        VideoClip {
            frames: vec![self.0],
            fps: 1.0,
        }
    }
}

/// `meta.json` sidecar of a frame directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub colorspace: String,
}

pub fn read_meta(dir: &Path) -> Result<ClipMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Load {
            path: dir.to_path_buf(),
            reason: LoadError::MissingMeta,
        },
        _ => Error::io(&path, e),
    })?;
    let meta: ClipMeta = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        reason: LoadError::BadMeta(e.to_string()),
    })?;
    if meta.colorspace != COLORSPACE {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: LoadError::BadMeta(format!("unsupported colorspace `{}`", meta.colorspace)),
        });
    }
    Ok(meta)
}

/// True when `dir` looks like a frame directory.
pub fn is_clip_dir(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

fn frame_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name.strip_suffix(".png") else { continue };
        if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
            files.push((stem.parse::<usize>().unwrap(), entry.path()));
        }
    }
    files.sort_by_key(|(i, _)| *i);
    Ok(files)
}

fn decode_png(path: &Path, index: usize) -> Result<(usize, usize, Vec<u8>)> {
    let load_err = |message: String| Error::Load {
        path: path.to_path_buf(),
        reason: LoadError::Decode { index, message },
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| load_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| load_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| load_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(load_err(format!("unsupported color type {other:?}"))),
    };
    Ok((h, w, rgb))
}

/// Reads a frame directory. Frames come back in numeric order, `/255`-scaled.
pub fn read_clip(dir: &Path) -> Result<VideoClip> {
    let meta = read_meta(dir)?;
    let load_err = |reason| Error::Load {
        path: dir.to_path_buf(),
        reason,
    };
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(load_err(LoadError::NoFrames));
    }
    for (expected, (found, _)) in (1..).zip(&files) {
        if *found != expected {
            return Err(load_err(LoadError::NumberingGap {
                expected,
                found: *found,
            }));
        }
    }
    if files.len() != meta.frame_count {
        return Err(load_err(LoadError::CountMismatch {
            declared: meta.frame_count,
            found: files.len(),
        }));
    }
    let mut frames = Vec::with_capacity(files.len());
    for (index, path) in &files {
        let (h, w, rgb) = decode_png(path, *index)?;
        if h != meta.height || w != meta.width {
            return Err(load_err(LoadError::InconsistentShape {
                index: *index,
                want_w: meta.width,
                want_h: meta.height,
                got_w: w,
                got_h: h,
            }));
        }
        frames.push(Frame::from_rgb8(h, w, &rgb));
    }
    VideoClip::new(frames, meta.fps)
}

/// Writes a clip as a frame directory. An existing non-empty directory is
/// refused unless `force` is set, in which case its contents are replaced.
pub fn write_clip(clip: &VideoClip, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Exists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in clip.frames().iter().enumerate() {
        let path = dir.join(format!("{:06}.png", i + 1));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), frame.width as u32, frame.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::io(&path, std::io::Error::other(e));
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&frame.to_rgb8()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&clip.meta())?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
}

/// Lists clip directories directly under `root` (sorted by name). If `root`
/// is itself a clip directory it is returned alone.
pub fn list_clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if is_clip_dir(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() && is_clip_dir(&path) {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Source coordinate of output index `i` under the half-pixel-center
/// convention: `(i + 0.5) * in / out - 0.5`.
#[inline]
fn half_pixel_source(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Per-axis resampling taps: `(first_index, weights)` per output sample.
type Taps = Vec<Vec<(usize, f32)>>;

fn bilinear_taps(in_len: usize, out_len: usize) -> Taps {
    (0..out_len)
        .map(|i| {
            let s = half_pixel_source(i, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let f = (s - i0 as f64) as f32;
            if i1 == i0 || f == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - f), (i1, f)]
            }
        })
        .collect()
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Keys bicubic taps; the kernel is stretched by the scale when
/// downsampling so the result is antialiased.
fn bicubic_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = half_pixel_source(i, in_len, out_len);
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f32)> = Vec::new();
            let mut total = 0.0;
            let mut raw = Vec::new();
            for k in lo..=hi {
                let w = cubic((k as f64 - center) / stretch);
                if w != 0.0 {
                    raw.push((k.clamp(0, in_len as isize - 1) as usize, w));
                    total += w;
                }
            }
            for (k, w) in raw {
                match taps.iter_mut().find(|(j, _)| *j == k) {
                    Some(t) => t.1 += (w / total) as f32,
                    None => taps.push((k, (w / total) as f32)),
                }
            }
            taps
        })
        .collect()
}

fn resample_plane(src: &[f32], h: usize, w: usize, rows: &Taps, cols: &Taps) -> Vec<f32> {
    let (new_h, new_w) = (rows.len(), cols.len());
    let mut tmp = vec![0.0f32; h * new_w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, taps) in cols.iter().enumerate() {
            tmp[y * new_w + x] = taps.iter().map(|&(k, wt)| row[k] * wt).sum();
        }
    }
    let mut out = vec![0.0f32; new_h * new_w];
    for (y, taps) in rows.iter().enumerate() {
        let dst = &mut out[y * new_w..(y + 1) * new_w];
        for &(k, wt) in taps {
            let srow = &tmp[k * new_w..(k + 1) * new_w];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += s * wt;
            }
        }
    }
    out
}

fn resize_with(frame: &Frame, new_h: usize, new_w: usize, taps: fn(usize, usize) -> Taps) -> Result<Frame> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::Argument(format!("resize target must be positive, got {new_h}x{new_w}")));
    }
    let rows = taps(frame.height, new_h);
    let cols = taps(frame.width, new_w);
    let mut data = Vec::with_capacity(3 * new_h * new_w);
    for c in 0..3 {
        data.extend(resample_plane(frame.channel(c), frame.height, frame.width, &rows, &cols));
    }
    Frame::from_clamped(new_h, new_w, data)
}

/// Bilinear resize with half-pixel centers (`src = (dst + 0.5) * in/out - 0.5`),
/// edge-clamped, no antialiasing. This is the pre-upscale used before encoding.
pub fn resize_bilinear(frame: &Frame, new_h: usize, new_w: usize) -> Result<Frame> {
    resize_with(frame, new_h, new_w, bilinear_taps)
}

/// Keys bicubic resize (a = -0.5), half-pixel centers, antialiased when
/// shrinking. Output is clamped to `[0, 1]`.
pub fn resize_bicubic(frame: &Frame, new_h: usize, new_w: usize) -> Result<Frame> {
    resize_with(frame, new_h, new_w, bicubic_taps)
}

pub fn upscale_clip_bilinear(clip: &VideoClip, scale: usize) -> Result<VideoClip> {
    clip.map_frames(|f| resize_bilinear(f, f.height * scale, f.width * scale))
}
