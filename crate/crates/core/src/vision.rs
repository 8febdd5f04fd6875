//! Deterministic image primitives.
//!
//! Resampling is bilinear with half-pixel centers and clamp-to-edge:
//! `src = (dst + 0.5) · (in / out) − 0.5`, clamped to `[0, in − 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// 8-bit sRGB image, interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "ImageU8 {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_f32(&self) -> ImageF32 {
        let hw = self.height * self.width;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        ImageF32 {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Three channel-major `f32` planes with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::contract(format!(
                "ImageF32 {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Image with every channel of every pixel set to `v`.
    pub fn filled(height: usize, width: usize, v: f32) -> Result<Self> {
        Self::new(height, width, vec![v; 3 * height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn short_side(&self) -> usize {
        self.height.min(self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rounds to 8 bits after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> ImageU8 {
        let hw = self.height * self.width;
        let mut pixels = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                pixels[i * 3 + c] = (self.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        ImageU8 {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

pub fn decode_png(path: &Path) -> Result<ImageU8> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageU8::new(h as usize, w as usize, rgb.into_raw())
}

pub fn load_image(path: &Path) -> Result<ImageF32> {
    decode_png(path).map(|img| img.to_f32())
}

pub fn encode_png(img: &ImageU8, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::contract("pixel buffer does not match dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Source taps and weight for each destination coordinate along one axis.
fn axis_taps(src_len: usize, dst_len: usize, offset: usize, count: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / dst_len as f64;
    let max = (src_len - 1) as f64;
    (offset..offset + count)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resample to `out_h × out_w`, materialising only the window
/// `[x0, x0+win_w) × [y0, y0+win_h)` of the full output.
pub fn resample_window(
    img: &ImageF32,
    out_h: usize,
    out_w: usize,
    x0: usize,
    y0: usize,
    win_w: usize,
    win_h: usize,
) -> Result<ImageF32> {
    if out_h == 0 || out_w == 0 || x0 + win_w > out_w || y0 + win_h > out_h || win_w == 0 || win_h == 0 {
        return Err(Error::contract(format!(
            "resample window {win_w}x{win_h}+{x0}+{y0} outside {out_w}x{out_h}"
        )));
    }
    let xs = axis_taps(img.width, out_w, x0, win_w);
    let ys = axis_taps(img.height, out_h, y0, win_h);
    // Source rows are interpolated horizontally once, then blended per
    // output row.
    let (first, last) = (ys[0].0, ys[ys.len() - 1].1);
    let mut rows = vec![0.0f32; (last - first + 1) * win_w];
    let mut data = Vec::with_capacity(3 * win_w * win_h);
    for c in 0..3 {
        let plane = img.plane(c);
        for (r, out) in (first..=last).zip(rows.chunks_exact_mut(win_w)) {
            let src = &plane[r * img.width..(r + 1) * img.width];
            for (o, &(c0, c1, tx)) in out.iter_mut().zip(&xs) {
                *o = lerp(src[c0], src[c1], tx);
            }
        }
        for &(r0, r1, ty) in &ys {
            let top = &rows[(r0 - first) * win_w..][..win_w];
            let bot = &rows[(r1 - first) * win_w..][..win_w];
            data.extend(top.iter().zip(bot).map(|(&a, &b)| lerp(a, b, ty)));
        }
    }
    ImageF32::new(win_h, win_w, data)
}

pub fn resize(img: &ImageF32, out_h: usize, out_w: usize) -> Result<ImageF32> {
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    resample_window(img, out_h, out_w, 0, 0, out_w, out_h)
}

/// Output dimensions `(h, w)` when the shorter side becomes `target`.
pub fn short_side_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let short = height.min(width);
    let scaled = |d: usize| ((d as f64) * target as f64 / short as f64).round() as usize;
    if height <= width {
        (target, scaled(width).max(1))
    } else {
        (scaled(height).max(1), target)
    }
}

/// Aspect-preserving resize so the shorter side equals `target`.
pub fn resize_short_side(img: &ImageF32, target: usize) -> Result<ImageF32> {
    if target == 0 {
        return Err(Error::contract("resize target must be positive"));
    }
    let (h, w) = short_side_dims(img.height, img.width, target);
    resize(img, h, w)
}

/// Resize by a uniform factor; each dimension becomes `round(dim · s)`.
pub fn scale_by_factor(img: &ImageF32, s: f64) -> Result<ImageF32> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::contract(format!("scale factor must be positive, got {s}")));
    }
    let h = (img.height as f64 * s).round() as usize;
    let w = (img.width as f64 * s).round() as usize;
    if h < 1 || w < 1 {
        return Err(Error::contract(format!(
            "scaling {}x{} by {s} leaves an empty image",
            img.width, img.height
        )));
    }
    resize(img, h, w)
}

/// Exact sub-rectangle copy.
pub fn crop(img: &ImageF32, x: usize, y: usize, w: usize, h: usize) -> Result<ImageF32> {
    if w == 0 || h == 0 || x + w > img.width || y + h > img.height {
        return Err(Error::contract(format!(
            "crop {w}x{h}+{x}+{y} outside {}x{} image",
            img.width, img.height
        )));
    }
    let mut data = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        let plane = img.plane(c);
        for row in y..y + h {
            data.extend_from_slice(&plane[row * img.width + x..row * img.width + x + w]);
        }
    }
    ImageF32::new(h, w, data)
}

/// Mirror over the main diagonal: `out[c, x, y] = in[c, y, x]`.
pub fn transpose_image(img: &ImageF32) -> ImageF32 {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; img.data.len()];
    for c in 0..3 {
        let src = img.plane(c);
        let dst = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[x * h + y] = src[y * w + x];
            }
        }
    }
    ImageF32 {
        height: w,
        width: h,
        data,
    }
}

pub fn hflip(img: &ImageF32) -> ImageF32 {
    let mut out = img.clone();
    for row in out.data.chunks_exact_mut(img.width) {
        row.reverse();
    }
    out
}

/// Per-channel normalisation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// `(v − mean_c) / std_c` as a `[3, H, W]` tensor.
pub fn normalize(img: &ImageF32, norm: &Normalization) -> Result<Tensor<f32>> {
    if norm.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("normalization std must be positive"));
    }
    let hw = img.height * img.width;
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        data.extend(img.plane(c).iter().map(|&v| (v - m) / s));
    }
    debug_assert_eq!(data.len(), 3 * hw);
    Tensor::new(vec![3, img.height, img.width], data)
}

/// Inverse of [`normalize`].
pub fn denormalize(t: &Tensor<f32>, norm: &Normalization) -> Result<ImageF32> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::contract(format!("denormalize expects [3,H,W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / hw;
            v * norm.std[c] + norm.mean[c]
        })
        .collect();
    ImageF32::new(s[1], s[2], data)
}
