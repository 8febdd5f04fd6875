//! Procedural distortion dataset with analytic pseudo-MOS.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest_csv, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::vision::{encode_png, ImageF32};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianBlur,
    AdditiveNoise,
    ContrastReduction,
    Pixelate,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::GaussianBlur,
        Family::AdditiveNoise,
        Family::ContrastReduction,
        Family::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianBlur => "gaussian_blur",
            Family::AdditiveNoise => "additive_noise",
            Family::ContrastReduction => "contrast_reduction",
            Family::Pixelate => "pixelate",
        }
    }

    /// Strength for levels 1..=5, mildest first.
    pub fn strengths(self) -> [f64; 5] {
        match self {
            Family::GaussianBlur => [0.8, 1.6, 2.4, 3.2, 4.0],
            Family::AdditiveNoise => [0.02, 0.05, 0.09, 0.14, 0.20],
            Family::ContrastReduction => [0.85, 0.7, 0.55, 0.4, 0.25],
            Family::Pixelate => [2.0, 4.0, 6.0, 8.0, 12.0],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_refs: usize,
    pub image_size: usize,
    pub families: Vec<Family>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_refs: 10,
            image_size: 128,
            families: Family::ALL.to_vec(),
            seed: 0,
        }
    }
}

pub const LEVELS: u32 = 5;

pub fn pseudo_mos(level: u32) -> f64 {
    6.0 - level as f64
}

/// Low-pass width of the base noise at 128 px, scaled with the image size.
const BASE_SIGMA: f64 = 3.0;
/// Standard deviation of each base channel around mid-grey.
const BASE_CONTRAST: f64 = 0.15;

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur of a single plane, clamp-to-edge.
fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + clampi(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn noise_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Per-channel Gaussian low-pass of seeded noise, standardised so every
/// reference has the same mean, contrast and spectrum. Only the noise
/// realisation differs between references, which keeps a quality score
/// learned on some of them calibrated on the rest.
fn base_image(size: usize, rng: &mut ChaCha8Rng) -> ImageF32 {
    let n = size * size;
    let sigma = BASE_SIGMA * size as f64 / 128.0;
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let plane = blur_plane(&noise_plane(rng, n), size, size, sigma);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-12);
        data.extend(plane.iter().map(|&v| (0.5 + BASE_CONTRAST * (v as f64 - mean) / std).clamp(0.0, 1.0) as f32));
    }
    ImageF32::new(size, size, data).expect("base image dims")
}

fn map_planes(img: &ImageF32, f: impl Fn(&[f32]) -> Vec<f32>) -> ImageF32 {
    let data = (0..3).flat_map(|c| f(img.plane(c))).collect();
    ImageF32::new(img.height(), img.width(), data).expect("same dims")
}

pub(crate) fn distort(img: &ImageF32, family: Family, level: u32, rng: &mut ChaCha8Rng) -> ImageF32 {
    let strength = family.strengths()[level as usize - 1];
    let (h, w) = (img.height(), img.width());
    match family {
        Family::GaussianBlur => map_planes(img, |p| blur_plane(p, h, w, strength)),
        Family::AdditiveNoise => {
            let normal = Normal::new(0.0f32, strength as f32).unwrap();
            let data = img
                .data()
                .iter()
                .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect();
            ImageF32::new(h, w, data).expect("same dims")
        }
        Family::ContrastReduction => {
            let f = strength as f32;
            map_planes(img, |p| {
                let mean = p.iter().sum::<f32>() / p.len() as f32;
                p.iter().map(|&v| mean + f * (v - mean)).collect()
            })
        }
        Family::Pixelate => {
            let b = strength as usize;
            map_planes(img, |p| {
                let mut out = vec![0.0; p.len()];
                for by in (0..h).step_by(b) {
                    for bx in (0..w).step_by(b) {
                        let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                        let mut sum = 0.0;
                        for y in by..ye {
                            sum += p[y * w + bx..y * w + xe].iter().sum::<f32>();
                        }
                        let mean = sum / ((ye - by) * (xe - bx)) as f32;
                        for y in by..ye {
                            out[y * w + bx..y * w + xe].iter_mut().for_each(|v| *v = mean);
                        }
                    }
                }
                out
            })
        }
    }
}

/// Writes `num_refs` references and their distortions as PNGs under
/// `out_dir/images/`, plus `out_dir/synthetic.csv`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.num_refs == 0 || spec.image_size == 0 || spec.families.is_empty() {
        return Err(Error::usage("synthetic spec needs refs, size and at least one family"));
    }
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::new();
    for r in 0..spec.num_refs {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ r as u64);
        let base = base_image(spec.image_size, &mut rng);
        let ref_path = img_dir.join(format!("ref{r:03}.png"));
        encode_png(&base.to_u8(), &ref_path)?;
        let mut pristine = SampleRecord::new(&ref_path, 5.0);
        pristine.dist_type = Some("pristine".into());
        pristine.ref_path = Some(ref_path.clone());
        records.push(pristine);
        for &family in &spec.families {
            for level in 1..=LEVELS {
                let img = distort(&base, family, level, &mut rng);
                let path = img_dir.join(format!("ref{r:03}_{family}_{level}.png"));
                encode_png(&img.to_u8(), &path)?;
                let mut rec = SampleRecord::new(&path, pseudo_mos(level));
                rec.dist_type = Some(family.name().into());
                rec.dist_level = Some(level);
                rec.ref_path = Some(ref_path.clone());
                records.push(rec);
            }
        }
    }
    let manifest = Manifest::new(records, "synthetic")?;
    write_manifest_csv(&manifest, &out_dir.join("synthetic.csv"))?;
    Ok(manifest)
}
