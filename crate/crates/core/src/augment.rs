//! Zoom-level registry, training/eval zoom pipelines, and the test-time
//! patch extractor.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::{resample_window, resize, short_side_dims, transpose_image, hflip, ImageF32};

/// One zoom level: optional short-side resize, then optional square crop.
/// Both unset means the original image passes through.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoomSpec {
    pub name: String,
    #[serde(default)]
    pub resize: Option<usize>,
    #[serde(default)]
    pub crop: Option<usize>,
    #[serde(default)]
    pub head_index: usize,
}

impl ZoomSpec {
    pub fn new(name: &str, resize: Option<usize>, crop: Option<usize>) -> Self {
        Self {
            name: name.to_owned(),
            resize,
            crop,
            head_index: 0,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.resize.is_none() && self.crop.is_none()
    }
}

/// Ordered zoom levels; a spec's position is its head index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ZoomSpec>", into = "Vec<ZoomSpec>")]
pub struct ZoomRegistry {
    specs: Vec<ZoomSpec>,
}

impl TryFrom<Vec<ZoomSpec>> for ZoomRegistry {
    type Error = Error;

    fn try_from(specs: Vec<ZoomSpec>) -> Result<Self> {
        Self::new(specs)
    }
}

impl From<ZoomRegistry> for Vec<ZoomSpec> {
    fn from(r: ZoomRegistry) -> Self {
        r.specs
    }
}

pub const BUILTIN_REGISTRIES: [&str; 4] = ["baseline", "multi_crop", "multi_resize", "combined"];

impl ZoomRegistry {
    /// Validates names and sizes and assigns `head_index` by position.
    pub fn new(mut specs: Vec<ZoomSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::usage("zoom registry needs at least one spec"));
        }
        let mut names = HashSet::new();
        for (i, s) in specs.iter_mut().enumerate() {
            if !names.insert(s.name.clone()) {
                return Err(Error::usage(format!("duplicate zoom spec name `{}`", s.name)));
            }
            if s.resize == Some(0) || s.crop == Some(0) {
                return Err(Error::usage(format!("zoom spec `{}` has a zero size", s.name)));
            }
            s.head_index = i;
        }
        Ok(Self { specs })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let s = |n: &str, r: Option<usize>, c: Option<usize>| ZoomSpec::new(n, r, c);
        let specs = match name {
            "baseline" => vec![s("r224_c224", Some(224), Some(224))],
            "multi_crop" => vec![
                s("crop224", None, Some(224)),
                s("crop256", None, Some(256)),
                s("crop299", None, Some(299)),
                s("crop384", None, Some(384)),
                s("full", None, None),
            ],
            "multi_resize" => vec![
                s("resize224", Some(224), None),
                s("resize256", Some(256), None),
                s("resize299", Some(299), None),
                s("resize384", Some(384), None),
                s("resize512", Some(512), None),
            ],
            "combined" => vec![
                s("crop224", None, Some(224)),
                s("crop384", None, Some(384)),
                s("r768_c384", Some(768), Some(384)),
                s("r512_c224", Some(512), Some(224)),
            ],
            other => {
                return Err(Error::usage(format!(
                    "unknown registry `{other}`; expected one of {BUILTIN_REGISTRIES:?}"
                )))
            }
        };
        Self::new(specs)
    }

    pub fn specs(&self) -> &[ZoomSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Heads whose crop size equals `size`, in registry order.
    pub fn heads_for_crop(&self, size: usize) -> Vec<usize> {
        self.specs
            .iter()
            .filter(|s| s.crop == Some(size))
            .map(|s| s.head_index)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZoomMode {
    /// Uniform random crop offset.
    Train,
    /// Centered crop offset.
    Eval,
}

/// Resize (if set) then crop (if set). An image too small for the crop has
/// its short side upscaled to the crop size first.
pub fn apply_zoom<R: Rng + ?Sized>(img: &ImageF32, spec: &ZoomSpec, mode: ZoomMode, rng: &mut R) -> Result<ImageF32> {
    let mut dims = (img.height(), img.width());
    if let Some(r) = spec.resize {
        dims = short_side_dims(dims.0, dims.1, r);
    }
    let Some(c) = spec.crop else {
        return resize(img, dims.0, dims.1);
    };
    let resized;
    let mut src = img;
    if dims.0.min(dims.1) < c {
        if dims != (img.height(), img.width()) {
            resized = resize(img, dims.0, dims.1)?;
            src = &resized;
        }
        dims = short_side_dims(dims.0, dims.1, c);
    }
    let (h, w) = dims;
    let (x, y) = match mode {
        ZoomMode::Train => (rng.gen_range(0..=w - c), rng.gen_range(0..=h - c)),
        ZoomMode::Eval => ((w - c) / 2, (h - c) / 2),
    };
    resample_window(src, h, w, x, y, c, c)
}

/// Deterministic center-crop variant of [`apply_zoom`].
pub fn apply_zoom_eval(img: &ImageF32, spec: &ZoomSpec) -> Result<ImageF32> {
    apply_zoom(img, spec, ZoomMode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))
}

/// Evenly spaced `rows × cols` patch origins, row-major; duplicates are kept.
pub fn uniform_grid_offsets(width: usize, height: usize, c: usize, rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if rows < 2 || cols < 2 {
        return Err(Error::contract(format!("patch grid needs at least 2x2, got {rows}x{cols}")));
    }
    if width < c || height < c {
        return Err(Error::contract(format!("{c}px patch does not fit {width}x{height}")));
    }
    let axis = |extent: usize, n: usize| -> Vec<usize> {
        (0..n)
            .map(|i| (i as f64 * (extent - c) as f64 / (n - 1) as f64).round() as usize)
            .collect()
    };
    let (xs, ys) = (axis(width, cols), axis(height, rows));
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub scales: Vec<f64>,
    pub patch_sizes: Vec<usize>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub transpose: bool,
    pub hflip: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.5, 1.0, 2.0],
            patch_sizes: vec![224, 384],
            grid_rows: 3,
            grid_cols: 3,
            transpose: true,
            hflip: false,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::usage("tta.scales must be a non-empty list of positive numbers"));
        }
        if self.patch_sizes.is_empty() || self.patch_sizes.contains(&0) {
            return Err(Error::usage("tta.patch_sizes must be a non-empty list of positive sizes"));
        }
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return Err(Error::usage("tta grid must be at least 2x2"));
        }
        Ok(())
    }

    fn variants(&self) -> Vec<Variant> {
        let mut v = vec![Variant::Original];
        if self.transpose {
            v.push(Variant::Transposed);
        }
        if self.hflip {
            v.push(Variant::Flipped);
        }
        v
    }

    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols * self.patch_sizes.len() * self.scales.len() * self.variants().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Variant {
    Original,
    Transposed,
    Flipped,
}

/// One emitted patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaPatch {
    pub image: ImageF32,
    pub size: usize,
}

/// The full patch sequence of one image with identical patches stored once.
#[derive(Clone, Debug)]
pub struct TtaPlan {
    /// Index into `unique` for each emitted patch, in extraction order.
    pub order: Vec<usize>,
    pub unique: Vec<TtaPatch>,
}

impl TtaPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn expand(&self) -> Vec<TtaPatch> {
        self.order.iter().map(|&i| self.unique[i].clone()).collect()
    }
}

/// Order: scales, then patch sizes, then grid row-major, then
/// original / transposed / flipped for each grid cell.
pub fn plan_tta_patches(img: &ImageF32, cfg: &TtaConfig) -> Result<TtaPlan> {
    cfg.validate()?;
    let variants = cfg.variants();
    let mut order = Vec::with_capacity(cfg.patch_count());
    let mut unique = Vec::new();
    let mut seen: HashMap<(usize, usize, usize, usize, Variant), usize> = HashMap::new();
    for (si, &s) in cfg.scales.iter().enumerate() {
        let scaled = crate::vision::scale_by_factor(img, s)?;
        for &c in &cfg.patch_sizes {
            let (mut h, mut w) = (scaled.height(), scaled.width());
            if h.min(w) < c {
                (h, w) = short_side_dims(h, w, c);
            }
            for (x, y) in uniform_grid_offsets(w, h, c, cfg.grid_rows, cfg.grid_cols)? {
                let mut base = None;
                for &v in &variants {
                    let key = (si, c, x, y, v);
                    let idx = match seen.get(&key) {
                        Some(&i) => i,
                        None => {
                            let patch = match &base {
                                Some(p) => p,
                                None => base.insert(resample_window(&scaled, h, w, x, y, c, c)?),
                            };
                            let image = match v {
                                Variant::Original => patch.clone(),
                                Variant::Transposed => transpose_image(patch),
                                Variant::Flipped => hflip(patch),
                            };
                            unique.push(TtaPatch { image, size: c });
                            seen.insert(key, unique.len() - 1);
                            unique.len() - 1
                        }
                    };
                    order.push(idx);
                }
            }
        }
    }
    Ok(TtaPlan { order, unique })
}

/// Every test-time patch of `img` in extraction order.
pub fn extract_tta_patches(img: &ImageF32, cfg: &TtaConfig) -> Result<Vec<TtaPatch>> {
    plan_tta_patches(img, cfg).map(|p| p.expand())
}
