//! Full-image and test-time-augmented scoring over a manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::augment::{plan_tta_patches, TtaConfig, ZoomRegistry};
use crate::datasets::Manifest;
use crate::error::{Error, Result};
use crate::model::MultiHeadModel;
use crate::ndgrad::Tensor;
use crate::training::Checkpoint;
use crate::vision::{load_image, normalize, ImageF32, Normalization};

use super::metrics::{plcc, srcc};

/// Largest number of images pushed through the backbone at once.
const MAX_BATCH: usize = 16;

/// Anything that can score images with a chosen set of heads.
pub trait QualityModel {
    fn num_heads(&self) -> usize;

    /// Smallest accepted image side.
    fn min_input(&self) -> usize;

    /// Head used for full-image scoring.
    fn best_head(&self) -> usize;

    /// Heads that score a test-time patch of side `size`.
    fn heads_for_patch(&self, size: usize) -> Vec<usize>;

    /// One score per image in MOS units: the mean over `heads`.
    fn score(&self, images: &[&ImageF32], heads: &[usize]) -> Result<Vec<f64>>;
}

/// Packs same-sized images into one normalised `[B,3,H,W]` tensor.
pub fn batch_tensor(images: &[&ImageF32], norm: &Normalization) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::contract("batched images must share a size"));
        }
        data.extend_from_slice(normalize(img, norm)?.data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Indices of `images` grouped by size, in first-appearance order.
pub fn group_by_size(images: &[&ImageF32]) -> Vec<Vec<usize>> {
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let key = (img.height(), img.width());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.into_iter().map(|(_, v)| v).collect()
}

/// Trained model plus everything needed to report MOS-unit scores.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub model: MultiHeadModel<f32>,
    pub registry: ZoomRegistry,
    pub best_head: usize,
    pub mos_mean: f64,
    pub mos_std: f64,
    pub norm: Normalization,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        if ckpt.meta.best_head >= model.num_heads() {
            return Err(Error::data(format!("checkpoint best_head {} out of range", ckpt.meta.best_head)));
        }
        Ok(Self {
            model,
            registry: ckpt.meta.registry.clone(),
            best_head: ckpt.meta.best_head,
            mos_mean: ckpt.meta.mos_mean,
            mos_std: ckpt.meta.mos_std,
            norm: Normalization::default(),
        })
    }

    /// Normalised-unit scores of every head in `heads` for each image.
    pub fn head_scores(&self, images: &[&ImageF32], heads: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); images.len()];
        for group in group_by_size(images) {
            for chunk in group.chunks(MAX_BATCH) {
                let imgs: Vec<&ImageF32> = chunk.iter().map(|&i| images[i]).collect();
                let emb = self.model.embed(&batch_tensor(&imgs, &self.norm)?)?;
                let per_head = self.model.score_heads(&emb, heads)?;
                for (row, &i) in chunk.iter().enumerate() {
                    out[i] = per_head.iter().map(|h| h[row] as f64).collect();
                }
            }
        }
        Ok(out)
    }
}

impl QualityModel for Predictor {
    fn num_heads(&self) -> usize {
        self.model.num_heads()
    }

    fn min_input(&self) -> usize {
        self.model.config().min_input()
    }

    fn best_head(&self) -> usize {
        self.best_head
    }

    fn heads_for_patch(&self, size: usize) -> Vec<usize> {
        let heads = self.registry.heads_for_crop(size);
        if heads.is_empty() {
            vec![self.best_head]
        } else {
            heads
        }
    }

    fn score(&self, images: &[&ImageF32], heads: &[usize]) -> Result<Vec<f64>> {
        let per = self.head_scores(images, heads)?;
        Ok(per
            .into_iter()
            .map(|s| {
                let mean = s.iter().sum::<f64>() / s.len() as f64;
                mean * self.mos_std + self.mos_mean
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub srcc: f64,
    pub plcc: f64,
    pub n: usize,
    /// Samples that could not be scored.
    pub skipped: usize,
}

/// Parallel lists of scored samples.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PredSet {
    pub ids: Vec<String>,
    pub preds: Vec<f64>,
    pub mos: Vec<f64>,
}

impl PredSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_path,pred,mos\n");
        for ((id, p), m) in self.ids.iter().zip(&self.preds).zip(&self.mos) {
            s.push_str(&format!("{id},{p},{m}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn report(&self, label: &str, skipped: usize) -> Result<MetricReport> {
        Ok(MetricReport {
            label: label.to_owned(),
            srcc: srcc(&self.preds, &self.mos)?,
            plcc: plcc(&self.preds, &self.mos)?,
            n: self.len(),
            skipped,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub preds: PredSet,
    /// Per-sample errors for skipped images, in manifest order.
    pub errors: Vec<(String, String)>,
}

fn finish(label: &str, preds: PredSet, errors: Vec<(String, String)>) -> Result<Evaluation> {
    if preds.len() < 2 {
        return Err(Error::data(format!(
            "{label}: need at least 2 scored samples, got {} ({} skipped)",
            preds.len(),
            errors.len()
        )));
    }
    let report = preds.report(label, errors.len())?;
    Ok(Evaluation { report, preds, errors })
}

fn id_of(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Scores each full image, unscaled and uncropped, with the best head.
pub fn evaluate_no_tta(model: &dyn QualityModel, manifest: &Manifest) -> Result<Evaluation> {
    let mut preds = PredSet::default();
    let mut errors = Vec::new();
    let min = model.min_input();
    let records = manifest.records();
    for chunk in records.chunks(MAX_BATCH) {
        let mut imgs = Vec::new();
        let mut kept = Vec::new();
        for r in chunk {
            match load_image(&r.image_path) {
                Ok(img) if img.short_side() >= min => {
                    imgs.push(img);
                    kept.push(r);
                }
                Ok(img) => errors.push((
                    id_of(&r.image_path),
                    format!("image {}x{} below model minimum {min}", img.width(), img.height()),
                )),
                Err(e) => errors.push((id_of(&r.image_path), e.to_string())),
            }
        }
        if imgs.is_empty() {
            continue;
        }
        let refs: Vec<&ImageF32> = imgs.iter().collect();
        let scores = model.score(&refs, &[model.best_head()])?;
        for (r, s) in kept.into_iter().zip(scores) {
            preds.ids.push(id_of(&r.image_path));
            preds.preds.push(s);
            preds.mos.push(r.mos);
        }
    }
    finish("no_tta", preds, errors)
}

/// Test-time score of one image: every patch is scored by its routed heads
/// and the patch scores are averaged in extraction order.
pub fn tta_score(model: &dyn QualityModel, img: &ImageF32, cfg: &TtaConfig) -> Result<f64> {
    let plan = plan_tta_patches(img, cfg)?;
    let min = model.min_input();
    if let Some(p) = plan.unique.iter().find(|p| p.size < min) {
        return Err(Error::data(format!("patch size {} below model minimum {min}", p.size)));
    }
    let mut by_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in plan.unique.iter().enumerate() {
        by_size.entry(p.size).or_default().push(i);
    }
    let mut unique_scores = vec![0.0; plan.unique.len()];
    for (size, idx) in by_size {
        let heads = model.heads_for_patch(size);
        let imgs: Vec<&ImageF32> = idx.iter().map(|&i| &plan.unique[i].image).collect();
        for (i, s) in idx.iter().zip(model.score(&imgs, &heads)?) {
            unique_scores[*i] = s;
        }
    }
    let scores: Vec<f64> = plan.order.iter().map(|&i| unique_scores[i]).collect();
    Ok(mean_in_order(&scores))
}

/// Left-to-right sum divided by the count.
pub fn mean_in_order(scores: &[f64]) -> f64 {
    let mut sum = 0.0;
    for s in scores {
        sum += s;
    }
    sum / scores.len() as f64
}

pub fn evaluate_tta(model: &dyn QualityModel, manifest: &Manifest, cfg: &TtaConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let mut preds = PredSet::default();
    let mut errors = Vec::new();
    for r in manifest.records() {
        let scored = load_image(&r.image_path).and_then(|img| tta_score(model, &img, cfg));
        match scored {
            Ok(s) => {
                preds.ids.push(id_of(&r.image_path));
                preds.preds.push(s);
                preds.mos.push(r.mos);
            }
            Err(e @ Error::Numeric(_)) => return Err(e),
            Err(e) => errors.push((id_of(&r.image_path), e.to_string())),
        }
    }
    finish("tta", preds, errors)
}
