//! Multi-task training over zoom heads.
//!
//! Each step draws one image batch, pushes every zoom view of it through the
//! shared backbone into that view's head, sums the per-head losses and takes
//! a single Adam step.

mod checkpoint;
mod loss;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_zoom, ZoomMode, ZoomRegistry};
use crate::datasets::Manifest;
use crate::error::{Error, Result};
use crate::evalkit::inference::{batch_tensor, group_by_size, Predictor};
use crate::evalkit::metrics::srcc;
use crate::model::{BoundParams, MultiHeadModel};
use crate::ndgrad::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::vision::{load_image, ImageF32, Normalization};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use loss::{mse_loss, plcc_loss, total_loss, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            seed: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::usage("train.epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::usage(format!(
                "train.batch_size must be at least 2 for the PLCC term, got {}",
                self.batch_size
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::usage("train.optimizer: need lr > 0, betas in [0,1), epsilon > 0"));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps of the summed head losses.
    pub step_loss: f64,
    /// Validation SRCC per head; `NaN` when the ranking was degenerate.
    pub val_srcc: Vec<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let heads = history.first().map_or(0, |r| r.val_srcc.len());
    let mut s = String::from("epoch,step_loss");
    for h in 0..heads {
        s.push_str(&format!(",val_srcc_head{h}"));
    }
    s.push('\n');
    for r in history {
        s.push_str(&format!("{},{}", r.epoch, r.step_loss));
        for v in &r.val_srcc {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Lowest-index head with the highest SRCC; `NaN` never wins.
pub fn select_best_head(val_srcc: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in val_srcc.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub struct TrainOutcome {
    pub model: MultiHeadModel<f32>,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Everything a run needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub registry: ZoomRegistry,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub norm: Normalization,
    pub run_config: Option<serde_json::Value>,
}

fn load_all(manifest: &Manifest) -> Result<Vec<ImageF32>> {
    manifest.records().iter().map(|r| load_image(&r.image_path)).collect()
}

fn mos_stats(manifest: &Manifest) -> (f64, f64) {
    let n = manifest.len() as f64;
    let mean = manifest.records().iter().map(|r| r.mos).sum::<f64>() / n;
    let var = manifest.records().iter().map(|r| (r.mos - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// One head's share of a training step: its input views, grouped into
/// same-size batches, and the targets in concatenated group order.
#[derive(Clone, Debug)]
pub struct HeadBatch<T> {
    pub head: usize,
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<T>,
}

/// Σ over heads of `total_loss(head(features(views)), targets)`, recorded on `tape`.
pub fn summed_head_loss<T: Scalar>(
    model: &MultiHeadModel<T>,
    tape: &mut Tape<T>,
    bound: &BoundParams,
    batches: &[HeadBatch<T>],
    cfg: &LossConfig,
) -> Result<Var> {
    let mut total = None;
    for hb in batches {
        let mut parts = Vec::with_capacity(hb.inputs.len());
        for input in &hb.inputs {
            let x = tape.leaf(input)?;
            let feats = model.forward_features(tape, bound, x)?;
            parts.push(model.forward_head(tape, bound, feats, hb.head)?);
        }
        let pred = match parts.as_slice() {
            [] => return Err(Error::contract(format!("head {} has no inputs", hb.head))),
            [p] => *p,
            _ => tape.concat(&parts)?,
        };
        let target = tape.constant(&[hb.targets.len()], hb.targets.clone())?;
        let loss = total_loss(tape, pred, target, cfg)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    total.ok_or_else(|| Error::contract("empty zoom registry"))
}

/// Draws every zoom view of `images` and groups them per head.
fn zoom_batches(
    images: &[&ImageF32],
    targets: &[f32],
    setup: &TrainSetup,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<HeadBatch<f32>>> {
    let mut out = Vec::with_capacity(setup.registry.len());
    for spec in setup.registry.specs() {
        let views = images
            .iter()
            .map(|img| apply_zoom(img, spec, ZoomMode::Train, rng))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageF32> = views.iter().collect();
        let mut hb = HeadBatch {
            head: spec.head_index,
            inputs: Vec::new(),
            targets: Vec::with_capacity(images.len()),
        };
        for group in group_by_size(&refs) {
            let imgs: Vec<&ImageF32> = group.iter().map(|&i| refs[i]).collect();
            hb.inputs.push(batch_tensor(&imgs, &setup.norm)?);
            hb.targets.extend(group.iter().map(|&i| targets[i]));
        }
        out.push(hb);
    }
    Ok(out)
}

/// Validation SRCC of every head on full, unscaled images.
pub fn validation_srcc(predictor: &Predictor, images: &[ImageF32], mos: &[f64]) -> Result<Vec<f64>> {
    let heads: Vec<usize> = (0..predictor.model.num_heads()).collect();
    let min = predictor.model.config().min_input();
    let (mut refs, mut targets) = (Vec::new(), Vec::new());
    for (img, &m) in images.iter().zip(mos) {
        if img.short_side() >= min {
            refs.push(img);
            targets.push(m);
        }
    }
    let scores = predictor.head_scores(&refs, &heads)?;
    Ok(heads
        .iter()
        .map(|&h| {
            let preds: Vec<f64> = scores.iter().map(|s| s[h]).collect();
            srcc(&preds, &targets).unwrap_or(f64::NAN)
        })
        .collect())
}

/// Trains `model` in place of a fresh copy and returns the final state,
/// its checkpoint and the per-epoch history. `on_epoch` sees each record as
/// it is produced.
pub fn train(
    mut model: MultiHeadModel<f32>,
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    setup: &TrainSetup,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    setup.loss.validate()?;
    setup.train.validate()?;
    if model.num_heads() != setup.registry.len() {
        return Err(Error::contract(format!(
            "model has {} heads, registry has {} zoom levels",
            model.num_heads(),
            setup.registry.len()
        )));
    }
    if train_manifest.len() < 2 {
        return Err(Error::data("training needs at least 2 samples"));
    }
    let images = load_all(train_manifest)?;
    let val_images = load_all(val_manifest)?;
    let val_mos: Vec<f64> = val_manifest.records().iter().map(|r| r.mos).collect();
    let (mos_mean, mos_std) = mos_stats(train_manifest);
    let targets: Vec<f32> = train_manifest
        .records()
        .iter()
        .map(|r| ((r.mos - mos_mean) / mos_std) as f32)
        .collect();

    let cfg = setup.train;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_A11_u64);
    let mut adam = AdamState::new(cfg.optimizer, model.named_params().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut predictor = Predictor {
        model: model.clone(),
        registry: setup.registry.clone(),
        best_head: 0,
        mos_mean: 0.0,
        mos_std: 1.0,
        norm: setup.norm,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let imgs: Vec<&ImageF32> = batch.iter().map(|&i| &images[i]).collect();
            let tgt: Vec<f32> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let batches = zoom_batches(&imgs, &tgt, setup, &mut rng)?;
            let loss = summed_head_loss(&model, &mut tape, &bound, &batches, &setup.loss)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            drop(tape);
            model.zero_grads();
            model.accumulate_grads(&grads, &bound)?;
            adam.step(model.params_mut())?;
            loss_sum += value as f64;
            steps += 1;
        }
        predictor.model = model.clone();
        let record = EpochRecord {
            epoch,
            step_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            val_srcc: validation_srcc(&predictor, &val_images, &val_mos)?,
        };
        on_epoch(&record);
        history.push(record);
    }
    let best_head = select_best_head(&history.last().expect("epochs > 0").val_srcc);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        backbone: *model.config(),
        registry: setup.registry.clone(),
        loss: setup.loss,
        train: cfg,
        mos_mean,
        mos_std,
        best_head,
        epoch: cfg.epochs,
        seed: cfg.seed,
        run_config: setup.run_config.clone(),
    };
    let checkpoint = Checkpoint::from_model(meta, &model);
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
    })
}
