//! Cross-configuration ablation: train each zoom registry per seed, then
//! evaluate with and without test-time augmentation.

use std::fmt::Write as _;

use crate::augment::{TtaConfig, ZoomRegistry};
use crate::datasets::Manifest;
use crate::error::Result;
use crate::model::{BackboneConfig, MultiHeadModel};
use crate::training::{train, LossConfig, TrainConfig, TrainSetup};
use crate::vision::Normalization;

use super::inference::{evaluate_no_tta, evaluate_tta, MetricReport, Predictor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub registry: String,
    pub tta: bool,
}

impl AblationRow {
    pub fn new(registry: &str, tta: bool) -> Self {
        Self {
            registry: registry.to_owned(),
            tta,
        }
    }

    pub fn label(&self) -> String {
        if self.tta {
            format!("{}+tta", self.registry)
        } else {
            self.registry.clone()
        }
    }

    fn marks(&self) -> (bool, bool) {
        match self.registry.as_str() {
            "multi_resize" => (true, false),
            "multi_crop" => (false, true),
            "combined" => (true, true),
            _ => (false, false),
        }
    }
}

/// The five rows of the reference ablation, in order.
pub fn table1_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("baseline", false),
        AblationRow::new("multi_resize", false),
        AblationRow::new("multi_crop", false),
        AblationRow::new("combined", false),
        AblationRow::new("combined", true),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    /// `seed` is overridden per run.
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct RowResult {
    pub row: AblationRow,
    /// One entry per seed: the report, or the failure message.
    pub runs: Vec<(u64, std::result::Result<MetricReport, String>)>,
}

impl RowResult {
    fn ok_reports(&self) -> Vec<&MetricReport> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect()
    }

    pub fn failed(&self) -> bool {
        self.ok_reports().is_empty()
    }

    pub fn mean_srcc(&self) -> Option<f64> {
        let r = self.ok_reports();
        (!r.is_empty()).then(|| r.iter().map(|m| m.srcc).sum::<f64>() / r.len() as f64)
    }

    pub fn mean_plcc(&self) -> Option<f64> {
        let r = self.ok_reports();
        (!r.is_empty()).then(|| r.iter().map(|m| m.plcc).sum::<f64>() / r.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    /// `config,seed,srcc,plcc,n`; one line per run plus a `mean` line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,srcc,plcc,n\n");
        for row in &self.rows {
            let label = row.row.label();
            for (seed, r) in &row.runs {
                match r {
                    Ok(m) => writeln!(s, "{label},{seed},{},{},{}", m.srcc, m.plcc, m.n),
                    Err(_) => writeln!(s, "{label},{seed},FAILED,FAILED,0"),
                }
                .expect("string write");
            }
            match (row.mean_srcc(), row.mean_plcc()) {
                (Some(a), Some(b)) => writeln!(s, "{label},mean,{a},{b},{}", row.ok_reports().len()),
                _ => writeln!(s, "{label},mean,FAILED,FAILED,0"),
            }
            .expect("string write");
        }
        s
    }

    /// Aligned text table with the reference layout.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<14} {:<14} {:<5} {:>7} {:>7}", "Multi-resizing", "Multi-cropping", "TTA", "SRCC", "PLCC").unwrap();
        let mark = |b: bool| if b { "x" } else { "" };
        for row in &self.rows {
            let (resize, crop) = row.row.marks();
            let fmt = |v: Option<f64>| v.map_or("FAILED".to_owned(), |v| format!("{v:.4}"));
            writeln!(
                s,
                "{:<14} {:<14} {:<5} {:>7} {:>7}",
                mark(resize),
                mark(crop),
                mark(row.row.tta),
                fmt(row.mean_srcc()),
                fmt(row.mean_plcc())
            )
            .unwrap();
        }
        s
    }
}

/// Trains every distinct registry once per seed and evaluates all rows that
/// use it, so TTA and no-TTA rows share checkpoints. Failures are recorded
/// per row and the remaining rows continue.
pub fn ablation_run(
    train_manifest: &Manifest,
    val_manifest: &Manifest,
    test_manifest: &Manifest,
    rows: &[AblationRow],
    setup: &AblationSetup,
    log: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    let mut results: Vec<RowResult> = rows
        .iter()
        .map(|r| RowResult {
            row: r.clone(),
            runs: Vec::new(),
        })
        .collect();
    let mut registries: Vec<&str> = Vec::new();
    for r in rows {
        if !registries.contains(&r.registry.as_str()) {
            registries.push(&r.registry);
        }
    }
    for name in registries {
        for &seed in &setup.seeds {
            let trained = ZoomRegistry::builtin(name).and_then(|registry| {
                let model = MultiHeadModel::<f32>::init(setup.backbone, registry.len(), seed)?;
                let run = TrainSetup {
                    registry,
                    loss: setup.loss,
                    train: TrainConfig { seed, ..setup.train },
                    norm: Normalization::default(),
                    run_config: None,
                };
                let out = train(model, train_manifest, val_manifest, &run, &mut |e| {
                    log(&format!("{name} seed {seed} epoch {} loss {:.4}", e.epoch, e.step_loss))
                })?;
                Predictor::from_checkpoint(&out.checkpoint)
            });
            for res in results.iter_mut().filter(|r| r.row.registry == name) {
                let outcome = match &trained {
                    Ok(p) if res.row.tta => evaluate_tta(p, test_manifest, &setup.tta).map(|e| e.report),
                    Ok(p) => evaluate_no_tta(p, test_manifest).map(|e| e.report),
                    Err(e) => Err(crate::error::Error::data(e.to_string())),
                };
                match &outcome {
                    Ok(m) => log(&format!("{} seed {seed}: srcc {:.4} plcc {:.4}", res.row.label(), m.srcc, m.plcc)),
                    Err(e) => log(&format!("{} seed {seed}: FAILED ({e})", res.row.label())),
                }
                res.runs.push((seed, outcome.map_err(|e| e.to_string())));
            }
        }
    }
    Ok(AblationTable { rows: results })
}
