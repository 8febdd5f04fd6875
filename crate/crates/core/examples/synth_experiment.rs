//! Trains one registry on a freshly generated synthetic set and reports
//! held-out SRCC/PLCC with and without TTA.
//!
//! `cargo run --release -p zoomiqa --example synth_experiment -- combined 0 20`

use std::time::Instant;

use zoomiqa::augment::{TtaConfig, ZoomRegistry};
use zoomiqa::datasets::{generate_synthetic, split, SyntheticSpec};
use zoomiqa::evalkit::{evaluate_no_tta, evaluate_tta, Predictor};
use zoomiqa::model::{BackboneConfig, MultiHeadModel};
use zoomiqa::training::{train, LossConfig, TrainConfig, TrainSetup};
use zoomiqa::vision::Normalization;

fn main() -> zoomiqa::Result<()> {
    zoomiqa::retain_heap();
    let args: Vec<String> = std::env::args().collect();
    let registry_name = args.get(1).map_or("combined", String::as_str);
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
    let epochs: usize = args.get(3).map_or(20, |s| s.parse().unwrap());
    let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().unwrap());
    let tta = args.get(5).is_some_and(|s| s == "tta");

    let dir = std::env::temp_dir().join(format!("zoomiqa-synth-{}", std::process::id()));
    let all = generate_synthetic(&SyntheticSpec::default(), &dir)?;
    let (train_m, test_m) = split(&all, 0.75, 0)?;
    let registry = ZoomRegistry::builtin(registry_name)?;
    let model = MultiHeadModel::<f32>::init(BackboneConfig::default(), registry.len(), seed)?;
    let mut train_cfg = TrainConfig { epochs, seed, ..Default::default() };
    train_cfg.optimizer.lr = lr;
    let setup = TrainSetup {
        registry,
        loss: LossConfig::default(),
        train: train_cfg,
        norm: Normalization::default(),
        run_config: None,
    };
    let t0 = Instant::now();
    let out = train(model, &train_m, &train_m, &setup, &mut |e| {
        eprintln!("epoch {:>2} loss {:.4} val {:?} [{:.0}s]", e.epoch, e.step_loss, e.val_srcc, t0.elapsed().as_secs_f64())
    })?;
    if let Ok(path) = std::env::var("SAVE_CKPT") {
        zoomiqa::training::save_checkpoint(&out.checkpoint, std::path::Path::new(&path))?;
    }
    let p = Predictor::from_checkpoint(&out.checkpoint)?;
    let r = evaluate_no_tta(&p, &test_m)?.report;
    println!("{registry_name} seed {seed}: no-tta srcc {:.4} plcc {:.4} (best head {}) train {:.0}s", r.srcc, r.plcc, p.best_head, t0.elapsed().as_secs_f64());
    if tta {
        let t1 = Instant::now();
        let r = evaluate_tta(&p, &test_m, &TtaConfig::default())?.report;
        println!("{registry_name} seed {seed}: tta srcc {:.4} plcc {:.4} [{:.0}s]", r.srcc, r.plcc, t1.elapsed().as_secs_f64());
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
