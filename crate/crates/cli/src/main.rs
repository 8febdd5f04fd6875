//! `zoomiqa` command line: synthetic data, training, evaluation, the
//! ablation table and single-image scoring.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use zoomiqa::augment::TtaConfig;
use zoomiqa::datasets::{generate_synthetic, load_manifest_csv, split, write_manifest_csv, SyntheticSpec};
use zoomiqa::evalkit::{
    ablation_run, evaluate_no_tta, evaluate_tta, table1_rows, tta_score, AblationSetup, Predictor, QualityModel,
};
use zoomiqa::training::{load_checkpoint, save_checkpoint, train, write_history_csv, TrainSetup};
use zoomiqa::vision::{load_image, Normalization};
use zoomiqa::{Error, Model32, Result};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "zoomiqa", version, about = "Multi-scale no-reference image quality assessment")]
struct Cli {
    /// Worker threads. Kernels run in one deterministic context, so every
    /// value gives identical results.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic distortion set and a reference-grouped split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        num_refs: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
    },
    /// Train a model and write its checkpoint plus `<out>.history.csv`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation manifest used to pick the best head; defaults to the
        /// training manifest.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest and print SRCC / PLCC.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tta: bool,
        /// Config whose `tta` section replaces the default patch plan.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-image predictions as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the five-row ablation on `train.csv` / `test.csv` in a data dir.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Print the MOS-unit score of one image with 4 decimals.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        tta: bool,
    },
    /// Print the effective configuration as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    registry: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl ConfigArgs {
    /// Loads, overrides and validates, all before any work starts.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        cfg.apply(&Overrides {
            seed: self.seed,
            registry: self.registry.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lambda: self.lambda,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn pick(flag: &Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| from_config.clone())
        .ok_or_else(|| Error::usage(format!("no {what} manifest: pass --{what} or set data.{what}")))
}

fn history_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn cmd_synth(out: &Path, num_refs: usize, size: usize, seed: u64, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::usage("--train-fraction must be in (0, 1)"));
    }
    let spec = SyntheticSpec { num_refs, image_size: size, seed, ..Default::default() };
    let all = generate_synthetic(&spec, out)?;
    let (tr, te) = split(&all, fraction, seed)?;
    write_manifest_csv(&tr, &out.join("train.csv"))?;
    write_manifest_csv(&te, &out.join("test.csv"))?;
    info!("wrote {} images: {} train, {} test", all.len(), tr.len(), te.len());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, train_path: &Path, val_path: Option<&Path>, out: &Path) -> Result<()> {
    let registry = cfg.validate()?;
    let train_m = load_manifest_csv(train_path)?;
    let val_m = match val_path {
        Some(p) => load_manifest_csv(p)?,
        None => train_m.clone(),
    };
    let setup = TrainSetup {
        registry,
        loss: cfg.loss,
        train: cfg.train_config(),
        norm: Normalization::default(),
        run_config: Some(cfg.to_value()),
    };
    let model = Model32::init(cfg.backbone, setup.registry.len(), cfg.seed)?;
    info!(
        "training {} heads, {} parameters, {} samples, {} epochs",
        model.num_heads(),
        model.param_count(),
        train_m.len(),
        setup.train.epochs
    );
    let outcome = train(model, &train_m, &val_m, &setup, &mut |r| {
        let val: Vec<String> = r.val_srcc.iter().map(|v| format!("{v:.4}")).collect();
        info!("epoch {} loss {:.4} val srcc [{}]", r.epoch, r.step_loss, val.join(", "));
    })?;
    save_checkpoint(&outcome.checkpoint, out)?;
    write_history_csv(&outcome.history, &history_path(out))?;
    info!("best head {}; wrote {}", outcome.checkpoint.meta.best_head, out.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, tta: bool, config: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let tta_cfg = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            cfg.tta.validate()?;
            cfg.tta
        }
        None => TtaConfig::default(),
    };
    let predictor = Predictor::from_checkpoint(&load_checkpoint(ckpt)?)?;
    let manifest = load_manifest_csv(data)?;
    let ev = if tta {
        info!("patches per image: {}", tta_cfg.patch_count());
        evaluate_tta(&predictor, &manifest, &tta_cfg)?
    } else {
        info!("full-image scoring with head {}", predictor.best_head());
        evaluate_no_tta(&predictor, &manifest)?
    };
    for (id, msg) in &ev.errors {
        warn!("skipped {id}: {msg}");
    }
    info!("scored {} images, skipped {}", ev.report.n, ev.report.skipped);
    println!("srcc={:.4} plcc={:.4}", ev.report.srcc, ev.report.plcc);
    if let Some(p) = report {
        ev.preds.write_csv(p)?;
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out: &Path, seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(Error::usage("--seeds must be positive"));
    }
    let train_m = load_manifest_csv(&data_dir.join("train.csv"))?;
    let test_m = load_manifest_csv(&data_dir.join("test.csv"))?;
    let setup = AblationSetup {
        backbone: cfg.backbone,
        loss: cfg.loss,
        train: cfg.train_config(),
        tta: cfg.tta.clone(),
        seeds: (cfg.seed..cfg.seed + seeds).collect(),
    };
    let table = ablation_run(&train_m, &train_m, &test_m, &table1_rows(), &setup, &mut |m| info!("{m}"))?;
    std::fs::write(out, table.to_csv()).map_err(|e| Error::io(out, e))?;
    print!("{}", table.to_text());
    if table.rows.iter().all(|r| r.failed()) {
        return Err(Error::data("every ablation row failed"));
    }
    Ok(())
}

fn cmd_score(ckpt: &Path, image: &Path, tta: bool) -> Result<()> {
    let predictor = Predictor::from_checkpoint(&load_checkpoint(ckpt)?)?;
    let img = load_image(image)?;
    let score = if tta {
        tta_score(&predictor, &img, &TtaConfig::default())?
    } else {
        if img.short_side() < predictor.min_input() {
            return Err(Error::data(format!(
                "image {}x{} below model minimum {}",
                img.width(),
                img.height(),
                predictor.min_input()
            )));
        }
        predictor.score(&[&img], &[predictor.best_head()])?[0]
    };
    println!("{score:.4}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 1 {
        info!("--threads {}: kernels are single-context; results are unaffected", cli.threads);
    }
    match cli.cmd {
        Command::Synth { out, num_refs, size, seed, train_fraction } => {
            cmd_synth(&out, num_refs, size, seed, train_fraction)
        }
        Command::Train { cfg, train, val, out } => {
            let rc = cfg.resolve()?;
            let train_path = pick(&train, &rc.data.train, "train")?;
            let val_path = val.or_else(|| rc.data.val.clone());
            cmd_train(&rc, &train_path, val_path.as_deref(), &out)
        }
        Command::Eval { ckpt, data, tta, config, report } => {
            cmd_eval(&ckpt, &data, tta, config.as_deref(), report.as_deref())
        }
        Command::Ablate { cfg, data_dir, out, seeds } => cmd_ablate(&cfg.resolve()?, &data_dir, &out, seeds),
        Command::Score { ckpt, image, tta } => cmd_score(&ckpt, &image, tta),
        Command::Config { cfg } => {
            let rc = cfg.resolve()?;
            println!("{}", serde_json::to_string_pretty(&rc.to_value()).expect("json"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    zoomiqa::retain_heap();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
