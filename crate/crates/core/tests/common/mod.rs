//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the library routine it is checking.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomiqa::model::{BackboneConfig, MultiHeadModel};
use zoomiqa::ndgrad::{Conv2dSpec, Tape, Tensor, Var};
use zoomiqa::training::{mse_loss, plcc_loss, summed_head_loss, total_loss, HeadBatch, LossConfig};
use zoomiqa::Result;

/// Central-difference step of every gradient check.
pub const FD_STEP: f64 = 1e-4;
/// Acceptance bound on the relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so exact zeros compare by
/// absolute difference instead of dividing by zero.
pub const REL_FLOOR: f64 = 1e-6;
/// Evaluation points whose nearest relu input is closer than this to 0 are
/// redrawn: a step of `FD_STEP` could otherwise cross the kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Uniform magnitude in `[lo, hi)` with a random sign.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
type Draw = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

/// One differentiable operation under test: random inputs plus the graph
/// that consumes them. Non-scalar outputs are projected onto fixed random
/// weights so every output element contributes to the checked gradient.
pub struct OpCase {
    pub name: &'static str,
    pub draw: Draw,
    pub build: Build,
}

fn project(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    if weights.is_empty() {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(&shape, weights.to_vec())?;
    let p = tape.mul(out, w)?;
    tape.reduce_sum(p)
}

fn eval_case(build: Build, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out, weights)?;
    Ok((tape, loss, vars))
}

/// Max relative error between the tape gradient and central differences
/// over every element of every input.
pub fn check_point(build: Build, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
    let (tape, out, _) = eval_case(build, inputs, &[])?;
    let weights: Vec<f64> = if tape.value(out).len() == 1 {
        Vec::new()
    } else {
        (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let (tape, loss, vars) = eval_case(build, inputs, &weights)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let (t, l, _) = eval_case(build, &probe, &weights)?;
            let up = t.value(l)[0];
            probe[i].data_mut()[j] = orig - FD_STEP;
            let (t, l, _) = eval_case(build, &probe, &weights)?;
            let down = t.value(l)[0];
            probe[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Runs `points` random evaluation points of `case`, redrawing any point
/// that lies within [`KINK_MARGIN`] of a relu kink. Returns the max error.
pub fn check_case(case: &OpCase, points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < points {
        let inputs = (case.draw)(&mut rng);
        let (tape, _, _) = eval_case(case.build, &inputs, &[])?;
        if tape.relu_margin().is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        worst = worst.max(check_point(case.build, &inputs, &mut rng)?);
        done += 1;
    }
    Ok(worst)
}

fn conv(spec: Conv2dSpec) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {
    move |t, v| t.conv2d(v[0], v[1], v[2], spec)
}

/// Every differentiable operation of the engine and the loss terms.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            draw: |r| vec![uniform(r, &[2, 3, 6, 6], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec { stride: 1, padding: 1, groups: 1 })(t, v),
        },
        OpCase {
            name: "conv2d_stride2",
            draw: |r| vec![uniform(r, &[2, 3, 7, 6], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec { stride: 2, padding: 1, groups: 1 })(t, v),
        },
        OpCase {
            name: "conv2d_depthwise",
            draw: |r| vec![uniform(r, &[2, 3, 6, 6], -1.0, 1.0), uniform(r, &[3, 1, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec { stride: 2, padding: 1, groups: 3 })(t, v),
        },
        OpCase {
            name: "conv2d_depthwise_odd",
            draw: |r| vec![uniform(r, &[1, 2, 7, 5], -1.0, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec { stride: 2, padding: 1, groups: 2 })(t, v),
        },
        OpCase {
            name: "conv2d_stride3",
            draw: |r| vec![uniform(r, &[1, 2, 8, 7], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec { stride: 3, padding: 1, groups: 1 })(t, v),
        },
        OpCase {
            name: "conv2d_grouped",
            draw: |r| vec![uniform(r, &[1, 4, 5, 5], -1.0, 1.0), uniform(r, &[6, 2, 2, 2], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec { stride: 1, padding: 0, groups: 2 })(t, v),
        },
        OpCase {
            name: "conv2d_pointwise",
            draw: |r| vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[5, 3, 1, 1], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
            build: |t, v| conv(Conv2dSpec::default())(t, v),
        },
        OpCase {
            name: "linear",
            draw: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
            build: |t, v| t.linear(v[0], v[1], v[2]),
        },
        OpCase {
            name: "global_avg_pool",
            draw: |r| vec![uniform(r, &[2, 3, 4, 5], -1.0, 1.0)],
            build: |t, v| t.global_avg_pool(v[0]),
        },
        OpCase {
            name: "relu",
            draw: |r| vec![signed(r, &[12], 0.05, 1.0)],
            build: |t, v| Ok(t.relu(v[0])),
        },
        OpCase {
            name: "add",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| t.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "div",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0), signed(r, &[6], 0.5, 2.0)],
            build: |t, v| t.div(v[0], v[1]),
        },
        OpCase {
            name: "add_broadcast",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)],
            build: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "mul_broadcast",
            draw: |r| vec![uniform(r, &[1], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "div_broadcast",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0), signed(r, &[1], 0.5, 2.0)],
            build: |t, v| t.div(v[0], v[1]),
        },
        OpCase {
            name: "square",
            draw: |r| vec![uniform(r, &[6], -2.0, 2.0)],
            build: |t, v| t.square(v[0]),
        },
        OpCase {
            name: "sqrt",
            draw: |r| vec![uniform(r, &[6], 0.5, 4.0)],
            build: |t, v| t.sqrt(v[0]),
        },
        OpCase {
            name: "add_scalar",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| t.add_scalar(v[0], 0.75),
        },
        OpCase {
            name: "mul_scalar",
            draw: |r| vec![uniform(r, &[6], -1.0, 1.0)],
            build: |t, v| t.mul_scalar(v[0], -1.5),
        },
        OpCase {
            name: "reduce_sum",
            draw: |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            build: |t, v| t.reduce_sum(v[0]),
        },
        OpCase {
            name: "reduce_mean",
            draw: |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            build: |t, v| t.reduce_mean(v[0]),
        },
        OpCase {
            name: "reshape",
            draw: |r| vec![uniform(r, &[2, 3], -1.0, 1.0)],
            build: |t, v| t.reshape(v[0], &[3, 2]),
        },
        OpCase {
            name: "concat",
            draw: |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)],
            build: |t, v| t.concat(&[v[0], v[1]]),
        },
        OpCase {
            name: "plcc_loss",
            draw: |r| vec![uniform(r, &[8], -2.0, 2.0), uniform(r, &[8], -2.0, 2.0)],
            build: |t, v| plcc_loss(t, v[0], v[1], 1e-8),
        },
        OpCase {
            name: "mse_loss",
            draw: |r| vec![uniform(r, &[8], -2.0, 2.0), uniform(r, &[8], -2.0, 2.0)],
            build: |t, v| mse_loss(t, v[0], v[1]),
        },
        OpCase {
            name: "total_loss",
            draw: |r| vec![uniform(r, &[8], -2.0, 2.0), uniform(r, &[8], -2.0, 2.0)],
            build: |t, v| total_loss(t, v[0], v[1], &LossConfig { lambda: 0.3, ..Default::default() }),
        },
    ]
}

/// Small backbone for the full-model gradient check. The head width stays
/// at the fixed 512.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        num_blocks: 2,
        embed_dim: 8,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, side: usize) -> Tensor<f64> {
    let mut t = uniform(rng, &[b, 3, side, side], -1.0, 1.0);
    t.set_requires_grad(false);
    t
}

/// The summed 2-head step loss on a 4-sample batch: head 0 sees one
/// 16-pixel group, head 1 sees two size groups joined by concat.
pub fn step_batches(rng: &mut ChaCha8Rng) -> Vec<HeadBatch<f64>> {
    let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
    vec![
        HeadBatch {
            head: 0,
            inputs: vec![random_batch(rng, 4, 16)],
            targets: targets.clone(),
        },
        HeadBatch {
            head: 1,
            inputs: vec![random_batch(rng, 2, 16), random_batch(rng, 2, 20)],
            targets,
        },
    ]
}

fn step_loss_value(model: &MultiHeadModel<f64>, batches: &[HeadBatch<f64>], cfg: &LossConfig) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let loss = summed_head_loss(model, &mut tape, &bound, batches, cfg)?;
    Ok((tape, loss, bound.vars().to_vec()))
}

/// Max relative error over every parameter of a 2-head model, at the first
/// seed-derived point that stays clear of relu kinks.
pub fn check_full_step(seed: u64) -> Result<(f64, usize)> {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let model = MultiHeadModel::<f64>::init(tiny_backbone(), 2, rng.gen())?;
        let batches = step_batches(&mut rng);
        let (tape, loss, vars) = step_loss_value(&model, &batches, &cfg)?;
        if tape.relu_margin().is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect();
        drop(tape);
        let mut probe = model.clone();
        let mut worst = 0.0f64;
        let mut count = 0;
        for (i, g) in analytic.iter().enumerate() {
            for j in 0..g.len() {
                let orig = probe.params_mut()[i].data()[j];
                probe.params_mut()[i].data_mut()[j] = orig + FD_STEP;
                let (t, l, _) = step_loss_value(&probe, &batches, &cfg)?;
                let up = t.value(l)[0];
                probe.params_mut()[i].data_mut()[j] = orig - FD_STEP;
                let (t, l, _) = step_loss_value(&probe, &batches, &cfg)?;
                let down = t.value(l)[0];
                probe.params_mut()[i].data_mut()[j] = orig;
                worst = worst.max(rel_err(g[j], (up - down) / (2.0 * FD_STEP)));
                count += 1;
            }
        }
        return Ok((worst, count));
    }
}

/// Brute-force average ranks: 1 + #smaller + (#equal − 1)/2.
pub fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let smaller = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation from the raw-moment-free definition
/// cov / (σx σy), with population moments.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n;
    cov / (vx.sqrt() * vy.sqrt())
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

/// Random vector of length `n` in which 20% of entries copy another entry.
pub fn tied_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let ties = n / 5;
    for _ in 0..ties {
        let (dst, src) = (rng.gen_range(0..n), rng.gen_range(0..n));
        v[dst] = v[src];
    }
    v
}

/// Max |library − oracle| for SRCC and PLCC over `count` random pairs of
/// length 5..=200.
pub fn metric_oracle_suite(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_s, mut worst_p) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < count {
        let n = rng.gen_range(5..=200);
        let x = tied_vector(&mut rng, n);
        let y = if rng.gen_bool(0.5) {
            tied_vector(&mut rng, n)
        } else {
            // Correlated pair, so values near ±1 are exercised too.
            x.iter().map(|v| 0.7 * v + rng.gen_range(-3.0..3.0)).collect()
        };
        let (s, p) = (zoomiqa::evalkit::srcc(&x, &y).unwrap(), zoomiqa::evalkit::plcc(&x, &y).unwrap());
        worst_s = worst_s.max((s - oracle_spearman(&x, &y)).abs());
        worst_p = worst_p.max((p - oracle_pearson(&x, &y)).abs());
        done += 1;
    }
    (worst_s, worst_p)
}

/// Image sizes spanning the TTA structure check, (height, width).
pub const TTA_FIXTURE_SIZES: [(usize, usize); 8] = [
    (8, 8),
    (31, 17),
    (128, 128),
    (224, 224),
    (384, 512),
    (512, 384),
    (1000, 333),
    (1536, 2048),
];
