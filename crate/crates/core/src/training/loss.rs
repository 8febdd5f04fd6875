//! Weighted MSE + PLCC regression loss on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on the MSE term; the PLCC term gets `1 − lambda`.
    pub lambda: f64,
    /// Standard deviation below which the PLCC term falls back to 0.5.
    pub epsilon_var: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            epsilon_var: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::usage(format!("loss.lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.epsilon_var > 0.0 && self.epsilon_var.is_finite()) {
            return Err(Error::usage("loss.epsilon_var must be positive"));
        }
        Ok(())
    }
}

fn check_batch<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<usize> {
    let (ps, ts) = (tape.shape(pred), tape.shape(target));
    if ps != ts || ps.len() != 1 {
        return Err(Error::contract(format!("loss expects equal 1-d shapes, got {ps:?} and {ts:?}")));
    }
    if ps[0] < 2 {
        return Err(Error::contract(format!("PLCC loss needs a batch of at least 2, got {}", ps[0])));
    }
    Ok(ps[0])
}

fn population_std<T: Scalar>(v: &[T]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    (v.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `(1 − r) / 2` where `r` is the Pearson correlation of `pred` and `target`.
/// Either side having standard deviation below `epsilon_var` yields a
/// constant 0.5 that passes no gradient.
pub fn plcc_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, epsilon_var: f64) -> Result<Var> {
    check_batch(tape, pred, target)?;
    if population_std(tape.value(pred)) < epsilon_var || population_std(tape.value(target)) < epsilon_var {
        return tape.constant(&[1], vec![T::from_f64_lossy(0.5)]);
    }
    let pm = tape.reduce_mean(pred)?;
    let pc = tape.sub(pred, pm)?;
    let tm = tape.reduce_mean(target)?;
    let tc = tape.sub(target, tm)?;
    let prod = tape.mul(pc, tc)?;
    let cov = tape.reduce_sum(prod)?;
    let p2 = tape.square(pc)?;
    let sp = tape.reduce_sum(p2)?;
    let t2 = tape.square(tc)?;
    let st = tape.reduce_sum(t2)?;
    let var_prod = tape.mul(sp, st)?;
    let denom = tape.sqrt(var_prod)?;
    let r = tape.div(cov, denom)?;
    let half = T::from_f64_lossy(0.5);
    let neg = tape.mul_scalar(r, -half)?;
    tape.add_scalar(neg, half)
}

pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.reduce_mean(sq)
}

/// `lambda · MSE + (1 − lambda) · PLCC loss`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    check_batch(tape, pred, target)?;
    let mse = mse_loss(tape, pred, target)?;
    let plcc = plcc_loss(tape, pred, target, cfg.epsilon_var)?;
    let a = tape.mul_scalar(mse, T::from_f64_lossy(cfg.lambda))?;
    let b = tape.mul_scalar(plcc, T::from_f64_lossy(1.0 - cfg.lambda))?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tensor;

    fn run(pred: &[f64], target: &[f64], f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let p = tape
            .leaf(&Tensor::from_slice(&[pred.len()], pred).unwrap().with_grad())
            .unwrap();
        let t = tape.constant(&[target.len()], target.to_vec()).unwrap();
        let l = f(&mut tape, p, t).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l)[0], g.get(p).map(|g| g.to_vec()).unwrap_or_default())
    }

    #[test]
    fn plcc_loss_extremes() {
        let plcc = |tape: &mut Tape<f64>, p, t| plcc_loss(tape, p, t, 1e-8);
        assert_eq!(run(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], plcc).0, 0.0);
        assert_eq!(run(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], plcc).0, 1.0);
        let (v, g) = run(&[2.0, 2.0, 2.0], &[3.0, 2.0, 1.0], plcc);
        assert_eq!(v, 0.5);
        assert!(g.is_empty());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(&[1], vec![1.0]).unwrap();
        let t = tape.constant(&[1], vec![1.0]).unwrap();
        assert!(matches!(plcc_loss(&mut tape, p, t, 1e-8), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_degenerate_weights() {
        let pred = [0.3, -1.0, 2.5, 0.7];
        let target = [1.0, 0.0, 2.0, -0.5];
        let mse = run(&pred, &target, |t, p, y| mse_loss(t, p, y)).0;
        let l1 = LossConfig { lambda: 1.0, ..Default::default() };
        assert_eq!(run(&pred, &target, |t, p, y| total_loss(t, p, y, &l1)).0.to_bits(), mse.to_bits());
        let l0 = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(run(&[1.0, 2.0, 3.0], &[5.0, 7.0, 9.0], |t, p, y| total_loss(t, p, y, &l0)).0, 0.0);
        let half = LossConfig::default();
        assert_eq!(run(&target, &target, |t, p, y| total_loss(t, p, y, &half)).0, 0.0);
        assert!(LossConfig { lambda: 1.5, ..half }.validate().is_err());
    }
}
