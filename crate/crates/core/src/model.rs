//! Shared convolutional backbone with one two-layer regression head per zoom level.
//!
//! Backbone: 3×3 stride-2 stem conv + relu, then `num_blocks` blocks of
//! depthwise 3×3 stride-2 conv → pointwise 1×1 conv → relu, then global
//! average pooling. Each block doubles the channel count, capped at
//! `embed_dim`; the last block always emits `embed_dim` channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Conv2dSpec, Gradients, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Hidden width of every regression head.
pub const HEAD_HIDDEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            num_blocks: 4,
            embed_dim: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.embed_dim == 0 || self.num_blocks == 0 {
            return Err(Error::usage("backbone sizes must be positive"));
        }
        if self.num_blocks > 8 {
            return Err(Error::usage("backbone.num_blocks must be at most 8"));
        }
        Ok(())
    }

    /// `(in, out)` channels of each block.
    pub fn block_widths(&self) -> Vec<(usize, usize)> {
        let mut c = self.stem_channels;
        (0..self.num_blocks)
            .map(|i| {
                let out = if i + 1 == self.num_blocks {
                    self.embed_dim
                } else {
                    (2 * c).min(self.embed_dim)
                };
                let pair = (c, out);
                c = out;
                pair
            })
            .collect()
    }

    /// Smallest accepted spatial side: one pixel left after every stride-2 stage.
    pub fn min_input(&self) -> usize {
        1 << (self.num_blocks + 1)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self, num_heads: usize) -> usize {
        let stem = 3 * 9 * self.stem_channels + self.stem_channels;
        let blocks: usize = self
            .block_widths()
            .iter()
            .map(|&(cin, cout)| (9 * cin + cin) + (cin * cout + cout))
            .sum();
        let head = (self.embed_dim * HEAD_HIDDEN + HEAD_HIDDEN) + (HEAD_HIDDEN + 1);
        stem + blocks + num_heads * head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub depthwise: ConvParams<T>,
    pub pointwise: ConvParams<T>,
}

/// `linear(E→512) → relu → linear(512→1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadModel<T> {
    config: BackboneConfig,
    pub stem: ConvParams<T>,
    pub blocks: Vec<Block<T>>,
    pub heads: Vec<Head<T>>,
}

/// Tape handles for every parameter, in [`MultiHeadModel::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    num_blocks: usize,
}

impl BoundParams {
    fn stem(&self) -> (Var, Var) {
        (self.vars[0], self.vars[1])
    }

    fn block(&self, i: usize) -> &[Var] {
        &self.vars[2 + 4 * i..6 + 4 * i]
    }

    fn head(&self, h: usize) -> &[Var] {
        let base = 2 + 4 * self.num_blocks + 4 * h;
        &self.vars[base..base + 4]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn he_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape").with_grad()
}

fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_grad()
}

impl<T: Scalar> MultiHeadModel<T> {
    /// He fan-in normal weights and zero biases from a seeded generator.
    /// Values are drawn in `f64`, so models of different widths built from
    /// one seed agree up to rounding.
    pub fn init(config: BackboneConfig, num_heads: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_heads == 0 {
            return Err(Error::contract("a model needs at least one head"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = config.stem_channels;
        let stem = ConvParams {
            weight: he_tensor(&[sc, 3, 3, 3], 27, &mut rng),
            bias: zeros_param(&[sc]),
        };
        let blocks = config
            .block_widths()
            .into_iter()
            .map(|(cin, cout)| Block {
                depthwise: ConvParams {
                    weight: he_tensor(&[cin, 1, 3, 3], 9, &mut rng),
                    bias: zeros_param(&[cin]),
                },
                pointwise: ConvParams {
                    weight: he_tensor(&[cout, cin, 1, 1], cin, &mut rng),
                    bias: zeros_param(&[cout]),
                },
            })
            .collect();
        let e = config.embed_dim;
        let heads = (0..num_heads)
            .map(|_| Head {
                fc1_weight: he_tensor(&[HEAD_HIDDEN, e], e, &mut rng),
                fc1_bias: zeros_param(&[HEAD_HIDDEN]),
                fc2_weight: he_tensor(&[1, HEAD_HIDDEN], HEAD_HIDDEN, &mut rng),
                fc2_bias: zeros_param(&[1]),
            })
            .collect();
        Ok(Self {
            config,
            stem,
            blocks,
            heads,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("stem.weight".to_owned(), &self.stem.weight),
            ("stem.bias".to_owned(), &self.stem.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.depthwise.weight"), &b.depthwise.weight));
            out.push((format!("blocks.{i}.depthwise.bias"), &b.depthwise.bias));
            out.push((format!("blocks.{i}.pointwise.weight"), &b.pointwise.weight));
            out.push((format!("blocks.{i}.pointwise.bias"), &b.pointwise.bias));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("heads.{i}.fc1.weight"), &h.fc1_weight));
            out.push((format!("heads.{i}.fc1.bias"), &h.fc1_bias));
            out.push((format!("heads.{i}.fc2.weight"), &h.fc2_weight));
            out.push((format!("heads.{i}.fc2.bias"), &h.fc2_bias));
        }
        out
    }

    /// Mutable parameters in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.extend([
                &mut b.depthwise.weight,
                &mut b.depthwise.bias,
                &mut b.pointwise.weight,
                &mut b.pointwise.bias,
            ]);
        }
        for h in &mut self.heads {
            out.extend([&mut h.fc1_weight, &mut h.fc1_bias, &mut h.fc2_weight, &mut h.fc2_bias]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against a freshly laid-out model.
    pub fn from_named(config: BackboneConfig, num_heads: usize, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::init(config, num_heads, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::data(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in model.params_mut().into_iter().zip(&expected).zip(tensors) {
            if *name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::data(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            *slot = t.with_grad();
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> MultiHeadModel<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        MultiHeadModel {
            config: self.config,
            stem: conv(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    depthwise: conv(&b.depthwise),
                    pointwise: conv(&b.pointwise),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    fc1_weight: h.fc1_weight.cast(),
                    fc1_bias: h.fc1_bias.cast(),
                    fc2_weight: h.fc2_weight.cast(),
                    fc2_bias: h.fc2_bias.cast(),
                })
                .collect(),
        }
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundParams> {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t))
            .collect::<Result<_>>()?;
        Ok(BoundParams {
            vars,
            num_blocks: self.blocks.len(),
        })
    }

    /// `[B,3,H,W] → [B,E]`.
    pub fn forward_features(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let min = self.config.min_input();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::contract(format!("backbone expects [B,3,H,W], got {s:?}")));
        }
        if s[2] < min || s[3] < min {
            return Err(Error::contract(format!(
                "input {}x{} below backbone minimum {min}x{min}",
                s[3], s[2]
            )));
        }
        let down = |groups| Conv2dSpec {
            stride: 2,
            padding: 1,
            groups,
        };
        let (sw, sb) = bound.stem();
        let mut h = tape.conv2d(x, sw, sb, down(1))?;
        h = tape.relu(h);
        for (i, (cin, _)) in self.config.block_widths().into_iter().enumerate() {
            let v = bound.block(i);
            h = tape.conv2d(h, v[0], v[1], down(cin))?;
            h = tape.conv2d(h, v[2], v[3], Conv2dSpec::default())?;
            h = tape.relu(h);
        }
        tape.global_avg_pool(h)
    }

    /// `[B,E] → [B]` through head `head`.
    pub fn forward_head(&self, tape: &mut Tape<T>, bound: &BoundParams, embedding: Var, head: usize) -> Result<Var> {
        if head >= self.heads.len() {
            return Err(Error::contract(format!(
                "head {head} out of range for {} heads",
                self.heads.len()
            )));
        }
        let v = bound.head(head);
        let hidden = tape.linear(embedding, v[0], v[1])?;
        let hidden = tape.relu(hidden);
        let out = tape.linear(hidden, v[2], v[3])?;
        let b = tape.shape(out)[0];
        tape.reshape(out, &[b])
    }

    /// Adds tape gradients into each parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, bound: &BoundParams) -> Result<()> {
        let vars = bound.vars.clone();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Embeddings for a batch without keeping the tape.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(batch)?;
        let f = self.forward_features(&mut tape, &bound, x)?;
        Ok(tape.to_tensor(f))
    }

    /// Per-row scores of each requested head for a `[B,E]` embedding.
    pub fn score_heads(&self, embedding: &Tensor<T>, heads: &[usize]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let e = tape.leaf(embedding)?;
        heads
            .iter()
            .map(|&h| {
                let out = self.forward_head(&mut tape, &bound, e, h)?;
                Ok(tape.value(out).to_vec())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 4,
            num_blocks: 2,
            embed_dim: 8,
        }
    }

    #[test]
    fn default_widths() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.block_widths(), vec![(16, 32), (32, 64), (64, 128), (128, 128)]);
        assert_eq!(cfg.min_input(), 32);
    }

    #[test]
    fn init_is_deterministic_and_heads_disjoint() {
        let a = MultiHeadModel::<f32>::init(BackboneConfig::default(), 3, 11).unwrap();
        let b = MultiHeadModel::<f32>::init(BackboneConfig::default(), 3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_heads(), 3);
        assert_ne!(a.heads[0].fc1_weight, a.heads[1].fc1_weight);
        assert_ne!(a.heads[1].fc1_weight, a.heads[2].fc1_weight);
        let c = MultiHeadModel::<f32>::init(BackboneConfig::default(), 3, 12).unwrap();
        assert_ne!(a, c);
        assert!(MultiHeadModel::<f32>::init(BackboneConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn param_count_matches_enumeration() {
        for (cfg, heads) in [(BackboneConfig::default(), 4), (tiny(), 1), (tiny(), 5)] {
            let m = MultiHeadModel::<f32>::init(cfg, heads, 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count(heads));
        }
        // 448 stem + 29_888 blocks + 4·66_561 heads.
        assert_eq!(BackboneConfig::default().param_count(4), 448 + 29_888 + 4 * 66_561);
    }

    #[test]
    fn embedding_width_is_independent_of_input_size() {
        let m = MultiHeadModel::<f32>::init(tiny(), 1, 0).unwrap();
        for side in [8, 13, 40] {
            let x = Tensor::new(vec![2, 3, side, side], vec![0.1; 6 * side * side]).unwrap();
            assert_eq!(m.embed(&x).unwrap().shape(), &[2, 8]);
        }
        let small = Tensor::new(vec![1, 3, 7, 9], vec![0.0; 189]).unwrap();
        assert!(matches!(m.embed(&small), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let m = MultiHeadModel::<f32>::init(tiny(), 1, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(m.embed(&x).unwrap().data().iter().all(|v| *v == 0.0));
        let zero = Tensor::zeros(&[1, 8]);
        assert_eq!(m.score_heads(&zero, &[0]).unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn head_index_is_checked() {
        let m = MultiHeadModel::<f32>::init(tiny(), 2, 0).unwrap();
        let e = Tensor::zeros(&[1, 8]);
        assert!(matches!(m.score_heads(&e, &[2]), Err(Error::Contract(_))));
    }
}
