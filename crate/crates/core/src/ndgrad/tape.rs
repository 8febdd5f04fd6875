use crate::error::{Error, Result};
use crate::scalar::{matmul_acc, Scalar};

use super::conv::{conv2d_backward, conv2d_forward, Conv2dSpec, ConvGeom};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Sqrt(Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of a forward pass.
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// operation that consumes them.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_finite<T: Scalar>(op: &str, data: &[T]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{op} produced non-finite value at index {i}")));
    }
    Ok(())
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad()))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        check_finite("constant", t.data())?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::resolve(self.shape(input), self.shape(weight), self.shape(bias), spec)?;
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geom);
        check_finite("conv2d", &out)?;
        let ng = self.needs(&[input, weight, bias]);
        Ok(self.push(
            geom.out_shape(),
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    /// `out[b,o] = Σ_i x[b,i]·w[o,i] + bias[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::contract(format!(
                "linear: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * outp);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b));
        }
        matmul_acc(batch, inp, outp, self.value(x), false, self.value(w), true, &mut out, T::one());
        check_finite("linear", &out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(vec![batch, outp], out, Op::Linear { x, w, b }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::contract(format!("global_avg_pool expects [N,C,H,W], got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value(x)
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(&[x]));
        self.push(shape, out, Op::Relu(x), ng)
    }

    /// Smallest |input| over all recorded relu nodes, i.e. the distance of
    /// this forward pass from the nearest kink. `None` without relus.
    pub fn relu_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).iter().map(|v| v.abs()))
            .reduce(T::min)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, out): (Vec<usize>, Vec<T>) = if sa == sb {
            (sa.to_vec(), va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 {
            (sa.to_vec(), va.iter().map(|&x| f(x, vb[0])).collect())
        } else if va.len() == 1 {
            (sb.to_vec(), vb.iter().map(|&y| f(va[0], y)).collect())
        } else {
            return Err(Error::contract(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast")));
        };
        check_finite(name, &out)?;
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(s, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(s, v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(s, v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|v| v.is_zero()) {
            return Err(Error::numeric("div: division by zero"));
        }
        let (s, v) = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(s, v, Op::Div(a, b), ng))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * v).collect();
        check_finite("square", &out)?;
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(&[x]));
        Ok(self.push(shape, out, Op::Square(x), ng))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|v| **v < T::zero()) {
            return Err(Error::numeric(format!("sqrt of negative value {v}")));
        }
        let out: Vec<T> = self.value(x).iter().map(|v| v.sqrt()).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(&[x]));
        Ok(self.push(shape, out, Op::Sqrt(x), ng))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v + c).collect();
        check_finite("add_scalar", &out)?;
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(&[x]));
        Ok(self.push(shape, out, Op::AddScalar(x), ng))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        check_finite("mul_scalar", &out)?;
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(&[x]));
        Ok(self.push(shape, out, Op::MulScalar(x, c), ng))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum();
        check_finite("reduce_sum", &[s])?;
        let ng = self.needs(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Sum(x), ng))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        let s: T = vals.iter().copied().sum::<T>() / T::from_usize(vals.len()).unwrap();
        check_finite("reduce_mean", &[s])?;
        let ng = self.needs(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Mean(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let (v, ng) = (self.value(x).to_vec(), self.needs(&[x]));
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), ng))
    }

    /// Stacks tensors along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::contract(format!("concat: trailing shape {s:?} vs {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.needs(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), ng))
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every leaf
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                check_finite("backward", g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let acc = |v: Var, delta: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += *d),
                slot @ None => *slot = Some(delta),
            }
        };
        // Reduces a broadcast gradient back to the operand's size.
        let fold = |v: Var, full: Vec<T>| -> Vec<T> {
            if self.nodes[v.0].value.len() == 1 && full.len() != 1 {
                vec![full.iter().copied().sum()]
            } else {
                full
            }
        };
        let bval = |x: Var, i: usize| -> T {
            let v = &self.nodes[x.0].value;
            if v.len() == 1 {
                v[0]
            } else {
                v[i]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want_dx = self.nodes[input.0].needs_grad;
                let cg = conv2d_backward(self.value(*input), self.value(*weight), g, geom, want_dx);
                if let Some(dx) = cg.dx {
                    acc(*input, dx, grads);
                }
                acc(*weight, cg.dw, grads);
                acc(*bias, cg.db, grads);
            }
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let outp = self.shape(*w)[0];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); batch * inp];
                    matmul_acc(batch, outp, inp, g, false, self.value(*w), false, &mut dx, T::zero());
                    acc(*x, dx, grads);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); outp * inp];
                    matmul_acc(outp, batch, inp, g, true, self.value(*x), false, &mut dw, T::zero());
                    acc(*w, dw, grads);
                }
                let mut db = vec![T::zero(); outp];
                for row in g.chunks_exact(outp) {
                    db.iter_mut().zip(row).for_each(|(d, r)| *d += *r);
                }
                acc(*b, db, grads);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(numel(s));
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                acc(*x, dx, grads);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, dx, grads);
            }
            Op::Add(a, b) => {
                acc(*a, fold(*a, g.to_vec()), grads);
                acc(*b, fold(*b, g.to_vec()), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, fold(*a, g.to_vec()), grads);
                acc(*b, fold(*b, g.iter().map(|&v| -v).collect()), grads);
            }
            Op::Mul(a, b) => {
                let da = g.iter().enumerate().map(|(i, &gv)| gv * bval(*b, i)).collect();
                let db = g.iter().enumerate().map(|(i, &gv)| gv * bval(*a, i)).collect();
                acc(*a, fold(*a, da), grads);
                acc(*b, fold(*b, db), grads);
            }
            Op::Div(a, b) => {
                let da = g.iter().enumerate().map(|(i, &gv)| gv / bval(*b, i)).collect();
                let db = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let bv = bval(*b, i);
                        -gv * bval(*a, i) / (bv * bv)
                    })
                    .collect();
                acc(*a, fold(*a, da), grads);
                acc(*b, fold(*b, db), grads);
            }
            Op::Square(x) => {
                let two = T::one() + T::one();
                let dx = self.value(*x).iter().zip(g).map(|(&v, &gv)| two * v * gv).collect();
                acc(*x, dx, grads);
            }
            Op::Sqrt(x) => {
                let two = T::one() + T::one();
                let dx: Vec<T> = node.value.iter().zip(g).map(|(&r, &gv)| gv / (two * r)).collect();
                check_finite("sqrt backward", &dx)?;
                acc(*x, dx, grads);
            }
            Op::AddScalar(x) => acc(*x, g.to_vec(), grads),
            Op::MulScalar(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect(), grads),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0]; n], grads);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / T::from_usize(n).unwrap(); n], grads);
            }
            Op::Reshape(x) => acc(*x, g.to_vec(), grads),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, g[off..off + len].to_vec(), grads);
                    off += len;
                }
            }
        }
        Ok(())
    }
}
