//! 2-D cross-correlation kernels (no kernel flip, zero padding).

use crate::error::{Error, Result};
use crate::scalar::{matmul_acc, Scalar};

/// Geometry of one grouped convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Resolved sizes for one conv call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn resolve(input: &[usize], weight: &[usize], bias: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let bad = |msg: String| Err(Error::contract(format!("conv2d: {msg}")));
        if input.len() != 4 || weight.len() != 4 {
            return bad(format!("expected 4-d input and weight, got {input:?} and {weight:?}"));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        let Conv2dSpec {
            stride,
            padding: pad,
            groups,
        } = spec;
        if stride == 0 || groups == 0 {
            return bad("stride and groups must be positive".into());
        }
        if cin % groups != 0 || cout % groups != 0 {
            return bad(format!("channels {cin}->{cout} not divisible by groups {groups}"));
        }
        if cin / groups != cin_g {
            return bad(format!(
                "weight expects {cin_g} input channels per group, input gives {}",
                cin / groups
            ));
        }
        if bias != [cout] {
            return bad(format!("bias shape {bias:?} does not match {cout} output channels"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return bad(format!("padded input {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
            groups,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn k_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
}

/// Output positions `o` in `0..out_len` whose input index
/// `o·stride + k − pad` lies inside `0..in_len`, as a half-open range.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o·stride + k − pad ≤ in_len − 1
    let hi = if in_len + pad > k { ((in_len - 1 + pad - k) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Row-wise polyphase copy of a plane: row `y`, phase `r` holds
/// `x[y][r], x[y][r + s], ...`, so a stride-`s` tap reads a contiguous run.
struct Phased<T> {
    data: Vec<T>,
    s: usize,
    pw: usize,
}

impl<T: Scalar> Phased<T> {
    fn new(h: usize, w: usize, s: usize) -> Self {
        let pw = w.div_ceil(s);
        Self { data: vec![T::zero(); h * s * pw], s, pw }
    }

    fn load(&mut self, plane: &[T], w: usize) {
        let (s, pw) = (self.s, self.pw);
        for (src, dst) in plane.chunks_exact(w).zip(self.data.chunks_exact_mut(s * pw)) {
            if s == 1 {
                dst.copy_from_slice(src);
            } else if s == 2 {
                let (even, odd) = dst.split_at_mut(pw);
                for ((e, o), pair) in even.iter_mut().zip(odd.iter_mut()).zip(src.chunks_exact(2)) {
                    *e = pair[0];
                    *o = pair[1];
                }
                if w % 2 == 1 {
                    even[pw - 1] = src[w - 1];
                }
            } else {
                for (i, &v) in src.iter().enumerate() {
                    dst[(i % s) * pw + i / s] = v;
                }
            }
        }
    }

    fn add_into(&self, plane: &mut [T], w: usize) {
        let (s, pw) = (self.s, self.pw);
        for (dst, src) in plane.chunks_exact_mut(w).zip(self.data.chunks_exact(s * pw)) {
            for r in 0..s.min(w) {
                for (d, &v) in dst[r..].iter_mut().step_by(s).zip(&src[r * pw..]) {
                    *d += v;
                }
            }
        }
    }

    fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Offset of input column `base`, `base + s`, ... in row `y`.
    fn at(&self, y: usize, base: usize) -> usize {
        (y * self.s + base % self.s) * self.pw + base / self.s
    }
}

/// Sum with eight independent accumulators, so the loop vectorises.
fn lane_sum<T: Scalar>(v: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let tail = chunks.remainder().iter().fold(T::zero(), |a, &b| a + b);
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l += x;
        }
    }
    lanes.iter().fold(tail, |a, &b| a + b)
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().fold(tail, |a, &b| a + b)
}

/// Unfolds `cin_g` channels of one sample into a `(cin_g·kh·kw) × (ho·wo)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.ho * g.wo;
    let mut ph = Phased::new(g.h, g.w, g.stride);
    let mut row = 0;
    for ci in 0..g.cin_g() {
        ph.load(&x[ci * g.h * g.w..(ci + 1) * g.h * g.w], g.w);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                    drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                    let at = ph.at(iy as usize, lo * g.stride + kx - g.pad);
                    drow[lo..hi].copy_from_slice(&ph.data[at..at + (hi - lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto `cin_g` input planes.
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let base = lo * g.stride + kx - g.pad;
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in drow[base..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    if g.is_depthwise() {
        depthwise_forward(x, weight, g, &mut out);
    } else {
        let k = g.k_len();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x[(n * g.cin + grp * g.cin_g()) * g.h * g.w..][..g.cin_g() * g.h * g.w];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut col);
                    &col
                };
                let wg = &weight[grp * g.cout_g() * k..][..g.cout_g() * k];
                let o = &mut out[(n * g.cout + grp * g.cout_g()) * p..][..g.cout_g() * p];
                matmul_acc(g.cout_g(), k, p, wg, false, cols, false, o, T::zero());
            }
        }
    }
    for n in 0..g.n {
        for co in 0..g.cout {
            let b = bias[co];
            out[(n * g.cout + co) * p..][..p].iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom, out: &mut [T]) {
    let (kk, p) = (g.kh * g.kw, g.ho * g.wo);
    let ranges: Vec<(usize, usize)> = (0..g.kw).map(|kx| valid_range(g.wo, g.w, kx, g.stride, g.pad)).collect();
    let mut ph = Phased::new(g.h, g.w, g.stride);
    for n in 0..g.n {
        for c in 0..g.cin {
            ph.load(&x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w], g.w);
            let wk = &weight[c * kk..][..kk];
            let o = &mut out[(n * g.cin + c) * p..][..p];
            for oy in 0..g.ho {
                let orow = &mut o[oy * g.wo..][..g.wo];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let wv = wk[ky * g.kw + kx];
                        let at = ph.at(iy as usize, lo * g.stride + kx - g.pad);
                        for (ov, &xv) in orow[lo..hi].iter_mut().zip(&ph.data[at..at + (hi - lo)]) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one conv call. `dx` is only filled when requested.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_dx: bool,
) -> ConvGrads<T> {
    let p = g.ho * g.wo;
    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, dbv) in db.iter_mut().enumerate() {
            *dbv += lane_sum(&gout[(n * g.cout + co) * p..][..p]);
        }
    }
    let mut dw = vec![T::zero(); weight.len()];
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    if g.is_depthwise() {
        depthwise_backward(x, weight, gout, g, &mut dw, dx.as_deref_mut());
        return ConvGrads { dx, dw, db };
    }
    let k = g.k_len();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if want_dx && !pointwise { vec![T::zero(); k * p] } else { Vec::new() };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xoff = (n * g.cin + grp * g.cin_g()) * g.h * g.w;
            let xs = &x[xoff..][..g.cin_g() * g.h * g.w];
            let cols: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            let go = &gout[(n * g.cout + grp * g.cout_g()) * p..][..g.cout_g() * p];
            let dwg = &mut dw[grp * g.cout_g() * k..][..g.cout_g() * k];
            // dW += gout · colᵀ
            matmul_acc(g.cout_g(), p, k, go, false, cols, true, dwg, T::one());
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &weight[grp * g.cout_g() * k..][..g.cout_g() * k];
                let dxs = &mut dx[xoff..][..g.cin_g() * g.h * g.w];
                if pointwise {
                    matmul_acc(k, g.cout_g(), p, wg, true, go, false, dxs, T::one());
                } else {
                    matmul_acc(k, g.cout_g(), p, wg, true, go, false, &mut dcol, T::zero());
                    col2im_add(&dcol, g, dxs);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let (kk, p, hw) = (g.kh * g.kw, g.ho * g.wo, g.h * g.w);
    let ranges: Vec<(usize, usize)> = (0..g.kw).map(|kx| valid_range(g.wo, g.w, kx, g.stride, g.pad)).collect();
    let mut xph = Phased::new(g.h, g.w, g.stride);
    let mut dph = dx.is_some().then(|| Phased::new(g.h, g.w, g.stride));
    for n in 0..g.n {
        for c in 0..g.cin {
            xph.load(&x[(n * g.cin + c) * hw..][..hw], g.w);
            if let Some(d) = dph.as_mut() {
                d.clear();
            }
            let go = &gout[(n * g.cin + c) * p..][..p];
            let wk = &weight[c * kk..][..kk];
            for ky in 0..g.kh {
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    let wv = wk[ky * g.kw + kx];
                    let base = lo * g.stride + kx - g.pad;
                    let mut acc = T::zero();
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let at = xph.at(iy as usize, base);
                        let grow = &go[oy * g.wo + lo..oy * g.wo + hi];
                        acc += lane_dot(grow, &xph.data[at..at + (hi - lo)]);
                        if let Some(d) = dph.as_mut() {
                            for (dv, &gv) in d.data[at..at + (hi - lo)].iter_mut().zip(grow) {
                                *dv += gv * wv;
                            }
                        }
                    }
                    dw[c * kk + ky * g.kw + kx] += acc;
                }
            }
            if let (Some(d), Some(dx)) = (dph.as_ref(), dx.as_deref_mut()) {
                d.add_into(&mut dx[(n * g.cin + c) * hw..][..hw], g.w);
            }
        }
    }
}
