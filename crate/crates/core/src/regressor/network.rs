//! Forward and backward passes of the quality regressor.
//!
//! Encoder: `len(channels)` blocks of 3x3 convolution (zero padding), ReLU and
//! 2x2 average pooling, then global average pooling to `f1`. The attention MLP
//! maps `[f1, cond]` to sigmoid gates `[w1, w2]`; the head computes
//! `sigmoid(g2(w2 * relu(g1(w1 * f1))))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

/// Dimensions of one network instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Side of the square stem output.
    pub side: usize,
    pub d_t: usize,
    pub d_g: usize,
    pub attn_hidden: usize,
    pub attn_layers: usize,
}

/// Parameter offsets into the flat store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
    pub(crate) conv: Vec<Conv>,
    pub(crate) attn: Vec<Linear>,
    pub(crate) g1: Linear,
    pub(crate) g2: Linear,
    pub side: usize,
}

impl Layout {
    pub fn new(channels: &[usize], dims: Dims) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::InvalidArgument(format!("encoder channels must be non-empty and positive: {channels:?}")));
        }
        if dims.d_g == 0 || dims.attn_layers == 0 || (dims.attn_layers > 1 && dims.attn_hidden == 0) {
            return Err(Error::InvalidArgument("d_g, attention layers and hidden width must be >= 1".into()));
        }
        if dims.side >> channels.len() == 0 {
            return Err(Error::InvalidArgument(format!(
                "stem side {} too small for {} pooling blocks",
                dims.side,
                channels.len()
            )));
        }
        let mut segments = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let s = Segment { name, shape, offset: total };
            total += s.len();
            let off = s.offset;
            segments.push(s);
            off
        };
        let mut conv = Vec::new();
        let mut cin = 2;
        for (i, &cout) in channels.iter().enumerate() {
            let w = push(format!("encoder.conv{i}.weight"), vec![cout, cin, 3, 3]);
            let b = push(format!("encoder.conv{i}.bias"), vec![cout]);
            conv.push(Conv { w, b, cin, cout });
            cin = cout;
        }
        let d_f = cin;
        let mut linear = |name: &str, inp: usize, out: usize| {
            let w = push(format!("{name}.weight"), vec![out, inp]);
            let b = push(format!("{name}.bias"), vec![out]);
            Linear { w, b, inp, out }
        };
        let mut attn = Vec::new();
        let mut width = d_f + dims.d_t;
        for l in 0..dims.attn_layers {
            let out = if l + 1 == dims.attn_layers { d_f + dims.d_g } else { dims.attn_hidden };
            attn.push(linear(&format!("attention.fc{l}"), width, out));
            width = out;
        }
        let g1 = linear("head.g1", d_f, dims.d_g);
        let g2 = linear("head.g2", dims.d_g, 1);
        Ok(Self { segments, total, conv, attn, g1, g2, side: dims.side })
    }

    pub fn d_f(&self) -> usize {
        self.conv.last().map_or(0, |c| c.cout)
    }

    pub fn d_t(&self) -> usize {
        self.attn[0].inp - self.d_f()
    }

    pub fn input_len(&self) -> usize {
        2 * self.side * self.side
    }

    /// He-normal weights for ReLU layers, `1/fan_in` variance for layers
    /// feeding a sigmoid, zero biases.
    pub fn init<S: Scalar>(&self, seed: u64) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![S::zero(); self.total];
        let mut fill = |off: usize, len: usize, fan_in: usize, gain: f64| {
            let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive variance");
            for v in &mut p[off..off + len] {
                *v = S::lit(dist.sample(&mut rng));
            }
        };
        for c in &self.conv {
            fill(c.w, c.cout * c.cin * 9, c.cin * 9, 2.0);
        }
        let last = self.attn.len() - 1;
        for (i, l) in self.attn.iter().enumerate() {
            fill(l.w, l.out * l.inp, l.inp, if i == last { 1.0 } else { 2.0 });
        }
        fill(self.g1.w, self.g1.out * self.g1.inp, self.g1.inp, 2.0);
        fill(self.g2.w, self.g2.inp, self.g2.inp, 1.0);
        p
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn relu_inplace<S: Scalar>(v: &mut [S]) {
    for x in v {
        if *x < S::zero() {
            *x = S::zero();
        }
    }
}

/// Valid output and input ranges for a tap offset `d` along an axis of size `n`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

fn conv3x3<S: Scalar>(p: &[S], c: Conv, input: &[S], side: usize) -> Vec<S> {
    let hw = side * side;
    let mut out = vec![S::zero(); c.cout * hw];
    for co in 0..c.cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.fill(p[c.b + co]);
        for ci in 0..c.cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(side, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(side, dx);
                    let w = p[c.w + ((co * c.cin + ci) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut o[y * side + x0..y * side + x1];
                        let start = iy * side + (x0 as isize + dx) as usize;
                        let irow = &inp[start..start + (x1 - x0)];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a += w * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `g` and returns the input gradient.
fn conv3x3_backward<S: Scalar>(p: &[S], c: Conv, input: &[S], dout: &[S], side: usize, g: &mut [S]) -> Vec<S> {
    let hw = side * side;
    let mut din = vec![S::zero(); c.cin * hw];
    for co in 0..c.cout {
        let d = &dout[co * hw..(co + 1) * hw];
        g[c.b + co] += d.iter().copied().sum::<S>();
        for ci in 0..c.cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            let dinp = &mut din[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(side, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(side, dx);
                    let wi = c.w + ((co * c.cin + ci) * 3 + ky) * 3 + kx;
                    let w = p[wi];
                    let mut gw = S::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let drow = &d[y * side + x0..y * side + x1];
                        let start = iy * side + (x0 as isize + dx) as usize;
                        let irow = &inp[start..start + (x1 - x0)];
                        for (&a, &b) in drow.iter().zip(irow) {
                            gw += a * b;
                        }
                        let dirow = &mut dinp[start..start + (x1 - x0)];
                        for (a, &b) in dirow.iter_mut().zip(drow) {
                            *a += w * b;
                        }
                    }
                    g[wi] += gw;
                }
            }
        }
    }
    din
}

fn avgpool2<S: Scalar>(input: &[S], channels: usize, side: usize) -> Vec<S> {
    let half = side / 2;
    let q = S::lit(0.25);
    let mut out = vec![S::zero(); channels * half * half];
    for c in 0..channels {
        let inp = &input[c * side * side..];
        for y in 0..half {
            for x in 0..half {
                let (a, b) = (2 * y * side + 2 * x, (2 * y + 1) * side + 2 * x);
                out[(c * half + y) * half + x] = (inp[a] + inp[a + 1] + inp[b] + inp[b + 1]) * q;
            }
        }
    }
    out
}

fn linear_forward<S: Scalar>(p: &[S], l: Linear, x: &[S]) -> Vec<S> {
    (0..l.out)
        .map(|o| {
            let row = &p[l.w + o * l.inp..l.w + (o + 1) * l.inp];
            p[l.b + o] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<S>()
        })
        .collect()
}

fn linear_backward<S: Scalar>(p: &[S], l: Linear, x: &[S], dy: &[S], g: &mut [S]) -> Vec<S> {
    let mut dx = vec![S::zero(); l.inp];
    for o in 0..l.out {
        let d = dy[o];
        if d == S::zero() {
            continue;
        }
        g[l.b + o] += d;
        let row = l.w + o * l.inp;
        for i in 0..l.inp {
            g[row + i] += d * x[i];
            dx[i] += d * p[row + i];
        }
    }
    dx
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<S> {
    /// Block inputs and pre-activation conv outputs, per block.
    blocks: Vec<(Vec<S>, Vec<S>)>,
    f1: Vec<S>,
    /// Inputs to each attention layer; the last entry is the gate vector.
    attn: Vec<Vec<S>>,
    u: Vec<S>,
    g: Vec<S>,
    v: Vec<S>,
    pub output: S,
}

pub fn forward<S: Scalar>(layout: &Layout, p: &[S], input: &[S], cond: &[S]) -> Result<Cache<S>> {
    if input.len() != layout.input_len() {
        return Err(Error::LengthMismatch(input.len(), layout.input_len()));
    }
    if cond.len() != layout.d_t() {
        return Err(Error::LengthMismatch(cond.len(), layout.d_t()));
    }
    let mut side = layout.side;
    let mut x = input.to_vec();
    let mut blocks = Vec::with_capacity(layout.conv.len());
    for &c in &layout.conv {
        let pre = conv3x3(p, c, &x, side);
        let mut act = pre.clone();
        relu_inplace(&mut act);
        let pooled = avgpool2(&act, c.cout, side);
        blocks.push((std::mem::replace(&mut x, pooled), pre));
        side /= 2;
    }
    let hw = S::from_usize(side * side).expect("spatial size");
    let f1: Vec<S> = x.chunks(side * side).map(|ch| ch.iter().copied().sum::<S>() / hw).collect();

    let mut a: Vec<S> = f1.iter().chain(cond).copied().collect();
    let mut attn = Vec::with_capacity(layout.attn.len() + 1);
    let last = layout.attn.len() - 1;
    for (i, &l) in layout.attn.iter().enumerate() {
        let mut z = linear_forward(p, l, &a);
        if i == last {
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
        } else {
            relu_inplace(&mut z);
        }
        attn.push(std::mem::replace(&mut a, z));
    }
    attn.push(a);
    let omega = attn.last().unwrap();
    let d_f = f1.len();
    let u: Vec<S> = f1.iter().zip(&omega[..d_f]).map(|(&f, &w)| f * w).collect();
    let mut g = linear_forward(p, layout.g1, &u);
    relu_inplace(&mut g);
    let v: Vec<S> = g.iter().zip(&omega[d_f..]).map(|(&a, &w)| a * w).collect();
    let output = sigmoid(linear_forward(p, layout.g2, &v)[0]);
    if !output.is_finite() {
        return Err(Error::NonFinite("regressor output".into()));
    }
    Ok(Cache { blocks, f1, attn, u, g, v, output })
}

/// Adds `d loss / d params` to `grad` given `d loss / d output`.
pub fn backward<S: Scalar>(layout: &Layout, p: &[S], cache: &Cache<S>, d_output: S, grad: &mut [S]) {
    let y = cache.output;
    let d_logit = d_output * y * (S::one() - y);
    let dv = linear_backward(p, layout.g2, &cache.v, &[d_logit], grad);

    let omega = cache.attn.last().unwrap();
    let d_f = cache.f1.len();
    let mut d_omega = vec![S::zero(); omega.len()];
    let mut dg = vec![S::zero(); cache.g.len()];
    for k in 0..cache.g.len() {
        d_omega[d_f + k] = dv[k] * cache.g[k];
        dg[k] = if cache.g[k] > S::zero() { dv[k] * omega[d_f + k] } else { S::zero() };
    }
    let du = linear_backward(p, layout.g1, &cache.u, &dg, grad);
    let mut df1 = vec![S::zero(); d_f];
    for k in 0..d_f {
        d_omega[k] = du[k] * cache.f1[k];
        df1[k] = du[k] * omega[k];
    }

    // attention MLP; the first input block is f1, the remainder the condition
    let last = layout.attn.len() - 1;
    let mut dz: Vec<S> = d_omega.iter().zip(omega).map(|(&d, &w)| d * w * (S::one() - w)).collect();
    for i in (0..=last).rev() {
        let l = layout.attn[i];
        let da = linear_backward(p, l, &cache.attn[i], &dz, grad);
        if i == 0 {
            for k in 0..d_f {
                df1[k] += da[k];
            }
        } else {
            let act = &cache.attn[i];
            dz = da.iter().zip(act).map(|(&d, &a)| if a > S::zero() { d } else { S::zero() }).collect();
        }
    }

    // global average pool, then the conv blocks in reverse
    let hw = (layout.side >> layout.conv.len()).pow(2);
    let inv = S::one() / S::from_usize(hw).expect("spatial size");
    let mut dx: Vec<S> = df1.iter().flat_map(|&d| std::iter::repeat(d * inv).take(hw)).collect();
    let q = S::lit(0.25);
    for (bi, &c) in layout.conv.iter().enumerate().rev() {
        let (input, pre) = &cache.blocks[bi];
        let side = layout.side >> bi;
        let half = side / 2;
        // an odd trailing row/column was dropped by pooling and gets no gradient
        let mut dpre = vec![S::zero(); c.cout * side * side];
        for ch in 0..c.cout {
            for yy in 0..half {
                for xx in 0..half {
                    let d = dx[(ch * half + yy) * half + xx] * q;
                    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (ch * side + 2 * yy + oy) * side + 2 * xx + ox;
                        if pre[i] > S::zero() {
                            dpre[i] = d;
                        }
                    }
                }
            }
        }
        if bi == 0 {
            conv3x3_weight_grads(c, input, &dpre, side, grad);
        } else {
            dx = conv3x3_backward(p, c, input, &dpre, side, grad);
        }
    }
}

/// First block: the input gradient is not needed.
fn conv3x3_weight_grads<S: Scalar>(c: Conv, input: &[S], dout: &[S], side: usize, g: &mut [S]) {
    let hw = side * side;
    for co in 0..c.cout {
        let d = &dout[co * hw..(co + 1) * hw];
        g[c.b + co] += d.iter().copied().sum::<S>();
        for ci in 0..c.cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(side, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(side, dx);
                    let mut gw = S::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let start = iy * side + (x0 as isize + dx) as usize;
                        for (&a, &b) in d[y * side + x0..y * side + x1].iter().zip(&inp[start..start + (x1 - x0)]) {
                            gw += a * b;
                        }
                    }
                    g[c.w + ((co * c.cin + ci) * 3 + ky) * 3 + kx] += gw;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> Layout {
        Layout::new(&[3, 4], Dims { side: 7, d_t: 3, d_g: 3, attn_hidden: 5, attn_layers: 2 }).unwrap()
    }

    #[test]
    fn layout_shapes() {
        let l = small();
        assert_eq!(l.d_f(), 4);
        assert_eq!(l.d_t(), 3);
        assert_eq!(l.segments[0].shape, vec![3, 2, 3, 3]);
        assert_eq!(l.segments.last().unwrap().name, "head.g2.bias");
        assert_eq!(l.total, l.segments.iter().map(Segment::len).sum::<usize>());
        assert!(Layout::new(&[2; 4], Dims { side: 8, d_t: 1, d_g: 1, attn_hidden: 1, attn_layers: 1 }).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let c = Conv { w: 0, b: 9, cin: 1, cout: 1 };
        let mut p = vec![0.0f64; 10];
        p[4] = 1.0; // centre tap
        p[5] = 2.0; // right neighbour
        p[9] = 0.5;
        let input: Vec<f64> = (0..9).map(f64::from).collect();
        let out = conv3x3(&p, c, &input, 3);
        assert_eq!(out, vec![2.5, 5.5, 2.5, 11.5, 14.5, 5.5, 20.5, 23.5, 8.5]);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let layout = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = layout.init(1);
        let input: Vec<f64> = (0..layout.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cond: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = |q: &[f64]| forward(&layout, q, &input, &cond).unwrap().output;
        let cache = forward(&layout, &p, &input, &cond).unwrap();
        let mut g = vec![0.0; layout.total];
        backward(&layout, &p, &cache, 1.0, &mut g);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..layout.total {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += eps;
            b[i] -= eps;
            let num = (out(&a) - out(&b)) / (2.0 * eps);
            worst = worst.max((num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-7));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn output_is_a_probability_and_deterministic() {
        let layout = small();
        let p: Vec<f32> = layout.init(3);
        let input = vec![0.7f32; layout.input_len()];
        let a = forward(&layout, &p, &input, &[1.0, 0.0, 0.0]).unwrap().output;
        let b = forward(&layout, &p, &input, &[1.0, 0.0, 0.0]).unwrap().output;
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((0.0..=1.0).contains(&a));
        assert!(forward(&layout, &p, &input, &[1.0]).is_err());
    }
}
