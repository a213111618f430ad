//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! replays the tape in reverse. Nodes that depend on neither a trainable
//! parameter nor a gradient-tracked input carry no backward work, so frozen
//! sub-networks cost one forward pass only.
//!
//! Operations with discrete branches (ReLU signs, sampling cells, argmax,
//! clamps, polygon clipping structure) fold their branch decisions into a
//! signature when [`Graph::track_branches`] is enabled. Two evaluations with
//! equal signatures lie on the same smooth piece of the loss surface, which
//! is what the finite-difference checker relies on.

use std::collections::HashMap;

use crate::geometry::{bev_iou_generic, BilinearCell, Dual5, Scalar};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

/// What a backward closure sees: the incoming gradient, the node's own
/// value, its parents' values and which parents want a gradient.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub value: &'a Tensor,
    pub parents: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<Backward>,
    needs_grad: bool,
}

/// Per-sample read location for [`Graph::bilinear_gather`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    /// First row of the sampled map inside the stacked value matrix.
    pub base_row: usize,
    pub height: usize,
    pub width: usize,
    /// First channel read; `width` channels are read from here.
    pub channel: usize,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    signature: Option<u64>,
}

#[inline]
fn mix(sig: &mut u64, bits: u64) {
    *sig = (*sig ^ bits.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0x0000_0100_0000_01b3);
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = K * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability clamp shared by the focal losses.
pub const PROB_EPS: f64 = 1e-7;

/// Geometry of a 2-D convolution over a `[channels × (h·w)]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

fn im2col(x: &[f64], s: &ConvShape) -> Tensor {
    let (ho, wo) = s.out_hw();
    let k = s.kernel;
    let mut col = Tensor::zeros(s.in_channels * k * k, ho * wo);
    for c in 0..s.in_channels {
        let plane = &x[c * s.height * s.width..(c + 1) * s.height * s.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.width..(iy as usize + 1) * s.width];
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.width as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &Tensor, s: &ConvShape) -> Tensor {
    let (ho, wo) = s.out_hw();
    let k = s.kernel;
    let mut x = Tensor::zeros(s.in_channels, s.height * s.width);
    for c in 0..s.in_channels {
        let plane = x.row_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let src = col.row((c * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.width as isize {
                            plane[iy as usize * s.width + ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            grads: Vec::new(),
            signature: None,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Starts recording branch decisions into the signature.
    pub fn track_branches(&mut self) {
        self.signature = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn signature(&self) -> Option<u64> {
        self.signature
    }

    pub fn note_branch(&mut self, bits: u64) {
        if let Some(sig) = self.signature.as_mut() {
            mix(sig, bits);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<Backward>) -> Var {
        let needs_grad = backward.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward = if needs_grad { backward } else { None };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Input whose gradient is recorded (retrieve it with [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf for a stored parameter; trainable parameters track gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn backward(&mut self, root: Var) {
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        let root_val = &self.nodes[root.0].value;
        self.grads[root.0] = Some(Tensor::full(root_val.rows, root_val.cols, 1.0));
        for i in (0..=root.0).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let ctx = BackwardCtx {
                    grad: &grad,
                    value: &node.value,
                    parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                    needs: node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect(),
                };
                let pgrads = bw(&ctx);
                let parents = node.parents.clone();
                for (p, g) in parents.into_iter().zip(pgrads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[p.0].needs_grad {
                        continue;
                    }
                    match &mut self.grads[p.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            self.grads[i] = Some(grad);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameters read into the graph so far, in id order.
    pub fn used_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.param_vars.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Gradients of every trainable parameter touched by the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .filter_map(|(&id, v)| self.grad(*v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut out = va.clone();
        out.data.iter_mut().zip(&vb.data).for_each(|(x, y)| *x -= y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))])),
        )
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let mut out = va.clone();
        out.data.iter_mut().zip(&vb.data).for_each(|(x, y)| *x *= y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|c| {
                let ga = c.needs[0].then(|| {
                    let mut g = c.grad.clone();
                    g.data.iter_mut().zip(&c.parents[1].data).for_each(|(x, y)| *x *= y);
                    g
                });
                let gb = c.needs[1].then(|| {
                    let mut g = c.grad.clone();
                    g.data.iter_mut().zip(&c.parents[0].data).for_each(|(x, y)| *x *= y);
                    g
                });
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, vec![a], Some(Box::new(move |c| vec![Some(c.grad.map(|g| g * s))])))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), k.shape(), "mul_const shape mismatch");
        let mut out = va.clone();
        out.data.iter_mut().zip(&k.data).for_each(|(x, y)| *x *= y);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let mut g = c.grad.clone();
                g.data.iter_mut().zip(&k.data).for_each(|(x, y)| *x *= y);
                vec![Some(g)]
            })),
        )
    }

    pub fn add_const(&mut self, a: Var, k: &Tensor) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), k.shape(), "add_const shape mismatch");
        out.add_assign(k);
        self.push(out, vec![a], Some(Box::new(|c| vec![Some(c.grad.clone())])))
    }

    /// Adds a `[1 × cols]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols), vr.shape(), "add_row shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            out.row_mut(r).iter_mut().zip(&vr.data).for_each(|(x, y)| *x += y);
        }
        self.push(
            out,
            vec![a, row],
            Some(Box::new(|c| {
                let gr = c.needs[1].then(|| {
                    let mut g = Tensor::zeros(1, c.grad.cols);
                    for r in 0..c.grad.rows {
                        g.data.iter_mut().zip(c.grad.row(r)).for_each(|(x, y)| *x += y);
                    }
                    g
                });
                vec![Some(c.grad.clone()), gr]
            })),
        )
    }

    /// Adds a `[rows × 1]` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!((va.rows, 1), vc.shape(), "add_col shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            let b = vc.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x += b);
        }
        self.push(
            out,
            vec![a, col],
            Some(Box::new(|c| {
                let gc = c.needs[1].then(|| {
                    Tensor::from_vec(
                        c.grad.rows,
                        1,
                        (0..c.grad.rows).map(|r| c.grad.row(r).iter().sum()).collect(),
                    )
                });
                vec![Some(c.grad.clone()), gc]
            })),
        )
    }

    /// Multiplies row `r` of `a` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!((va.rows, 1), vc.shape(), "mul_col shape mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            let s = vc.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(
            out,
            vec![a, col],
            Some(Box::new(|c| {
                let (a, col) = (c.parents[0], c.parents[1]);
                let ga = c.needs[0].then(|| {
                    let mut g = c.grad.clone();
                    for r in 0..g.rows {
                        let s = col.data[r];
                        g.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    g
                });
                let gc = c.needs[1].then(|| {
                    Tensor::from_vec(
                        a.rows,
                        1,
                        (0..a.rows)
                            .map(|r| a.row(r).iter().zip(c.grad.row(r)).map(|(x, y)| x * y).sum())
                            .collect(),
                    )
                });
                vec![ga, gc]
            })),
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows, va.cols);
        let mut deriv = Tensor::zeros(va.rows, va.cols);
        for (i, &x) in va.data.iter().enumerate() {
            let (y, d) = f(x);
            out.data[i] = y;
            deriv.data[i] = d;
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let mut g = c.grad.clone();
                g.data.iter_mut().zip(&deriv.data).for_each(|(x, d)| *x *= d);
                vec![Some(g)]
            })),
        )
    }

    fn note_signs(&mut self, a: Var, threshold: f64) {
        if self.signature.is_some() {
            let mut h = 0u64;
            for (i, &x) in self.value(a).data.iter().enumerate() {
                if x > threshold {
                    mix(&mut h, i as u64);
                }
            }
            self.note_branch(h);
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.note_signs(a, 0.0);
        self.unary(a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.note_signs(a, 0.0);
        self.unary(a, |x| if x > 0.0 { (x, 1.0) } else { (-x, -1.0) })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| (x * x, 2.0 * x))
    }

    /// Elementwise clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        if self.signature.is_some() {
            let mut h = 0u64;
            for (i, &x) in self.value(a).data.iter().enumerate() {
                if x < lo || x > hi {
                    mix(&mut h, i as u64 ^ ((x > hi) as u64) << 40);
                }
            }
            self.note_branch(h);
        }
        self.unary(a, move |x| {
            if x < lo {
                (lo, 0.0)
            } else if x > hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        })
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        let (vy, vx) = (self.value(y), self.value(x));
        assert_eq!(vy.shape(), vx.shape());
        let out = Tensor::from_vec(
            vy.rows,
            vy.cols,
            vy.data.iter().zip(&vx.data).map(|(a, b)| a.atan2(*b)).collect(),
        );
        if self.signature.is_some() {
            // branch cut along the negative x axis
            let mut h = 0u64;
            for (i, (a, b)) in self.value(y).data.iter().zip(&self.value(x).data).enumerate() {
                if *b < 0.0 && *a >= 0.0 {
                    mix(&mut h, i as u64);
                }
            }
            self.note_branch(h);
        }
        self.push(
            out,
            vec![y, x],
            Some(Box::new(|c| {
                let (vy, vx) = (c.parents[0], c.parents[1]);
                let mut gy = c.grad.clone();
                let mut gx = c.grad.clone();
                for i in 0..gy.data.len() {
                    let r2 = vy.data[i] * vy.data[i] + vx.data[i] * vx.data[i];
                    let r2 = if r2 == 0.0 { 1.0 } else { r2 };
                    gy.data[i] *= vx.data[i] / r2;
                    gx.data[i] *= -vy.data[i] / r2;
                }
                vec![Some(gy), Some(gx)]
            })),
        )
    }

    // ----- reductions and reshaping -----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(|c| {
                let p = c.parents[0];
                vec![Some(Tensor::full(p.rows, p.cols, c.grad.data[0]))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|c| {
                let (a, b) = (c.parents[0], c.parents[1]);
                let (m, k, n) = (a.rows, a.cols, b.cols);
                let ga = c.needs[0].then(|| {
                    let mut g = Tensor::zeros(m, k);
                    gemm(m, n, k, &c.grad.data, false, &b.data, true, &mut g.data, false);
                    g
                });
                let gb = c.needs[1].then(|| {
                    let mut g = Tensor::zeros(k, n);
                    gemm(k, m, n, &a.data, true, &c.grad.data, false, &mut g.data, false);
                    g
                });
                vec![ga, gb]
            })),
        )
    }

    /// `x·W + b` with `W: [in × out]` and `b: [1 × out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, vec![a], Some(Box::new(|c| vec![Some(c.grad.transpose())])))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let rows = self.value(vars[0]).rows;
        let widths: Vec<usize> = vars.iter().map(|&v| self.value(v).cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for (&v, &w) in vars.iter().zip(&widths) {
            let t = self.value(v);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        self.push(
            out,
            vars.to_vec(),
            Some(Box::new(move |c| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(&c.needs)
                    .map(|(&w, &need)| {
                        let g = need.then(|| {
                            let mut g = Tensor::zeros(c.grad.rows, w);
                            for r in 0..c.grad.rows {
                                g.row_mut(r).copy_from_slice(&c.grad.row(r)[off..off + w]);
                            }
                            g
                        });
                        off += w;
                        g
                    })
                    .collect()
            })),
        )
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        let cols = self.value(vars[0]).cols;
        let heights: Vec<usize> = vars.iter().map(|&v| self.value(v).rows).collect();
        let mut data = Vec::with_capacity(heights.iter().sum::<usize>() * cols);
        for &v in vars {
            let t = self.value(v);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(heights.iter().sum(), cols, data);
        self.push(
            out,
            vars.to_vec(),
            Some(Box::new(move |c| {
                let mut off = 0;
                heights
                    .iter()
                    .zip(&c.needs)
                    .map(|(&h, &need)| {
                        let g = need.then(|| {
                            Tensor::from_vec(
                                h,
                                c.grad.cols,
                                c.grad.data[off * c.grad.cols..(off + h) * c.grad.cols].to_vec(),
                            )
                        });
                        off += h;
                        g
                    })
                    .collect()
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows, len);
        for r in 0..va.rows {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let p = c.parents[0];
                let mut g = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    g.row_mut(r)[start..start + len].copy_from_slice(c.grad.row(r));
                }
                vec![Some(g)]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(idx.len(), va.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(va.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let p = c.parents[0];
                let mut g = Tensor::zeros(p.rows, p.cols);
                for (o, &i) in idx.iter().enumerate() {
                    g.row_mut(i).iter_mut().zip(c.grad.row(o)).for_each(|(x, y)| *x += y);
                }
                vec![Some(g)]
            })),
        )
    }

    /// Gathers flat elements of `a` into an `[idx.len() × 1]` column.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let out = Tensor::from_vec(idx.len(), 1, idx.iter().map(|&i| va.data[i]).collect());
        let idx = idx.to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let p = c.parents[0];
                let mut g = Tensor::zeros(p.rows, p.cols);
                for (o, &i) in idx.iter().enumerate() {
                    g.data[i] += c.grad.data[o];
                }
                vec![Some(g)]
            })),
        )
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, va.data.clone());
        self.push(
            out,
            vec![a],
            Some(Box::new(|c| {
                let p = c.parents[0];
                vec![Some(Tensor::from_vec(p.rows, p.cols, c.grad.data.clone()))]
            })),
        )
    }

    /// Max over consecutive blocks of `group` rows: `[(n·group) × d] → [n × d]`.
    pub fn max_row_groups(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        assert!(
            group > 0 && va.rows.is_multiple_of(group),
            "max_row_groups: bad grouping"
        );
        let n = va.rows / group;
        let d = va.cols;
        let mut out = Tensor::zeros(n, d);
        let mut arg = vec![0usize; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = i * group;
                for r in i * group..(i + 1) * group {
                    let v = va.get(r, j);
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out.set(i, j, best);
                arg[i * d + j] = best_r;
            }
        }
        if self.signature.is_some() {
            let mut h = 0u64;
            for &r in &arg {
                mix(&mut h, r as u64);
            }
            self.note_branch(h);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let p = c.parents[0];
                let mut g = Tensor::zeros(p.rows, p.cols);
                for (k, &r) in arg.iter().enumerate() {
                    g.data[r * d + k % d] += c.grad.data[k];
                }
                vec![Some(g)]
            })),
        )
    }

    // ----- normalization -----

    /// Softmax over consecutive column groups of width `group`. Entries
    /// whose `mask` is false get probability zero; an all-masked group
    /// yields zeros.
    pub fn softmax_groups(&mut self, a: Var, group: usize, mask: Option<&[bool]>) -> Var {
        let va = self.value(a);
        assert!(
            group > 0 && va.cols.is_multiple_of(group),
            "softmax group must divide columns"
        );
        if let Some(m) = mask {
            assert_eq!(m.len(), va.len(), "softmax mask length mismatch");
        }
        let mut out = Tensor::zeros(va.rows, va.cols);
        for start in (0..va.len()).step_by(group) {
            let live = |i: usize| mask.is_none_or(|m| m[i]);
            let mx = (start..start + group)
                .filter(|&i| live(i))
                .map(|i| va.data[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for i in start..start + group {
                if live(i) {
                    let e = (va.data[i] - mx).exp();
                    out.data[i] = e;
                    z += e;
                }
            }
            for i in start..start + group {
                out.data[i] /= z;
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |c| {
                let p = c.value;
                let mut g = Tensor::zeros(p.rows, p.cols);
                for start in (0..p.len()).step_by(group) {
                    let dot: f64 = (start..start + group).map(|i| c.grad.data[i] * p.data[i]).sum();
                    for i in start..start + group {
                        g.data[i] = p.data[i] * (c.grad.data[i] - dot);
                    }
                }
                vec![Some(g)]
            })),
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`[1 × d]`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (n, d) = va.shape();
        let vg = self.value(gamma).data.clone();
        let vb = self.value(beta).data.clone();
        assert_eq!(vg.len(), d);
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat.set(r, j, xh);
                out.set(r, j, vg[j] * xh + vb[j]);
            }
        }
        self.push(
            out,
            vec![a, gamma, beta],
            Some(Box::new(move |c| {
                let gamma = c.parents[1];
                let mut gx = Tensor::zeros(n, d);
                let mut gg = Tensor::zeros(1, d);
                let mut gb = Tensor::zeros(1, d);
                for r in 0..n {
                    let gy = c.grad.row(r);
                    let xh = xhat.row(r);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gamma.data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        gg.data[j] += gy[j] * xh[j];
                        gb.data[j] += gy[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let row = gx.row_mut(r);
                    for j in 0..d {
                        let dxh = gy[j] * gamma.data[j];
                        row[j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            })),
        )
    }

    // ----- convolution -----

    /// 2-D convolution. `x: [Cin × H·W]`, `w: [Cout × Cin·k·k]`, `b: [Cout × 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.rows, shape.in_channels, "conv input channels");
        assert_eq!(vx.cols, shape.height * shape.width, "conv input plane");
        let kk = shape.in_channels * shape.kernel * shape.kernel;
        assert_eq!(vw.cols, kk, "conv weight shape");
        let cout = vw.rows;
        let (ho, wo) = shape.out_hw();
        let col = im2col(&vx.data, &shape);
        let mut out = Tensor::zeros(cout, ho * wo);
        gemm(
            cout,
            kk,
            ho * wo,
            &vw.data,
            false,
            &col.data,
            false,
            &mut out.data,
            false,
        );
        let vb = self.value(b);
        for r in 0..cout {
            let bias = vb.data[r];
            out.row_mut(r).iter_mut().for_each(|v| *v += bias);
        }
        let keep_col = self.nodes[w.0].needs_grad;
        let col = keep_col.then_some(col);
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |c| {
                let w = c.parents[1];
                let gx = c.needs[0].then(|| {
                    let mut dcol = Tensor::zeros(kk, ho * wo);
                    gemm(
                        kk,
                        cout,
                        ho * wo,
                        &w.data,
                        true,
                        &c.grad.data,
                        false,
                        &mut dcol.data,
                        false,
                    );
                    col2im(&dcol, &shape)
                });
                let gw = if c.needs[1] {
                    let col = col.as_ref().expect("im2col kept for weight gradient");
                    let mut g = Tensor::zeros(cout, kk);
                    gemm(
                        cout,
                        ho * wo,
                        kk,
                        &c.grad.data,
                        false,
                        &col.data,
                        true,
                        &mut g.data,
                        false,
                    );
                    Some(g)
                } else {
                    None
                };
                let gb = c.needs[2]
                    .then(|| Tensor::from_vec(cout, 1, (0..cout).map(|r| c.grad.row(r).iter().sum()).collect()));
                vec![gx, gw, gb]
            })),
        )
    }

    /// Nearest-neighbour ×2 upsampling of a `[C × h·w]` map.
    pub fn upsample2x(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let ch = vx.rows;
        let mut out = Tensor::zeros(ch, 4 * h * w);
        for c in 0..ch {
            let src = vx.row(c);
            let dst = out.row_mut(c);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            out,
            vec![x],
            Some(Box::new(move |c| {
                let mut g = Tensor::zeros(ch, h * w);
                for ci in 0..ch {
                    let src = c.grad.row(ci);
                    let dst = g.row_mut(ci);
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                vec![Some(g)]
            })),
        )
    }

    // ----- deformable sampling -----

    /// Bilinear reads from a stacked value matrix. Sample `s` reads
    /// `width` channels starting at `specs[s].channel` from the
    /// `height × width` map whose cells occupy rows
    /// `base_row .. base_row + height·width` of `values`, at the normalized
    /// location `locs[s] = (x, y)`. Locations outside `[0, 1]²` read zeros.
    pub fn bilinear_gather(&mut self, values: Var, locs: Var, specs: &[SampleSpec], width: usize) -> Var {
        let vv = self.value(values);
        let vl = self.value(locs);
        assert_eq!(vl.shape(), (specs.len(), 2), "locs must be [samples × 2]");
        let mut out = Tensor::zeros(specs.len(), width);
        let mut cells: Vec<Option<BilinearCell>> = Vec::with_capacity(specs.len());
        let mut sig = 0u64;
        for (s, spec) in specs.iter().enumerate() {
            debug_assert!(spec.channel + width <= vv.cols);
            let cell = BilinearCell::locate(vl.get(s, 0), vl.get(s, 1), spec.height, spec.width);
            if let Some(cell) = &cell {
                mix(&mut sig, (cell.x0 as u64) << 32 ^ cell.y0 as u64 ^ (s as u64) << 48);
                let row = out.row_mut(s);
                for tap in cell.taps(spec.height, spec.width) {
                    let src = &vv.row(spec.base_row + tap.index)[spec.channel..spec.channel + width];
                    row.iter_mut().zip(src).for_each(|(o, v)| *o += tap.weight * v);
                }
            }
            cells.push(cell);
        }
        self.note_branch(sig);
        let specs = specs.to_vec();
        self.push(
            out,
            vec![values, locs],
            Some(Box::new(move |c| {
                let vv = c.parents[0];
                let mut gv = c.needs[0].then(|| Tensor::zeros(vv.rows, vv.cols));
                let mut gl = c.needs[1].then(|| Tensor::zeros(specs.len(), 2));
                for (s, spec) in specs.iter().enumerate() {
                    let Some(cell) = &cells[s] else { continue };
                    let g = c.grad.row(s);
                    let (mut dpx, mut dpy) = (0.0, 0.0);
                    for tap in cell.taps(spec.height, spec.width) {
                        let r = spec.base_row + tap.index;
                        if let Some(gv) = gv.as_mut() {
                            let dst = &mut gv.row_mut(r)[spec.channel..spec.channel + width];
                            dst.iter_mut().zip(g).for_each(|(d, x)| *d += tap.weight * x);
                        }
                        if gl.is_some() {
                            let src = &vv.row(r)[spec.channel..spec.channel + width];
                            let dot: f64 = src.iter().zip(g).map(|(a, b)| a * b).sum();
                            dpx += tap.d_px * dot;
                            dpy += tap.d_py * dot;
                        }
                    }
                    if let Some(gl) = gl.as_mut() {
                        gl.set(s, 0, dpx * (spec.width.max(1) - 1) as f64);
                        gl.set(s, 1, dpy * (spec.height.max(1) - 1) as f64);
                    }
                }
                vec![gv, gl]
            })),
        )
    }

    /// `out[rows[s], offs[s] .. offs[s]+w] += weights[s] · samples[s]`.
    pub fn weighted_scatter(
        &mut self,
        samples: Var,
        weights: Var,
        targets: &[(usize, usize)],
        out_rows: usize,
        out_cols: usize,
    ) -> Var {
        let vs = self.value(samples);
        let vw = self.value(weights);
        let w = vs.cols;
        assert_eq!(vs.rows, targets.len());
        assert_eq!(vw.shape(), (targets.len(), 1));
        let mut out = Tensor::zeros(out_rows, out_cols);
        for (s, &(r, off)) in targets.iter().enumerate() {
            let k = vw.data[s];
            let dst = &mut out.row_mut(r)[off..off + w];
            dst.iter_mut().zip(vs.row(s)).for_each(|(d, x)| *d += k * x);
        }
        let targets = targets.to_vec();
        self.push(
            out,
            vec![samples, weights],
            Some(Box::new(move |c| {
                let (vs, vw) = (c.parents[0], c.parents[1]);
                let mut gs = c.needs[0].then(|| Tensor::zeros(vs.rows, w));
                let mut gw = c.needs[1].then(|| Tensor::zeros(vw.rows, 1));
                for (s, &(r, off)) in targets.iter().enumerate() {
                    let g = &c.grad.row(r)[off..off + w];
                    if let Some(gs) = gs.as_mut() {
                        let k = vw.data[s];
                        gs.row_mut(s).iter_mut().zip(g).for_each(|(d, x)| *d = k * x);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw.data[s] = vs.row(s).iter().zip(g).map(|(a, b)| a * b).sum();
                    }
                }
                vec![gs, gw]
            })),
        )
    }

    // ----- losses -----

    /// Summed sigmoid focal loss of `logits` against binary `targets`,
    /// with probabilities clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "focal target shape");
        let mut total = 0.0;
        let mut deriv = Tensor::zeros(vl.rows, vl.cols);
        let mut sig = 0u64;
        for (i, &x) in vl.data.iter().enumerate() {
            let p_raw = sigmoid(x);
            let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p_raw);
            if clamped {
                mix(&mut sig, i as u64);
            }
            let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let dp = if clamped { 0.0 } else { p * (1.0 - p) };
            let (l, dl_dp) = focal_term(p, targets.data[i] > 0.5, alpha, gamma);
            total += l;
            deriv.data[i] = dl_dp * dp;
        }
        self.note_branch(sig);
        self.push(
            Tensor::scalar(total),
            vec![logits],
            Some(Box::new(move |c| vec![Some(deriv.map(|d| d * c.grad.data[0]))])),
        )
    }

    /// Penalty-reduced focal loss against a Gaussian heatmap (targets equal
    /// to 1 are positives), summed over all cells.
    pub fn gaussian_focal(&mut self, logits: Var, targets: &Tensor, alpha: f64, beta: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "heatmap target shape");
        let mut total = 0.0;
        let mut deriv = Tensor::zeros(vl.rows, vl.cols);
        for (i, &x) in vl.data.iter().enumerate() {
            let p_raw = sigmoid(x);
            let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p_raw);
            let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let dp = if clamped { 0.0 } else { p * (1.0 - p) };
            let y = targets.data[i];
            let (l, dl_dp) = if y >= 1.0 {
                let a = (1.0 - p).powf(alpha);
                (-a * p.ln(), alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - a / p)
            } else {
                let w = (1.0 - y).powf(beta);
                let pa = p.powf(alpha);
                let lq = (1.0 - p).ln();
                (-w * pa * lq, -w * (alpha * p.powf(alpha - 1.0) * lq - pa / (1.0 - p)))
            };
            total += l;
            deriv.data[i] = dl_dp * dp;
        }
        self.push(
            Tensor::scalar(total),
            vec![logits],
            Some(Box::new(move |c| vec![Some(deriv.map(|d| d * c.grad.data[0]))])),
        )
    }

    /// BEV IoU of each predicted row `[cx, cy, w, l, yaw]` against the
    /// constant box in the same row of `targets`; returns `[n × 1]`.
    pub fn bev_iou(&mut self, boxes: Var, targets: &[[f64; 5]]) -> Var {
        let vb = self.value(boxes);
        assert_eq!(vb.shape(), (targets.len(), 5), "bev_iou expects [n × 5]");
        let mut out = Tensor::zeros(targets.len(), 1);
        let mut jac = Tensor::zeros(targets.len(), 5);
        let mut sig = 0u64;
        for (i, t) in targets.iter().enumerate() {
            let p: [Dual5; 5] = std::array::from_fn(|k| Dual5::var(vb.get(i, k), k));
            let iou = bev_iou_generic(p, t.map(Dual5::cst), &mut sig);
            out.data[i] = iou.v;
            jac.row_mut(i).copy_from_slice(&iou.d);
        }
        self.note_branch(sig);
        self.push(
            out,
            vec![boxes],
            Some(Box::new(move |c| {
                let mut g = jac.clone();
                for r in 0..g.rows {
                    let s = c.grad.data[r];
                    g.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                vec![Some(g)]
            })),
        )
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Focal loss of probability `p` and its derivative with respect to `p`.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    if positive {
        let q = 1.0 - p;
        let l = -alpha * q.powf(gamma) * p.ln();
        let d = alpha * gamma * q.powf(gamma - 1.0) * p.ln() * if gamma == 0.0 { 0.0 } else { 1.0 }
            - alpha * q.powf(gamma) / p;
        (l, d)
    } else {
        let q = 1.0 - p;
        let l = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let d = -(1.0 - alpha)
            * (gamma * p.powf(gamma - 1.0) * q.ln() * if gamma == 0.0 { 0.0 } else { 1.0 } - p.powf(gamma) / q);
        (l, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(input) against central differences for a graph
    /// builder `f` taking one input tensor.
    fn check(input: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = f(&mut g, x);
        let y = g.sum_all(y);
        g.backward(y);
        let analytic = g.grad(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data[i] += delta;
                let mut g = Graph::new();
                let x = g.input(t);
                let y = f(&mut g, x);
                let y = g.sum_all(y);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coordinate {i}: analytic {a}, numeric {fd}"
            );
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, 4, 3);
        let k = rand_tensor(&mut rng, 5, 3);
        check(rand_tensor(&mut rng, 5, 4), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let t = g.tanh(y);
            let s = g.sigmoid(t);
            let e = g.gelu(s);
            let m = g.mul_const(e, k.clone());
            let sq = g.square(m);
            g.exp(sq)
        });
    }

    #[test]
    fn layer_norm_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = rand_tensor(&mut rng, 1, 6);
        let beta = rand_tensor(&mut rng, 1, 6);
        let probe = rand_tensor(&mut rng, 3, 6);
        let mask = vec![
            true, false, true, true, true, true, false, false, false, true, true, true, true, true, true, false, true,
            true,
        ];
        check(rand_tensor(&mut rng, 3, 6), move |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let ln = g.layer_norm(x, ga, be, 1e-5);
            let sm = g.softmax_groups(ln, 3, Some(&mask));
            g.mul_const(sm, probe.clone())
        });
    }

    #[test]
    fn softmax_groups_normalize_and_respect_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 6, vec![0.1, 2.0, -1.0, 5.0, 1.0, 3.0]));
        let mask = [true, true, true, false, false, false];
        let s = g.softmax_groups(x, 3, Some(&mask));
        let v = g.value(s);
        assert!((v.data[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(&v.data[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_and_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = ConvShape {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let w = rand_tensor(&mut rng, 3, 18);
        let b = rand_tensor(&mut rng, 3, 1);
        let probe = rand_tensor(&mut rng, 3, 24);
        check(rand_tensor(&mut rng, 2, 20), move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(x, wv, bv, shape);
            let (ho, wo) = shape.out_hw();
            assert_eq!((ho, wo), (3, 2));
            let u = g.upsample2x(y, ho, wo);
            g.mul_const(u, probe.clone())
        });
    }

    #[test]
    fn conv_weight_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = ConvShape {
            in_channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x = rand_tensor(&mut rng, 2, 16);
        let probe = rand_tensor(&mut rng, 2, 16);
        check(rand_tensor(&mut rng, 2, 18), move |g, w| {
            let xv = g.constant(x.clone());
            let bv = g.constant(Tensor::zeros(2, 1));
            let y = g.conv2d(xv, w, bv, shape);
            g.mul_const(y, probe.clone())
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = ConvShape {
            in_channels: 2,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = rand_tensor(&mut rng, 2, 30);
        let w = rand_tensor(&mut rng, 3, 18);
        let b = rand_tensor(&mut rng, 3, 1);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, shape);
        let (ho, wo) = shape.out_hw();
        for co in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += w.get(co, ci * 9 + ky * 3 + kx) * x.get(ci, iy as usize * 6 + ix as usize);
                                }
                            }
                        }
                    }
                    assert!((g.value(y).get(co, oy * wo + ox) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gather_scatter_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = rand_tensor(&mut rng, 12, 4);
        let specs = vec![
            SampleSpec {
                base_row: 0,
                height: 3,
                width: 2,
                channel: 0,
            },
            SampleSpec {
                base_row: 6,
                height: 2,
                width: 3,
                channel: 2,
            },
            SampleSpec {
                base_row: 0,
                height: 3,
                width: 2,
                channel: 2,
            },
        ];
        let locs = Tensor::from_vec(3, 2, vec![0.31, 0.62, 0.77, 0.13, 0.5, 0.27]);
        let v2 = values.clone();
        let specs2 = specs.clone();
        // gradient wrt locations
        check(locs.clone(), move |g, l| {
            let v = g.constant(v2.clone());
            let s = g.bilinear_gather(v, l, &specs2, 2);
            let w = g.constant(Tensor::from_vec(3, 1, vec![0.3, -1.2, 0.8]));
            g.weighted_scatter(s, w, &[(0, 0), (1, 2), (0, 2)], 2, 4)
        });
        // gradient wrt values and weights
        check(values, move |g, v| {
            let l = g.constant(locs.clone());
            let s = g.bilinear_gather(v, l, &specs, 2);
            let w = g.constant(Tensor::from_vec(3, 1, vec![0.3, -1.2, 0.8]));
            let s2 = g.square(s);
            g.weighted_scatter(s2, w, &[(0, 0), (1, 2), (0, 2)], 2, 4)
        });
    }

    #[test]
    fn reshaping_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let probe = rand_tensor(&mut rng, 2, 7);
        check(rand_tensor(&mut rng, 4, 3), move |g, x| {
            let a = g.slice_cols(x, 1, 2);
            let b = g.gather_rows(x, &[3, 0, 0, 1]);
            let bt = g.transpose(b);
            let r = g.reshape(bt, 4, 3);
            let r2 = g.slice_rows(r, 1, 2);
            let a2 = g.slice_rows(a, 2, 2);
            let c = g.concat_cols(&[r2, a2]);
            let c = g.slice_rows(c, 0, 2);
            let e = g.gather_elems(x, &[0, 5, 5, 11]);
            let e = g.reshape(e, 1, 4);
            let e = g.concat_rows(&[e, e]);
            let ee = g.slice_cols(e, 0, 2);
            let out = g.concat_cols(&[c, ee]);
            let out = g.slice_cols(out, 0, 7);
            g.mul_const(out, probe.clone())
        });
    }

    #[test]
    fn broadcast_and_max_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row = rand_tensor(&mut rng, 1, 3);
        let col = rand_tensor(&mut rng, 6, 1);
        check(rand_tensor(&mut rng, 6, 3), move |g, x| {
            let r = g.constant(row.clone());
            let c = g.input(col.clone());
            let a = g.add_row(x, r);
            let b = g.mul_col(a, c);
            let b = g.add_col(b, c);
            let m = g.max_row_groups(b, 3);
            let t = g.tanh(m);
            g.scale(t, 1.7)
        });
    }

    #[test]
    fn atan2_clamp_abs_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        check(rand_tensor(&mut rng, 2, 4), |g, x| {
            let s = g.slice_cols(x, 0, 2);
            let c = g.slice_cols(x, 2, 2);
            let a = g.atan2(s, c);
            let k = g.clamp(x, -0.9, 0.9);
            let ab = g.abs(k);
            let ab = g.slice_cols(ab, 0, 2);
            g.add(a, ab)
        });
    }

    #[test]
    fn focal_and_iou_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let targets = Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let heat = Tensor::from_vec(2, 3, vec![1.0, 0.4, 0.0, 0.9, 0.1, 1.0]);
        check(rand_tensor(&mut rng, 2, 3), move |g, x| {
            let a = g.sigmoid_focal(x, &targets, 0.25, 2.0);
            let b = g.gaussian_focal(x, &heat, 2.0, 4.0);
            g.add(a, b)
        });
        let boxes = Tensor::from_vec(2, 5, vec![0.2, 0.1, 1.8, 4.2, 0.3, -0.4, 0.2, 0.9, 0.8, 1.2]);
        let gts = [[0.0, 0.0, 2.0, 4.5, 0.1], [-0.1, 0.0, 0.7, 0.7, 0.0]];
        check(boxes, move |g, x| g.bev_iou(x, &gts));
    }

    #[test]
    fn focal_reference_values() {
        let (l, _) = focal_term(0.5, true, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let (l, _) = focal_term((-1f64).exp(), true, 1.0, 0.0);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(2, 2, 1.0));
        let b = g.input(Tensor::full(2, 2, 2.0));
        let c = g.mul(a, b);
        assert!(g.needs_grad(c));
        let d = g.exp(a);
        assert!(!g.needs_grad(d));
        let s = g.sum_all(c);
        g.backward(s);
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data, vec![1.0; 4]);
    }
}
