//! A small reverse-mode tape for the network.
//!
//! Every value is a dense row-major matrix. Token grids are `[tokens, dim]`;
//! volumes are channel-first `[channels, voxels]` with the voxel index
//! x-fastest. Each recorded op owns whatever it needs for its adjoint.
//! Reductions run in a fixed order, so repeated runs are bit-identical.

use std::rc::Rc;

use crate::real::Real;
use crate::volume::{voxel_count, Dims};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gather index standing for "outside the source": contributes zero.
pub const NO_ROW: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.01;
/// Upper bound on im2col buffer elements per chunk.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    LeakyRelu(Var),
    Gather {
        x: Var,
        idx: Rc<Vec<u32>>,
        taps: usize,
        weights: Option<Rc<Vec<T>>>,
    },
    Transpose(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        dims: Dims,
        out_dims: Dims,
        stride: usize,
    },
    Upsample {
        x: Var,
        in_dims: Dims,
        out_dims: Dims,
    },
    Concat(Var, Var),
    Attention {
        qkv: Var,
        bias: Option<Var>,
        plan: Rc<WindowPlan>,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

/// Per-parameter gradients returned by [`Tape::backward`], indexed by the
/// parameter id passed to [`Tape::param`]. Parameters that did not take part
/// in the computation stay `None`.
pub type ParamGrads<T> = Vec<Option<Vec<T>>>;

fn gemm_into<T: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    a_s: (isize, isize),
    b: &[T],
    b_s: (isize, isize),
    beta: T,
    c: &mut [T],
    c_s: (isize, isize),
) {
    T::gemm(m, k, n, T::one(), a, a_s, b, b_s, beta, c, c_s);
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Attention probabilities saved by a [`Tape::window_attention`] node,
    /// window by window, head by head, each a row-major `t x t` block.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Sign pattern of every leaky-ReLU input on the tape. Two evaluations
    /// with equal patterns lie in the same piecewise-smooth region.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(x) = node.op {
                out.extend(self.value(x).iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    fn push(
        &mut self,
        value: Vec<T>,
        rows: usize,
        cols: usize,
        op: Op<T>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn input(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "input shape");
        self.push(value, rows, cols, Op::Input, false)
    }

    /// A trainable leaf; `id` keys the returned gradient.
    pub fn param(&mut self, id: usize, value: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "param shape");
        self.push(value, rows, cols, Op::Param(id), true)
    }

    /// `x [n, i] * w [i, o] + b [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        assert_eq!(i, wi, "linear inner dimension");
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), o, "linear bias");
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm_into(
            (n, i, o),
            self.value(x),
            (i as isize, 1),
            self.value(w),
            (o as isize, 1),
            beta,
            &mut out,
            (o as isize, 1),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, n, o, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, r, c, Op::Add(a, b), ng)
    }

    /// Normalizes each row, then scales and shifts per column.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let inv_c = T::one() / T::c(c as f64);
        let eps = T::c(LN_EPS);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            n,
            c,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v).0).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(out, r, c, Op::Gelu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let s = T::c(LEAKY_SLOPE);
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(out, r, c, Op::LeakyRelu(x), ng)
    }

    /// Row gather. Output row `r` is built from source rows
    /// `idx[r * taps .. (r + 1) * taps]` ([`NO_ROW`] reads zeros): either
    /// concatenated side by side (`weights == None`, `taps * cols` columns)
    /// or combined as a weighted sum (`cols` columns).
    pub fn gather(
        &mut self,
        x: Var,
        idx: Rc<Vec<u32>>,
        taps: usize,
        weights: Option<Rc<Vec<T>>>,
    ) -> Var {
        let (_, c) = self.shape(x);
        assert!(taps > 0 && idx.len().is_multiple_of(taps), "gather taps");
        let rows = idx.len() / taps;
        let xv = self.value(x);
        let out = match &weights {
            None => {
                let mut out = vec![T::zero(); rows * taps * c];
                for (k, &src) in idx.iter().enumerate() {
                    if src != NO_ROW {
                        let s = src as usize * c;
                        out[k * c..(k + 1) * c].copy_from_slice(&xv[s..s + c]);
                    }
                }
                out
            }
            Some(w) => {
                assert_eq!(w.len(), idx.len(), "gather weights");
                let mut out = vec![T::zero(); rows * c];
                for (k, &src) in idx.iter().enumerate() {
                    if src != NO_ROW {
                        let r = k / taps;
                        let s = src as usize * c;
                        let wk = w[k];
                        for j in 0..c {
                            out[r * c + j] += wk * xv[s + j];
                        }
                    }
                }
                out
            }
        };
        let cols = if weights.is_some() { c } else { taps * c };
        let ng = self.ng(x);
        self.push(
            out,
            rows,
            cols,
            Op::Gather {
                x,
                idx,
                taps,
                weights,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = transpose(self.value(x), r, c);
        let ng = self.ng(x);
        self.push(out, c, r, Op::Transpose(x), ng)
    }

    /// 3x3x3 convolution with zero padding 1 on `[cin, voxels]`.
    /// `w` is `[cout, cin * 27]`, `b` is `[cout]` (any 2-D shape with that
    /// many elements). Stride 2 gives `ceil(n / 2)` outputs per axis.
    pub fn conv3d(&mut self, x: Var, dims: Dims, w: Var, b: Var, stride: usize) -> Var {
        let (cin, n) = self.shape(x);
        assert_eq!(n, voxel_count(dims), "conv input voxels");
        assert!(stride == 1 || stride == 2);
        let (cout, k) = self.shape(w);
        assert_eq!(k, cin * 27, "conv weight shape");
        assert_eq!(self.value(b).len(), cout, "conv bias");
        let out_dims = dims.map(|d| d.div_ceil(stride));
        let m = voxel_count(out_dims);
        let mut out = vec![T::zero(); cout * m];
        for (co, row) in out.chunks_mut(m).enumerate() {
            row.iter_mut().for_each(|v| *v = self.value(b)[co]);
        }
        let chunk = (IM2COL_BUDGET / k).clamp(1, m);
        let mut col = vec![T::zero(); k * chunk];
        let xv = self.value(x);
        let wv = self.value(w);
        let mut j0 = 0;
        while j0 < m {
            let len = chunk.min(m - j0);
            im2col(
                xv,
                cin,
                dims,
                out_dims,
                stride,
                j0,
                len,
                &mut col[..k * len],
            );
            gemm_into(
                (cout, k, len),
                wv,
                (k as isize, 1),
                &col[..k * len],
                (len as isize, 1),
                T::one(),
                &mut out[j0..],
                (m as isize, 1),
            );
            j0 += len;
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            out,
            cout,
            m,
            Op::Conv3d {
                x,
                w,
                b,
                dims,
                out_dims,
                stride,
            },
            ng,
        )
    }

    /// Separable trilinear resize of `[channels, voxels]` to `out_dims`
    /// (voxel centres aligned, border samples clamped).
    pub fn upsample(&mut self, x: Var, in_dims: Dims, out_dims: Dims) -> Var {
        let (c, n) = self.shape(x);
        assert_eq!(n, voxel_count(in_dims), "upsample input voxels");
        let out = resize(self.value(x), c, in_dims, out_dims);
        let ng = self.ng(x);
        self.push(
            out,
            c,
            voxel_count(out_dims),
            Op::Upsample {
                x,
                in_dims,
                out_dims,
            },
            ng,
        )
    }

    /// Stacks rows of `a` above rows of `b` (channel concatenation).
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat columns");
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, ra + rb, ca, Op::Concat(a, b), ng)
    }

    /// Multi-head attention within the windows of `plan`.
    ///
    /// `qkv` is `[tokens, 3 * dim]` laid out as `[q | k | v]`, each split
    /// into `heads` contiguous head slices. `bias` (when the plan has a
    /// relative-position table) is `[table_len, heads]`.
    pub fn window_attention(
        &mut self,
        qkv: Var,
        bias: Option<Var>,
        plan: Rc<WindowPlan>,
        heads: usize,
    ) -> Var {
        let (n, c3) = self.shape(qkv);
        assert_eq!(n, plan.tokens, "attention token count");
        assert_eq!(c3 % 3, 0);
        let dim = c3 / 3;
        assert_eq!(dim % heads, 0, "heads must divide dim");
        if let Some(b) = bias {
            assert_eq!(self.shape(b), (plan.table_len, heads), "bias table shape");
        }
        let (out, probs) = attention_forward(
            self.value(qkv),
            bias.map(|b| self.value(b)),
            &plan,
            heads,
            dim,
        );
        let ng = self.ng(qkv) || bias.is_some_and(|b| self.ng(b));
        self.push(
            out,
            n,
            dim,
            Op::Attention {
                qkv,
                bias,
                plan,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Backpropagates `seed` (the gradient of a scalar with respect to
    /// `out`) and returns gradients for parameter leaves, indexed by id.
    pub fn backward(&self, out: Var, seed: Vec<T>, n_params: usize) -> ParamGrads<T> {
        assert_eq!(seed.len(), self.value(out).len(), "seed shape");
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result: ParamGrads<T> = (0..n_params).map(|_| None).collect();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, g, &mut grads, &mut result);
        }
        result
    }

    fn backprop(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        result: &mut ParamGrads<T>,
    ) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => add_into(&mut result[*id], &g),
            Op::Linear { x, w, b } => {
                let (n, i) = self.shape(*x);
                let o = node.cols;
                if want(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    gemm_into(
                        (n, o, i),
                        &g,
                        (o as isize, 1),
                        self.value(*w),
                        (1, o as isize),
                        T::zero(),
                        &mut gx,
                        (i as isize, 1),
                    );
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*w) {
                    let mut gw = vec![T::zero(); i * o];
                    gemm_into(
                        (i, n, o),
                        self.value(*x),
                        (1, i as isize),
                        &g,
                        (o as isize, 1),
                        T::zero(),
                        &mut gw,
                        (o as isize, 1),
                    );
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(&mut grads[a.0], &g);
                }
                if want(*b) {
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = (node.rows, node.cols);
                let gm = self.value(*gamma);
                if want(*gamma) || want(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gb = vec![T::zero(); c];
                    for r in 0..n {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                            gb[j] += g[r * c + j];
                        }
                    }
                    if want(*gamma) {
                        add_into(&mut grads[gamma.0], &gg);
                    }
                    if want(*beta) {
                        add_into(&mut grads[beta.0], &gb);
                    }
                }
                if want(*x) {
                    let inv_c = T::one() / T::c(c as f64);
                    let mut gx = vec![T::zero(); n * c];
                    for r in 0..n {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let gh = g[r * c + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat[r * c + j];
                        }
                        s1 *= inv_c;
                        s2 *= inv_c;
                        for j in 0..c {
                            let gh = g[r * c + j] * gm[j];
                            gx[r * c + j] = rstd[r] * (gh - s1 - xhat[r * c + j] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Gelu(x) => {
                let gx: Vec<T> = self
                    .value(*x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| gv * gelu(v).1)
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::LeakyRelu(x) => {
                let s = T::c(LEAKY_SLOPE);
                let gx: Vec<T> = self
                    .value(*x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Gather {
                x,
                idx,
                taps,
                weights,
            } => {
                let (rows, c) = self.shape(*x);
                let mut gx = vec![T::zero(); rows * c];
                for (k, &src) in idx.iter().enumerate() {
                    if src == NO_ROW {
                        continue;
                    }
                    let s = src as usize * c;
                    match weights {
                        None => {
                            for j in 0..c {
                                gx[s + j] += g[k * c + j];
                            }
                        }
                        Some(w) => {
                            let r = k / taps;
                            let wk = w[k];
                            for j in 0..c {
                                gx[s + j] += wk * g[r * c + j];
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Transpose(x) => {
                let gx = transpose(&g, node.rows, node.cols);
                add_into(&mut grads[x.0], &gx);
            }
            Op::Conv3d {
                x,
                w,
                b,
                dims,
                out_dims,
                stride,
            } => {
                let (cin, n) = self.shape(*x);
                let (cout, k) = self.shape(*w);
                let m = node.cols;
                if want(*b) {
                    let gb: Vec<T> = g.chunks(m).map(|row| row.iter().copied().sum()).collect();
                    add_into(&mut grads[b.0], &gb);
                }
                let chunk = (IM2COL_BUDGET / k).clamp(1, m);
                let mut col = vec![T::zero(); k * chunk];
                let mut gcol = vec![T::zero(); k * chunk];
                let mut gw = want(*w).then(|| vec![T::zero(); cout * k]);
                let mut gx = want(*x).then(|| vec![T::zero(); cin * n]);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut j0 = 0;
                while j0 < m {
                    let len = chunk.min(m - j0);
                    if let Some(gw) = gw.as_mut() {
                        im2col(
                            xv,
                            cin,
                            *dims,
                            *out_dims,
                            *stride,
                            j0,
                            len,
                            &mut col[..k * len],
                        );
                        gemm_into(
                            (cout, len, k),
                            &g[j0..],
                            (m as isize, 1),
                            &col[..k * len],
                            (1, len as isize),
                            T::one(),
                            gw,
                            (k as isize, 1),
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm_into(
                            (k, cout, len),
                            wv,
                            (1, k as isize),
                            &g[j0..],
                            (m as isize, 1),
                            T::zero(),
                            &mut gcol[..k * len],
                            (len as isize, 1),
                        );
                        col2im(
                            &gcol[..k * len],
                            cin,
                            *dims,
                            *out_dims,
                            *stride,
                            j0,
                            len,
                            gx,
                        );
                    }
                    j0 += len;
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::Upsample {
                x,
                in_dims,
                out_dims,
            } => {
                let gx = resize_adjoint(&g, node.rows, *in_dims, *out_dims);
                add_into(&mut grads[x.0], &gx);
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                if want(*a) {
                    add_into(&mut grads[a.0], &g[..split]);
                }
                if want(*b) {
                    add_into(&mut grads[b.0], &g[split..]);
                }
            }
            Op::Attention {
                qkv,
                bias,
                plan,
                heads,
                probs,
            } => {
                let (gq, gb) = attention_backward(
                    &g,
                    self.value(*qkv),
                    probs,
                    plan,
                    *heads,
                    node.cols,
                    bias.is_some_and(&want),
                );
                if want(*qkv) {
                    add_into(&mut grads[qkv.0], &gq);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    add_into(&mut grads[b.0], &gb);
                }
            }
        }
    }
}

/// `(gelu(x), gelu'(x))`, tanh approximation.
fn gelu<T: Real>(x: T) -> (T, T) {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = k * (T::one() + T::c(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

fn transpose<T: Real>(v: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}

/// Fills `col [cin * 27, len]` for output voxels `j0 .. j0 + len`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    vals: &[T],
    cin: usize,
    d: Dims,
    od: Dims,
    stride: usize,
    j0: usize,
    len: usize,
    col: &mut [T],
) {
    let n = voxel_count(d);
    let src = tap_sources(d, od, stride, j0, len);
    for ci in 0..cin {
        let x = &vals[ci * n..(ci + 1) * n];
        for tap in 0..27 {
            let row = &mut col[(ci * 27 + tap) * len..(ci * 27 + tap + 1) * len];
            for (c, &s) in row.iter_mut().zip(&src[tap * len..(tap + 1) * len]) {
                *c = if s == NO_ROW {
                    T::zero()
                } else {
                    x[s as usize]
                };
            }
        }
    }
}

/// Scatter-adds `gcol [cin * 27, len]` back onto `gx [cin, voxels]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    gcol: &[T],
    cin: usize,
    d: Dims,
    od: Dims,
    stride: usize,
    j0: usize,
    len: usize,
    gx: &mut [T],
) {
    let n = voxel_count(d);
    let src = tap_sources(d, od, stride, j0, len);
    for ci in 0..cin {
        let x = &mut gx[ci * n..(ci + 1) * n];
        for tap in 0..27 {
            let row = &gcol[(ci * 27 + tap) * len..(ci * 27 + tap + 1) * len];
            for (&g, &s) in row.iter().zip(&src[tap * len..(tap + 1) * len]) {
                if s != NO_ROW {
                    x[s as usize] += g;
                }
            }
        }
    }
}

/// Source voxel of each `(tap, output)` pair of a 3x3x3 kernel with
/// padding 1, `[27, len]`, [`NO_ROW`] outside the grid.
fn tap_sources(d: Dims, od: Dims, stride: usize, j0: usize, len: usize) -> Vec<u32> {
    let mut src = vec![NO_ROW; 27 * len];
    for j in 0..len {
        let o = j0 + j;
        let (ox, oy, oz) = (o % od[0], (o / od[0]) % od[1], o / (od[0] * od[1]));
        let mut tap = 0;
        for dz in 0..3 {
            let z = (oz * stride + dz) as isize - 1;
            for dy in 0..3 {
                let y = (oy * stride + dy) as isize - 1;
                for dx in 0..3 {
                    let x = (ox * stride + dx) as isize - 1;
                    let inside = x >= 0
                        && y >= 0
                        && z >= 0
                        && (x as usize) < d[0]
                        && (y as usize) < d[1]
                        && (z as usize) < d[2];
                    if inside {
                        src[tap * len + j] =
                            (x as usize + d[0] * (y as usize + d[1] * z as usize)) as u32;
                    }
                    tap += 1;
                }
            }
        }
    }
    src
}

/// Linear interpolation taps `(i0, i1, t)` resizing `n_in` samples to `n_out`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s =
                ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Resizes axis `axis` of a `[c, voxels]` block from `d[axis]` samples to
/// `m` samples, or applies the adjoint of the `m -> d[axis]` resize.
fn resize_axis<T: Real>(
    v: &[T],
    c: usize,
    d: Dims,
    axis: usize,
    m: usize,
    adjoint: bool,
) -> (Vec<T>, Dims) {
    let mut od = d;
    od[axis] = m;
    let n_here = d[axis];
    let taps = if adjoint {
        axis_taps(m, n_here)
    } else {
        axis_taps(n_here, m)
    };
    let taps: Vec<(usize, usize, T, T)> = taps
        .into_iter()
        .map(|(a, b, t)| (a, b, T::c(1.0 - t), T::c(t)))
        .collect();
    let stride = [1, d[0], d[0] * d[1]][axis];
    let n_in = voxel_count(d);
    let n_out = voxel_count(od);
    let lines = n_in / n_here;
    let mut out = vec![T::zero(); c * n_out];
    for ch in 0..c {
        let src = &v[ch * n_in..(ch + 1) * n_in];
        let dst = &mut out[ch * n_out..(ch + 1) * n_out];
        for line in 0..lines {
            let inner = line % stride;
            let outer = line / stride;
            let bi = inner + outer * stride * n_here;
            let bo = inner + outer * stride * m;
            if adjoint {
                for (i, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    let g = src[bi + i * stride];
                    dst[bo + i0 * stride] += w0 * g;
                    dst[bo + i1 * stride] += w1 * g;
                }
            } else {
                for (i, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    dst[bo + i * stride] = w0 * src[bi + i0 * stride] + w1 * src[bi + i1 * stride];
                }
            }
        }
    }
    (out, od)
}

fn resize<T: Real>(v: &[T], c: usize, in_dims: Dims, out_dims: Dims) -> Vec<T> {
    let mut cur = v.to_vec();
    let mut d = in_dims;
    for a in 0..3 {
        if d[a] != out_dims[a] {
            let (next, nd) = resize_axis(&cur, c, d, a, out_dims[a], false);
            cur = next;
            d = nd;
        }
    }
    cur
}

fn resize_adjoint<T: Real>(g: &[T], c: usize, in_dims: Dims, out_dims: Dims) -> Vec<T> {
    let mut cur = g.to_vec();
    let mut d = out_dims;
    for a in (0..3).rev() {
        if d[a] != in_dims[a] {
            let (next, nd) = resize_axis(&cur, c, d, a, in_dims[a], true);
            cur = next;
            d = nd;
        }
    }
    cur
}

/// One attention window: participating tokens plus, per ordered token
/// pair, the relative-position table row and whether attention is allowed.
#[derive(Debug, Clone)]
pub struct Window {
    pub tokens: Vec<u32>,
    /// `t * t` table rows (empty without a bias table).
    pub bias_index: Vec<u32>,
    /// `t * t` flags (empty when every pair may attend).
    pub allowed: Vec<bool>,
}

/// Partition of a token grid into (optionally cyclically shifted) windows.
///
/// The window is clipped to the grid per axis; an axis no longer than its
/// window is never shifted. The grid is padded up to a multiple of the
/// window and padding positions are left out of their windows. After a
/// shift, tokens that wrapped around only attend to tokens from the same
/// region.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub grid: Dims,
    pub window: Dims,
    pub shift: Dims,
    pub tokens: usize,
    pub table_len: usize,
    pub windows: Vec<Window>,
}

impl WindowPlan {
    pub fn new(grid: Dims, window: Dims, shifted: bool, with_bias: bool) -> Self {
        let w: Dims = [0, 1, 2].map(|a| window[a].min(grid[a]).max(1));
        let shift: Dims = [0, 1, 2].map(|a| {
            if shifted && grid[a] > w[a] {
                w[a] / 2
            } else {
                0
            }
        });
        let padded: Dims = [0, 1, 2].map(|a| grid[a].div_ceil(w[a]) * w[a]);
        let counts: Dims = [0, 1, 2].map(|a| padded[a] / w[a]);
        let region = |a: usize, p: usize| -> usize {
            if shift[a] == 0 || p < padded[a] - w[a] {
                0
            } else if p < padded[a] - shift[a] {
                1
            } else {
                2
            }
        };
        let table_dims = w.map(|v| 2 * v - 1);
        let table_len = if with_bias {
            table_dims.iter().product()
        } else {
            0
        };
        let any_shift = shift.iter().any(|&s| s > 0);
        let mut windows = Vec::with_capacity(voxel_count(counts));
        for wz in 0..counts[2] {
            for wy in 0..counts[1] {
                for wx in 0..counts[0] {
                    let start = [wx * w[0], wy * w[1], wz * w[2]];
                    let mut tokens = Vec::new();
                    let mut local = Vec::new();
                    let mut labels = Vec::new();
                    for lz in 0..w[2] {
                        for ly in 0..w[1] {
                            for lx in 0..w[0] {
                                let l = [lx, ly, lz];
                                let p: Dims = [0, 1, 2].map(|a| start[a] + l[a]);
                                let o: Dims = [0, 1, 2].map(|a| (p[a] + shift[a]) % padded[a]);
                                if (0..3).any(|a| o[a] >= grid[a]) {
                                    continue;
                                }
                                tokens.push((o[0] + grid[0] * (o[1] + grid[1] * o[2])) as u32);
                                local.push(l);
                                labels.push(
                                    region(0, p[0]) * 9 + region(1, p[1]) * 3 + region(2, p[2]),
                                );
                            }
                        }
                    }
                    if tokens.is_empty() {
                        continue;
                    }
                    let t = tokens.len();
                    let mut bias_index = Vec::new();
                    if with_bias {
                        bias_index.reserve(t * t);
                        for li in &local {
                            for lj in &local {
                                let r: [usize; 3] = [0, 1, 2].map(|a| li[a] + w[a] - 1 - lj[a]);
                                bias_index.push(
                                    ((r[0] * table_dims[1] + r[1]) * table_dims[2] + r[2]) as u32,
                                );
                            }
                        }
                    }
                    let mut allowed = Vec::new();
                    if any_shift {
                        allowed.reserve(t * t);
                        for &a in &labels {
                            for &b in &labels {
                                allowed.push(a == b);
                            }
                        }
                    }
                    windows.push(Window {
                        tokens,
                        bias_index,
                        allowed,
                    });
                }
            }
        }
        WindowPlan {
            grid,
            window: w,
            shift,
            tokens: voxel_count(grid),
            table_len,
            windows,
        }
    }

    /// A single window spanning the whole grid with no bias table.
    pub fn global(grid: Dims) -> Self {
        Self::new(grid, grid, false, false)
    }
}

fn gather_rows<T: Real>(
    src: &[T],
    cols: usize,
    offset: usize,
    width: usize,
    tokens: &[u32],
    dst: &mut [T],
) {
    for (r, &tok) in tokens.iter().enumerate() {
        let s = tok as usize * cols + offset;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[s..s + width]);
    }
}

fn attention_forward<T: Real>(
    qkv: &[T],
    bias: Option<&[T]>,
    plan: &WindowPlan,
    heads: usize,
    dim: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = dim / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let c3 = 3 * dim;
    let mut out = vec![T::zero(); plan.tokens * dim];
    let total: usize = plan
        .windows
        .iter()
        .map(|w| heads * w.tokens.len().pow(2))
        .sum();
    let mut probs = vec![T::zero(); total];
    let mut off = 0;
    for win in &plan.windows {
        let t = win.tokens.len();
        let mut q = vec![T::zero(); t * dim];
        let mut k = vec![T::zero(); t * dim];
        let mut v = vec![T::zero(); t * dim];
        gather_rows(qkv, c3, 0, dim, &win.tokens, &mut q);
        gather_rows(qkv, c3, dim, dim, &win.tokens, &mut k);
        gather_rows(qkv, c3, 2 * dim, dim, &win.tokens, &mut v);
        let mut o = vec![T::zero(); t * dim];
        for h in 0..heads {
            let p = &mut probs[off..off + t * t];
            T::gemm(
                t,
                dh,
                t,
                scale,
                &q[h * dh..],
                (dim as isize, 1),
                &k[h * dh..],
                (1, dim as isize),
                T::zero(),
                p,
                (t as isize, 1),
            );
            if let Some(b) = bias {
                for (s, &bi) in p.iter_mut().zip(&win.bias_index) {
                    *s += b[bi as usize * heads + h];
                }
            }
            if !win.allowed.is_empty() {
                for (s, &ok) in p.iter_mut().zip(&win.allowed) {
                    if !ok {
                        *s = T::neg_infinity();
                    }
                }
            }
            for row in p.chunks_mut(t) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|s| *s *= inv);
            }
            T::gemm(
                t,
                t,
                dh,
                T::one(),
                p,
                (t as isize, 1),
                &v[h * dh..],
                (dim as isize, 1),
                T::zero(),
                &mut o[h * dh..],
                (dim as isize, 1),
            );
            off += t * t;
        }
        for (r, &tok) in win.tokens.iter().enumerate() {
            let d = tok as usize * dim;
            out[d..d + dim].copy_from_slice(&o[r * dim..(r + 1) * dim]);
        }
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    g: &[T],
    qkv: &[T],
    probs: &[T],
    plan: &WindowPlan,
    heads: usize,
    dim: usize,
    want_bias: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let dh = dim / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let c3 = 3 * dim;
    let mut gqkv = vec![T::zero(); plan.tokens * c3];
    let mut gbias = want_bias.then(|| vec![T::zero(); plan.table_len * heads]);
    let mut off = 0;
    for win in &plan.windows {
        let t = win.tokens.len();
        let mut q = vec![T::zero(); t * dim];
        let mut k = vec![T::zero(); t * dim];
        let mut v = vec![T::zero(); t * dim];
        let mut go = vec![T::zero(); t * dim];
        gather_rows(qkv, c3, 0, dim, &win.tokens, &mut q);
        gather_rows(qkv, c3, dim, dim, &win.tokens, &mut k);
        gather_rows(qkv, c3, 2 * dim, dim, &win.tokens, &mut v);
        gather_rows(g, dim, 0, dim, &win.tokens, &mut go);
        let mut gq = vec![T::zero(); t * dim];
        let mut gk = vec![T::zero(); t * dim];
        let mut gv = vec![T::zero(); t * dim];
        let mut dp = vec![T::zero(); t * t];
        for h in 0..heads {
            let p = &probs[off..off + t * t];
            // dV = P^T dO
            T::gemm(
                t,
                t,
                dh,
                T::one(),
                p,
                (1, t as isize),
                &go[h * dh..],
                (dim as isize, 1),
                T::zero(),
                &mut gv[h * dh..],
                (dim as isize, 1),
            );
            // dP = dO V^T
            T::gemm(
                t,
                dh,
                t,
                T::one(),
                &go[h * dh..],
                (dim as isize, 1),
                &v[h * dh..],
                (1, dim as isize),
                T::zero(),
                &mut dp,
                (t as isize, 1),
            );
            // dS = P * (dP - rowsum(P * dP))
            for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(gb) = gbias.as_mut() {
                for (&ds, &bi) in dp.iter().zip(&win.bias_index) {
                    gb[bi as usize * heads + h] += ds;
                }
            }
            T::gemm(
                t,
                t,
                dh,
                scale,
                &dp,
                (t as isize, 1),
                &k[h * dh..],
                (dim as isize, 1),
                T::zero(),
                &mut gq[h * dh..],
                (dim as isize, 1),
            );
            T::gemm(
                t,
                t,
                dh,
                scale,
                &dp,
                (1, t as isize),
                &q[h * dh..],
                (dim as isize, 1),
                T::zero(),
                &mut gk[h * dh..],
                (dim as isize, 1),
            );
            off += t * t;
        }
        for (r, &tok) in win.tokens.iter().enumerate() {
            let base = tok as usize * c3;
            let row = |b: &[T]| -> Vec<T> { b[r * dim..(r + 1) * dim].to_vec() };
            for (j, val) in row(&gq).into_iter().enumerate() {
                gqkv[base + j] += val;
            }
            for (j, val) in row(&gk).into_iter().enumerate() {
                gqkv[base + dim + j] += val;
            }
            for (j, val) in row(&gv).into_iter().enumerate() {
                gqkv[base + 2 * dim + j] += val;
            }
        }
    }
    (gqkv, gbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks d(sum(out * r))/d(param) against central differences for every
    /// element of every parameter.
    fn check<F>(shapes: &[(usize, usize)], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| rand_vec(&mut rng, r * c))
            .collect();
        let eval = |ps: &[Vec<f64>]| -> (Tape<f64>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps
                .iter()
                .zip(shapes)
                .enumerate()
                .map(|(i, (p, &(r, c)))| tape.param(i, p.clone(), r, c))
                .collect();
            let out = build(&mut tape, &vars);
            (tape, out)
        };
        let (tape, out) = eval(&params);
        let weights = rand_vec(&mut ChaCha8Rng::seed_from_u64(7), tape.value(out).len());
        let objective = |ps: &[Vec<f64>]| -> f64 {
            let (t, o) = eval(ps);
            t.value(o).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let grads = tape.backward(out, weights.clone(), params.len());
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let g = grads[pi].as_ref().expect("gradient present");
            for e in 0..p.len() {
                let mut plus = params.clone();
                plus[pi][e] += h;
                let mut minus = params.clone();
                minus[pi][e] -= h;
                let num = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let err = (num - g[e]).abs() / num.abs().max(g[e].abs()).max(1e-4);
                assert!(
                    err < 1e-5,
                    "param {pi}[{e}]: analytic {} numeric {num}",
                    g[e]
                );
            }
        }
    }

    #[test]
    fn linear_layernorm_gelu() {
        check(&[(5, 4), (4, 6), (1, 6), (1, 6), (1, 6)], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            let y = t.layer_norm(y, v[3], v[4]);
            let y = t.gelu(y);
            t.leaky_relu(y)
        });
    }

    #[test]
    fn gather_transpose_concat_add() {
        let idx = Rc::new(vec![0u32, 2, NO_ROW, 1, 3, 3]);
        let w = Rc::new(vec![0.5, 0.25, 1.0, -1.0, 2.0, 0.125]);
        check(&[(4, 3), (9, 3)], move |t, v| {
            let a = t.gather(v[0], idx.clone(), 3, None);
            let b = t.gather(v[0], idx.clone(), 2, Some(w.clone()));
            let bt = t.transpose(b);
            let c = t.concat(bt, bt);
            let ct = t.transpose(c);
            let s = t.add(ct, ct);
            let s = t.transpose(s);
            let a2 = t.linear(a, v[1], None);
            t.concat(s, a2)
        });
    }

    #[test]
    fn conv_stride_one_and_two() {
        let d = [4, 3, 3];
        check(
            &[(2, 36), (3, 54), (1, 3), (2, 81), (1, 2), (2, 54), (2, 1)],
            move |t, v| {
                let y = t.conv3d(v[0], d, v[1], v[2], 1);
                let z = t.conv3d(y, d, v[3], v[4], 2);
                let up = t.upsample(z, [2, 2, 2], d);
                let y2 = t.conv3d(up, d, v[5], v[6], 1);
                t.concat(y2, up)
            },
        );
    }

    #[test]
    fn upsample_adjoint_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ind, outd) = ([3, 2, 5], [7, 4, 2]);
        let x = rand_vec(&mut rng, 2 * 30);
        let y = rand_vec(&mut rng, 2 * 56);
        let ax = resize(&x, 2, ind, outd);
        let aty = resize_adjoint(&y, 2, ind, outd);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(resize(&x, 2, ind, ind), x);
        // A constant field stays constant.
        let c = vec![1.5f64; 30];
        assert!(resize(&c, 1, ind, outd)
            .iter()
            .all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn attention_with_shift_mask_and_bias() {
        let grid = [4, 3, 3];
        let plan = Rc::new(WindowPlan::new(grid, [2, 2, 2], true, true));
        assert_eq!(plan.shift, [1, 1, 1]);
        let n = voxel_count(grid);
        let table = plan.table_len;
        let p2 = plan.clone();
        check(&[(n, 12), (table, 2)], move |t, v| {
            t.window_attention(v[0], Some(v[1]), p2.clone(), 2)
        });
        let p3 = Rc::new(WindowPlan::new(grid, [3, 3, 3], false, false));
        check(&[(n, 18)], move |t, v| {
            t.window_attention(v[0], None, p3.clone(), 3)
        });
    }

    #[test]
    fn plans_cover_every_token_once() {
        for (grid, win, shifted) in [
            ([8, 8, 4], [5, 5, 5], false),
            ([8, 8, 4], [5, 5, 5], true),
            ([4, 4, 2], [5, 5, 5], true),
            ([7, 3, 6], [2, 2, 4], true),
        ] {
            let plan = WindowPlan::new(grid, win, shifted, true);
            let mut seen = vec![0; voxel_count(grid)];
            for w in &plan.windows {
                for &t in &w.tokens {
                    seen[t as usize] += 1;
                }
                let t = w.tokens.len();
                assert_eq!(w.bias_index.len(), t * t);
                assert!(w.bias_index.iter().all(|&b| (b as usize) < plan.table_len));
                if !w.allowed.is_empty() {
                    assert!((0..t).all(|i| w.allowed[i * t + i]));
                }
            }
            assert!(seen.iter().all(|&s| s == 1), "{grid:?} {win:?}");
        }
        let small = WindowPlan::new([4, 4, 2], [5, 5, 5], true, false);
        assert_eq!(small.window, [4, 4, 2]);
        assert_eq!(small.shift, [0, 0, 0]);
        assert_eq!(small.windows.len(), 1);
    }
}
