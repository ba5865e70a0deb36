//! Tape-based reverse-mode automatic differentiation on (channels, time)
//! tensors.
//!
//! A [`Graph`] records every operation of a forward pass eagerly; `backward`
//! walks the tape in reverse and accumulates gradients for parameter leaves
//! (into a flat vector aligned with the [`ParamStore`]) and for any inputs
//! registered with gradient tracking.

use std::collections::HashMap;

use crate::nn::store::{ParamRef, ParamStore};
use crate::nn::tensor::Tensor;

pub type ValId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Constant or gradient-tracked input.
    Leaf,
    /// Parameter leaf; the value is a copy of the store entry.
    Param(ParamRef),
    Conv1d {
        x: ValId,
        w: ValId,
        stride: usize,
        dilation: usize,
        groups: usize,
        kernel: usize,
        pad: (usize, usize),
    },
    ConvT1d {
        x: ValId,
        w: ValId,
        stride: usize,
        kernel: usize,
    },
    Relu(ValId),
    PRelu {
        x: ValId,
        slope: ValId,
    },
    GlobalNorm {
        x: ValId,
        gain: ValId,
        bias: ValId,
        eps: f64,
    },
    MeanTime(ValId),
    RepeatTime { x: ValId },
    ConcatRows(Vec<ValId>),
    ConcatCols(Vec<ValId>),
    Add(ValId, ValId),
    Sub(ValId, ValId),
    Mul(ValId, ValId),
    /// Broadcast multiply of a (1,1) scalar with a tensor.
    ScaleBy {
        scalar: ValId,
        x: ValId,
    },
    /// Sum of elementwise products over two equal-shape tensors -> (1,1).
    Dot(ValId, ValId),
    Sqrt(ValId),
    Ln(ValId),
    Div(ValId, ValId),
    AddConst(ValId),
    MulConst(ValId, f64),
    Clamp {
        x: ValId,
        lo: f64,
        hi: f64,
    },
    /// Trim or zero-pad the time axis to an exact length.
    FitCols { x: ValId },
    /// Softmax cross-entropy of (C,1) logits against a class index -> (1,1).
    CrossEntropy {
        logits: ValId,
        label: usize,
    },
    /// Mean of (1,1) scalars -> (1,1).
    MeanOf(Vec<ValId>),
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    /// d(loss)/d(params), aligned with the flat parameter storage.
    pub params: Vec<f64>,
    /// d(loss)/d(input) for inputs registered via `input_grad`.
    inputs: HashMap<ValId, Tensor>,
}

impl Gradients {
    pub fn input(&self, id: ValId) -> Option<&Tensor> {
        self.inputs.get(&id)
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    tracked_inputs: Vec<ValId>,
    param_leaves: HashMap<ParamRef, ValId>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            vals: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            tracked_inputs: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id]
    }

    pub fn shape(&self, id: ValId) -> (usize, usize) {
        self.vals[id].shape()
    }

    fn push(&mut self, op: Op, val: Tensor, needs_grad: bool) -> ValId {
        let id = self.vals.len();
        self.vals.push(val);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        id
    }

    fn ng(&self, id: ValId) -> bool {
        self.needs_grad[id]
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor) -> ValId {
        self.push(Op::Leaf, t, false)
    }

    /// Gradient-tracked input; its gradient is available from `backward`.
    pub fn input_grad(&mut self, t: Tensor) -> ValId {
        let id = self.push(Op::Leaf, t, true);
        self.tracked_inputs.push(id);
        id
    }

    /// Parameter leaf. Repeated requests for the same parameter share one
    /// leaf, so gradients from every use site accumulate together.
    pub fn param(&mut self, r: ParamRef) -> ValId {
        if let Some(&id) = self.param_leaves.get(&r) {
            return id;
        }
        let t = self.store.tensor(r);
        let id = self.push(Op::Param(r), t, true);
        self.param_leaves.insert(r, id);
        id
    }

    pub fn conv1d(
        &mut self,
        x: ValId,
        w: ValId,
        stride: usize,
        dilation: usize,
        groups: usize,
        kernel: usize,
        pad: (usize, usize),
    ) -> ValId {
        let out = conv1d_fwd(
            &self.vals[x],
            &self.vals[w],
            stride,
            dilation,
            groups,
            kernel,
            pad,
        );
        let needs = self.ng(x) || self.ng(w);
        self.push(
            Op::Conv1d {
                x,
                w,
                stride,
                dilation,
                groups,
                kernel,
                pad,
            },
            out,
            needs,
        )
    }

    pub fn conv_t1d(&mut self, x: ValId, w: ValId, stride: usize, kernel: usize) -> ValId {
        let out = conv_t1d_fwd(&self.vals[x], &self.vals[w], stride, kernel);
        let needs = self.ng(x) || self.ng(w);
        self.push(Op::ConvT1d { x, w, stride, kernel }, out, needs)
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        let mut out = self.vals[x].clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.ng(x);
        self.push(Op::Relu(x), out, needs)
    }

    pub fn prelu(&mut self, x: ValId, slope: ValId) -> ValId {
        debug_assert_eq!(self.vals[slope].len(), 1);
        let a = self.vals[slope].item();
        let mut out = self.vals[x].clone();
        for v in out.data.iter_mut() {
            if *v < 0.0 {
                *v *= a;
            }
        }
        let needs = self.ng(x) || self.ng(slope);
        self.push(Op::PRelu { x, slope }, out, needs)
    }

    pub fn global_norm(&mut self, x: ValId, gain: ValId, bias: ValId, eps: f64) -> ValId {
        let xv = &self.vals[x];
        let g = &self.vals[gain];
        let b = &self.vals[bias];
        debug_assert_eq!(g.rows, xv.rows);
        debug_assert_eq!(b.rows, xv.rows);
        let (mean, inv_std) = norm_stats(xv, eps);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for c in 0..xv.rows {
            let gc = g.data[c];
            let bc = b.data[c];
            let xr = xv.row(c);
            let or = out.row_mut(c);
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = gc * (v - mean) * inv_std + bc;
            }
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Op::GlobalNorm { x, gain, bias, eps }, out, needs)
    }

    pub fn mean_time(&mut self, x: ValId) -> ValId {
        let xv = &self.vals[x];
        let t = xv.cols as f64;
        let data = (0..xv.rows)
            .map(|c| xv.row(c).iter().sum::<f64>() / t)
            .collect();
        let needs = self.ng(x);
        self.push(Op::MeanTime(x), Tensor::column(data), needs)
    }

    pub fn repeat_time(&mut self, x: ValId, t: usize) -> ValId {
        let xv = &self.vals[x];
        debug_assert_eq!(xv.cols, 1);
        let mut out = Tensor::zeros(xv.rows, t);
        for c in 0..xv.rows {
            out.row_mut(c).fill(xv.data[c]);
        }
        let needs = self.ng(x);
        self.push(Op::RepeatTime { x }, out, needs)
    }

    pub fn concat_rows(&mut self, xs: &[ValId]) -> ValId {
        let cols = self.vals[xs[0]].cols;
        let rows: usize = xs.iter().map(|&id| self.vals[id].rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &id in xs {
            debug_assert_eq!(self.vals[id].cols, cols, "concat_rows: column mismatch");
            data.extend_from_slice(&self.vals[id].data);
        }
        let needs = xs.iter().any(|&id| self.ng(id));
        self.push(Op::ConcatRows(xs.to_vec()), Tensor::from_vec(rows, cols, data), needs)
    }

    pub fn concat_cols(&mut self, xs: &[ValId]) -> ValId {
        let rows = self.vals[xs[0]].rows;
        let cols: usize = xs.iter().map(|&id| self.vals[id].cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &id in xs {
            let v = &self.vals[id];
            debug_assert_eq!(v.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[at..at + v.cols].copy_from_slice(v.row(r));
            }
            at += v.cols;
        }
        let needs = xs.iter().any(|&id| self.ng(id));
        self.push(Op::ConcatCols(xs.to_vec()), out, needs)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        let out = zip_elementwise(&self.vals[a], &self.vals[b], |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, needs)
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> ValId {
        let out = zip_elementwise(&self.vals[a], &self.vals[b], |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, needs)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> ValId {
        let out = zip_elementwise(&self.vals[a], &self.vals[b], |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), out, needs)
    }

    pub fn scale_by(&mut self, scalar: ValId, x: ValId) -> ValId {
        debug_assert_eq!(self.vals[scalar].len(), 1);
        let s = self.vals[scalar].item();
        let xv = &self.vals[x];
        let out = Tensor::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().map(|v| s * v).collect(),
        );
        let needs = self.ng(scalar) || self.ng(x);
        self.push(Op::ScaleBy { scalar, x }, out, needs)
    }

    pub fn dot(&mut self, a: ValId, b: ValId) -> ValId {
        let av = &self.vals[a];
        let bv = &self.vals[b];
        debug_assert_eq!(av.shape(), bv.shape());
        let v = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Dot(a, b), Tensor::scalar(v), needs)
    }

    pub fn sqrt(&mut self, x: ValId) -> ValId {
        let xv = &self.vals[x];
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| v.sqrt()).collect());
        let needs = self.ng(x);
        self.push(Op::Sqrt(x), out, needs)
    }

    pub fn ln(&mut self, x: ValId) -> ValId {
        let xv = &self.vals[x];
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| v.ln()).collect());
        let needs = self.ng(x);
        self.push(Op::Ln(x), out, needs)
    }

    pub fn div(&mut self, a: ValId, b: ValId) -> ValId {
        let out = zip_elementwise(&self.vals[a], &self.vals[b], |x, y| x / y);
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), out, needs)
    }

    pub fn add_const(&mut self, x: ValId, c: f64) -> ValId {
        let xv = &self.vals[x];
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| v + c).collect());
        let needs = self.ng(x);
        self.push(Op::AddConst(x), out, needs)
    }

    pub fn mul_const(&mut self, x: ValId, c: f64) -> ValId {
        let xv = &self.vals[x];
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| v * c).collect());
        let needs = self.ng(x);
        self.push(Op::MulConst(x, c), out, needs)
    }

    pub fn clamp(&mut self, x: ValId, lo: f64, hi: f64) -> ValId {
        let xv = &self.vals[x];
        let out = Tensor::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        );
        let needs = self.ng(x);
        self.push(Op::Clamp { x, lo, hi }, out, needs)
    }

    pub fn fit_cols(&mut self, x: ValId, len: usize) -> ValId {
        let xv = &self.vals[x];
        let mut out = Tensor::zeros(xv.rows, len);
        let copy = xv.cols.min(len);
        for r in 0..xv.rows {
            out.row_mut(r)[..copy].copy_from_slice(&xv.row(r)[..copy]);
        }
        let needs = self.ng(x);
        self.push(Op::FitCols { x }, out, needs)
    }

    pub fn cross_entropy(&mut self, logits: ValId, label: usize) -> ValId {
        let z = &self.vals[logits];
        debug_assert_eq!(z.cols, 1);
        debug_assert!(label < z.rows, "label out of range");
        let m = z.data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + z.data.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - z.data[label];
        let needs = self.ng(logits);
        self.push(Op::CrossEntropy { logits, label }, Tensor::scalar(loss), needs)
    }

    pub fn mean_of(&mut self, xs: &[ValId]) -> ValId {
        let v = xs.iter().map(|&id| self.vals[id].item()).sum::<f64>() / xs.len() as f64;
        let needs = xs.iter().any(|&id| self.ng(id));
        self.push(Op::MeanOf(xs.to_vec()), Tensor::scalar(v), needs)
    }

    /// Reverse pass from a scalar `loss` value.
    pub fn backward(&self, loss: ValId) -> Gradients {
        assert_eq!(self.vals[loss].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        let mut param_grads = vec![0.0; self.store.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if !self.needs_grad[id] {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for tracked-input readout
                }
                Op::Param(r) => {
                    let e = self.store.entry(*r);
                    let dst = &mut param_grads[e.offset..e.offset + e.len()];
                    for (d, s) in dst.iter_mut().zip(&g.data) {
                        *d += s;
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    stride,
                    dilation,
                    groups,
                    kernel,
                    pad,
                } => {
                    let (dx, dw) = conv1d_bwd(
                        &g,
                        &self.vals[*x],
                        &self.vals[*w],
                        *stride,
                        *dilation,
                        *groups,
                        *kernel,
                        *pad,
                        self.ng(*x),
                        self.ng(*w),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::ConvT1d { x, w, stride, kernel } => {
                    let (dx, dw) = conv_t1d_bwd(
                        &g,
                        &self.vals[*x],
                        &self.vals[*w],
                        *stride,
                        *kernel,
                        self.ng(*x),
                        self.ng(*w),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.vals[*x];
                    let mut dx = g.clone();
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::PRelu { x, slope } => {
                    let xv = &self.vals[*x];
                    let a = self.vals[*slope].item();
                    if self.ng(*x) {
                        let mut dx = g.clone();
                        for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                            if v < 0.0 {
                                *d *= a;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.ng(*slope) {
                        let da: f64 = g
                            .data
                            .iter()
                            .zip(&xv.data)
                            .filter(|(_, &v)| v < 0.0)
                            .map(|(gv, &v)| gv * v)
                            .sum();
                        accumulate(&mut grads, *slope, Tensor::scalar(da));
                    }
                }
                Op::GlobalNorm { x, gain, bias, eps } => {
                    let xv = &self.vals[*x];
                    let gv = &self.vals[*gain];
                    let (mean, inv_std) = norm_stats(xv, *eps);
                    let m = xv.len() as f64;
                    // h = g * gain (broadcast over time); xhat = (x - mean) * inv_std
                    let mut dgain = vec![0.0; gv.rows];
                    let mut dbias = vec![0.0; gv.rows];
                    let mut h_sum = 0.0;
                    let mut hx_sum = 0.0;
                    for c in 0..xv.rows {
                        let gc = gv.data[c];
                        let grow = g.row(c);
                        let xrow = xv.row(c);
                        for (gval, &xval) in grow.iter().zip(xrow) {
                            let xhat = (xval - mean) * inv_std;
                            let h = gval * gc;
                            dgain[c] += gval * xhat;
                            dbias[c] += gval;
                            h_sum += h;
                            hx_sum += h * xhat;
                        }
                    }
                    if self.ng(*x) {
                        let h_mean = h_sum / m;
                        let hx_mean = hx_sum / m;
                        let mut dx = Tensor::zeros(xv.rows, xv.cols);
                        for c in 0..xv.rows {
                            let gc = gv.data[c];
                            let grow = g.row(c);
                            let xrow = xv.row(c);
                            let drow = dx.row_mut(c);
                            for ((d, gval), &xval) in drow.iter_mut().zip(grow).zip(xrow) {
                                let xhat = (xval - mean) * inv_std;
                                let h = gval * gc;
                                *d = inv_std * (h - h_mean - xhat * hx_mean);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.ng(*gain) {
                        accumulate(&mut grads, *gain, Tensor::column(dgain));
                    }
                    if self.ng(*bias) {
                        accumulate(&mut grads, *bias, Tensor::column(dbias));
                    }
                }
                Op::MeanTime(x) => {
                    let xv = &self.vals[*x];
                    let inv_t = 1.0 / xv.cols as f64;
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for c in 0..xv.rows {
                        dx.row_mut(c).fill(g.data[c] * inv_t);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RepeatTime { x } => {
                    let rows = self.vals[*x].rows;
                    let dx: Vec<f64> = (0..rows).map(|c| g.row(c).iter().sum()).collect();
                    accumulate(&mut grads, *x, Tensor::column(dx));
                }
                Op::ConcatRows(xs) => {
                    let mut at = 0;
                    for &src in xs {
                        let v = &self.vals[src];
                        if self.ng(src) {
                            let part = Tensor::from_vec(
                                v.rows,
                                v.cols,
                                g.data[at * g.cols..(at + v.rows) * g.cols].to_vec(),
                            );
                            accumulate(&mut grads, src, part);
                        }
                        at += v.rows;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut at = 0;
                    for &src in xs {
                        let v = &self.vals[src];
                        if self.ng(src) {
                            let mut part = Tensor::zeros(v.rows, v.cols);
                            for r in 0..v.rows {
                                part.row_mut(r).copy_from_slice(&g.row(r)[at..at + v.cols]);
                            }
                            accumulate(&mut grads, src, part);
                        }
                        at += v.cols;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        let neg = Tensor::from_vec(
                            g.rows,
                            g.cols,
                            g.data.iter().map(|v| -v).collect(),
                        );
                        accumulate(&mut grads, *b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let da = zip_elementwise(&g, &self.vals[*b], |x, y| x * y);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let db = zip_elementwise(&g, &self.vals[*a], |x, y| x * y);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ScaleBy { scalar, x } => {
                    let s = self.vals[*scalar].item();
                    let xv = &self.vals[*x];
                    if self.ng(*scalar) {
                        let ds: f64 = g.data.iter().zip(&xv.data).map(|(a, b)| a * b).sum();
                        accumulate(&mut grads, *scalar, Tensor::scalar(ds));
                    }
                    if self.ng(*x) {
                        let dx = Tensor::from_vec(
                            g.rows,
                            g.cols,
                            g.data.iter().map(|v| s * v).collect(),
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g.item();
                    if self.ng(*a) {
                        let bv = &self.vals[*b];
                        let da = Tensor::from_vec(
                            bv.rows,
                            bv.cols,
                            bv.data.iter().map(|v| gs * v).collect(),
                        );
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let av = &self.vals[*a];
                        let db = Tensor::from_vec(
                            av.rows,
                            av.cols,
                            av.data.iter().map(|v| gs * v).collect(),
                        );
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Sqrt(x) => {
                    let out = &self.vals[id];
                    let dx = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&out.data)
                            .map(|(gv, &o)| gv / (2.0 * o.max(1e-12)))
                            .collect(),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Ln(x) => {
                    let xv = &self.vals[*x];
                    let dx = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&xv.data)
                            .map(|(gv, &v)| gv / v)
                            .collect(),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Div(a, b) => {
                    let av = &self.vals[*a];
                    let bv = &self.vals[*b];
                    if self.ng(*a) {
                        let da = zip_elementwise(&g, bv, |gv, y| gv / y);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(g.rows, g.cols);
                        for i in 0..g.data.len() {
                            db.data[i] = -g.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddConst(x) => {
                    accumulate(&mut grads, *x, g);
                }
                Op::MulConst(x, c) => {
                    let dx = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().map(|v| c * v).collect(),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.vals[*x];
                    let mut dx = g.clone();
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        if v <= *lo || v >= *hi {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::FitCols { x } => {
                    let xv = &self.vals[*x];
                    let copy = xv.cols.min(g.cols);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        dx.row_mut(r)[..copy].copy_from_slice(&g.row(r)[..copy]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, label } => {
                    let z = &self.vals[*logits];
                    let gs = g.item();
                    let m = z.data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let sum: f64 = z.data.iter().map(|v| (v - m).exp()).sum();
                    let mut dz: Vec<f64> = z.data.iter().map(|v| gs * (v - m).exp() / sum).collect();
                    dz[*label] -= gs;
                    accumulate(&mut grads, *logits, Tensor::column(dz));
                }
                Op::MeanOf(xs) => {
                    let share = g.item() / xs.len() as f64;
                    for &src in xs {
                        if self.ng(src) {
                            accumulate(&mut grads, src, Tensor::scalar(share));
                        }
                    }
                }
            }
        }

        let mut inputs = HashMap::new();
        for &id in &self.tracked_inputs {
            if let Some(g) = grads[id].take() {
                inputs.insert(id, g);
            }
        }
        Gradients {
            params: param_grads,
            inputs,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValId, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn norm_stats(x: &Tensor, eps: f64) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.data.iter().sum::<f64>() / m;
    let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Output frame count of a 1-D convolution.
pub fn conv_out_len(
    in_len: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    pad: (usize, usize),
) -> usize {
    let span = dilation * (kernel - 1) + 1;
    let padded = in_len + pad.0 + pad.1;
    assert!(padded >= span, "input too short for kernel");
    (padded - span) / stride + 1
}

/// Weights are (out_ch, in_per_group * kernel); input (in_ch, t).
fn conv1d_fwd(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dilation: usize,
    groups: usize,
    kernel: usize,
    pad: (usize, usize),
) -> Tensor {
    let in_ch = x.rows;
    let out_ch = w.rows;
    debug_assert_eq!(in_ch % groups, 0);
    debug_assert_eq!(out_ch % groups, 0);
    let in_per_group = in_ch / groups;
    let out_per_group = out_ch / groups;
    debug_assert_eq!(w.cols, in_per_group * kernel);
    let t_out = conv_out_len(x.cols, kernel, stride, dilation, pad);
    let mut out = Tensor::zeros(out_ch, t_out);

    // Fast path: 1x1 convolution with unit stride is a matrix product.
    if kernel == 1 && stride == 1 && dilation == 1 && groups == 1 && pad == (0, 0) {
        for co in 0..out_ch {
            let wrow = w.row(co);
            let orow = out.row_mut(co);
            for (ci, &wv) in wrow.iter().enumerate() {
                let xrow = x.row(ci);
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += wv * xv;
                }
            }
        }
        return out;
    }

    let t_in = x.cols as isize;
    for gi in 0..groups {
        for co_local in 0..out_per_group {
            let co = gi * out_per_group + co_local;
            for ci_local in 0..in_per_group {
                let ci = gi * in_per_group + ci_local;
                let xrow = x.row(ci);
                let wrow = w.row(co);
                for k in 0..kernel {
                    let wv = wrow[ci_local * kernel + k];
                    if wv == 0.0 {
                        continue;
                    }
                    let shift = (k * dilation) as isize - pad.0 as isize;
                    // valid t: 0 <= t*stride + shift < t_in
                    let t_lo = if shift < 0 {
                        ((-shift) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let t_hi = if t_in > shift {
                        (((t_in - 1 - shift) as usize) / stride + 1).min(t_out)
                    } else {
                        0
                    };
                    let orow = out.row_mut(co);
                    let mut src = (t_lo * stride) as isize + shift;
                    for o in orow[t_lo..t_hi].iter_mut() {
                        *o += wv * xrow[src as usize];
                        src += stride as isize;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_bwd(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dilation: usize,
    groups: usize,
    kernel: usize,
    pad: (usize, usize),
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let in_ch = x.rows;
    let out_ch = w.rows;
    let in_per_group = in_ch / groups;
    let out_per_group = out_ch / groups;
    let t_out = g.cols;
    let mut dx = need_dx.then(|| Tensor::zeros(x.rows, x.cols));
    let mut dw = need_dw.then(|| Tensor::zeros(w.rows, w.cols));

    if kernel == 1 && stride == 1 && dilation == 1 && groups == 1 && pad == (0, 0) {
        if let Some(dx) = dx.as_mut() {
            for co in 0..out_ch {
                let wrow = w.row(co);
                let grow = g.row(co);
                for (ci, &wv) in wrow.iter().enumerate() {
                    let drow = dx.row_mut(ci);
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if let Some(dw) = dw.as_mut() {
            for co in 0..out_ch {
                let grow = g.row(co);
                let dwrow = dw.row_mut(co);
                for (ci, slot) in dwrow.iter_mut().enumerate() {
                    let xrow = x.row(ci);
                    *slot = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                }
            }
        }
        return (dx, dw);
    }

    let t_in = x.cols as isize;
    for gi in 0..groups {
        for co_local in 0..out_per_group {
            let co = gi * out_per_group + co_local;
            let grow = g.row(co);
            for ci_local in 0..in_per_group {
                let ci = gi * in_per_group + ci_local;
                for k in 0..kernel {
                    let shift = (k * dilation) as isize - pad.0 as isize;
                    let t_lo = if shift < 0 {
                        ((-shift) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let t_hi = if t_in > shift {
                        (((t_in - 1 - shift) as usize) / stride + 1).min(t_out)
                    } else {
                        0
                    };
                    if t_lo >= t_hi {
                        continue;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w.row(co)[ci_local * kernel + k];
                        if wv != 0.0 {
                            let drow = dx.row_mut(ci);
                            let mut src = (t_lo * stride) as isize + shift;
                            for &gv in grow[t_lo..t_hi].iter() {
                                drow[src as usize] += wv * gv;
                                src += stride as isize;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xrow = x.row(ci);
                        let mut acc = 0.0;
                        let mut src = (t_lo * stride) as isize + shift;
                        for &gv in grow[t_lo..t_hi].iter() {
                            acc += gv * xrow[src as usize];
                            src += stride as isize;
                        }
                        dw.row_mut(co)[ci_local * kernel + k] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution. Weights are (in_ch, out_ch * kernel); input
/// (in_ch, t); output (out_ch, (t-1)*stride + kernel).
fn conv_t1d_fwd(x: &Tensor, w: &Tensor, stride: usize, kernel: usize) -> Tensor {
    let in_ch = x.rows;
    let out_ch = w.cols / kernel;
    debug_assert_eq!(w.rows, in_ch);
    let t_in = x.cols;
    let t_out = (t_in - 1) * stride + kernel;
    let mut out = Tensor::zeros(out_ch, t_out);
    for ci in 0..in_ch {
        let xrow = x.row(ci);
        let wrow = w.row(ci);
        for co in 0..out_ch {
            let orow = out.row_mut(co);
            for k in 0..kernel {
                let wv = wrow[co * kernel + k];
                if wv == 0.0 {
                    continue;
                }
                for (t, &xv) in xrow.iter().enumerate() {
                    orow[t * stride + k] += wv * xv;
                }
            }
        }
    }
    out
}

fn conv_t1d_bwd(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    kernel: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let in_ch = x.rows;
    let out_ch = w.cols / kernel;
    let t_in = x.cols;
    let mut dx = need_dx.then(|| Tensor::zeros(x.rows, x.cols));
    let mut dw = need_dw.then(|| Tensor::zeros(w.rows, w.cols));
    for ci in 0..in_ch {
        let xrow = x.row(ci);
        let wrow = w.row(ci);
        for co in 0..out_ch {
            let grow = g.row(co);
            for k in 0..kernel {
                if let Some(dx) = dx.as_mut() {
                    let wv = wrow[co * kernel + k];
                    if wv != 0.0 {
                        let drow = dx.row_mut(ci);
                        for (t, d) in drow.iter_mut().enumerate() {
                            *d += wv * grow[t * stride + k];
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    let mut acc = 0.0;
                    for (t, &xv) in xrow.iter().enumerate().take(t_in) {
                        acc += xv * grow[t * stride + k];
                    }
                    dw.row_mut(ci)[co * kernel + k] += acc;
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::ParamBuilder;

    fn finite_diff(
        store: &mut ParamStore,
        r: ParamRef,
        idx: usize,
        h: f64,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> f64 {
        let orig = store.slice(r)[idx];
        store.slice_mut(r)[idx] = orig + h;
        let fp = f(store);
        store.slice_mut(r)[idx] = orig - h;
        let fm = f(store);
        store.slice_mut(r)[idx] = orig;
        (fp - fm) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Builds a scalar loss exercising most ops, returns (loss value, graph loss id).
    fn mixed_net<'a>(store: &'a ParamStore, x_data: &Tensor) -> (Graph<'a>, ValId) {
        let mut g = Graph::new(store);
        let x = g.input(x_data.clone());
        let w1 = g.param(store.find("w1").unwrap());
        let h1 = g.conv1d(x, w1, 1, 1, 1, 3, (1, 1));
        let gain = g.param(store.find("gain").unwrap());
        let bias = g.param(store.find("bias").unwrap());
        let h2 = g.global_norm(h1, gain, bias, 1e-6);
        let slope = g.param(store.find("slope").unwrap());
        let h3 = g.prelu(h2, slope);
        let wd = g.param(store.find("wd").unwrap());
        let h4 = g.conv1d(h3, wd, 1, 2, 4, 3, (2, 2)); // depthwise dilated
        let h5 = g.relu(h4);
        let wt = g.param(store.find("wt").unwrap());
        let h6 = g.conv_t1d(h5, wt, 2, 4);
        let h7 = g.fit_cols(h6, 9);
        let pooled = g.mean_time(h7);
        let wlin = g.param(store.find("wlin").unwrap());
        let logits = g.conv1d(pooled, wlin, 1, 1, 1, 1, (0, 0));
        let ce = g.cross_entropy(logits, 1);
        // Also exercise the scalar chain: dot/sqrt/div/ln/clamp.
        let d = g.dot(h7, h7);
        let sq = g.sqrt(d);
        let sq2 = g.add_const(sq, 1.0);
        let one = g.input(Tensor::scalar(2.0));
        let ratio = g.div(sq2, one);
        let lg = g.ln(ratio);
        let cl = g.clamp(lg, -10.0, 10.0);
        let total = g.mean_of(&[ce, cl]);
        (g, total)
    }

    fn build_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed);
        b.uniform("w1", 4, 2 * 3, 6); // 2 -> 4 channels, kernel 3
        b.constant("gain", 4, 1, 1.0);
        b.constant("bias", 4, 1, 0.1);
        b.constant("slope", 1, 1, 0.25);
        b.uniform("wd", 4, 3, 3); // depthwise kernel 3
        b.uniform("wt", 4, 2 * 4, 8); // transpose to 2 channels kernel 4
        b.uniform("wlin", 3, 2, 2); // linear 2 -> 3
        store
    }

    #[test]
    fn gradients_match_finite_differences_across_ops() {
        let mut store = build_store(42);
        let x = Tensor::from_vec(
            2,
            8,
            (0..16).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect(),
        );
        let (g, loss) = mixed_net(&store, &x);
        let grads = g.backward(loss);
        let eval = {
            let x = x.clone();
            move |s: &ParamStore| {
                let (g, loss) = mixed_net(s, &x);
                g.value(loss).item()
            }
        };
        for name in ["w1", "gain", "bias", "slope", "wd", "wt", "wlin"] {
            let r = store.find(name).unwrap();
            let e = store.entry(r).clone();
            for idx in 0..e.len().min(6) {
                let fd = finite_diff(&mut store, r, idx, 1e-5, &eval);
                let analytic = grads.params[e.offset + idx];
                assert!(
                    rel_err(analytic, fd) < 1e-6 || (analytic - fd).abs() < 1e-9,
                    "{name}[{idx}]: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn input_gradient_tracking() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input_grad(Tensor::signal(vec![0.5, -0.3, 0.2]));
        let y = g.input(Tensor::signal(vec![1.0, 2.0, -1.0]));
        let p = g.mul(x, y);
        let d = g.dot(p, p);
        let grads = g.backward(d);
        let gx = grads.input(x).unwrap();
        // d/dx_i (x_i y_i)^2 = 2 x_i y_i^2
        for i in 0..3 {
            let expect = 2.0 * g.value(x).data[i] * g.value(y).data[i] * g.value(y).data[i];
            assert!((gx.data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_out_len_formula() {
        // 8000 samples, kernel 20, stride 10: (8000 - 20)/10 + 1 = 799.
        assert_eq!(conv_out_len(8000, 20, 10, 1, (0, 0)), 799);
        assert_eq!(conv_out_len(10, 3, 1, 2, (2, 2)), 10);
    }

    #[test]
    fn concat_and_split_round_trip_gradients() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input_grad(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let b = g.input_grad(Tensor::from_vec(2, 3, vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let cat = g.concat_rows(&[a, b]);
        let c = g.input_grad(Tensor::from_vec(3, 2, vec![0.1; 6]));
        let wide = g.concat_cols(&[cat, c]);
        let d = g.dot(wide, wide);
        let grads = g.backward(d);
        // gradient of sum of squares is 2x for each input element
        for (id, t) in [(a, g.value(a)), (b, g.value(b)), (c, g.value(c))] {
            let gi = grads.input(id).unwrap();
            for (gv, &xv) in gi.data.iter().zip(&t.data) {
                assert!((gv - 2.0 * xv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_param_leaf_accumulates_both_uses() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 1);
        let w = b.values("w", 1, 1, vec![3.0]);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::signal(vec![2.0]));
        let wv = g.param(w);
        let y1 = g.conv1d(x, wv, 1, 1, 1, 1, (0, 0));
        let y2 = g.conv1d(y1, wv, 1, 1, 1, 1, (0, 0)); // w^2 * x
        let d = g.dot(y2, y2); // w^4 x^2 -> d/dw = 4 w^3 x^2
        let grads = g.backward(d);
        let expect = 4.0 * 27.0 * 4.0;
        assert!((grads.params[0] - expect).abs() < 1e-9);
    }
}
