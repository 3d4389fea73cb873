//! Differentiable primitives recorded on a [`Tape`].

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm_nn, gemm_nt, gemm_tn,
    reduce_to_shape, Tensor,
};

/// Guard added to the norm product in [`Tape::cosine_distance`].
pub const COSINE_EPS: f64 = 1e-8;

/// `(outer, extent, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::arg(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

impl Tape {
    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| TensorError::dim(kind.name(), va.shape(), vb.shape()))?;
        let out = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            Tensor::new(out_shape.clone(), data)?
        } else {
            let mut out = Tensor::zeros(&out_shape);
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            let o = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| o[i] = kind.apply(da[ia], db[ib]));
            out
        };
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let shape = g.shape().to_vec();
                let sa = broadcast_strides(va.shape(), &shape);
                let sb = broadcast_strides(vb.shape(), &shape);
                let (da, db, gd) = (va.data(), vb.data(), g.data());
                let local = |which: usize| -> Tensor {
                    let mut full = Tensor::zeros(&shape);
                    let f = full.data_mut();
                    for_each_broadcast(&shape, &sa, &sb, |i, ia, ib| {
                        let (x, y) = (da[ia], db[ib]);
                        f[i] = gd[i]
                            * match (kind, which) {
                                (Binary::Add, _) => 1.0,
                                (Binary::Sub, 0) => 1.0,
                                (Binary::Sub, _) => -1.0,
                                (Binary::Mul, 0) => y,
                                (Binary::Mul, _) => x,
                                (Binary::Div, 0) => 1.0 / y,
                                (Binary::Div, _) => -x / (y * y),
                            };
                    });
                    full
                };
                vec![
                    needs[0].then(|| reduce_to_shape(&local(0), va.shape())),
                    needs[1].then(|| reduce_to_shape(&local(1), vb.shape())),
                ]
            }),
        ))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(
        &self,
        x: Var,
        forward: impl Fn(f64) -> f64,
        // derivative given (input, output)
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let vx = self.value_rc(x);
        let out = Rc::new(vx.map(forward));
        let saved = Rc::clone(&out);
        self.record(
            (*out).clone(),
            &[x],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data().iter().zip(saved.data()))
                    .map(|(&gv, (&xv, &yv))| gv * deriv(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self, x: Var) -> Result<Var> {
        {
            let vx = self.value(x);
            if let Some(bad) = vx.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
        }
        Ok(self.unary(x, f64::ln, |v, _| 1.0 / v))
    }

    /// Straight-through hard threshold: forward emits 1 where `s >= theta`
    /// and 0 elsewhere; backward passes the upstream gradient unchanged.
    pub fn ste_threshold(&self, s: Var, theta: f64) -> Var {
        self.unary(s, move |v| if v >= theta { 1.0 } else { 0.0 }, |_, _| 1.0)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Batched matrix product over the last two axes with broadcast batch
    /// axes: `[.., m, k] x [.., k, n] -> [.., m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(TensorError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b)
            .ok_or_else(|| TensorError::dim("matmul", sa, sb))?;
        let plan = Rc::new(BatchPlan::new(batch_a, batch_b, &batch, m * k, k * n));
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let (da, db) = (va.data(), vb.data());
            let o = out.data_mut();
            for (oi, (ia, ib)) in plan.offsets.iter().enumerate() {
                gemm_nn(
                    &da[*ia..*ia + m * k],
                    &db[*ib..*ib + k * n],
                    &mut o[oi * m * n..(oi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = Tensor::zeros(va.shape());
                    let buf = ga.data_mut();
                    let db = vb.data();
                    for (oi, (ia, ib)) in plan.offsets.iter().enumerate() {
                        gemm_nt(
                            &gd[oi * m * n..(oi + 1) * m * n],
                            &db[*ib..*ib + k * n],
                            &mut buf[*ia..*ia + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = Tensor::zeros(vb.shape());
                    let buf = gb.data_mut();
                    let da = va.data();
                    for (oi, (ia, ib)) in plan.offsets.iter().enumerate() {
                        gemm_tn(
                            &da[*ia..*ia + m * k],
                            &gd[oi * m * n..(oi + 1) * m * n],
                            &mut buf[*ib..*ib + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let vx = self.value_rc(x);
        let shape = vx.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::arg("transpose", format!("rank {} < 2", shape.len())));
        }
        let out = transpose_last2(&vx);
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(transpose_last2(g))]),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value_rc(x);
        let old = vx.shape().to_vec();
        let out = (*vx).clone().reshaped(shape)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.clone().reshaped(&old).expect("same numel"))]),
        ))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum", x, axis, 1.0)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let n = {
            let v = self.value(x);
            check_axis("mean", v.shape(), axis)?;
            v.shape()[axis]
        };
        self.reduce_axis("mean", x, axis, 1.0 / n as f64)
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize, factor: f64) -> Result<Var> {
        let vx = self.value_rc(x);
        check_axis(op, vx.shape(), axis)?;
        let in_shape = vx.shape().to_vec();
        let (outer, n, inner) = axis_split(&in_shape, axis);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        let mut out = Tensor::zeros(&out_shape);
        {
            let d = vx.data();
            let o = out.data_mut();
            for a in 0..outer {
                for i in 0..n {
                    for j in 0..inner {
                        o[a * inner + j] += d[(a * n + i) * inner + j] * factor;
                    }
                }
            }
        }
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = g.data();
                let o = gx.data_mut();
                for a in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            o[(a * n + i) * inner + j] = gd[a * inner + j] * factor;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, x: Var) -> Var {
        self.reduce_all(x, 1.0)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.reduce_all(x, 1.0 / n as f64)
    }

    fn reduce_all(&self, x: Var, factor: f64) -> Var {
        let vx = self.value_rc(x);
        let shape = vx.shape().to_vec();
        let total: f64 = vx.data().iter().sum::<f64>() * factor;
        self.record(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() * factor))]),
        )
    }

    /// Sum of absolute values; the subgradient at 0 is 0.
    pub fn l1_norm(&self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let total = vx.data().iter().map(|v| v.abs()).sum();
        self.record(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, _| {
                let gv = g.item();
                vec![Some(vx.map(|v| gv * sign(v)))]
            }),
        )
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value_rc(x);
        check_axis("softmax", vx.shape(), axis)?;
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut out = (*vx).clone();
        {
            let o = out.data_mut();
            for a in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (a * n + i) * inner + j;
                    let max = (0..n).map(|i| o[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for i in 0..n {
                        let e = (o[idx(i)] - max).exp();
                        o[idx(i)] = e;
                        total += e;
                    }
                    for i in 0..n {
                        o[idx(i)] /= total;
                    }
                }
            }
        }
        let y = Rc::new(out);
        let saved = Rc::clone(&y);
        Ok(self.record(
            (*y).clone(),
            &[x],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(saved.shape());
                let (yd, gd) = (saved.data(), g.data());
                let o = gx.data_mut();
                for a in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (a * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
                        for i in 0..n {
                            o[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let vx = self.value_rc(x);
        let shape = vx.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::arg("log_softmax", "rank-0 input"));
        }
        let n = *shape.last().unwrap();
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let y = Rc::new(out);
        let saved = Rc::clone(&y);
        Ok(self.record(
            (*y).clone(),
            &[x],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(saved.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv -= yv.exp() * total;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along `axis`; every other extent must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = xs.iter().map(|&v| self.value_rc(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| TensorError::arg("concat", "no inputs"))?
            .shape()
            .to_vec();
        check_axis("concat", &first, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::dim("concat", &first, s));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Tensor::zeros(&out_shape);
        {
            let o = out.data_mut();
            let mut start = 0;
            for (v, &e) in values.iter().zip(&extents) {
                let d = v.data();
                for a in 0..outer {
                    let src = &d[a * e * inner..(a + 1) * e * inner];
                    let dst = (a * total + start) * inner;
                    o[dst..dst + e * inner].copy_from_slice(src);
                }
                start += e;
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.record(
            out,
            xs,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut start = 0;
                let mut grads = Vec::with_capacity(shapes.len());
                for (shape, &need) in shapes.iter().zip(needs) {
                    let e = shape[axis];
                    if need {
                        let mut gx = Tensor::zeros(shape);
                        let o = gx.data_mut();
                        for a in 0..outer {
                            let src = (a * total + start) * inner;
                            o[a * e * inner..(a + 1) * e * inner]
                                .copy_from_slice(&gd[src..src + e * inner]);
                        }
                        grads.push(Some(gx));
                    } else {
                        grads.push(None);
                    }
                    start += e;
                }
                grads
            }),
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let vx = self.value_rc(x);
        let shape = vx.shape().to_vec();
        check_axis("slice", &shape, axis)?;
        if start >= end || end > shape[axis] {
            return Err(TensorError::arg(
                "slice",
                format!("range {start}..{end} invalid for extent {}", shape[axis]),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let e = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = e;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (d, o) = (vx.data(), out.data_mut());
            for a in 0..outer {
                let src = (a * n + start) * inner;
                o[a * e * inner..(a + 1) * e * inner].copy_from_slice(&d[src..src + e * inner]);
            }
        }
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                let (gd, o) = (g.data(), gx.data_mut());
                for a in 0..outer {
                    let dst = (a * n + start) * inner;
                    o[dst..dst + e * inner].copy_from_slice(&gd[a * e * inner..(a + 1) * e * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers rows of a `[V, D]` table: `[ids.len(), D]`.
    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value_rc(table);
        let shape = vt.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::arg("embedding_lookup", format!("table shape {shape:?}")));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::arg(
                "embedding_lookup",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        if ids.is_empty() {
            return Err(TensorError::arg("embedding_lookup", "empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * dim..(i + 1) * dim]);
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let ids = ids.to_vec();
        Ok(self.record(
            out,
            &[table],
            Box::new(move |g, _| {
                let mut gt = Tensor::zeros(&shape);
                let (gd, o) = (g.data(), gt.data_mut());
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..dim {
                        o[i * dim + c] += gd[r * dim + c];
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Linear interpolation of a `[T_in, D]` sequence onto `t_out` evenly
    /// spaced points spanning `[0, T_in - 1]`.
    pub fn interp_linear(&self, x: Var, t_out: usize) -> Result<Var> {
        if t_out == 0 {
            return Err(TensorError::arg("interp_linear", "t_out must be positive"));
        }
        let vx = self.value_rc(x);
        let shape = vx.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::arg("interp_linear", format!("expected rank 2, got {shape:?}")));
        }
        let (t_in, dim) = (shape[0], shape[1]);
        let taps = Rc::new(interp_taps(t_in, t_out));
        let mut out = Tensor::zeros(&[t_out, dim]);
        {
            let (d, o) = (vx.data(), out.data_mut());
            for (t, &(lo, hi, w)) in taps.iter().enumerate() {
                for c in 0..dim {
                    o[t * dim + c] = (1.0 - w) * d[lo * dim + c] + w * d[hi * dim + c];
                }
            }
        }
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                let (gd, o) = (g.data(), gx.data_mut());
                for (t, &(lo, hi, w)) in taps.iter().enumerate() {
                    for c in 0..dim {
                        o[lo * dim + c] += (1.0 - w) * gd[t * dim + c];
                        o[hi * dim + c] += w * gd[t * dim + c];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `1 - a.b / (|a| |b| + eps)` over all elements of two equal-shape
    /// tensors, as a rank-0 tensor.
    pub fn cosine_distance(&self, a: Var, b: Var) -> Result<Var> {
        let va = self.value_rc(a);
        let vb = self.value_rc(b);
        if va.shape() != vb.shape() {
            return Err(TensorError::dim("cosine_distance", va.shape(), vb.shape()));
        }
        let dot: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let na = va.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let den = na * nb + COSINE_EPS;
        let out = Tensor::scalar(1.0 - dot / den);
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let gv = g.item();
                // d(dot/den)/da = b/den - dot * nb * a / (na * den^2)
                let grad_for = |x: &Tensor, y: &Tensor, nx: f64, ny: f64| {
                    let coef = if nx > 0.0 { dot * ny / (nx * den * den) } else { 0.0 };
                    let data = x
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(xv, yv)| -gv * (yv / den - coef * xv))
                        .collect();
                    Tensor::new(x.shape().to_vec(), data).expect("same shape")
                };
                vec![
                    needs[0].then(|| grad_for(&va, &vb, na, nb)),
                    needs[1].then(|| grad_for(&vb, &va, nb, na)),
                ]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`
    /// of shape `[D]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value_rc(x);
        let vg = self.value_rc(gamma);
        let vb = self.value_rc(beta);
        let d = *vx.shape().last().ok_or_else(|| TensorError::arg("layer_norm", "rank-0 input"))?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(vx.shape());
        {
            let (xd, o) = (vx.data(), out.data_mut());
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..d {
                    let h = (row[c] - mu) * rs;
                    xhat[r * d + c] = h;
                    o[r * d + c] = h * vg.data()[c] + vb.data()[c];
                }
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.record(
            out,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gamma = vg.data();
                let gx = needs[0].then(|| {
                    let mut gx = Tensor::zeros(&shape);
                    let o = gx.data_mut();
                    for r in 0..rows {
                        let gh: Vec<f64> =
                            (0..d).map(|c| gd[r * d + c] * gamma[c]).collect();
                        let h = &xhat[r * d..(r + 1) * d];
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh =
                            gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            o[r * d + c] = rstd[r] * (gh[c] - mean_gh - h[c] * mean_ghh);
                        }
                    }
                    gx
                });
                let gg = needs[1].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                    Tensor::from_vec(acc)
                });
                let gb = needs[2].then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += gd[r * d + c];
                        }
                    }
                    Tensor::from_vec(acc)
                });
                vec![gx, gg, gb]
            }),
        ))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// For each output point, `(lower row, upper row, weight of upper row)`.
pub fn interp_taps(t_in: usize, t_out: usize) -> Vec<(usize, usize, f64)> {
    (0..t_out)
        .map(|t| {
            if t_in == 1 {
                return (0, 0, 0.0);
            }
            if t_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = t as f64 * (t_in - 1) as f64 / (t_out - 1) as f64;
            let lo = (pos.floor() as usize).min(t_in - 1);
            let hi = (lo + 1).min(t_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn transpose_last2(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch: usize = shape[..r - 2].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    let mut out = Tensor::zeros(&out_shape);
    let (d, o) = (x.data(), out.data_mut());
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                o[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    out
}

/// Per-output-matrix offsets into the two operands of a batched matmul.
struct BatchPlan {
    offsets: Vec<(usize, usize)>,
}

impl BatchPlan {
    fn new(
        batch_a: &[usize],
        batch_b: &[usize],
        batch: &[usize],
        size_a: usize,
        size_b: usize,
    ) -> Self {
        let count: usize = batch.iter().product();
        if batch.is_empty() {
            return Self {
                offsets: vec![(0, 0)],
            };
        }
        let sa = broadcast_strides(batch_a, batch);
        let sb = broadcast_strides(batch_b, batch);
        let mut offsets = vec![(0, 0); count];
        for_each_broadcast(batch, &sa, &sb, |i, ia, ib| offsets[i] = (ia * size_a, ib * size_b));
        Self { offsets }
    }
}
