//! Differentiable primitives: each forward computes values, then records a
//! backward rule on the tape when one is active and an input requires
//! gradients. Reductions accumulate in f64 and store f32.

use super::kernels::{self, ConvDims};
use super::{record_if_needed, GradStore, Mode, Tape, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;

/// The four activation functions available to search blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Hardswish,
    Silu,
    Elu,
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: s,
            right: vec![0, 0],
        });
    }
    Ok((s[0], s[1]))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

/// Elementwise `a + b` (same shape).
pub fn add(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let values = a.with_values(|av| b.with_values(|bv| av.iter().zip(bv).map(|(x, y)| x + y).collect()));
    let out = Tensor::from_op(&a.shape(), values);
    let (a, b) = (a.clone(), b.clone());
    let requires = a.requires_grad() || b.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&a) {
            store.add(&a, gout.to_vec());
        }
        if store.wants(&b) {
            store.add(&b, gout.to_vec());
        }
    });
    Ok(out)
}

/// Elementwise `a * b` (same shape).
pub fn mul(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let values = a.with_values(|av| b.with_values(|bv| av.iter().zip(bv).map(|(x, y)| x * y).collect()));
    let out = Tensor::from_op(&a.shape(), values);
    let (a, b) = (a.clone(), b.clone());
    let requires = a.requires_grad() || b.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&a) {
            let g = b.with_values(|bv| gout.iter().zip(bv).map(|(g, y)| g * y).collect());
            store.add(&a, g);
        }
        if store.wants(&b) {
            let g = a.with_values(|av| gout.iter().zip(av).map(|(g, x)| g * x).collect());
            store.add(&b, g);
        }
    });
    Ok(out)
}

/// `c * a` for a compile-time constant scalar.
pub fn scale(tape: Option<&Tape>, a: &Tensor, c: f32) -> Result<Tensor> {
    let values = a.with_values(|av| av.iter().map(|x| c * x).collect());
    let out = Tensor::from_op(&a.shape(), values);
    let a = a.clone();
    let requires = a.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&a) {
            store.add(&a, gout.iter().map(|g| c * g).collect());
        }
    });
    Ok(out)
}

/// Sum of all entries, as a scalar tensor.
pub fn sum_all(tape: Option<&Tape>, a: &Tensor) -> Result<Tensor> {
    let total = a.with_values(|av| av.iter().map(|&x| x as f64).sum::<f64>()) as f32;
    let out = Tensor::from_op(&[1], vec![total]);
    let a = a.clone();
    let requires = a.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&a) {
            store.add(&a, vec![gout[0]; a.numel()]);
        }
    });
    Ok(out)
}

/// `y = x @ w + b` with `x: [B,d_in]`, `w: [d_in,d_out]`, `b: [d_out]`.
pub fn linear(tape: Option<&Tape>, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, d_in) = rank2(x, "linear")?;
    let (w_in, d_out) = rank2(w, "linear")?;
    if w_in != d_in || b.shape() != vec![d_out] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape(),
            right: w.shape(),
        });
    }

    let mut values = x.with_values(|xv| w.with_values(|wv| kernels::matmul(xv, wv, batch, d_in, d_out)));
    b.with_values(|bv| {
        for row in values.chunks_exact_mut(d_out) {
            for (y, add) in row.iter_mut().zip(bv) {
                *y += add;
            }
        }
    });
    let out = Tensor::from_op(&[batch, d_out], values);

    let (x, w, b) = (x.clone(), w.clone(), b.clone());
    let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&x) {
            let dx = w.with_values(|wv| kernels::matmul_nt(gout, wv, batch, d_out, d_in));
            store.add(&x, dx);
        }
        if store.wants(&w) {
            let dw = x.with_values(|xv| kernels::matmul_tn(xv, gout, batch, d_in, d_out));
            store.add(&w, dw);
        }
        if store.wants(&b) {
            let mut db = vec![0.0f64; d_out];
            for row in gout.chunks_exact(d_out) {
                for (acc, g) in db.iter_mut().zip(row) {
                    *acc += *g as f64;
                }
            }
            store.add(&b, db.into_iter().map(|v| v as f32).collect());
        }
    });
    Ok(out)
}

/// `c = a @ b^T` with `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rank2(a, "matmul_nt")?;
    let (n, kb) = rank2(b, "matmul_nt")?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let values = a.with_values(|av| b.with_values(|bv| kernels::matmul_nt(av, bv, m, k, n)));
    let out = Tensor::from_op(&[m, n], values);
    let (a, b) = (a.clone(), b.clone());
    let requires = a.requires_grad() || b.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&a) {
            let da = b.with_values(|bv| kernels::matmul(gout, bv, m, n, k));
            store.add(&a, da);
        }
        if store.wants(&b) {
            let db = a.with_values(|av| kernels::matmul_tn(gout, av, m, n, k));
            store.add(&b, db);
        }
    });
    Ok(out)
}

/// Stacks `a` on top of `b` along the batch dimension.
pub fn concat_rows(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, d) = rank2(a, "concat_rows")?;
    let (bb, db) = rank2(b, "concat_rows")?;
    if d != db {
        return Err(Error::ShapeMismatch {
            op: "concat_rows",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut values = a.to_vec();
    b.with_values(|bv| values.extend_from_slice(bv));
    let out = Tensor::from_op(&[ba + bb, d], values);
    let (a, b) = (a.clone(), b.clone());
    let requires = a.requires_grad() || b.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&a) {
            store.add(&a, gout[..ba * d].to_vec());
        }
        if store.wants(&b) {
            store.add(&b, gout[ba * d..].to_vec());
        }
    });
    Ok(out)
}

/// Normalizes each row to unit l2 norm. A row of exact zeros is an error;
/// there is no epsilon fudge.
pub fn row_l2_normalize(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let (batch, d) = rank2(x, "row_l2_normalize")?;
    let mut norms = vec![0.0f32; batch];
    let mut values = vec![0.0f32; batch * d];
    x.with_values(|xv| -> Result<()> {
        for i in 0..batch {
            let row = &xv[i * d..(i + 1) * d];
            let sq: f64 = row.iter().map(|&v| v as f64 * v as f64).sum();
            let norm = sq.sqrt() as f32;
            if norm == 0.0 {
                return Err(Error::ZeroNorm {
                    op: "row_l2_normalize",
                    row: i,
                });
            }
            norms[i] = norm;
            for (o, &v) in values[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        Ok(())
    })?;
    let out = Tensor::from_op(&[batch, d], values);

    let x = x.clone();
    let y = out.clone();
    let requires = x.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if !store.wants(&x) {
            return;
        }
        let g = y.with_values(|yv| {
            let mut g = vec![0.0f32; batch * d];
            for i in 0..batch {
                let yr = &yv[i * d..(i + 1) * d];
                let gr = &gout[i * d..(i + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                let inv = 1.0 / norms[i] as f64;
                for j in 0..d {
                    g[i * d + j] = ((gr[j] as f64 - yr[j] as f64 * dot) * inv) as f32;
                }
            }
            g
        });
        store.add(&x, g);
    });
    Ok(out)
}

/// Mean over the batch of the negative cosine similarity between the rows
/// of `p` and `z`; the result lies in `[-1, 1]`.
pub fn negative_cosine(tape: Option<&Tape>, p: &Tensor, z: &Tensor) -> Result<Tensor> {
    same_shape(p, z, "negative_cosine")?;
    let (batch, _) = rank2(p, "negative_cosine")?;
    let pn = row_l2_normalize(tape, p)?;
    let zn = row_l2_normalize(tape, z)?;
    let prod = mul(tape, &pn, &zn)?;
    let total = sum_all(tape, &prod)?;
    scale(tape, &total, -1.0 / batch as f32)
}

fn act_forward(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp() - 1.0
            }
        }
    }
}

// Derivative convention at the non-smooth points: 0 exactly at the kink
// (ReLU at 0, Hardswish at +/-3).
fn act_derivative(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Hardswish => {
            if x == -3.0 || x == 3.0 {
                0.0
            } else if x < -3.0 {
                0.0
            } else if x > 3.0 {
                1.0
            } else {
                (2.0 * x + 3.0) / 6.0
            }
        }
        Activation::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                x.exp()
            }
        }
    }
}

/// Elementwise activation (total function, any shape).
pub fn activation(tape: Option<&Tape>, x: &Tensor, kind: Activation) -> Result<Tensor> {
    let values = x.with_values(|xv| xv.iter().map(|&v| act_forward(kind, v)).collect());
    let out = Tensor::from_op(&x.shape(), values);
    let x = x.clone();
    let requires = x.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&x) {
            let g = x.with_values(|xv| {
                xv.iter()
                    .zip(gout)
                    .map(|(&v, &g)| g * act_derivative(kind, v))
                    .collect()
            });
            store.add(&x, g);
        }
    });
    Ok(out)
}

/// Which statistic a 1-d pooling window takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// 1-d pooling over each row: window 3, stride 1, zero padding 1, so the
/// output length equals the input length. Average pooling divides by the
/// full window (pad positions count as zeros); max pooling treats pad as
/// negative infinity. Max ties break to the lowest index.
pub fn pool1d(tape: Option<&Tape>, x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let (batch, d) = rank2(x, "pool1d")?;
    let mut values = vec![0.0f32; batch * d];
    let mut argmax = vec![0usize; if kind == PoolKind::Max { batch * d } else { 0 }];
    x.with_values(|xv| {
        for i in 0..batch {
            let row = &xv[i * d..(i + 1) * d];
            for j in 0..d {
                let lo = j.saturating_sub(1);
                let hi = (j + 1).min(d - 1);
                match kind {
                    PoolKind::Avg => {
                        let mut acc = 0.0f64;
                        for &v in &row[lo..=hi] {
                            acc += v as f64;
                        }
                        values[i * d + j] = (acc / 3.0) as f32;
                    }
                    PoolKind::Max => {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_at = lo;
                        for (k, &v) in row[lo..=hi].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_at = lo + k;
                            }
                        }
                        values[i * d + j] = best;
                        argmax[i * d + j] = best_at;
                    }
                }
            }
        }
    });
    let out = Tensor::from_op(&[batch, d], values);
    let x = x.clone();
    let requires = x.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if !store.wants(&x) {
            return;
        }
        let mut g = vec![0.0f32; batch * d];
        match kind {
            PoolKind::Avg => {
                for i in 0..batch {
                    for j in 0..d {
                        let go = gout[i * d + j] / 3.0;
                        let lo = j.saturating_sub(1);
                        let hi = (j + 1).min(d - 1);
                        for slot in &mut g[i * d + lo..=i * d + hi] {
                            *slot += go;
                        }
                    }
                }
            }
            PoolKind::Max => {
                for (idx, &src) in argmax.iter().enumerate() {
                    let row = idx / d;
                    g[row * d + src] += gout[idx];
                }
            }
        }
        store.add(&x, g);
    });
    Ok(out)
}

/// Numerically stabilized softmax over a 1-d tensor. Entries are positive
/// and sum to 1; shifting the input by a constant leaves the output
/// unchanged. NaN inputs are rejected instead of propagated.
pub fn softmax_vec(tape: Option<&Tape>, v: &Tensor) -> Result<Tensor> {
    let shape = v.shape();
    if shape.len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            left: shape,
            right: vec![0],
        });
    }
    let values = v.with_values(|vv| -> Result<Vec<f32>> {
        if vv.iter().any(|x| x.is_nan()) {
            return Err(Error::Nan("softmax"));
        }
        let max = vv.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = vv.iter().map(|&x| ((x - max) as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
    })?;
    let out = Tensor::from_op(&shape, values);
    let v = v.clone();
    let y = out.clone();
    let requires = v.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if !store.wants(&v) {
            return;
        }
        let g = y.with_values(|yv| {
            let dot: f64 = yv.iter().zip(gout).map(|(&a, &b)| a as f64 * b as f64).sum();
            yv.iter()
                .zip(gout)
                .map(|(&yi, &gi)| (yi as f64 * (gi as f64 - dot)) as f32)
                .collect()
        });
        store.add(&v, g);
    });
    Ok(out)
}

/// Convex combination `y = sum_k weights[k] * outputs[k]` of equally shaped
/// tensors, differentiable in both the weights and every branch.
pub fn mix(tape: Option<&Tape>, outputs: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    let k = outputs.len();
    if weights.shape() != vec![k] || k == 0 {
        return Err(Error::ShapeMismatch {
            op: "mix",
            left: weights.shape(),
            right: vec![k],
        });
    }
    let shape = outputs[0].shape();
    for o in outputs {
        same_shape(&outputs[0], o, "mix")?;
    }
    let numel = outputs[0].numel();
    let mut acc = vec![0.0f64; numel];
    weights.with_values(|wv| {
        for (o, &w) in outputs.iter().zip(wv.iter()) {
            o.with_values(|ov| {
                for (a, &v) in acc.iter_mut().zip(ov) {
                    *a += w as f64 * v as f64;
                }
            });
        }
    });
    let out = Tensor::from_op(&shape, acc.into_iter().map(|v| v as f32).collect());

    let outputs: Vec<Tensor> = outputs.to_vec();
    let weights = weights.clone();
    let requires = weights.requires_grad() || outputs.iter().any(|o| o.requires_grad());
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&weights) {
            let mut dw = vec![0.0f32; k];
            for (slot, o) in dw.iter_mut().zip(&outputs) {
                *slot = o.with_values(|ov| {
                    ov.iter()
                        .zip(gout)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                }) as f32;
            }
            store.add(&weights, dw);
        }
        weights.with_values(|wv| {
            for (o, &w) in outputs.iter().zip(wv.iter()) {
                if store.wants(o) {
                    store.add(o, gout.iter().map(|&g| w * g).collect());
                }
            }
        });
    });
    Ok(out)
}

/// Running statistics and constants for one batch-norm instance.
#[derive(Debug)]
pub struct BnState {
    pub running_mean: RefCell<Vec<f32>>,
    pub running_var: RefCell<Vec<f32>>,
    pub momentum: f32,
    pub eps: f32,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: RefCell::new(vec![0.0; dim]),
            running_var: RefCell::new(vec![1.0; dim]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.borrow().len()
    }

    pub fn snapshot(&self) -> (Vec<f32>, Vec<f32>) {
        (
            self.running_mean.borrow().clone(),
            self.running_var.borrow().clone(),
        )
    }

    pub fn load(&self, mean: &[f32], var: &[f32]) {
        self.running_mean.borrow_mut().copy_from_slice(mean);
        self.running_var.borrow_mut().copy_from_slice(var);
    }
}

// Shared normalization core for the 1-d and 2-d variants. `groups` maps
// every flat value index to its feature/channel; `count` is the number of
// values per feature.
fn batchnorm_impl(
    tape: Option<&Tape>,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BnState,
    mode: Mode,
    dim: usize,
    count: usize,
    index_of: impl Fn(usize) -> usize + 'static,
) -> Result<Tensor> {
    let numel = x.numel();
    let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::DegenerateBatch(count));
            }
            let mut mean = vec![0.0f64; dim];
            let mut var = vec![0.0f64; dim];
            x.with_values(|xv| {
                for (i, &v) in xv.iter().enumerate() {
                    mean[index_of(i)] += v as f64;
                }
                for m in &mut mean {
                    *m /= count as f64;
                }
                for (i, &v) in xv.iter().enumerate() {
                    let d = v as f64 - mean[index_of(i)];
                    var[index_of(i)] += d * d;
                }
                for v in &mut var {
                    *v /= count as f64;
                }
            });
            // update running stats: biased variance normalizes the batch,
            // the unbiased estimate feeds the running buffer
            {
                let m = state.momentum as f64;
                let mut rm = state.running_mean.borrow_mut();
                let mut rv = state.running_var.borrow_mut();
                let unbias = count as f64 / (count as f64 - 1.0);
                for j in 0..dim {
                    rm[j] = ((1.0 - m) * rm[j] as f64 + m * mean[j]) as f32;
                    rv[j] = ((1.0 - m) * rv[j] as f64 + m * var[j] * unbias) as f32;
                }
            }
            (
                mean.into_iter().map(|v| v as f32).collect(),
                var.into_iter().map(|v| v as f32).collect(),
            )
        }
        Mode::Eval => state.snapshot(),
    };

    let eps = state.eps;
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / ((v as f64 + eps as f64).sqrt())) as f32)
        .collect();
    let mut xhat = vec![0.0f32; numel];
    let mut values = vec![0.0f32; numel];
    x.with_values(|xv| {
        gamma.with_values(|gv| {
            beta.with_values(|bv| {
                for i in 0..numel {
                    let j = index_of(i);
                    let h = (xv[i] - mean[j]) * inv_std[j];
                    xhat[i] = h;
                    values[i] = gv[j] * h + bv[j];
                }
            })
        })
    });
    let out = Tensor::from_op(&x.shape(), values);

    let (x, gamma, beta) = (x.clone(), gamma.clone(), beta.clone());
    let requires = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&beta) {
            let mut db = vec![0.0f64; dim];
            for (i, &g) in gout.iter().enumerate() {
                db[index_of(i)] += g as f64;
            }
            store.add(&beta, db.into_iter().map(|v| v as f32).collect());
        }
        if store.wants(&gamma) {
            let mut dg = vec![0.0f64; dim];
            for (i, &g) in gout.iter().enumerate() {
                dg[index_of(i)] += g as f64 * xhat[i] as f64;
            }
            store.add(&gamma, dg.into_iter().map(|v| v as f32).collect());
        }
        if store.wants(&x) {
            let g = gamma.with_values(|gv| match mode {
                Mode::Train => {
                    let mut sum_g = vec![0.0f64; dim];
                    let mut sum_gh = vec![0.0f64; dim];
                    for (i, &g) in gout.iter().enumerate() {
                        let j = index_of(i);
                        sum_g[j] += g as f64;
                        sum_gh[j] += g as f64 * xhat[i] as f64;
                    }
                    let n = count as f64;
                    (0..numel)
                        .map(|i| {
                            let j = index_of(i);
                            let term = gout[i] as f64 - sum_g[j] / n - xhat[i] as f64 * sum_gh[j] / n;
                            (gv[j] as f64 * inv_std[j] as f64 * term) as f32
                        })
                        .collect::<Vec<f32>>()
                }
                Mode::Eval => (0..numel)
                    .map(|i| {
                        let j = index_of(i);
                        gout[i] * gv[j] * inv_std[j]
                    })
                    .collect::<Vec<f32>>(),
            });
            store.add(&x, g);
        }
    });
    Ok(out)
}

/// Batch normalization over features of `x: [B,d]`. Train mode normalizes
/// by batch statistics and updates the running buffers; eval mode uses the
/// running buffers. Train mode needs `B >= 2`.
pub fn batchnorm1d(
    tape: Option<&Tape>,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BnState,
    mode: Mode,
) -> Result<Tensor> {
    let (batch, d) = rank2(x, "batchnorm1d")?;
    if gamma.shape() != vec![d] || beta.shape() != vec![d] || state.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "batchnorm1d",
            left: x.shape(),
            right: gamma.shape(),
        });
    }
    batchnorm_impl(tape, x, gamma, beta, state, mode, d, batch, move |i| i % d)
}

/// Per-channel batch normalization of `x: [B,C,H,W]`; statistics pool over
/// batch and spatial positions.
pub fn batchnorm2d(
    tape: Option<&Tape>,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BnState,
    mode: Mode,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            left: s,
            right: vec![0, 0, 0, 0],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.shape() != vec![c] || beta.shape() != vec![c] || state.dim() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            left: x.shape(),
            right: gamma.shape(),
        });
    }
    let plane = h * w;
    batchnorm_impl(tape, x, gamma, beta, state, mode, c, b * plane, move |i| {
        (i / plane) % c
    })
}

/// 2-d convolution `x: [B,C_in,H,W]`, `w: [C_out,C_in,K,K]`, `b: [C_out]`.
pub fn conv2d(
    tape: Option<&Tape>,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: ws,
        });
    }
    let dims = ConvDims {
        batch: xs[0],
        c_in: xs[1],
        c_out: ws[0],
        h: xs[2],
        w: xs[3],
        kernel: ws[2],
        stride,
        pad,
    };
    if b.shape() != vec![dims.c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: b.shape(),
            right: vec![dims.c_out],
        });
    }
    let values =
        x.with_values(|xv| w.with_values(|wv| b.with_values(|bv| kernels::conv2d_fwd(xv, wv, bv, &dims))));
    let out = Tensor::from_op(&[dims.batch, dims.c_out, dims.out_h(), dims.out_w()], values);

    let (x, w, b) = (x.clone(), w.clone(), b.clone());
    let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&x) {
            let dx = w.with_values(|wv| kernels::conv2d_dx(gout, wv, &dims));
            store.add(&x, dx);
        }
        if store.wants(&w) {
            let dw = x.with_values(|xv| kernels::conv2d_dw(gout, xv, &dims));
            store.add(&w, dw);
        }
        if store.wants(&b) {
            store.add(&b, kernels::conv2d_db(gout, &dims));
        }
    });
    Ok(out)
}

/// Mean over the spatial dimensions: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool2d(tape: Option<&Tape>, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool2d",
            left: s,
            right: vec![0, 0, 0, 0],
        });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut values = vec![0.0f32; b * c];
    x.with_values(|xv| {
        for (slot, chunk) in values.iter_mut().zip(xv.chunks_exact(plane)) {
            *slot = (chunk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        }
    });
    let out = Tensor::from_op(&[b, c], values);
    let x = x.clone();
    let requires = x.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if store.wants(&x) {
            let mut g = vec![0.0f32; b * c * plane];
            for (chunk, &go) in g.chunks_exact_mut(plane).zip(gout) {
                chunk.fill(go / plane as f32);
            }
            store.add(&x, g);
        }
    });
    Ok(out)
}

/// Mean cross-entropy of row-wise softmax against integer labels.
pub fn softmax_cross_entropy(tape: Option<&Tape>, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = rank2(logits, "softmax_cross_entropy")?;
    if labels.len() != batch || labels.iter().any(|&l| l >= classes) {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: vec![batch, classes],
            right: vec![labels.len()],
        });
    }
    let mut probs = vec![0.0f32; batch * classes];
    let mut loss = 0.0f64;
    logits.with_values(|lv| {
        for i in 0..batch {
            let row = &lv[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f64> = row.iter().map(|&x| ((x - max) as f64).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                probs[i * classes + j] = (e / total) as f32;
            }
            loss += total.ln() + max as f64 - row[labels[i]] as f64;
        }
    });
    let out = Tensor::from_op(&[1], vec![(loss / batch as f64) as f32]);

    let logits = logits.clone();
    let labels = labels.to_vec();
    let requires = logits.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if !store.wants(&logits) {
            return;
        }
        let go = gout[0] / batch as f32;
        let mut g = probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            g[i * classes + l] -= 1.0;
        }
        for v in &mut g {
            *v *= go;
        }
        store.add(&logits, g);
    });
    Ok(out)
}

/// NT-Xent cross-entropy over a `[2B,2B]` cosine-similarity matrix: the
/// positive for anchor `i` is `i+B (mod 2B)`, the diagonal is excluded,
/// and the loss is averaged over all `2B` anchors.
pub fn ntxent_from_sim(tape: Option<&Tape>, sim: &Tensor, temperature: f32) -> Result<Tensor> {
    let (n, n2) = rank2(sim, "ntxent_from_sim")?;
    if n != n2 || n < 4 || n % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "ntxent_from_sim",
            left: vec![n, n2],
            right: vec![n, n],
        });
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "NT-Xent temperature must be positive, got {temperature}"
        )));
    }
    let half = n / 2;
    let tau = temperature as f64;
    let mut probs = vec![0.0f64; n * n];
    let mut loss = 0.0f64;
    sim.with_values(|sv| {
        for i in 0..n {
            let pos = (i + half) % n;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    max = max.max(sv[i * n + j] as f64 / tau);
                }
            }
            let mut total = 0.0f64;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let e = (sv[i * n + j] as f64 / tau - max).exp();
                probs[i * n + j] = e;
                total += e;
            }
            for j in 0..n {
                probs[i * n + j] /= total;
            }
            loss += total.ln() + max - sv[i * n + pos] as f64 / tau;
        }
    });
    let out = Tensor::from_op(&[1], vec![(loss / n as f64) as f32]);

    let sim = sim.clone();
    let requires = sim.requires_grad();
    record_if_needed(tape, requires, &out, move |gout, store| {
        if !store.wants(&sim) {
            return;
        }
        let scale = gout[0] as f64 / (n as f64 * tau);
        let mut g = vec![0.0f32; n * n];
        for i in 0..n {
            let pos = (i + half) % n;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let delta = if j == pos { 1.0 } else { 0.0 };
                g[i * n + j] = ((probs[i * n + j] - delta) * scale) as f32;
            }
        }
        store.add(&sim, g);
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f32>) -> Tensor {
        Tensor::param(shape, v).unwrap()
    }

    #[test]
    fn linear_identity_weights() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let w = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], vec![0.0, 0.0]);
        let y = linear(None, &x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_passes_bias() {
        let x = t(&[1, 2], vec![0.0, 0.0]);
        let w = t(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]);
        let b = t(&[2], vec![3.0, 4.0]);
        let y = linear(None, &x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let x = t(&[1, 3], vec![0.0; 3]);
        let w = t(&[2, 2], vec![0.0; 4]);
        let b = t(&[2], vec![0.0; 2]);
        match linear(None, &x, &w, &b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn activations_at_origin_and_boundaries() {
        for kind in [
            Activation::Relu,
            Activation::Hardswish,
            Activation::Silu,
            Activation::Elu,
        ] {
            let y = activation(None, &t(&[1], vec![0.0]), kind).unwrap();
            assert_eq!(y.item(), 0.0, "{kind:?}(0) should be 0");
        }
        let relu = activation(None, &t(&[1], vec![-1.0]), Activation::Relu).unwrap();
        assert_eq!(relu.item(), 0.0);
        let hs3 = activation(None, &t(&[1], vec![3.0]), Activation::Hardswish).unwrap();
        assert_eq!(hs3.item(), 3.0);
        let hsm3 = activation(None, &t(&[1], vec![-3.0]), Activation::Hardswish).unwrap();
        assert_eq!(hsm3.item(), 0.0);
    }

    #[test]
    fn pool_matches_hand_values() {
        let x = t(&[1, 3], vec![1.0, 2.0, 3.0]);
        let avg = pool1d(None, &x, PoolKind::Avg).unwrap();
        let got = avg.to_vec();
        let want = [1.0, 2.0, 5.0 / 3.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
        let max = pool1d(None, &x, PoolKind::Max).unwrap();
        assert_eq!(max.to_vec(), vec![2.0, 3.0, 3.0]);
    }

    #[test]
    fn max_pool_keeps_constant_rows() {
        let x = t(&[2, 5], vec![4.5; 10]);
        let y = pool1d(None, &x, PoolKind::Max).unwrap();
        assert_eq!(y.to_vec(), vec![4.5; 10]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let y = softmax_vec(None, &t(&[7], vec![0.0; 7])).unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 7.0).abs() < 1e-6);
        }
        let y = softmax_vec(None, &t(&[2], vec![0.0, (2.0f32).ln()])).unwrap();
        let got = y.to_vec();
        assert!((got[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((got[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let v = t(&[3], vec![0.0, f32::NAN, 1.0]);
        assert!(matches!(softmax_vec(None, &v), Err(Error::Nan(_))));
    }

    #[test]
    fn negative_cosine_extremes() {
        let p = t(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let same = negative_cosine(None, &p, &p).unwrap();
        assert!((same.item() + 1.0).abs() < 1e-6);

        let neg = scale(None, &p, -1.0).unwrap();
        let anti = negative_cosine(None, &p, &neg).unwrap();
        assert!((anti.item() - 1.0).abs() < 1e-6);

        let orth = t(&[2, 3], vec![0.0, 5.0, 0.0, 3.0, 0.0, 0.0]);
        let zero = negative_cosine(None, &p, &orth).unwrap();
        assert!(zero.item().abs() < 1e-6);
    }

    #[test]
    fn negative_cosine_rejects_zero_rows() {
        let p = t(&[1, 2], vec![0.0, 0.0]);
        let z = t(&[1, 2], vec![1.0, 0.0]);
        assert!(matches!(
            negative_cosine(None, &p, &z),
            Err(Error::ZeroNorm { row: 0, .. })
        ));
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let x = t(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let gamma = t(&[2], vec![1.0, 1.0]);
        let beta = t(&[2], vec![0.0, 0.0]);
        let state = BnState::new(2);
        let y = batchnorm1d(None, &x, &gamma, &beta, &state, Mode::Train).unwrap();
        let yv = y.to_vec();
        for j in 0..2 {
            let col: Vec<f32> = (0..4).map(|i| yv[i * 2 + j]).collect();
            let mean: f32 = col.iter().sum::<f32>() / 4.0;
            let var: f32 = col.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_constant_column_is_zeroed() {
        let x = t(&[3, 1], vec![7.0, 7.0, 7.0]);
        let gamma = t(&[1], vec![1.0]);
        let beta = t(&[1], vec![0.0]);
        let state = BnState::new(1);
        let y = batchnorm1d(None, &x, &gamma, &beta, &state, Mode::Train).unwrap();
        for v in y.to_vec() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let x = t(&[1, 2], vec![1.0, 2.0]);
        let gamma = t(&[2], vec![1.0, 1.0]);
        let beta = t(&[2], vec![0.0, 0.0]);
        let state = BnState::new(2);
        assert!(matches!(
            batchnorm1d(None, &x, &gamma, &beta, &state, Mode::Train),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn batchnorm_train_then_eval_matches_hand_oracle() {
        // batch [[1, 4], [3, 8]]: mean (2, 6), biased var (1, 4),
        // unbiased var (2, 8); running stats start at (0, 1).
        let x = t(&[2, 2], vec![1.0, 4.0, 3.0, 8.0]);
        let gamma = t(&[2], vec![1.0, 2.0]);
        let beta = t(&[2], vec![0.5, -1.0]);
        let state = BnState::new(2);
        batchnorm1d(None, &x, &gamma, &beta, &state, Mode::Train).unwrap();

        let (rm, rv) = state.snapshot();
        assert!((rm[0] - 0.2).abs() < 1e-6 && (rm[1] - 0.6).abs() < 1e-6);
        assert!((rv[0] - 1.1).abs() < 1e-6 && (rv[1] - 1.7).abs() < 1e-6);

        let y = batchnorm1d(None, &x, &gamma, &beta, &state, Mode::Eval).unwrap();
        let yv = y.to_vec();
        let expect = |v: f32, m: f32, var: f32, g: f32, b: f32| g * (v - m) / (var + 1e-5).sqrt() + b;
        let want = [
            expect(1.0, 0.2, 1.1, 1.0, 0.5),
            expect(4.0, 0.6, 1.7, 2.0, -1.0),
            expect(3.0, 0.2, 1.1, 1.0, 0.5),
            expect(8.0, 0.6, 1.7, 2.0, -1.0),
        ];
        for (g, w) in yv.iter().zip(want) {
            assert!((g - w).abs() < 1e-5, "{yv:?} vs {want:?}");
        }
    }

    #[test]
    fn stopgrad_blocks_gradient_exactly() {
        let tape = Tape::new();
        let p = t(&[1, 2], vec![0.6, 0.8]);
        let z = t(&[1, 2], vec![1.0, 0.0]);
        let loss = negative_cosine(Some(&tape), &p, &z.detach()).unwrap();
        tape.backward(&loss).unwrap();
        assert!(z.grad_vec().is_none(), "detached path must stay untouched");
        assert!(p.grad_vec().is_some());
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let tape = Tape::new();
        let x = t(&[2, 3], vec![1.0, -2.0, 0.5, 9.0, 3.0, -1.0]);
        let loss = sum_all(Some(&tape), &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn mix_with_uniform_weights_is_mean() {
        let a = t(&[1, 2], vec![1.0, 2.0]);
        let b = t(&[1, 2], vec![3.0, 4.0]);
        let w = Tensor::constant(&[2], vec![0.5, 0.5]).unwrap();
        let y = mix(None, &[a, b], &w).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0]);
    }
}
