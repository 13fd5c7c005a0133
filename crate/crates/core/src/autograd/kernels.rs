//! Dense f32 compute kernels with a data-parallel and a sequential path.
//!
//! Every kernel computes each output element with a fixed-order sequential
//! accumulation (in f64, stored back as f32), and parallelism only splits
//! work *across* output elements. The `parallel` feature therefore changes
//! wall time, never bits: `seq::*` and `par::*` agree bitwise, and the
//! dispatching wrappers below pick a path purely by problem size.

/// Geometry of a 2-d convolution: `x[B,Ci,H,W] * w[Co,Ci,K,K] -> y[B,Co,Ho,Wo]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Work threshold (in multiply-adds) above which the parallel path is used.
const PAR_THRESHOLD: usize = 1 << 15;

pub mod seq {
    use super::ConvDims;

    /// `out[m,n] = a[m,k] @ b[k,n]`
    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            matmul_row(a, b, k, n, i, row);
        }
        out
    }

    pub(super) fn matmul_row(a: &[f32], b: &[f32], k: usize, n: usize, i: usize, row: &mut [f32]) {
        let mut acc = vec![0.0f64; n];
        for l in 0..k {
            let av = a[i * k + l] as f64;
            let brow = &b[l * n..(l + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (j, v) in acc.into_iter().enumerate() {
            row[j] = v as f32;
        }
    }

    /// `out[m,n] = a[m,k] @ b[n,k]^T` (row-by-row dot products).
    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            matmul_nt_row(a, b, k, n, i, row);
        }
        out
    }

    pub(super) fn matmul_nt_row(
        a: &[f32],
        b: &[f32],
        k: usize,
        n: usize,
        i: usize,
        row: &mut [f32],
    ) {
        let arow = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += arow[l] as f64 * brow[l] as f64;
            }
            *slot = acc as f32;
        }
    }

    /// `out[k,n] = a[m,k]^T @ b[m,n]`
    pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; k * n];
        for (l, row) in out.chunks_exact_mut(n).enumerate() {
            matmul_tn_row(a, b, m, k, n, l, row);
        }
        out
    }

    pub(super) fn matmul_tn_row(
        a: &[f32],
        b: &[f32],
        m: usize,
        k: usize,
        n: usize,
        l: usize,
        row: &mut [f32],
    ) {
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            let av = a[i * k + l] as f64;
            let brow = &b[i * n..(i + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (j, v) in acc.into_iter().enumerate() {
            row[j] = v as f32;
        }
    }

    pub fn conv2d_fwd(x: &[f32], w: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let mut out = vec![0.0f32; d.batch * d.c_out * oh * ow];
        let per_item = d.c_out * oh * ow;
        for (b, chunk) in out.chunks_exact_mut(per_item).enumerate() {
            conv2d_fwd_item(x, w, bias, d, b, chunk);
        }
        out
    }

    pub(super) fn conv2d_fwd_item(
        x: &[f32],
        w: &[f32],
        bias: &[f32],
        d: &ConvDims,
        b: usize,
        out: &mut [f32],
    ) {
        let (oh, ow) = (d.out_h(), d.out_w());
        let xb = &x[b * d.c_in * d.h * d.w..(b + 1) * d.c_in * d.h * d.w];
        for co in 0..d.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co] as f64;
                    for ci in 0..d.c_in {
                        for ky in 0..d.kernel {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kernel {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = xb[(ci * d.h + iy as usize) * d.w + ix as usize];
                                let wv = w[((co * d.c_in + ci) * d.kernel + ky) * d.kernel + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }

    pub fn conv2d_dx(dy: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
        let mut dx = vec![0.0f32; d.batch * d.c_in * d.h * d.w];
        let per_item = d.c_in * d.h * d.w;
        for (b, chunk) in dx.chunks_exact_mut(per_item).enumerate() {
            conv2d_dx_item(dy, w, d, b, chunk);
        }
        dx
    }

    pub(super) fn conv2d_dx_item(dy: &[f32], w: &[f32], d: &ConvDims, b: usize, dx: &mut [f32]) {
        let (oh, ow) = (d.out_h(), d.out_w());
        let dyb = &dy[b * d.c_out * oh * ow..(b + 1) * d.c_out * oh * ow];
        for ci in 0..d.c_in {
            for iy in 0..d.h {
                for ix in 0..d.w {
                    let mut acc = 0.0f64;
                    for co in 0..d.c_out {
                        for ky in 0..d.kernel {
                            let num = iy as isize + d.pad as isize - ky as isize;
                            if num < 0 || num % d.stride as isize != 0 {
                                continue;
                            }
                            let oy = (num / d.stride as isize) as usize;
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..d.kernel {
                                let num = ix as isize + d.pad as isize - kx as isize;
                                if num < 0 || num % d.stride as isize != 0 {
                                    continue;
                                }
                                let ox = (num / d.stride as isize) as usize;
                                if ox >= ow {
                                    continue;
                                }
                                let g = dyb[(co * oh + oy) * ow + ox];
                                let wv = w[((co * d.c_in + ci) * d.kernel + ky) * d.kernel + kx];
                                acc += g as f64 * wv as f64;
                            }
                        }
                    }
                    dx[(ci * d.h + iy) * d.w + ix] = acc as f32;
                }
            }
        }
    }

    pub fn conv2d_dw(dy: &[f32], x: &[f32], d: &ConvDims) -> Vec<f32> {
        let mut dw = vec![0.0f32; d.c_out * d.c_in * d.kernel * d.kernel];
        let per_co = d.c_in * d.kernel * d.kernel;
        for (co, chunk) in dw.chunks_exact_mut(per_co).enumerate() {
            conv2d_dw_co(dy, x, d, co, chunk);
        }
        dw
    }

    pub(super) fn conv2d_dw_co(dy: &[f32], x: &[f32], d: &ConvDims, co: usize, dw: &mut [f32]) {
        let (oh, ow) = (d.out_h(), d.out_w());
        for ci in 0..d.c_in {
            for ky in 0..d.kernel {
                for kx in 0..d.kernel {
                    let mut acc = 0.0f64;
                    for b in 0..d.batch {
                        for oy in 0..oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let g = dy[((b * d.c_out + co) * oh + oy) * ow + ox];
                                let xv =
                                    x[((b * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize];
                                acc += g as f64 * xv as f64;
                            }
                        }
                    }
                    dw[(ci * d.kernel + ky) * d.kernel + kx] = acc as f32;
                }
            }
        }
    }

    pub fn conv2d_db(dy: &[f32], d: &ConvDims) -> Vec<f32> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let mut db = vec![0.0f32; d.c_out];
        for (co, slot) in db.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for b in 0..d.batch {
                let base = ((b * d.c_out + co) * oh) * ow;
                for v in &dy[base..base + oh * ow] {
                    acc += *v as f64;
                }
            }
            *slot = acc as f32;
        }
        db
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use super::ConvDims;
    use rayon::prelude::*;

    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, row)| super::seq::matmul_row(a, b, k, n, i, row));
        out
    }

    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, row)| super::seq::matmul_nt_row(a, b, k, n, i, row));
        out
    }

    pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; k * n];
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(l, row)| super::seq::matmul_tn_row(a, b, m, k, n, l, row));
        out
    }

    pub fn conv2d_fwd(x: &[f32], w: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
        let (oh, ow) = (d.out_h(), d.out_w());
        let mut out = vec![0.0f32; d.batch * d.c_out * oh * ow];
        out.par_chunks_exact_mut(d.c_out * oh * ow)
            .enumerate()
            .for_each(|(b, chunk)| super::seq::conv2d_fwd_item(x, w, bias, d, b, chunk));
        out
    }

    pub fn conv2d_dx(dy: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
        let mut dx = vec![0.0f32; d.batch * d.c_in * d.h * d.w];
        dx.par_chunks_exact_mut(d.c_in * d.h * d.w)
            .enumerate()
            .for_each(|(b, chunk)| super::seq::conv2d_dx_item(dy, w, d, b, chunk));
        dx
    }

    pub fn conv2d_dw(dy: &[f32], x: &[f32], d: &ConvDims) -> Vec<f32> {
        let mut dw = vec![0.0f32; d.c_out * d.c_in * d.kernel * d.kernel];
        dw.par_chunks_exact_mut(d.c_in * d.kernel * d.kernel)
            .enumerate()
            .for_each(|(co, chunk)| super::seq::conv2d_dw_co(dy, x, d, co, chunk));
        dw
    }
}

macro_rules! dispatch_matmul {
    ($name:ident) => {
        pub fn $name(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
            #[cfg(feature = "parallel")]
            if m * k * n >= PAR_THRESHOLD {
                return par::$name(a, b, m, k, n);
            }
            seq::$name(a, b, m, k, n)
        }
    };
}

dispatch_matmul!(matmul);
dispatch_matmul!(matmul_nt);
dispatch_matmul!(matmul_tn);

fn conv_work(d: &ConvDims) -> usize {
    d.batch * d.c_out * d.out_h() * d.out_w() * d.c_in * d.kernel * d.kernel
}

pub fn conv2d_fwd(x: &[f32], w: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    if conv_work(d) >= PAR_THRESHOLD {
        return par::conv2d_fwd(x, w, bias, d);
    }
    seq::conv2d_fwd(x, w, bias, d)
}

pub fn conv2d_dx(dy: &[f32], w: &[f32], d: &ConvDims) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    if conv_work(d) >= PAR_THRESHOLD {
        return par::conv2d_dx(dy, w, d);
    }
    seq::conv2d_dx(dy, w, d)
}

pub fn conv2d_dw(dy: &[f32], x: &[f32], d: &ConvDims) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    if conv_work(d) >= PAR_THRESHOLD {
        return par::conv2d_dw(dy, x, d);
    }
    seq::conv2d_dw(dy, x, d)
}

pub fn conv2d_db(dy: &[f32], d: &ConvDims) -> Vec<f32> {
    seq::conv2d_db(dy, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(n: usize, seed: u32) -> Vec<f32> {
        // small deterministic pseudo-random values
        (0..n)
            .map(|i| {
                let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed);
                (v % 1000) as f32 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2), a);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let (m, k, n) = (5, 7, 4);
        let a = fill(m * k, 1);
        let b = fill(k * n, 2);
        let plain = seq::matmul(&a, &b, m, k, n);

        // a @ b == a @ (b^T)^T
        let mut bt = vec![0.0f32; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        assert_eq!(seq::matmul_nt(&a, &bt, m, k, n), plain);

        let mut at = vec![0.0f32; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        // (a^T)^T @ b via matmul_tn(at: [k x m]... at^T is [m x k])
        assert_eq!(seq::matmul_tn(&at, &b, k, m, n), plain);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (m, k, n) = (33, 65, 17);
        let a = fill(m * k, 3);
        let b = fill(k * n, 4);
        let s = seq::matmul(&a, &b, m, k, n);
        let p = par::matmul(&a, &b, m, k, n);
        assert!(s.iter().zip(&p).all(|(x, y)| x.to_bits() == y.to_bits()));

        let d = ConvDims {
            batch: 4,
            c_in: 3,
            c_out: 8,
            h: 10,
            w: 10,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = fill(d.batch * d.c_in * d.h * d.w, 5);
        let w = fill(d.c_out * d.c_in * 9, 6);
        let bias = fill(d.c_out, 7);
        let sf = seq::conv2d_fwd(&x, &w, &bias, &d);
        let pf = par::conv2d_fwd(&x, &w, &bias, &d);
        assert!(sf.iter().zip(&pf).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
