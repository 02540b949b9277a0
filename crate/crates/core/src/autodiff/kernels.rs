//! Slice-level forward and backward kernels.

use crate::scalar::Scalar;

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o = *o + av * bv);
        }
    }
}

/// `out[n×k] += g[n×m] · b[k×m]ᵀ`
pub(crate) fn matmul_bt<S: Scalar>(g: &[S], b: &[S], out: &mut [S], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let dot: S = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · g[n×m]`
pub(crate) fn matmul_at<S: Scalar>(a: &[S], g: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            out[p * m..(p + 1) * m]
                .iter_mut()
                .zip(grow)
                .for_each(|(o, &gv)| *o = *o + av * gv);
        }
    }
}

pub(crate) fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

pub(crate) fn log_softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    row.iter_mut().for_each(|v| *v = *v - lse);
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let pdf = (-(x * x) / S::lit(2.0)).exp() / S::lit((2.0 * std::f64::consts::PI).sqrt());
    normal_cdf(x) + x * pdf
}

fn normal_cdf<S: Scalar>(x: S) -> S {
    S::lit(0.5) * (S::one() + (x / S::lit(std::f64::consts::SQRT_2)).erf())
}

/// Rows `[⌊t·T/L⌋, ⌊(t+1)·T/L⌋)` averaged into output row `t`.
pub(crate) fn pool_window(t: usize, rows: usize, len: usize) -> (usize, usize) {
    (t * rows / len, (t + 1) * rows / len)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub t_len: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Source frame read by output frame `t` through tap `j`.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let half = (self.k - 1) / 2;
        let src = t as isize + (j as isize - half as isize) * self.dilation as isize;
        (src >= 0 && (src as usize) < self.t_len).then_some(src as usize)
    }
}

pub(crate) fn conv1d<S: Scalar>(x: &[S], kernel: &[S], bias: &[S], out: &mut [S], g: ConvGeom) {
    for t in 0..g.t_len {
        let orow = &mut out[t * g.cout..(t + 1) * g.cout];
        orow.copy_from_slice(bias);
        for j in 0..g.k {
            let Some(src) = g.source(t, j) else { continue };
            let xrow = &x[src * g.cin..(src + 1) * g.cin];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv == S::zero() {
                    continue;
                }
                let krow = &kernel[(j * g.cin + c) * g.cout..(j * g.cin + c + 1) * g.cout];
                orow.iter_mut().zip(krow).for_each(|(o, &kv)| *o = *o + xv * kv);
            }
        }
    }
}

pub(crate) fn conv1d_grad_input<S: Scalar>(grad: &[S], kernel: &[S], gx: &mut [S], g: ConvGeom) {
    for t in 0..g.t_len {
        let grow = &grad[t * g.cout..(t + 1) * g.cout];
        for j in 0..g.k {
            let Some(src) = g.source(t, j) else { continue };
            for c in 0..g.cin {
                let krow = &kernel[(j * g.cin + c) * g.cout..(j * g.cin + c + 1) * g.cout];
                let dot: S = grow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                gx[src * g.cin + c] = gx[src * g.cin + c] + dot;
            }
        }
    }
}

pub(crate) fn conv1d_grad_kernel<S: Scalar>(grad: &[S], x: &[S], gk: &mut [S], g: ConvGeom) {
    for t in 0..g.t_len {
        let grow = &grad[t * g.cout..(t + 1) * g.cout];
        for j in 0..g.k {
            let Some(src) = g.source(t, j) else { continue };
            for c in 0..g.cin {
                let xv = x[src * g.cin + c];
                if xv == S::zero() {
                    continue;
                }
                let dst = &mut gk[(j * g.cin + c) * g.cout..(j * g.cin + c + 1) * g.cout];
                dst.iter_mut().zip(grow).for_each(|(d, &gv)| *d = *d + xv * gv);
            }
        }
    }
}
