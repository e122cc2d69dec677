//! Forward and backward kernels shared by [`super::Eager`] and
//! [`super::Tape`].
//!
//! Shapes are checked by the callers in `graph.rs`; the kernels assume
//! consistent inputs. Each output row is computed by a single sequential
//! loop, so results do not depend on whether rows run in parallel.

use std::ops::Range;

use super::Tensor;
use crate::par;

/// Work size (multiply-adds) above which row loops go parallel.
const PAR_THRESHOLD: usize = 1 << 15;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, m * k * n >= PAR_THRESHOLD, |i, row| {
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, b.row(p), row);
            }
        }
    });
    Tensor::from_parts(m, n, out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let m = a.rows();
    let n = b.rows();
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, m * a.cols() * n >= PAR_THRESHOLD, |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    Tensor::from_parts(m, n, out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    matmul(&a.transpose(), b)
}

pub fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.rows(), a.cols(), data)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect())
}

/// `a + row` broadcast over rows (or `a * row` with `mul`).
pub fn row_broadcast(a: &Tensor, row: &Tensor, mul: bool) -> Tensor {
    let mut out = a.clone();
    let r = row.data();
    for i in 0..a.rows() {
        for (o, &v) in out.row_mut(i).iter_mut().zip(r) {
            if mul {
                *o *= v;
            } else {
                *o += v;
            }
        }
    }
    out
}

/// Column sums as a `1 x cols` tensor.
pub fn sum_rows(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        axpy(1.0, a.row(i), &mut out);
    }
    Tensor::from_parts(1, a.cols(), out)
}

pub fn add_into(acc: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(acc.shape(), g.shape());
    axpy(1.0, g.data(), acc.data_mut());
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for i in 0..a.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Standardised rows and per-row `1/sqrt(var + eps)`.
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LayerNormCache) {
    let (m, n) = x.shape();
    let mut xhat = Tensor::zeros(m, n);
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let out = row_broadcast(&row_broadcast(&xhat, gain, true), bias, false);
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    dy: &Tensor,
    gain: &Tensor,
    cache: &LayerNormCache,
) -> (Tensor, Tensor, Tensor) {
    let (m, n) = dy.shape();
    let mut dx = Tensor::zeros(m, n);
    let mut dgain = vec![0.0; n];
    let g = gain.data();
    for i in 0..m {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..n {
            let d = dyr[j] * g[j];
            mean_d += d;
            mean_dx += d * xh[j];
            dgain[j] += dyr[j] * xh[j];
        }
        mean_d /= n as f64;
        mean_dx /= n as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dyr[j] * g[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, Tensor::from_parts(1, n, dgain), sum_rows(dy))
}

/// Query rows `0` attend over key rows `1` within each block.
pub type Block = (Range<usize>, Range<usize>);

/// Saved softmax weights, one buffer per (block, head).
pub struct AttentionCache {
    pub probs: Vec<Vec<f64>>,
}

/// Multi-head scaled dot-product attention over column slices.
///
/// Head `h` uses columns `h*dk/heads..` of `q`/`k` and the matching slice of
/// `v`; outputs are concatenated back in column order. Query rows not
/// covered by any block are zero.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocks: &[Block],
) -> (Tensor, AttentionCache) {
    let dk = q.cols() / heads;
    let dv = v.cols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), v.cols());
    let mut probs = Vec::with_capacity(blocks.len() * heads);
    for (qr, kr) in blocks {
        let nk = kr.len();
        for h in 0..heads {
            let (qc, vc) = (h * dk..(h + 1) * dk, h * dv..(h + 1) * dv);
            let mut p = vec![0.0; qr.len() * nk];
            for (a, i) in qr.clone().enumerate() {
                let qi = &q.row(i)[qc.clone()];
                let pr = &mut p[a * nk..(a + 1) * nk];
                for (b, j) in kr.clone().enumerate() {
                    pr[b] = dot(qi, &k.row(j)[qc.clone()]) * scale;
                }
                softmax_in_place(pr);
                let orow = &mut out.row_mut(i)[vc.clone()];
                for (b, j) in kr.clone().enumerate() {
                    axpy(pr[b], &v.row(j)[vc.clone()], orow);
                }
            }
            probs.push(p);
        }
    }
    (out, AttentionCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    dout: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    blocks: &[Block],
    cache: &AttentionCache,
) -> (Tensor, Tensor, Tensor) {
    let dk_w = q.cols() / heads;
    let dv_w = v.cols() / heads;
    let scale = 1.0 / (dk_w as f64).sqrt();
    let mut dq = Tensor::zeros(q.rows(), q.cols());
    let mut dk = Tensor::zeros(k.rows(), k.cols());
    let mut dv = Tensor::zeros(v.rows(), v.cols());
    let mut slot = 0;
    for (qr, kr) in blocks {
        let nk = kr.len();
        for h in 0..heads {
            let (qc, vc) = (h * dk_w..(h + 1) * dk_w, h * dv_w..(h + 1) * dv_w);
            let p = &cache.probs[slot];
            slot += 1;
            let mut ds = vec![0.0; nk];
            for (a, i) in qr.clone().enumerate() {
                let pr = &p[a * nk..(a + 1) * nk];
                let doi = &dout.row(i)[vc.clone()];
                let mut weighted = 0.0;
                for (b, j) in kr.clone().enumerate() {
                    let dp = dot(doi, &v.row(j)[vc.clone()]);
                    ds[b] = dp;
                    weighted += pr[b] * dp;
                    axpy(pr[b], doi, &mut dv.row_mut(j)[vc.clone()]);
                }
                for b in 0..nk {
                    ds[b] = pr[b] * (ds[b] - weighted) * scale;
                }
                for (b, j) in kr.clone().enumerate() {
                    if ds[b] == 0.0 {
                        continue;
                    }
                    axpy(ds[b], &k.row(j)[qc.clone()], &mut dq.row_mut(i)[qc.clone()]);
                    axpy(ds[b], &q.row(i)[qc.clone()], &mut dk.row_mut(j)[qc.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Mean of `x` rows over each segment.
pub fn segment_mean(x: &Tensor, segs: &[Range<usize>]) -> Tensor {
    let mut out = Tensor::zeros(segs.len(), x.cols());
    for (s, r) in segs.iter().enumerate() {
        let w = 1.0 / r.len() as f64;
        for i in r.clone() {
            axpy(w, x.row(i), out.row_mut(s));
        }
    }
    out
}

/// Row `i` is the mean of `x` rows listed in `sets[i]`.
pub fn gather_mean(x: &Tensor, sets: &[Vec<u32>]) -> Tensor {
    let mut out = Tensor::zeros(sets.len(), x.cols());
    for (s, idx) in sets.iter().enumerate() {
        let w = 1.0 / idx.len() as f64;
        let row = out.row_mut(s);
        for &i in idx {
            axpy(w, x.row(i as usize), row);
        }
    }
    out
}

pub fn gather_mean_backward(g: &Tensor, sets: &[Vec<u32>], rows: usize) -> Tensor {
    let mut dx = Tensor::zeros(rows, g.cols());
    for (s, idx) in sets.iter().enumerate() {
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            axpy(w, g.row(s), dx.row_mut(i as usize));
        }
    }
    dx
}

/// `out[i][j] = s_i · table[cand[i][j]]`.
pub fn candidate_scores(s: &Tensor, table: &Tensor, cand: &[Vec<u32>]) -> Tensor {
    let c = cand.first().map_or(0, Vec::len);
    let mut out = Tensor::zeros(s.rows(), c);
    for (i, row) in cand.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            out.set(i, j, dot(s.row(i), table.row(e as usize)));
        }
    }
    out
}

pub fn candidate_scores_backward(g: &Tensor, table: &Tensor, cand: &[Vec<u32>]) -> Tensor {
    let mut ds = Tensor::zeros(cand.len(), table.cols());
    for (i, row) in cand.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            let gij = g.get(i, j);
            axpy(gij, table.row(e as usize), ds.row_mut(i));
        }
    }
    ds
}

pub fn logsumexp_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = r.iter().map(|v| (v - max).exp()).sum();
        out.push(max + s.ln());
    }
    Tensor::from_parts(x.rows(), 1, out)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian kernel matrix `exp(-|x_i - y_j|^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x: &Tensor, y: &Tensor, sigma: f64) -> Tensor {
    let denom = 2.0 * sigma * sigma;
    let mut out = vec![0.0; x.rows() * y.rows()];
    par::for_each_row(
        &mut out,
        y.rows(),
        x.rows() * y.rows() * x.cols() >= PAR_THRESHOLD,
        |i, row| {
            for (j, o) in row.iter_mut().enumerate() {
                *o = (-sq_dist(x.row(i), y.row(j)) / denom).exp();
            }
        },
    );
    Tensor::from_parts(x.rows(), y.rows(), out)
}

/// Gradients of `mean(K)` w.r.t. `x` and `y`, scaled by `g`.
pub fn gaussian_kernel_mean_backward(
    g: f64,
    x: &Tensor,
    y: &Tensor,
    kmat: &Tensor,
    sigma: f64,
) -> (Tensor, Tensor) {
    let s2 = sigma * sigma;
    let w = g / (x.rows() * y.rows()) as f64 / s2;
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    let mut dy = Tensor::zeros(y.rows(), y.cols());
    let mut diff = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let kij = kmat.get(i, j) * w;
            if kij == 0.0 {
                continue;
            }
            for ((d, a), b) in diff.iter_mut().zip(x.row(i)).zip(y.row(j)) {
                *d = a - b;
            }
            axpy(-kij, &diff, dx.row_mut(i));
            axpy(kij, &diff, dy.row_mut(j));
        }
    }
    (dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&a, &b).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_nt(&a, &b).data(), &[17.0, 23.0, 39.0, 53.0]);
        assert_eq!(matmul_tn(&a, &b).data(), &[26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = Tensor::from_rows(&[[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]]).unwrap();
        let s = softmax_rows(&a);
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(s.is_finite());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0).abs() < 1e-9);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
