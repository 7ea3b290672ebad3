//! Raw NCHW kernels behind the graph operations.
//!
//! Batch work is split into a fixed number of chunks that depends only on the
//! batch size, and partial weight gradients are reduced in chunk order, so
//! results are bit-identical for any rayon thread count.

use rayon::prelude::*;

use crate::scalar::{gemm, Scalar};

const MAX_CHUNKS: usize = 16;

fn chunk_len(batch: usize) -> usize {
    batch.div_ceil(MAX_CHUNKS).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kj, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kj, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * oh * ow;
    let k = g.patch();
    let mut out = vec![T::zero(); g.batch * out_sz];
    let per_chunk = chunk_len(g.batch);
    out.par_chunks_mut(per_chunk * out_sz)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * oh * ow] };
            for (j, y) in out_chunk.chunks_mut(out_sz).enumerate() {
                let n = ci * per_chunk + j;
                let img = &x[n * in_sz..(n + 1) * in_sz];
                let rhs: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(g, img, &mut cols);
                    &cols
                };
                if let Some(b) = bias {
                    for (co, row) in y.chunks_mut(oh * ow).enumerate() {
                        row.fill(b[co]);
                    }
                    gemm(g.c_out, k, oh * ow, weight, false, rhs, false, T::one(), y);
                } else {
                    gemm(g.c_out, k, oh * ow, weight, false, rhs, false, T::zero(), y);
                }
            }
        });
    out
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * oh * ow;
    let k = g.patch();
    let per_chunk = chunk_len(g.batch);
    let n_chunks = g.batch.div_ceil(per_chunk);
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_sz]);

    let work = |ci: usize, dx_chunk: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let mut dw = vec![T::zero(); g.c_out * k];
        let mut db = vec![T::zero(); g.c_out];
        let mut cols = vec![T::zero(); k * oh * ow];
        let mut dcols = vec![T::zero(); k * oh * ow];
        let start = ci * per_chunk;
        let end = (start + per_chunk).min(g.batch);
        let mut dx_chunk = dx_chunk;
        for n in start..end {
            let img = &x[n * in_sz..(n + 1) * in_sz];
            let gy = &dy[n * out_sz..(n + 1) * out_sz];
            for (co, row) in gy.chunks(oh * ow).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
            let rhs: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW += dY (c_out x hw) * cols^T (hw x k)
            gemm(g.c_out, oh * ow, k, gy, false, rhs, true, T::one(), &mut dw);
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                let local = &mut dxc[(n - start) * in_sz..(n - start + 1) * in_sz];
                if g.is_pointwise() {
                    gemm(k, g.c_out, oh * ow, weight, true, gy, false, T::one(), local);
                } else {
                    gemm(k, g.c_out, oh * ow, weight, true, gy, false, T::zero(), &mut dcols);
                    col2im_add(g, &dcols, local);
                }
            }
        }
        (dw, db)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = match dx.as_mut() {
        Some(dxv) => dxv
            .par_chunks_mut(per_chunk * in_sz)
            .enumerate()
            .map(|(ci, chunk)| work(ci, Some(chunk)))
            .collect(),
        None => (0..n_chunks).into_par_iter().map(|ci| work(ci, None)).collect(),
    };
    let mut dw = vec![T::zero(); g.c_out * k];
    let mut db = vec![T::zero(); g.c_out];
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub struct NormGeom {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

/// Group normalization. Returns `(y, mean, rstd)` with statistics per `(n, group)`.
pub fn group_norm_forward<T: Scalar>(g: &NormGeom, x: &[T], gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = g.channels / g.groups;
    let gsz = cpg * g.spatial;
    let count = T::from_usize(gsz).unwrap();
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); g.batch * g.groups];
    let mut rstds = vec![T::zero(); g.batch * g.groups];
    y.par_chunks_mut(gsz)
        .zip(means.par_iter_mut().zip(rstds.par_iter_mut()))
        .enumerate()
        .for_each(|(idx, (yg, (mean_out, rstd_out)))| {
            let xg = &x[idx * gsz..(idx + 1) * gsz];
            let mean = xg.iter().copied().sum::<T>() / count;
            let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            let group = idx % g.groups;
            for (j, (o, &v)) in yg.iter_mut().zip(xg).enumerate() {
                let c = group * cpg + j / g.spatial;
                *o = (v - mean) * rstd * gamma[c] + beta[c];
            }
            *mean_out = mean;
            *rstd_out = rstd;
        });
    (y, means, rstds)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    g: &NormGeom,
    x: &[T],
    gamma: &[T],
    means: &[T],
    rstds: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = g.channels / g.groups;
    let gsz = cpg * g.spatial;
    let count = T::from_usize(gsz).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); g.channels];
    let mut dbeta = vec![T::zero(); g.channels];
    for idx in 0..g.batch * g.groups {
        let group = idx % g.groups;
        let (mean, rstd) = (means[idx], rstds[idx]);
        let xg = &x[idx * gsz..(idx + 1) * gsz];
        let dyg = &dy[idx * gsz..(idx + 1) * gsz];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for (j, (&v, &d)) in xg.iter().zip(dyg).enumerate() {
            let c = group * cpg + j / g.spatial;
            let xhat = (v - mean) * rstd;
            let dxhat = d * gamma[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[c] += d * xhat;
            dbeta[c] += d;
        }
        let dxg = &mut dx[idx * gsz..(idx + 1) * gsz];
        for (j, ((o, &v), &d)) in dxg.iter_mut().zip(xg).zip(dyg).enumerate() {
            let c = group * cpg + j / g.spatial;
            let xhat = (v - mean) * rstd;
            let dxhat = d * gamma[c];
            *o = rstd / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Non-overlapping `k x k` pooling over `[planes, h, w]`. Returns the pooled
/// values and, for max pooling, the flat argmax index of each window.
pub fn pool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize, max: bool) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::new();
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        let v = x[idx];
                        acc += v;
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                if max {
                    out.push(best);
                    arg.push(best_idx);
                } else {
                    out.push(acc * inv);
                }
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(p * oh + oy) * ow + ox] * inv;
                for dy_ in 0..k {
                    for dx_ in 0..k {
                        dx[p * h * w + (oy * k + dy_) * w + ox * k + dx_] = g;
                    }
                }
            }
        }
    }
    dx
}
