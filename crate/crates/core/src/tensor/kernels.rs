//! Raw slice kernels. Everything here is single-threaded with a fixed
//! summation order, so results do not depend on batch size or call history.

use crate::error::{Error, Result};

use super::{numel, Scalar};

const COL_BLOCK: usize = 256;
const ROW_BLOCK: usize = 64;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each output element is accumulated over `p = 0..k` in order, whatever
/// the blocking.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i0 in (0..m).step_by(ROW_BLOCK) {
            let i1 = (i0 + ROW_BLOCK).min(m);
            // four rows of `b` per pass; the updates to each `c` element
            // stay sequential in `p`, so the result matches the plain loop
            let k4 = k - k % 4;
            for p in (0..k4).step_by(4) {
                let row = |q: usize| &b[q * n + j0..q * n + j1];
                let (b0, b1, b2, b3) = (row(p), row(p + 1), row(p + 2), row(p + 3));
                for i in i0..i1 {
                    let ar = &a[i * k + p..i * k + p + 4];
                    let (a0, a1, a2, a3) = (ar[0], ar[1], ar[2], ar[3]);
                    let crow = &mut c[i * n + j0..i * n + j1];
                    for j in 0..crow.len() {
                        let mut v = crow[j];
                        v += a0 * b0[j];
                        v += a1 * b1[j];
                        v += a2 * b2[j];
                        v += a3 * b3[j];
                        crow[j] = v;
                    }
                }
            }
            for p in k4..k {
                let brow = &b[p * n + j0..p * n + j1];
                for i in i0..i1 {
                    let aip = a[i * k + p];
                    let crow = &mut c[i * n + j0..i * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
    }
}

pub(crate) fn transpose_last_two<T: Scalar>(
    x: &[T],
    batch: usize,
    rows: usize,
    cols: usize,
) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); x.len()];
    let plane = rows * cols;
    for bi in 0..batch {
        let src = &x[bi * plane..(bi + 1) * plane];
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for i0 in (0..rows).step_by(TILE) {
            for j0 in (0..cols).step_by(TILE) {
                for i in i0..(i0 + TILE).min(rows) {
                    for j in j0..(j0 + TILE).min(cols) {
                        dst[j * rows + i] = src[i * cols + j];
                    }
                }
            }
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[i_0, .., i_r] = x[i at positions axes]`, i.e. output axis `d` is input axis `axes[d]`.
pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        out.extend_from_slice(x);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_stride[rank - 1];
    let outer = x.len() / inner;
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_stride).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        // odometer over all but the last axis
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Shape bookkeeping for a batched matmul with leading-dimension broadcasting.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// `(a batch index, b batch index)` for each output batch, in order.
    pairs: Vec<(usize, usize)>,
    a_batches: usize,
    b_batches: usize,
    /// `b` is a single matrix shared by every batch of `a`.
    shared_rhs: bool,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, k, k2, n) = (a[ra - 2], a[ra - 1], b[rb - 2], b[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ab, bb) = (&a[..ra - 2], &b[..rb - 2]);
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(mismatch());
            }
        }
        let (sa, sb) = (strides(&pa), strides(&pb));
        let total = numel(&batch);
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    ia += idx[d] * sa[d];
                }
                if pb[d] != 1 {
                    ib += idx[d] * sb[d];
                }
            }
            pairs.push((ia, ib));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let a_batches = numel(&pa);
        let b_batches = numel(&pb);
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            out_shape,
            m,
            k,
            n,
            shared_rhs: b_batches == 1 && a_batches == total,
            pairs,
            a_batches,
            b_batches,
        })
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut c = vec![T::zero(); numel(&self.out_shape)];
        if self.shared_rhs {
            gemm_acc(a, b, &mut c, self.a_batches * m, k, n);
            return c;
        }
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm_acc(
                &a[ia * m * k..(ia + 1) * m * k],
                &b[ib * k * n..(ib + 1) * k * n],
                &mut c[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            );
        }
        c
    }

    /// Adjoints `dA = dC·Bᵀ`, `dB = Aᵀ·dC`, summed over broadcast batches.
    pub fn backward<T: Scalar>(
        &self,
        a: &[T],
        b: &[T],
        dc: &[T],
        need_a: bool,
        need_b: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = need_a.then(|| {
            let mut da = vec![T::zero(); self.a_batches * m * k];
            let bt = transpose_last_two(b, self.b_batches, k, n);
            if self.shared_rhs {
                gemm_acc(dc, &bt, &mut da, self.a_batches * m, n, k);
            } else {
                for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
                    gemm_acc(
                        &dc[o * m * n..(o + 1) * m * n],
                        &bt[ib * n * k..(ib + 1) * n * k],
                        &mut da[ia * m * k..(ia + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            da
        });
        let db = need_b.then(|| {
            let mut db = vec![T::zero(); self.b_batches * k * n];
            if self.shared_rhs {
                let rows = self.a_batches * m;
                let at = transpose_last_two(a, 1, rows, k);
                gemm_acc(&at, dc, &mut db, k, rows, n);
            } else {
                let at = transpose_last_two(a, self.a_batches, m, k);
                for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
                    gemm_acc(
                        &at[ia * k * m..(ia + 1) * k * m],
                        &dc[o * m * n..(o + 1) * m * n],
                        &mut db[ib * k * n..(ib + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
            }
            db
        });
        (da, db)
    }
}
