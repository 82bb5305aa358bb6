//! Attention kernels over token-major `[tokens, heads * d_head]` buffers.

use crate::scalar::Scalar;

use super::{softmax_into, softmax_rows};

/// For every query, the key rows it may attend to and the positional slot of
/// each key. All queries attend to the same number of keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    /// Keys per query.
    pub per_query: usize,
    /// Size of the positional-encoding slot space.
    pub num_slots: usize,
    pub keys: Vec<u32>,
    pub slots: Vec<u32>,
}

impl NeighborTable {
    pub fn queries(&self) -> usize {
        self.keys.len() / self.per_query.max(1)
    }
}

pub(crate) struct NeighborArgs<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub rpe: Option<&'a [T]>,
    pub table: &'a NeighborTable,
    pub heads: usize,
    pub d_head: usize,
    pub scale: T,
}

/// Returns the attention weights `[queries, heads, per_query]`.
pub(crate) fn neighborhood_forward<T: Scalar>(a: &NeighborArgs<'_, T>, out: &mut [T]) -> Vec<T> {
    let (heads, dh, l) = (a.heads, a.d_head, a.table.per_query);
    let c = heads * dh;
    let n = a.table.queries();
    let mut weights = vec![T::ZERO; n * heads * l];
    let mut logits = vec![T::ZERO; l];
    for i in 0..n {
        let keys = &a.table.keys[i * l..(i + 1) * l];
        let slots = &a.table.slots[i * l..(i + 1) * l];
        for h in 0..heads {
            let off = h * dh;
            let qh = &a.q[i * c + off..][..dh];
            for (lg, &key) in logits.iter_mut().zip(keys) {
                let kh = &a.k[key as usize * c + off..][..dh];
                *lg = dot(qh, kh) * a.scale;
            }
            let w = &mut weights[(i * heads + h) * l..][..l];
            softmax_into(&logits, w);
            let o = &mut out[i * c + off..][..dh];
            o.fill(T::ZERO);
            for ((&wt, &key), &slot) in w.iter().zip(keys).zip(slots) {
                axpy(wt, &a.v[key as usize * c + off..][..dh], o);
                if let Some(rpe) = a.rpe {
                    axpy(wt, &rpe[(h * a.table.num_slots + slot as usize) * dh..][..dh], o);
                }
            }
        }
    }
    weights
}

pub(crate) struct NeighborGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
    pub drpe: Option<&'a mut [T]>,
}

pub(crate) fn neighborhood_backward<T: Scalar>(
    a: &NeighborArgs<'_, T>,
    weights: &[T],
    dout: &[T],
    g: NeighborGrads<'_, T>,
) {
    let (heads, dh, l) = (a.heads, a.d_head, a.table.per_query);
    let c = heads * dh;
    let n = a.table.queries();
    let NeighborGrads {
        mut dq,
        mut dk,
        mut dv,
        mut drpe,
    } = g;
    let mut dlogit = vec![T::ZERO; l];
    for i in 0..n {
        let keys = &a.table.keys[i * l..(i + 1) * l];
        let slots = &a.table.slots[i * l..(i + 1) * l];
        for h in 0..heads {
            let off = h * dh;
            let w = &weights[(i * heads + h) * l..][..l];
            let go = &dout[i * c + off..][..dh];
            let mut mean = T::ZERO;
            for (j, (&key, &slot)) in keys.iter().zip(slots).enumerate() {
                let vrow = &a.v[key as usize * c + off..][..dh];
                let mut da = dot(go, vrow);
                if let Some(rpe) = a.rpe {
                    da += dot(go, &rpe[(h * a.table.num_slots + slot as usize) * dh..][..dh]);
                }
                dlogit[j] = da;
                mean += w[j] * da;
            }
            for (dl, &wt) in dlogit.iter_mut().zip(w) {
                *dl = wt * (*dl - mean) * a.scale;
            }
            for (j, (&key, &slot)) in keys.iter().zip(slots).enumerate() {
                let kb = key as usize * c + off;
                if let Some(dv) = dv.as_deref_mut() {
                    axpy(w[j], go, &mut dv[kb..kb + dh]);
                }
                if let Some(drpe) = drpe.as_deref_mut() {
                    let rb = (h * a.table.num_slots + slot as usize) * dh;
                    axpy(w[j], go, &mut drpe[rb..rb + dh]);
                }
                if let Some(dk) = dk.as_deref_mut() {
                    axpy(dlogit[j], &a.q[i * c + off..][..dh], &mut dk[kb..kb + dh]);
                }
                if let Some(dq) = dq.as_deref_mut() {
                    axpy(dlogit[j], &a.k[kb..kb + dh], &mut dq[i * c + off..][..dh]);
                }
            }
        }
    }
}

pub(crate) struct FullArgs<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    pub d_head: usize,
    pub scale: T,
}

/// Multi-head attention of every query over every key. Returns the
/// attention weights `[heads, queries, keys]`.
pub(crate) fn full_forward<T: Scalar>(a: &FullArgs<'_, T>, out: &mut [T]) -> Vec<T> {
    let (n, m, dh) = (a.queries, a.keys, a.d_head);
    let c = (a.heads * dh) as isize;
    let mut weights = vec![T::ZERO; a.heads * n * m];
    let mut logits = vec![T::ZERO; n * m];
    for h in 0..a.heads {
        let off = h * dh;
        // SAFETY: every head slice lies inside its `[rows, c]` buffer.
        unsafe {
            T::gemm(
                n, dh, m, a.scale,
                a.q[off..].as_ptr(), c, 1,
                a.k[off..].as_ptr(), 1, c,
                T::ZERO, logits.as_mut_ptr(), m as isize, 1,
            );
        }
        let w = &mut weights[h * n * m..(h + 1) * n * m];
        softmax_rows(&logits, m, w);
        unsafe {
            T::gemm(
                n, m, dh, T::ONE,
                w.as_ptr(), m as isize, 1,
                a.v[off..].as_ptr(), c, 1,
                T::ZERO, out[off..].as_mut_ptr(), c, 1,
            );
        }
    }
    weights
}

pub(crate) struct FullGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
}

pub(crate) fn full_backward<T: Scalar>(
    a: &FullArgs<'_, T>,
    weights: &[T],
    dout: &[T],
    g: FullGrads<'_, T>,
) {
    let (n, m, dh) = (a.queries, a.keys, a.d_head);
    let c = (a.heads * dh) as isize;
    let FullGrads {
        mut dq,
        mut dk,
        mut dv,
    } = g;
    let mut ds = vec![T::ZERO; n * m];
    for h in 0..a.heads {
        let off = h * dh;
        let w = &weights[h * n * m..(h + 1) * n * m];
        // SAFETY: head slices stay inside `[rows, c]` buffers; outputs are
        // exclusive borrows distinct from the inputs.
        unsafe {
            if let Some(dv) = dv.as_deref_mut() {
                T::gemm(
                    m, n, dh, T::ONE,
                    w.as_ptr(), 1, m as isize,
                    dout[off..].as_ptr(), c, 1,
                    T::ONE, dv[off..].as_mut_ptr(), c, 1,
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            T::gemm(
                n, dh, m, T::ONE,
                dout[off..].as_ptr(), c, 1,
                a.v[off..].as_ptr(), 1, c,
                T::ZERO, ds.as_mut_ptr(), m as isize, 1,
            );
        }
        for (drow, wrow) in ds.chunks_exact_mut(m).zip(w.chunks_exact(m)) {
            let dotp: T = drow.iter().zip(wrow).map(|(&d, &p)| d * p).sum();
            for (d, &p) in drow.iter_mut().zip(wrow) {
                *d = p * (*d - dotp) * a.scale;
            }
        }
        unsafe {
            if let Some(dq) = dq.as_deref_mut() {
                T::gemm(
                    n, m, dh, T::ONE,
                    ds.as_ptr(), m as isize, 1,
                    a.k[off..].as_ptr(), c, 1,
                    T::ONE, dq[off..].as_mut_ptr(), c, 1,
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                T::gemm(
                    m, n, dh, T::ONE,
                    ds.as_ptr(), 1, m as isize,
                    a.q[off..].as_ptr(), c, 1,
                    T::ONE, dk[off..].as_mut_ptr(), c, 1,
                );
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
