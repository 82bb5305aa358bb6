//! Slice-level forward/backward kernels used by the tape.

pub mod attention;
pub mod image;

use crate::scalar::Scalar;

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize, out: &mut [T]) {
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_into(row, o);
    }
}

#[inline]
pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut total = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    let inv = T::ONE / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `dx = y * (dy - <dy, y>)` row-wise.
pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

pub(crate) struct LayerNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layernorm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> LayerNormStats<T> {
    let c = gamma.len();
    let inv_c = T::ONE / T::from_usize(c);
    let rows = x.len() / c;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (row, o) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mu = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
        let r = T::ONE / (var + eps).sqrt();
        for (((o, &v), &g), &b) in o.iter_mut().zip(row).zip(gamma).zip(beta) {
            *o = (v - mu) * r * g + b;
        }
        mean.push(mu);
        rstd.push(r);
    }
    LayerNormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_rows_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    stats: &LayerNormStats<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let c = gamma.len();
    let inv_c = T::ONE / T::from_usize(c);
    if let Some(dg) = dgamma {
        for (r, (row, g)) in x.chunks_exact(c).zip(dy.chunks_exact(c)).enumerate() {
            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
            for ((d, &v), &gv) in dg.iter_mut().zip(row).zip(g) {
                *d += gv * (v - mu) * rs;
            }
        }
    }
    if let Some(db) = dbeta {
        for g in dy.chunks_exact(c) {
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
        }
    }
    if let Some(dx) = dx {
        for (r, ((row, g), d)) in x
            .chunks_exact(c)
            .zip(dy.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
            .enumerate()
        {
            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
            // dxhat = dy * gamma
            let mut sum_dxhat = T::ZERO;
            let mut sum_dxhat_xhat = T::ZERO;
            for ((&gv, &gm), &v) in g.iter().zip(gamma).zip(row) {
                let dxhat = gv * gm;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * (v - mu) * rs;
            }
            for (((dv, &gv), &gm), &v) in d.iter_mut().zip(g).zip(gamma).zip(row) {
                let xhat = (v - mu) * rs;
                *dv += rs * (gv * gm - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (k * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * k * (T::ONE + three * a * x * x)
}

/// Mean softmax cross-entropy over non-ignored rows. Returns (loss, probs, count).
pub(crate) fn softmax_xent<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[u8],
    ignore: u8,
) -> (T, Vec<T>, usize) {
    let mut probs = vec![T::ZERO; logits.len()];
    softmax_rows(logits, classes, &mut probs);
    let mut total = T::ZERO;
    let mut count = 0usize;
    for (row, (lrow, &lab)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        if lab == ignore {
            continue;
        }
        let max = lrow.iter().copied().fold(lrow[0], T::max);
        let lse = lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - logits[row * classes + lab as usize];
        count += 1;
    }
    let loss = if count == 0 {
        T::ZERO
    } else {
        total / T::from_usize(count)
    };
    (loss, probs, count)
}
