use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// `sqrt(2/pi)` in the tanh form of GELU.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

// ── raw kernels ─────────────────────────────────────────────────────────
//
// Each output element is accumulated as ((0 + p0) + p1) + ... in increasing
// index order of the contracted dimension. The loop nests below are ordered
// for locality, but none of them reorders a single element's sum.

/// `a [m×k] · b [k×n]`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij = *cij + aik * bkj;
            }
        }
    }
    c
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = Vec::with_capacity(m * n);
    for a_row in a.chunks_exact(k) {
        for b_row in b.chunks_exact(k) {
            c.push(
                a_row
                    .iter()
                    .zip(b_row)
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y),
            );
        }
    }
    c
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&ari, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cij, &brj) in c_row.iter_mut().zip(b_row) {
                *cij = *cij + ari * brj;
            }
        }
    }
    c
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `d_x = y ⊙ (d_y − ⟨d_y, y⟩)` for one softmax row.
pub(crate) fn softmax_vjp_row<T: Scalar>(y: &[T], d_y: &[T], d_x: &mut [T]) {
    let inner = y
        .iter()
        .zip(d_y)
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for ((dx, &yi), &dyi) in d_x.iter_mut().zip(y).zip(d_y) {
        *dx = yi * (dyi - inner);
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

fn mat_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        &[r, c] => Ok((r, c)),
        d => Err(shape_err(format!("{what}: expected a matrix, got dims {d:?}"))),
    }
}

/// Matrix product of `a [m×k]` and `b [k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = mat_dims(a, "matmul lhs")?;
    let (k2, n) = mat_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dims disagree: [{m}×{k}] · [{k2}×{n}]"
        )));
    }
    Tensor::new(&[m, n], mm(a.data(), b.data(), m, k, n))
}

/// Cotangents `(d_a, d_b) = (d_out · bᵀ, aᵀ · d_out)` of [`matmul`].
pub fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = mat_dims(a, "matmul_vjp lhs")?;
    let (_, n) = mat_dims(b, "matmul_vjp rhs")?;
    d_out.expect_shape(&[m, n], "matmul_vjp d_out")?;
    let d_a = Tensor::new(&[m, k], mm_nt(d_out.data(), b.data(), m, n, k))?;
    let d_b = Tensor::new(&[k, n], mm_tn(a.data(), d_out.data(), m, k, n))?;
    Ok((d_a, d_b))
}

/// `x [..×k] · w [k×n] -> [..×n]`, treating every leading index as a row.
pub(crate) fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, n) = mat_dims(w, "linear weight")?;
    if x.last_dim() != k {
        return Err(shape_err(format!(
            "linear: input width {} vs weight [{k}×{n}]",
            x.last_dim()
        )));
    }
    let rows = x.rows();
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = n;
    Tensor::new(&dims, mm(x.data(), w.data(), rows, k, n))
}

pub(crate) fn linear_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    d_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (k, n) = mat_dims(w, "linear weight")?;
    let rows = x.rows();
    if d_y.rows() != rows || d_y.last_dim() != n {
        return Err(shape_err(format!(
            "linear_vjp: d_y dims {:?} do not match output of {:?}·[{k}×{n}]",
            d_y.dims(),
            x.dims()
        )));
    }
    let d_x = Tensor::new(x.dims(), mm_nt(d_y.data(), w.data(), rows, n, k))?;
    let d_w = Tensor::new(&[k, n], mm_tn(x.data(), d_y.data(), rows, k, n))?;
    Ok((d_x, d_w))
}

// ── softmax ─────────────────────────────────────────────────────────────

/// Softmax over the last dimension: subtract the row max, exponentiate,
/// normalize.
pub fn row_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    let n = x.last_dim();
    for row in y.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    y
}

/// VJP of [`row_softmax`] given its output `y`.
pub fn row_softmax_vjp<T: Scalar>(y: &Tensor<T>, d_y: &Tensor<T>) -> Result<Tensor<T>> {
    d_y.expect_shape(y.dims(), "row_softmax_vjp d_y")?;
    let n = y.last_dim();
    let mut d_x = Tensor::zeros(y.dims());
    for ((yr, dyr), dxr) in y
        .data()
        .chunks_exact(n)
        .zip(d_y.data().chunks_exact(n))
        .zip(d_x.data_mut().chunks_exact_mut(n))
    {
        softmax_vjp_row(yr, dyr, dxr);
    }
    Ok(d_x)
}

// ── GELU ────────────────────────────────────────────────────────────────

/// `0.5·x·(1 + tanh(GELU_SCALE·(x + GELU_COEFF·x³)))`
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEFF) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

/// Derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_slope_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_COEFF);
    let s = T::lit(GELU_SCALE);
    let t = (s * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::lit(3.0) * c * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_vjp<T: Scalar>(x: &Tensor<T>, d_y: &Tensor<T>) -> Result<Tensor<T>> {
    d_y.expect_shape(x.dims(), "gelu_vjp d_y")?;
    Tensor::new(
        x.dims(),
        x.data()
            .iter()
            .zip(d_y.data())
            .map(|(&xi, &dyi)| gelu_slope_scalar(xi) * dyi)
            .collect(),
    )
}

// ── layer norm ──────────────────────────────────────────────────────────

/// Normalized input and per-row reciprocal standard deviation.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

impl<T: Scalar> LayerNormCache<T> {
    pub fn bytes(&self) -> u64 {
        self.xhat.bytes() + (self.rstd.len() * T::DTYPE.size_of()) as u64
    }
}

/// `(x − mean)/sqrt(var + eps)·gamma + beta` over the last dimension, with
/// population variance computed in two passes.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    gamma.expect_shape(&[d], "layer_norm gamma")?;
    beta.expect_shape(&[d], "layer_norm beta")?;
    let inv_d = T::one() / T::lit(d as f64);
    let mut xhat = x.clone();
    let mut y = Tensor::zeros(x.dims());
    let mut rstd = Vec::with_capacity(x.rows());
    for (xr, yr) in xhat
        .data_mut()
        .chunks_exact_mut(d)
        .zip(y.data_mut().chunks_exact_mut(d))
    {
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = xr
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for (((xv, yv), &g), &b) in xr
            .iter_mut()
            .zip(yr.iter_mut())
            .zip(gamma.data())
            .zip(beta.data())
        {
            *xv = (*xv - mean) * r;
            *yv = *xv * g + b;
        }
        rstd.push(r);
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub fn layer_norm_vjp<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    d_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xhat = &cache.xhat;
    let d = xhat.last_dim();
    d_y.expect_shape(xhat.dims(), "layer_norm_vjp d_y")?;
    gamma.expect_shape(&[d], "layer_norm_vjp gamma")?;
    let inv_d = T::one() / T::lit(d as f64);
    let mut d_x = Tensor::zeros(xhat.dims());
    let mut d_gamma = Tensor::zeros(&[d]);
    let mut d_beta = Tensor::zeros(&[d]);
    let mut dxhat = vec![T::zero(); d];
    for (((xr, dyr), dxr), &r) in xhat
        .data()
        .chunks_exact(d)
        .zip(d_y.data().chunks_exact(d))
        .zip(d_x.data_mut().chunks_exact_mut(d))
        .zip(&cache.rstd)
    {
        for j in 0..d {
            dxhat[j] = dyr[j] * gamma.data()[j];
        }
        let mean_dxhat = dxhat.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(xr)
            .fold(T::zero(), |a, (&g, &x)| a + g * x)
            * inv_d;
        for j in 0..d {
            dxr[j] = r * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
        for (j, (&dy, &xh)) in dyr.iter().zip(xr).enumerate() {
            let dg = &mut d_gamma.data_mut()[j];
            *dg = *dg + dy * xh;
            let db = &mut d_beta.data_mut()[j];
            *db = *db + dy;
        }
    }
    Ok((d_x, d_gamma, d_beta))
}
