//! Dense kernels on row-major slices.

use super::Real;

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[k×m] += aᵀ · b` for `a[n×k]`, `b[n×m]`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[n×k] += a[n×m] · bᵀ` for `b[k×m]`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize) {
    let bt = transpose(b, k, m);
    matmul_acc(a, &bt, out, n, m, k);
}

pub fn add_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

pub fn sum_rows_acc<T: Real>(x: &[T], out: &mut [T]) {
    for row in x.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

const GELU_K: f64 = 0.044_715;

fn gelu_c<T: Real>() -> T {
    T::from_f64((2.0 / std::f64::consts::PI).sqrt()).unwrap()
}

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(u: T) -> T {
    let half = T::from_f64(0.5).unwrap();
    let k = T::from_f64(GELU_K).unwrap();
    half * u * (T::one() + (gelu_c::<T>() * (u + k * u * u * u)).tanh())
}

pub fn gelu_grad<T: Real>(u: T) -> T {
    let half = T::from_f64(0.5).unwrap();
    let k = T::from_f64(GELU_K).unwrap();
    let c = gelu_c::<T>();
    let t = (c * (u + k * u * u * u)).tanh();
    let three = T::from_f64(3.0).unwrap();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * k * u * u)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns (output, normalized input, 1/std per row).
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let rows = x.len() / d;
    let dn = T::from_usize(d).unwrap();
    let eps = T::from_f64(LN_EPS).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Accumulates gain/bias gradients and returns the input gradient.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let d = gain.len();
    let dn = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dgain[c] = dgain[c] + dyr[c] * xr[c];
            dbias[c] = dbias[c] + dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            m1 = m1 + dxhat[c];
            m2 = m2 + dxhat[c] * xr[c];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        for c in 0..d {
            dx[r * d + c] = rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
        }
    }
    dx
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn all_finite<T: Real>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_finite())
}
