//! Minimal dense numerics: batches, seeded generators, reductions and the
//! finite-difference oracle used by the test suites.

mod batch;
mod rng;

pub use batch::Batch;
pub use rng::{gauss_sample, streams, RngSnapshot, RngState};

use crate::error::{KrnetError, Result};
use crate::real::Real;

/// Default central-difference step for double precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is stored as `a_rows x a_cols`; `ta` selects its transpose (same for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    alpha: T,
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(a.len(), a_rows * a_cols, "gemm lhs storage");
    assert_eq!(b.len(), b_rows * b_cols, "gemm rhs storage");
    assert_eq!(c.len(), m * n, "gemm output storage");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: shapes and storage lengths were checked above, so every strided
    // access stays inside the three slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Central-difference Jacobian; entry `(i, j)` is `(f_i(x + h e_j) - f_i(x - h e_j)) / 2h`.
pub fn finite_diff_jacobian<T, F>(mut f: F, x: &[T], h: T) -> Result<Batch<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<Vec<T>>,
{
    if !(h > T::zero()) {
        return Err(KrnetError::config("h", "finite-difference step must be positive"));
    }
    let n_in = x.len();
    let mut cols: Vec<Vec<T>> = Vec::with_capacity(n_in);
    let mut probe = x.to_vec();
    let two_h = h + h;
    for j in 0..n_in {
        probe[j] = x[j] + h;
        let fp = f(&probe)?;
        probe[j] = x[j] - h;
        let fm = f(&probe)?;
        probe[j] = x[j];
        if fp.len() != fm.len() {
            return Err(KrnetError::DimMismatch {
                context: "finite_diff_jacobian",
                expected: fp.len(),
                got: fm.len(),
            });
        }
        if fp.iter().chain(&fm).any(|v| !v.is_finite()) {
            return Err(KrnetError::NonFinite {
                context: "finite_diff_jacobian: f".into(),
            });
        }
        cols.push(fp.iter().zip(&fm).map(|(&a, &b)| (a - b) / two_h).collect());
    }
    let n_out = cols.first().map_or(0, Vec::len);
    let mut jac = Batch::zeros(n_out, n_in);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            jac.set(i, j, v);
        }
    }
    Ok(jac)
}

/// Overflow-safe `ln sum_i exp(v_i)`.
pub fn logsumexp<T: Real>(values: &[T]) -> Result<T> {
    let max = values
        .iter()
        .copied()
        .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(KrnetError::EmptyInput("logsumexp"))?;
    if max == T::neg_infinity() {
        return Ok(max);
    }
    let s: T = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// `ln |det A|` of a square matrix via LU with partial pivoting.
pub fn log_abs_det<T: Real>(a: &Batch<T>) -> Result<T> {
    let n = a.rows();
    a.expect_cols(n, "log_abs_det")?;
    let mut m = a.clone();
    let mut acc = T::zero();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                m.get(i, col)
                    .abs()
                    .partial_cmp(&m.get(j, col).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let p = m.get(piv, col);
        if p == T::zero() || !p.is_finite() {
            return Err(KrnetError::Singular {
                context: "log_abs_det".into(),
                value: p.as_f64(),
            });
        }
        if piv != col {
            for j in 0..n {
                let t = m.get(col, j);
                m.set(col, j, m.get(piv, j));
                m.set(piv, j, t);
            }
        }
        acc += p.abs().ln();
        for i in col + 1..n {
            let f = m.get(i, col) / p;
            for j in col..n {
                let v = m.get(i, j) - f * m.get(col, j);
                m.set(i, j, v);
            }
        }
    }
    Ok(acc)
}

/// Standard-normal log-density of each row.
pub fn std_normal_logpdf<T: Real>(x: &Batch<T>) -> Vec<T> {
    let c = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) * T::from_usize(x.cols()).unwrap();
    let half = T::lit(0.5);
    x.row_iter()
        .map(|r| -half * r.iter().map(|&v| v * v).sum::<T>() - c)
        .collect()
}

/// Mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}
