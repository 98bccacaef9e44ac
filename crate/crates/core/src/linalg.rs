//! Small dense helpers on top of `ndarray`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Returns `v / |v|`, failing on a zero (or non-finite) norm.
pub fn normalized(v: ArrayView1<f64>, what: &str) -> Result<(Array1<f64>, f64)> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm(what.to_string()));
    }
    Ok((&v / n, n))
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|x| x.is_finite())
}

pub fn ensure_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if all_finite(values) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Row-wise unit-norm check with absolute tolerance.
pub fn rows_unit(m: ArrayView2<f64>, tol: f64) -> bool {
    m.axis_iter(Axis(0)).all(|r| (norm(r) - 1.0).abs() <= tol)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || std * rng.sample::<f64, _>(StandardNormal))
}

/// Random unit vector drawn from an isotropic Gaussian.
pub fn unit_vector<R: Rng>(rng: &mut R, len: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vector(rng, len, 1.0);
        let n = norm(v.view());
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Max-abs difference between two equally shaped arrays.
pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
