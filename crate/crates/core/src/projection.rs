//! Two-component principal-component projection for plotting embeddings.

use ndarray::{Array1, Array2, Axis};

/// Centered coordinates on the two leading principal axes.
#[derive(Debug, Clone)]
pub struct Projection2d {
    /// `n x 2`.
    pub coords: Array2<f64>,
    /// Variance captured by each axis.
    pub variance: [f64; 2],
}

const MAX_ITERATIONS: usize = 1000;
const TOLERANCE: f64 = 1e-12;

/// Leading eigenvector of a symmetric positive semi-definite matrix by power
/// iteration from a fixed, dense start vector.
fn leading_eigenvector(cov: &Array2<f64>) -> Array1<f64> {
    let d = cov.nrows();
    let mut v = Array1::from_shape_fn(d, |j| 1.0 + (j as f64 + 1.0).sin() * 0.5);
    v /= v.dot(&v).sqrt();
    for _ in 0..MAX_ITERATIONS {
        let mut next = cov.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm < TOLERANCE {
            return v;
        }
        next /= norm;
        let delta = (&next - &v).mapv(f64::abs).sum();
        v = next;
        if delta < TOLERANCE {
            break;
        }
    }
    v
}

/// Projects the rows of `x` onto their top two principal components.
/// Axis signs are fixed so that the largest-magnitude loading is positive.
pub fn pca_2d(x: &Array2<f64>) -> Projection2d {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Projection2d {
            coords: Array2::zeros((n, 2)),
            variance: [0.0, 0.0],
        };
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / n as f64;
    let mut coords = Array2::zeros((n, 2));
    let mut variance = [0.0; 2];
    for (axis, var) in variance.iter_mut().enumerate().take(d.min(2)) {
        let mut v = leading_eigenvector(&cov);
        let pivot = v.iter().copied().fold(0.0, |best: f64, e| if e.abs() > best.abs() { e } else { best });
        if pivot < 0.0 {
            v.mapv_inplace(|e| -e);
        }
        let lambda = v.dot(&cov.dot(&v));
        let column = centered.dot(&v);
        coords.column_mut(axis).assign(&column);
        *var = lambda.max(0.0);
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov.scaled_add(-lambda, &outer);
    }
    Projection2d { coords, variance }
}
