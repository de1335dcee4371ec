//! Top principal components by power iteration, for 2-D scatter exports.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POWER_ITERATIONS: usize = 100;

/// Projects the centred rows of `x` onto its top `components` principal axes.
///
/// Each axis runs a fixed number of power iterations on the covariance from a
/// seeded start, then deflates. Axis signs are fixed so the largest-magnitude
/// loading is positive.
pub fn pca_project(x: &DMatrix<f64>, components: usize, seed: u64) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut centred = x.clone();
    for j in 0..d {
        let mean = x.column(j).sum() / n.max(1) as f64;
        centred.column_mut(j).add_scalar_mut(-mean);
    }
    let mut cov = centred.transpose() * &centred / n.max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes = Vec::with_capacity(components);
    for _ in 0..components.min(d) {
        let mut v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..POWER_ITERATIONS {
            let next = &cov * &v;
            let norm = next.norm();
            if norm == 0.0 {
                break;
            }
            v = next / norm;
        }
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        let lead = v
            .iter()
            .copied()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.neg_mut();
        }
        let lambda = v.dot(&(&cov * &v));
        cov -= &v * v.transpose() * lambda;
        axes.push(v);
    }

    let mut out = DMatrix::zeros(n, components);
    for (k, axis) in axes.iter().enumerate() {
        out.set_column(k, &(&centred * axis));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_dominant_axis() {
        // Points spread along (1, 1, 0) with a little spread along (0, 0, 1).
        let rows: Vec<f64> = (0..20)
            .flat_map(|i| {
                let t = i as f64 - 9.5;
                let e = if i % 2 == 0 { 0.1 } else { -0.1 };
                [t, t, e]
            })
            .collect();
        let x = DMatrix::from_row_slice(20, 3, &rows);
        let p = pca_project(&x, 2, 42);
        assert_eq!(p.shape(), (20, 2));
        let expected = (x[(19, 0)] - x.column(0).mean()) * 2f64.sqrt();
        assert!((p[(19, 0)].abs() - expected.abs()).abs() < 1e-2);
        assert!(p.column(1).iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn deterministic_under_seed() {
        let x = DMatrix::from_fn(30, 6, |i, j| ((i * 7 + j * 3) as f64).sin());
        assert_eq!(pca_project(&x, 2, 1), pca_project(&x, 2, 1));
    }
}
