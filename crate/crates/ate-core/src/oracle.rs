//! Exhaustive small-n reference computations.
//!
//! For a centered Bernoulli profile with n <= 5 the noise matrix takes
//! finitely many values; any functional's exact mean and variance follow by
//! weighting every upper-triangle outcome by its probability. The test
//! suites use this as the independent oracle for the closed-form moment and
//! variance formulas.

use nalgebra::DMatrix;

use crate::model::{NoiseFamily, NoiseProfile};

/// Exact `(E[f(W)], var[f(W)])` by full enumeration of Bernoulli outcomes.
///
/// Panics if the family is not centered Bernoulli or n > 5 (the outcome count
/// is `2^{n(n+1)/2}`).
pub fn enumerate<F: FnMut(&DMatrix<f64>) -> f64>(noise: &NoiseProfile, mut f: F) -> (f64, f64) {
    let p = match &noise.family {
        NoiseFamily::CenteredBernoulli { p } => p,
        _ => panic!("enumeration oracle needs a centered Bernoulli family"),
    };
    let n = noise.n();
    assert!(n <= 5, "enumeration oracle limited to n <= 5, got {n}");

    // upper-triangle cells that are actually random
    let mut cells = Vec::new();
    for i in 0..n {
        for j in i..n {
            if i == j && !noise.self_loops {
                continue;
            }
            cells.push((i, j, p[(i, j)]));
        }
    }

    let mut w = DMatrix::zeros(n, n);
    if !noise.self_loops {
        for i in 0..n {
            w[(i, i)] = noise.diag_mean[i];
        }
    }

    let outcomes = 1u64 << cells.len();
    let mut mean = 0.0;
    let mut second = 0.0;
    for mask in 0..outcomes {
        let mut prob = 1.0;
        for (bit, &(i, j, pij)) in cells.iter().enumerate() {
            let on = (mask >> bit) & 1 == 1;
            prob *= if on { pij } else { 1.0 - pij };
            let val = if on { 1.0 - pij } else { -pij };
            w[(i, j)] = val;
            w[(j, i)] = val;
        }
        if prob == 0.0 {
            continue;
        }
        let v = f(&w);
        mean += prob * v;
        second += prob * v * v;
    }
    (mean, (second - mean * mean).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn enumeration_reproduces_bernoulli_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.6, 0.6, 0.8]);
        let noise = NoiseProfile::centered_bernoulli(p, true).unwrap();
        let (mean, var) = enumerate(&noise, |w| w[(0, 1)]);
        assert!(mean.abs() < 1e-15);
        assert_relative_eq!(var, 0.6 * 0.4, epsilon = 1e-14);
        // third moment of a centered Bernoulli(0.3) entry
        let (m3, _) = enumerate(&noise, |w| w[(0, 0)].powi(3));
        assert_relative_eq!(m3, 0.3 * 0.7 * (1.0 - 0.6), epsilon = 1e-14);
        // kappa = E[(w^2 - sigma^2)^2]
        let s2 = 0.8 * 0.2;
        let (kap, _) = enumerate(&noise, |w| (w[(1, 1)].powi(2) - s2).powi(2));
        assert_relative_eq!(kap, noise.kappa4[(1, 1)], epsilon = 1e-14);
    }

    #[test]
    fn no_loop_enumeration_keeps_constant_diagonal() {
        let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.6, 0.6, 0.8]);
        let noise = NoiseProfile::centered_bernoulli(p, false).unwrap();
        let (mean, var) = enumerate(&noise, |w| w[(0, 0)]);
        assert_relative_eq!(mean, -0.3, epsilon = 1e-15);
        assert!(var < 1e-15);
    }
}
