//! Spiked eigenpair extraction with magnitude ordering and sign alignment.

use faer::linalg::solvers::SelfAdjointEigen;
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{AteError, Result};
use crate::model::{SampleMatrix, SpikedMeanModel};

/// One empirical eigenpair `(lambda_k, vhat_k)`.
#[derive(Debug, Clone)]
pub struct SpikedEigenPair {
    /// 1-based spike index.
    pub k: usize,
    pub lambda: f64,
    pub vhat: DVector<f64>,
}

/// Result of the top-K extraction. `ambiguous_boundary` flags
/// `|lambda_K| == |lambda_{K+1}|` within 1e-12, where the choice of the K-th
/// spike is arbitrary.
#[derive(Debug, Clone)]
pub struct SpikedEigs {
    pub pairs: Vec<SpikedEigenPair>,
    pub boundary_gap: f64,
    pub ambiguous_boundary: bool,
}

/// Full symmetric eigendecomposition of `X`, returning the K eigenpairs of
/// largest magnitude. Ties keep the algebraically larger eigenvalue first.
///
/// Signs follow the convention `v_k^T vhat_k >= 0` against the reference
/// model when provided; otherwise the first coordinate of magnitude above
/// 1e-12 is made positive.
pub fn spiked_eigs(
    x: &SampleMatrix,
    k: usize,
    reference: Option<&SpikedMeanModel>,
) -> Result<SpikedEigs> {
    let n = x.x.nrows();
    if x.x.ncols() != n {
        return Err(AteError::DimensionMismatch { expected: n, got: x.x.ncols() });
    }
    if k == 0 || k > n {
        return Err(AteError::SpikeIndexOutOfRange { k, k_max: n });
    }
    let sym_err = (&x.x - x.x.transpose()).abs().max();
    if sym_err > 0.0 {
        return Err(AteError::InvalidConfig(format!(
            "matrix is not symmetric (max asymmetry {sym_err:.3e})"
        )));
    }
    if let Some(model) = reference {
        if model.n() != n {
            return Err(AteError::DimensionMismatch { expected: model.n(), got: n });
        }
    }

    let (values, vectors) = symmetric_eigen(&x.x);

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(values[b].partial_cmp(&values[a]).unwrap())
    });

    let boundary_gap = if k < n { values[idx[k - 1]].abs() - values[idx[k]].abs() } else { f64::INFINITY };
    let ambiguous_boundary = boundary_gap.abs() <= 1e-12;

    let mut pairs = Vec::with_capacity(k);
    for (rank, &j) in idx[..k].iter().enumerate() {
        let mut vhat = DVector::from_fn(n, |i, _| vectors[(i, j)]);
        align_sign(&mut vhat, rank + 1, reference);
        pairs.push(SpikedEigenPair { k: rank + 1, lambda: values[j], vhat });
    }
    Ok(SpikedEigs { pairs, boundary_gap, ambiguous_boundary })
}

fn align_sign(vhat: &mut DVector<f64>, k: usize, reference: Option<&SpikedMeanModel>) {
    let flip = match reference {
        Some(model) if k <= model.k() => model.v().column(k - 1).dot(vhat) < 0.0,
        _ => {
            let lead = vhat.iter().find(|c| c.abs() > 1e-12);
            matches!(lead, Some(&c) if c < 0.0)
        }
    };
    if flip {
        vhat.neg_mut();
    }
}

/// Dense symmetric eigendecomposition used everywhere in the crate.
/// Runs sequentially so results do not depend on the worker pool; callers
/// parallelize across matrices instead.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut fm = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            fm[(i, j)] = a[(i, j)];
        }
    }
    init_seq_parallelism();
    let evd = SelfAdjointEigen::new(fm.as_ref(), Side::Lower).expect("eigendecomposition failed");
    let s = evd.S();
    let u = evd.U();
    let values = DVector::from_fn(n, |i, _| s[i]);
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, j)]);
    (values, vectors)
}

fn init_seq_parallelism() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        faer::set_global_parallelism(faer::Par::Seq);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_sbm, sample_data, NoiseProfile};
    use approx::assert_relative_eq;

    fn wrap(x: DMatrix<f64>) -> SampleMatrix {
        SampleMatrix { x, seed: 0, self_loops: true }
    }

    #[test]
    fn diagonal_matrix_spikes() {
        let x = wrap(DMatrix::from_diagonal(&DVector::from_column_slice(&[5.0, -3.0, 1.0])));
        let eigs = spiked_eigs(&x, 2, None).unwrap();
        assert_relative_eq!(eigs.pairs[0].lambda, 5.0, epsilon = 1e-12);
        assert_relative_eq!(eigs.pairs[1].lambda, -3.0, epsilon = 1e-12);
        assert_relative_eq!(eigs.pairs[0].vhat[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(eigs.pairs[1].vhat[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_sbm_recovers_population_pairs() {
        let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.4, 0.4, 0.8]);
        let (model, _, _) = build_sbm(&[20, 20], &p, true).unwrap();
        let s = sample_data(&model, &NoiseProfile::zero(40), 0).unwrap();
        let eigs = spiked_eigs(&s, 2, Some(&model)).unwrap();
        for k in 1..=2 {
            let pair = &eigs.pairs[k - 1];
            assert_relative_eq!(pair.lambda, model.dk(k), epsilon = 1e-8);
            assert!((&pair.vhat - model.vk(k)).abs().max() <= 1e-8);
        }
    }

    #[test]
    fn magnitude_ordering_with_mixed_signs() {
        let x = wrap(DMatrix::from_diagonal(&DVector::from_column_slice(&[
            2.0, -7.0, 6.5, -1.0,
        ])));
        let eigs = spiked_eigs(&x, 4, None).unwrap();
        let lambdas: Vec<f64> = eigs.pairs.iter().map(|p| p.lambda).collect();
        for (got, want) in lambdas.iter().zip(&[-7.0, 6.5, 2.0, -1.0]) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn tie_breaks_keep_algebraically_larger_first() {
        let x = wrap(DMatrix::from_diagonal(&DVector::from_column_slice(&[-4.0, 4.0, 1.0])));
        let eigs = spiked_eigs(&x, 2, None).unwrap();
        assert_eq!(eigs.pairs[0].lambda, 4.0);
        assert_eq!(eigs.pairs[1].lambda, -4.0);
    }

    #[test]
    fn ambiguous_boundary_is_flagged() {
        let x = wrap(DMatrix::from_diagonal(&DVector::from_column_slice(&[3.0, -3.0, 1.0])));
        let eigs = spiked_eigs(&x, 1, None).unwrap();
        assert!(eigs.ambiguous_boundary);
        let x = wrap(DMatrix::from_diagonal(&DVector::from_column_slice(&[3.0, -2.0, 1.0])));
        let eigs = spiked_eigs(&x, 1, None).unwrap();
        assert!(!eigs.ambiguous_boundary);
    }

    #[test]
    fn sign_alignment_is_idempotent() {
        let p = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 0.7]);
        let (model, noise, _) = build_sbm(&[15, 15], &p, true).unwrap();
        let s = sample_data(&model, &noise, 11).unwrap();
        let a = spiked_eigs(&s, 2, Some(&model)).unwrap();
        for pair in &a.pairs {
            assert!(model.v().column(pair.k - 1).dot(&pair.vhat) >= 0.0);
            assert_relative_eq!(pair.vhat.norm(), 1.0, epsilon = 1e-10);
        }
        let b = spiked_eigs(&s, 2, Some(&model)).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.vhat, y.vhat);
        }
    }

    #[test]
    fn weyl_bound_on_sampled_matrices() {
        let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.4, 0.4, 0.8]);
        let (model, noise, _) = build_sbm(&[30, 30], &p, true).unwrap();
        for seed in 0..5 {
            let s = sample_data(&model, &noise, seed).unwrap();
            let w = &s.x - model.mean();
            let (wvals, _) = symmetric_eigen(&w);
            let wnorm = wvals.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            let eigs = spiked_eigs(&s, 2, Some(&model)).unwrap();
            for k in 1..=2 {
                assert!((eigs.pairs[k - 1].lambda - model.dk(k)).abs() <= wnorm + 1e-9);
            }
        }
    }
}
