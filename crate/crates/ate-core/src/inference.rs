//! Estimation-based spectral tests on observed adjacency data: density of a
//! planted subgraph, clustering power of an eigenvector, and rank inference
//! from diagonal residuals.
//!
//! These work on the data alone: wherever the theory uses `t_k` and
//! population moments, the tests substitute `lambda_k` and
//! `p_hat`-derived plug-ins.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{AteError, Result};
use crate::model::SampleMatrix;
use crate::moments::homogeneous_qf_variance_exact;
use crate::spectral::spiked_eigs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    LeftTail,
    TwoSided,
}

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub sided: Sidedness,
    /// reject? at the conventional levels 0.01 / 0.05 / 0.10
    pub decision_at: Vec<(f64, bool)>,
    /// estimated nuisance quantities (density, eigenvalues, ...)
    pub nuisance: BTreeMap<String, f64>,
}

impl TestResult {
    fn assemble(
        name: &str,
        statistic: f64,
        sided: Sidedness,
        nuisance: BTreeMap<String, f64>,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p_value = match sided {
            Sidedness::LeftTail => normal.cdf(statistic),
            Sidedness::TwoSided => 2.0 * normal.cdf(-statistic.abs()),
        };
        let decision_at =
            [0.01, 0.05, 0.10].iter().map(|&a| (a, p_value <= a)).collect();
        Self { name: name.into(), statistic, p_value, sided, decision_at, nuisance }
    }

    /// One-line CSV row: `name,statistic,p_value,sided`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.name,
            self.statistic,
            self.p_value,
            match self.sided {
                Sidedness::LeftTail => "left-tail",
                Sidedness::TwoSided => "two-sided",
            }
        )
    }
}

fn check_symmetric(x: &SampleMatrix) -> Result<usize> {
    let n = x.x.nrows();
    if x.x.ncols() != n {
        return Err(AteError::DimensionMismatch { expected: n, got: x.x.ncols() });
    }
    let asym = (&x.x - x.x.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(AteError::InvalidConfig(format!("matrix not symmetric ({asym:.2e})")));
    }
    Ok(n)
}

fn check_binary(x: &SampleMatrix) -> Result<()> {
    for v in x.x.iter() {
        if (v - 0.0).abs() > 1e-9 && (v - 1.0).abs() > 1e-9 {
            return Err(AteError::InvalidConfig(format!("matrix entry {v} is not 0/1")));
        }
    }
    Ok(())
}

/// Off-diagonal edge density `sum_{i != j} x_ij / (n (n-1))`.
fn density(x: &SampleMatrix) -> f64 {
    let n = x.x.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += x.x[(i, j)];
            }
        }
    }
    s / (n as f64 * (n as f64 - 1.0))
}

/// Density-test core shared by the subgraph and clustering-power tests:
/// the self-overlap statistic for spike k against the flat direction,
/// with `lambda_k` and `p_hat` plugged in for the population quantities.
fn flat_overlap_statistic(x: &SampleMatrix, k_total: usize, k: usize) -> Result<(f64, BTreeMap<String, f64>)> {
    let n = check_symmetric(x)?;
    if k == 0 || k > k_total || k_total >= n {
        return Err(AteError::SpikeIndexOutOfRange { k, k_max: k_total });
    }
    let p_hat = density(x);
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(AteError::DegenerateGraph { p_hat });
    }
    let eigs = spiked_eigs(x, k_total, None)?;
    let pair = &eigs.pairs[k - 1];
    // under the null the reference direction is 1/sqrt(n)
    let ones_overlap_raw: f64 = pair.vhat.iter().sum::<f64>() / (n as f64).sqrt();
    let overlap = ones_overlap_raw.abs();
    let lambda = pair.lambda;
    let nf = n as f64;
    let numerator = 2.0 * lambda * lambda * (overlap - 1.0) + nf * p_hat * (1.0 - p_hat);
    let var = homogeneous_qf_variance_exact(n, p_hat);
    if var <= 0.0 {
        return Err(AteError::DegenerateDenominator { value: var });
    }
    let t = numerator / var.sqrt();
    let mut nuisance = BTreeMap::new();
    nuisance.insert("p_hat".into(), p_hat);
    nuisance.insert(format!("lambda_{k}"), lambda);
    nuisance.insert("flat_overlap".into(), overlap);
    Ok((t, nuisance))
}

/// Tests whether a binary graph is a homogeneous random graph against the
/// presence of a denser planted subgraph. Left-tailed: the alternative pulls
/// the leading eigenvector away from the flat direction and the statistic
/// towards minus infinity.
///
/// The statistic follows the self-overlap CLT with `u = 1/sqrt(n)`, with the
/// exact homogeneous null variance plugged in.
pub fn dense_subgraph_test(x: &SampleMatrix) -> Result<TestResult> {
    check_symmetric(x)?;
    check_binary(x)?;
    let (t, nuisance) = flat_overlap_statistic(x, 1, 1)?;
    Ok(TestResult::assemble("dense-subgraph", t, Sidedness::LeftTail, nuisance))
}

/// Tests whether spike k carries clustering information: the null says the
/// k-th population eigenvector is the flat vector `1/sqrt(n)` (no power).
/// Two-sided.
pub fn cluster_power_test(x: &SampleMatrix, k_total: usize, k: usize) -> Result<TestResult> {
    let (t, nuisance) = flat_overlap_statistic(x, k_total, k)?;
    Ok(TestResult::assemble("cluster-power", t, Sidedness::TwoSided, nuisance))
}

/// Diagonal residuals after removing the top `k0` empirical spikes:
/// `w_hat_ii = x_ii - sum_{k <= k0} lambda_k vhat_k,i^2`.
fn diagonal_residuals(x: &SampleMatrix, k0: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = check_symmetric(x)?;
    if k0 == 0 || k0 >= n {
        return Err(AteError::SpikeIndexOutOfRange { k: k0, k_max: n - 1 });
    }
    let eigs = spiked_eigs(x, k0, None)?;
    let mut resid = Vec::with_capacity(n);
    for i in 0..n {
        let mut fitted = 0.0;
        for pair in &eigs.pairs {
            fitted += pair.lambda * pair.vhat[i] * pair.vhat[i];
        }
        resid.push(x.x[(i, i)] - fitted);
    }
    let lambdas = eigs.pairs.iter().map(|p| p.lambda).collect();
    Ok((resid, lambdas))
}

/// Rank test `H0: K = k0` against `K > k0` from the standardized sum of
/// diagonal residuals. Needs data that keeps its diagonal: with self loops
/// removed the residual diagonal carries the fit alone and the statistic is
/// not calibrated.
pub fn rank_test(x: &SampleMatrix, k0: usize) -> Result<TestResult> {
    let (resid, lambdas) = diagonal_residuals(x, k0)?;
    let sum: f64 = resid.iter().sum();
    let sum_sq: f64 = resid.iter().map(|r| r * r).sum();
    // an exact fit leaves only rounding noise of order eps * |lambda_1|
    let scale = lambdas[0].abs().max(1.0);
    if sum_sq <= resid.len() as f64 * (1e-12 * scale) * (1e-12 * scale) {
        return Err(AteError::ZeroResidualDiagonal);
    }
    let t = sum / sum_sq.sqrt();
    let mut nuisance = BTreeMap::new();
    nuisance.insert("k0".into(), k0 as f64);
    for (i, l) in lambdas.iter().enumerate() {
        nuisance.insert(format!("lambda_{}", i + 1), *l);
    }
    Ok(TestResult::assemble("rank", t, Sidedness::TwoSided, nuisance))
}

/// Which normal quantile bounds the confidence band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileRule {
    /// `|T| <= Phi^{-1}(1 - alpha)`, the construction as stated. Under exact
    /// normality a two-sided band at this quantile covers with probability
    /// `1 - 2 alpha`, not `1 - alpha`.
    OneMinusAlpha,
    /// `|T| <= Phi^{-1}(1 - alpha/2)`, the conventional two-sided band.
    OneMinusHalfAlpha,
}

/// All `k0 <= k_max` whose rank statistic stays inside the normal band.
/// A `k0` with an exactly zero residual diagonal fits perfectly and is
/// included.
pub fn rank_confidence_set(
    x: &SampleMatrix,
    k_max: usize,
    alpha: f64,
    rule: QuantileRule,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(AteError::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z = match rule {
        QuantileRule::OneMinusAlpha => normal.inverse_cdf(1.0 - alpha),
        QuantileRule::OneMinusHalfAlpha => normal.inverse_cdf(1.0 - alpha / 2.0),
    };
    let mut set = Vec::new();
    for k0 in 1..=k_max {
        match rank_test(x, k0) {
            Ok(result) => {
                if result.statistic.abs() <= z {
                    set.push(k0);
                }
            }
            Err(AteError::ZeroResidualDiagonal) => set.push(k0),
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_sbm, sample_data, SampleMatrix};
    use nalgebra::DMatrix;

    fn er_graph(n: usize, p: f64, seed: u64) -> SampleMatrix {
        let pm = DMatrix::from_row_slice(1, 1, &[p]);
        let (model, noise, _) = build_sbm(&[n], &pm, true).unwrap();
        sample_data(&model, &noise, seed).unwrap()
    }

    fn planted(n: usize, n1: usize, p: f64, q: f64, seed: u64) -> SampleMatrix {
        let pm = DMatrix::from_row_slice(2, 2, &[q, p, p, p]);
        let (model, noise, _) = build_sbm(&[n1, n - n1], &pm, true).unwrap();
        sample_data(&model, &noise, seed).unwrap()
    }

    fn sbm2(n_half: usize, r: f64, seed: u64) -> SampleMatrix {
        let pm = DMatrix::from_row_slice(2, 2, &[2.0 * r, r, r, 2.0 * r]);
        let (model, noise, _) = build_sbm(&[n_half, n_half], &pm, true).unwrap();
        sample_data(&model, &noise, seed).unwrap()
    }

    #[test]
    fn all_ones_graph_is_degenerate() {
        let n = 20;
        let x = SampleMatrix { x: DMatrix::from_element(n, n, 1.0), seed: 0, self_loops: true };
        assert!(matches!(dense_subgraph_test(&x), Err(AteError::DegenerateGraph { .. })));
        assert!(matches!(cluster_power_test(&x, 1, 1), Err(AteError::DegenerateGraph { .. })));
    }

    #[test]
    fn non_binary_matrix_rejected_for_subgraph_test() {
        let n = 10;
        let x = SampleMatrix { x: DMatrix::from_element(n, n, 0.5), seed: 0, self_loops: true };
        assert!(dense_subgraph_test(&x).is_err());
    }

    #[test]
    fn null_statistics_have_unit_scale() {
        // catches any miscalibrated denominator: the plug-in variance must
        // make the null statistic approximately standard normal
        let n = 400;
        let p = 0.15;
        let reps = 60;
        let mut ts = Vec::new();
        for seed in 0..reps {
            let x = er_graph(n, p, seed);
            ts.push(dense_subgraph_test(&x).unwrap().statistic);
        }
        let mean = ts.iter().sum::<f64>() / reps as f64;
        let sd = (ts.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (reps as f64 - 1.0))
            .sqrt();
        assert!(mean.abs() <= 0.6, "null mean {mean}");
        assert!((0.6..=1.5).contains(&sd), "null sd {sd}");
    }

    #[test]
    fn planted_subgraph_is_detected() {
        let mut rejections = 0;
        for seed in 0..20 {
            let x = planted(300, 60, 0.1, 0.5, 1000 + seed);
            let r = dense_subgraph_test(&x).unwrap();
            assert_eq!(r.sided, Sidedness::LeftTail);
            if r.p_value <= 0.05 {
                rejections += 1;
            }
        }
        assert!(rejections >= 18, "power too low: {rejections}/20");
    }

    #[test]
    fn cluster_power_flat_spike_accepts_and_block_spike_rejects() {
        // v1 = 1/sqrt(n) for equal blocks: k = 1 accepts, k = 2 rejects
        let mut accept1 = 0;
        let mut reject2 = 0;
        let reps = 20;
        for seed in 0..reps {
            let x = sbm2(150, 0.1, 500 + seed);
            let r1 = cluster_power_test(&x, 2, 1).unwrap();
            if r1.p_value > 0.05 {
                accept1 += 1;
            }
            let r2 = cluster_power_test(&x, 2, 2).unwrap();
            if r2.p_value <= 0.05 {
                reject2 += 1;
            }
        }
        assert!(accept1 >= 17, "size failure: {accept1}/{reps}");
        assert!(reject2 >= 19, "power failure: {reject2}/{reps}");
    }

    #[test]
    fn rank_test_zero_residual_on_exact_mean() {
        let pm = DMatrix::from_row_slice(1, 1, &[0.6]);
        let (model, _, _) = build_sbm(&[12], &pm, true).unwrap();
        let x = SampleMatrix { x: model.mean(), seed: 0, self_loops: true };
        assert!(matches!(rank_test(&x, 1), Err(AteError::ZeroResidualDiagonal)));
        // and the confidence set counts a perfect fit as covered
        let set = rank_confidence_set(&x, 3, 0.05, QuantileRule::OneMinusAlpha).unwrap();
        assert!(set.contains(&1));
    }

    #[test]
    fn rank_test_null_scale_and_power() {
        let reps = 40;
        let mut ts = Vec::new();
        let mut reject_under = 0;
        for seed in 0..reps {
            let x = sbm2(150, 0.2, 900 + seed);
            ts.push(rank_test(&x, 2).unwrap().statistic);
            if rank_test(&x, 1).unwrap().p_value <= 0.05 {
                reject_under += 1;
            }
        }
        let mean = ts.iter().sum::<f64>() / reps as f64;
        let sd = (ts.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (reps as f64 - 1.0))
            .sqrt();
        assert!(mean.abs() <= 0.6, "null mean {mean}");
        assert!((0.6..=1.5).contains(&sd), "null sd {sd}");
        assert!(reject_under >= 38, "misspecified rank power {reject_under}/{reps}");
    }

    #[test]
    fn confidence_set_contains_truth_on_a_strong_instance() {
        let x = sbm2(150, 0.3, 7);
        let set = rank_confidence_set(&x, 4, 0.05, QuantileRule::OneMinusAlpha).unwrap();
        assert!(set.contains(&2), "set {set:?} misses the true rank");
        // the stricter conventional band is wider, so it also contains it
        let set2 = rank_confidence_set(&x, 4, 0.05, QuantileRule::OneMinusHalfAlpha).unwrap();
        assert!(set2.contains(&2));
        for k0 in &set {
            assert!(set2.contains(k0));
        }
    }

    #[test]
    fn tests_are_permutation_equivariant() {
        let x = sbm2(40, 0.25, 3);
        let n = 80;
        // deterministic permutation: reverse
        let perm: Vec<usize> = (0..n).rev().collect();
        let px = DMatrix::from_fn(n, n, |i, j| x.x[(perm[i], perm[j])]);
        let px = SampleMatrix { x: px, seed: 0, self_loops: true };
        let a = dense_subgraph_test(&x).unwrap();
        let b = dense_subgraph_test(&px).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-10);
        let a = rank_test(&x, 2).unwrap();
        let b = rank_test(&px, 2).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-10);
        let a = cluster_power_test(&x, 2, 2).unwrap();
        let b = cluster_power_test(&px, 2, 2).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-10);
    }

    #[test]
    fn decisions_match_p_values() {
        let x = er_graph(200, 0.2, 5);
        let r = dense_subgraph_test(&x).unwrap();
        assert!((0.0..=1.0).contains(&r.p_value));
        for (alpha, reject) in &r.decision_at {
            assert_eq!(*reject, r.p_value <= *alpha);
        }
    }
}
