//! Noise-strength scale `alpha_n`, moment matrices `E[W^l]`, and the exact
//! and Monte Carlo variance functionals behind every normalized statistic.
//!
//! Exact closed forms exist for l <= 2 and for the variances of the linear
//! form `x' W y` and the quadratic form `x' W^2 y`. Third and fourth moment
//! matrices are estimated by averaging powers of independently sampled noise
//! copies, mirroring the simulation protocol the statistics are checked
//! against.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{AteError, Result};
use crate::model::{sample_noise, NoiseFamily, NoiseProfile};

/// Default number of noise copies for Monte Carlo moment estimation.
pub const DEFAULT_MC_DRAWS: usize = 2000;

/// Fixed number of accumulation batches. Draws are split by index, each batch
/// reduces sequentially, and batch partials are combined in batch order, so
/// results do not depend on the worker count.
const MC_BATCHES: usize = 8;

const UNIT_TOL: f64 = 1e-8;

/// Noise-strength scale `||E (W - EW)^2||^{1/2}`.
///
/// For independent entries the centered second moment matrix is diagonal with
/// entries `sum_k var(w_ik)`, so the spectral norm is the largest row sum of
/// variances.
pub fn alpha_n(noise: &NoiseProfile) -> f64 {
    let n = noise.n();
    let mut max_row = 0.0f64;
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += noise.var(i, k);
        }
        max_row = max_row.max(s);
    }
    max_row.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum MomentMethod {
    Exact,
    MonteCarlo { draws: usize, seed: u64 },
}

/// Precomputed moment matrices `E[W^l]`, l = 0..=l_max, plus `alpha_n`.
#[derive(Debug, Clone)]
pub struct MomentTable {
    l_max: usize,
    ew: Vec<DMatrix<f64>>,
    se: Vec<Option<DMatrix<f64>>>,
    methods: Vec<MomentMethod>,
    alpha: f64,
}

impl MomentTable {
    /// Builds the table: l <= 2 exact, l in {3, 4} by Monte Carlo over
    /// `mc_draws` noise copies (shared across the two orders).
    pub fn build(noise: &NoiseProfile, l_max: usize, mc_draws: usize, seed: u64) -> Result<Self> {
        if !(2..=4).contains(&l_max) {
            return Err(AteError::InvalidConfig(format!(
                "truncation order {l_max} unsupported (use 2, 3 or 4)"
            )));
        }
        let n = noise.n();
        let mut ew = vec![
            DMatrix::identity(n, n),
            DMatrix::from_diagonal(&noise.diag_mean),
            expected_square(noise),
        ];
        let mut se = vec![None, None, None];
        let mut methods = vec![MomentMethod::Exact; 3];
        if l_max >= 3 {
            let (m3, s3, m4, s4) = mc_powers(noise, mc_draws, seed)?;
            ew.push(m3);
            se.push(Some(s3));
            methods.push(MomentMethod::MonteCarlo { draws: mc_draws, seed });
            if l_max == 4 {
                ew.push(m4);
                se.push(Some(s4));
                methods.push(MomentMethod::MonteCarlo { draws: mc_draws, seed });
            }
        }
        Ok(Self { l_max, ew, se, methods, alpha: alpha_n(noise) })
    }

    /// Table of a noiseless profile: `E W^0 = I` and every higher moment zero.
    pub fn zero(n: usize, l_max: usize) -> Self {
        let mut ew = vec![DMatrix::identity(n, n)];
        for _ in 1..=l_max {
            ew.push(DMatrix::zeros(n, n));
        }
        Self {
            l_max,
            ew,
            se: vec![None; l_max + 1],
            methods: vec![MomentMethod::Exact; l_max + 1],
            alpha: 0.0,
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn ew(&self, l: usize) -> Result<&DMatrix<f64>> {
        self.ew.get(l).ok_or(AteError::BeyondTruncationOrder { l, l_max: self.l_max })
    }

    pub fn standard_error(&self, l: usize) -> Option<&DMatrix<f64>> {
        self.se.get(l).and_then(|s| s.as_ref())
    }

    pub fn method(&self, l: usize) -> Option<&MomentMethod> {
        self.methods.get(l)
    }

    pub fn n(&self) -> usize {
        self.ew[0].nrows()
    }
}

/// `E[W^l]` for a single order: exact for l <= 2, Monte Carlo for l in {3, 4}
/// (default 2000 draws). Returns the estimate and, for Monte Carlo orders,
/// the entrywise standard errors.
pub fn expected_power(
    noise: &NoiseProfile,
    l: usize,
    mc_draws: Option<usize>,
    seed: u64,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    match l {
        0 => Ok((DMatrix::identity(noise.n(), noise.n()), None)),
        1 => Ok((DMatrix::from_diagonal(&noise.diag_mean), None)),
        2 => Ok((expected_square(noise), None)),
        3 | 4 => {
            let draws = mc_draws.unwrap_or(DEFAULT_MC_DRAWS);
            let (m3, s3, m4, s4) = mc_powers(noise, draws, seed)?;
            if l == 3 {
                Ok((m3, Some(s3)))
            } else {
                Ok((m4, Some(s4)))
            }
        }
        _ => Err(AteError::BeyondTruncationOrder { l, l_max: 4 }),
    }
}

/// Exact `E[W^2]`: zero off the diagonal (independent centered entries) and
/// `sum_k E[w_ik^2]` on it, where the diagonal entry contributes
/// `var(w_ii) + (E w_ii)^2`.
fn expected_square(noise: &NoiseProfile) -> DMatrix<f64> {
    let n = noise.n();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..n {
            s += noise.var(i, k);
            if k == i {
                s += noise.diag_mean[i] * noise.diag_mean[i];
            }
        }
        m[(i, i)] = s;
    }
    m
}

/// Monte Carlo `E[W^3]` and `E[W^4]` from shared draws, with entrywise
/// standard errors of each mean.
fn mc_powers(
    noise: &NoiseProfile,
    draws: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if draws < 2 {
        return Err(AteError::InvalidConfig("need at least 2 Monte Carlo draws".into()));
    }
    if matches!(noise.family, NoiseFamily::MomentsOnly) {
        return Err(AteError::SamplerUnavailable);
    }
    let n = noise.n();

    struct Partial {
        s3: DMatrix<f64>,
        q3: DMatrix<f64>,
        s4: DMatrix<f64>,
        q4: DMatrix<f64>,
    }

    let batch_bounds: Vec<(usize, usize)> = (0..MC_BATCHES)
        .map(|b| (b * draws / MC_BATCHES, (b + 1) * draws / MC_BATCHES))
        .collect();

    let partials: Vec<Partial> = batch_bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut p = Partial {
                s3: DMatrix::zeros(n, n),
                q3: DMatrix::zeros(n, n),
                s4: DMatrix::zeros(n, n),
                q4: DMatrix::zeros(n, n),
            };
            for draw in lo..hi {
                let w = sample_noise(noise, seed ^ (draw as u64)).expect("sampler checked above");
                let w2 = &w * &w;
                let w3 = &w2 * &w;
                let w4 = &w2 * &w2;
                p.s3 += &w3;
                p.q3 += w3.component_mul(&w3);
                p.s4 += &w4;
                p.q4 += w4.component_mul(&w4);
            }
            p
        })
        .collect();

    let mut s3 = DMatrix::zeros(n, n);
    let mut q3 = DMatrix::zeros(n, n);
    let mut s4 = DMatrix::zeros(n, n);
    let mut q4 = DMatrix::zeros(n, n);
    for p in partials {
        s3 += p.s3;
        q3 += p.q3;
        s4 += p.s4;
        q4 += p.q4;
    }
    let m = draws as f64;
    let mean3 = s3 / m;
    let mean4 = s4 / m;
    let se3 = DMatrix::from_fn(n, n, |i, j| se_of_mean(q3[(i, j)], mean3[(i, j)], m));
    let se4 = DMatrix::from_fn(n, n, |i, j| se_of_mean(q4[(i, j)], mean4[(i, j)], m));
    Ok((mean3, se3, mean4, se4))
}

fn se_of_mean(sum_sq: f64, mean: f64, m: f64) -> f64 {
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    (var / m).sqrt()
}

fn check_unit(v: &DVector<f64>) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(AteError::NonUnitVector { norm });
    }
    Ok(())
}

/// Exact `var(x' W y)` for unit vectors:
/// `sum_{i<j} sigma_ij^2 (x_i y_j + x_j y_i)^2 + sum_i var(w_ii) x_i^2 y_i^2`.
pub fn bilinear_variance(x: &DVector<f64>, y: &DVector<f64>, noise: &NoiseProfile) -> Result<f64> {
    check_unit(x)?;
    check_unit(y)?;
    Ok(bilinear_variance_raw(x, y, noise))
}

/// Same formula without the unit-norm gate; valid for arbitrary vectors.
pub fn bilinear_variance_raw(x: &DVector<f64>, y: &DVector<f64>, noise: &NoiseProfile) -> f64 {
    let n = noise.n();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = x[i] * y[j] + x[j] * y[i];
            s += noise.var(i, j) * a * a;
        }
        s += noise.var(i, i) * x[i] * x[i] * y[i] * y[i];
    }
    s
}

/// Exact `v' E[W^2] v` for a unit vector.
pub fn quadratic_form_mean(v: &DVector<f64>, noise: &NoiseProfile) -> Result<f64> {
    check_unit(v)?;
    let m = expected_square(noise);
    let mut s = 0.0;
    for i in 0..noise.n() {
        s += v[i] * v[i] * m[(i, i)];
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
pub enum QfVarianceMode {
    /// Exact closed form; requires a homogeneous Bernoulli profile with self
    /// loops and `v = 1/sqrt(n)`.
    HomogeneousExact,
    MonteCarlo { draws: usize, seed: u64 },
}

/// `var(v' W^2 v)`, by closed form or by the sample variance over noise
/// copies. Returns the value and, for Monte Carlo, its standard error.
pub fn quadratic_form_variance(
    v: &DVector<f64>,
    noise: &NoiseProfile,
    mode: QfVarianceMode,
) -> Result<(f64, Option<f64>)> {
    check_unit(v)?;
    match mode {
        QfVarianceMode::HomogeneousExact => {
            let p = homogeneous_p(noise)?;
            let n = noise.n();
            let inv_sqrt = 1.0 / (n as f64).sqrt();
            if v.iter().any(|&c| (c - inv_sqrt).abs() > UNIT_TOL) {
                return Err(AteError::InvalidConfig(
                    "homogeneous-exact variance needs v = 1/sqrt(n)".into(),
                ));
            }
            Ok((homogeneous_qf_variance_exact(n, p), None))
        }
        QfVarianceMode::MonteCarlo { draws, seed } => {
            if draws < 8 {
                return Err(AteError::TooFewSamples { min: 8, got: draws });
            }
            let samples: Vec<f64> = (0..draws)
                .into_par_iter()
                .map(|i| {
                    let w = sample_noise(noise, seed ^ (i as u64)).expect("family validated");
                    let u = &w * v;
                    u.dot(&u)
                })
                .collect();
            let m = draws as f64;
            let mean = samples.iter().sum::<f64>() / m;
            let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0);
            // standard error of a sample variance, normal approximation
            let se = var * (2.0 / (m - 1.0)).sqrt();
            Ok((var, Some(se)))
        }
    }
}

/// Exact `var(v1' W^2 v1)` for `v1 = 1/sqrt(n)` and homogeneous Bernoulli(p)
/// entries on and above the diagonal.
///
/// Derived from the column-sum representation `v1' W^2 v1 = n^{-1} sum_k S_k^2`
/// with `S_k = sum_i w_ik`:
/// `var = E[w^4] + (2n-3) sigma^4 + (1 - 1/n) kappa` where
/// `sigma^2 = p(1-p)`, `E[w^4] = sigma^2 (p^3 + q^3)`, `kappa = E[w^4] - sigma^4`.
pub fn homogeneous_qf_variance_exact(n: usize, p: f64) -> f64 {
    let nf = n as f64;
    let q = 1.0 - p;
    let s2 = p * q;
    let w4 = s2 * (p.powi(3) + q.powi(3));
    let kappa = w4 - s2 * s2;
    w4 + (2.0 * nf - 3.0) * s2 * s2 + (1.0 - 1.0 / nf) * kappa
}

/// Reference plug-in expression `p(1-p) [2(n-1) + p^3 + (1-p)^3]` used by the
/// original density-test construction. It scales like `sigma^2` where the
/// exact variance of `v1' W^2 v1` scales like `sigma^4`, so it badly
/// overestimates the spread for sparse graphs; prefer
/// [`homogeneous_qf_variance_exact`] for calibrated tests.
pub fn homogeneous_qf_variance_reference(n: usize, p: f64) -> f64 {
    let q = 1.0 - p;
    p * q * (2.0 * (n as f64 - 1.0) + p.powi(3) + q.powi(3))
}

fn homogeneous_p(noise: &NoiseProfile) -> Result<f64> {
    let p = match &noise.family {
        NoiseFamily::CenteredBernoulli { p } => p,
        _ => return Err(AteError::HeterogeneousProfile),
    };
    if !noise.self_loops {
        return Err(AteError::HeterogeneousProfile);
    }
    let p0 = p[(0, 0)];
    let n = noise.n();
    for i in 0..n {
        for j in 0..n {
            if (p[(i, j)] - p0).abs() > 1e-12 {
                return Err(AteError::HeterogeneousProfile);
            }
        }
    }
    Ok(p0)
}

/// Prefix machinery shared by the conditional-variance evaluator and its
/// exact mean. For each ordered pair (k, i) with k <= i the martingale
/// coefficient is
/// `z_ki = sum_{l<k} w_il a_kl + sum_{l<i} w_kl a_il + (1 - d_ki) E[w_ii] a_ki`
/// with `a_kl = x_k y_l + y_k x_l` (so both inner sums coincide at k = i).
struct PairGeometry<'a> {
    x: &'a DVector<f64>,
    y: &'a DVector<f64>,
}

impl PairGeometry<'_> {
    fn a(&self, k: usize, l: usize) -> f64 {
        self.x[k] * self.y[l] + self.y[k] * self.x[l]
    }

    fn c(&self, k: usize, i: usize) -> f64 {
        self.x[k] * self.y[k] + self.x[i] * self.y[i]
    }
}

/// Evaluates the conditional-variance random variable of `x'(W^2 - EW^2)y`
/// on a realized noise matrix. Diagonal pairs use the half-entry convention
/// `omega = w/2`, which scales their (sigma^2, gamma, kappa) coefficients by
/// 1/4 relative to the stored central moments.
pub fn w2_condvar_eval(
    x: &DVector<f64>,
    y: &DVector<f64>,
    noise: &NoiseProfile,
    w: &DMatrix<f64>,
) -> f64 {
    let n = noise.n();
    let g = PairGeometry { x, y };

    // cum_y[k] = sum_{l<i} w_kl y_l and cum_x likewise, maintained while i
    // sweeps upward; row prefixes for the current i are rebuilt on the fly.
    let mut cum_y = vec![0.0f64; n];
    let mut cum_x = vec![0.0f64; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut row_y = 0.0; // sum_{l<k} w_il y_l
        let mut row_x = 0.0;
        for k in 0..=i {
            let z = if k < i {
                x[k] * row_y + y[k] * row_x
                    + x[i] * cum_y[k]
                    + y[i] * cum_x[k]
                    + noise.diag_mean[i] * g.a(k, i)
            } else {
                2.0 * (x[k] * row_y + y[k] * row_x)
            };
            let (s2, gamma, kappa) = if k == i {
                (
                    noise.sigma2[(k, k)] / 4.0,
                    noise.gamma3[(k, k)] / 4.0,
                    noise.kappa4[(k, k)] / 4.0,
                )
            } else {
                (noise.sigma2[(k, i)], noise.gamma3[(k, i)], noise.kappa4[(k, i)])
            };
            let c = if k == i { 2.0 * x[k] * y[k] } else { g.c(k, i) };
            total += s2 * z * z + 2.0 * gamma * c * z + kappa * c * c;
            row_y += w[(i, k)] * y[k];
            row_x += w[(i, k)] * x[k];
        }
        for k in 0..n {
            cum_y[k] += w[(k, i)] * y[i];
            cum_x[k] += w[(k, i)] * x[i];
        }
    }
    total
}

/// Exact mean of [`w2_condvar_eval`]: the expected conditional variance
/// `s^2_{x,y}`. By martingale orthogonality this equals
/// `var(x'(W^2 - EW^2)y)` exactly, which the enumeration oracle confirms.
pub fn s2_xy(x: &DVector<f64>, y: &DVector<f64>, noise: &NoiseProfile) -> Result<f64> {
    check_unit(x)?;
    check_unit(y)?;
    Ok(s2_xy_raw(x, y, noise))
}

pub fn s2_xy_raw(x: &DVector<f64>, y: &DVector<f64>, noise: &NoiseProfile) -> f64 {
    let n = noise.n();
    let g = PairGeometry { x, y };

    // Column prefixes across rows k: sums of sigma2[k,l] * {y_l^2, x_l y_l,
    // x_l^2} over l < i. The l = k element enters with the stored diagonal
    // variance, which is exactly var(w_kk)'s contribution to E[z^2].
    let mut cy = vec![0.0f64; n];
    let mut cxy = vec![0.0f64; n];
    let mut cx = vec![0.0f64; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut ry = 0.0; // sum_{l<k} sigma2[i,l] y_l^2
        let mut rxy = 0.0;
        let mut rx = 0.0;
        for k in 0..=i {
            if k < i {
                let var_first = x[k] * x[k] * ry + 2.0 * x[k] * y[k] * rxy + y[k] * y[k] * rx;
                let var_second =
                    x[i] * x[i] * cy[k] + 2.0 * x[i] * y[i] * cxy[k] + y[i] * y[i] * cx[k];
                let mean_z = g.a(k, i) * (noise.diag_mean[i] + noise.diag_mean[k]);
                let e_z2 = var_first + var_second + mean_z * mean_z;
                let c = g.c(k, i);
                total += noise.sigma2[(k, i)] * e_z2
                    + 2.0 * noise.gamma3[(k, i)] * c * mean_z
                    + noise.kappa4[(k, i)] * c * c;
            } else {
                // diagonal pair: z = 2 sum_{l<k} w_kl a_kl with zero mean
                let e_z2 =
                    4.0 * (x[k] * x[k] * ry + 2.0 * x[k] * y[k] * rxy + y[k] * y[k] * rx);
                let c = 2.0 * x[k] * y[k];
                total += noise.sigma2[(k, k)] / 4.0 * e_z2 + noise.kappa4[(k, k)] / 4.0 * c * c;
            }
            let s = noise.sigma2[(i, k)];
            ry += s * y[k] * y[k];
            rxy += s * x[k] * y[k];
            rx += s * x[k] * x[k];
        }
        for k in 0..n {
            let s = noise.sigma2[(k, i)];
            cy[k] += s * y[i] * y[i];
            cxy[k] += s * x[i] * y[i];
            cx[k] += s * x[i] * x[i];
        }
    }
    total
}

/// Monte Carlo estimate of `kappa_{x,y}`, the variance of the conditional
/// variance, as the sample variance of [`w2_condvar_eval`] over noise copies.
/// Returns the estimate and its standard error.
pub fn kappa_xy(
    x: &DVector<f64>,
    y: &DVector<f64>,
    noise: &NoiseProfile,
    mc_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_unit(x)?;
    check_unit(y)?;
    if mc_draws < 8 {
        return Err(AteError::TooFewSamples { min: 8, got: mc_draws });
    }
    if matches!(noise.family, NoiseFamily::MomentsOnly) {
        return Err(AteError::SamplerUnavailable);
    }
    let samples: Vec<f64> = (0..mc_draws)
        .into_par_iter()
        .map(|i| {
            let w = sample_noise(noise, seed ^ (i as u64)).expect("family validated");
            w2_condvar_eval(x, y, noise, &w)
        })
        .collect();
    let m = mc_draws as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0);
    Ok((var, var * (2.0 / (m - 1.0)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_noise;
    use crate::oracle;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn homogeneous(n: usize, p: f64) -> NoiseProfile {
        NoiseProfile::centered_bernoulli(DMatrix::from_element(n, n, p), true).unwrap()
    }

    fn unit(v: &[f64]) -> DVector<f64> {
        let v = DVector::from_column_slice(v);
        let n = v.norm();
        v / n
    }

    #[test]
    fn alpha_n_closed_forms() {
        assert_eq!(alpha_n(&NoiseProfile::zero(5)), 0.0);
        // classical convention: off-diagonal variance 1, diagonal variance 2
        let w = NoiseProfile::unit_wigner(50);
        assert_relative_eq!(alpha_n(&w), (51.0f64).sqrt(), epsilon = 1e-12);
        // homogeneous Bernoulli with self loops
        let b = homogeneous(100, 0.3);
        assert_relative_eq!(alpha_n(&b), (100.0f64 * 0.3 * 0.7).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn expected_square_matches_enumeration() {
        let noise = homogeneous(3, 0.5);
        let exact = expected_power(&noise, 2, None, 0).unwrap().0;
        for i in 0..3 {
            for j in 0..3 {
                let (mean, _) = oracle::enumerate(&noise, |w| (w * w)[(i, j)]);
                assert_relative_eq!(exact[(i, j)], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn expected_square_heterogeneous_vs_enumeration() {
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[0.2, 0.5, 0.7, 0.5, 0.4, 0.1, 0.7, 0.1, 0.6],
        );
        for self_loops in [true, false] {
            let noise = NoiseProfile::centered_bernoulli(p.clone(), self_loops).unwrap();
            let exact = expected_power(&noise, 2, None, 0).unwrap().0;
            for i in 0..3 {
                for j in 0..3 {
                    let (mean, _) = oracle::enumerate(&noise, |w| (w * w)[(i, j)]);
                    assert_relative_eq!(exact[(i, j)], mean, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn mc_third_power_within_standard_errors_of_enumeration() {
        let noise = homogeneous(3, 0.5);
        let (m3, se3) = expected_power(&noise, 3, Some(4000), 17).unwrap();
        let se3 = se3.unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (truth, _) = oracle::enumerate(&noise, |w| (w * w * w)[(i, j)]);
                let err = (m3[(i, j)] - truth).abs();
                assert!(
                    err <= 4.0 * se3[(i, j)] + 1e-12,
                    "entry ({i},{j}): err {err:.3e} vs 4 se {:.3e}",
                    4.0 * se3[(i, j)]
                );
            }
        }
    }

    #[test]
    fn zero_profile_moments_vanish() {
        let noise = NoiseProfile::zero(4);
        for l in 1..=4 {
            let (m, _) = expected_power(&noise, l, Some(16), 3).unwrap();
            assert!(m.abs().max() <= 1e-15, "l = {l}");
        }
        let err = expected_power(&noise, 5, None, 0).unwrap_err();
        assert!(matches!(err, AteError::BeyondTruncationOrder { .. }));
    }

    #[test]
    fn moment_table_deterministic_and_consistent() {
        let noise = homogeneous(8, 0.4);
        let a = MomentTable::build(&noise, 4, 64, 5).unwrap();
        let b = MomentTable::build(&noise, 4, 64, 5).unwrap();
        for l in 0..=4 {
            assert_eq!(a.ew(l).unwrap(), b.ew(l).unwrap());
        }
        assert_eq!(a.method(3), Some(&MomentMethod::MonteCarlo { draws: 64, seed: 5 }));
        assert!(a.ew(5).is_err());
    }

    #[test]
    fn bilinear_variance_wigner_convention_is_two() {
        // sigma = 1 off-diagonal, diagonal variance 2: var(v' W v) = 2 for any unit v.
        let noise = NoiseProfile::unit_wigner(7);
        let v = unit(&[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0]);
        assert_relative_eq!(bilinear_variance(&v, &v, &noise).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_variance_vs_enumeration_and_symmetry() {
        let noise = homogeneous(3, 0.5);
        let e1 = unit(&[1.0, 0.0, 0.0]);
        let (mean, var) = oracle::enumerate(&noise, |w| e1.dot(&(w * &e1)));
        assert!(mean.abs() < 1e-15);
        let exact = bilinear_variance(&e1, &e1, &noise).unwrap();
        assert_relative_eq!(exact, var, epsilon = 1e-12);
        assert_relative_eq!(exact, 0.25, epsilon = 1e-12);

        let x = unit(&[1.0, 2.0, -1.0]);
        let y = unit(&[0.5, -1.0, 2.0]);
        let (_, var_xy) = oracle::enumerate(&noise, |w| x.dot(&(w * &y)));
        assert_relative_eq!(bilinear_variance(&x, &y, &noise).unwrap(), var_xy, epsilon = 1e-12);
        assert_relative_eq!(
            bilinear_variance(&x, &y, &noise).unwrap(),
            bilinear_variance(&y, &x, &noise).unwrap(),
            epsilon = 1e-15
        );
        assert!(bilinear_variance(&(2.0 * &x), &y, &noise).is_err());
        assert_eq!(bilinear_variance_raw(&x, &y, &NoiseProfile::zero(3)), 0.0);
    }

    #[test]
    fn bilinear_variance_permutation_invariance() {
        let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.7, 0.5, 0.4, 0.1, 0.7, 0.1, 0.6]);
        let noise = NoiseProfile::centered_bernoulli(p.clone(), true).unwrap();
        let x = unit(&[1.0, 2.0, 3.0]);
        let y = unit(&[-1.0, 0.5, 1.0]);
        let base = bilinear_variance(&x, &y, &noise).unwrap();
        // permute coordinates (2 0 1) simultaneously in vectors and profile
        let perm = [2usize, 0, 1];
        let px = DVector::from_fn(3, |i, _| x[perm[i]]);
        let py = DVector::from_fn(3, |i, _| y[perm[i]]);
        let pp = DMatrix::from_fn(3, 3, |i, j| p[(perm[i], perm[j])]);
        let pnoise = NoiseProfile::centered_bernoulli(pp, true).unwrap();
        assert_relative_eq!(bilinear_variance(&px, &py, &pnoise).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_form_mean_examples() {
        let n = 100;
        let p = 0.3;
        let noise = homogeneous(n, p);
        let v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let m = quadratic_form_mean(&v, &noise).unwrap();
        assert_relative_eq!(m, n as f64 * p * (1.0 - p), epsilon = 1e-9);

        let zero = NoiseProfile::zero(4);
        let v0 = unit(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(quadratic_form_mean(&v0, &zero).unwrap(), 0.0);

        let small = homogeneous(3, 0.5);
        let e1 = unit(&[1.0, 0.0, 0.0]);
        let (truth, _) = oracle::enumerate(&small, |w| e1.dot(&((w * w) * &e1)));
        assert_relative_eq!(quadratic_form_mean(&e1, &small).unwrap(), truth, epsilon = 1e-12);
        assert_relative_eq!(truth, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_form_variance_exact_matches_enumeration() {
        let noise = homogeneous(3, 0.5);
        let v = DVector::from_element(3, 1.0 / 3.0f64.sqrt());
        let (_, truth) = oracle::enumerate(&noise, |w| v.dot(&((w * w) * &v)));
        let (exact, _) = quadratic_form_variance(&v, &noise, QfVarianceMode::HomogeneousExact).unwrap();
        assert_relative_eq!(exact, truth, epsilon = 1e-12);
        // the closed form and the martingale mean agree with the truth
        assert_relative_eq!(s2_xy(&v, &v, &noise).unwrap(), truth, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_form_variance_mc_agrees_with_enumeration() {
        let noise = homogeneous(3, 0.5);
        let v = DVector::from_element(3, 1.0 / 3.0f64.sqrt());
        let (_, truth) = oracle::enumerate(&noise, |w| v.dot(&((w * w) * &v)));
        let (mc, _) =
            quadratic_form_variance(&v, &noise, QfVarianceMode::MonteCarlo { draws: 200_000, seed: 2 })
                .unwrap();
        assert!((mc - truth).abs() / truth <= 0.01, "mc {mc} vs {truth}");
    }

    #[test]
    fn quadratic_form_variance_mode_gates() {
        let hetero = NoiseProfile::centered_bernoulli(
            DMatrix::from_row_slice(2, 2, &[0.2, 0.5, 0.5, 0.2]),
            true,
        )
        .unwrap();
        let v = DVector::from_element(2, 1.0 / 2.0f64.sqrt());
        assert!(matches!(
            quadratic_form_variance(&v, &hetero, QfVarianceMode::HomogeneousExact),
            Err(AteError::HeterogeneousProfile)
        ));
        let zero = NoiseProfile::zero(3);
        let v3 = DVector::from_element(3, 1.0 / 3.0f64.sqrt());
        let (var, _) = quadratic_form_variance(
            &v3,
            &zero,
            QfVarianceMode::MonteCarlo { draws: 16, seed: 0 },
        )
        .unwrap();
        assert_eq!(var, 0.0);
    }

    #[test]
    fn reference_variance_formula_value() {
        // p = 0.1, n = 1000: 0.09 * [2*999 + 0.001 + 0.729]
        let v = homogeneous_qf_variance_reference(1000, 0.1);
        assert_relative_eq!(v, 179.8857, epsilon = 1e-10);
    }

    #[test]
    fn s2_equals_enumerated_expected_conditional_variance() {
        let noise = homogeneous(3, 0.5);
        let x = unit(&[1.0, -1.0, 2.0]);
        let y = unit(&[0.3, 1.0, -0.5]);
        let (mean_cv, _) = oracle::enumerate(&noise, |w| w2_condvar_eval(&x, &y, &noise, w));
        assert_relative_eq!(s2_xy(&x, &y, &noise).unwrap(), mean_cv, max_relative = 1e-10);

        // and the same with a heterogeneous profile, with and without loops
        let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.7, 0.5, 0.4, 0.1, 0.7, 0.1, 0.6]);
        for self_loops in [true, false] {
            let hetero = NoiseProfile::centered_bernoulli(p.clone(), self_loops).unwrap();
            let (mean_cv, _) = oracle::enumerate(&hetero, |w| w2_condvar_eval(&x, &y, &hetero, w));
            assert_relative_eq!(s2_xy(&x, &y, &hetero).unwrap(), mean_cv, max_relative = 1e-10);
        }
    }

    #[test]
    fn s2_equals_variance_of_quadratic_form() {
        // martingale orthogonality: E[conditional variance] is the variance
        let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.7, 0.5, 0.4, 0.1, 0.7, 0.1, 0.6]);
        let x = unit(&[1.0, -1.0, 2.0]);
        let y = unit(&[0.3, 1.0, -0.5]);
        for self_loops in [true, false] {
            let noise = NoiseProfile::centered_bernoulli(p.clone(), self_loops).unwrap();
            let (_, var_qf) = oracle::enumerate(&noise, |w| x.dot(&((w * w) * &y)));
            assert_relative_eq!(s2_xy(&x, &y, &noise).unwrap(), var_qf, max_relative = 1e-10);
        }
    }

    #[test]
    fn s2_and_kappa_vanish_for_zero_noise() {
        let noise = NoiseProfile::zero(3);
        let v = DVector::from_element(3, 1.0 / 3.0f64.sqrt());
        assert_eq!(s2_xy(&v, &v, &noise).unwrap(), 0.0);
        let (k, _) = kappa_xy(&v, &v, &noise, 16, 0).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn kappa_mc_consistent_with_enumeration() {
        let noise = homogeneous(3, 0.5);
        let x = unit(&[1.0, -1.0, 2.0]);
        let y = unit(&[0.3, 1.0, -0.5]);
        let (_, truth) = oracle::enumerate(&noise, |w| w2_condvar_eval(&x, &y, &noise, w));
        let (kap, se) = kappa_xy(&x, &y, &noise, 60_000, 4).unwrap();
        assert!(
            (kap - truth).abs() <= 5.0 * se + 0.01 * truth.abs(),
            "kappa {kap} vs enumerated {truth} (se {se})"
        );
    }

    #[test]
    fn remark_band_for_homogeneous_s2_at_p_half() {
        // s^2_{v,v} ~ 2 n p^2(1-p)^2, inside the [np(1-p), 2np(1-p)] band
        // only at p = 1/2 where 2 p(1-p) = 1/2; allow finite-n fuzz.
        let n = 300;
        let p = 0.5;
        let noise = homogeneous(n, p);
        let v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let s2 = s2_xy(&v, &v, &noise).unwrap();
        let scale = n as f64 * p * (1.0 - p);
        let ratio = s2 / scale;
        // the exact ratio is (1 - 1/n^2)/2, a hair under the asymptotic band
        // edge, so allow O(1/n) fuzz on the lower end
        let fuzz = 4.0 / n as f64;
        assert!(
            ratio >= 0.5 * (1.0 - fuzz) && ratio <= 2.0,
            "s2/np(1-p) = {ratio} outside the factor-of-two band"
        );
        // and the order statement itself: s2 grows linearly with n
        let noise2 = homogeneous(2 * n, p);
        let v2 = DVector::from_element(2 * n, 1.0 / (2.0 * n as f64).sqrt());
        let s2_big = s2_xy(&v2, &v2, &noise2).unwrap();
        assert!(s2_big / s2 > 1.8 && s2_big / s2 < 2.2);
    }

    #[test]
    fn spectral_norm_diagnostic_bound() {
        // ||W|| <= 4 sqrt(log n) alpha_n across 200 draws
        let n = 60;
        let noise = homogeneous(n, 0.2);
        let alpha = alpha_n(&noise);
        let bound = 4.0 * (n as f64).ln().sqrt() * alpha;
        for seed in 0..200 {
            let w = sample_noise(&noise, seed).unwrap();
            let (vals, _) = crate::spectral::symmetric_eigen(&w);
            let norm = vals.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            assert!(norm <= bound, "seed {seed}: ||W|| = {norm} > {bound}");
        }
    }

    #[test]
    fn law_of_total_variance_inequality_holds() {
        // var(v' W^2 v) >= s2_{v,v}; equality by orthogonality of the
        // martingale increments.
        for p_val in [0.2, 0.5, 0.8] {
            let noise = homogeneous(4, p_val);
            let v = DVector::from_element(4, 0.5);
            let (_, var_qf) = oracle::enumerate(&noise, |w| v.dot(&((w * w) * &v)));
            let s2 = s2_xy(&v, &v, &noise).unwrap();
            assert!(var_qf >= s2 - 1e-12 * var_qf.abs());
        }
    }
}
