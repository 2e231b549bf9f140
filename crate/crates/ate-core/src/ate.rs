//! The deflated resolvent algebra: the truncated kernel R, the deflation
//! coefficient A, the weight vector b, the derivative normalizer, the root
//! solver for the population surrogate t_k, the normalized CLT statistics,
//! and the rank-one bilinear-form machinery.

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;

use crate::error::{AteError, Result};
use crate::model::{sample_noise, NoiseProfile, SpikedMeanModel};
use crate::moments::{bilinear_variance_raw, s2_xy_raw, MomentTable};
use crate::spectral::SpikedEigenPair;

const COND_LIMIT: f64 = 1e12;

/// Truncated resolvent kernel
/// `R(M1, M2, t) = -sum_{l=0, l!=1}^{L} t^{-(l+1)} M1' E[W^l] M2`.
pub fn r_func(
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    t: f64,
    moments: &MomentTable,
) -> Result<DMatrix<f64>> {
    if t == 0.0 {
        return Err(AteError::ZeroEvaluationPoint);
    }
    let mut acc = DMatrix::zeros(m1.ncols(), m2.ncols());
    for l in 0..=moments.l_max() {
        if l == 1 {
            continue;
        }
        let proj = m1.transpose() * moments.ew(l)? * m2;
        acc += proj * (-t.powi(-(l as i32 + 1)));
    }
    Ok(acc)
}

/// Analytic derivative of [`r_func`] in `t`:
/// `sum_{l=0, l!=1}^{L} (l+1) t^{-(l+2)} M1' E[W^l] M2`.
pub fn r_func_deriv(
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    t: f64,
    moments: &MomentTable,
) -> Result<DMatrix<f64>> {
    if t == 0.0 {
        return Err(AteError::ZeroEvaluationPoint);
    }
    let mut acc = DMatrix::zeros(m1.ncols(), m2.ncols());
    for l in 0..=moments.l_max() {
        if l == 1 {
            continue;
        }
        let proj = m1.transpose() * moments.ew(l)? * m2;
        acc += proj * ((l as f64 + 1.0) * t.powi(-(l as i32 + 2)));
    }
    Ok(acc)
}

/// Projections of the moment matrices onto the spike-k geometry, so that
/// repeated evaluations in `z` cost O(K^3) instead of O(n^2).
struct SpikeAlgebra {
    dk: f64,
    d_minus: DVector<f64>,
    v_minus: DMatrix<f64>,
    /// `v_k' E[W^l] v_k`
    c_vv: Vec<f64>,
    /// `v_k' E[W^l] V_{-k}`
    c_vm: Vec<RowDVector<f64>>,
    /// `V_{-k}' E[W^l] V_{-k}`
    c_mm: Vec<DMatrix<f64>>,
    l_max: usize,
}

impl SpikeAlgebra {
    fn build(k: usize, model: &SpikedMeanModel, moments: &MomentTable) -> Result<Self> {
        let kk = model.k();
        if k == 0 || k > kk {
            return Err(AteError::SpikeIndexOutOfRange { k, k_max: kk });
        }
        if moments.n() != model.n() {
            return Err(AteError::DimensionMismatch { expected: model.n(), got: moments.n() });
        }
        let vk = model.vk(k);
        let others: Vec<usize> = (0..kk).filter(|&j| j != k - 1).collect();
        let v_minus = if others.is_empty() {
            DMatrix::zeros(model.n(), 0)
        } else {
            DMatrix::from_columns(&others.iter().map(|&j| model.v().column(j)).collect::<Vec<_>>())
        };
        let d_minus = DVector::from_iterator(others.len(), others.iter().map(|&j| model.d()[j]));

        let l_max = moments.l_max();
        let mut c_vv = Vec::with_capacity(l_max + 1);
        let mut c_vm = Vec::with_capacity(l_max + 1);
        let mut c_mm = Vec::with_capacity(l_max + 1);
        for l in 0..=l_max {
            let ew = moments.ew(l)?;
            let ew_vk = ew * &vk;
            c_vv.push(vk.dot(&ew_vk));
            c_vm.push(RowDVector::from_fn(others.len(), |_, j| v_minus.column(j).dot(&ew_vk)));
            c_mm.push(v_minus.transpose() * ew * &v_minus);
        }
        Ok(Self { dk: model.dk(k), d_minus, v_minus, c_vv, c_vm, c_mm, l_max })
    }

    fn kdim(&self) -> usize {
        self.d_minus.len()
    }

    fn weights(&self, z: f64) -> Vec<f64> {
        (0..=self.l_max)
            .map(|l| if l == 1 { 0.0 } else { -z.powi(-(l as i32 + 1)) })
            .collect()
    }

    fn weights_deriv(&self, z: f64) -> Vec<f64> {
        (0..=self.l_max)
            .map(|l| if l == 1 { 0.0 } else { (l as f64 + 1.0) * z.powi(-(l as i32 + 2)) })
            .collect()
    }

    fn r_vv(&self, w: &[f64]) -> f64 {
        (0..=self.l_max).map(|l| w[l] * self.c_vv[l]).sum()
    }

    fn r_vm(&self, w: &[f64]) -> RowDVector<f64> {
        let mut acc = RowDVector::zeros(self.kdim());
        for l in 0..=self.l_max {
            acc += &self.c_vm[l] * w[l];
        }
        acc
    }

    fn r_mm(&self, w: &[f64]) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.kdim(), self.kdim());
        for l in 0..=self.l_max {
            acc += &self.c_mm[l] * w[l];
        }
        acc
    }

    /// `[D_{-k}^{-1} + R(V_{-k}, V_{-k}, z)]^{-1}` with a condition gate.
    fn bracket_inv(&self, z: f64) -> Result<DMatrix<f64>> {
        let m = self.kdim();
        if m == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let mut b = self.r_mm(&self.weights(z));
        for i in 0..m {
            b[(i, i)] += 1.0 / self.d_minus[i];
        }
        let svd = b.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if cond > COND_LIMIT {
            return Err(AteError::ResonantDeflation { cond });
        }
        b.try_inverse().ok_or(AteError::ResonantDeflation { cond })
    }

    /// `A_{v_k,k,z} / z = R(v_k,v_k,z) - R(v_k,V_{-k},z) B^{-1} R(V_{-k},v_k,z)`.
    fn a_over_z(&self, z: f64) -> Result<f64> {
        let w = self.weights(z);
        let head = self.r_vv(&w);
        if self.kdim() == 0 {
            return Ok(head);
        }
        let row = self.r_vm(&w);
        let binv = self.bracket_inv(z)?;
        Ok(head - (&row * binv * row.transpose())[(0, 0)])
    }

    /// Analytic derivative of `A_{v_k,k,z}/z`, which equals `1/(z^2 P~_{k,z})`.
    fn a_over_z_deriv(&self, z: f64) -> Result<f64> {
        let w = self.weights(z);
        let wd = self.weights_deriv(z);
        let head = self.r_vv(&wd);
        if self.kdim() == 0 {
            return Ok(head);
        }
        let row = self.r_vm(&w);
        let row_d = self.r_vm(&wd);
        let binv = self.bracket_inv(z)?;
        let mid = self.r_mm(&wd);
        let first = 2.0 * (&row_d * &binv * row.transpose())[(0, 0)];
        let second = (&row * &binv * mid * binv * row.transpose())[(0, 0)];
        Ok(head - first + second)
    }

    fn f(&self, z: f64) -> Result<f64> {
        Ok(1.0 + self.dk * self.a_over_z(z)?)
    }

    fn f_deriv(&self, z: f64) -> Result<f64> {
        Ok(self.dk * self.a_over_z_deriv(z)?)
    }

    /// Head-only equation `1 + d_k R(v_k, v_k, z)` and its derivative.
    fn g(&self, z: f64) -> f64 {
        1.0 + self.dk * self.r_vv(&self.weights(z))
    }

    fn g_deriv(&self, z: f64) -> f64 {
        self.dk * self.r_vv(&self.weights_deriv(z))
    }

    fn p_tilde(&self, z: f64) -> Result<f64> {
        let deriv = self.a_over_z_deriv(z)?;
        let scaled = z * z * deriv;
        if !scaled.is_finite() || scaled.abs() < 1e-14 {
            return Err(AteError::FlatObjective { t: z });
        }
        Ok(1.0 / scaled)
    }
}

/// Deflated characteristic function `f_k(z)` whose root in `[a_k, b_k]` is the
/// population surrogate `t_k`.
pub fn f_k(z: f64, k: usize, model: &SpikedMeanModel, moments: &MomentTable) -> Result<f64> {
    if z == 0.0 {
        return Err(AteError::ZeroEvaluationPoint);
    }
    SpikeAlgebra::build(k, model, moments)?.f(z)
}

/// Deflation coefficient `A_{u,k,t}`.
pub fn a_coeff(
    u: &DVector<f64>,
    k: usize,
    t: f64,
    model: &SpikedMeanModel,
    moments: &MomentTable,
) -> Result<f64> {
    if t == 0.0 {
        return Err(AteError::ZeroEvaluationPoint);
    }
    let alg = SpikeAlgebra::build(k, model, moments)?;
    let vk = model.vk(k);
    let um = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
    let vkm = DMatrix::from_column_slice(vk.len(), 1, vk.as_slice());
    let head = r_func(&um, &vkm, t, moments)?[(0, 0)];
    if alg.kdim() == 0 {
        return Ok(t * head);
    }
    let r_u_row = r_func(&um, &alg.v_minus, t, moments)?;
    let r_m_col = r_func(&alg.v_minus, &vkm, t, moments)?;
    let binv = alg.bracket_inv(t)?;
    Ok(t * (head - (&r_u_row * binv * r_m_col)[(0, 0)]))
}

/// Deflated weight vector `b_{u,k,t}`; satisfies `b' v_k = u' v_k` exactly.
pub fn b_vec(
    u: &DVector<f64>,
    k: usize,
    t: f64,
    model: &SpikedMeanModel,
    moments: &MomentTable,
) -> Result<DVector<f64>> {
    if t == 0.0 {
        return Err(AteError::ZeroEvaluationPoint);
    }
    let alg = SpikeAlgebra::build(k, model, moments)?;
    if alg.kdim() == 0 {
        return Ok(u.clone());
    }
    let um = DMatrix::from_column_slice(u.len(), 1, u.as_slice());
    let r_u_row = r_func(&um, &alg.v_minus, t, moments)?;
    let binv = alg.bracket_inv(t)?;
    Ok(u - &alg.v_minus * (binv * r_u_row.transpose()))
}

/// Derivative normalizer `P~_{k,t} = [t^2 (A_{v_k,k,t}/t)']^{-1}`, close to 1
/// for strong spikes.
pub fn p_tilde(k: usize, t: f64, model: &SpikedMeanModel, moments: &MomentTable) -> Result<f64> {
    if t == 0.0 {
        return Err(AteError::ZeroEvaluationPoint);
    }
    SpikeAlgebra::build(k, model, moments)?.p_tilde(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Safeguarded Newton on the full deflated equation, bracketed by
    /// `[a_k, b_k]`.
    NewtonFull,
    /// Newton on the head-only equation first, then a polish pass on the
    /// full equation.
    NewtonApprox,
    /// Plain bisection on the full equation; the fallback oracle.
    Bisection,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub method: SolveMethod,
    pub tol: f64,
    /// Gap constant for the search interval `[d_k/(1+c0/2), d_k(1+c0/2)]`.
    pub c0: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { method: SolveMethod::NewtonFull, tol: 1e-12, c0: 0.5 }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SolverTrace {
    pub method: SolveMethod,
    pub iterations: usize,
    pub residual: f64,
    /// Root of the head-only equation when the method solves it first.
    pub approx_root: Option<f64>,
    /// `|t_full - t_approx|` for the two-stage method.
    pub approx_gap: Option<f64>,
}

/// Per-spike solution bundle: the surrogate `t_k`, its search interval, the
/// self deflation coefficient and normalizer at `t_k`, and solver diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AteSolution {
    pub k: usize,
    pub t_k: f64,
    pub a_k: f64,
    pub b_k: f64,
    pub c0: f64,
    pub a_self: f64,
    pub p_tilde: f64,
    pub solver: SolverTrace,
}

/// Search interval for spike k: radius factor `1 + c0/2` on the side of
/// `d_k`, ordered as (lower, upper) in magnitude.
pub fn spike_interval(dk: f64, c0: f64) -> (f64, f64) {
    let r = 1.0 + 0.5 * c0;
    if dk > 0.0 {
        (dk / r, dk * r)
    } else {
        (dk * r, dk / r)
    }
}

/// Solves `f_k(z) = 0` for the population surrogate `t_k`.
pub fn solve_tk(
    k: usize,
    model: &SpikedMeanModel,
    moments: &MomentTable,
    opts: &SolverOptions,
) -> Result<AteSolution> {
    let alg = SpikeAlgebra::build(k, model, moments)?;
    let dk = alg.dk;
    let (a_k, b_k) = spike_interval(dk, opts.c0);

    // Same-sign intervals must stay clear of one another.
    for j in 1..=model.k() {
        if j == k || model.dk(j).signum() != dk.signum() {
            continue;
        }
        let (aj, bj) = spike_interval(model.dk(j), opts.c0);
        let (lo, hi) = (a_k.min(b_k), a_k.max(b_k));
        let (lo_j, hi_j) = (aj.min(bj), aj.max(bj));
        if lo.max(lo_j) < hi.min(hi_j) {
            return Err(AteError::IntervalOverlap { k, other: j });
        }
    }

    let (lo, hi) = (a_k.min(b_k), a_k.max(b_k));
    let (t_k, trace) = match opts.method {
        SolveMethod::NewtonFull => {
            let (root, iters, resid) =
                newton_bracketed(|z| alg.f(z), |z| alg.f_deriv(z), lo, hi, dk, opts.tol)?;
            (
                root,
                SolverTrace {
                    method: opts.method,
                    iterations: iters,
                    residual: resid,
                    approx_root: None,
                    approx_gap: None,
                },
            )
        }
        SolveMethod::Bisection => {
            let (root, iters, resid) = bisect(|z| alg.f(z), lo, hi, opts.tol)?;
            (
                root,
                SolverTrace {
                    method: opts.method,
                    iterations: iters,
                    residual: resid,
                    approx_root: None,
                    approx_gap: None,
                },
            )
        }
        SolveMethod::NewtonApprox => {
            let approx = solve_head_equation(&alg, opts.tol)?;
            // polish on the full equation around the head-only root
            let (root, iters, resid) = polish_full(&alg, approx, lo, hi, opts.tol)?;
            (
                root,
                SolverTrace {
                    method: opts.method,
                    iterations: iters,
                    residual: resid,
                    approx_root: Some(approx),
                    approx_gap: Some((root - approx).abs()),
                },
            )
        }
    };

    let a_self = alg.a_over_z(t_k)? * t_k;
    let p_tilde = alg.p_tilde(t_k)?;
    Ok(AteSolution { k, t_k, a_k, b_k, c0: opts.c0, a_self, p_tilde, solver: trace })
}

/// Newton within a bracket that must change sign; falls back to bisection
/// steps whenever the Newton update leaves the bracket.
fn newton_bracketed(
    f: impl Fn(f64) -> Result<f64>,
    fd: impl Fn(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
    start: f64,
    tol: f64,
) -> Result<(f64, usize, f64)> {
    let mut flo = f(lo)?;
    let fhi = f(hi)?;
    if flo == 0.0 {
        return Ok((lo, 0, 0.0));
    }
    if fhi == 0.0 {
        return Ok((hi, 0, 0.0));
    }
    if flo * fhi > 0.0 {
        return Err(AteError::NoRootBracketed { a: lo, b: hi, fa: flo, fb: fhi });
    }
    let mut z = start.clamp(lo, hi);
    let mut fz = f(z)?;
    for it in 1..=100 {
        if fz.abs() <= tol {
            return Ok((z, it - 1, fz.abs()));
        }
        if fz.signum() == flo.signum() {
            lo = z;
            flo = fz;
        } else {
            hi = z;
        }
        let dz = fd(z)?;
        let newton = z - fz / dz;
        z = if dz != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 8.0 * f64::EPSILON * z.abs() {
            let r = f(z)?;
            return Ok((z, it, r.abs()));
        }
        fz = f(z)?;
    }
    Ok((z, 100, fz.abs()))
}

fn bisect(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, usize, f64)> {
    let mut flo = f(lo)?;
    let fhi = f(hi)?;
    if flo == 0.0 {
        return Ok((lo, 0, 0.0));
    }
    if fhi == 0.0 {
        return Ok((hi, 0, 0.0));
    }
    if flo * fhi > 0.0 {
        return Err(AteError::NoRootBracketed { a: lo, b: hi, fa: flo, fb: fhi });
    }
    let mut mid = 0.5 * (lo + hi);
    for it in 1..=200 {
        mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm.abs() <= tol || hi - lo <= 4.0 * f64::EPSILON * mid.abs() {
            return Ok((mid, it, fm.abs()));
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let r = f(mid)?;
    Ok((mid, 200, r.abs()))
}

/// Root of the head-only equation `1 + d_k R(v_k, v_k, z) = 0`. The root
/// always lies on the far side of `d_k` because the second and fourth moment
/// projections are nonnegative.
fn solve_head_equation(alg: &SpikeAlgebra, tol: f64) -> Result<f64> {
    let dk = alg.dk;
    if alg.g(dk).abs() <= tol {
        return Ok(dk);
    }
    let mut factor = 1.25;
    for _ in 0..24 {
        let probe = dk * factor;
        let (lo, hi) = if dk > 0.0 { (dk, probe) } else { (probe, dk) };
        if alg.g(lo) * alg.g(hi) < 0.0 {
            let (root, _, _) =
                newton_bracketed(|z| Ok(alg.g(z)), |z| Ok(alg.g_deriv(z)), lo, hi, dk, tol)?;
            return Ok(root);
        }
        factor *= 2.0;
    }
    Err(AteError::NoRootBracketed { a: dk, b: dk * factor, fa: alg.g(dk), fb: alg.g(dk * factor) })
}

/// Polishes the head-only root on the full deflated equation, preferring the
/// canonical interval when it brackets and a local expanding bracket
/// otherwise.
fn polish_full(alg: &SpikeAlgebra, approx: f64, lo: f64, hi: f64, tol: f64) -> Result<(f64, usize, f64)> {
    if alg.f(lo)? * alg.f(hi)? < 0.0 {
        return newton_bracketed(|z| alg.f(z), |z| alg.f_deriv(z), lo, hi, approx.clamp(lo, hi), tol);
    }
    let mut h = 1e-6 * approx.abs().max(1.0);
    for _ in 0..60 {
        let (llo, lhi) = (approx - h, approx + h);
        if llo.signum() == approx.signum()
            && alg.f(llo)? * alg.f(lhi)? < 0.0
        {
            return newton_bracketed(|z| alg.f(z), |z| alg.f_deriv(z), llo, lhi, approx, tol);
        }
        h *= 2.0;
    }
    let fa = alg.f(lo)?;
    let fb = alg.f(hi)?;
    Err(AteError::NoRootBracketed { a: lo, b: hi, fa, fb })
}

/// How statistic denominators are computed: exact entrywise-moment formulas
/// or the sample variance over independent noise copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceMode {
    Exact,
    McCopies { draws: usize, seed: u64 },
}

fn linear_form_variance(
    x: &DVector<f64>,
    y: &DVector<f64>,
    noise: &NoiseProfile,
    mode: VarianceMode,
) -> Result<f64> {
    match mode {
        VarianceMode::Exact => Ok(bilinear_variance_raw(x, y, noise)),
        VarianceMode::McCopies { draws, seed } => {
            if draws < 8 {
                return Err(AteError::TooFewSamples { min: 8, got: draws });
            }
            let samples: Vec<f64> = (0..draws)
                .into_par_iter()
                .map(|i| {
                    let w = sample_noise(noise, seed ^ (i as u64)).expect("sampleable family");
                    x.dot(&(&w * y))
                })
                .collect();
            Ok(sample_variance(&samples))
        }
    }
}

fn quadratic_self_variance(
    vk: &DVector<f64>,
    noise: &NoiseProfile,
    mode: VarianceMode,
) -> Result<f64> {
    match mode {
        VarianceMode::Exact => Ok(s2_xy_raw(vk, vk, noise)),
        VarianceMode::McCopies { draws, seed } => {
            if draws < 8 {
                return Err(AteError::TooFewSamples { min: 8, got: draws });
            }
            let samples: Vec<f64> = (0..draws)
                .into_par_iter()
                .map(|i| {
                    let w = sample_noise(noise, seed ^ (i as u64)).expect("sampleable family");
                    let u = &w * vk;
                    u.dot(&u)
                })
                .collect();
            Ok(sample_variance(&samples))
        }
    }
}

fn sample_variance(samples: &[f64]) -> f64 {
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0)
}

/// Normalized eigenvalue statistic
/// `(lambda_k - t_k - E[v_k' W v_k]) / sd(v_k' W v_k)`.
pub fn eigenvalue_stat(
    pair: &SpikedEigenPair,
    sol: &AteSolution,
    model: &SpikedMeanModel,
    noise: &NoiseProfile,
) -> Result<f64> {
    let vk = model.vk(sol.k);
    let mean: f64 = (0..model.n()).map(|i| vk[i] * vk[i] * noise.diag_mean[i]).sum();
    let var = bilinear_variance_raw(&vk, &vk, noise);
    if var <= 0.0 {
        return Err(AteError::DegenerateDenominator { value: var });
    }
    Ok((pair.lambda - sol.t_k - mean) / var.sqrt())
}

/// Precomputed pieces of the general-direction eigenvector statistic for one
/// `(u, k)` pair; reusable across replicates.
#[derive(Debug, Clone)]
pub struct GeneralStatCoeffs {
    pub k: usize,
    pub u: DVector<f64>,
    pub a_u: f64,
    pub p_tilde_sqrt: f64,
    pub t_k: f64,
    /// `b_{u,k,t_k} - v_k (u' v_k)`, the weight of the driving linear form.
    pub x_tilde: DVector<f64>,
    pub mean: f64,
    pub sd: f64,
    /// Set when `|u' v_k| > 0.9`: the statistic degenerates towards the
    /// self-overlap regime and the general-direction normalization is
    /// unreliable.
    pub near_self: bool,
}

pub fn general_stat_coeffs(
    u: &DVector<f64>,
    k: usize,
    sol: &AteSolution,
    model: &SpikedMeanModel,
    moments: &MomentTable,
    noise: &NoiseProfile,
    var_mode: VarianceMode,
) -> Result<GeneralStatCoeffs> {
    let norm = u.norm();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(AteError::NonUnitVector { norm });
    }
    let vk = model.vk(k);
    let overlap = u.dot(&vk);
    let a_u = a_coeff(u, k, sol.t_k, model, moments)?;
    let b = b_vec(u, k, sol.t_k, model, moments)?;
    let x_tilde = &b - &vk * overlap;
    let mean: f64 = (0..model.n()).map(|i| x_tilde[i] * vk[i] * noise.diag_mean[i]).sum();
    let var = linear_form_variance(&x_tilde, &vk, noise, var_mode)?;
    if var <= 0.0 {
        return Err(AteError::DegenerateDenominator { value: var });
    }
    if sol.p_tilde <= 0.0 {
        return Err(AteError::FlatObjective { t: sol.t_k });
    }
    Ok(GeneralStatCoeffs {
        k,
        u: u.clone(),
        a_u,
        p_tilde_sqrt: sol.p_tilde.sqrt(),
        t_k: sol.t_k,
        x_tilde,
        mean,
        sd: var.sqrt(),
        near_self: overlap.abs() > 0.9,
    })
}

impl GeneralStatCoeffs {
    /// `[t_k (u' vhat_k + A_u P~^{1/2}) - mean] / sd` on one replicate.
    pub fn apply(&self, pair: &SpikedEigenPair) -> f64 {
        let overlap = self.u.dot(&pair.vhat);
        (self.t_k * (overlap + self.a_u * self.p_tilde_sqrt) - self.mean) / self.sd
    }
}

/// Normalized general-direction eigenvector statistic (one-shot form).
pub fn eigenvector_stat_general(
    u: &DVector<f64>,
    pair: &SpikedEigenPair,
    sol: &AteSolution,
    model: &SpikedMeanModel,
    moments: &MomentTable,
    noise: &NoiseProfile,
    var_mode: VarianceMode,
) -> Result<f64> {
    Ok(general_stat_coeffs(u, sol.k, sol, model, moments, noise, var_mode)?.apply(pair))
}

/// Precomputed pieces of the self-overlap statistic for spike k.
#[derive(Debug, Clone)]
pub struct SelfStatCoeffs {
    pub k: usize,
    pub vk: DVector<f64>,
    pub t_k: f64,
    pub a_self: f64,
    pub p_tilde_sqrt: f64,
    pub sd: f64,
}

pub fn self_stat_coeffs(
    k: usize,
    sol: &AteSolution,
    model: &SpikedMeanModel,
    noise: &NoiseProfile,
    var_mode: VarianceMode,
) -> Result<SelfStatCoeffs> {
    let vk = model.vk(k);
    let var = quadratic_self_variance(&vk, noise, var_mode)?;
    if var <= 0.0 {
        return Err(AteError::DegenerateDenominator { value: var });
    }
    if sol.p_tilde <= 0.0 {
        return Err(AteError::FlatObjective { t: sol.t_k });
    }
    Ok(SelfStatCoeffs {
        k,
        vk,
        t_k: sol.t_k,
        a_self: sol.a_self,
        p_tilde_sqrt: sol.p_tilde.sqrt(),
        sd: var.sqrt(),
    })
}

impl SelfStatCoeffs {
    /// `2 t_k^2 (v_k' vhat_k + A_self P~^{1/2}) / sd(v_k' W^2 v_k)`.
    pub fn apply(&self, pair: &SpikedEigenPair) -> f64 {
        let overlap = self.vk.dot(&pair.vhat);
        2.0 * self.t_k * self.t_k * (overlap + self.a_self * self.p_tilde_sqrt) / self.sd
    }
}

/// Normalized self-overlap statistic (one-shot form).
pub fn eigenvector_stat_self(
    pair: &SpikedEigenPair,
    sol: &AteSolution,
    model: &SpikedMeanModel,
    noise: &NoiseProfile,
    var_mode: VarianceMode,
) -> Result<f64> {
    Ok(self_stat_coeffs(sol.k, sol, model, noise, var_mode)?.apply(pair))
}

/// Rank-one prediction machinery for the bilinear form `x' vhat_k vhat_k' y`.
#[derive(Debug, Clone)]
pub struct BilinearPrediction {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub k: usize,
    pub order: u8,
    /// Deterministic center `A_x A_y P~`.
    pub a_value: f64,
    pub j: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Variance of the first-order functional `tr(W J)`.
    pub sigma_k2: f64,
    /// Monte Carlo variance of the full second-order functional; present for
    /// `order = 2`.
    pub sigma_tilde_k2: Option<f64>,
}

pub fn bilinear_predict(
    x: &DVector<f64>,
    y: &DVector<f64>,
    k: usize,
    order: u8,
    sol: &AteSolution,
    model: &SpikedMeanModel,
    moments: &MomentTable,
    noise: &NoiseProfile,
    mc_draws: usize,
    seed: u64,
) -> Result<BilinearPrediction> {
    for v in [x, y] {
        let norm = v.norm();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(AteError::NonUnitVector { norm });
        }
    }
    let t = sol.t_k;
    let pt = sol.p_tilde;
    let vk = model.vk(k);
    let alg = SpikeAlgebra::build(k, model, moments)?;

    let a_x = a_coeff(x, k, t, model, moments)?;
    let a_y = a_coeff(y, k, t, model, moments)?;
    let b_x = b_vec(x, k, t, model, moments)?;
    let b_y = b_vec(y, k, t, model, moments)?;

    // first-order kernel: J = -P~ t^{-1} v_k (A_y b_x' + A_x b_y' + 2 A_x A_y P~ v_k')
    let j_vec = (&b_x * a_y + &b_y * a_x + &vk * (2.0 * a_x * a_y * pt)) * (-pt / t);
    let j = &vk * j_vec.transpose();

    // second-order kernels
    let deflated_row = |w: &DVector<f64>| -> Result<DVector<f64>> {
        if alg.kdim() == 0 {
            return Ok(DVector::zeros(model.n()));
        }
        let wm = DMatrix::from_column_slice(w.len(), 1, w.as_slice());
        let r_row = r_func(&wm, &alg.v_minus, t, moments)?;
        let binv = alg.bracket_inv(t)?;
        let prod = &alg.v_minus * (binv * r_row.transpose());
        Ok(prod.column(0).into_owned())
    };
    let defl_x = deflated_row(x)?;
    let defl_y = deflated_row(y)?;
    let l_vec = ((&defl_x * a_y + &defl_y * a_x) + x * a_y + y * a_x + &vk * (3.0 * a_x * a_y))
        * (pt / (t * t));
    let l = &vk * l_vec.transpose();

    let q_vec = &l_vec - &vk * (pt / (t * t) * a_x * a_y)
        + (&b_x * a_x + &b_y * a_y) * (2.0 * pt * pt / (t * t));
    let q = &vk * q_vec.transpose();

    let sigma_k2 = bilinear_variance_raw(&j_vec, &vk, noise);

    let sigma_tilde_k2 = if order >= 2 {
        if mc_draws < 8 {
            return Err(AteError::TooFewSamples { min: 8, got: mc_draws });
        }
        let ew2 = moments.ew(2)?;
        let samples: Vec<f64> = (0..mc_draws)
            .into_par_iter()
            .map(|i| {
                let w = sample_noise(noise, seed ^ (i as u64)).expect("sampleable family");
                let w_vk = &w * &vk;
                let first = j_vec.dot(&w_vk);
                let w2_vk = &w * &w_vk;
                let centered = &w2_vk - ew2 * &vk;
                let second = l_vec.dot(&centered);
                let cross = vk.dot(&w_vk) * q_vec.dot(&w_vk);
                first - second + cross
            })
            .collect();
        Some(sample_variance(&samples))
    } else {
        None
    };

    Ok(BilinearPrediction {
        x: x.clone(),
        y: y.clone(),
        k,
        order,
        a_value: a_x * a_y * pt,
        j,
        l,
        q,
        sigma_k2,
        sigma_tilde_k2,
    })
}
