//! Numeric margins for the theory's regularity conditions.
//!
//! The conditions are asymptotic ("-> infinity", "-> 0"), so at finite n the
//! report carries raw ratios annotated pass / marginal / fail against
//! documented thresholds of our own choosing: gap >= 1.1 passes; strength
//! ratios >= 10 pass and >= 3 are marginal. Nothing here refuses to compute
//! anything; the annotations are advisory.

use serde::Serialize;

use nalgebra::DVector;

use crate::error::{AteError, Result};
use crate::model::{NoiseProfile, SpikedMeanModel};
use crate::moments::{alpha_n, bilinear_variance_raw, kappa_xy, s2_xy_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Annotation {
    Pass,
    Marginal,
    Fail,
}

fn annotate_strength(ratio: f64) -> Annotation {
    if ratio >= 10.0 {
        Annotation::Pass
    } else if ratio >= 3.0 {
        Annotation::Marginal
    } else {
        Annotation::Fail
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioReport {
    pub value: f64,
    pub annotation: Annotation,
}

/// Margins for the noise-strength, gap, and dense-regime conditions.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub alpha_n: f64,
    /// `alpha_n -> infinity`: fails exactly when the noise is degenerate.
    pub noise_scale_ok: bool,
    /// smallest adjacent `|d_i| / d_{i+1}|`, ignoring sign-paired spikes
    pub gap_ratio: RatioReport,
    /// `|d_K| / alpha_n`
    pub strength: RatioReport,
    /// `|d_K| / (alpha_n log n)`: reported raw, no threshold (the matching
    /// constants are unknowable)
    pub strength_log: f64,
    /// `n max var(w_ij) / alpha_n^2`, also threshold-free
    pub max_var_ratio: f64,
    pub sigma_min: f64,
    /// dense-regime margins: `|d_1|/|d_K|`, `|d_K| sigma_min / alpha_n`,
    /// `max_k ||v_k||_inf^2 / sigma_min`, `alpha^4 max_k ||v_k||_inf^4 /
    /// (sqrt(n) sigma_min^2)`, `sigma_min^2 n`
    pub spike_order_ratio: f64,
    pub dense_strength: RatioReport,
    pub localization: f64,
    pub fourth_moment_margin: f64,
    pub variance_floor: RatioReport,
}

/// Computes every condition margin for a model/noise pair.
pub fn check_conditions(model: &SpikedMeanModel, noise: &NoiseProfile) -> DiagnosticsReport {
    let n = model.n() as f64;
    let alpha = alpha_n(noise);
    let d = model.d();
    let k = model.k();

    let mut gap = f64::INFINITY;
    for i in 0..k - 1 {
        let (a, b) = (d[i], d[i + 1]);
        if (a + b).abs() <= 1e-9 * a.abs() {
            continue; // sign-paired, excluded from the gap condition
        }
        gap = gap.min(a.abs() / b.abs());
    }

    let d_min = d[k - 1].abs();
    let d_max = d[0].abs();
    let sigma_min = noise.sigma_min();
    let vinf = (0..k)
        .map(|j| model.v().column(j).amax())
        .fold(0.0f64, f64::max);
    let max_var = {
        let mut m = 0.0f64;
        for i in 0..model.n() {
            for j in 0..model.n() {
                m = m.max(noise.var(i, j));
            }
        }
        m
    };

    let strength = if alpha > 0.0 { d_min / alpha } else { f64::INFINITY };
    DiagnosticsReport {
        alpha_n: alpha,
        noise_scale_ok: alpha > 0.0,
        gap_ratio: RatioReport {
            value: gap,
            annotation: if gap >= 1.1 {
                Annotation::Pass
            } else if gap > 1.0 {
                Annotation::Marginal
            } else {
                Annotation::Fail
            },
        },
        strength: RatioReport {
            value: strength,
            annotation: if alpha > 0.0 { annotate_strength(strength) } else { Annotation::Fail },
        },
        strength_log: if alpha > 0.0 { d_min / (alpha * n.ln()) } else { f64::INFINITY },
        max_var_ratio: if alpha > 0.0 { n * max_var / (alpha * alpha) } else { f64::INFINITY },
        sigma_min,
        spike_order_ratio: d_max / d_min,
        dense_strength: RatioReport {
            value: if alpha > 0.0 { d_min * sigma_min / alpha } else { f64::INFINITY },
            annotation: annotate_strength(if alpha > 0.0 {
                d_min * sigma_min / alpha
            } else {
                f64::INFINITY
            }),
        },
        localization: if sigma_min > 0.0 { vinf * vinf / sigma_min } else { f64::INFINITY },
        fourth_moment_margin: if sigma_min > 0.0 {
            alpha.powi(4) * vinf.powi(4) / (n.sqrt() * sigma_min * sigma_min)
        } else {
            f64::INFINITY
        },
        variance_floor: RatioReport {
            value: sigma_min * sigma_min * n,
            annotation: annotate_strength(sigma_min * sigma_min * n),
        },
    }
}

/// Linear-form CLT margin `||x||_inf ||y||_inf / sd(x' W y)`; small is good.
pub fn lyapunov_check(x: &DVector<f64>, y: &DVector<f64>, noise: &NoiseProfile) -> Result<f64> {
    let s2 = bilinear_variance_raw(x, y, noise);
    if s2 <= 0.0 {
        return Err(AteError::DegenerateDenominator { value: s2 });
    }
    Ok(x.amax() * y.amax() / s2.sqrt())
}

/// Quadratic-form CLT margins.
#[derive(Debug, Clone, Serialize)]
pub struct W2CltReport {
    /// `kappa^{1/4} / s_{x,y}`; must vanish asymptotically
    pub kappa_ratio: f64,
    /// `s_{x,y}` itself; must diverge
    pub s_xy: f64,
    /// the sufficient triple: `||x||_inf ||y||_inf`,
    /// `alpha^4 ||x||_inf^2 ||y||_inf^2 / (sqrt(n) sigma_min^2)`,
    /// `sigma_min^2 n`
    pub infnorm_product: f64,
    pub fourth_moment_margin: f64,
    pub variance_floor: f64,
}

pub fn w2clt_check(
    x: &DVector<f64>,
    y: &DVector<f64>,
    noise: &NoiseProfile,
    mc_draws: usize,
    seed: u64,
) -> Result<W2CltReport> {
    let s2 = s2_xy_raw(x, y, noise);
    if s2 <= 0.0 {
        return Err(AteError::DegenerateDenominator { value: s2 });
    }
    let (kappa, _) = kappa_xy(x, y, noise, mc_draws, seed)?;
    let n = noise.n() as f64;
    let sigma_min = noise.sigma_min();
    let dx = x.amax();
    let dy = y.amax();
    Ok(W2CltReport {
        kappa_ratio: kappa.max(0.0).powf(0.25) / s2.sqrt(),
        s_xy: s2.sqrt(),
        infnorm_product: dx * dy,
        fourth_moment_margin: if sigma_min > 0.0 {
            alpha_n(noise).powi(4) * dx * dx * dy * dy / (n.sqrt() * sigma_min * sigma_min)
        } else {
            f64::INFINITY
        },
        variance_floor: sigma_min * sigma_min * n,
    })
}
