//! Seeded replication engine: repeatedly samples the data matrix, extracts
//! the spiked eigenpairs, and collects the normalized statistics, then
//! summarizes them against the standard normal.
//!
//! Replicate r uses seed `base_seed ^ r`, so runs are reproducible and
//! independent of the worker count; derived seed streams (moment table,
//! variance copies) use fixed offsets far away from the replicate indices.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adtest::ad_test;
use crate::ate::{
    self, general_stat_coeffs, solve_tk, AteSolution, GeneralStatCoeffs, SelfStatCoeffs,
    SolveMethod, SolverOptions, VarianceMode,
};
use crate::error::{AteError, Result};
use crate::model::{sample_data, ModelSpec, NoiseProfile, SpikedMeanModel};
use crate::moments::MomentTable;
use crate::spectral::{spiked_eigs, SpikedEigenPair};

const MOMENT_SEED_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;
const VARIANCE_SEED_SALT: u64 = 0x3C3C_C3C3_5A5A_A5A5;

/// Number of histogram bins over [-6, 6]; outliers land in the tail buckets.
pub const HIST_BINS: usize = 61;
const HIST_LO: f64 = -6.0;
const HIST_HI: f64 = 6.0;

fn default_true() -> bool {
    true
}
fn default_l() -> usize {
    4
}
fn default_mc_draws() -> usize {
    crate::moments::DEFAULT_MC_DRAWS
}
fn default_c0() -> f64 {
    0.5
}
fn default_solver() -> SolveMethod {
    SolveMethod::NewtonFull
}

/// Test direction for an eigenvector statistic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionSpec {
    /// normalized indicator of the first half of the coordinates
    A1,
    /// first coordinate vector
    E1,
    /// the population eigenvector itself: the self-overlap statistic
    Vk,
    /// any explicit vector (normalized on load)
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "stat", rename_all = "kebab-case")]
pub enum StatisticSpec {
    Eigenvalue { k: usize },
    Eigenvector { k: usize, u: DirectionSpec },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceModeSpec {
    /// exact entrywise-moment formulas for every denominator
    Exact,
    /// sample variances over independent noise copies
    McCopies { draws: usize },
}

impl Default for VarianceModeSpec {
    fn default() -> Self {
        VarianceModeSpec::Exact
    }
}

/// One replication experiment, JSON-loadable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    #[serde(default = "default_true")]
    pub self_loops: bool,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default = "default_l")]
    pub truncation_order: usize,
    #[serde(default = "default_mc_draws")]
    pub moment_mc_draws: usize,
    #[serde(default)]
    pub variance_mode: VarianceModeSpec,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_solver")]
    pub solver: SolveMethod,
    pub statistics: Vec<StatisticSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(AteError::InvalidConfig("replications must be >= 1".into()));
        }
        if self.statistics.is_empty() {
            return Err(AteError::InvalidConfig("no statistics requested".into()));
        }
        if !(self.c0 > 0.0) {
            return Err(AteError::InvalidConfig("c0 must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized indicator of the first floor(n/2) coordinates.
pub fn direction_a1(n: usize) -> DVector<f64> {
    let half = n / 2;
    let mut v = DVector::zeros(n);
    let w = 1.0 / (half as f64).sqrt();
    for i in 0..half {
        v[i] = w;
    }
    v
}

pub fn direction_e1(n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[0] = 1.0;
    v
}

enum PreparedKind {
    Eigenvalue { sd: f64, mean_shift: f64 },
    General(GeneralStatCoeffs),
    SelfOverlap(SelfStatCoeffs),
}

struct PreparedStatistic {
    id: String,
    k: usize,
    kind: PreparedKind,
}

/// Everything derived from the config once, shared read-only by replicates.
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub model: SpikedMeanModel,
    pub noise: NoiseProfile,
    pub moments: MomentTable,
    pub solutions: BTreeMap<usize, AteSolution>,
    stats: Vec<PreparedStatistic>,
    k_top: usize,
}

impl PreparedExperiment {
    pub fn statistic_ids(&self) -> Vec<&str> {
        self.stats.iter().map(|s| s.id.as_str()).collect()
    }
}

fn stat_id(spec: &StatisticSpec) -> String {
    match spec {
        StatisticSpec::Eigenvalue { k } => format!("lambda_k{k}"),
        StatisticSpec::Eigenvector { k, u } => {
            let tag = match u {
                DirectionSpec::A1 => "a1",
                DirectionSpec::E1 => "e1",
                DirectionSpec::Vk => "self",
                DirectionSpec::Custom(_) => "custom",
            };
            format!("vhat_k{k}_{tag}")
        }
    }
}

/// Builds the model, the moment table, the `t_k` solutions, and the
/// statistic coefficient bundles.
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedExperiment> {
    config.validate()?;
    let (model, noise, _warnings) = config.model.build(config.self_loops)?;
    let moments = MomentTable::build(
        &noise,
        config.truncation_order,
        config.moment_mc_draws,
        config.base_seed ^ MOMENT_SEED_SALT,
    )?;

    let mut needed: Vec<usize> = config
        .statistics
        .iter()
        .map(|s| match s {
            StatisticSpec::Eigenvalue { k } | StatisticSpec::Eigenvector { k, .. } => *k,
        })
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let k_top = *needed.last().unwrap();
    if k_top > model.k() {
        return Err(AteError::SpikeIndexOutOfRange { k: k_top, k_max: model.k() });
    }

    let opts = SolverOptions { method: config.solver, tol: 1e-12, c0: config.c0 };
    let mut solutions = BTreeMap::new();
    for &k in &needed {
        solutions.insert(k, solve_tk(k, &model, &moments, &opts)?);
    }

    let mut stats = Vec::new();
    for (idx, spec) in config.statistics.iter().enumerate() {
        let id = stat_id(spec);
        let var_mode = match config.variance_mode {
            VarianceModeSpec::Exact => VarianceMode::Exact,
            VarianceModeSpec::McCopies { draws } => VarianceMode::McCopies {
                draws,
                seed: config.base_seed ^ VARIANCE_SEED_SALT ^ ((idx as u64) << 32),
            },
        };
        match spec {
            StatisticSpec::Eigenvalue { k } => {
                let vk = model.vk(*k);
                let mean_shift: f64 =
                    (0..model.n()).map(|i| vk[i] * vk[i] * noise.diag_mean[i]).sum();
                let var = crate::moments::bilinear_variance_raw(&vk, &vk, &noise);
                if var <= 0.0 {
                    return Err(AteError::DegenerateDenominator { value: var });
                }
                stats.push(PreparedStatistic {
                    id,
                    k: *k,
                    kind: PreparedKind::Eigenvalue { sd: var.sqrt(), mean_shift },
                });
            }
            StatisticSpec::Eigenvector { k, u } => {
                let sol = &solutions[k];
                match u {
                    DirectionSpec::Vk => {
                        let coeffs =
                            ate::self_stat_coeffs(*k, sol, &model, &noise, var_mode)?;
                        stats.push(PreparedStatistic {
                            id,
                            k: *k,
                            kind: PreparedKind::SelfOverlap(coeffs),
                        });
                    }
                    _ => {
                        let u_vec = match u {
                            DirectionSpec::A1 => direction_a1(model.n()),
                            DirectionSpec::E1 => direction_e1(model.n()),
                            DirectionSpec::Custom(v) => {
                                if v.len() != model.n() {
                                    return Err(AteError::DimensionMismatch {
                                        expected: model.n(),
                                        got: v.len(),
                                    });
                                }
                                let v = DVector::from_column_slice(v);
                                let norm = v.norm();
                                if norm == 0.0 {
                                    return Err(AteError::NonUnitVector { norm });
                                }
                                v / norm
                            }
                            DirectionSpec::Vk => unreachable!(),
                        };
                        let coeffs = general_stat_coeffs(
                            &u_vec, *k, sol, &model, &moments, &noise, var_mode,
                        )?;
                        stats.push(PreparedStatistic {
                            id,
                            k: *k,
                            kind: PreparedKind::General(coeffs),
                        });
                    }
                }
            }
        }
    }

    Ok(PreparedExperiment { config: config.clone(), model, noise, moments, solutions, stats, k_top })
}

/// One statistic value on one replicate; failures are recorded with a reason
/// instead of aborting the batch.
#[derive(Debug, Clone, Serialize)]
pub struct StatOutcome {
    pub value: f64,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub lambdas: Vec<f64>,
    /// aligned with the prepared statistic list
    pub values: Vec<StatOutcome>,
}

fn evaluate_replicate(prep: &PreparedExperiment, rep: usize) -> ReplicationRecord {
    let seed = prep.config.base_seed ^ (rep as u64);
    let fail_all = |msg: String| ReplicationRecord {
        rep,
        seed,
        lambdas: Vec::new(),
        values: prep
            .stats
            .iter()
            .map(|_| StatOutcome { value: f64::NAN, reason: Some(msg.clone()) })
            .collect(),
    };
    let x = match sample_data(&prep.model, &prep.noise, seed) {
        Ok(x) => x,
        Err(e) => return fail_all(format!("sampling: {e}")),
    };
    let eigs = match spiked_eigs(&x, prep.k_top, Some(&prep.model)) {
        Ok(e) => e,
        Err(e) => return fail_all(format!("spectral: {e}")),
    };
    let lambdas: Vec<f64> = eigs.pairs.iter().map(|p| p.lambda).collect();
    let values = prep
        .stats
        .iter()
        .map(|stat| {
            let pair: &SpikedEigenPair = &eigs.pairs[stat.k - 1];
            let value = match &stat.kind {
                PreparedKind::Eigenvalue { sd, mean_shift } => {
                    let sol = &prep.solutions[&stat.k];
                    (pair.lambda - sol.t_k - mean_shift) / sd
                }
                PreparedKind::General(coeffs) => coeffs.apply(pair),
                PreparedKind::SelfOverlap(coeffs) => coeffs.apply(pair),
            };
            if value.is_finite() {
                StatOutcome { value, reason: None }
            } else {
                StatOutcome { value: f64::NAN, reason: Some("non-finite statistic".into()) }
            }
        })
        .collect();
    ReplicationRecord { rep, seed, lambdas, values }
}

/// Runs all replicates of a prepared experiment in parallel; the output
/// order and content depend only on the config.
pub fn run_prepared(prep: &PreparedExperiment) -> Vec<ReplicationRecord> {
    (0..prep.config.replications)
        .into_par_iter()
        .map(|rep| evaluate_replicate(prep, rep))
        .collect()
}

/// Prepares and runs an experiment config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(PreparedExperiment, Vec<ReplicationRecord>)> {
    let prep = prepare(config)?;
    let records = run_prepared(&prep);
    Ok((prep, records))
}

#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
    pub invalid: u64,
}

impl Histogram {
    fn collect(values: &[f64], invalid: u64) -> Self {
        let edges: Vec<f64> = (0..=HIST_BINS)
            .map(|i| HIST_LO + (HIST_HI - HIST_LO) * i as f64 / HIST_BINS as f64)
            .collect();
        let mut counts = vec![0u64; HIST_BINS];
        let mut below = 0;
        let mut above = 0;
        let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
        for &v in values {
            if v < HIST_LO {
                below += 1;
            } else if v >= HIST_HI {
                above += 1;
            } else {
                let bin = (((v - HIST_LO) / width) as usize).min(HIST_BINS - 1);
                counts[bin] += 1;
            }
        }
        Self { edges, counts, below, above, invalid }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above + self.invalid
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StatSummary {
    pub id: String,
    pub n_valid: usize,
    pub available: bool,
    pub mean: f64,
    pub sd: f64,
    pub ad_a2: Option<f64>,
    pub ad_p: Option<f64>,
    pub histogram: Histogram,
    pub failure_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationSummary {
    pub experiment: String,
    pub replications: usize,
    pub stats: Vec<StatSummary>,
}

/// Summary of one raw sample under the N(0, 1) reference: mean, standard
/// deviation, goodness-of-fit, histogram.
pub fn summarize_samples(id: &str, values: &[f64], invalid: u64) -> StatSummary {
    let n = values.len();
    let (mean, sd) = if n >= 2 {
        let m = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0);
        (m, var.sqrt())
    } else if n == 1 {
        (values[0], 0.0)
    } else {
        (f64::NAN, f64::NAN)
    };
    let (ad_a2, ad_p) = match ad_test(values) {
        Ok((a2, p)) => (Some(a2), Some(p)),
        Err(_) => (None, None),
    };
    StatSummary {
        id: id.to_string(),
        n_valid: n,
        available: n > 0,
        mean,
        sd,
        ad_a2,
        ad_p,
        histogram: Histogram::collect(values, invalid),
        failure_reasons: BTreeMap::new(),
    }
}

/// Per-statistic summaries over a replication batch. Failed replicates are
/// counted by reason and excluded from the moments.
pub fn summarize(prep: &PreparedExperiment, records: &[ReplicationRecord]) -> ReplicationSummary {
    let stats = prep
        .stats
        .iter()
        .enumerate()
        .map(|(idx, stat)| {
            let mut values = Vec::with_capacity(records.len());
            let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
            for rec in records {
                let outcome = &rec.values[idx];
                match &outcome.reason {
                    None => values.push(outcome.value),
                    Some(r) => *reasons.entry(r.clone()).or_default() += 1,
                }
            }
            let invalid = records.len() - values.len();
            let mut summary = summarize_samples(&stat.id, &values, invalid as u64);
            summary.failure_reasons = reasons;
            summary
        })
        .collect();
    ReplicationSummary {
        experiment: prep.config.name.clone(),
        replications: records.len(),
        stats,
    }
}

/// `records.csv`: one row per replicate per statistic.
pub fn write_records_csv(
    path: &Path,
    prep: &PreparedExperiment,
    records: &[ReplicationRecord],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "experiment,rep,statistic,value,reason")?;
    for rec in records {
        for (stat, outcome) in prep.stats.iter().zip(&rec.values) {
            writeln!(
                out,
                "{},{},{},{},{}",
                prep.config.name,
                rec.rep,
                stat.id,
                outcome.value,
                outcome.reason.as_deref().unwrap_or("")
            )?;
        }
    }
    Ok(())
}

/// `hist_<statistic>.csv`: bin bounds and counts, tails included.
pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "bin_lo,bin_hi,count")?;
    writeln!(out, "-inf,{},{}", hist.edges[0], hist.below)?;
    for (i, c) in hist.counts.iter().enumerate() {
        writeln!(out, "{},{},{}", hist.edges[i], hist.edges[i + 1], c)?;
    }
    writeln!(out, "{},+inf,{}", hist.edges[HIST_BINS], hist.above)?;
    Ok(())
}
