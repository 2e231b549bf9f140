//! Spiked mean models and entrywise noise profiles.
//!
//! A data matrix is modeled as `X = H + W` where `H = V D V^T` is a
//! deterministic rank-K mean and `W` is a symmetric matrix of independent,
//! bounded noise entries on and above the diagonal. Without self loops the
//! observable matrix is `X - diag(X)` and the effective noise diagonal is the
//! constant `-H_ii`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};

const ORTHO_TOL: f64 = 1e-10;
const RECONSTRUCT_TOL: f64 = 1e-8;

/// Deterministic low-rank mean `H = V D V^T`.
///
/// Eigenvalues are ordered by decreasing magnitude; ties keep the
/// algebraically larger value first.
#[derive(Debug, Clone)]
pub struct SpikedMeanModel {
    n: usize,
    v: DMatrix<f64>,
    d: DVector<f64>,
}

/// Non-fatal conditions detected while building a model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelWarning {
    /// `|d_i| == |d_j|` for adjacent spikes: the gap condition fails and the
    /// corresponding eigenvectors are not identifiable individually.
    DegenerateSpikes { i: usize, j: usize },
    /// `d_i == -d_j`: sign-paired spikes, excluded from the gap condition.
    SignPairedSpikes { i: usize, j: usize },
}

impl SpikedMeanModel {
    /// Builds a model from an explicit orthonormal `V` (n×K) and spike vector
    /// `d` (length K), reordering columns by `|d|`.
    pub fn new(v: DMatrix<f64>, d: DVector<f64>) -> Result<(Self, Vec<ModelWarning>)> {
        let n = v.nrows();
        let k = v.ncols();
        if d.len() != k {
            return Err(AteError::DimensionMismatch { expected: k, got: d.len() });
        }
        let gram = v.transpose() * &v;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > ORTHO_TOL {
                    return Err(AteError::InvalidConfig(format!(
                        "eigenvector matrix not orthonormal: (V^T V)[{i},{j}] = {}",
                        gram[(i, j)]
                    )));
                }
            }
        }
        if d.iter().any(|&x| x == 0.0) {
            return Err(AteError::InvalidConfig("zero spike eigenvalue".into()));
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            d[b].abs()
                .partial_cmp(&d[a].abs())
                .unwrap()
                .then(d[b].partial_cmp(&d[a]).unwrap())
        });
        let v = DMatrix::from_columns(&order.iter().map(|&j| v.column(j)).collect::<Vec<_>>());
        let d = DVector::from_iterator(k, order.iter().map(|&j| d[j]));

        let mut warnings = Vec::new();
        for i in 0..k.saturating_sub(1) {
            let (a, b) = (d[i], d[i + 1]);
            if (a.abs() - b.abs()).abs() <= 1e-9 * a.abs().max(b.abs()) {
                if (a + b).abs() <= 1e-9 * a.abs() {
                    warnings.push(ModelWarning::SignPairedSpikes { i: i + 1, j: i + 2 });
                } else {
                    warnings.push(ModelWarning::DegenerateSpikes { i: i + 1, j: i + 2 });
                }
            }
        }
        Ok((Self { n, v, d }, warnings))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of spikes K.
    pub fn k(&self) -> usize {
        self.d.len()
    }

    /// Orthonormal eigenvector matrix, n×K.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Population eigenvalues ordered by decreasing magnitude.
    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    /// k-th population eigenvector (1-based spike index).
    pub fn vk(&self, k: usize) -> DVector<f64> {
        self.v.column(k - 1).into_owned()
    }

    /// k-th population eigenvalue (1-based spike index).
    pub fn dk(&self, k: usize) -> f64 {
        self.d[k - 1]
    }

    /// Materializes the mean matrix `V D V^T`.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.n);
        for k in 0..self.k() {
            let col = self.v.column(k);
            let dk = self.d[k];
            for i in 0..self.n {
                for j in 0..self.n {
                    h[(i, j)] += dk * col[i] * col[j];
                }
            }
        }
        h
    }
}

/// Sampling family behind a noise profile.
#[derive(Debug, Clone)]
pub enum NoiseFamily {
    /// `w_ij = Bernoulli(p_ij) - p_ij`; the data matrix keeps exact 0/1 entries.
    CenteredBernoulli { p: DMatrix<f64> },
    /// `w_ij = ±scale_ij` with equal probability (bounded custom family).
    ScaledSign { scale: DMatrix<f64> },
    /// Moment description only; `sample_*` is unavailable.
    MomentsOnly,
}

/// Entrywise moment description of the noise matrix `W`.
///
/// `sigma2`, `gamma3` and `kappa4` hold central moments: the variance, the
/// third central moment and `E[(w^2 - var)^2]` of each entry. For data
/// without self loops the diagonal is the constant `-H_ii`, so its variance
/// block is zero and `diag_mean` carries `-H_ii`.
#[derive(Debug, Clone)]
pub struct NoiseProfile {
    pub sigma2: DMatrix<f64>,
    pub gamma3: DMatrix<f64>,
    pub kappa4: DMatrix<f64>,
    pub diag_mean: DVector<f64>,
    pub family: NoiseFamily,
    pub self_loops: bool,
}

impl NoiseProfile {
    /// Centered Bernoulli noise with success matrix `p` (usually the mean
    /// matrix itself). With `self_loops` the diagonal is sampled like any
    /// other entry; otherwise it degenerates to the constant `-p_ii`.
    pub fn centered_bernoulli(p: DMatrix<f64>, self_loops: bool) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(AteError::DimensionMismatch { expected: n, got: p.ncols() });
        }
        for i in 0..n {
            for j in 0..n {
                let v = p[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(AteError::InvalidProbability { value: v, row: i, col: j });
                }
            }
        }
        let mut sigma2 = DMatrix::zeros(n, n);
        let mut gamma3 = DMatrix::zeros(n, n);
        let mut kappa4 = DMatrix::zeros(n, n);
        let mut diag_mean = DVector::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i == j && !self_loops {
                    continue;
                }
                let pij = p[(i, j)];
                let s2 = pij * (1.0 - pij);
                let q = 1.0 - pij;
                sigma2[(i, j)] = s2;
                gamma3[(i, j)] = s2 * (1.0 - 2.0 * pij);
                // E[w^4] - sigma^4 for w = Bernoulli(p) - p
                kappa4[(i, j)] = s2 * (q.powi(3) + pij.powi(3)) - s2 * s2;
            }
        }
        if !self_loops {
            for i in 0..n {
                diag_mean[i] = -p[(i, i)];
            }
        }
        Ok(Self {
            sigma2,
            gamma3,
            kappa4,
            diag_mean,
            family: NoiseFamily::CenteredBernoulli { p },
            self_loops,
        })
    }

    /// Sign noise `±scale_ij`; requires `scale` entries in [0, 1].
    pub fn scaled_sign(scale: DMatrix<f64>, self_loops: bool) -> Result<Self> {
        let n = scale.nrows();
        if scale.ncols() != n {
            return Err(AteError::DimensionMismatch { expected: n, got: scale.ncols() });
        }
        for i in 0..n {
            for j in 0..n {
                let s = scale[(i, j)];
                if !(0.0..=1.0).contains(&s) {
                    return Err(AteError::InvalidConfig(format!(
                        "sign-noise scale {s} at ({i}, {j}) outside [0, 1]"
                    )));
                }
            }
        }
        let mut sigma2 = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j && !self_loops {
                    continue;
                }
                sigma2[(i, j)] = scale[(i, j)] * scale[(i, j)];
            }
        }
        Ok(Self {
            sigma2,
            gamma3: DMatrix::zeros(n, n),
            kappa4: DMatrix::zeros(n, n),
            diag_mean: DVector::zeros(n),
            family: NoiseFamily::ScaledSign { scale },
            self_loops,
        })
    }

    /// Pure-moment profile for the classical convention `sigma_ij = 1` off
    /// the diagonal with diagonal variance 2. Not sampleable.
    pub fn unit_wigner(n: usize) -> Self {
        let mut sigma2 = DMatrix::from_element(n, n, 1.0);
        for i in 0..n {
            sigma2[(i, i)] = 2.0;
        }
        Self {
            sigma2,
            gamma3: DMatrix::zeros(n, n),
            kappa4: DMatrix::zeros(n, n),
            diag_mean: DVector::zeros(n),
            family: NoiseFamily::MomentsOnly,
            self_loops: true,
        }
    }

    /// Noise that is identically zero.
    pub fn zero(n: usize) -> Self {
        Self {
            sigma2: DMatrix::zeros(n, n),
            gamma3: DMatrix::zeros(n, n),
            kappa4: DMatrix::zeros(n, n),
            diag_mean: DVector::zeros(n),
            family: NoiseFamily::ScaledSign { scale: DMatrix::zeros(n, n) },
            self_loops: true,
        }
    }

    pub fn n(&self) -> usize {
        self.sigma2.nrows()
    }

    /// Variance of entry (i, j); the diagonal carries `var(w_ii)`.
    pub fn var(&self, i: usize, j: usize) -> f64 {
        self.sigma2[(i, j)]
    }

    /// Mean of entry (i, j): zero off the diagonal, `diag_mean_i` on it.
    pub fn mean(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.diag_mean[i]
        } else {
            0.0
        }
    }

    /// Smallest off-diagonal standard deviation (`sigma_min` of the dense
    /// regime condition).
    pub fn sigma_min(&self) -> f64 {
        let n = self.n();
        let mut m = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m = m.min(self.sigma2[(i, j)]);
                }
            }
        }
        m.max(0.0).sqrt()
    }
}

/// One sampled symmetric data matrix.
#[derive(Debug, Clone)]
pub struct SampleMatrix {
    pub x: DMatrix<f64>,
    pub seed: u64,
    pub self_loops: bool,
}

/// Draws `X = H + W`. With a Bernoulli family the entries are exact 0/1
/// indicators; the same seed always reproduces the same matrix bit for bit.
pub fn sample_data(model: &SpikedMeanModel, noise: &NoiseProfile, seed: u64) -> Result<SampleMatrix> {
    let n = model.n();
    if noise.n() != n {
        return Err(AteError::DimensionMismatch { expected: n, got: noise.n() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match &noise.family {
        NoiseFamily::CenteredBernoulli { p } => {
            let mut x = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    if i == j && !noise.self_loops {
                        continue;
                    }
                    let v = if rng.gen::<f64>() < p[(i, j)] { 1.0 } else { 0.0 };
                    x[(i, j)] = v;
                    x[(j, i)] = v;
                }
            }
            x
        }
        NoiseFamily::ScaledSign { scale } => {
            let h = model.mean();
            let mut x = h.clone();
            for i in 0..n {
                for j in i..n {
                    if i == j {
                        if !noise.self_loops {
                            x[(i, i)] = 0.0;
                        } else {
                            x[(i, i)] += sign_draw(&mut rng) * scale[(i, i)];
                        }
                        continue;
                    }
                    let w = sign_draw(&mut rng) * scale[(i, j)];
                    x[(i, j)] += w;
                    x[(j, i)] = x[(i, j)];
                }
            }
            x
        }
        NoiseFamily::MomentsOnly => return Err(AteError::SamplerUnavailable),
    };
    Ok(SampleMatrix { x, seed, self_loops: noise.self_loops })
}

/// Draws the centered noise matrix alone. Without self loops the diagonal is
/// the constant `diag_mean` (i.e. `-H_ii`), consuming no randomness.
pub fn sample_noise(noise: &NoiseProfile, seed: u64) -> Result<DMatrix<f64>> {
    let n = noise.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(n, n);
    match &noise.family {
        NoiseFamily::CenteredBernoulli { p } => {
            for i in 0..n {
                for j in i..n {
                    if i == j && !noise.self_loops {
                        w[(i, i)] = noise.diag_mean[i];
                        continue;
                    }
                    let pij = p[(i, j)];
                    let v = if rng.gen::<f64>() < pij { 1.0 - pij } else { -pij };
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                }
            }
        }
        NoiseFamily::ScaledSign { scale } => {
            for i in 0..n {
                for j in i..n {
                    if i == j && !noise.self_loops {
                        w[(i, i)] = noise.diag_mean[i];
                        continue;
                    }
                    let v = sign_draw(&mut rng) * scale[(i, j)];
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                }
            }
        }
        NoiseFamily::MomentsOnly => return Err(AteError::SamplerUnavailable),
    }
    Ok(w)
}

fn sign_draw(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen::<f64>() < 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// Builds a stochastic block model with hard memberships: node blocks of the
/// given sizes and connectivity matrix `p`. The eigenstructure comes from the
/// reduced K×K problem `diag(sqrt(sizes)) P diag(sqrt(sizes))`, which is exact
/// for block-constant means.
pub fn build_sbm(
    community_sizes: &[usize],
    p: &DMatrix<f64>,
    self_loops: bool,
) -> Result<(SpikedMeanModel, NoiseProfile, Vec<ModelWarning>)> {
    let k = community_sizes.len();
    if k == 0 || community_sizes.iter().any(|&s| s == 0) {
        return Err(AteError::InvalidConfig("community sizes must be positive".into()));
    }
    if p.nrows() != k || p.ncols() != k {
        return Err(AteError::DimensionMismatch { expected: k, got: p.nrows() });
    }
    for i in 0..k {
        for j in 0..k {
            if (p[(i, j)] - p[(j, i)]).abs() > 1e-12 {
                return Err(AteError::InvalidConfig("connectivity matrix not symmetric".into()));
            }
            if !(0.0..=1.0).contains(&p[(i, j)]) {
                return Err(AteError::InvalidProbability { value: p[(i, j)], row: i, col: j });
            }
        }
    }
    let n: usize = community_sizes.iter().sum();

    // Reduced problem: M = S^{1/2} P S^{1/2}, exact at O(K^3).
    let sqrt_sizes: Vec<f64> = community_sizes.iter().map(|&s| (s as f64).sqrt()).collect();
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] = sqrt_sizes[i] * p[(i, j)] * sqrt_sizes[j];
        }
    }
    let eig = m.symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if max_abs == 0.0 || eig.eigenvalues.iter().any(|&x| x.abs() <= 1e-12 * max_abs) {
        return Err(AteError::RankDeficientConnectivity);
    }

    // Lift reduced eigenvectors to block-constant columns of V.
    let mut v = DMatrix::zeros(n, k);
    let mut offsets = Vec::with_capacity(k);
    let mut acc = 0;
    for &s in community_sizes {
        offsets.push(acc);
        acc += s;
    }
    for col in 0..k {
        for blk in 0..k {
            let val = eig.eigenvectors[(blk, col)] / sqrt_sizes[blk];
            for r in 0..community_sizes[blk] {
                v[(offsets[blk] + r, col)] = val;
            }
        }
    }
    let d = DVector::from_iterator(k, eig.eigenvalues.iter().cloned());
    let (model, warnings) = SpikedMeanModel::new(v, d)?;

    // Bernoulli noise with success probabilities equal to the mean entries.
    let mut h = DMatrix::zeros(n, n);
    let mut blk_of = vec![0usize; n];
    for (b, &off) in offsets.iter().enumerate() {
        for r in 0..community_sizes[b] {
            blk_of[off + r] = b;
        }
    }
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = p[(blk_of[i], blk_of[j])];
        }
    }
    let noise = NoiseProfile::centered_bernoulli(h, self_loops)?;
    Ok((model, noise, warnings))
}

/// Degree-corrected mixed-membership mean `Theta Pi P Pi^T Theta`. The
/// eigenstructure comes from a dense eigendecomposition truncated to the K
/// leading nonzero eigenvalues.
pub fn build_dcmm(
    theta: &DVector<f64>,
    pi: &DMatrix<f64>,
    p: &DMatrix<f64>,
    self_loops: bool,
) -> Result<(SpikedMeanModel, NoiseProfile, Vec<ModelWarning>)> {
    let n = theta.len();
    let k = p.nrows();
    if pi.nrows() != n || pi.ncols() != k || p.ncols() != k {
        return Err(AteError::DimensionMismatch { expected: n, got: pi.nrows() });
    }
    if theta.iter().any(|&t| t <= 0.0) {
        return Err(AteError::InvalidConfig("degree parameters must be positive".into()));
    }
    for i in 0..n {
        let row_sum: f64 = (0..k).map(|j| pi[(i, j)]).sum();
        if (row_sum - 1.0).abs() > 1e-10 || (0..k).any(|j| pi[(i, j)] < 0.0) {
            return Err(AteError::InvalidConfig(format!(
                "membership row {i} must be nonnegative and sum to 1"
            )));
        }
    }

    // H = Theta Pi P Pi^T Theta, entrywise.
    let mut h = DMatrix::zeros(n, n);
    let pp = pi * p; // n x K
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..k {
                s += pp[(i, c)] * pi[(j, c)];
            }
            let val = theta[i] * theta[j] * s;
            if !(0.0..=1.0).contains(&val) {
                return Err(AteError::InvalidProbability { value: val, row: i, col: j });
            }
            h[(i, j)] = val;
        }
    }

    let eig = h.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap()
            .then(eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap())
    });
    let lead = eig.eigenvalues[idx[0]].abs();
    if lead == 0.0 || eig.eigenvalues[idx[k - 1]].abs() <= 1e-10 * lead {
        return Err(AteError::RankDeficientConnectivity);
    }
    let v = DMatrix::from_columns(
        &idx[..k].iter().map(|&j| eig.eigenvectors.column(j)).collect::<Vec<_>>(),
    );
    let d = DVector::from_iterator(k, idx[..k].iter().map(|&j| eig.eigenvalues[j]));
    let (model, warnings) = SpikedMeanModel::new(v, d)?;

    let err = (&model.mean() - &h).abs().max();
    if err > RECONSTRUCT_TOL {
        return Err(AteError::InvalidConfig(format!(
            "mean reconstruction failed: max deviation {err:.3e} (is the mean rank {k}?)"
        )));
    }
    let noise = NoiseProfile::centered_bernoulli(h, self_loops)?;
    Ok((model, noise, warnings))
}

/// JSON-facing model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelSpec {
    Sbm {
        n: usize,
        community_sizes: Vec<usize>,
        connectivity: Vec<Vec<f64>>,
    },
    Dcmm {
        n: usize,
        theta: Vec<f64>,
        pi: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
    },
    Custom {
        n: usize,
        rank: usize,
        h: Vec<Vec<f64>>,
    },
}

impl ModelSpec {
    pub fn n(&self) -> usize {
        match self {
            ModelSpec::Sbm { n, .. } | ModelSpec::Dcmm { n, .. } | ModelSpec::Custom { n, .. } => *n,
        }
    }

    pub fn build(&self, self_loops: bool) -> Result<(SpikedMeanModel, NoiseProfile, Vec<ModelWarning>)> {
        match self {
            ModelSpec::Sbm { n, community_sizes, connectivity } => {
                if community_sizes.iter().sum::<usize>() != *n {
                    return Err(AteError::InvalidConfig(
                        "community sizes do not sum to n".into(),
                    ));
                }
                let k = community_sizes.len();
                let p = rows_to_matrix(connectivity, k, k)?;
                build_sbm(community_sizes, &p, self_loops)
            }
            ModelSpec::Dcmm { n, theta, pi, p } => {
                if theta.len() != *n {
                    return Err(AteError::InvalidConfig("theta length differs from n".into()));
                }
                let k = p.len();
                let theta = DVector::from_column_slice(theta);
                let pi = rows_to_matrix(pi, *n, k)?;
                let p = rows_to_matrix(p, k, k)?;
                build_dcmm(&theta, &pi, &p, self_loops)
            }
            ModelSpec::Custom { n, rank, h } => {
                let h = rows_to_matrix(h, *n, *n)?;
                let sym_err = (&h - h.transpose()).abs().max();
                if sym_err > 1e-12 {
                    return Err(AteError::InvalidConfig("custom mean not symmetric".into()));
                }
                let eig = h.clone().symmetric_eigen();
                let mut idx: Vec<usize> = (0..*n).collect();
                idx.sort_by(|&a, &b| {
                    eig.eigenvalues[b].abs().partial_cmp(&eig.eigenvalues[a].abs()).unwrap()
                });
                let v = DMatrix::from_columns(
                    &idx[..*rank].iter().map(|&j| eig.eigenvectors.column(j)).collect::<Vec<_>>(),
                );
                let d = DVector::from_iterator(*rank, idx[..*rank].iter().map(|&j| eig.eigenvalues[j]));
                let (model, warnings) = SpikedMeanModel::new(v, d)?;
                let noise = NoiseProfile::centered_bernoulli(h, self_loops)?;
                Ok((model, noise, warnings))
            }
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], nr: usize, nc: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(AteError::InvalidConfig(format!("expected a {nr}x{nc} matrix")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_block(r: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[2.0 * r, r, r, 2.0 * r])
    }

    #[test]
    fn sbm_equal_blocks_has_closed_form_spikes() {
        // d1 = 3mr, d2 = mr with v1 proportional to the all-ones vector.
        let (model, _, warnings) = build_sbm(&[1500, 1500], &two_block(0.4), true).unwrap();
        assert!(warnings.is_empty());
        assert_relative_eq!(model.dk(1), 1800.0, max_relative = 1e-12);
        assert_relative_eq!(model.dk(2), 600.0, max_relative = 1e-12);
        let n = 3000.0f64;
        let v1 = model.vk(1);
        let v2 = model.vk(2);
        let s = v1[0].signum();
        for i in 0..3000 {
            assert_relative_eq!(s * v1[i], 1.0 / n.sqrt(), max_relative = 1e-10);
            let expect = if i < 1500 { 1.0 } else { -1.0 } / n.sqrt();
            assert_relative_eq!(v2[i].abs(), expect.abs(), max_relative = 1e-10);
        }
        assert_eq!(v2[0].signum(), -v2[2999].signum());
    }

    #[test]
    fn sbm_mean_reconstruction() {
        let p = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 0.5]);
        let (model, noise, _) = build_sbm(&[3, 5], &p, true).unwrap();
        let h = match &noise.family {
            NoiseFamily::CenteredBernoulli { p } => p.clone(),
            _ => unreachable!(),
        };
        assert!((&model.mean() - &h).abs().max() <= 1e-8);
    }

    #[test]
    fn sbm_degenerate_spikes_warn() {
        let p = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.3]);
        let (model, _, warnings) = build_sbm(&[1, 1], &p, true).unwrap();
        assert_eq!(model.dk(1), 0.3);
        assert_eq!(model.dk(2), 0.3);
        assert!(matches!(warnings[0], ModelWarning::DegenerateSpikes { .. }));
    }

    #[test]
    fn sbm_singular_connectivity_rejected() {
        let p = DMatrix::from_row_slice(2, 2, &[0.4, 0.4, 0.4, 0.4]);
        let err = build_sbm(&[5, 5], &p, true).unwrap_err();
        assert!(matches!(err, AteError::RankDeficientConnectivity));
    }

    #[test]
    fn dcmm_with_unit_theta_matches_sbm() {
        let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
        let (sbm, _, _) = build_sbm(&[2, 2], &p, true).unwrap();
        let theta = DVector::from_element(4, 1.0);
        let pi = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let (dcmm, _, _) = build_dcmm(&theta, &pi, &p, true).unwrap();
        assert_relative_eq!(sbm.dk(1), dcmm.dk(1), max_relative = 1e-10);
        assert_relative_eq!(sbm.dk(2), dcmm.dk(2), max_relative = 1e-10);
        for k in 1..=2 {
            let a = sbm.vk(k);
            let b = dcmm.vk(k);
            let dot = a.dot(&b);
            assert_relative_eq!(dot.abs(), 1.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn dcmm_heterogeneous_degrees() {
        // Explicit 4x4 mean, checked against the dense eigendecomposition.
        let theta = DVector::from_column_slice(&[1.0, 1.0, 0.5, 0.5]);
        let pi = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
        let (model, _, _) = build_dcmm(&theta, &pi, &p, true).unwrap();
        assert_eq!(model.k(), 2);
        let mut h = DMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let (bi, bj) = (i / 2, j / 2);
                h[(i, j)] = theta[i] * theta[j] * p[(bi, bj)];
            }
        }
        assert!((&model.mean() - &h).abs().max() <= 1e-10);
        // rank of the mean equals K for nonsingular P
        let eig = h.symmetric_eigen();
        let nonzero = eig.eigenvalues.iter().filter(|x| x.abs() > 1e-10).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn dcmm_rejects_invalid_probability() {
        let theta = DVector::from_column_slice(&[2.0, 2.0]);
        let pi = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let p = DMatrix::from_row_slice(1, 1, &[0.5]);
        let err = build_dcmm(&theta, &pi, &p, true).unwrap_err();
        assert!(matches!(err, AteError::InvalidProbability { .. }));
    }

    #[test]
    fn zero_noise_sample_is_the_mean() {
        let p = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 0.5]);
        let (model, _, _) = build_sbm(&[2, 2], &p, true).unwrap();
        let noise = NoiseProfile::zero(4);
        let s = sample_data(&model, &noise, 3).unwrap();
        assert!((&s.x - model.mean()).abs().max() <= 1e-12);

        let mut no_loops = NoiseProfile::zero(4);
        no_loops.self_loops = false;
        let s = sample_data(&model, &no_loops, 3).unwrap();
        let mut expected = model.mean();
        for i in 0..4 {
            expected[(i, i)] = 0.0;
        }
        assert!((&s.x - expected).abs().max() <= 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.3, 0.6]);
        let (model, noise, _) = build_sbm(&[10, 10], &p, true).unwrap();
        let a = sample_data(&model, &noise, 42).unwrap();
        let b = sample_data(&model, &noise, 42).unwrap();
        assert_eq!(a.x, b.x);
        let c = sample_data(&model, &noise, 43).unwrap();
        assert_ne!(a.x, c.x);
        let wa = sample_noise(&noise, 9).unwrap();
        let wb = sample_noise(&noise, 9).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn sample_symmetry_and_diagonal_conventions() {
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.3, 0.6]);
        let (model, noise, _) = build_sbm(&[8, 8], &p, false).unwrap();
        let s = sample_data(&model, &noise, 1).unwrap();
        assert_eq!(s.x, s.x.transpose());
        for i in 0..16 {
            assert_eq!(s.x[(i, i)], 0.0);
        }
        let w = sample_noise(&noise, 1).unwrap();
        for i in 0..16 {
            assert_eq!(w[(i, i)], noise.diag_mean[i]);
        }
    }

    #[test]
    fn bernoulli_sample_mean_follows_the_law_of_large_numbers() {
        // Empirical mean of a single entry over many draws stays within
        // 3 sigma / sqrt(reps) of the model mean.
        let p = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.3, 0.6]);
        let (model, noise, _) = build_sbm(&[2, 2], &p, true).unwrap();
        let reps = 100_000;
        let mut sum01 = 0.0;
        let mut sumw = 0.0;
        let mut sumw2 = 0.0;
        for r in 0..reps {
            let s = sample_data(&model, &noise, r).unwrap();
            sum01 += s.x[(0, 1)];
            let w = sample_noise(&noise, r + reps).unwrap();
            sumw += w[(0, 2)];
            sumw2 += w[(0, 2)] * w[(0, 2)];
        }
        let m = reps as f64;
        let p01 = 0.6;
        let tol = 3.0 * (p01 * (1.0 - p01) / m).sqrt();
        assert!((sum01 / m - p01).abs() <= tol, "mean {} vs {}", sum01 / m, p01);
        let sigma = (0.3f64 * 0.7).sqrt();
        assert!((sumw / m).abs() <= 3.0 * sigma / m.sqrt());
        let var_hat = sumw2 / m - (sumw / m).powi(2);
        assert!((var_hat - 0.21).abs() / 0.21 <= 0.05, "variance {} vs 0.21", var_hat);
    }

    #[test]
    fn model_spec_round_trip() {
        let spec = ModelSpec::Sbm {
            n: 4,
            community_sizes: vec![2, 2],
            connectivity: vec![vec![0.8, 0.4], vec![0.4, 0.8]],
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        let (m1, _, _) = spec.build(true).unwrap();
        let (m2, _, _) = back.build(true).unwrap();
        assert_eq!(m1.d(), m2.d());
    }
}
