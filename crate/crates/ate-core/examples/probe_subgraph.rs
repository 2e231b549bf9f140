//! Scratch calibration probe for the density-test centering variants.

use ate_core::ate::{solve_tk, SolverOptions};
use ate_core::model::{build_sbm, sample_data};
use ate_core::moments::{homogeneous_qf_variance_exact, MomentTable};
use ate_core::spectral::spiked_eigs;
use nalgebra::DMatrix;

fn main() {
    let n = 1000usize;
    let p = 0.1;
    let reps = 200u64;
    let pm = DMatrix::from_row_slice(1, 1, &[p]);
    let (model, noise, _) = build_sbm(&[n], &pm, true).unwrap();

    let mut t_lit = Vec::new();
    let mut t_exact_lam = Vec::new();
    let mut t_exact_that = Vec::new();

    for seed in 0..reps {
        let x = sample_data(&model, &noise, seed).unwrap();
        let nf = n as f64;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += x.x[(i, j)];
                }
            }
        }
        let p_hat = s / (nf * (nf - 1.0));
        let eigs = spiked_eigs(&x, 1, None).unwrap();
        let lambda = eigs.pairs[0].lambda;
        let overlap = (eigs.pairs[0].vhat.iter().sum::<f64>() / nf.sqrt()).abs();
        let sd = homogeneous_qf_variance_exact(n, p_hat).sqrt();

        // literal corollary form
        t_lit.push((2.0 * lambda * lambda * (overlap - 1.0) + nf * p_hat * (1.0 - p_hat)) / sd);

        // exact plug-in center from the null model
        let null_p = DMatrix::from_row_slice(1, 1, &[p_hat]);
        let (null_model, null_noise, _) = build_sbm(&[n], &null_p, true).unwrap();
        let table = MomentTable::build(&null_noise, 2, 16, 0).unwrap();
        let sol = solve_tk(1, &null_model, &table, &SolverOptions::default()).unwrap();
        let center = sol.a_self * sol.p_tilde.sqrt();
        t_exact_lam.push(2.0 * lambda * lambda * (overlap + center) / sd);
        t_exact_that.push(2.0 * sol.t_k * sol.t_k * (overlap + center) / sd);
    }

    for (name, ts) in
        [("literal", &t_lit), ("exact-center-lambda", &t_exact_lam), ("exact-center-that", &t_exact_that)]
    {
        let m = ts.iter().sum::<f64>() / ts.len() as f64;
        let sd = (ts.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (ts.len() as f64 - 1.0)).sqrt();
        let rej = ts.iter().filter(|&&t| t < -1.6448536269514722).count();
        println!("{name:>22}: mean {m:+.4}  sd {sd:.4}  left-tail rejections {rej}/{}", ts.len());
    }
}
