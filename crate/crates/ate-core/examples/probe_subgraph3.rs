//! Proxy-only seed-group comparison: is the calibration unbiased?

use ate_core::model::{build_sbm, sample_noise};
use nalgebra::{DMatrix, DVector};

fn proxy_stat(w: &DMatrix<f64>, v: &DVector<f64>, d: f64) -> f64 {
    let wv = w * v;
    let w2v = w * &wv;
    let w3v = w * &w2v;
    let omega = v.dot(&wv);
    let q2 = wv.dot(&wv);
    let q3 = wv.dot(&w2v);
    let q4 = w2v.dot(&w2v);
    let q5 = w2v.dot(&w3v);
    let q6 = w3v.dot(&w3v);
    let g = |z: f64| {
        1.0 - d
            * (1.0 / z
                + omega / z.powi(2)
                + q2 / z.powi(3)
                + q3 / z.powi(4)
                + q4 / z.powi(5)
                + q5 / z.powi(6)
                + q6 / z.powi(7))
    };
    let gd = |z: f64| {
        d * (1.0 / z.powi(2)
            + 2.0 * omega / z.powi(3)
            + 3.0 * q2 / z.powi(4)
            + 4.0 * q3 / z.powi(5)
            + 5.0 * q4 / z.powi(6)
            + 6.0 * q5 / z.powi(7)
            + 7.0 * q6 / z.powi(8))
    };
    let mut z = d + omega + q2 / d;
    for _ in 0..60 {
        let step = g(z) / gd(z);
        z -= step;
        if step.abs() < 1e-12 * z.abs() {
            break;
        }
    }
    let mprime = 1.0 / z.powi(2)
        + 2.0 * omega / z.powi(3)
        + 3.0 * q2 / z.powi(4)
        + 4.0 * q3 / z.powi(5)
        + 5.0 * q4 / z.powi(6)
        + 6.0 * q5 / z.powi(7)
        + 7.0 * q6 / z.powi(8);
    let overlap2 = 1.0 / (d * d * mprime);
    z * z * (1.0 - overlap2)
}

fn main() {
    let n = 1000usize;
    let p = 0.1;
    let pm = DMatrix::from_row_slice(1, 1, &[p]);
    let (_, noise, _) = build_sbm(&[n], &pm, true).unwrap();
    let v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let d = n as f64 * p;
    for (name, base, b) in [("group-A", 0u64, 4000u64), ("group-B", 900_000, 4000)] {
        let mut fs = Vec::new();
        for s in 0..b {
            let w = sample_noise(&noise, base + s).unwrap();
            fs.push(proxy_stat(&w, &v, d));
        }
        let mu = fs.iter().sum::<f64>() / fs.len() as f64;
        let sd =
            (fs.iter().map(|f| (f - mu) * (f - mu)).sum::<f64>() / (fs.len() as f64 - 1.0)).sqrt();
        println!("{name}: mean {mu:.4} sd {sd:.4} se {:.4}", sd / (b as f64).sqrt());
    }
}
