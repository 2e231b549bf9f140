//! Regenerates the Anderson-Darling case-0 calibration table.
//!
//! Prints `(A^2 quantile, upper-tail p)` anchors in the exact form frozen in
//! `src/adtest.rs`. Run with:
//!
//! ```text
//! cargo run --release --example calibrate_ad [reps] [sample_size] [seed]
//! ```

fn main() {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1_000_000);
    let sample_size: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(20240612);

    eprintln!("calibrating: reps = {reps}, sample size = {sample_size}, seed = {seed}");
    let t0 = std::time::Instant::now();
    let table = ate_core::adtest::calibrate(reps, sample_size, seed);
    eprintln!("done in {:?}", t0.elapsed());

    println!("/// Frozen output of `calibrate({reps}, {sample_size}, {seed})`; regenerate with");
    println!("/// `cargo run --release --example calibrate_ad`.");
    println!("const CALIBRATION: &[(f64, f64)] = &[");
    for (a2, p) in table {
        println!("    ({a2:.6}, {p}),");
    }
    println!("];");
}
