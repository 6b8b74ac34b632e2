//! Gibbs density of an AAT-trained 1-D detector against the true two-mode
//! mixture and an ordinarily trained baseline. Optional arg: iterations.

use aat::synth::{run_1d_benchmark, Synth1dConfig};

fn main() {
    let mut cfg = Synth1dConfig::default();
    if let Some(n) = std::env::args().nth(1) {
        cfg.training.iterations = n.parse().unwrap();
    }
    let r = run_1d_benchmark(&cfg).unwrap();
    println!("AAT TV {:.4}, baseline TV {:.4}, AAT modes {:?}", r.aat_tv, r.baseline_tv, r.aat_modes);
    let out = std::env::temp_dir().join("aat_density_1d");
    r.write_csvs(&out).unwrap();
    println!("densities written to {}", out.display());
}
