//! Minimum-distortion attack by bisection on a two-class linear toy whose
//! decision margin is known in closed form.

use aat::attacks::PgdConfig;
use aat::distortion::{mean_l2_distortion, trace_has_prefix_structure, BsearchConfig};
use aat::models::{ArchSpec, Model, Param};
use aat::numerics::Tensor;

fn linear(w: [f64; 2], b: f64) -> Model {
    let params = vec![
        Param { name: "layer0.weight".into(), value: Tensor::new(vec![2, 1], w.to_vec()).unwrap() },
        Param { name: "layer0.bias".into(), value: Tensor::vector(vec![b]) },
    ];
    Model::from_params(ArchSpec::mlp(&[2, 1]), params).unwrap()
}

fn main() {
    let a = 4.0;
    let detectors = vec![linear([-a, 0.0], a * 0.5), linear([a, 0.0], -a * 0.5)];
    let threshold = 0.4;
    let x = Tensor::from_rows(&[vec![0.2, 0.5], vec![0.3, 0.1], vec![0.45, 0.9]]).unwrap();
    let cfg = BsearchConfig { c_init: 4.0, c_lo: 0.0, c_hi: 8.0, depth: 10, pgd: PgdConfig::new(200, 0.01), threshold };
    let s = mean_l2_distortion(&detectors, &x, &[0, 0, 0], &cfg, 0).unwrap();
    for (i, o) in s.outcomes.iter().enumerate() {
        let margin = 0.5 + threshold / a - x.row(i)[0];
        println!(
            "sample {i}: margin {margin:.4}, found {:.4} at c = {:?}, prefix ok: {}",
            o.l2(x.row(i)).unwrap_or(f64::NAN),
            o.final_c,
            trace_has_prefix_structure(&o.trace)
        );
    }
    println!("mean L2 {:.4}, attacked fraction {:.2}", s.mean_l2, s.fpr);
    print!("{}", s.trace_csv());
}
