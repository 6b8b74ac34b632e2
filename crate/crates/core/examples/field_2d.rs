//! Sigmoid field of a 2-D detector trained with AAT, drawn as a coarse
//! character map. Args: dataset kind, iterations.

use aat::synth::{train_and_map_2d, Synth2dConfig, Toy2DKind};

fn main() {
    let mut args = std::env::args().skip(1);
    let kind: Toy2DKind = args.next().unwrap_or_else(|| "circles".into()).parse().unwrap();
    let mut cfg = Synth2dConfig::new(kind);
    cfg.training.iterations = args.next().map_or(60, |s| s.parse().unwrap());
    cfg.widths = vec![2, 128, 128, 1];
    cfg.grid_points = 48;
    let r = train_and_map_2d(&cfg).unwrap();
    let n = r.field.xs.len();
    for j in (0..n).rev().step_by(2) {
        let line: String = (0..n)
            .map(|i| match r.field.values[j * n + i] {
                v if v > 0.9 => '#',
                v if v > 0.5 => '+',
                v if v > 0.1 => '.',
                _ => ' ',
            })
            .collect();
        println!("{line}");
    }
    println!("held-out {:.3}, far field {:.3}", r.held_out_mean_sigmoid, r.far_field_mean_sigmoid);
}
