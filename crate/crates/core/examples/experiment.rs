//! Drives the runner from a TOML document, as `aat run --config` does.

use aat::experiment::{read_stamp, run, ExperimentConfig};

fn main() {
    let out = std::env::temp_dir().join("aat_experiment_example");
    let text = format!(
        r#"
seed = 7
out_dir = '{}'
steps = ["gradcheck", "synth-2d"]

[gradcheck]
points = 5

[synth_2d]
widths = [2, 64, 64, 1]
grid_points = 32
seed = 0
data = {{ kind = "moons", points_per_class = 200 }}
training = {{ iterations = 40, batch_total = 200, adam = {{ lr = 1e-3 }}, ball = {{ norm = "linf", eps = 0.5 }}, attack = {{ steps = 10, step_size = 0.05, clip = [-1e9, 1e9] }} }}
"#,
        out.display()
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let summary = run(&cfg).unwrap();
    println!("config {}", summary.config_hash);
    for p in &summary.artifacts {
        println!("  {}", p.display());
    }
    let (hash, seed) = read_stamp(&out.join("field_2d.csv")).unwrap();
    println!("field_2d.csv stamped with config {hash}, seed {seed}");
}
