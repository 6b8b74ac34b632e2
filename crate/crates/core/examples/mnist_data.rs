//! Loads the bundled desk-scale splits. Pass a preset name (`mnist-mini`, `mnist-10k`).

use aat::data::{bundled_data_dir, PresetSpec};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "mnist-mini".into());
    let splits = PresetSpec::by_name(&name).unwrap().load(&bundled_data_dir()).unwrap();
    for (part, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let counts: Vec<usize> = (0..d.classes).map(|k| d.class_indices(k).len()).collect();
        println!("{part:>5}: {} samples of dim {}, per class {counts:?}", d.len(), d.dim());
    }
}
