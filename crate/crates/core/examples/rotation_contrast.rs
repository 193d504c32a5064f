//! Runs the rotation contrast and prints per-architecture accuracies.
//! Usage: rotation_contrast [config.json]

use gcnn_core::experiments::{rotation_contrast, ContrastConfig};

fn main() {
    let cfg: ContrastConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).expect("readable config")).expect("valid config"),
        None => ContrastConfig::default(),
    };
    let report = rotation_contrast(&cfg).unwrap_or_else(|e| panic!("{e}"));
    for (name, r) in [("gcnn", Some(&report.gcnn)), ("pcnn", report.pcnn.as_ref())] {
        if let Some(r) = r {
            println!(
                "{name}: base epoch {} val err {:.3} | baseline {:.4} ± {:.4} | rotated {:.4} ± {:.4} | drop {:.2} pts",
                r.base.chosen_epoch,
                r.base.best_val_error(),
                r.baseline.summary.mean_accuracy,
                r.baseline.summary.std_accuracy,
                r.rotated.summary.mean_accuracy,
                r.rotated.summary.std_accuracy,
                r.drop_points()
            );
        }
    }
    println!("wall clock {:.1} s", report.wall_clock_secs);
}
