//! A config-driven run: report bundle, steering sweep and recount.
//!
//! `cargo run --release --example experiment_runner`

mod common;

use vpfc_lab::bench::PopeSubset;
use vpfc_lab::experiment::{recount_bundle, run_experiment, run_sweep, ExperimentConfig, SweepParam};
use vpfc_lab::model::save_checkpoint;

fn main() {
    let dir = common::out_dir().join("experiment");
    std::fs::create_dir_all(&dir).unwrap();
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&common::model(), &checkpoint).unwrap();

    let mut config = ExperimentConfig::from_toml(
        r#"
        name = "example"
        subsets = ["adversarial"]

        [data]
        num_scenes = 40

        [[policies]]
        policy = "regular"

        [[policies]]
        policy = "vcd"

        [[policies]]
        policy = "vpfc"

        [[policies]]
        name = "vpfc-off"
        policy = "vpfc"
        [policies.vpfc]
        centroid_mode = "off"

        [captions]
        count = 5

        [sweep]
        alpha = [0, 2, 4, 8, 16]
        "#,
    )
    .unwrap();
    config.checkpoint = checkpoint;
    config.output_dir = dir.join("bundle");

    let bundle = run_experiment(&config).unwrap();
    for d in &bundle.deltas {
        println!(
            "{:<9} accuracy {:.3} ({:+.3}) omission {:>3} ({:+}) fabrication {:>3} ({:+})",
            d.policy, d.accuracy, d.delta_accuracy, d.omission, d.delta_omission, d.fabrication, d.delta_fabrication
        );
    }
    for c in &bundle.chair {
        println!(
            "{:<9} CHAIR_i {:.3} CHAIR_s {:.3}",
            c.policy, c.report.chair_i, c.report.chair_s
        );
    }

    let sweep = run_sweep(&config, SweepParam::Alpha).unwrap();
    sweep.write(&config.output_dir).unwrap();
    for r in &sweep.rows {
        println!(
            "alpha {:>4}: accuracy {:.3} omission {} fabrication {}",
            r.value, r.accuracy, r.omission, r.fabrication
        );
    }

    let rc = recount_bundle(&config.output_dir).unwrap();
    assert!(rc.is_consistent());
    let regular = rc
        .cells
        .iter()
        .find(|c| c.policy == "regular" && c.subset == PopeSubset::Adversarial)
        .unwrap();
    println!(
        "recounted {} cells from the prediction log; regular accuracy {:.3}; bundle at {}",
        rc.cells.len(),
        regular.report.accuracy,
        config.output_dir.display()
    );
}
