//! Directional enhancement probe, head saliency and the steering pipeline.
//!
//! `cargo run --release --example steering`

mod common;

use vpfc_lab::experiment::question_input;
use vpfc_lab::intervene::{directional_probe, vpfc_pipeline, VpfcParams};
use vpfc_lab::tokens;

fn main() {
    let w = common::model();
    let data = common::dataset(10);
    let params = VpfcParams::default();

    println!(
        "{:<26} {:>7} {:>9} {:>9} {:>8}",
        "probe", "P(yes)", "dP(HCVR)", "dP(LCVR)", "spread"
    );
    for q in data.questions.iter().take(8) {
        let input = question_input(&data, q).unwrap();
        let p = directional_probe(&w, &input, &params, 0.5, tokens::YES).unwrap();
        let label = format!("{} ({:?})", data.world.vocab.categories[q.object].name, q.label);
        println!(
            "{label:<26} {:>7.4} {:>+9.4} {:>+9.4} {:>8.3}",
            p.base,
            p.high_delta(),
            p.low_delta(),
            p.standard_distance
        );
    }

    let q = &data.questions[0];
    let input = question_input(&data, q).unwrap();
    for alpha in [0.0, 4.0, 16.0] {
        let p = VpfcParams {
            alpha_steer: alpha,
            ..params.clone()
        };
        let (out, record) = vpfc_pipeline(&w, &input, &p, 2).unwrap();
        let heads: Vec<String> = record.selected_heads.iter().map(ToString::to_string).collect();
        println!(
            "alpha {alpha:>4}: P(yes) {:.4} tokens {:?} steered heads {}",
            out.distributions[0][tokens::YES],
            out.tokens,
            heads.join(" ")
        );
    }
    let (_, record) = vpfc_pipeline(&w, &input, &params, 1).unwrap();
    let json = record.to_json().unwrap();
    println!(
        "intervention record: {} bytes of JSON, region {:?}",
        json.len(),
        record.region.map(|r| r.cells)
    );
}
