//! The five decoding policies side by side, and the contrastive duality.
//!
//! `cargo run --release --example decode_policies`

mod common;

use vpfc_lab::experiment::{question_input, question_seed};
use vpfc_lab::intervene::VpfcParams;
use vpfc_lab::policy::{duality_check, make_v_high, make_v_low, run_policy, PolicyKind, PolicyParams};
use vpfc_lab::tokens;

fn main() {
    let w = common::model();
    let data = common::dataset(10);
    let vpfc = VpfcParams::default();

    print!("{:<24}", "question");
    for kind in PolicyKind::ALL {
        print!(" {:>9}", kind.name());
    }
    println!();
    for q in data.questions.iter().take(10) {
        let input = question_input(&data, q).unwrap();
        print!(
            "{:<24}",
            format!("{} ({:?})", data.world.vocab.categories[q.object].name, q.label)
        );
        for kind in PolicyKind::ALL {
            let out = run_policy(&w, &input, &PolicyParams::of(kind), &vpfc, question_seed(0, &q.id), 1).unwrap();
            print!(" {:>9.4}", out.decoded.distributions[0][tokens::YES]);
        }
        println!();
    }

    let input = question_input(&data, &data.questions[0]).unwrap();
    let low = make_v_low(&w, &input, 0.25).unwrap();
    let high = make_v_high(&w, &input, 0.25).unwrap();
    println!("kept visual tokens: low {:?}", &low.kept_indices()[..8]);
    println!("                    high {:?}", &high.kept_indices()[..8]);

    let zh: Vec<f64> = (0..8).map(|i| (i as f64).sin() * 3.0).collect();
    let zl: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos() * 2.0).collect();
    for alpha in [0.5, 1.0, 2.0] {
        println!(
            "midpoint duality gap at alpha {alpha}: {:.2e}",
            duality_check(&zh, &zl, alpha).unwrap()
        );
    }
}
