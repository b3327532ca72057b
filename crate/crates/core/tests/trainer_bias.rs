mod common;

use vpfc_lab::bench::PopeSubset;
use vpfc_lab::eval::{pope_metrics, HallucinationReport};
use vpfc_lab::experiment::{answer_questions, PolicyEntry, QuestionRecord};
use vpfc_lab::intervene::VpfcParams;
use vpfc_lab::model::load_checkpoint;
use vpfc_lab::policy::PolicyKind;

use common::{Family, SEEDS};

fn regular_report(fam: Family, subset: PopeSubset) -> HallucinationReport {
    let w = load_checkpoint(fam.checkpoint()).unwrap();
    let data = fam.dataset();
    let records = answer_questions(
        &w,
        &data,
        data.questions_in(subset),
        &PolicyEntry::of(PolicyKind::Regular),
        &VpfcParams::default(),
        0,
        |_, _| {},
    )
    .unwrap();
    let preds: Vec<_> = records.iter().map(QuestionRecord::prediction).collect();
    pope_metrics(&preds).unwrap()
}

#[test]
fn unbiased_model_answers_held_out_probes() {
    let r = regular_report(Family::new(0.0, 0.0, 0), PopeSubset::Random);
    println!("random accuracy {:.4} over {} questions", r.accuracy, r.total);
    assert!(r.total >= 200);
    assert!(r.accuracy >= 0.9, "accuracy {}", r.accuracy);
}

#[test]
fn bias_knob_raises_fabrications() {
    let knobs = [0.0, 0.5, 0.9];
    let mut means = Vec::new();
    let mut per_seed = Vec::new();
    for &k in &knobs {
        let counts: Vec<usize> = SEEDS
            .iter()
            .map(|&s| regular_report(Family::new(k, 0.3, s), PopeSubset::Adversarial).fabrication)
            .collect();
        println!("kappa {k}: adversarial fabrications {counts:?}");
        means.push(counts.iter().sum::<usize>() as f64 / counts.len() as f64);
        per_seed.push(counts);
    }
    for (s, (lo, hi)) in per_seed[0].iter().zip(&per_seed[2]).enumerate() {
        assert!(hi > lo, "seed {s}: kappa 0.9 fabrications {hi} vs kappa 0 {lo}");
    }
    assert!(means.windows(2).all(|m| m[0] <= m[1]), "means {means:?}");
}
