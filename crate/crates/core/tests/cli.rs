use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 12] = [
    "--set",
    "model.num_layers=2",
    "--set",
    "model.num_heads=4",
    "--set",
    "model.model_dim=16",
    "--set",
    "vpfc.localization_heads=2",
    "--set",
    "data.num_scenes=8",
    "--set",
    "train.num_scenes=16",
];

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpfc-lab"))
        .current_dir(root)
        .env("VPFC_LAB_OUT", root.join("out"))
        .args(TINY)
        .args(["--checkpoint", "m.ckpt", "--output-dir", "run"])
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn verbs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_eq!(code(&run(root, &["train", "--epochs", "1"])), 0);
    assert!(root.join("m.ckpt").is_file());
    assert!(root.join("out/run/training_log.csv").is_file());

    assert_eq!(code(&run(root, &["build-data"])), 0);
    assert!(root.join("out/run/dataset.json").is_file());

    let eval = run(
        root,
        &[
            "--set",
            "data.path=\"out/run/dataset.json\"",
            "eval",
            "--policy",
            "regular",
            "--policy",
            "vpfc",
        ],
    );
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let report = run(root, &["report"]);
    assert_eq!(code(&report), 0);
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("adversarial") && text.contains("vpfc"));

    assert_eq!(code(&run(root, &["sweep", "--param", "gamma"])), 0);
    assert!(root.join("out/run/sweep_gamma.csv").is_file());

    assert_eq!(code(&run(root, &["--set", "vpfc.gamma=0", "eval"])), 2);
    assert_eq!(code(&run(root, &["--set", "colour=1", "eval"])), 2);
    assert_eq!(code(&run(root, &["--checkpoint", "missing.ckpt", "eval"])), 2);
    assert_eq!(
        code(&run(root, &["--set", "sweep.alpha=[]", "sweep", "--param", "alpha"])),
        2
    );

    let blowup = run(
        root,
        &[
            "--set",
            "train.learning_rate=1e200",
            "--set",
            "train.optimizer={kind=\"sgd\"}",
            "train",
            "--epochs",
            "1",
        ],
    );
    assert_eq!(code(&blowup), 3);

    let partial = run(
        root,
        &[
            "--set",
            "captions.count=2",
            "--set",
            "captions.max_tokens=500",
            "eval",
            "--policy",
            "regular",
        ],
    );
    assert_eq!(code(&partial), 4);
    assert_eq!(code(&run(root, &["report"])), 4);

    let pred = root.join("out/run/predictions.csv");
    let text = std::fs::read_to_string(&pred).unwrap();
    std::fs::write(&pred, text.replacen(",present,", ",absent,", 1)).unwrap();
    assert_eq!(code(&run(root, &["report"])), 2);
}
