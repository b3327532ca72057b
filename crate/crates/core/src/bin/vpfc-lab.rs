use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpfc_lab::bench::PopeSubset;
use vpfc_lab::error::{LabError, Result};
use vpfc_lab::experiment::{
    delta_table, recount_bundle, run_experiment, run_sweep, write_atomic, ExperimentConfig, SweepParam,
};
use vpfc_lab::model::save_checkpoint;
use vpfc_lab::policy::PolicyKind;
use vpfc_lab::trainer::train_with_progress;

/// Synthetic vision-language hallucination lab.
#[derive(Parser)]
#[command(name = "vpfc-lab", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root for relative output paths.
    #[arg(long, env = "VPFC_LAB_OUT", global = true)]
    out_root: Option<PathBuf>,
    /// Override any config field, e.g. `--set vpfc.alpha_steer=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    name: Option<String>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the evaluation scenes and probes and save them as JSON.
    BuildData {
        /// Destination; defaults to `<output_dir>/dataset.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        bias_knob: Option<f64>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        bias_knob: Option<f64>,
        #[arg(long)]
        rare_fraction: Option<f64>,
    },
    /// Evaluate policies and write a report bundle.
    Eval {
        /// Restrict to these policies (repeatable).
        #[arg(long = "policy")]
        policies: Vec<PolicyKind>,
        /// Restrict to these subsets (repeatable).
        #[arg(long = "subset")]
        subsets: Vec<PopeSubset>,
    },
    /// Sweep one steering parameter.
    Sweep {
        #[arg(long)]
        param: SweepParam,
    },
    /// Recount a bundle from its prediction log and print the tables.
    Report {
        /// Bundle directory; defaults to the config's output directory.
        dir: Option<PathBuf>,
    },
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| LabError::config(format!("empty key in '{key}'")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| LabError::config(format!("'{p}' in '{key}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn load_config(global: &Global, extra: Vec<(String, toml::Value)>) -> Result<ExperimentConfig> {
    let base = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut table: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| LabError::config(e.to_string()))?;
    for s in &global.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| LabError::config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let path_str = |p: &Path| toml::Value::String(p.to_string_lossy().into_owned());
    let mut named = Vec::new();
    if let Some(s) = global.seed {
        named.push(("seed".to_string(), toml::Value::Integer(s as i64)));
    }
    if let Some(n) = &global.name {
        named.push(("name".to_string(), toml::Value::String(n.clone())));
    }
    if let Some(d) = &global.output_dir {
        named.push(("output_dir".to_string(), path_str(d)));
    }
    if let Some(c) = &global.checkpoint {
        named.push(("checkpoint".to_string(), path_str(c)));
    }
    for (k, v) in named.into_iter().chain(extra) {
        set_path(&mut table, &k, v)?;
    }
    let text = toml::to_string(&table).map_err(|e| LabError::config(e.to_string()))?;
    let config = ExperimentConfig::from_toml(&text)?.with_output_root(global.out_root.as_deref());
    config.validate_shape()?;
    Ok(config)
}

fn opt<T>(key: &str, v: Option<T>, f: impl Fn(T) -> toml::Value) -> Option<(String, toml::Value)> {
    v.map(|v| (key.to_string(), f(v)))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.verb {
        Verb::BuildData { out, scenes, bias_knob } => {
            let extra = [
                opt("data.num_scenes", scenes, |v| toml::Value::Integer(v as i64)),
                opt("data.bias_knob", bias_knob, toml::Value::Float),
            ];
            let config = load_config(g, extra.into_iter().flatten().collect())?;
            let out = match out {
                Some(p) if p.is_relative() => g.out_root.as_deref().map_or(p.clone(), |r| r.join(&p)),
                Some(p) => p,
                None => config.output_dir.join("dataset.json"),
            };
            let data = vpfc_lab::experiment::DataSpec {
                path: None,
                ..config.data.clone()
            };
            let dataset = data.dataset(&config.model)?;
            write_atomic(&out, dataset.to_json()?.as_bytes())?;
            println!(
                "{} scenes, {} questions -> {}",
                dataset.scenes.len(),
                dataset.questions.len(),
                out.display()
            );
        }
        Verb::Train {
            epochs,
            bias_knob,
            rare_fraction,
        } => {
            let extra = [
                opt("train.epochs", epochs, |v| toml::Value::Integer(v as i64)),
                opt("train.bias_knob", bias_knob, toml::Value::Float),
                opt("train.rare_fraction", rare_fraction, toml::Value::Float),
            ];
            let config = load_config(g, extra.into_iter().flatten().collect())?;
            let world = config.data.world(&config.model)?;
            let out = train_with_progress(&config.model, &world, &config.train, |r| {
                log::info!("epoch {} loss {:.5}", r.epoch, r.loss)
            })?;
            save_checkpoint(&out.weights, &config.checkpoint)?;
            write_atomic(&config.output_dir.join("training_log.csv"), out.log.to_csv().as_bytes())?;
            println!(
                "loss {:.4} -> {:.4}; checkpoint {}",
                out.log.initial_loss().unwrap_or(f64::NAN),
                out.log.final_loss().unwrap_or(f64::NAN),
                config.checkpoint.display()
            );
        }
        Verb::Eval { policies, subsets } => {
            let mut config = load_config(g, Vec::new())?;
            if !policies.is_empty() {
                config.policies.retain(|p| policies.contains(&p.params.policy));
            }
            if !subsets.is_empty() {
                config.subsets = subsets;
            }
            let bundle = run_experiment(&config)?;
            print_cells(&bundle.cells);
            println!("bundle {}", config.output_dir.display());
        }
        Verb::Sweep { param } => {
            let config = load_config(g, Vec::new())?;
            let table = run_sweep(&config, param)?;
            table.write(&config.output_dir)?;
            println!(
                "{:>8} {:>8} {:>9} {:>11}",
                param.name(),
                "accuracy",
                "omission",
                "fabrication"
            );
            for r in &table.rows {
                println!(
                    "{:>8} {:>8.4} {:>9} {:>11}",
                    r.value, r.accuracy, r.omission, r.fabrication
                );
            }
        }
        Verb::Report { dir } => {
            let dir = match dir {
                Some(d) => d,
                None => load_config(g, Vec::new())?.output_dir,
            };
            let rc = recount_bundle(&dir)?;
            print_cells(&rc.cells);
            let reference = PolicyKind::Regular.to_string();
            for d in delta_table(&rc.cells, &reference) {
                if d.policy != reference {
                    println!(
                        "{:<12} {:<10} Δacc {:+.4} Δomission {:+} Δfabrication {:+}",
                        d.subset.to_string(),
                        d.policy,
                        d.delta_accuracy,
                        d.delta_omission,
                        d.delta_fabrication
                    );
                }
            }
            if !rc.is_consistent() {
                return Err(LabError::Eval(format!(
                    "bundle disagrees with its log: mismatched cells {:?}, corrupted files {:?}",
                    rc.mismatches, rc.corrupted
                )));
            }
            if !rc.manifest.complete {
                return Err(LabError::Incomplete(
                    rc.manifest.error.unwrap_or_else(|| "run did not finish".into()),
                ));
            }
        }
    }
    Ok(())
}

fn print_cells(cells: &[vpfc_lab::experiment::CellReport]) {
    println!(
        "{:<12} {:<10} {:>8} {:>9} {:>7} {:>7} {:>9} {:>11}",
        "subset", "policy", "accuracy", "precision", "recall", "f1", "omission", "fabrication"
    );
    for c in cells {
        let r = &c.report;
        println!(
            "{:<12} {:<10} {:>8.4} {:>9.4} {:>7.4} {:>7.4} {:>9} {:>11}",
            c.subset.to_string(),
            c.policy,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            r.omission,
            r.fabrication
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
