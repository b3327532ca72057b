use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{Dataset, PopeSubset, World};
use crate::error::{LabError, Result};
use crate::intervene::VpfcParams;
use crate::model::ModelConfig;
use crate::policy::{PolicyKind, PolicyParams};
use crate::trainer::TrainSpec;

/// Where the evaluation scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Load a saved dataset instead of generating one.
    pub path: Option<PathBuf>,
    /// Seed of the object prototypes; training and evaluation must share it.
    pub world_seed: u64,
    pub noise: f64,
    /// Co-occurrence knob of the evaluation scenes.
    pub bias_knob: f64,
    pub num_scenes: usize,
    pub object_count: (usize, usize),
    pub questions_per_label: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            path: None,
            world_seed: 100,
            noise: 0.5,
            bias_knob: 0.5,
            num_scenes: 300,
            object_count: (1, 3),
            questions_per_label: 1,
            seed: 9999,
        }
    }
}

impl DataSpec {
    pub fn world(&self, model: &ModelConfig) -> Result<World> {
        World::standard(model.model_dim, model.grid_side, self.noise, self.world_seed)
    }

    /// Loads `path` when set, else generates the split.
    pub fn dataset(&self, model: &ModelConfig) -> Result<Dataset> {
        match &self.path {
            Some(p) => Dataset::load(p),
            None => Dataset::build(
                self.world(model)?,
                self.bias_knob,
                self.num_scenes,
                self.object_count,
                self.questions_per_label,
                self.seed,
            ),
        }
    }
}

/// One decoding policy under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    /// Report label; defaults to the policy kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub params: PolicyParams,
    /// Overrides the experiment-wide steering parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vpfc: Option<VpfcParams>,
}

impl PolicyEntry {
    pub fn of(kind: PolicyKind) -> Self {
        Self {
            name: None,
            params: PolicyParams::of(kind),
            vpfc: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn with_vpfc(mut self, vpfc: VpfcParams) -> Self {
        self.vpfc = Some(vpfc);
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.params.policy.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionSpec {
    /// Number of scenes captioned per policy; 0 disables caption runs.
    pub count: usize,
    pub max_tokens: usize,
}

impl Default for CaptionSpec {
    fn default() -> Self {
        Self {
            count: 0,
            max_tokens: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub subset: PopeSubset,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            subset: PopeSubset::Adversarial,
            gamma: vec![0.125, 0.25, 0.5, 0.75, 1.0],
            alpha: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0],
        }
    }
}

/// A full experiment, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub train: TrainSpec,
    pub subsets: Vec<PopeSubset>,
    pub policies: Vec<PolicyEntry>,
    pub vpfc: VpfcParams,
    pub captions: CaptionSpec,
    pub sweep: SweepSpec,
    /// Ship every steering record in the bundle.
    pub record_interventions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            checkpoint: PathBuf::from("model.ckpt"),
            model: ModelConfig::default(),
            data: DataSpec::default(),
            train: TrainSpec::default(),
            subsets: PopeSubset::ALL.to_vec(),
            policies: [
                PolicyKind::Regular,
                PolicyKind::Vcd,
                PolicyKind::Sid,
                PolicyKind::Enh,
                PolicyKind::Vpfc,
            ]
            .into_iter()
            .map(PolicyEntry::of)
            .collect(),
            vpfc: VpfcParams::default(),
            captions: CaptionSpec::default(),
            sweep: SweepSpec::default(),
            record_interventions: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::config(format!("bad experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Rebases a relative output directory onto `root`.
    pub fn with_output_root(mut self, root: Option<&Path>) -> Self {
        if let Some(r) = root {
            if self.output_dir.is_relative() {
                self.output_dir = r.join(&self.output_dir);
            }
        }
        self
    }

    /// The reference policy of the delta table.
    pub fn reference(&self) -> Option<&PolicyEntry> {
        self.policies.iter().find(|p| p.params.policy == PolicyKind::Regular)
    }

    /// Checks everything except the existence of input files.
    pub fn validate_shape(&self) -> Result<()> {
        self.model.validate()?;
        if self.subsets.is_empty() {
            return Err(LabError::config("no POPE subsets selected"));
        }
        if self.policies.is_empty() {
            return Err(LabError::config("no policies selected"));
        }
        let mut names = BTreeSet::new();
        for p in &self.policies {
            p.params.validate()?;
            p.vpfc
                .as_ref()
                .unwrap_or(&self.vpfc)
                .validate(self.model.total_heads())?;
            if !names.insert(p.label()) {
                return Err(LabError::config(format!("policy name '{}' used twice", p.label())));
            }
        }
        if self.reference().is_none() {
            return Err(LabError::config(
                "policy list needs a regular policy as the delta reference",
            ));
        }
        if self.data.path.is_none() && self.data.num_scenes == 0 {
            return Err(LabError::config("data.num_scenes must be positive"));
        }
        if !(self.data.noise.is_finite() && self.data.noise >= 0.0) {
            return Err(LabError::config("data.noise must be finite and ≥ 0"));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Shape checks plus existence of the checkpoint and dataset files.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if !self.checkpoint.is_file() {
            return Err(LabError::config(format!(
                "checkpoint {} does not exist",
                self.checkpoint.display()
            )));
        }
        if let Some(p) = &self.data.path {
            if !p.is_file() {
                return Err(LabError::config(format!("dataset {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intervene::CentroidMode;

    #[test]
    fn toml_roundtrip_with_overrides() {
        let text = r#"
            name = "ablation"
            checkpoint = "m.ckpt"
            subsets = ["adversarial"]

            [data]
            num_scenes = 20

            [[policies]]
            policy = "regular"

            [[policies]]
            name = "vpfc-off"
            policy = "vpfc"
            [policies.vpfc]
            centroid_mode = "off"
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.data.num_scenes, 20);
        assert_eq!(c.data.noise, 0.5);
        assert_eq!(c.policies[1].label(), "vpfc-off");
        assert_eq!(c.policies[1].vpfc.as_ref().unwrap().centroid_mode, CentroidMode::Off);
        assert_eq!(c.policies[1].vpfc.as_ref().unwrap().alpha_steer, 4.0);
        c.validate_shape().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = ExperimentConfig {
            policies: vec![PolicyEntry::of(PolicyKind::Vcd)],
            ..ExperimentConfig::default()
        };
        assert!(c.validate_shape().is_err());
        let mut c = ExperimentConfig::default();
        c.policies.push(PolicyEntry::of(PolicyKind::Vcd));
        assert!(c.validate_shape().unwrap_err().to_string().contains("twice"));
        let c = ExperimentConfig {
            checkpoint: "/nonexistent/model.ckpt".into(),
            ..ExperimentConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("does not exist"));
        assert!(ExperimentConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn shipped_config_parses() {
        let c = ExperimentConfig::from_toml(include_str!("../../../../configs/experiment.toml")).unwrap();
        c.validate_shape().unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(
            (&c.model, &c.data, &c.train, &c.vpfc),
            (&d.model, &d.data, &d.train, &d.vpfc)
        );
        assert_eq!(c.policies.len(), 6);
        assert!(ExperimentConfig::from_toml("colour = 1").is_err());
        assert!(ExperimentConfig::from_toml("[vpfc]\nalpha = 1").is_err());
    }

    #[test]
    fn output_root_applies_to_relative_dirs() {
        let c = ExperimentConfig::default().with_output_root(Some(Path::new("/tmp/root")));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/root/out"));
        let abs = ExperimentConfig {
            output_dir: "/abs".into(),
            ..ExperimentConfig::default()
        };
        assert_eq!(
            abs.with_output_root(Some(Path::new("/r"))).output_dir,
            PathBuf::from("/abs")
        );
    }
}
