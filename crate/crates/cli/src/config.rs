//! Experiment configuration files.
//!
//! ```toml
//! seed = 0
//!
//! [dataset]
//! source_root = "toy/source/train"
//! target_root = "toy/target/train"
//! target_test_root = "toy/target/test"
//!
//! [model]
//! architecture = "lightweight-tiny"
//! resolution = [96, 96]
//!
//! [pretrain]
//! epochs = 20
//! batch_size = 8
//! learning_rate = 0.01
//!
//! [adapt]
//! epochs = 25
//! n = 100
//! batch_size_per_domain = 4
//! lr_encoder = 2e-4
//! lr_ld = 2e-4
//! lr_dd = 2e-4
//!
//! [eval]
//! median_scaling = true
//!
//! [output]
//! dir = "runs/toy"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use depthadapt::engine::{AdaptConfig, PretrainConfig};
use depthadapt::metrics::EvalProtocol;
use depthadapt::networks::{ArchitectureId, ArchitectureSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub adapt: Option<AdaptConfig>,
    #[serde(default)]
    pub eval: EvalProtocol,
    #[serde(default)]
    pub profile: ProfileSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source_root: PathBuf,
    #[serde(default)]
    pub source_test_root: Option<PathBuf>,
    #[serde(default)]
    pub target_root: Option<PathBuf>,
    #[serde(default)]
    pub target_test_root: Option<PathBuf>,
    /// Layout manifests; `<root>/dataset.toml` when absent.
    #[serde(default)]
    pub source_layout: Option<PathBuf>,
    #[serde(default)]
    pub target_layout: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: String,
    /// `[height, width]`, both multiples of 32.
    pub resolution: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_timed")]
    pub timed: usize,
}

fn default_warmup() -> usize {
    3
}

fn default_timed() -> usize {
    10
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            warmup: default_warmup(),
            timed: default_timed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        if let Some(p) = &mut self.pretrain {
            p.seed = self.seed;
        }
        if let Some(a) = &mut self.adapt {
            a.seed = self.seed;
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.dataset;
        fix(&mut d.source_root);
        for p in [
            &mut d.source_test_root,
            &mut d.target_root,
            &mut d.target_test_root,
            &mut d.source_layout,
            &mut d.target_layout,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.spec()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
            if let Some(a) = &p.augment {
                self.check_augment_resolution(a.output_resolution, "pretrain")?;
            }
        }
        if let Some(a) = &self.adapt {
            a.validate()?;
            if let Some(aug) = &a.augment {
                self.check_augment_resolution(aug.output_resolution, "adapt")?;
            }
        }
        self.eval.validate()?;
        if self.profile.timed == 0 {
            return Err(CliError::Config("profile.timed must be at least 1".into()));
        }
        Ok(())
    }

    fn check_augment_resolution(&self, out: [usize; 2], section: &str) -> Result<(), CliError> {
        if out != self.model.resolution {
            return Err(CliError::Config(format!(
                "{section}.augment.output_resolution {out:?} differs from model.resolution {:?}",
                self.model.resolution
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ArchitectureSpec, CliError> {
        let id: ArchitectureId = self.model.architecture.parse()?;
        let [h, w] = self.model.resolution;
        let spec = ArchitectureSpec::new(id, h, w);
        spec.validate()?;
        Ok(spec)
    }

    pub fn pretrain_config(&self) -> Result<&PretrainConfig, CliError> {
        self.pretrain
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [pretrain] section".into()))
    }

    pub fn adapt_config(&self) -> Result<&AdaptConfig, CliError> {
        self.adapt
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [adapt] section".into()))
    }

    /// The configuration after defaults, as written next to the outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_effective(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.output.dir).map_err(|e| CliError::io(&self.output.dir, e))?;
        let path = self.output.dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// `path` must exist; the error names it.
pub fn require_path(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[dataset]
source_root = "s"
[model]
architecture = "lightweight-tiny"
resolution = [96, 96]
[adapt]
epochs = 1
batch_size_per_domain = 2
lr_encoder = 1e-4
lr_ld = 1e-4
lr_dd = 1e-4
[output]
dir = "out"
"#;

    #[test]
    fn seed_reaches_sections() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.adapt.unwrap().seed, 3);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = MINIMAL.replace("epochs = 1", "epochs = 1\nlearning_rte = 2");
        match ExperimentConfig::parse(&text) {
            Err(CliError::Config(m)) => assert!(m.contains("learning_rte"), "{m}"),
            other => panic!("{other:?}"),
        }
        let nested_seed = MINIMAL.replace("epochs = 1", "epochs = 1\nseed = 4");
        assert!(ExperimentConfig::parse(&nested_seed).is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn bad_resolution_is_a_config_error() {
        let text = MINIMAL.replace("[96, 96]", "[100, 96]");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
    }
}
