//! Run configuration: one JSON document with a section per pipeline phase.
//! Every field has a default; unknown keys are rejected so typos fail fast.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dfbf_core::distill::DistillConfig;
use dfbf_core::error::{Error, Result};
use dfbf_core::graph::{build_resnet_tiny, build_vgg_tiny, ConvPlanToken, NetworkGraph};
use dfbf_core::rng::{derive_seed, rng_from_seed};
use dfbf_core::synth::SynthConfig;
use dfbf_core::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Arch {
    ResnetTiny,
    VggTiny,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub conv_plan: Vec<ConvPlanToken>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::ResnetTiny,
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            conv_plan: vec![
                ConvPlanToken::Conv(8),
                ConvPlanToken::MaxPool,
                ConvPlanToken::Conv(16),
            ],
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, seed: u64) -> Result<NetworkGraph<f32>> {
        let mut rng = rng_from_seed(derive_seed(seed, "model-init"));
        match self.arch {
            Arch::ResnetTiny => {
                build_resnet_tiny(&self.stage_channels, &self.blocks_per_stage, self.num_classes, &mut rng)
            }
            Arch::VggTiny => build_vgg_tiny(&self.conv_plan, self.num_classes, &mut rng),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DataConfig {
    Shapes {
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_image_size")]
        size: usize,
    },
    Cifar10 {
        dir: String,
    },
}

fn default_train_per_class() -> usize {
    1000
}
fn default_test_per_class() -> usize {
    200
}
fn default_classes() -> usize {
    4
}
fn default_image_size() -> usize {
    32
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Shapes {
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            classes: default_classes(),
            size: default_image_size(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub ratio: f64,
    pub strategy: dfbf_core::prune::PruneStrategy,
    pub mode: dfbf_core::prune::SparsityMode,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            ratio: 0.3,
            strategy: dfbf_core::prune::PruneStrategy::L1,
            mode: dfbf_core::prune::SparsityMode::Uniform,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 256 }
    }
}

/// The resolved run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub prune: PruneSection,
    pub synth: SynthConfig,
    pub distill: DistillConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune.ratio) {
            return Err(Error::config("ratio must be in [0,1)".to_string()));
        }
        self.synth.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.distill.gamma < 0.0 {
            return Err(Error::config("distill.gamma must be non-negative".to_string()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive".to_string()));
        }
        Ok(())
    }

    /// Apply a CLI seed override and re-derive the per-phase seeds.
    pub fn with_seed(mut self, seed: Option<u64>) -> RunConfig {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self.train.seed = derive_seed(self.seed, "train");
        self.synth.seed = derive_seed(self.seed, "synth");
        self.distill.seed = derive_seed(self.seed, "distill");
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.synth.num_images, 1600);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.weight_decay, 5e-4);
        assert_eq!(cfg.distill.gamma, 0.0);
        assert_eq!(cfg.synth.width, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"synht": {}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
        let err = serde_json::from_str::<RunConfig>(r#"{"synth": {"stepz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn seed_override_rederives_phase_seeds() {
        let a: RunConfig = serde_json::from_str("{}").unwrap();
        let a = a.with_seed(Some(7));
        let b: RunConfig = serde_json::from_str("{}").unwrap();
        let b = b.with_seed(Some(8));
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.synth.seed, b.synth.seed);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default().with_seed(Some(3));
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }
}
