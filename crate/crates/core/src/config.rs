//! Declarative run configuration: one TOML document drives every command.
//! Unknown keys are rejected; a schema-version key gates compatibility.

use crate::attention::prior::PriorEncoderSpec;
use crate::data::{Split, SynthDatasetSpec};
use crate::error::{Error, Result};
use crate::evaluation::TsneConfig;
use crate::model::ModelConfig;
use crate::preprocess::{AugmentOp, ClaheParams, KnowledgeEnhancePolicy, Normalize};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV manifest path; mutually exclusive with `synthetic`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Synthetic dataset recipe; mutually exclusive with `manifest`.
    #[serde(default)]
    pub synthetic: Option<SynthDatasetSpec>,
    #[serde(default)]
    pub prior: PriorEncoderSpec,
    /// Prebuilt prior-embedding cache; overrides `prior` when set.
    #[serde(default)]
    pub prior_cache: Option<PathBuf>,
    /// Run the knowledge-enhancement chain before prior extraction.
    #[serde(default = "default_true")]
    pub prior_enhance: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            synthetic: None,
            prior: PriorEncoderSpec::default(),
            prior_cache: None,
            prior_enhance: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub input_size: usize,
    /// ROI-branch crop side as a fraction of the short image side.
    pub roi_scale: f64,
    /// Field crop applied once during preparation.
    pub prepare_roi_scale: f64,
    /// Side of the square images written by the preparation stage.
    pub prepare_size: usize,
    pub clahe: ClaheParams,
    pub normalize: Normalize,
    pub augment_ops: Vec<AugmentOp>,
    pub knowledge: KnowledgeEnhancePolicy,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            input_size: 64,
            roi_scale: 0.6,
            prepare_roi_scale: 0.9,
            prepare_size: 64,
            clahe: ClaheParams::default(),
            normalize: Normalize::default(),
            augment_ops: vec![
                AugmentOp::Hflip,
                AugmentOp::Vflip,
                AugmentOp::ColorJitter,
                AugmentOp::GaussianBlur,
            ],
            knowledge: KnowledgeEnhancePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub tsne: TsneConfig,
    /// Saliency stage id; defaults to the last attention stage when absent.
    #[serde(default)]
    pub cam_layer: Option<String>,
    pub cam_classes: Vec<usize>,
    pub cam_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            tsne: TsneConfig::default(),
            cam_layer: None,
            cam_classes: vec![0, 1],
            cam_count: 8,
        }
    }
}

impl RunConfig {
    pub fn desk_default() -> RunConfig {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 42,
            data: DataConfig {
                synthetic: Some(SynthDatasetSpec::default()),
                ..Default::default()
            },
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::tiny(),
            train: TrainConfig {
                iterations: 1500,
                eval_every: 100,
                checkpoint_every: 500,
                lr: 2e-4,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data.manifest and data.synthetic are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of data.manifest or data.synthetic is required".into(),
                ))
            }
            _ => {}
        }
        if self.preprocess.input_size < 32 {
            return Err(Error::Config("preprocess.input_size must be >= 32".into()));
        }
        if self.preprocess.prepare_size < 64 {
            return Err(Error::Config("preprocess.prepare_size must be >= 64".into()));
        }
        if !(0.0..=1.0).contains(&self.preprocess.roi_scale)
            || !(0.0..=1.0).contains(&self.preprocess.prepare_roi_scale)
        {
            return Err(Error::Config("roi scales must lie in (0,1]".into()));
        }
        self.preprocess.clahe.validate()?;
        self.preprocess.knowledge.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let cfg = RunConfig::desk_default();
        let text = cfg.to_toml().unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        // and once more through serialization
        assert_eq!(parsed.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::desk_default().to_toml().unwrap();
        text.insert_str(0, "unknown_key = 3\n");
        let err = toml::from_str::<RunConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("unknown"));
    }

    #[test]
    fn manifest_and_synthetic_are_exclusive() {
        let mut cfg = RunConfig::desk_default();
        cfg.data.manifest = Some("x.csv".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.data.synthetic = None;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn schema_version_is_checked() {
        let mut cfg = RunConfig::desk_default();
        cfg.schema_version = 99;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
