//! Pipeline-wide configuration document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::localization::LocalizationConfig;
use crate::patching::PatchDims;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Register to the held-out patient's own SDF.
    PatientSdf,
    /// Train and register against the training-fold mean shape.
    MeanShape,
    /// Train against shapes sampled from the PDM, register to the mean shape.
    SsmSamples,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::PatientSdf => "patient_sdf",
            Task::MeanShape => "mean_shape",
            Task::SsmSamples => "ssm_samples",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderArch {
    pub channels: [usize; 3],
    pub embedding_dim: usize,
    pub head_bias: bool,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            embedding_dim: 32,
            head_bias: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    /// FPS anchors per training shape.
    pub anchors_per_shape: usize,
    /// Negatives lie at or beyond this distance percentile from the positive.
    pub negative_percentile: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            anchors_per_shape: 100,
            negative_percentile: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub task: Task,
    pub folds: usize,
    pub n_slices: usize,
    /// Coefficient std of PDM samples for the `ssm_samples` task.
    pub ssm_std: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            task: Task::PatientSdf,
            folds: 4,
            n_slices: 50,
            ssm_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `family.json`, shapes and volumes.
    pub data_dir: Option<PathBuf>,
    /// Stem of trained encoders (`<stem>_us.enc.*`, `<stem>_sdf.enc.*`).
    pub encoders: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every random stream is derived from it by label.
    pub seed: u64,
    pub patch_dims: PatchDims,
    pub synth: SynthConfig,
    pub encoder: EncoderArch,
    pub train: TrainConfig,
    pub triplets: TripletConfig,
    pub localization: LocalizationConfig,
    pub evaluation: EvaluationConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_dims: [16, 16, 8],
            synth: SynthConfig::default(),
            encoder: EncoderArch::default(),
            train: TrainConfig::default(),
            triplets: TripletConfig::default(),
            localization: LocalizationConfig::default(),
            evaluation: EvaluationConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_dims: self.patch_dims,
            channels: self.encoder.channels,
            embedding_dim: self.encoder.embedding_dim,
            head_bias: self.encoder.head_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder_config().validate()?;
        self.train.validate()?;
        self.localization.validate()?;
        if self.triplets.anchors_per_shape == 0 {
            return Err(Error::invalid("anchors_per_shape must be positive"));
        }
        if !(self.triplets.negative_percentile > 0.0 && self.triplets.negative_percentile <= 1.0) {
            return Err(Error::invalid("negative_percentile must lie in (0, 1]"));
        }
        if self.evaluation.folds < 2 || self.evaluation.n_slices == 0 {
            return Err(Error::invalid("need at least 2 folds and 1 slice"));
        }
        if !(self.evaluation.ssm_std >= 0.0) {
            return Err(Error::invalid("ssm_std must be >= 0"));
        }
        for p in [&self.paths.data_dir].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::invalid(format!("path {} does not exist", p.display())));
            }
        }
        if let Some(stem) = &self.paths.encoders {
            let (json, _) = crate::encoder::encoder_paths(&with_suffix(stem, "_us"));
            if !json.exists() {
                return Err(Error::invalid(format!("encoder file {} does not exist", json.display())));
            }
        }
        Ok(())
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            format: "config",
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `<stem><suffix>` keeping the directory.
pub fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back = PipelineConfig::from_json(&text, Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [
            r#"{"sed": 1}"#,
            r#"{"synth": {"n_shape": 3}}"#,
            r#"{"train": {"lr": 0.1}}"#,
            r#"{"localization": {"mkde": 2}}"#,
            r#"{"evaluation": {"task": "patient"}}"#,
        ] {
            assert!(PipelineConfig::from_json(text, Path::new("x")).is_err(), "{text}");
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = PipelineConfig::from_json(r#"{"seed": 9, "evaluation": {"task": "ssm_samples"}}"#, Path::new("x")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.evaluation.task, Task::SsmSamples);
        assert_eq!(c.evaluation.folds, 4);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let mut c = PipelineConfig::default();
        c.paths.data_dir = Some("/definitely/not/here".into());
        assert!(c.validate().is_err());
    }
}
