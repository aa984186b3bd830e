//! Pipeline configuration file.

use crate::CliError;
use cinetransfer::camopt::CamOptConfig;
use cinetransfer::metrics::PixelAccuracyMode;
use cinetransfer::refine::RefineConfig;
use cinetransfer::retarget::RetargetOptions;
use cinetransfer::synth::{MotionPreset, ShotType};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a pipeline run reads. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub character_mesh: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub character_keypoints: Option<PathBuf>,
    /// Defaults to the built-in 15-keypoint map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone_map: Option<PathBuf>,
    /// Defaults to the capsule man.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment_dir: Option<PathBuf>,
    /// A bundle written by `synth`, scored by `eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_dir: Option<PathBuf>,
    pub output_dir: PathBuf,

    /// Body shape coefficients for the canonical character; empty is the mean shape.
    #[serde(default)]
    pub shape: Vec<f64>,
    #[serde(default)]
    pub retarget: RetargetOptions,
    #[serde(default)]
    pub camopt: CamOptConfig,
    /// `refine.seed` is replaced by the seed derived from `seed`.
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub denoiser: DenoiserChoice,
    #[serde(default)]
    pub pixel_accuracy: PixelAccuracyMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,

    #[serde(default)]
    pub seed: u64,
    /// Worker threads; absent means one per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default = "default_log_level")]
    pub log_level: String,
}

fn default_log_level() -> String {
    "info".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DenoiserChoice {
    #[default]
    Zero,
    Blur { sigma: f64 },
}

/// Scene generated by the `synth` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub shot_type: ShotType,
    pub motion_preset: MotionPreset,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Bounds of the perturbation applied to the written init cameras.
    pub camera_noise_deg: f64,
    pub camera_noise_frac: f64,
    /// Uniform scale of the written character mesh, so retargeting has work to do.
    pub character_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shot_type: ShotType::Arc,
            motion_preset: MotionPreset::Walk,
            frames: 30,
            width: 256,
            height: 256,
            camera_noise_deg: 5.0,
            camera_noise_frac: 0.05,
            character_scale: 0.6,
        }
    }
}

/// Pipeline stages that draw random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    Refine = 2,
}

/// Seed for one stage: each stage reads its own ChaCha stream of the
/// pipeline seed, so changing one stage never shifts another's numbers.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng.next_u64()
}

impl PipelineConfig {
    /// Parses a config file and makes its paths absolute.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.character_mesh,
            &mut self.character_keypoints,
            &mut self.bone_map,
            &mut self.body_model,
            &mut self.motion,
            &mut self.cameras,
            &mut self.evidence_dir,
            &mut self.environment_dir,
            &mut self.ground_truth_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Checks the settings that do not depend on any file.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: cinetransfer::Error| CliError::Validation(e.to_string());
        self.camopt.validate().map_err(bad)?;
        self.refine.validate().map_err(bad)?;
        if let DenoiserChoice::Blur { sigma } = self.denoiser {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(CliError::Validation(format!("blur denoiser sigma must be positive, got {sigma}")));
            }
        }
        if self.jobs == Some(0) {
            return Err(CliError::Validation("jobs must be at least 1".into()));
        }
        if self.log_level.parse::<log::LevelFilter>().is_err() {
            return Err(CliError::Validation(format!("unknown log level {:?}", self.log_level)));
        }
        Ok(())
    }

    /// Output directory of one stage.
    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_dir.join(stage)
    }
}

/// A required path, or a validation error naming the missing field.
pub fn required<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    field.as_deref().ok_or_else(|| CliError::Validation(format!("config is missing `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let mut cfg: PipelineConfig =
            serde_json::from_str(r#"{"output_dir": "out", "motion": "m.json", "cameras": "/abs/c.json"}"#).unwrap();
        cfg.resolve(Path::new("/data/shot"));
        assert_eq!(cfg.output_dir, Path::new("/data/shot/out"));
        assert_eq!(cfg.motion.as_deref(), Some(Path::new("/data/shot/m.json")));
        assert_eq!(cfg.cameras.as_deref(), Some(Path::new("/abs/c.json")));
        assert_eq!(cfg.log_level, "info");
        assert_eq!(cfg.denoiser, DenoiserChoice::Zero);
    }

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        assert_eq!(stage_seed(7, Stage::Refine), stage_seed(7, Stage::Refine));
        assert_ne!(stage_seed(7, Stage::Refine), stage_seed(7, Stage::Synth));
        assert_ne!(stage_seed(7, Stage::Refine), stage_seed(8, Stage::Refine));
    }

    #[test]
    fn denoiser_choice_is_tagged() {
        let d: DenoiserChoice = serde_json::from_str(r#"{"kind": "blur", "sigma": 2.0}"#).unwrap();
        assert_eq!(d, DenoiserChoice::Blur { sigma: 2.0 });
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"output_dir": ".", "jbos": 2}"#).is_err());
    }

    #[test]
    fn out_of_range_settings_are_rejected() {
        let base: PipelineConfig = serde_json::from_str(r#"{"output_dir": "."}"#).unwrap();
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.jobs = Some(0);
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.log_level = "chatty".into();
        assert!(c.validate().is_err());
        let mut c = base;
        c.denoiser = DenoiserChoice::Blur { sigma: -1.0 };
        assert!(c.validate().is_err());
    }
}
