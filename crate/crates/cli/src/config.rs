//! Pipeline configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpc_core::adapt::AdaptParams;
use vpc_core::ddim::ScheduleConfig;
use vpc_core::interflow::HSParams;
use vpc_core::losses::LossWeights;
use vpc_core::metrics::StabilityBand;
use vpc_core::synth::{stereographic_correction_flow, CameraSpec, JitterProfile, JitterSpec};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Synthetic,
    Ingest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub mode: InputMode,
    /// Sequence length in synthetic mode.
    pub frames: usize,
    pub frames_dir: Option<PathBuf>,
    /// Precomputed `%06d_fwd.flo` / `%06d_bwd.flo` pairs; estimated when absent.
    pub flows_dir: Option<PathBuf>,
    /// `%06d.pgm` face masks; all-ones when absent.
    pub masks_dir: Option<PathBuf>,
    /// `%06d.txt` annotation files; geometry metrics are skipped when absent.
    pub annotations_dir: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            mode: InputMode::Synthetic,
            frames: 24,
            frames_dir: None,
            flows_dir: None,
            masks_dir: None,
            annotations_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
    /// Defaults to the frame center.
    #[serde(default)]
    pub principal_point: Option<[f64; 2]>,
}

impl CameraConfig {
    pub fn spec(&self) -> CameraSpec {
        let mut cam = CameraSpec::centered(self.width, self.height, self.focal_px);
        if let Some([x, y]) = self.principal_point {
            cam.principal_point = (x, y);
        }
        cam
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub amplitude: f64,
    pub profile: JitterProfile,
    pub rotation: bool,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            profile: JitterProfile::WhiteNoise,
            rotation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub enabled: bool,
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub smoothing: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let p = AdaptParams::default();
        Self {
            enabled: true,
            step_size: p.step_size,
            max_iters: p.max_iters,
            tol: p.tol,
            backtrack_factor: p.backtrack_factor,
            max_backtracks: p.max_backtracks,
            smoothing: p.smoothing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Horn–Schunck on the frames.
    #[default]
    Estimate,
    /// Exact jitter flows written by `synth`.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub source: FlowSource,
    pub alpha: f64,
    pub iterations: usize,
    pub pyramid_levels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let hs = HSParams::default();
        Self {
            source: FlowSource::Estimate,
            alpha: hs.alpha,
            iterations: hs.iterations,
            pyramid_levels: hs.pyramid_levels,
        }
    }
}

impl FlowConfig {
    pub fn hs_params(&self) -> HSParams {
        HSParams {
            alpha: self.alpha,
            iterations: self.iterations,
            pyramid_levels: self.pyramid_levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write per-frame residual fields from `trajectory`.
    pub dump_residuals: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            dump_residuals: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub input: InputConfig,
    pub camera: CameraConfig,
    #[serde(default)]
    pub jitter: JitterConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub metrics: StabilityBand,
    #[serde(default)]
    pub output: OutputConfig,
}

fn invalid(section: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("[{section}] {err}"))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn camera_spec(&self) -> CameraSpec {
        self.camera.spec()
    }

    /// Jitter seed derived from the run seed.
    pub fn jitter_spec(&self) -> JitterSpec {
        JitterSpec {
            amplitude: self.jitter.amplitude,
            profile: self.jitter.profile,
            seed: self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
            rotation: self.jitter.rotation,
        }
    }

    pub fn adapt_params(&self) -> AdaptParams {
        AdaptParams {
            lambda_temporal: self.loss.lambda_temporal,
            mu_mask: self.loss.mu_mask,
            step_size: self.adapt.step_size,
            max_iters: self.adapt.max_iters,
            tol: self.adapt.tol,
            backtrack_factor: self.adapt.backtrack_factor,
            max_backtracks: self.adapt.max_backtracks,
            smoothing: self.adapt.smoothing,
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> CliResult<()> {
        let cam = self.camera_spec();
        cam.validate().map_err(|e| invalid("camera", e))?;
        stereographic_correction_flow(&cam).map_err(|e| invalid("camera", e))?;
        if self.input.mode == InputMode::Synthetic && self.input.frames < 3 {
            return Err(invalid("input", "synthetic sequences need at least 3 frames"));
        }
        if self.input.mode == InputMode::Ingest && self.input.frames_dir.is_none() {
            return Err(invalid("input", "ingest mode needs frames_dir"));
        }
        if self.input.mode == InputMode::Ingest && self.flow.source == FlowSource::GroundTruth {
            return Err(invalid("flow", "ground_truth flows exist only in synthetic mode"));
        }
        if !(self.jitter.amplitude.is_finite() && self.jitter.amplitude >= 0.0) {
            return Err(invalid("jitter", "amplitude must be non-negative"));
        }
        if let JitterProfile::Sinusoidal { period_frames } = self.jitter.profile {
            if period_frames.is_nan() || period_frames <= 0.0 {
                return Err(invalid("jitter", "period_frames must be positive"));
            }
        }
        self.loss.validate().map_err(|e| invalid("loss", e))?;
        self.adapt_params().validate().map_err(|e| invalid("adapt", e))?;
        self.schedule.schedule().map_err(|e| invalid("schedule", e))?;
        self.flow.hs_params().validate().map_err(|e| invalid("flow", e))?;
        self.metrics.validate().map_err(|e| invalid("metrics", e))?;
        Ok(())
    }

    /// SHA-256 of the effective configuration with the output directory
    /// blanked, so that reruns into different directories hash alike.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output.dir = PathBuf::new();
        let json = serde_json::to_string(&canon).expect("config is plain data");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 3\n[camera]\nfocal_px = 60.0\nwidth = 64\nheight = 48\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.input.frames, 24);
        assert_eq!(cfg.schedule.train_steps, 1000);
        assert_eq!(cfg.metrics, StabilityBand::default());
        assert!(cfg.adapt.enabled);
        assert_eq!(cfg.camera_spec().principal_point, (31.5, 23.5));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::from_toml_str(&format!("{MINIMAL}[adapt]\nstep_sise = 1.0\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("step_sise"), "{err}");
        let err = PipelineConfig::from_toml_str(&format!("bogus = 1\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn seed_is_mandatory() {
        let err = PipelineConfig::from_toml_str("[camera]\nfocal_px = 60.0\nwidth = 64\nheight = 48\n").unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        cfg.camera.focal_px = 10.0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("[camera]")));
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        cfg.input.mode = InputMode::Ingest;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        cfg.schedule.sample_steps = 5000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn profile_syntax() {
        let cfg = PipelineConfig::from_toml_str(&format!(
            "{MINIMAL}[jitter]\namplitude = 2.0\nprofile = {{ sinusoidal = {{ period_frames = 6.0 }} }}\n"
        ))
        .unwrap();
        assert_eq!(cfg.jitter.profile, JitterProfile::Sinusoidal { period_frames: 6.0 });
        let cfg = PipelineConfig::from_toml_str(&format!("{MINIMAL}[jitter]\nprofile = \"white_noise\"\n")).unwrap();
        assert_eq!(cfg.jitter.profile, JitterProfile::WhiteNoise);
    }
}
