//! The run configuration: one TOML document describing every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pmri_core::calib::Apodization;
use pmri_core::eval::{EvalOptions, Method};
use pmri_core::learn::{CsmInput, ModelSpec, Scale, TrainConfig};
use pmri_core::recon::CombineMode;
use pmri_core::sim::{CoilProfileSpec, DatasetSpec, PhantomKind};

use crate::error::{at, CliError, Result};

/// Environment variable naming the default root for outputs.
pub const OUTPUT_ROOT_ENV: &str = "PMRI_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Groups held out for evaluation; all others train.
    pub test_groups: Vec<u32>,
}

/// Mask-mismatch experiment: the held-out slices are re-acquired with a
/// different ACS size, for the dataset itself and for extra phantom seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub acs: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: Scale,
    /// Overrides the preset's sensitivity-network channels.
    pub csm_channels: Option<Vec<usize>>,
    /// Overrides the preset's denoiser channels.
    pub denoiser_channels: Option<Vec<usize>>,
    pub combine: CombineMode,
    pub csm_input: CsmInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub sense_reg: f64,
    /// Record wall-clock runtimes (makes report.csv non-reproducible).
    pub timing: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub apod: Apodization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub shift: ShiftConfig,
    pub calib: CalibConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_groups: vec![3] }
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            acs: 12,
            seeds: vec![101, 102, 103, 104, 105],
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Desk,
            csm_channels: None,
            denoiser_channels: None,
            combine: CombineMode::PseudoInverse,
            csm_input: CsmInput::CoilImages,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Zf, Method::Sense, Method::Learned],
            sense_reg: EvalOptions::default().sense_reg,
            timing: false,
        }
    }
}

impl Default for RunConfig {
    /// Desk-scale experiment: 32 slices of 64x64 in 4 groups, 8 coils,
    /// R = 4 with a 24x24 ACS block.
    fn default() -> Self {
        Self {
            output_dir: None,
            dataset: DatasetSpec {
                height: 64,
                width: 64,
                groups: 4,
                series: 8,
                slices_per_series: 1,
                phantom: PhantomKind::SheppLogan,
                phase_ramp: 0.3,
                coil: CoilProfileSpec {
                    coils: 8,
                    falloff: 28.0,
                    ring_radius: 44.0,
                    seed: 1,
                },
                accel: 4,
                acs: 24,
                noise_std: 0.0,
                seed: 11,
            },
            split: SplitConfig::default(),
            shift: ShiftConfig::default(),
            calib: CalibConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                seed: 5,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&at(path, std::fs::read_to_string(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::with_channels(
            self.dataset.coil.coils,
            self.model.csm_channels.clone().unwrap_or_else(|| self.model.scale.csm_channels()),
            self.model
                .denoiser_channels
                .clone()
                .unwrap_or_else(|| self.model.scale.denoiser_channels()),
        );
        spec.combine = self.model.combine;
        spec.csm_input = self.model.csm_input;
        spec
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            sense_reg: self.eval.sense_reg,
            timing: self.eval.timing,
        }
    }

    /// The shifted-mask variant of the dataset's mask geometry.
    pub fn shifted_dataset(&self) -> DatasetSpec {
        DatasetSpec {
            acs: self.shift.acs,
            ..self.dataset.clone()
        }
    }

    /// Where the run writes: `output_dir` if absolute, otherwise under
    /// `$PMRI_OUTPUT_ROOT` (or the working directory).
    pub fn output_root(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        match (&self.output_dir, root) {
            (Some(d), _) if d.is_absolute() => d.clone(),
            (Some(d), Some(r)) => r.join(d),
            (Some(d), None) => d.clone(),
            (None, Some(r)) => r,
            (None, None) => PathBuf::from("pmri-out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.height < 16 || d.width < 16 {
            return invalid(format!("image {}x{} is below 16x16", d.height, d.width));
        }
        if d.coil.coils == 0 {
            return invalid("at least one coil is required");
        }
        if d.accel == 0 || d.accel > d.width {
            return invalid(format!("acceleration {} out of range", d.accel));
        }
        for (name, acs) in [("dataset.acs", d.acs), ("shift.acs", self.shift.acs)] {
            if acs == 0 || acs > d.height.min(d.width) {
                return invalid(format!("{name} = {acs} does not fit the image"));
            }
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return invalid("noise_std must be a non-negative number");
        }
        if d.groups == 0 || d.series == 0 || d.slices_per_series == 0 {
            return invalid("dataset must have at least one slice");
        }
        let tg = &self.split.test_groups;
        if tg.is_empty() || tg.iter().any(|&g| g >= d.groups) {
            return invalid(format!("test groups {tg:?} must be a non-empty subset of 0..{}", d.groups));
        }
        if (0..d.groups).all(|g| tg.contains(&g)) {
            return invalid("every group is held out; nothing left to train on");
        }
        if self.eval.methods.is_empty() {
            return invalid("eval.methods is empty");
        }
        self.train.validate()?;
        let spec = self.model_spec();
        for (name, net) in [("csm", &spec.csm), ("denoiser", &spec.denoiser)] {
            if net.enc_channels.is_empty() || net.enc_channels.contains(&0) {
                return invalid(format!("{name} channels must be non-empty and positive"));
            }
            let f = 1usize << net.enc_channels.len();
            if d.height % f != 0 || d.width % f != 0 {
                return invalid(format!(
                    "{}x{} not divisible by 2^{} for the {name} network",
                    d.height,
                    d.width,
                    net.enc_channels.len()
                ));
            }
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
