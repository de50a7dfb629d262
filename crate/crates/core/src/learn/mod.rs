//! The learned reconstruction: a sensitivity-estimation U-Net, the
//! composite k-space step, and a residual U-Net denoiser, trained end to end
//! with hand-written gradients and Adam.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod layers;
mod pipeline;
mod train;
mod unet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::recon::CombineMode;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use checkpoint::{load_params, read_params, save_params, write_params, PARAMS_MAGIC};
pub use pipeline::{
    loss_total, pipeline_forward, LossGrads, LossParts, PipelineTrace, ReconModel,
};
pub use train::{epoch_batches, train, EpochLog, TrainOutcome, TrainSample};
pub use unet::{UNet, UNetTrace};

/// Architecture of one U-Net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels per encoder level; the depth is its length.
    pub enc_channels: Vec<usize>,
    pub kernel: usize,
    pub skip_connections: bool,
}

/// Channel presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl Scale {
    pub fn csm_channels(self) -> Vec<usize> {
        match self {
            Scale::Desk => vec![16, 32, 64, 128],
            Scale::Paper => vec![64, 128, 256, 512],
        }
    }

    pub fn denoiser_channels(self) -> Vec<usize> {
        match self {
            Scale::Desk => vec![8, 16, 32, 64],
            Scale::Paper => vec![32, 64, 128, 256],
        }
    }
}

/// What the sensitivity network sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsmInput {
    /// Per-coil inverse FFT of the undersampled k-space.
    #[default]
    CoilImages,
    /// The undersampled k-space samples themselves.
    Kspace,
}

/// Full model architecture; hashed into every parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub coils: usize,
    pub csm: NetSpec,
    pub denoiser: NetSpec,
    #[serde(default)]
    pub csm_input: CsmInput,
    #[serde(default)]
    pub combine: CombineMode,
}

impl ModelSpec {
    pub fn new(coils: usize, scale: Scale) -> Self {
        Self::with_channels(coils, scale.csm_channels(), scale.denoiser_channels())
    }

    pub fn with_channels(coils: usize, csm: Vec<usize>, denoiser: Vec<usize>) -> Self {
        Self {
            coils,
            csm: NetSpec {
                in_channels: 2 * coils,
                out_channels: 2 * coils,
                enc_channels: csm,
                kernel: 3,
                skip_connections: true,
            },
            denoiser: NetSpec {
                in_channels: 2,
                out_channels: 2,
                enc_channels: denoiser,
                kernel: 3,
                skip_connections: true,
            },
            csm_input: CsmInput::CoilImages,
            combine: CombineMode::PseudoInverse,
        }
    }

    /// First eight bytes of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Optimizer and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    pub batch: usize,
    pub w_img: f64,
    pub w_ksp: f64,
    pub seed: u64,
    /// Epochs between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 50,
            batch: 4,
            w_img: 1.5,
            w_ksp: 0.5,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |what: &str| Err(crate::Error::BadDims(format!("train config: {what}")));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.w_img > 0.0 && self.w_ksp > 0.0) {
            return bad("loss weights must be positive");
        }
        if !(self.lr > 0.0 && self.eps_adam > 0.0) || self.batch == 0 {
            return bad("lr, eps and batch must be positive");
        }
        Ok(())
    }
}

/// Flat parameter vector of the whole model with a paired gradient buffer.
/// Layout: sensitivity network, denoiser, then λ as the last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl NetParams {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            grads: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let grads = vec![0.0; values.len()];
        Self { values, grads }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        *self.values.last().expect("λ entry")
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        *self.values.last_mut().expect("λ entry") = lambda;
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
