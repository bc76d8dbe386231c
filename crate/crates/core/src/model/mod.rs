//! The multimodal UX estimator: audio encoder, two-stage vision encoder and
//! fusion classifier, sharing one [`ParamStore`].

mod audio;
mod config;
mod fusion;
mod vision;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use audio::{AudioEncoder, AudioEncoding};
pub use config::{AudioEncoderConfig, FusionConfig, Modality, ModelConfig, VisionEncoderConfig, NUM_CLASSES};
pub use fusion::{loss, predict, FusionHead};
pub use vision::{ClipEncoding, VideoEncoding, VisionEncoder};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::weights_io;

/// Model inputs for one episode.
#[derive(Clone, Debug, Default)]
pub struct ModelInput {
    /// `[P, h_a, w_a]` standardized mel patches.
    pub patches: Option<Tensor>,
    /// `[M, T, s, s]` standardized face clips.
    pub clips: Option<Tensor>,
}

/// Module structure without parameter values.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub audio: Option<AudioEncoder>,
    pub vision: Option<VisionEncoder>,
    pub fusion: FusionHead,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub z_audio: Option<Var>,
    pub z_vision: Option<Var>,
    pub audio_attention: Option<Tensor>,
    pub vision_stage2_attention: Option<Tensor>,
    pub vision_stage1_attention: Vec<Option<Tensor>>,
    pub clip_features: Vec<Var>,
}

impl Architecture {
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<ForwardOutput> {
        let modality = self.config.modality;
        let (z_audio, audio_attention) = match (&self.audio, &input.patches) {
            (Some(enc), Some(p)) => {
                let v = g.constant(p.clone());
                let e = enc.encode(g, v)?;
                (Some(e.z), e.attention)
            }
            (Some(_), None) => return Err(Error::Config(format!("{} model needs audio patches", modality.as_str()))),
            (None, _) => (None, None),
        };
        let mut video = None;
        match (&self.vision, &input.clips) {
            (Some(enc), Some(c)) => {
                let v = g.constant(c.clone());
                video = Some(enc.encode_video(g, v)?);
            }
            (Some(_), None) => return Err(Error::Config(format!("{} model needs face clips", modality.as_str()))),
            (None, _) => {}
        }
        let z_vision = video.as_ref().map(|e| e.z);
        let (logits, _) = self.fusion.classify(g, z_audio, z_vision, modality)?;
        let (vision_stage2_attention, vision_stage1_attention, clip_features) = match video {
            Some(e) => (e.stage2_attention, e.stage1_attention, e.clip_features),
            None => (None, Vec::new(), Vec::new()),
        };
        Ok(ForwardOutput {
            logits,
            z_audio,
            z_vision,
            audio_attention,
            vision_stage2_attention,
            vision_stage1_attention,
            clip_features,
        })
    }
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct UxModel {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl UxModel {
    /// Randomly initialised model; identical seeds give identical weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.model_dim;
        let audio = if config.modality.uses_audio() {
            Some(AudioEncoder::new(&mut params, &config.audio, d, &mut rng)?)
        } else {
            None
        };
        let vision = if config.modality.uses_vision() {
            Some(VisionEncoder::new(&mut params, &config.vision, d, &mut rng)?)
        } else {
            None
        };
        let fusion = FusionHead::new(&mut params, &config.fusion, d, &mut rng)?;
        Ok(UxModel { arch: Architecture { config: config.clone(), audio, vision, fusion }, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.params);
        let out = self.arch.forward(&mut g, input)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn predict(&self, input: &ModelInput) -> Result<u8> {
        Ok(predict(&self.logits(input)?))
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        weights_io::save_weights(&self.params, weights)?;
        let cfg_path = config_path(weights);
        let json = serde_json::to_string_pretty(self.config())?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))
    }

    /// Loads weights plus the JSON config stored next to them.
    pub fn load(weights: &Path) -> Result<Self> {
        let cfg_path = config_path(weights);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        Self::load_with_config(&config, weights)
    }

    pub fn load_with_config(config: &ModelConfig, weights: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        weights_io::load_into(&mut model.params, weights)?;
        Ok(model)
    }
}

/// `fold1.uxw` → `fold1.json`.
pub fn config_path(weights: &Path) -> std::path::PathBuf {
    weights.with_extension("json")
}
