use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{PositionalEncoding, TransformerEncoderConfig};

pub const NUM_CLASSES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[serde(alias = "audio")]
    AudioOnly,
    #[serde(alias = "vision")]
    VisionOnly,
    Multimodal,
}

impl Modality {
    pub fn uses_audio(self) -> bool {
        matches!(self, Modality::AudioOnly | Modality::Multimodal)
    }

    pub fn uses_vision(self) -> bool {
        matches!(self, Modality::VisionOnly | Modality::Multimodal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::AudioOnly => "audio",
            Modality::VisionOnly => "vision",
            Modality::Multimodal => "multimodal",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" | "audio_only" => Ok(Modality::AudioOnly),
            "vision" | "vision_only" => Ok(Modality::VisionOnly),
            "multimodal" => Ok(Modality::Multimodal),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub num_patches: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Conv stack channels, starting with the single input channel.
    pub channels: Vec<usize>,
    pub transformer: TransformerEncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
    pub channels: Vec<usize>,
    pub stage1: TransformerEncoderConfig,
    pub stage2: TransformerEncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub transformer: TransformerEncoderConfig,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    pub model_dim: usize,
    pub audio: AudioEncoderConfig,
    pub vision: VisionEncoderConfig,
    pub fusion: FusionConfig,
    pub num_classes: usize,
}

fn encoder(d: usize, heads: usize, layers: usize, max_len: usize, dropout: f64) -> TransformerEncoderConfig {
    TransformerEncoderConfig {
        model_dim: d,
        num_heads: heads,
        num_layers: layers,
        feedforward_dim: 2 * d,
        dropout,
        positional_encoding: PositionalEncoding::Learned,
        max_len,
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard(Modality::Multimodal)
    }
}

impl ModelConfig {
    /// Full-size architecture: d = 128, 16 mel patches of 64×64,
    /// 16 clips × 16 frames of 112×112.
    pub fn standard(modality: Modality) -> Self {
        Self::build(modality, 128, 4, 2, 0.1, (16, 64, 64, vec![1, 16, 32, 64]), (16, 16, 112, vec![1, 16, 32, 64, 128]), 128)
    }

    /// Reduced input geometry for single-core training runs: 16×16 mel
    /// patches, 16×16 frames and narrower conv stacks; transformer widths
    /// unchanged.
    pub fn desk(modality: Modality) -> Self {
        Self::build(modality, 128, 4, 2, 0.1, (16, 16, 16, vec![1, 8, 16, 32]), (16, 16, 16, vec![1, 8, 16, 32, 64]), 128)
    }

    /// Tiny architecture for finite-difference checks.
    pub fn toy(modality: Modality) -> Self {
        Self::build(modality, 16, 4, 2, 0.0, (2, 8, 8, vec![1, 2, 4]), (2, 2, 8, vec![1, 2, 3, 4]), 8)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        modality: Modality,
        d: usize,
        heads: usize,
        layers: usize,
        dropout: f64,
        audio: (usize, usize, usize, Vec<usize>),
        vision: (usize, usize, usize, Vec<usize>),
        mlp_hidden: usize,
    ) -> Self {
        let (patches, ph, pw, ach) = audio;
        let (clips, frames, size, vch) = vision;
        ModelConfig {
            modality,
            model_dim: d,
            audio: AudioEncoderConfig {
                num_patches: patches,
                patch_height: ph,
                patch_width: pw,
                channels: ach,
                transformer: encoder(d, heads, layers, patches + 1, dropout),
            },
            vision: VisionEncoderConfig {
                num_clips: clips,
                frames_per_clip: frames,
                frame_size: size,
                channels: vch,
                stage1: encoder(d, heads, layers, frames + 1, dropout),
                stage2: encoder(d, heads, layers, clips + 1, dropout),
            },
            fusion: FusionConfig { transformer: encoder(d, heads, 1, 2, dropout), mlp_hidden, dropout },
            num_classes: NUM_CLASSES,
        }
    }

    /// Sets dropout everywhere.
    pub fn with_dropout(mut self, p: f64) -> Self {
        self.audio.transformer.dropout = p;
        self.vision.stage1.dropout = p;
        self.vision.stage2.dropout = p;
        self.fusion.transformer.dropout = p;
        self.fusion.dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        for (name, t) in [
            ("audio.transformer", &self.audio.transformer),
            ("vision.stage1", &self.vision.stage1),
            ("vision.stage2", &self.vision.stage2),
            ("fusion.transformer", &self.fusion.transformer),
        ] {
            t.validate()?;
            if t.model_dim != d {
                return Err(Error::Config(format!("{name}.model_dim {} != model_dim {d}", t.model_dim)));
            }
        }
        let need = [
            ("audio.transformer", self.audio.transformer.max_len, self.audio.num_patches + 1),
            ("vision.stage1", self.vision.stage1.max_len, self.vision.frames_per_clip + 1),
            ("vision.stage2", self.vision.stage2.max_len, self.vision.num_clips + 1),
            ("fusion.transformer", self.fusion.transformer.max_len, 2),
        ];
        for (name, have, want) in need {
            if have != want {
                return Err(Error::Config(format!("{name}.max_len is {have}, sequence length is {want}")));
            }
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be {NUM_CLASSES}")));
        }
        let check_stack = |name: &str, ch: &[usize], h: usize, w: usize| -> Result<()> {
            if ch.len() < 2 || ch[0] != 1 || ch.contains(&0) {
                return Err(Error::Config(format!("{name}.channels must start at 1 and be positive: {ch:?}")));
            }
            let blocks = ch.len() - 1;
            if (h >> blocks) == 0 || (w >> blocks) == 0 {
                return Err(Error::Config(format!("{name}: {h}x{w} input too small for {blocks} pooling blocks")));
            }
            Ok(())
        };
        check_stack("audio", &self.audio.channels, self.audio.patch_height, self.audio.patch_width)?;
        check_stack("vision", &self.vision.channels, self.vision.frame_size, self.vision.frame_size)?;
        if self.audio.num_patches == 0 || self.vision.num_clips == 0 || self.vision.frames_per_clip == 0 {
            return Err(Error::Config("instance counts must be positive".into()));
        }
        if self.fusion.mlp_hidden == 0 {
            return Err(Error::Config("fusion.mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}
