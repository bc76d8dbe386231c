use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::{FusionConfig, Modality, NUM_CLASSES};
use crate::nn::{Linear, TransformerEncoder};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Shared Transformer over the two modality tokens, then a two-layer MLP
/// over their concatenated outputs.
#[derive(Clone, Debug)]
pub struct FusionHead {
    transformer: TransformerEncoder,
    hidden: Linear,
    output: Linear,
    dropout: f64,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FusionHead {
            transformer: TransformerEncoder::new(store, "fusion.transformer", &cfg.transformer, rng)?,
            hidden: Linear::new(store, "fusion.mlp.0", 2 * d, cfg.mlp_hidden, rng)?,
            output: Linear::new(store, "fusion.mlp.1", cfg.mlp_hidden, NUM_CLASSES, rng)?,
            dropout: cfg.dropout,
        })
    }

    /// Logits `[7]`. A unimodal model feeds its single vector into both
    /// token slots.
    pub fn classify(
        &self,
        g: &mut Graph,
        z_audio: Option<Var>,
        z_vision: Option<Var>,
        modality: Modality,
    ) -> Result<(Var, Option<Tensor>)> {
        let (a, v) = match (modality, z_audio, z_vision) {
            (Modality::Multimodal, Some(a), Some(v)) => (a, v),
            (Modality::AudioOnly, Some(a), None) => (a, a),
            (Modality::VisionOnly, None, Some(v)) => (v, v),
            (m, a, v) => {
                return Err(Error::Config(format!(
                    "{} model given audio={} vision={}",
                    m.as_str(),
                    a.is_some(),
                    v.is_some()
                )))
            }
        };
        let tokens = g.stack(&[a, v])?;
        let (out, attn) = self.transformer.forward(g, tokens)?;
        let d = g.shape(out)[1];
        let joined = g.reshape(out, &[1, 2 * d])?;
        let h = self.hidden.forward(g, joined)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.dropout)?;
        let logits = self.output.forward(g, h)?;
        Ok((g.reshape(logits, &[NUM_CLASSES])?, attn))
    }
}

/// Predicted score 1..=7: argmax with ties broken toward the lower score.
pub fn predict(logits: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8 + 1
}

/// Mean cross-entropy of `logits: [B, 7]` against labels in 1..=7.
pub fn loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let targets = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (1..=NUM_CLASSES as u8).contains(&l) {
                Ok((l - 1) as usize)
            } else {
                Err(Error::Validation(format!("label {l} at batch position {i} outside 1..=7")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    g.cross_entropy(logits, &targets)
}
