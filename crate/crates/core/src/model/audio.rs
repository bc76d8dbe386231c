use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::AudioEncoderConfig;
use crate::nn::{ConvStack, Linear, TransformerEncoder, EMBEDDING_STD};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Shared per-patch CNN, projection to the model width, and a Transformer
/// whose CLS output (position 0) is the clip-level audio representation.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    cfg: AudioEncoderConfig,
    cnn: ConvStack,
    projection: Linear,
    cls: ParamId,
    transformer: TransformerEncoder,
}

pub struct AudioEncoding {
    pub z: Var,
    /// Head-averaged maps `[layers, P+1, P+1]`.
    pub attention: Option<Tensor>,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, cfg: &AudioEncoderConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let cnn = ConvStack::new(store, "audio.cnn", &cfg.channels, rng)?;
        let projection = Linear::new(store, "audio.projection", cnn.out_dim(), d, rng)?;
        let cls = store.init("audio.cls", &[1, d], Init::Normal { std: EMBEDDING_STD }, rng)?;
        let transformer = TransformerEncoder::new(store, "audio.transformer", &cfg.transformer, rng)?;
        Ok(AudioEncoder { cfg: cfg.clone(), cnn, projection, cls, transformer })
    }

    pub fn feature_dim(&self) -> usize {
        self.cnn.out_dim()
    }

    /// `[P, h, w]` patches → per-patch features `[P, d_a]`.
    pub fn encode_patches(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        let want = [self.cfg.num_patches, self.cfg.patch_height, self.cfg.patch_width];
        if s != want {
            return Err(Error::Dimension(format!("audio encoder expects patches {want:?}, got {s:?}")));
        }
        let images = g.reshape(patches, &[s[0], 1, s[1], s[2]])?;
        self.cnn.forward(g, images)
    }

    pub fn encode(&self, g: &mut Graph, patches: Var) -> Result<AudioEncoding> {
        let features = self.encode_patches(g, patches)?;
        let tokens = self.projection.forward(g, features)?;
        let cls = g.param(self.cls);
        let seq = g.concat0(&[cls, tokens])?;
        let (out, attention) = self.transformer.forward(g, seq)?;
        let z = g.row(out, 0)?;
        Ok(AudioEncoding { z, attention })
    }
}
