use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::VisionEncoderConfig;
use crate::nn::{ConvStack, Linear, TransformerEncoder, EMBEDDING_STD};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Two-stage multi-instance encoder. Stage 1 aggregates the frames of one
/// clip into a clip vector; stage 2 aggregates clip vectors into the video
/// representation. The frame CNN and the stage-1 weights (including its
/// CLS token) are shared by every clip.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    cfg: VisionEncoderConfig,
    cnn: ConvStack,
    projection: Linear,
    stage1_cls: ParamId,
    stage1: TransformerEncoder,
    stage2_cls: ParamId,
    stage2: TransformerEncoder,
}

pub struct ClipEncoding {
    pub f: Var,
    pub attention: Option<Tensor>,
}

pub struct VideoEncoding {
    pub z: Var,
    /// Per-clip vectors fed to stage 2, in clip order.
    pub clip_features: Vec<Var>,
    pub stage2_attention: Option<Tensor>,
    pub stage1_attention: Vec<Option<Tensor>>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, cfg: &VisionEncoderConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let cnn = ConvStack::new(store, "vision.frame_cnn", &cfg.channels, rng)?;
        let projection = Linear::new(store, "vision.frame_projection", cnn.out_dim(), d, rng)?;
        let stage1_cls = store.init("vision.stage1.cls", &[1, d], Init::Normal { std: EMBEDDING_STD }, rng)?;
        let stage1 = TransformerEncoder::new(store, "vision.stage1.transformer", &cfg.stage1, rng)?;
        let stage2_cls = store.init("vision.stage2.cls", &[1, d], Init::Normal { std: EMBEDDING_STD }, rng)?;
        let stage2 = TransformerEncoder::new(store, "vision.stage2.transformer", &cfg.stage2, rng)?;
        Ok(VisionEncoder { cfg: cfg.clone(), cnn, projection, stage1_cls, stage1, stage2_cls, stage2 })
    }

    pub fn feature_dim(&self) -> usize {
        self.cnn.out_dim()
    }

    fn check_frames(&self, s: &[usize], leading: &[usize]) -> Result<()> {
        let mut want = leading.to_vec();
        want.extend([self.cfg.frame_size, self.cfg.frame_size]);
        if s != want.as_slice() {
            return Err(Error::Dimension(format!("vision encoder expects {want:?}, got {s:?}")));
        }
        Ok(())
    }

    /// `[T, s, s]` frames → per-frame features `[T, d_v]`.
    pub fn encode_frames(&self, g: &mut Graph, clip: Var) -> Result<Var> {
        let s = g.shape(clip).to_vec();
        self.check_frames(&s, &[self.cfg.frames_per_clip])?;
        let images = g.reshape(clip, &[s[0], 1, s[1], s[2]])?;
        self.cnn.forward(g, images)
    }

    fn aggregate_clip(&self, g: &mut Graph, frame_features: Var) -> Result<ClipEncoding> {
        let tokens = self.projection.forward(g, frame_features)?;
        let cls = g.param(self.stage1_cls);
        let seq = g.concat0(&[cls, tokens])?;
        let (out, attention) = self.stage1.forward(g, seq)?;
        Ok(ClipEncoding { f: g.row(out, 0)?, attention })
    }

    /// One clip `[T, s, s]` → clip vector `[d]`.
    pub fn encode_clip(&self, g: &mut Graph, clip: Var) -> Result<ClipEncoding> {
        let features = self.encode_frames(g, clip)?;
        self.aggregate_clip(g, features)
    }

    /// `[M, T, s, s]` clips → video vector `[d]`.
    pub fn encode_video(&self, g: &mut Graph, clips: Var) -> Result<VideoEncoding> {
        let s = g.shape(clips).to_vec();
        let (m, t) = (self.cfg.num_clips, self.cfg.frames_per_clip);
        self.check_frames(&s, &[m, t])?;
        // All frames go through the shared CNN in one batch.
        let frames = g.reshape(clips, &[m * t, 1, s[2], s[3]])?;
        let features = self.cnn.forward(g, frames)?;
        let mut clip_features = Vec::with_capacity(m);
        let mut stage1_attention = Vec::with_capacity(m);
        for i in 0..m {
            let rows = g.slice0(features, i * t, t)?;
            let enc = self.aggregate_clip(g, rows)?;
            clip_features.push(enc.f);
            stage1_attention.push(enc.attention);
        }
        let stacked = g.stack(&clip_features)?;
        let cls = g.param(self.stage2_cls);
        let seq = g.concat0(&[cls, stacked])?;
        let (out, stage2_attention) = self.stage2.forward(g, seq)?;
        Ok(VideoEncoding { z: g.row(out, 0)?, clip_features, stage2_attention, stage1_attention })
    }
}
