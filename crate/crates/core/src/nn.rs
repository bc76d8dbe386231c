//! Neural building blocks composed from [`Graph`] operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const EMBEDDING_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    None,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerEncoderConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    pub positional_encoding: PositionalEncoding,
    /// Number of learned positions (sequence length including CLS).
    pub max_len: usize,
}

impl TransformerEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.feedforward_dim == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("transformer dimensions must be positive: {self:?}")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1]", self.dropout)));
        }
        Ok(())
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.init(&format!("{name}.weight"), &[d_in, d_out], Init::He { fan_in: d_in }, rng)?,
            bias: Some(store.init(&format!("{name}.bias"), &[d_out], Init::Zeros, rng)?),
        })
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear { weight: store.init(&format!("{name}.weight"), &[d_in, d_out], Init::He { fan_in: d_in }, rng)?, bias: None })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.init(&format!("{name}.gamma"), &[d], Init::Ones, rng)?,
            beta: store.init(&format!("{name}.beta"), &[d], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Conv(3×3, pad 1) → ReLU → 2×2 average pool, repeated; then global
/// average pooling. Maps `[n, 1, h, w]` to `[n, channels.last()]`.
#[derive(Clone, Debug)]
pub struct ConvStack {
    blocks: Vec<(ParamId, ParamId)>,
    out_dim: usize,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, name: &str, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::Config(format!("{name}: conv stack needs at least one block")));
        }
        let mut blocks = Vec::new();
        for (i, pair) in channels.windows(2).enumerate() {
            let (c_in, c_out) = (pair[0], pair[1]);
            let k = store.init(
                &format!("{name}.{i}.weight"),
                &[c_out, c_in, 3, 3],
                Init::He { fan_in: c_in * 9 },
                rng,
            )?;
            let b = store.init(&format!("{name}.{i}.bias"), &[c_out], Init::Zeros, rng)?;
            blocks.push((k, b));
        }
        Ok(ConvStack { blocks, out_dim: *channels.last().unwrap() })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let mut x = images;
        for &(k, b) in &self.blocks {
            let (k, b) = (g.param(k), g.param(b));
            x = g.conv2d(x, k, b, 1, 1)?;
            x = g.relu(x)?;
            x = g.avg_pool2(x)?;
        }
        g.global_avg_pool(x)
    }
}

/// Query/key/value/output projections around [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    /// Returns the output `[n, d]` and per-head probabilities `[heads, n, n]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Tensor)> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads)?;
        let probs = g.attention_probs(a).expect("attention node");
        Ok((self.o.forward(g, a)?, probs))
    }
}

/// Post-norm encoder layer with a GELU feedforward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TransformerEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.num_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.feedforward_dim, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.feedforward_dim, d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Tensor)> {
        let (a, probs) = self.attn.forward(g, x)?;
        let a = g.dropout(a, self.dropout)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ff1.forward(g, x)?;
        let f = g.gelu(f)?;
        let f = self.ff2.forward(g, f)?;
        let f = g.dropout(f, self.dropout)?;
        let x = g.add(x, f)?;
        Ok((self.norm2.forward(g, x)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    cfg: TransformerEncoderConfig,
    positions: Option<ParamId>,
    layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TransformerEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let positions = match cfg.positional_encoding {
            PositionalEncoding::Learned => Some(store.init(
                &format!("{name}.positions"),
                &[cfg.max_len, cfg.model_dim],
                Init::Normal { std: EMBEDDING_STD },
                rng,
            )?),
            PositionalEncoding::None => None,
        };
        let layers = (0..cfg.num_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { cfg: cfg.clone(), positions, layers })
    }

    pub fn config(&self) -> &TransformerEncoderConfig {
        &self.cfg
    }

    /// Encodes `tokens: [n, d]`. Returns outputs and head-averaged attention
    /// maps `[num_layers, n, n]` (`None` for an empty stack).
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Option<Tensor>)> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.cfg.model_dim {
            return Err(Error::Dimension(format!(
                "transformer expects [n, {}] tokens, got {s:?}",
                self.cfg.model_dim
            )));
        }
        let n = s[0];
        let mut x = tokens;
        if let Some(pos) = self.positions {
            if n > self.cfg.max_len {
                return Err(Error::Dimension(format!(
                    "sequence length {n} exceeds {} learned positions",
                    self.cfg.max_len
                )));
            }
            let p = g.param(pos);
            let p = if n == self.cfg.max_len { p } else { g.slice0(p, 0, n)? };
            x = g.add(x, p)?;
        }
        let mut maps = Vec::with_capacity(self.layers.len() * n * n);
        for layer in &self.layers {
            let (y, probs) = layer.forward(g, x)?;
            maps.extend(head_average(&probs).into_data());
            x = y;
        }
        let attn = if self.layers.is_empty() { None } else { Some(Tensor::new(&[self.layers.len(), n, n], maps)?) };
        Ok((x, attn))
    }
}

/// `[heads, n, n]` → `[n, n]`.
pub fn head_average(probs: &Tensor) -> Tensor {
    let s = probs.shape();
    let (h, nn) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; nn];
    for head in probs.data().chunks(nn) {
        for (o, v) in out.iter_mut().zip(head) {
            *o += v / h as f64;
        }
    }
    Tensor::new(&s[1..], out).expect("head average shape")
}
