use crate::error::{Error, Result};
use crate::frontend::patch::standardize;
use crate::tensor::Tensor;

/// Square grayscale frame with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Dimension(format!("{size}x{size} frame with {} pixels", pixels.len())));
        }
        Ok(Frame { size, pixels })
    }
}

/// `M` clips of `T` frames each, with the source frame index of every
/// selected frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    /// `[M, T, s, s]`, values in [0, 1].
    pub clips: Tensor,
    pub source_indices: Vec<Vec<usize>>,
}

impl ClipSet {
    pub fn num_clips(&self) -> usize {
        self.clips.shape()[0]
    }

    /// Episode-level standardization of every pixel; the model input.
    pub fn standardized(&self) -> Tensor {
        Tensor::new(self.clips.shape(), standardize(self.clips.data())).expect("same shape")
    }
}

/// Splits `n` items into `m` contiguous segments whose sizes differ by at
/// most one. Returns `(start, len)` pairs; when `n < m` some segments are
/// empty and start at the frame they would have begun with.
pub fn segment_bounds(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .map(|i| {
            let start = i * n / m;
            let end = (i + 1) * n / m;
            (start, end - start)
        })
        .collect()
}

/// Indices of `t` uniformly spaced picks from a segment; frames repeat when
/// the segment is shorter than `t`.
pub fn sample_segment(start: usize, len: usize, t: usize, n: usize) -> Vec<usize> {
    if len == 0 {
        return vec![start.min(n - 1); t];
    }
    (0..t).map(|j| start + j * len / t).collect()
}

pub fn segment_video(frames: &[Frame], m: usize, t: usize) -> Result<ClipSet> {
    let first = frames.first().ok_or_else(|| Error::Input("no frames to segment".into()))?;
    if m == 0 || t == 0 {
        return Err(Error::Config(format!("clip counts must be positive (M={m}, T={t})")));
    }
    let size = first.size;
    if let Some(bad) = frames.iter().position(|f| f.size != size) {
        return Err(Error::Dimension(format!("frame {bad} is {0}x{0}, expected {size}x{size}", frames[bad].size)));
    }
    let n = frames.len();
    let mut data = Vec::with_capacity(m * t * size * size);
    let mut source_indices = Vec::with_capacity(m);
    for (start, len) in segment_bounds(n, m) {
        let picks = sample_segment(start, len, t, n);
        for &i in &picks {
            data.extend(frames[i].pixels.iter().map(|p| p.clamp(0.0, 1.0)));
        }
        source_indices.push(picks);
    }
    Ok(ClipSet { clips: Tensor::new(&[m, t, size, size], data)?, source_indices })
}
