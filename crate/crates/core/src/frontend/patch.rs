use crate::error::{Error, Result};
use crate::frontend::mel::MelSpectrogram;
use crate::tensor::Tensor;

/// Variance below which an image is treated as constant.
pub const VARIANCE_GUARD: f64 = 1e-12;

/// Mel patches on a `grid_rows × grid_cols` grid, numbered row-major from
/// the top-left block of the image (mel bin 0, first frame).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `[rows·cols, patch_h, patch_w]`.
    pub patches: Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.patches.shape()[1], self.patches.shape()[2])
    }

    /// Patch at grid cell `(row, col)`.
    pub fn patch(&self, row: usize, col: usize) -> Tensor {
        self.patches.index0(row * self.grid_cols + col).expect("grid cell in range")
    }

    /// Stitches the grid back into the `[rows·ph, cols·pw]` image.
    pub fn reassemble(&self) -> Vec<f64> {
        let (ph, pw) = self.patch_size();
        let width = self.grid_cols * pw;
        let mut img = vec![0.0; self.grid_rows * ph * width];
        for (i, patch) in self.patches.data().chunks(ph * pw).enumerate() {
            let (r, c) = (i / self.grid_cols, i % self.grid_cols);
            for y in 0..ph {
                let dst = (r * ph + y) * width + c * pw;
                img[dst..dst + pw].copy_from_slice(&patch[y * pw..(y + 1) * pw]);
            }
        }
        img
    }
}

/// Zero mean, unit (population) variance; a constant image becomes zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var < VARIANCE_GUARD {
        return vec![0.0; values.len()];
    }
    let inv = 1.0 / var.sqrt();
    values.iter().map(|v| (v - mean) * inv).collect()
}

/// Linear resampling of the time axis of a `[rows, n_in]` image to
/// `n_out` columns (half-pixel centres, edges clamped). `n_in == n_out`
/// returns the input unchanged.
pub fn resize_columns(values: &[f64], rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    if n_in == n_out {
        return values.to_vec();
    }
    let scale = n_in as f64 / n_out as f64;
    let taps: Vec<(usize, usize, f64)> = (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect();
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let row = &values[r * n_in..(r + 1) * n_in];
        for (j, &(lo, hi, f)) in taps.iter().enumerate() {
            out[r * n_out + j] = row[lo] * (1.0 - f) + row[hi] * f;
        }
    }
    out
}

/// Resizes the mel image to `canvas_width` frames, standardizes it and cuts
/// it into a `grid_rows × grid_cols` grid.
pub fn patchify(mel: &MelSpectrogram, canvas_width: usize, grid_rows: usize, grid_cols: usize) -> Result<PatchSet> {
    if grid_rows == 0 || grid_cols == 0 || mel.n_mels % grid_rows != 0 || canvas_width % grid_cols != 0 {
        return Err(Error::Config(format!(
            "{}x{canvas_width} canvas does not split into a {grid_rows}x{grid_cols} grid",
            mel.n_mels
        )));
    }
    if mel.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("mel spectrogram contains non-finite values".into()));
    }
    let resized = resize_columns(&mel.values, mel.n_mels, mel.n_time, canvas_width);
    let img = standardize(&resized);
    let (ph, pw) = (mel.n_mels / grid_rows, canvas_width / grid_cols);
    let mut data = Vec::with_capacity(img.len());
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            for y in 0..ph {
                let start = (r * ph + y) * canvas_width + c * pw;
                data.extend_from_slice(&img[start..start + pw]);
            }
        }
    }
    Ok(PatchSet { patches: Tensor::new(&[grid_rows * grid_cols, ph, pw], data)?, grid_rows, grid_cols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::mel::MelParams;

    fn mel(n_mels: usize, n_time: usize, f: impl Fn(usize, usize) -> f64) -> MelSpectrogram {
        let values = (0..n_mels * n_time).map(|i| f(i / n_time, i % n_time)).collect();
        MelSpectrogram { n_mels, n_time, values, params: MelParams::default() }
    }

    #[test]
    fn identity_resize_and_layout() {
        let m = mel(128, 512, |r, c| ((r * 7 + c * 3) % 17) as f64);
        let ps = patchify(&m, 512, 2, 8).unwrap();
        assert_eq!(ps.patches.shape(), &[16, 64, 64]);
        let img = standardize(&m.values);
        let p = ps.patch(0, 0);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(p.at(&[y, x]), img[y * 512 + x]);
            }
        }
        assert_eq!(ps.reassemble(), img);
        let p = ps.patch(1, 3);
        assert_eq!(p.at(&[5, 7]), img[(64 + 5) * 512 + 3 * 64 + 7]);
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let m = mel(128, 300, |_, _| -4.0);
        let ps = patchify(&m, 512, 2, 8).unwrap();
        assert!(ps.patches.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_preserves_linear_ramps() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let up = resize_columns(&v, 1, 10, 40);
        assert_eq!(up.len(), 40);
        assert!(up.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(up[0], 0.0);
        assert_eq!(up[39], 9.0);
    }

    #[test]
    fn rejects_indivisible_grid() {
        let m = mel(100, 512, |_, _| 0.0);
        assert!(patchify(&m, 512, 3, 8).is_err());
    }
}
