use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::frontend::video::Frame;

pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Bilinear resampling of a `w×h` image to `ow×oh` (half-pixel centres).
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    if (w, h) == (ow, oh) {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Box-filter downscale by an integer factor.
pub fn downscale_box(src: &[f64], size: usize, factor: usize) -> Vec<f64> {
    let out = size / factor;
    let norm = 1.0 / (factor * factor) as f64;
    let mut dst = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            let mut s = 0.0;
            for dy in 0..factor {
                let row = &src[(y * factor + dy) * size + x * factor..][..factor];
                s += row.iter().sum::<f64>();
            }
            dst[y * out + x] = s * norm;
        }
    }
    dst
}

/// Converts an image to a square grayscale frame of `size` pixels. Square
/// sources shrinking by an integer factor are box-filtered; anything else
/// is bilinearly resampled.
pub fn to_frame(img: &DynamicImage, size: usize) -> Frame {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray: Vec<f64> = match img {
        DynamicImage::ImageLuma8(l) => l.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        other => other.to_rgb8().pixels().map(|p| luminance(p.0[0], p.0[1], p.0[2])).collect(),
    };
    let pixels = if w == h && w > size && w % size == 0 {
        downscale_box(&gray, w, w / size)
    } else {
        resize_bilinear(&gray, w, h, size, size)
    };
    Frame { size, pixels }
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm")
    )
}

/// Lists PNG/PGM files in filename order.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads pre-cropped face frames in filename order, as `size×size` grayscale.
pub fn load_frames(dir: &Path, size: usize) -> Result<Vec<Frame>> {
    let files = frame_files(dir)?;
    let mut frames = Vec::with_capacity(files.len());
    let mut first_dims = None;
    let mut warned = false;
    for f in &files {
        let img = match image::open(f) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping unreadable frame {}: {e}", f.display());
                continue;
            }
        };
        let dims = (img.width(), img.height());
        match first_dims {
            None => first_dims = Some(dims),
            Some(d) if d != dims && !warned => {
                log::warn!("{}: mixed frame resolutions ({d:?} vs {dims:?}); resizing", dir.display());
                warned = true;
            }
            _ => {}
        }
        frames.push(to_frame(&img, size));
    }
    if frames.is_empty() {
        return Err(Error::Input(format!("no readable PNG/PGM frames in {}", dir.display())));
    }
    Ok(frames)
}
