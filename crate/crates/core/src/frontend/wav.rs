use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads 16-bit PCM WAV; stereo is averaged to mono.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: only 16-bit PCM is supported, got {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::Format(format!("{}: {channels} channels, expected mono or stereo", path.display())));
    }
    let raw = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    let samples: Vec<f64> = if channels == 2 {
        raw.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    } else {
        raw
    };
    if samples.is_empty() {
        return Err(Error::Input(format!("{}: no samples", path.display())));
    }
    Ok(AudioClip { sample_rate: spec.sample_rate, samples })
}

/// Writes 16-bit mono PCM; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s)).map_err(|e| map_hound(path, e))?;
    }
    w.finalize().map_err(|e| map_hound(path, e))
}

pub fn quantize_i16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Linear-interpolation resampling.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let n_out = ((samples.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let ratio = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = samples[j.min(samples.len() - 1)];
            let b = samples[(j + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, bits: u16, samples: &[i32]) {
        let spec = hound::WavSpec { channels, sample_rate: 16000, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            if bits == 16 {
                w.write_sample(s as i16).unwrap();
            } else {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn zeros_and_scale_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, 1, 16, &[0, 0, 0, -32768, 32767]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(&clip.samples[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(clip.samples[3], -1.0);
        assert_eq!(clip.samples[4], 32767.0 / 32768.0);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 2, 16, &[1000, 3000, -200, 200]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples, vec![2000.0 / 32768.0, 0.0]);
    }

    #[test]
    fn rejects_24_bit_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w24.wav");
        write_raw(&p, 1, 24, &[1, 2, 3]);
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));

        let p = dir.path().join("t.wav");
        write_raw(&p, 1, 16, &vec![5; 1000]);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 301]).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn sine_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let samples: Vec<f64> = (0..4000).map(|i| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect();
        write_wav(&p, &AudioClip { sample_rate: 16000, samples: samples.clone() }).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.samples.len(), samples.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn resample_halves_length() {
        let s: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = resample_linear(&s, 32000, 16000);
        assert_eq!(r.len(), 50);
        assert_eq!(r[10], 20.0);
    }
}
