use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::wav::{resample_linear, AudioClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams { sample_rate: 16000, n_fft: 1024, hop: 256, n_mels: 128, log_floor: 1e-10 }
    }
}

/// Natural-log mel power, row-major `[n_mels, n_time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_time: usize,
    pub values: Vec<f64>,
    pub params: MelParams,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, t: usize) -> f64 {
        self.values[mel * self.n_time + t]
    }

    /// Column `t` across all mel bands.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.at(m, t)).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `n_mels + 2` points evenly spaced in mel from 0 to Nyquist.
pub fn mel_band_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

/// Centre frequency of each band.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_band_edges(n_mels, sample_rate)[1..=n_mels].to_vec()
}

/// Triangular filters `[n_mels][n_fft/2 + 1]`, peak weight 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_band_edges(n_mels, sample_rate);
    let n_bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    let up = (f - lo) / (c - lo);
                    let down = (hi - f) / (hi - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn compute_mel(audio: &AudioClip, params: &MelParams) -> Result<MelSpectrogram> {
    if params.n_fft == 0 || params.hop == 0 || params.n_mels == 0 {
        return Err(Error::Config(format!("invalid mel parameters {params:?}")));
    }
    let resampled;
    let samples = if audio.sample_rate != params.sample_rate {
        resampled = resample_linear(&audio.samples, audio.sample_rate, params.sample_rate);
        &resampled
    } else {
        &audio.samples
    };
    if samples.len() < params.n_fft {
        return Err(Error::InputTooShort(format!(
            "{} samples, need at least one window of {}",
            samples.len(),
            params.n_fft
        )));
    }
    let n_time = (samples.len() - params.n_fft) / params.hop + 1;
    let window = hann(params.n_fft);
    let bank = mel_filterbank(params.n_mels, params.n_fft, params.sample_rate);
    // Non-zero support of each filter, to skip empty multiplications.
    let support: Vec<(usize, usize)> = bank
        .iter()
        .map(|f| {
            let first = f.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = f.iter().rposition(|&w| w > 0.0).map_or(0, |l| l + 1);
            (first, last.max(first))
        })
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); params.n_fft];
    let mut power = vec![0.0; params.n_fft / 2 + 1];
    let mut values = vec![0.0; params.n_mels * n_time];
    for t in 0..n_time {
        let frame = &samples[t * params.hop..t * params.hop + params.n_fft];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for (m, (filter, &(lo, hi))) in bank.iter().zip(&support).enumerate() {
            let e: f64 = (lo..hi).map(|k| filter[k] * power[k]).sum();
            values[m * n_time + t] = e.max(params.log_floor).ln();
        }
    }
    Ok(MelSpectrogram { n_mels: params.n_mels, n_time, values, params: params.clone() })
}
