//! Synthetic episodes with planted, countable cues. The label of an episode
//! is `s + 1`, where `s ∈ 0..=6` is the number of cue clips (bright blobs in
//! the face video) and of cue columns (tone bursts in the audio).

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, Manifest};
use crate::error::{Error, Result};
use crate::frontend::video::segment_bounds;
use crate::frontend::{load_frames, load_wav, write_wav, AudioClip};

pub const MAX_CUES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueChannels {
    Both,
    VisionOnly,
    AudioOnly,
}

impl CueChannels {
    pub fn vision(self) -> bool {
        self != CueChannels::AudioOnly
    }

    pub fn audio(self) -> bool {
        self != CueChannels::VisionOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub episodes_per_subject: usize,
    pub min_duration_seconds: f64,
    pub max_duration_seconds: f64,
    pub frame_rate: f64,
    pub sample_rate: u32,
    pub frame_size: usize,
    /// Clips the video is divided into; cue clips index this grid.
    pub num_clips: usize,
    /// Time columns the audio is divided into; cue tones occupy distinct columns.
    pub audio_columns: usize,
    pub cue_channels: CueChannels,
    pub blob_intensity: f64,
    /// Blob half-axes as a fraction of the frame size.
    pub blob_radius: (f64, f64),
    pub tone_hz: f64,
    pub tone_amplitude: f64,
    pub label_noise: f64,
    pub question_id: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 12,
            episodes_per_subject: 10,
            min_duration_seconds: 30.0,
            max_duration_seconds: 120.0,
            frame_rate: 4.0,
            sample_rate: 16000,
            frame_size: 112,
            num_clips: 16,
            audio_columns: 8,
            cue_channels: CueChannels::Both,
            blob_intensity: 1.0,
            blob_radius: (0.18, 0.08),
            tone_hz: 1200.0,
            tone_amplitude: 0.3,
            label_noise: 0.0,
            question_id: "q01".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_subjects < 4 {
            return bad(format!("n_subjects must be at least 4, got {}", self.n_subjects));
        }
        if self.episodes_per_subject == 0 {
            return bad("episodes_per_subject must be positive".into());
        }
        if !(30.0..=120.0).contains(&self.min_duration_seconds)
            || !(30.0..=120.0).contains(&self.max_duration_seconds)
            || self.min_duration_seconds > self.max_duration_seconds
        {
            return bad(format!(
                "durations must satisfy 30 <= min <= max <= 120, got {}..{}",
                self.min_duration_seconds, self.max_duration_seconds
            ));
        }
        if self.frame_rate <= 0.0 || self.sample_rate < 2 * self.tone_hz.ceil() as u32 + 2 {
            return bad("frame_rate must be positive and tone_hz below Nyquist".into());
        }
        if self.num_clips < MAX_CUES || self.audio_columns < MAX_CUES {
            return bad(format!("num_clips and audio_columns must be at least {MAX_CUES}"));
        }
        if self.frame_size < 16 {
            return bad("frame_size must be at least 16".into());
        }
        if (self.min_duration_seconds * self.frame_rate) < self.num_clips as f64 {
            return bad("shortest episode has fewer frames than clips".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1]".into());
        }
        if !(0.7..=1.0).contains(&self.blob_intensity) {
            return bad("blob_intensity must lie in [0.7, 1]".into());
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.n_subjects * self.episodes_per_subject
    }
}

/// Per-subject appearance and voice.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectStyle {
    pub background: f64,
    pub skin: f64,
    pub texture_amp: f64,
    pub texture_freq: (f64, f64),
    pub texture_phase: f64,
    pub face_offset: (f64, f64),
    pub pitch_hz: f64,
}

impl SubjectStyle {
    /// Pitch is spread over 100–250 Hz by subject index, so no two
    /// subjects share a voice.
    pub fn generate(index: usize, n_subjects: usize, rng: &mut impl Rng) -> Self {
        SubjectStyle {
            background: rng.gen_range(0.05..0.2),
            skin: rng.gen_range(0.3..0.5),
            texture_amp: rng.gen_range(0.04..0.1),
            texture_freq: (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)),
            texture_phase: rng.gen_range(0.0..2.0 * PI),
            face_offset: (rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)),
            pitch_hz: 100.0 + 150.0 * (index as f64 + rng.gen_range(0.2..0.8)) / n_subjects as f64,
        }
    }
}

/// Cue placement for one episode. Indices are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct CuePlan {
    pub strength: usize,
    pub duration_seconds: f64,
    pub num_frames: usize,
    pub cue_clips: Vec<usize>,
    pub cue_columns: Vec<usize>,
    pub label: u8,
}

impl CuePlan {
    /// Tone intervals in seconds: the middle half of each cue column.
    pub fn tone_intervals(&self, columns: usize) -> Vec<(f64, f64)> {
        let w = self.duration_seconds / columns as f64;
        self.cue_columns.iter().map(|&c| ((c as f64 + 0.25) * w, (c as f64 + 0.75) * w)).collect()
    }
}

fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Balanced strengths: `i mod 7` over all episodes, shuffled by seed.
pub fn strengths(cfg: &SynthConfig) -> Vec<usize> {
    let mut s: Vec<usize> = (0..cfg.total_episodes()).map(|i| i % (MAX_CUES + 1)).collect();
    s.shuffle(&mut episode_rng(cfg.seed, 0));
    s
}

pub fn plan_episode(cfg: &SynthConfig, strength: usize, rng: &mut impl Rng) -> CuePlan {
    let duration = rng.gen_range(cfg.min_duration_seconds..=cfg.max_duration_seconds);
    let num_frames = ((duration * cfg.frame_rate).round() as usize).max(cfg.num_clips);
    let pick = |n: usize, rng: &mut dyn rand::RngCore| {
        let mut v = rand::seq::index::sample(rng, n, strength).into_vec();
        v.sort_unstable();
        v
    };
    let mut cue_clips = pick(cfg.num_clips, rng);
    let mut cue_columns = pick(cfg.audio_columns, rng);
    if !cfg.cue_channels.vision() {
        cue_clips.clear();
    }
    if !cfg.cue_channels.audio() {
        cue_columns.clear();
    }
    let mut label = strength as u8 + 1;
    if rng.gen::<f64>() < cfg.label_noise {
        label = rng.gen_range(1..=7);
    }
    CuePlan { strength, duration_seconds: duration, num_frames, cue_clips, cue_columns, label }
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
}

/// Renders one frame in [0, 1]. Everything but the cue blob stays below 0.7.
pub fn render_frame(cfg: &SynthConfig, style: &SubjectStyle, t: f64, cue: bool, rng: &mut impl Rng) -> Vec<f64> {
    let s = cfg.frame_size as f64;
    let noise = Normal::new(0.0, 0.015).expect("valid std");
    let sway = 0.02 * (2.0 * PI * 0.1 * t).sin();
    let cx = s * (0.5 + style.face_offset.0 + sway);
    let cy = s * (0.5 + style.face_offset.1);
    let mut px = vec![0.0; cfg.frame_size * cfg.frame_size];
    for y in 0..cfg.frame_size {
        for x in 0..cfg.frame_size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = if inside_ellipse(xf, yf, cx, cy, 0.34 * s, 0.44 * s) {
                let tex = (style.texture_freq.0 * xf + style.texture_freq.1 * yf + style.texture_phase).sin();
                let mut v = style.skin + style.texture_amp * tex;
                let eye_y = cy - 0.12 * s;
                if inside_ellipse(xf, yf, cx - 0.13 * s, eye_y, 0.06 * s, 0.035 * s)
                    || inside_ellipse(xf, yf, cx + 0.13 * s, eye_y, 0.06 * s, 0.035 * s)
                {
                    v *= 0.35;
                }
                v
            } else {
                style.background
            };
            v += noise.sample(rng);
            px[y * cfg.frame_size + x] = v.clamp(0.0, 0.68);
        }
    }
    if cue {
        let (rx, ry) = (cfg.blob_radius.0 * s, cfg.blob_radius.1 * s);
        let my = cy + 0.2 * s;
        for y in 0..cfg.frame_size {
            for x in 0..cfg.frame_size {
                if inside_ellipse(x as f64 + 0.5, y as f64 + 0.5, cx, my, rx, ry) {
                    px[y * cfg.frame_size + x] = cfg.blob_intensity;
                }
            }
        }
    }
    px
}

/// Subject hum plus low-passed noise plus tone bursts with 10 ms ramps.
pub fn render_audio(cfg: &SynthConfig, style: &SubjectStyle, plan: &CuePlan, rng: &mut impl Rng) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let n = (plan.duration_seconds * sr).round() as usize;
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let intervals = plan.tone_intervals(cfg.audio_columns);
    let ramp = 0.01;
    let mut lp = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let w = 2.0 * PI * style.pitch_hz * t;
        let hum = 0.08 * w.sin() + 0.04 * (2.0 * w).sin() + 0.02 * (3.0 * w).sin();
        let envelope = 0.75 + 0.25 * (2.0 * PI * 0.3 * t).sin();
        lp += 0.2 * (noise.sample(rng) - lp);
        let mut v = envelope * hum + lp;
        for &(a, b) in &intervals {
            if t >= a && t < b {
                let edge = ((t - a).min(b - t) / ramp).min(1.0);
                let gain = 0.5 - 0.5 * (PI * edge).cos();
                v += cfg.tone_amplitude * gain * (2.0 * PI * cfg.tone_hz * t).sin();
            }
        }
        out.push(v.clamp(-1.0, 1.0));
    }
    out
}

/// Clip index of every frame under contiguous segmentation.
pub fn clip_of_frame(num_frames: usize, num_clips: usize) -> Vec<usize> {
    let mut owner = vec![0; num_frames];
    for (c, (start, len)) in segment_bounds(num_frames, num_clips).into_iter().enumerate() {
        owner[start..start + len].iter_mut().for_each(|o| *o = c);
    }
    owner
}

fn write_episode(dir: &Path, cfg: &SynthConfig, style: &SubjectStyle, plan: &CuePlan, rng: &mut ChaCha8Rng) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let samples = render_audio(cfg, style, plan, rng);
    write_wav(&dir.join("audio.wav"), &AudioClip { sample_rate: cfg.sample_rate, samples })?;
    let owner = clip_of_frame(plan.num_frames, cfg.num_clips);
    for (i, clip) in owner.into_iter().enumerate() {
        let cue = plan.cue_clips.binary_search(&clip).is_ok();
        let px = render_frame(cfg, style, i as f64 / cfg.frame_rate, cue, rng);
        let size = cfg.frame_size as u32;
        let img = GrayImage::from_fn(size, size, |x, y| {
            Luma([(px[(y * size + x) as usize] * 255.0).round() as u8])
        });
        let path = frames_dir.join(format!("f_{i:05}.png"));
        img.save(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GeneratedEpisode {
    pub episode: Episode,
    pub plan: CuePlan,
}

pub fn episode_id(subject: usize, episode: usize) -> String {
    format!("s{:02}_e{:02}", subject + 1, episode + 1)
}

pub fn subject_id(subject: usize) -> String {
    format!("s{:02}", subject + 1)
}

/// Every episode's plan without touching the filesystem.
pub fn plan_dataset(cfg: &SynthConfig) -> Result<(Vec<SubjectStyle>, Vec<GeneratedEpisode>)> {
    cfg.validate()?;
    let styles: Vec<SubjectStyle> = (0..cfg.n_subjects)
        .map(|i| SubjectStyle::generate(i, cfg.n_subjects, &mut episode_rng(cfg.seed, 1 << 32 | i as u64)))
        .collect();
    let strengths = strengths(cfg);
    let mut out = Vec::with_capacity(cfg.total_episodes());
    for subj in 0..cfg.n_subjects {
        for e in 0..cfg.episodes_per_subject {
            let idx = subj * cfg.episodes_per_subject + e;
            let plan = plan_episode(cfg, strengths[idx], &mut episode_rng(cfg.seed, 2 << 32 | idx as u64));
            let id = episode_id(subj, e);
            let episode = Episode {
                episode_id: id.clone(),
                subject_id: subject_id(subj),
                audio_path: PathBuf::from(&id).join("audio.wav"),
                frames_dir: PathBuf::from(&id).join("frames"),
                label: plan.label,
                scenario: if e % 2 == 0 { "positive" } else { "negative" }.into(),
            };
            out.push(GeneratedEpisode { episode, plan });
        }
    }
    Ok((styles, out))
}

fn write_truth(path: &Path, episodes: &[GeneratedEpisode]) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(";");
    let mut buf = String::from("episode_id,cue_clips,cue_columns,s,label\n");
    for g in episodes {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            g.episode.episode_id,
            join(&g.plan.cue_clips),
            join(&g.plan.cue_columns),
            g.plan.strength,
            g.plan.label
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the dataset under `out_dir` and returns its manifest with paths
/// resolved against `out_dir` (the file on disk stores them relative). On failure every episode directory created by
/// this call is removed again.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let (styles, episodes) = plan_dataset(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let result: Result<()> = episodes.par_iter().enumerate().try_for_each(|(idx, g)| {
        let dir = out_dir.join(&g.episode.episode_id);
        let subj = idx / cfg.episodes_per_subject;
        let mut rng = episode_rng(cfg.seed, 3 << 32 | idx as u64);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_episode(&dir, cfg, &styles[subj], &g.plan, &mut rng)
    });
    let manifest = Manifest { question_id: cfg.question_id.clone(), episodes: episodes.iter().map(|g| g.episode.clone()).collect() };
    let result = result
        .and_then(|_| manifest.save(&out_dir.join("manifest.json")))
        .and_then(|_| write_truth(&out_dir.join("truth.csv"), &episodes));
    if let Err(e) = result {
        for g in &episodes {
            let _ = std::fs::remove_dir_all(out_dir.join(&g.episode.episode_id));
        }
        let _ = std::fs::remove_file(out_dir.join("manifest.json"));
        let _ = std::fs::remove_file(out_dir.join("truth.csv"));
        return Err(e);
    }
    let mut resolved = manifest;
    for ep in &mut resolved.episodes {
        ep.audio_path = out_dir.join(&ep.audio_path);
        ep.frames_dir = out_dir.join(&ep.frames_dir);
    }
    Ok(resolved)
}

/// Power of `freq` in `x` via the Goertzel recurrence, as the amplitude of
/// an equivalent sinusoid.
pub fn goertzel_amplitude(x: &[f64], freq: f64, sample_rate: f64) -> f64 {
    let w = 2.0 * PI * freq / sample_rate;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in x {
        let s0 = v + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    let power = s1 * s1 + s2 * s2 - coeff * s1 * s2;
    2.0 * power.max(0.0).sqrt() / x.len() as f64
}

/// Clips (0-based) in which some frame has a pixel above `threshold`.
pub fn detect_blob_clips(frames: &[crate::frontend::Frame], num_clips: usize, threshold: f64) -> Vec<usize> {
    let owner = clip_of_frame(frames.len(), num_clips);
    let mut hit = vec![false; num_clips];
    for (f, &c) in frames.iter().zip(&owner) {
        if f.pixels.iter().any(|&p| p > threshold) {
            hit[c] = true;
        }
    }
    (0..num_clips).filter(|&c| hit[c]).collect()
}

/// Columns (0-based) whose middle half carries a tone at `tone_hz` above
/// half of `tone_amplitude`.
pub fn detect_tone_columns(audio: &AudioClip, columns: usize, tone_hz: f64, tone_amplitude: f64) -> Vec<usize> {
    let n = audio.samples.len();
    (0..columns)
        .filter(|&c| {
            let a = (c * 4 + 1) * n / (columns * 4);
            let b = (c * 4 + 3) * n / (columns * 4);
            b > a && goertzel_amplitude(&audio.samples[a..b], tone_hz, audio.sample_rate as f64) > 0.5 * tone_amplitude
        })
        .collect()
}

pub const BLOB_THRESHOLD: f64 = 0.85;

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeDetection {
    pub episode_id: String,
    pub label: u8,
    pub blob_clips: Vec<usize>,
    pub tone_columns: Vec<usize>,
    pub predicted: u8,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparabilityReport {
    pub episodes: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub detections: Vec<EpisodeDetection>,
}

/// Recovers labels by counting cues directly from the files: the larger of
/// the blob-clip count and the tone-column count, plus one.
pub fn verify_separability(manifest: &Manifest, cfg: &SynthConfig) -> Result<SeparabilityReport> {
    let detections = manifest
        .episodes
        .par_iter()
        .map(|ep| {
            let frames = load_frames(&ep.frames_dir, cfg.frame_size)?;
            let blob_clips = detect_blob_clips(&frames, cfg.num_clips, BLOB_THRESHOLD);
            let audio = load_wav(&ep.audio_path)?;
            let tone_columns = detect_tone_columns(&audio, cfg.audio_columns, cfg.tone_hz, cfg.tone_amplitude);
            let count = blob_clips.len().max(tone_columns.len()).min(MAX_CUES);
            Ok(EpisodeDetection {
                episode_id: ep.episode_id.clone(),
                label: ep.label,
                blob_clips,
                tone_columns,
                predicted: count as u8 + 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = detections.iter().filter(|d| d.predicted == d.label).count();
    Ok(SeparabilityReport {
        episodes: detections.len(),
        correct,
        accuracy: correct as f64 / detections.len().max(1) as f64,
        detections,
    })
}
