//! Raw recordings to instance bags: WAV → log-mel → patch grid, and face
//! frames → clips.

pub mod frames;
pub mod mel;
pub mod patch;
pub mod video;
pub mod wav;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use frames::load_frames;
pub use mel::{compute_mel, MelParams, MelSpectrogram};
pub use patch::{patchify, PatchSet};
pub use video::{segment_video, ClipSet, Frame};
pub use wav::{load_wav, write_wav, AudioClip};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Input geometry shared by preprocessing and the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub mel: MelParams,
    pub canvas_width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self::for_model(&ModelConfig::default())
    }
}

impl FrontendConfig {
    /// Geometry that produces exactly the bags `model` expects: patches on a
    /// two-row grid (one row for a single patch), mel bands = rows × patch
    /// height, canvas = columns × patch width.
    pub fn for_model(model: &ModelConfig) -> Self {
        let a = &model.audio;
        let rows = if a.num_patches >= 2 && a.num_patches % 2 == 0 { 2 } else { 1 };
        let cols = a.num_patches / rows;
        FrontendConfig {
            mel: MelParams { n_mels: rows * a.patch_height, ..MelParams::default() },
            canvas_width: cols * a.patch_width,
            grid_rows: rows,
            grid_cols: cols,
            num_clips: model.vision.num_clips,
            frames_per_clip: model.vision.frames_per_clip,
            frame_size: model.vision.frame_size,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn check(&self, model: &ModelConfig) -> Result<()> {
        let a = &model.audio;
        let v = &model.vision;
        let audio_ok = self.num_patches() == a.num_patches
            && self.mel.n_mels == self.grid_rows * a.patch_height
            && self.canvas_width == self.grid_cols * a.patch_width;
        let vision_ok =
            self.num_clips == v.num_clips && self.frames_per_clip == v.frames_per_clip && self.frame_size == v.frame_size;
        if !audio_ok || !vision_ok {
            return Err(Error::Config(format!(
                "frontend geometry {}x{} mel canvas in a {}x{} grid, {}x{} clips of {}px does not match the model",
                self.mel.n_mels, self.canvas_width, self.grid_rows, self.grid_cols, self.num_clips, self.frames_per_clip,
                self.frame_size
            )));
        }
        Ok(())
    }

    pub fn audio_patches(&self, audio: &AudioClip) -> Result<PatchSet> {
        let mel = compute_mel(audio, &self.mel)?;
        patchify(&mel, self.canvas_width, self.grid_rows, self.grid_cols)
    }

    pub fn audio_patches_from_file(&self, path: &Path) -> Result<PatchSet> {
        self.audio_patches(&load_wav(path)?)
    }

    pub fn clips(&self, frames: &[Frame]) -> Result<ClipSet> {
        segment_video(frames, self.num_clips, self.frames_per_clip)
    }

    pub fn clips_from_dir(&self, dir: &Path) -> Result<ClipSet> {
        self.clips(&load_frames(dir, self.frame_size)?)
    }
}
