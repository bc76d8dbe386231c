//! Episode manifests and preprocessing into model inputs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::{Modality, ModelInput};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub subject_id: String,
    pub audio_path: PathBuf,
    pub frames_dir: PathBuf,
    pub label: u8,
    pub scenario: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub question_id: String,
    pub episodes: Vec<Episode>,
}

impl Manifest {
    /// Reads a manifest and resolves relative episode paths against its
    /// directory. Labels must lie in 1..=7 and episode ids must be unique.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for ep in &mut m.episodes {
            ep.audio_path = base.join(&ep.audio_path);
            ep.frames_dir = base.join(&ep.frames_dir);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::Validation("manifest lists no episodes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for ep in &self.episodes {
            if !(1..=7).contains(&ep.label) {
                return Err(Error::Validation(format!("episode {}: label {} outside 1..=7", ep.episode_id, ep.label)));
            }
            if !seen.insert(ep.episode_id.as_str()) {
                return Err(Error::Validation(format!("duplicate episode id {}", ep.episode_id)));
            }
        }
        Ok(())
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ep in &self.episodes {
            if !out.contains(&ep.subject_id) {
                out.push(ep.subject_id.clone());
            }
        }
        out
    }

    pub fn episode(&self, id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.episode_id == id)
    }
}

/// Model-ready bags kept in single precision.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub episode: Episode,
    patches: Option<(Vec<usize>, Vec<f32>)>,
    clips: Option<(Vec<usize>, Vec<f32>)>,
}

fn compact(t: &Tensor) -> (Vec<usize>, Vec<f32>) {
    (t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect())
}

fn expand(c: &(Vec<usize>, Vec<f32>)) -> Tensor {
    Tensor::new(&c.0, c.1.iter().map(|&v| v as f64).collect()).expect("stored shape")
}

impl PreparedEpisode {
    pub fn new(episode: Episode, patches: Option<&Tensor>, clips: Option<&Tensor>) -> Self {
        PreparedEpisode { episode, patches: patches.map(compact), clips: clips.map(compact) }
    }

    /// Runs the frontend on the modalities `modality` needs.
    pub fn prepare(episode: &Episode, frontend: &FrontendConfig, modality: Modality) -> Result<Self> {
        let context = |e: Error| match e {
            Error::Io { .. } => e,
            other => Error::Input(format!("episode {}: {other}", episode.episode_id)),
        };
        let patches = if modality.uses_audio() {
            Some(frontend.audio_patches_from_file(&episode.audio_path).map_err(context)?.patches)
        } else {
            None
        };
        let clips = if modality.uses_vision() {
            Some(frontend.clips_from_dir(&episode.frames_dir).map_err(context)?.standardized())
        } else {
            None
        };
        Ok(Self::new(episode.clone(), patches.as_ref(), clips.as_ref()))
    }

    pub fn label(&self) -> u8 {
        self.episode.label
    }

    pub fn input(&self) -> ModelInput {
        ModelInput { patches: self.patches.as_ref().map(expand), clips: self.clips.as_ref().map(expand) }
    }
}

/// Prepares every episode of `manifest` in parallel; output order follows
/// the manifest.
pub fn prepare_all(manifest: &Manifest, frontend: &FrontendConfig, modality: Modality) -> Result<Vec<PreparedEpisode>> {
    manifest.episodes.par_iter().map(|ep| PreparedEpisode::prepare(ep, frontend, modality)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(id: &str, subject: &str, label: u8) -> Episode {
        Episode {
            episode_id: id.into(),
            subject_id: subject.into(),
            audio_path: format!("{id}/audio.wav").into(),
            frames_dir: format!("{id}/frames").into(),
            label,
            scenario: "positive".into(),
        }
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest { question_id: "q1".into(), episodes: vec![episode("e1", "s1", 3), episode("e2", "s2", 7)] };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.episodes[0].audio_path, dir.path().join("e1/audio.wav"));
        assert_eq!(back.subjects(), vec!["s1", "s2"]);
    }

    #[test]
    fn bad_label_names_the_episode() {
        let m = Manifest { question_id: "q".into(), episodes: vec![episode("e1", "s1", 3), episode("late", "s1", 8)] };
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("late"), "{err}");
    }

    #[test]
    fn compact_round_trip_is_single_precision() {
        let t = Tensor::new(&[2, 2], vec![0.1, -2.0, 3.5, 1e-3]).unwrap();
        let p = PreparedEpisode::new(episode("e", "s", 1), Some(&t), None);
        let back = p.input().patches.unwrap();
        assert!(back.max_abs_diff(&t) < 1e-7);
        assert!(p.input().clips.is_none());
    }
}
