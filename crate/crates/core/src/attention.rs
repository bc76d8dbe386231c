//! Attention rollout over the aggregating encoders and per-instance scores.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelInput, UxModel};
use crate::tensor::Tensor;
use crate::Graph;

const STOCHASTIC_TOL: f64 = 1e-6;

/// `Ã_L ⋯ Ã_1` with `Ã = rownorm(0.5·(A + I))`, for head-averaged maps
/// `[L, n, n]`.
pub fn attention_rollout(attn: &Tensor) -> Result<Tensor> {
    let s = attn.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Validation(format!("rollout needs [L, n, n] maps, got {s:?}")));
    }
    let n = s[1];
    let mut acc = Tensor::eye(n).into_data();
    for (l, layer) in attn.data().chunks(n * n).enumerate() {
        let mut a = vec![0.0; n * n];
        for r in 0..n {
            let row = &layer[r * n..(r + 1) * n];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!("layer {l} row {r} is not stochastic (sum {sum})")));
            }
            for c in 0..n {
                a[r * n + c] = 0.5 * row[c] + if r == c { 0.5 } else { 0.0 };
            }
            let z: f64 = a[r * n..(r + 1) * n].iter().sum();
            a[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= z);
        }
        let mut next = vec![0.0; n * n];
        crate::kernels::gemm(n, n, n, &a, false, &acc, false, 0.0, &mut next);
        acc = next;
    }
    Tensor::new(&[n, n], acc)
}

/// Row 0 of `rollout` without the CLS column, renormalised to sum 1.
pub fn cls_scores(rollout: &Tensor) -> Result<Vec<f64>> {
    let n = rollout.shape()[1];
    if n < 2 {
        return Err(Error::Validation("rollout has no instances besides CLS".into()));
    }
    let row = &rollout.data()[1..n];
    let z: f64 = row.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Validation("CLS row carries no attention to instances".into()));
    }
    Ok(row.iter().map(|v| v / z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub modality: &'static str,
    pub rollout: Tensor,
    /// Score of instance `i + 1` (clip or patch number).
    pub cls_scores: Vec<f64>,
}

impl RolloutResult {
    pub fn from_maps(modality: &'static str, maps: &Tensor) -> Result<Self> {
        let rollout = attention_rollout(maps)?;
        let cls_scores = cls_scores(&rollout)?;
        Ok(RolloutResult { modality, rollout, cls_scores })
    }

    /// Index (0-based) of the highest-scoring instance, ties toward the first.
    pub fn top_instance(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.cls_scores.iter().enumerate() {
            if v > self.cls_scores[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceAttention {
    /// Over mel patches, from the audio encoder.
    pub audio: Option<RolloutResult>,
    /// Over clips, from the second vision stage.
    pub vision: Option<RolloutResult>,
}

impl InstanceAttention {
    pub fn results(&self) -> impl Iterator<Item = &RolloutResult> {
        self.audio.iter().chain(self.vision.iter())
    }
}

/// Evaluation-mode forward pass, then rollout of the audio encoder and of
/// the clip-level vision encoder.
pub fn instance_attention(model: &UxModel, input: &ModelInput) -> Result<InstanceAttention> {
    let mut g = Graph::with_params(&model.params);
    let out = model.arch.forward(&mut g, input)?;
    let audio = out.audio_attention.as_ref().map(|m| RolloutResult::from_maps("audio", m)).transpose()?;
    let vision = out.vision_stage2_attention.as_ref().map(|m| RolloutResult::from_maps("vision", m)).transpose()?;
    Ok(InstanceAttention { audio, vision })
}

pub fn attention_csv(episode_id: &str, attn: &InstanceAttention) -> String {
    let mut s = String::from("episode_id,modality,instance_index,score\n");
    for r in attn.results() {
        for (i, v) in r.cls_scores.iter().enumerate() {
            let _ = writeln!(s, "{episode_id},{},{},{v:.6}", r.modality, i + 1);
        }
    }
    s
}

pub const SVG_PLOT_HEIGHT: f64 = 200.0;

/// Bar chart of CLS scores. Bars are scaled so the largest reaches
/// [`SVG_PLOT_HEIGHT`]; every bar carries its score in `data-score`.
pub fn attention_svg(episode_id: &str, r: &RolloutResult) -> String {
    let n = r.cls_scores.len();
    let (left, top, bar_w, gap) = (50.0, 30.0, 24.0, 6.0);
    let width = left + n as f64 * (bar_w + gap) + 20.0;
    let height = top + SVG_PLOT_HEIGHT + 50.0;
    let max = r.cls_scores.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { SVG_PLOT_HEIGHT / max } else { 0.0 };
    let base = top + SVG_PLOT_HEIGHT;
    let axis = if r.modality == "vision" {
        "video clip (earlier → later)"
    } else {
        "mel patch (top row 1–8, bottom row 9–16)"
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-family="sans-serif" font-size="13">{episode_id} {} attention</text>"#, r.modality);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#, width - 20.0);
    for (i, &v) in r.cls_scores.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bar_w + gap);
        let h = v * scale;
        let _ = writeln!(
            s,
            r#"<rect class="bar" data-index="{}" data-score="{v:.6}" x="{x:.2}" y="{:.4}" width="{bar_w}" height="{h:.4}" fill="steelblue"/>"#,
            i + 1,
            base - h
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x + bar_w / 2.0,
            base + 14.0,
            i + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{axis}</text>"#,
        width / 2.0,
        base + 36.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `attention.csv` and `{episode_id}_{modality}.svg` into `dir`.
pub fn export_attention(episode_id: &str, attn: &InstanceAttention, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("attention.csv");
    std::fs::write(&csv, attention_csv(episode_id, attn)).map_err(|e| Error::io(&csv, e))?;
    for r in attn.results() {
        let p = dir.join(format!("{episode_id}_{}.svg", r.modality));
        std::fs::write(&p, attention_svg(episode_id, r)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_rolls_out_to_identity() {
        let r = attention_rollout(&Tensor::new(&[1, 3, 3], Tensor::eye(3).into_data()).unwrap()).unwrap();
        assert_eq!(r, Tensor::eye(3));
    }

    #[test]
    fn uniform_two_by_two() {
        let r = attention_rollout(&Tensor::full(&[1, 2, 2], 0.5)).unwrap();
        assert_eq!(r.data(), &[0.75, 0.25, 0.25, 0.75]);
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(matches!(attention_rollout(&Tensor::full(&[1, 2, 3], 0.5)), Err(Error::Validation(_))));
        assert!(matches!(attention_rollout(&Tensor::full(&[1, 2, 2], 0.4)), Err(Error::Validation(_))));
    }

    #[test]
    fn scores_drop_cls_and_renormalise() {
        let roll = Tensor::new(&[3, 3], vec![0.5, 0.3, 0.2, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = cls_scores(&roll).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn csv_and_svg_layout() {
        let maps = Tensor::full(&[2, 5, 5], 0.2);
        let r = RolloutResult::from_maps("vision", &maps).unwrap();
        let attn = InstanceAttention { audio: None, vision: Some(r.clone()) };
        let csv = attention_csv("e1", &attn);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("e1,vision,4,0.250000"));
        let svg = attention_svg("e1", &r);
        assert_eq!(svg.matches("class=\"bar\"").count(), 4);
    }
}
