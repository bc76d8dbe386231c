//! Subject-independent cross-validation, training loop and metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::autograd::Graph;
use crate::dataset::PreparedEpisode;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, UxModel, NUM_CLASSES};
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Test subjects of each fold.
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn test_subjects(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<String> {
        self.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.iter().cloned()).collect()
    }
}

/// Shuffles subjects by `seed` and deals them round-robin into `k` folds.
pub fn subject_kfold(subjects: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let unique: HashSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        return Err(Error::Config("subject ids must be unique".into()));
    }
    if k == 0 || subjects.len() < k {
        return Err(Error::Config(format!("{} subjects cannot fill {k} folds", subjects.len())));
    }
    let mut order = subjects.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in order.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    Ok(FoldPlan { k, seed, folds })
}

/// 1–2 → 0, 3–5 → 1, 6–7 → 2.
pub fn quantize3(score: u8) -> Result<u8> {
    match score {
        1 | 2 => Ok(0),
        3..=5 => Ok(1),
        6 | 7 => Ok(2),
        _ => Err(Error::Validation(format!("score {score} outside 1..=7"))),
    }
}

fn check_pair(preds: &[u8], labels: &[u8]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Validation(format!(
            "need equal non-empty prediction and label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn acc7(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_pair(preds, labels)?;
    for &v in preds.iter().chain(labels) {
        quantize3(v)?;
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

pub fn acc3(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_pair(preds, labels)?;
    let mut hits = 0;
    for (&p, &l) in preds.iter().zip(labels) {
        hits += (quantize3(p)? == quantize3(l)?) as usize;
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Acc.7 and Acc.3 of a uniform random predictor on `n` balanced labels.
pub fn chance_rates(n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8 + 1).collect();
    let preds: Vec<u8> = (0..n).map(|_| rng.gen_range(1..=NUM_CLASSES as u8)).collect();
    Ok((acc7(&preds, &labels)?, acc3(&preds, &labels)?))
}

/// Most frequent label, ties toward the lower score.
pub fn majority_label(labels: &[u8]) -> Option<u8> {
    let mut counts = [0usize; 8];
    for &l in labels {
        counts[l.min(7) as usize] += 1;
    }
    (1..=7u8).filter(|&l| counts[l as usize] > 0).max_by_key(|&l| (counts[l as usize], std::cmp::Reverse(l)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 4, epochs: 30, folds: 4, optimizer: AdamConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a fresh model on `train`. Each episode runs in its own graph;
/// gradients are scaled by 1/batch and summed in batch order, so results do
/// not depend on scheduling. Returns the final weights and the mean
/// training loss of every epoch.
pub fn train_fold(
    model_cfg: &ModelConfig,
    train: &[&PreparedEpisode],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<(UxModel, Vec<f64>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input(format!("fold {fold} has no training episodes")));
    }
    let fold_seed = cfg.seed.wrapping_add(fold as u64);
    let mut model = UxModel::new(model_cfg, fold_seed)?;
    let mut adam = AdamState::new(cfg.optimizer.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(fold_seed, epoch as u64));
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (j, &i) in batch.iter().enumerate() {
                let ep = train[i];
                let diverged = |detail: String| {
                    let ids: Vec<&str> = batch.iter().map(|&i| train[i].episode.episode_id.as_str()).collect();
                    Error::Diverged(format!("fold {fold} epoch {epoch} batch {b} [{}]: {detail}", ids.join(", ")))
                };
                let stream = ((epoch as u64) << 32) | (b * cfg.batch_size + j) as u64;
                let grads = {
                    let mut g = Graph::with_params(&model.params).train_mode(stream_rng(fold_seed ^ 0x5eed, stream));
                    let step = (|| {
                        let out = model.arch.forward(&mut g, &ep.input())?;
                        let logits = g.reshape(out.logits, &[1, NUM_CLASSES])?;
                        let loss = model::loss(&mut g, logits, &[ep.label()])?;
                        let value = g.value(loss).item();
                        let scaled = g.scale(loss, scale)?;
                        Ok((value, scaled))
                    })();
                    let (value, scaled) = match step {
                        Ok(v) => v,
                        Err(Error::NonFinite(op)) => return Err(diverged(format!("non-finite {op} in episode {}", ep.episode.episode_id))),
                        Err(e) => return Err(e),
                    };
                    if !value.is_finite() {
                        return Err(diverged(format!("loss {value} in episode {}", ep.episode.episode_id)));
                    }
                    total += value;
                    g.backward(scaled)?
                };
                model.params.accumulate(&grads);
            }
            adam.step(&mut model.params)?;
        }
        let mean = total / train.len() as f64;
        log::info!("fold {} epoch {} loss {mean:.6}", fold + 1, epoch + 1);
        history.push(mean);
    }
    model.params.zero_grad();
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub episode_id: String,
    pub subject_id: String,
    pub label: u8,
    pub predicted: u8,
}

/// Evaluation-mode predictions, in input order.
pub fn evaluate(model: &UxModel, episodes: &[&PreparedEpisode]) -> Result<Vec<Prediction>> {
    episodes
        .iter()
        .map(|ep| {
            Ok(Prediction {
                episode_id: ep.episode.episode_id.clone(),
                subject_id: ep.episode.subject_id.clone(),
                label: ep.label(),
                predicted: model.predict(&ep.input())?,
            })
        })
        .collect()
}

fn six<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round6(*v))
}

fn six_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| round6(*x)))
}

pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub train_subjects: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(serialize_with = "six")]
    pub acc7: f64,
    #[serde(serialize_with = "six")]
    pub acc3: f64,
    pub majority_label: u8,
    #[serde(serialize_with = "six")]
    pub majority_acc7: f64,
    #[serde(serialize_with = "six")]
    pub majority_acc3: f64,
    #[serde(serialize_with = "six_vec")]
    pub loss_history: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvReport {
    pub modality: String,
    pub question_id: String,
    pub k: usize,
    pub seed: u64,
    pub epochs: usize,
    pub folds: Vec<FoldResult>,
    #[serde(serialize_with = "six")]
    pub acc7: f64,
    #[serde(serialize_with = "six")]
    pub acc3: f64,
    #[serde(serialize_with = "six")]
    pub majority_acc7: f64,
    #[serde(serialize_with = "six")]
    pub majority_acc3: f64,
}

/// Episode-weighted mean of a per-fold metric.
pub fn weighted_mean(folds: &[FoldResult], metric: impl Fn(&FoldResult) -> f64) -> f64 {
    let n: usize = folds.iter().map(|f| f.n_test).sum();
    folds.iter().map(|f| metric(f) * f.n_test as f64).sum::<f64>() / n.max(1) as f64
}

fn run_fold(
    fold: usize,
    plan: &FoldPlan,
    episodes: &[PreparedEpisode],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FoldResult, UxModel)> {
    let test_set: HashSet<&str> = plan.test_subjects(fold).iter().map(String::as_str).collect();
    let (test, train): (Vec<&PreparedEpisode>, Vec<&PreparedEpisode>) =
        episodes.iter().partition(|e| test_set.contains(e.episode.subject_id.as_str()));
    let train_subjects: HashSet<&str> = train.iter().map(|e| e.episode.subject_id.as_str()).collect();
    assert!(train_subjects.is_disjoint(&test_set), "fold {fold}: subject in both train and test");
    if test.is_empty() {
        return Err(Error::Input(format!("fold {fold} has no test episodes")));
    }
    let (model, loss_history) = train_fold(model_cfg, &train, cfg, fold)?;
    let predictions = evaluate(&model, &test)?;
    let preds: Vec<u8> = predictions.iter().map(|p| p.predicted).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let train_labels: Vec<u8> = train.iter().map(|e| e.label()).collect();
    let majority = majority_label(&train_labels).expect("non-empty training set");
    let constant = vec![majority; labels.len()];
    let mut train_subjects: Vec<String> = train_subjects.into_iter().map(String::from).collect();
    train_subjects.sort();
    let result = FoldResult {
        fold: fold + 1,
        test_subjects: plan.test_subjects(fold).to_vec(),
        train_subjects,
        n_train: train.len(),
        n_test: test.len(),
        acc7: acc7(&preds, &labels)?,
        acc3: acc3(&preds, &labels)?,
        majority_label: majority,
        majority_acc7: acc7(&constant, &labels)?,
        majority_acc3: acc3(&constant, &labels)?,
        loss_history,
        predictions,
    };
    log::info!("fold {} acc7 {:.6} acc3 {:.6} n_test {}", fold + 1, result.acc7, result.acc3, result.n_test);
    Ok((result, model))
}

pub struct CvOutput {
    pub report: CvReport,
    pub plan: FoldPlan,
    pub models: Vec<UxModel>,
}

/// k-fold subject-independent CV. Folds run in parallel on the current
/// rayon pool; results are identical to sequential execution. With
/// `out_dir`, writes `report.json`, `metrics.csv`, `predictions.csv` and
/// `fold{i}.uxw` weights; if a fold fails, metrics of the folds that
/// finished are still written before the error is returned.
pub fn run_cv(
    episodes: &[PreparedEpisode],
    question_id: &str,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CvOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut subjects: Vec<String> = Vec::new();
    for e in episodes {
        if !subjects.contains(&e.episode.subject_id) {
            subjects.push(e.episode.subject_id.clone());
        }
    }
    let plan = subject_kfold(&subjects, cfg.folds, cfg.seed)?;
    let outcomes: Vec<Result<(FoldResult, UxModel)>> =
        (0..plan.k).into_par_iter().map(|f| run_fold(f, &plan, episodes, model_cfg, cfg)).collect();
    let mut folds = Vec::new();
    let mut models = Vec::new();
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok((r, m)) => {
                folds.push(r);
                models.push(m);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let report = CvReport {
        modality: model_cfg.modality.as_str().into(),
        question_id: question_id.into(),
        k: plan.k,
        seed: cfg.seed,
        epochs: cfg.epochs,
        acc7: weighted_mean(&folds, |f| f.acc7),
        acc3: weighted_mean(&folds, |f| f.acc3),
        majority_acc7: weighted_mean(&folds, |f| f.majority_acc7),
        majority_acc3: weighted_mean(&folds, |f| f.majority_acc3),
        folds,
    };
    if let Some(dir) = out_dir {
        write_metrics(dir, &report)?;
        if first_err.is_none() {
            let json = serde_json::to_string_pretty(&report)?;
            write_file(&dir.join("report.json"), &(json + "\n"))?;
            for (r, m) in report.folds.iter().zip(&models) {
                m.save(&dir.join(format!("fold{}.uxw", r.fold)))?;
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(CvOutput { report, plan, models }),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(report: &CvReport) -> String {
    let mut s = String::from("fold,acc7,acc3,n_test\n");
    for f in &report.folds {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", f.fold, f.acc7, f.acc3, f.n_test);
    }
    let n: usize = report.folds.iter().map(|f| f.n_test).sum();
    let _ = writeln!(s, "mean,{:.6},{:.6},{}", report.acc7, report.acc3, n);
    s
}

pub fn predictions_csv(report: &CvReport) -> Result<String> {
    let mut s = String::from("episode_id,true,pred,pred3,true3\n");
    let mut rows = BTreeMap::new();
    for f in &report.folds {
        for p in &f.predictions {
            rows.insert(p.episode_id.clone(), p);
        }
    }
    for (id, p) in rows {
        let _ = writeln!(s, "{id},{},{},{},{}", p.label, p.predicted, quantize3(p.predicted)?, quantize3(p.label)?);
    }
    Ok(s)
}

fn write_metrics(dir: &Path, report: &CvReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(report))?;
    write_file(&dir.join("predictions.csv"), &predictions_csv(report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn kfold_sizes() {
        let p = subject_kfold(&ids(8), 4, 3).unwrap();
        assert!(p.folds.iter().all(|f| f.len() == 2));
        let p = subject_kfold(&ids(22), 4, 3).unwrap();
        let mut sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![5, 5, 6, 6]);
        assert!(matches!(subject_kfold(&ids(3), 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn train_subjects_exclude_test() {
        let p = subject_kfold(&ids(9), 4, 1).unwrap();
        for f in 0..4 {
            let train = p.train_subjects(f);
            assert!(p.test_subjects(f).iter().all(|s| !train.contains(s)));
            assert_eq!(train.len() + p.test_subjects(f).len(), 9);
        }
    }

    #[test]
    fn quantize_mapping() {
        let want = [0, 0, 1, 1, 1, 2, 2];
        for s in 1..=7u8 {
            assert_eq!(quantize3(s).unwrap(), want[s as usize - 1]);
        }
        assert!(quantize3(0).is_err());
        assert!(quantize3(8).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(acc7(&[6], &[7]).unwrap(), 0.0);
        assert_eq!(acc3(&[6], &[7]).unwrap(), 1.0);
        assert_eq!(acc7(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!(matches!(acc7(&[], &[]), Err(Error::Validation(_))));
        assert!(acc3(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn majority_breaks_ties_low() {
        assert_eq!(majority_label(&[3, 5, 5, 3, 1]), Some(3));
        assert_eq!(majority_label(&[7, 7, 2]), Some(7));
        assert_eq!(majority_label(&[]), None);
    }

    #[test]
    fn csv_formats_six_decimals() {
        let fold = FoldResult {
            fold: 1,
            test_subjects: vec!["a".into()],
            train_subjects: vec!["b".into()],
            n_train: 1,
            n_test: 3,
            acc7: 1.0 / 3.0,
            acc3: 2.0 / 3.0,
            majority_label: 1,
            majority_acc7: 0.0,
            majority_acc3: 0.0,
            loss_history: vec![1.0 / 3.0],
            predictions: vec![Prediction { episode_id: "e".into(), subject_id: "a".into(), label: 6, predicted: 7 }],
        };
        let report = CvReport {
            modality: "multimodal".into(),
            question_id: "q".into(),
            k: 1,
            seed: 0,
            epochs: 1,
            acc7: fold.acc7,
            acc3: fold.acc3,
            majority_acc7: 0.0,
            majority_acc3: 0.0,
            folds: vec![fold],
        };
        assert!(metrics_csv(&report).contains("1,0.333333,0.666667,3"));
        assert_eq!(predictions_csv(&report).unwrap(), "episode_id,true,pred,pred3,true3\ne,6,7,2,2\n");
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"acc7\":0.333333"), "{json}");
    }
}
