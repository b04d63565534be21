//! Task-identity-free expert routing.
//!
//! Each learned task is summarized by `f^t = [mean image embedding, mean label
//! embedding]`, with image embeddings taken from the frozen backbone so the
//! bank never drifts as adapters are added. A query is built the same way and
//! matched to its nearest entry; if the nearest distance exceeds `δ` the query
//! falls back to the bare backbone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::TaskId;
use crate::backbone::Routing;
use crate::error::{Error, Result};
use crate::model::AdapterModel;
use crate::numerics::{argmax, cosine_similarity, Matrix};
use crate::stream::TaskData;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Manhattan,
    Euclidean,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self {
            DistanceMetric::Manhattan => diffs.map(f64::abs).sum(),
            DistanceMetric::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

fn default_threshold() -> f64 {
    10.0
}
fn default_enroll_batch() -> usize {
    64
}
fn default_query_window() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IferConfig {
    /// δ
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default = "default_enroll_batch")]
    pub enroll_batch: usize,
    /// Consecutive test images pooled into one query.
    #[serde(default = "default_query_window")]
    pub query_window: usize,
}

impl Default for IferConfig {
    fn default() -> Self {
        IferConfig {
            threshold: default_threshold(),
            metric: DistanceMetric::Manhattan,
            enroll_batch: default_enroll_batch(),
            query_window: default_query_window(),
        }
    }
}

impl IferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::config("ifer.threshold", "δ must be positive and finite"));
        }
        if self.enroll_batch == 0 {
            return Err(Error::config("ifer.enroll_batch", "must be at least 1"));
        }
        if self.query_window == 0 {
            return Err(Error::config("ifer.query_window", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched: bool,
    pub task: Option<TaskId>,
    pub distance: f64,
    /// Nearest entry whether or not it is within `δ`.
    pub nearest: TaskId,
}

impl MatchResult {
    pub fn routing(&self) -> Routing {
        match self.task {
            Some(t) => Routing::Task(t),
            None => Routing::Bypass,
        }
    }
}

/// `Concat(Mean(images), Mean(texts))`
pub fn fuse_embedding(images: &Matrix, texts: &Matrix) -> Result<Vec<f64>> {
    if images.rows() == 0 || texts.rows() == 0 {
        return Err(Error::Data("task embedding needs at least one image and one label".into()));
    }
    let mut f = images.mean_rows();
    f.extend(texts.mean_rows());
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbeddingBank {
    entries: BTreeMap<TaskId, Vec<f64>>,
    pub threshold: f64,
    pub metric: DistanceMetric,
}

impl TaskEmbeddingBank {
    pub fn new(threshold: f64, metric: DistanceMetric) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::config("ifer.threshold", "δ must be positive"));
        }
        Ok(TaskEmbeddingBank {
            entries: BTreeMap::new(),
            threshold,
            metric,
        })
    }

    pub fn from_config(cfg: &IferConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg.threshold, cfg.metric)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.entries.keys().copied()
    }

    pub fn entry(&self, task: TaskId) -> Option<&[f64]> {
        self.entries.get(&task).map(Vec::as_slice)
    }

    /// Copy holding only the listed tasks.
    pub fn restricted(&self, tasks: &[TaskId]) -> Self {
        TaskEmbeddingBank {
            entries: self
                .entries
                .iter()
                .filter(|(t, _)| tasks.contains(t))
                .map(|(t, f)| (*t, f.clone()))
                .collect(),
            threshold: self.threshold,
            metric: self.metric,
        }
    }

    /// Stores `f^t`; re-enrolling a task overwrites it.
    pub fn enroll_task(&mut self, task: TaskId, images: &Matrix, texts: &Matrix) -> Result<()> {
        let f = fuse_embedding(images, texts)?;
        if let Some((_, other)) = self.entries.iter().find(|(t, _)| **t != task) {
            if other.len() != f.len() {
                return Err(Error::Dimension(format!(
                    "task embedding of width {} for a bank of width {}",
                    f.len(),
                    other.len()
                )));
            }
        }
        self.entries.insert(task, f);
        Ok(())
    }

    pub fn infer_task(&self, images: &Matrix, texts: &Matrix) -> Result<MatchResult> {
        let q = fuse_embedding(images, texts)?;
        self.match_embedding(&q)
    }

    pub fn match_embedding(&self, q: &[f64]) -> Result<MatchResult> {
        let mut best: Option<(TaskId, f64)> = None;
        for (&task, f) in &self.entries {
            if f.len() != q.len() {
                return Err(Error::Dimension(format!(
                    "query width {} against bank width {}",
                    q.len(),
                    f.len()
                )));
            }
            let d = self.metric.distance(q, f);
            // ascending task order: strict < keeps the lower id on ties
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((task, d));
            }
        }
        let (nearest, distance) = best.ok_or_else(|| Error::State("task embedding bank is empty".into()))?;
        let matched = distance <= self.threshold;
        Ok(MatchResult {
            matched,
            task: matched.then_some(nearest),
            distance,
            nearest,
        })
    }
}

/// Enrolls `data` using frozen-backbone embeddings of its first `batch`
/// training images and all of its label embeddings.
pub fn enroll_from_data(bank: &mut TaskEmbeddingBank, model: &AdapterModel, data: &TaskData, batch: usize) -> Result<()> {
    let (x, _) = data.train.head(batch);
    let images = model.embed(Routing::Bypass, &x)?;
    bank.enroll_task(data.id(), &images, &data.label_embeddings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedPredictions {
    pub predictions: Vec<usize>,
    /// Cosine logits of every query row under the path its window took.
    pub logits: Matrix,
    /// One match per query window.
    pub matches: Vec<MatchResult>,
    pub window: usize,
}

impl RoutedPredictions {
    /// Match decision that governed query row `row`.
    pub fn match_for_row(&self, row: usize) -> &MatchResult {
        &self.matches[row / self.window]
    }
}

/// Identifies the task of every window of `window` consecutive rows, then
/// predicts with that task's routers or with the bare backbone.
pub fn routed_inference(
    model: &AdapterModel,
    bank: &TaskEmbeddingBank,
    x: &Matrix,
    labels: &Matrix,
    window: usize,
) -> Result<RoutedPredictions> {
    if window == 0 {
        return Err(Error::config("ifer.query_window", "must be at least 1"));
    }
    let mut predictions = Vec::with_capacity(x.rows());
    let mut all_logits = Matrix::zeros(0, labels.rows());
    let mut matches = Vec::new();
    let mut start = 0;
    while start < x.rows() {
        let idx: Vec<usize> = (start..(start + window).min(x.rows())).collect();
        let xs = x.select_rows(&idx);
        let images = model.embed(Routing::Bypass, &xs)?;
        let m = bank.infer_task(&images, labels)?;
        let logits = cosine_similarity(&model.embed(m.routing(), &xs)?, labels)?;
        for r in 0..logits.rows() {
            predictions.push(argmax(logits.row(r)));
            all_logits.push_row(logits.row(r))?;
        }
        matches.push(m);
        start += window;
    }
    Ok(RoutedPredictions {
        predictions,
        logits: all_logits,
        matches,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn singleton_enrollment_is_concatenation() {
        let mut bank = TaskEmbeddingBank::new(10.0, DistanceMetric::Manhattan).unwrap();
        bank.enroll_task(3, &m(&[&[1.0, 2.0]]), &m(&[&[-1.0, 0.5]])).unwrap();
        assert_eq!(bank.entry(3).unwrap(), &[1.0, 2.0, -1.0, 0.5]);
    }

    #[test]
    fn opposite_images_cancel() {
        let mut bank = TaskEmbeddingBank::new(10.0, DistanceMetric::Manhattan).unwrap();
        bank.enroll_task(0, &m(&[&[1.5, -2.0], &[-1.5, 2.0]]), &m(&[&[1.0, 1.0]])).unwrap();
        assert_eq!(&bank.entry(0).unwrap()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn exact_hit_and_boundary() {
        let mut bank = TaskEmbeddingBank::new(10.0, DistanceMetric::Manhattan).unwrap();
        bank.enroll_task(0, &m(&[&[0.0, 0.0]]), &m(&[&[0.0]])).unwrap();
        bank.enroll_task(1, &m(&[&[100.0, 0.0]]), &m(&[&[0.0]])).unwrap();
        let hit = bank.infer_task(&m(&[&[100.0, 0.0]]), &m(&[&[0.0]])).unwrap();
        assert_eq!((hit.task, hit.distance), (Some(1), 0.0));

        let edge = bank.infer_task(&m(&[&[4.0, 6.0]]), &m(&[&[0.0]])).unwrap();
        assert_eq!(edge.distance, 10.0);
        assert!(edge.matched);

        let far = bank.infer_task(&m(&[&[50.0, 1e6]]), &m(&[&[0.0]])).unwrap();
        assert!(!far.matched);
        assert_eq!(far.task, None);
        assert_eq!(far.routing(), Routing::Bypass);
    }

    #[test]
    fn ties_go_to_lower_task() {
        let mut bank = TaskEmbeddingBank::new(10.0, DistanceMetric::Manhattan).unwrap();
        bank.enroll_task(7, &m(&[&[1.0]]), &m(&[&[0.0]])).unwrap();
        bank.enroll_task(2, &m(&[&[-1.0]]), &m(&[&[0.0]])).unwrap();
        let r = bank.infer_task(&m(&[&[0.0]]), &m(&[&[0.0]])).unwrap();
        assert_eq!(r.task, Some(2));
    }

    #[test]
    fn empty_bank_and_width_errors() {
        let mut bank = TaskEmbeddingBank::new(1.0, DistanceMetric::Euclidean).unwrap();
        assert!(matches!(
            bank.infer_task(&m(&[&[0.0]]), &m(&[&[0.0]])),
            Err(Error::State(_))
        ));
        bank.enroll_task(0, &m(&[&[0.0]]), &m(&[&[0.0]])).unwrap();
        assert!(bank.enroll_task(1, &m(&[&[0.0, 1.0]]), &m(&[&[0.0]])).is_err());
        assert!(TaskEmbeddingBank::new(0.0, DistanceMetric::Manhattan).is_err());
    }

    #[test]
    fn metric_is_symmetric() {
        let a = [0.3, -1.2, 4.0];
        let b = [1.0, 0.5, -2.0];
        for metric in [DistanceMetric::Manhattan, DistanceMetric::Euclidean] {
            assert_eq!(metric.distance(&a, &a), 0.0);
            assert_eq!(metric.distance(&a, &b), metric.distance(&b, &a));
        }
        assert!((DistanceMetric::Manhattan.distance(&a, &b) - 8.4).abs() < 1e-12);
    }
}
