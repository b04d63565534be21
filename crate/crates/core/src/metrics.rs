//! Accuracy matrix and the continual-learning summary metrics.

use serde::{Deserialize, Serialize};

use crate::adapter::TaskId;
use crate::error::{Error, Result};
use crate::ifer::{routed_inference, TaskEmbeddingBank};
use crate::model::{accuracy, AdapterModel};
use crate::numerics::Matrix;
use crate::stream::TaskData;

/// `a[i][j]`: accuracy on task `j` after learning task `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    a: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        AccuracyMatrix { n, a: vec![None; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::new(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::Index(format!("cell ({i}, {j}) of a {0}x{0} matrix", self.n)));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("accuracy {v} outside [0, 1]")));
        }
        self.a[i * self.n + j] = Some(v);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i >= self.n || j >= self.n {
            return None;
        }
        self.a[i * self.n + j]
    }

    pub fn is_complete(&self) -> bool {
        self.a.iter().all(Option::is_some)
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        if !self.is_complete() {
            return Err(Error::State("accuracy matrix has unfilled cells".into()));
        }
        Ok(self
            .a
            .chunks(self.n.max(1))
            .take(self.n)
            .map(|r| r.iter().map(|v| v.unwrap()).collect())
            .collect())
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j].expect("checked complete")
    }

    fn require_complete(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Domain("empty accuracy matrix".into()));
        }
        if !self.is_complete() {
            return Err(Error::State("accuracy matrix has unfilled cells".into()));
        }
        Ok(())
    }
}

/// Zero-shot accuracy on not-yet-learned tasks, averaged per column first.
pub fn transfer_metric(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let n = m.n();
    if n < 2 {
        return Err(Error::Domain("transfer needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for j in 1..n {
        let col: f64 = (0..j).map(|i| m.at(i, j)).sum();
        total += col / j as f64;
    }
    Ok(total / (n - 1) as f64)
}

pub fn last_metric(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let n = m.n();
    Ok((0..n).map(|j| m.at(n - 1, j)).sum::<f64>() / n as f64)
}

pub fn avg_metric(m: &AccuracyMatrix) -> Result<f64> {
    m.require_complete()?;
    let n = m.n();
    let s: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| m.at(i, j)).sum();
    Ok(s / (n * n) as f64)
}

/// `A[i]`: accuracy over every class seen after learning task `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CilTrace(pub Vec<f64>);

/// `(A_n, mean A_i)`
pub fn cil_metrics(t: &CilTrace) -> Result<(f64, f64)> {
    let v = &t.0;
    let last = *v.last().ok_or_else(|| Error::Domain("empty class-incremental trace".into()))?;
    if v.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Domain("trace entry outside [0, 1]".into()));
    }
    Ok((last, v.iter().sum::<f64>() / v.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    IdGiven,
    #[default]
    IdFree,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::IdGiven => "id_given",
            Protocol::IdFree => "id_free",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub transfer: Option<f64>,
    pub avg: f64,
    pub last: f64,
    pub cil_last: f64,
    pub cil_avg: f64,
}

impl Metrics {
    pub fn compute(m: &AccuracyMatrix, cil: &CilTrace) -> Result<Self> {
        let (cil_last, cil_avg) = cil_metrics(cil)?;
        Ok(Metrics {
            transfer: if m.n() >= 2 { Some(transfer_metric(m)?) } else { None },
            avg: avg_metric(m)?,
            last: last_metric(m)?,
            cil_last,
            cil_avg,
        })
    }
}

fn check_stage_inputs(checkpoints: &[AdapterModel], tasks: &[TaskData]) -> Result<()> {
    if checkpoints.len() != tasks.len() {
        return Err(Error::config(
            "evaluation",
            format!("{} checkpoints for {} tasks", checkpoints.len(), tasks.len()),
        ));
    }
    for (i, (model, task)) in checkpoints.iter().zip(tasks).enumerate() {
        if !model.has_learned(task.id()) {
            return Err(Error::config(
                "evaluation",
                format!("checkpoint {i} has not learned task {}", task.id()),
            ));
        }
    }
    Ok(())
}

/// Task accuracy on `data`'s test split under one protocol.
pub fn task_accuracy(
    model: &AdapterModel,
    bank: &TaskEmbeddingBank,
    data: &TaskData,
    protocol: Protocol,
    window: usize,
) -> Result<f64> {
    let x = &data.test.x;
    let pred = match protocol {
        Protocol::IdGiven => model.predict(model.routing_for(data.id()), x, &data.label_embeddings)?,
        Protocol::IdFree => {
            let enrolled = bank.restricted(&model.learned);
            routed_inference(model, &enrolled, x, &data.label_embeddings, window)?.predictions
        }
    };
    Ok(accuracy(&pred, &data.test.y))
}

/// Fills `a[i][j]` with checkpoint `i` (the model right after learning task
/// `i`) evaluated on task `j`. Under the id-free protocol only tasks learned
/// by checkpoint `i` are visible in the bank.
pub fn evaluate_stream(
    checkpoints: &[AdapterModel],
    bank: &TaskEmbeddingBank,
    tasks: &[TaskData],
    protocol: Protocol,
    window: usize,
) -> Result<AccuracyMatrix> {
    check_stage_inputs(checkpoints, tasks)?;
    let mut m = AccuracyMatrix::new(tasks.len());
    for (i, model) in checkpoints.iter().enumerate() {
        for (j, data) in tasks.iter().enumerate() {
            m.set(i, j, task_accuracy(model, bank, data, protocol, window)?)?;
        }
    }
    Ok(m)
}

/// Pooled label table over `tasks` with exact duplicates merged, and the
/// pooled class index of each `(task position, class)`.
fn pooled_labels(tasks: &[TaskData]) -> Result<(Matrix, Vec<Vec<usize>>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut index = Vec::with_capacity(tasks.len());
    for t in tasks {
        let mut ids = Vec::with_capacity(t.classes());
        for c in 0..t.classes() {
            let row = t.label_embeddings.row(c);
            let pos = match rows.iter().position(|r| r.as_slice() == row) {
                Some(p) => p,
                None => {
                    rows.push(row.to_vec());
                    rows.len() - 1
                }
            };
            ids.push(pos);
        }
        index.push(ids);
    }
    Ok((Matrix::from_rows(&rows)?, index))
}

/// Class-incremental accuracy: after stage `i`, test images of tasks `0..=i`
/// are classified against all their labels pooled together.
pub fn evaluate_cil(
    checkpoints: &[AdapterModel],
    bank: &TaskEmbeddingBank,
    tasks: &[TaskData],
    protocol: Protocol,
    window: usize,
) -> Result<CilTrace> {
    check_stage_inputs(checkpoints, tasks)?;
    let mut trace = Vec::with_capacity(tasks.len());
    for (i, model) in checkpoints.iter().enumerate() {
        let seen = &tasks[..=i];
        let (labels, index) = pooled_labels(seen)?;
        let mut hits = 0usize;
        let mut total = 0usize;
        for (pos, data) in seen.iter().enumerate() {
            let x = &data.test.x;
            let pred = match protocol {
                Protocol::IdGiven => model.predict(model.routing_for(data.id()), x, &labels)?,
                Protocol::IdFree => {
                    let enrolled = bank.restricted(&model.learned);
                    routed_inference(model, &enrolled, x, &labels, window)?.predictions
                }
            };
            hits += pred
                .iter()
                .zip(&data.test.y)
                .filter(|(p, y)| **p == index[pos][**y])
                .count();
            total += data.test.len();
        }
        trace.push(if total == 0 { 0.0 } else { hits as f64 / total as f64 });
    }
    Ok(CilTrace(trace))
}

/// Fraction of test queries of learned tasks whose window matched their own
/// task, using the final model.
pub fn identification_accuracy(
    model: &AdapterModel,
    bank: &TaskEmbeddingBank,
    tasks: &[TaskData],
    window: usize,
) -> Result<(f64, Vec<(TaskId, crate::ifer::MatchResult)>)> {
    let enrolled = bank.restricted(&model.learned);
    let mut log = Vec::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    for data in tasks.iter().filter(|t| model.has_learned(t.id())) {
        let r = routed_inference(model, &enrolled, &data.test.x, &data.label_embeddings, window)?;
        for m in &r.matches {
            if m.task == Some(data.id()) {
                hits += 1;
            }
            total += 1;
            log.push((data.id(), *m));
        }
    }
    let acc = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok((acc, log))
}
