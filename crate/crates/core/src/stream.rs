//! Deterministic synthetic task streams.
//!
//! Each task is a set of Gaussian class clusters around prototypes in the
//! input space, paired with a frozen table of label ("text") embeddings.
//! Alignment modes control how a task relates to earlier ones:
//!
//! * `reuse_of`: prototypes are perturbed copies of an earlier task's and the
//!   label table is copied, so the earlier task's experts already fit it.
//! * `orthogonal`: prototypes live in the orthogonal complement of every
//!   earlier prototype, with a fresh label table.
//! * `mixed`: each prototype puts `fraction` of its energy in that complement
//!   and the rest inside the span of earlier prototypes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::TaskId;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Alignment {
    ReuseOf { of: TaskId },
    Orthogonal,
    Mixed { fraction: f64 },
}

fn default_samples() -> usize {
    64
}
fn default_heldout() -> usize {
    32
}
fn default_noise() -> f64 {
    0.1
}
fn default_perturbation() -> f64 {
    0.05
}
fn default_prototype_norm() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub classes: usize,
    pub seed: u64,
    pub alignment: Alignment,
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default = "default_heldout")]
    pub val_per_class: usize,
    #[serde(default = "default_heldout")]
    pub test_per_class: usize,
    /// Per-coordinate standard deviation of the class clusters.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Relative size of the prototype perturbation in `reuse_of` mode.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default = "default_prototype_norm")]
    pub prototype_norm: f64,
}

impl TaskSpec {
    pub fn new(id: TaskId, classes: usize, seed: u64, alignment: Alignment) -> Self {
        TaskSpec {
            id,
            classes,
            seed,
            alignment,
            samples_per_class: default_samples(),
            val_per_class: default_heldout(),
            test_per_class: default_heldout(),
            noise: default_noise(),
            perturbation: default_perturbation(),
            prototype_norm: default_prototype_norm(),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("{path}.classes"), "needs at least 2 classes"));
        }
        if self.samples_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config(path, "per-class sample counts must be positive"));
        }
        if !(self.noise >= 0.0) || !(self.perturbation >= 0.0) || !(self.prototype_norm > 0.0) {
            return Err(Error::config(path, "noise/perturbation must be >= 0 and prototype_norm > 0"));
        }
        if let Alignment::Mixed { fraction } = self.alignment {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::config(format!("{path}.alignment.fraction"), "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    pub fn head(&self, n: usize) -> (Matrix, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub prototypes: Matrix,
    pub label_embeddings: Matrix,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl TaskData {
    pub fn id(&self) -> TaskId {
        self.spec.id
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn classes(&self) -> usize {
        self.label_embeddings.rows()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal basis of the span of `vectors` (modified Gram-Schmidt, two passes).
fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let scale = l2_norm(v);
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
            }
        }
        let n = l2_norm(&w);
        if n > 1e-9 * scale.max(1.0) {
            basis.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(v, q);
            v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
        }
    }
}

fn scaled_to(mut v: Vec<f64>, norm: f64) -> Vec<f64> {
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x *= norm / n);
    v
}

/// Generates tasks in stream order; later tasks may depend on earlier ones.
#[derive(Clone, Debug)]
pub struct StreamGenerator {
    dim: usize,
    tasks: BTreeMap<TaskId, TaskData>,
    prototype_rows: Vec<Vec<f64>>,
}

impl StreamGenerator {
    pub fn new(dim: usize) -> Self {
        StreamGenerator {
            dim,
            tasks: BTreeMap::new(),
            prototype_rows: Vec::new(),
        }
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskData> {
        self.tasks.get(&id)
    }

    pub fn generate(&mut self, spec: &TaskSpec) -> Result<TaskData> {
        spec.validate(&format!("stream.task{}", spec.id))?;
        if self.tasks.contains_key(&spec.id) {
            return Err(Error::config(format!("stream.task{}.id", spec.id), "duplicate task id"));
        }
        let dim = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let m = spec.classes;

        let (prototypes, labels) = match spec.alignment {
            Alignment::ReuseOf { of } => {
                let src = self.tasks.get(&of).ok_or_else(|| {
                    Error::config(
                        format!("stream.task{}.alignment.of", spec.id),
                        format!("reuse of unknown task {of}"),
                    )
                })?;
                if src.classes() != m {
                    return Err(Error::config(
                        format!("stream.task{}.classes", spec.id),
                        format!("reuse of task {of} needs {} classes", src.classes()),
                    ));
                }
                let protos: Vec<Vec<f64>> = (0..m)
                    .map(|c| {
                        let p = src.prototypes.row(c);
                        let noise = gaussian_vec(&mut rng, dim);
                        let s = spec.perturbation * l2_norm(p) / (dim as f64).sqrt();
                        p.iter().zip(&noise).map(|(a, n)| a + s * n).collect()
                    })
                    .collect();
                (protos, src.label_embeddings.clone())
            }
            Alignment::Orthogonal => {
                let basis = orthonormal_basis(&self.prototype_rows);
                if basis.len() >= dim {
                    return Err(Error::config(
                        format!("stream.task{}.alignment", spec.id),
                        "no orthogonal complement left in the input space",
                    ));
                }
                let protos = (0..m)
                    .map(|_| {
                        let mut v = gaussian_vec(&mut rng, dim);
                        project_out(&mut v, &basis);
                        scaled_to(v, spec.prototype_norm)
                    })
                    .collect();
                (protos, self.fresh_labels(&mut rng, m)?)
            }
            Alignment::Mixed { fraction } => {
                let basis = orthonormal_basis(&self.prototype_rows);
                if basis.len() >= dim && fraction > 0.0 {
                    return Err(Error::config(
                        format!("stream.task{}.alignment", spec.id),
                        "no orthogonal complement left in the input space",
                    ));
                }
                let protos = (0..m)
                    .map(|_| {
                        let mut orth = gaussian_vec(&mut rng, dim);
                        project_out(&mut orth, &basis);
                        let orth = scaled_to(orth, 1.0);
                        let coeffs = gaussian_vec(&mut rng, basis.len());
                        let mut inside = vec![0.0; dim];
                        for (c, q) in coeffs.iter().zip(&basis) {
                            inside.iter_mut().zip(q).for_each(|(v, qi)| *v += c * qi);
                        }
                        let inside = if basis.is_empty() { vec![0.0; dim] } else { scaled_to(inside, 1.0) };
                        let (wo, wi) = if basis.is_empty() {
                            (1.0, 0.0)
                        } else {
                            (fraction.sqrt(), (1.0 - fraction).sqrt())
                        };
                        let v = orth.iter().zip(&inside).map(|(o, i)| wo * o + wi * i).collect();
                        scaled_to(v, spec.prototype_norm)
                    })
                    .collect();
                (protos, self.fresh_labels(&mut rng, m)?)
            }
        };

        let prototypes = Matrix::from_rows(&prototypes)?;
        let mut sample = |per_class: usize| -> Result<Split> {
            let mut rows = Vec::with_capacity(m * per_class);
            let mut y = Vec::with_capacity(m * per_class);
            for c in 0..m {
                for _ in 0..per_class {
                    let n = gaussian_vec(&mut rng, dim);
                    rows.push(
                        prototypes
                            .row(c)
                            .iter()
                            .zip(&n)
                            .map(|(p, e)| p + spec.noise * e)
                            .collect::<Vec<f64>>(),
                    );
                    y.push(c);
                }
            }
            Ok(Split {
                x: Matrix::from_rows(&rows)?,
                y,
            })
        };
        let train = sample(spec.samples_per_class)?;
        let val = sample(spec.val_per_class)?;
        let test = sample(spec.test_per_class)?;

        let data = TaskData {
            spec: spec.clone(),
            prototypes: prototypes.clone(),
            label_embeddings: labels,
            train,
            val,
            test,
        };
        for r in 0..prototypes.rows() {
            self.prototype_rows.push(prototypes.row(r).to_vec());
        }
        self.tasks.insert(spec.id, data.clone());
        Ok(data)
    }

    fn fresh_labels(&self, rng: &mut ChaCha8Rng, m: usize) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = (0..m).map(|_| scaled_to(gaussian_vec(rng, self.dim), 1.0)).collect();
        Matrix::from_rows(&rows)
    }
}

/// Generates a whole stream in order.
pub fn generate_stream(dim: usize, specs: &[TaskSpec]) -> Result<Vec<TaskData>> {
    let mut generator = StreamGenerator::new(dim);
    specs.iter().map(|s| generator.generate(s)).collect()
}

const DATA_MAGIC: &[u8; 8] = b"MOECLDS1";

/// Manifest accompanying an exported stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub format: String,
    pub dim: usize,
    pub tasks: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub spec: TaskSpec,
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_labels<W: Write>(w: &mut W, y: &[usize]) -> Result<()> {
    for &v in y {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    Ok(())
}

/// Flat little-endian layout:
///
/// ```text
/// magic "MOECLDS1"
/// u64 dim, classes, n_train, n_val, n_test
/// f64 prototypes[classes][dim], labels[classes][dim]
/// f64 train_x[n_train][dim], u64 train_y[n_train]   (then val, test)
/// ```
pub fn write_task_binary<W: Write>(w: &mut W, task: &TaskData) -> Result<()> {
    w.write_all(DATA_MAGIC)?;
    for v in [
        task.dim(),
        task.classes(),
        task.train.len(),
        task.val.len(),
        task.test.len(),
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    write_matrix(w, &task.prototypes)?;
    write_matrix(w, &task.label_embeddings)?;
    for split in [&task.train, &task.val, &task.test] {
        write_matrix(w, &split.x)?;
        write_labels(w, &split.y)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Matrix::new(rows, cols, data)
}

pub fn read_task_binary<R: Read>(r: &mut R, spec: TaskSpec) -> Result<TaskData> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::Data("not an exported task file".into()));
    }
    let dim = read_u64(r)? as usize;
    let classes = read_u64(r)? as usize;
    let counts = [read_u64(r)? as usize, read_u64(r)? as usize, read_u64(r)? as usize];
    let prototypes = read_matrix(r, classes, dim)?;
    let label_embeddings = read_matrix(r, classes, dim)?;
    let mut splits = Vec::with_capacity(3);
    for n in counts {
        let x = read_matrix(r, n, dim)?;
        let y = (0..n)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Data(format!("label {bad} with {classes} classes")));
        }
        splits.push(Split { x, y });
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(TaskData {
        spec,
        prototypes,
        label_embeddings,
        train,
        val,
        test,
    })
}

/// Writes one binary file per task plus `manifest.json` into `dir`.
pub fn export_stream(dir: &Path, tasks: &[TaskData]) -> Result<StreamManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tasks.len());
    for t in tasks {
        let file = format!("task_{}.bin", t.id());
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
        write_task_binary(&mut out, t)?;
        out.flush()?;
        entries.push(ManifestEntry {
            file,
            spec: t.spec.clone(),
        });
    }
    let manifest = StreamManifest {
        format: "moecl-stream-v1".into(),
        dim: tasks.first().map_or(0, TaskData::dim),
        tasks: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn import_stream(manifest_path: &Path) -> Result<Vec<TaskData>> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: StreamManifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .tasks
        .into_iter()
        .map(|e| {
            let mut f = std::io::BufReader::new(std::fs::File::open(dir.join(&e.file))?);
            let t = read_task_binary(&mut f, e.spec)?;
            if t.dim() != manifest.dim {
                return Err(Error::Data(format!("{} has dim {}, manifest says {}", e.file, t.dim(), manifest.dim)));
            }
            Ok(t)
        })
        .collect()
}
