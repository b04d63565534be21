//! Config-driven runs over a whole task stream and the artifacts they leave.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::TaskId;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ifer::{enroll_from_data, IferConfig, MatchResult, TaskEmbeddingBank};
use crate::lifecycle::{convergence_curve, learn_task, PhaseSchedule, TaskOutcome, TrainConfig};
use crate::metrics::{evaluate_cil, evaluate_stream, identification_accuracy, AccuracyMatrix, CilTrace, Metrics, Protocol};
use crate::model::{AdapterModel, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::scr::ScrConfig;
use crate::stream::{generate_stream, import_stream, Alignment, TaskData, TaskSpec};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub protocol: Protocol,
    /// Let earlier tasks' experts train too. Off in the normal lifecycle.
    #[serde(default)]
    pub train_old_experts: bool,
    /// Manifest of an exported stream; replaces `stream` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: PhaseSchedule,
    #[serde(default)]
    pub scr: ScrConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub ifer: IferConfig,
    #[serde(default)]
    pub stream: Vec<TaskSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::config("config", e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.scr.validate()?;
        self.ifer.validate()?;
        if self.data.is_some() {
            return Ok(());
        }
        if self.stream.is_empty() {
            return Err(Error::config("stream", "at least one task is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, spec) in self.stream.iter().enumerate() {
            let path = format!("stream[{i}]");
            spec.validate(&path)?;
            if let Alignment::ReuseOf { of } = spec.alignment {
                if !seen.contains(&of) {
                    return Err(Error::config(
                        format!("{path}.alignment.of"),
                        format!("task {of} does not appear earlier in the stream"),
                    ));
                }
            }
            if !seen.insert(spec.id) {
                return Err(Error::config(format!("{path}.id"), format!("duplicate task id {}", spec.id)));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule.clone(),
            scr: self.scr,
            optimizer: self.optimizer,
            train_old_experts: self.train_old_experts,
            seed: self.seed,
        }
    }

    pub fn load_tasks(&self) -> Result<Vec<TaskData>> {
        let tasks = match &self.data {
            Some(manifest) => import_stream(manifest)?,
            None => generate_stream(self.model.dim, &self.stream)?,
        };
        if let Some(t) = tasks.iter().find(|t| t.dim() != self.model.dim) {
            return Err(Error::config(
                "model.dim",
                format!("task {} has dim {}, model has {}", t.id(), t.dim(), self.model.dim),
            ));
        }
        if tasks.is_empty() {
            return Err(Error::config("data", "stream is empty"));
        }
        Ok(tasks)
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dot-separated; numeric segments index arrays) in a parsed
/// config document. `raw` is read as a TOML value, else as a bare string.
pub fn apply_override(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(key, "malformed key path"));
    }
    let mut cur = doc;
    for (depth, seg) in segments.iter().enumerate() {
        let last = depth + 1 == segments.len();
        let here = segments[..=depth].join(".");
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), parse_override_value(raw));
                    return Ok(());
                }
                t.entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| Error::config(&here, "array segment must be an index"))?;
                let len = a.len();
                let slot = a
                    .get_mut(i)
                    .ok_or_else(|| Error::config(&here, format!("index {i} out of {len}")))?;
                if last {
                    *slot = parse_override_value(raw);
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(&here, "cannot descend into a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Parses `text`, applies `key = raw`, and validates the result.
pub fn config_with_override(text: &str, key: &str, raw: &str) -> Result<ExperimentConfig> {
    config_with_overrides(text, &[(key, raw)])
}

pub fn config_with_overrides(text: &str, overrides: &[(&str, &str)]) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim_end()))?;
    for (key, raw) in overrides {
        apply_override(&mut doc, key, raw)?;
    }
    let at = overrides.last().map_or("config", |(k, _)| *k);
    let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(at, e.to_string().trim_end()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: TaskId,
    /// Per adapter layer, after this task.
    pub expert_counts: Vec<usize>,
    pub pruned: Vec<usize>,
    pub stage1_trainable_params: usize,
    pub identify_final_loss: Option<f64>,
    pub finetune_final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub protocol: Protocol,
    pub tasks: Vec<TaskSummary>,
    pub total_experts: usize,
    pub adapter_params: usize,
    pub ifer_accuracy: f64,
    pub backbone_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskData>,
    pub outcomes: Vec<TaskOutcome>,
    pub checkpoints: Vec<AdapterModel>,
    pub bank: TaskEmbeddingBank,
    pub id_given: AccuracyMatrix,
    pub id_free: AccuracyMatrix,
    pub cil: CilTrace,
    pub metrics: Metrics,
    pub summary: RunSummary,
    pub ifer_log: Vec<(TaskId, MatchResult)>,
}

impl RunResult {
    pub fn final_model(&self) -> &AdapterModel {
        self.checkpoints.last().expect("a run learns at least one task")
    }

    pub fn matrix(&self, protocol: Protocol) -> &AccuracyMatrix {
        match protocol {
            Protocol::IdGiven => &self.id_given,
            Protocol::IdFree => &self.id_free,
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let tasks = cfg.load_tasks()?;
    run_on_tasks(cfg, tasks)
}

/// Learns `tasks` in order and evaluates every stage.
pub fn run_on_tasks(cfg: &ExperimentConfig, tasks: Vec<TaskData>) -> Result<RunResult> {
    let mut model = AdapterModel::new(cfg.model.clone())?;
    let fingerprint = model.backbone.fingerprint();
    let mut bank = TaskEmbeddingBank::from_config(&cfg.ifer)?;
    let train = cfg.train_config();

    let mut outcomes = Vec::with_capacity(tasks.len());
    let mut checkpoints = Vec::with_capacity(tasks.len());
    let mut task_summaries = Vec::with_capacity(tasks.len());
    for data in &tasks {
        let outcome = learn_task(&mut model, data, &train)?;
        enroll_from_data(&mut bank, &model, data, cfg.ifer.enroll_batch)?;
        task_summaries.push(TaskSummary {
            task: data.id(),
            expert_counts: model.expert_counts(),
            pruned: outcome.report.layers.iter().map(|l| l.pruned).collect(),
            stage1_trainable_params: outcome.stage1_trainable,
            identify_final_loss: outcome.identify_losses.last().map(|l| l.total),
            finetune_final_loss: outcome.finetune_losses.last().map(|l| l.total),
        });
        outcomes.push(outcome);
        checkpoints.push(model.clone());
    }
    if model.backbone.fingerprint() != fingerprint {
        return Err(Error::State("backbone parameters changed during the run".into()));
    }

    let window = cfg.ifer.query_window;
    let id_given = evaluate_stream(&checkpoints, &bank, &tasks, Protocol::IdGiven, window)?;
    let id_free = evaluate_stream(&checkpoints, &bank, &tasks, Protocol::IdFree, window)?;
    let cil = evaluate_cil(&checkpoints, &bank, &tasks, cfg.protocol, window)?;
    let selected = match cfg.protocol {
        Protocol::IdGiven => &id_given,
        Protocol::IdFree => &id_free,
    };
    let metrics = Metrics::compute(selected, &cil)?;
    let (ifer_accuracy, ifer_log) = identification_accuracy(&model, &bank, &tasks, window)?;

    let summary = RunSummary {
        protocol: cfg.protocol,
        tasks: task_summaries,
        total_experts: model.total_experts(),
        adapter_params: model.adapter_parameter_count(),
        ifer_accuracy,
        backbone_fingerprint: format!("{fingerprint:016x}"),
    };
    Ok(RunResult {
        config: cfg.clone(),
        tasks,
        outcomes,
        checkpoints,
        bank,
        id_given,
        id_free,
        cil,
        metrics,
        summary,
        ifer_log,
    })
}

pub mod files {
    pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";
    pub const METRICS: &str = "metrics.json";
    pub const SUMMARY: &str = "summary.json";
    pub const TRUNCATION: &str = "truncation.jsonl";
    pub const ROUTING_TRACE: &str = "routing_trace.jsonl";
    pub const EXPERT_COUNTS: &str = "expert_counts.csv";
    pub const KL_CONVERGENCE: &str = "kl_convergence.csv";
    pub const LOSSES: &str = "losses.csv";
    pub const IFER_LOG: &str = "ifer.jsonl";
    pub const CHECKPOINT: &str = "checkpoint.json";

    pub fn accuracy_matrix(protocol: super::Protocol, selected: bool) -> String {
        if selected {
            "accuracy_matrix.csv".into()
        } else {
            format!("accuracy_matrix_{}.csv", protocol.name())
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_matrix_csv(path: &Path, m: &AccuracyMatrix, tasks: &[TaskData]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["after_task".to_string()];
    header.extend(tasks.iter().map(|t| format!("task_{}", t.id())));
    w.write_record(&header).map_err(csv_err)?;
    for (t, row) in tasks.iter().zip(m.rows()?) {
        let mut rec = vec![t.id().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes every run artifact into `dir`.
pub fn write_artifacts(dir: &Path, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = &result.config;
    std::fs::write(dir.join(files::EFFECTIVE_CONFIG), cfg.to_toml_string()?)?;

    for p in [Protocol::IdGiven, Protocol::IdFree] {
        let name = files::accuracy_matrix(p, p == cfg.protocol);
        write_matrix_csv(&dir.join(name), result.matrix(p), &result.tasks)?;
    }
    std::fs::write(
        dir.join(files::METRICS),
        serde_json::to_string_pretty(&result.metrics)? + "\n",
    )?;
    std::fs::write(
        dir.join(files::SUMMARY),
        serde_json::to_string_pretty(&result.summary)? + "\n",
    )?;

    let truncation = result.outcomes.iter().flat_map(|o| {
        o.report.layers.iter().map(move |l| {
            serde_json::json!({
                "task": o.report.task,
                "threshold": o.report.threshold,
                "layer_index": l.layer_index,
                "experts_before": l.experts_before,
                "experts_after": l.experts_after,
                "pruned": l.pruned,
                "candidates": l.candidates,
            })
        })
    });
    write_jsonl(&dir.join(files::TRUNCATION), truncation)?;

    let trace = result.outcomes.iter().flat_map(|o| {
        o.trace.snapshots.iter().flat_map(move |s| {
            s.layers.iter().map(move |l| {
                serde_json::json!({
                    "task": o.trace.task,
                    "step": s.step,
                    "loss": s.loss,
                    "layer_index": l.layer_index,
                    "expert_ids": l.expert_ids,
                    "mean": l.mean,
                })
            })
        })
    });
    write_jsonl(&dir.join(files::ROUTING_TRACE), trace)?;

    let mut w = csv::Writer::from_path(dir.join(files::EXPERT_COUNTS)).map_err(csv_err)?;
    let layers = result.final_model().layers.len();
    let mut header = vec!["tasks_learned".to_string(), "task".to_string()];
    header.extend((0..layers).map(|i| format!("layer_{}", result.final_model().layers[i].layer_index)));
    header.push("total".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, t) in result.summary.tasks.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string(), t.task.to_string()];
        rec.extend(t.expert_counts.iter().map(|c| c.to_string()));
        rec.push(t.expert_counts.iter().sum::<usize>().to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(files::KL_CONVERGENCE)).map_err(csv_err)?;
    w.write_record(["task", "step", "mean_kl_to_final", "eval_loss"]).map_err(csv_err)?;
    for o in &result.outcomes {
        if o.trace.snapshots.len() < 2 {
            continue;
        }
        for ((step, kl), s) in convergence_curve(&o.trace)?.into_iter().zip(&o.trace.snapshots) {
            w.write_record([o.trace.task.to_string(), step.to_string(), kl.to_string(), s.loss.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(files::LOSSES)).map_err(csv_err)?;
    w.write_record(["task", "phase", "step", "contrastive", "aux", "total"]).map_err(csv_err)?;
    for o in &result.outcomes {
        for (phase, losses) in [("identify", &o.identify_losses), ("finetune", &o.finetune_losses)] {
            for l in losses.iter() {
                w.write_record([
                    o.report.task.to_string(),
                    phase.to_string(),
                    l.step.to_string(),
                    l.contrastive.to_string(),
                    l.aux.to_string(),
                    l.total.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;

    let ifer = result.ifer_log.iter().map(|(truth, m)| {
        serde_json::json!({
            "true_task": truth,
            "matched": m.matched,
            "task": m.task,
            "nearest": m.nearest,
            "distance": m.distance,
        })
    });
    write_jsonl(&dir.join(files::IFER_LOG), ifer)?;

    Checkpoint::new(result.final_model().clone(), result.bank.clone()).save(&dir.join(files::CHECKPOINT))?;
    Ok(())
}

pub fn read_metrics(dir: &Path) -> Result<Metrics> {
    let path = dir.join(files::METRICS);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(files::SUMMARY);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[stream]]
id = 0
classes = 4
seed = 1
alignment = { mode = "orthogonal" }
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.schedule.prune_threshold, 0.1);
        assert_eq!(cfg.schedule.top_k, 2);
        assert_eq!(cfg.schedule.pre_expand, 1);
        assert_eq!(cfg.scr.learning_rate, 0.01);
        assert_eq!(cfg.ifer.threshold, 10.0);
        assert_eq!(cfg.model.dim, 32);
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn errors_carry_field_paths() {
        let bad = MINIMAL.replace("classes = 4", "classes = 1");
        match ExperimentConfig::from_toml_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "stream[0].classes"),
            other => panic!("unexpected {other:?}"),
        }
        let dangling = format!("{MINIMAL}\n[[stream]]\nid = 1\nclasses = 4\nseed = 2\nalignment = {{ mode = \"reuse_of\", of = 9 }}\n");
        match ExperimentConfig::from_toml_str(&dangling) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "stream[1].alignment.of"),
            other => panic!("unexpected {other:?}"),
        }
        let lam = format!("[scr]\nlambda = -1.0\n{MINIMAL}");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&lam),
            Err(Error::Config { path, .. }) if path == "scr.lambda"
        ));
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn overrides_follow_key_paths() {
        let cfg = config_with_override(MINIMAL, "scr.lambda", "0.025").unwrap();
        assert_eq!(cfg.scr.lambda, 0.025);
        let cfg = config_with_override(MINIMAL, "stream.0.classes", "6").unwrap();
        assert_eq!(cfg.stream[0].classes, 6);
        let cfg = config_with_override(MINIMAL, "protocol", "id_given").unwrap();
        assert_eq!(cfg.protocol, Protocol::IdGiven);
        assert!(config_with_override(MINIMAL, "stream.3.classes", "6").is_err());
        assert!(config_with_override(MINIMAL, "scr.typo", "1").is_err());
    }
}
