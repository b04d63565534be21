use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use moecl_core::experiment::{config_with_overrides, files, read_metrics, read_summary};
use moecl_core::stream::export_stream;
use moecl_core::{run_experiment, write_artifacts, Error, ExperimentConfig, Metrics, RunSummary};

/// Continual-learning runs over synthetic task streams.
#[derive(Debug, Parser)]
#[command(name = "moecl", version)]
struct Cli {
    /// Root directory that relative output paths are resolved against.
    #[arg(long, env = "MOECL_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn the configured stream and write all artifacts.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Override a config key, e.g. `--set scr.lambda=0.02`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarize a run directory, or compare two.
    Report { dir: PathBuf, other: Option<PathBuf> },
    /// Run once per value of one config key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Concurrent runs.
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the configured stream as binary task files plus a manifest.
    ExportData { config: PathBuf, dir: PathBuf },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn config_failure(e: Error, path: &Path) -> Failure {
    match e {
        Error::Config { .. } | Error::Parse(_) | Error::Io(_) => {
            Failure::Config(anyhow::Error::new(e).context(format!("loading {}", path.display())))
        }
        other => other.into(),
    }
}

fn load_config(path: &Path, overrides: &[(&str, &str)]) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_failure(e.into(), path))?;
    config_with_overrides(&text, overrides).map_err(|e| config_failure(e, path))
}

fn split_override(s: &str) -> Result<(&str, &str), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("override `{s}` is not KEY=VALUE")))
}

fn resolve_output(cfg_dir: &Path, flag: Option<&Path>, root: Option<&Path>) -> PathBuf {
    let dir = flag.unwrap_or(cfg_dir);
    match root {
        Some(root) if dir.is_absolute() => {
            let rel: PathBuf = dir.components().filter(|c| matches!(c, Component::Normal(_))).collect();
            root.join(rel)
        }
        Some(root) => root.join(dir),
        None => dir.to_path_buf(),
    }
}

fn run_and_write(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary, Failure> {
    let result = run_experiment(cfg)?;
    write_artifacts(dir, &result)
        .map_err(|e| Failure::Runtime(anyhow::Error::new(e).context(format!("writing {}", dir.display()))))?;
    Ok(result.summary)
}

fn cmd_run(cli_root: Option<&Path>, config: &Path, output: Option<&Path>, sets: &[String]) -> Result<(), Failure> {
    let overrides = sets.iter().map(|s| split_override(s)).collect::<Result<Vec<_>, _>>()?;
    let cfg = load_config(config, &overrides)?;
    let dir = resolve_output(&cfg.output_dir, output, cli_root);
    let summary = run_and_write(&cfg, &dir)?;
    let metrics = read_metrics(&dir)?;
    print!("{}", render_summary(&dir, &metrics, &summary, None));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn metric_rows(m: &Metrics) -> [(&'static str, Option<f64>); 5] {
    [
        ("Transfer", m.transfer),
        ("Avg", Some(m.avg)),
        ("Last", Some(m.last)),
        ("CIL Last", Some(m.cil_last)),
        ("CIL Avg", Some(m.cil_avg)),
    ]
}

fn layer_indices(dir: &Path) -> Option<Vec<u64>> {
    let records = read_truncation(dir).ok()?;
    let first = records.first()?.get("task")?.clone();
    Some(
        records
            .iter()
            .take_while(|r| r.get("task") == Some(&first))
            .filter_map(|r| r.get("layer_index")?.as_u64())
            .collect(),
    )
}

fn read_truncation(dir: &Path) -> anyhow::Result<Vec<serde_json::Value>> {
    let path = dir.join(files::TRUNCATION);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn render_summary(dir: &Path, m: &Metrics, s: &RunSummary, truncation: Option<&[serde_json::Value]>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run       {}", dir.display());
    let _ = writeln!(out, "protocol  {}", s.protocol.name());
    for (name, v) in metric_rows(m) {
        let _ = writeln!(out, "{name:<9} {}", fmt_opt(v));
    }
    let _ = writeln!(out, "IFER      {:.4}", s.ifer_accuracy);
    let _ = writeln!(out, "experts   {} total, {} adapter params", s.total_experts, s.adapter_params);

    let layers = layer_indices(dir).unwrap_or_default();
    let _ = write!(out, "\nexpert counts\n  task");
    for (i, _) in s.tasks.first().map(|t| t.expert_counts.as_slice()).unwrap_or(&[]).iter().enumerate() {
        match layers.get(i) {
            Some(l) => { let _ = write!(out, "  L{l:<3}"); }
            None => { let _ = write!(out, "  #{i:<3}"); }
        }
    }
    let _ = writeln!(out, "  total");
    for t in &s.tasks {
        let _ = write!(out, "  {:<4}", t.task);
        for c in &t.expert_counts {
            let _ = write!(out, "  {c:<4}");
        }
        let _ = writeln!(out, "  {}", t.expert_counts.iter().sum::<usize>());
    }

    if let Some(records) = truncation {
        let _ = writeln!(out, "\nprune decisions");
        for r in records {
            let cands = r["candidates"].as_array().map(Vec::as_slice).unwrap_or(&[]);
            let detail: Vec<String> = cands
                .iter()
                .map(|c| {
                    format!(
                        "e{} {:.3} {}",
                        c["expert_id"],
                        c["mean_prob"].as_f64().unwrap_or(f64::NAN),
                        if c["kept"].as_bool() == Some(true) { "kept" } else { "pruned" }
                    )
                })
                .collect();
            let _ = writeln!(
                out,
                "  task {} L{}: {} -> {} [{}]",
                r["task"], r["layer_index"], r["experts_before"], r["experts_after"], detail.join(", ")
            );
        }
    }
    out
}

fn load_run(dir: &Path) -> Result<(Metrics, RunSummary), Failure> {
    let wrap = |e: Error| Failure::Runtime(anyhow::Error::new(e).context(format!("run directory {}", dir.display())));
    Ok((read_metrics(dir).map_err(wrap)?, read_summary(dir).map_err(wrap)?))
}

fn render_delta(a_dir: &Path, a: &(Metrics, RunSummary), b_dir: &Path, b: &(Metrics, RunSummary)) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "A  {}\nB  {}\n", a_dir.display(), b_dir.display());
    let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9}", "metric", "A", "B", "B-A");
    let rows_a = metric_rows(&a.0);
    let rows_b = metric_rows(&b.0);
    let mut rows: Vec<(String, Option<f64>, Option<f64>)> =
        rows_a.iter().zip(&rows_b).map(|((n, x), (_, y))| (n.to_string(), *x, *y)).collect();
    rows.push(("IFER".into(), Some(a.1.ifer_accuracy), Some(b.1.ifer_accuracy)));
    rows.push(("experts".into(), Some(a.1.total_experts as f64), Some(b.1.total_experts as f64)));
    for (name, x, y) in rows {
        let d = x.zip(y).map(|(x, y)| y - x);
        let _ = writeln!(out, "{name:<12} {:>9} {:>9} {:>9}", fmt_opt(x), fmt_opt(y), fmt_opt(d));
    }
    let _ = writeln!(out, "\nexperts after each task\n  {:<6} {:>6} {:>6} {:>6}", "task", "A", "B", "B-A");
    let n = a.1.tasks.len().max(b.1.tasks.len());
    for i in 0..n {
        let ta = a.1.tasks.get(i);
        let tb = b.1.tasks.get(i);
        let label = ta.or(tb).map_or(String::new(), |t| t.task.to_string());
        let ca = ta.map(|t| t.expert_counts.iter().sum::<usize>() as i64);
        let cb = tb.map(|t| t.expert_counts.iter().sum::<usize>() as i64);
        let show = |v: Option<i64>| v.map_or_else(|| "-".into(), |v| v.to_string());
        let _ = writeln!(
            out,
            "  {label:<6} {:>6} {:>6} {:>6}",
            show(ca),
            show(cb),
            show(ca.zip(cb).map(|(x, y)| y - x))
        );
    }
    out
}

fn cmd_report(dir: &Path, other: Option<&Path>) -> Result<(), Failure> {
    let a = load_run(dir)?;
    match other {
        None => {
            let truncation = read_truncation(dir).map_err(Failure::Runtime)?;
            print!("{}", render_summary(dir, &a.0, &a.1, Some(&truncation)));
        }
        Some(other) => {
            let b = load_run(other)?;
            print!("{}", render_delta(dir, &a, other, &b));
        }
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '=') { c } else { '_' })
        .collect()
}

fn cmd_sweep(
    cli_root: Option<&Path>,
    config: &Path,
    param: &str,
    values: &[String],
    output: Option<&Path>,
    jobs: usize,
) -> Result<(), Failure> {
    let mut runs = Vec::with_capacity(values.len());
    for v in values {
        let cfg = load_config(config, &[(param, v.trim())])?;
        runs.push((v.trim().to_string(), cfg));
    }
    let base = resolve_output(&runs[0].1.output_dir, output, cli_root);
    let jobs = jobs.max(1);

    let mut results: BTreeMap<usize, Result<RunSummary, Failure>> = BTreeMap::new();
    for chunk in runs.iter().enumerate().collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(i, (v, cfg))| {
                    let dir = base.join(sanitize(&format!("{param}={v}")));
                    (*i, scope.spawn(move || run_and_write(cfg, &dir)))
                })
                .collect();
            for (i, h) in handles {
                let r = h.join().unwrap_or_else(|_| Err(Failure::Runtime(anyhow::anyhow!("sweep worker panicked"))));
                results.insert(i, r);
            }
        });
    }

    let mut summaries = Vec::with_capacity(runs.len());
    for ((v, _), (_, r)) in runs.iter().zip(results) {
        summaries.push((v.clone(), r.map_err(|f| match f {
            Failure::Config(e) => Failure::Config(e.context(format!("{param}={v}"))),
            Failure::Runtime(e) => Failure::Runtime(e.context(format!("{param}={v}"))),
        })?));
    }

    let mut csv = String::from("value,tasks_learned,task,total_experts,stage1_trainable_params\n");
    let mut table = format!("sweep over {param} in {}\n\n{:<12} {:>8}  experts after each task\n", base.display(), "value", "stage1");
    for (v, s) in &summaries {
        let _ = write!(table, "{v:<12} {:>8} ", s.tasks.last().map_or(0, |t| t.stage1_trainable_params));
        for (i, t) in s.tasks.iter().enumerate() {
            let total: usize = t.expert_counts.iter().sum();
            let _ = writeln!(csv, "{v},{},{},{total},{}", i + 1, t.task, t.stage1_trainable_params);
            let _ = write!(table, " {total:>3}");
        }
        table.push('\n');
    }
    let horizon = summaries.iter().map(|(_, s)| s.tasks.len()).min().unwrap_or(0);
    let non_increasing = (0..horizon).all(|i| {
        summaries.windows(2).all(|w| {
            let a: usize = w[0].1.tasks[i].expert_counts.iter().sum();
            let b: usize = w[1].1.tasks[i].expert_counts.iter().sum();
            b <= a
        })
    });
    let _ = writeln!(
        table,
        "\nexpert counts non-increasing along the listed values at every task index: {}",
        if non_increasing { "yes" } else { "no" }
    );
    std::fs::create_dir_all(&base).map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::write(base.join("sweep.csv"), csv).map_err(|e| Failure::Runtime(e.into()))?;
    print!("{table}");
    Ok(())
}

fn cmd_export(config: &Path, dir: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, &[])?;
    let tasks = cfg.load_tasks()?;
    let manifest = export_stream(dir, &tasks)?;
    println!("wrote {} tasks (dim {}) to {}", manifest.tasks.len(), manifest.dim, dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let root = cli.output_root.as_deref();
    let outcome = match &cli.command {
        Command::Run { config, output, overrides } => cmd_run(root, config, output.as_deref(), overrides),
        Command::Report { dir, other } => cmd_report(dir, other.as_deref()),
        Command::Sweep { config, param, values, output, jobs } => {
            cmd_sweep(root, config, param, values, output.as_deref(), *jobs)
        }
        Command::ExportData { config, dir } => cmd_export(config, dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Config(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
