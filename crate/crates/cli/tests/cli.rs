use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
output_dir = "runs/test"

[schedule]
identify_steps = 15
finetune_steps = 15

[[stream]]
id = 0
classes = 4
seed = 1
alignment = { mode = "orthogonal" }

[[stream]]
id = 1
classes = 4
seed = 2
alignment = { mode = "reuse_of", of = 0 }
"#;

fn moecl(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_moecl"));
    cmd.args(args).env_remove("MOECL_OUTPUT_ROOT");
    if let Some(r) = root {
        cmd.env("MOECL_OUTPUT_ROOT", r);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_report() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("a");
    let o = moecl(&["run", s(&cfg), "-o", s(&out)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["Transfer", "Avg", "Last", "CIL"] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }
    assert!(out.join("metrics.json").is_file());
    assert!(out.join("summary.json").is_file());

    let r = moecl(&["report", s(&out)], None);
    assert!(r.status.success(), "{}", stderr(&r));
    let report = stdout(&r);
    assert!(report.contains("prune decisions"), "{report}");
    assert!(report.lines().any(|l| l.trim_start().starts_with("task") && l.contains(" L")), "{report}");
    assert!(report.contains("IFER"), "{report}");
}

#[test]
fn set_overrides_reach_the_effective_config() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("b");
    let o = moecl(&["run", s(&cfg), "-o", s(&out), "--set", "scr.lambda=0.02", "--set", "schedule.pre_expand=2"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let eff = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(eff.contains("lambda = 0.02"), "{eff}");
    assert!(eff.contains("pre_expand = 2"), "{eff}");
}

#[test]
fn delta_report_lists_both_runs() {
    let (tmp, cfg) = setup();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(moecl(&["run", s(&cfg), "-o", s(&a)], None).status.success());
    assert!(moecl(&["run", s(&cfg), "-o", s(&b), "--set", "scr.lambda=1"], None).status.success());
    let r = moecl(&["report", s(&a), s(&b)], None);
    assert!(r.status.success(), "{}", stderr(&r));
    let text = stdout(&r);
    assert!(text.contains("B-A"), "{text}");
    assert!(text.contains("Avg"));
}

#[test]
fn config_errors_exit_with_one() {
    let (tmp, _) = setup();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("of = 0", "of = 5")).unwrap();
    let o = moecl(&["run", s(&bad), "-o", s(&tmp.path().join("x"))], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stream[1].alignment.of"), "{}", stderr(&o));

    let missing = moecl(&["run", s(&tmp.path().join("nope.toml"))], None);
    assert_eq!(missing.status.code(), Some(1));

    let (_, cfg) = setup();
    let unknown = moecl(&["run", s(&cfg), "--set", "scr.nonsense=1"], None);
    assert_eq!(unknown.status.code(), Some(1));

    assert_eq!(moecl(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(moecl(&["--help"], None).status.code(), Some(0));
}

#[test]
fn corrupt_artifacts_exit_with_two() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("a");
    assert!(moecl(&["run", s(&cfg), "-o", s(&out)], None).status.success());
    std::fs::write(out.join("metrics.json"), "{ truncated").unwrap();
    let r = moecl(&["report", s(&out)], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("metrics.json"), "{}", stderr(&r));

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(moecl(&["report", s(&empty)], None).status.code(), Some(2));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("sweep");
    let o = moecl(
        &["sweep", s(&cfg), "--param", "schedule.pre_expand", "--values", "1,2,3", "-o", s(&out), "-j", "3"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for v in 1..=3 {
        assert!(out.join(format!("schedule.pre_expand={v}")).join("metrics.json").is_file());
    }
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "value,tasks_learned,task,total_experts,stage1_trainable_params");
    assert_eq!(rows.len(), 1 + 3 * 2);
    // stage-1 parameters grow with the pre-expansion count
    let stage1: Vec<usize> = rows[1..]
        .iter()
        .filter(|r| r.split(',').nth(1) == Some("1"))
        .map(|r| r.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(stage1.windows(2).all(|w| w[1] > w[0]), "{stage1:?}");
    assert!(stdout(&o).contains("non-increasing"));
}

#[test]
fn sweep_is_deterministic_across_job_counts() {
    let (tmp, cfg) = setup();
    let a = tmp.path().join("serial");
    let b = tmp.path().join("parallel");
    let args = |o: &Path, j: &str| {
        vec!["sweep".to_string(), s(&cfg).into(), "--param".into(), "scr.lambda".into(), "--values".into(),
             "0,0.01".into(), "-o".into(), s(o).into(), "-j".into(), j.into()]
    };
    let run = |v: Vec<String>| moecl(&v.iter().map(String::as_str).collect::<Vec<_>>(), None);
    assert!(run(args(&a, "1")).status.success());
    assert!(run(args(&b, "2")).status.success());
    for v in ["0", "0.01"] {
        let name = format!("scr.lambda={v}");
        let ma = std::fs::read(a.join(&name).join("metrics.json")).unwrap();
        let mb = std::fs::read(b.join(&name).join("metrics.json")).unwrap();
        assert_eq!(ma, mb);
    }
}

#[test]
fn output_root_env_relocates_relative_outputs() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("root");
    let o = moecl(&["run", s(&cfg)], Some(&root));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("runs/test/metrics.json").is_file());

    let flag = tmp.path().join("flagroot");
    let o = moecl(&["--output-root", s(&flag), "run", s(&cfg), "-o", "here"], Some(&root));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(flag.join("here/metrics.json").is_file());
}

#[test]
fn export_data_round_trips_into_a_run() {
    let (tmp, cfg) = setup();
    let data = tmp.path().join("data");
    let o = moecl(&["export-data", s(&cfg), s(&data)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("manifest.json").is_file());

    let from_file = tmp.path().join("from_file.toml");
    let text = format!(
        "output_dir = \"runs/test\"\ndata = \"{}\"\n[schedule]\nidentify_steps = 15\nfinetune_steps = 15\n",
        data.join("manifest.json").display()
    );
    std::fs::write(&from_file, text).unwrap();
    let a = tmp.path().join("gen");
    let b = tmp.path().join("file");
    assert!(moecl(&["run", s(&cfg), "-o", s(&a)], None).status.success());
    let o = moecl(&["run", s(&from_file), "-o", s(&b)], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(b.join("metrics.json")).unwrap()
    );
}
