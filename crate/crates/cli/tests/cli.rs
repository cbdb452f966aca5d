use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "batch_size=4",
    "--set",
    "eval_prompts=4",
    "--set",
    "warm_start.steps=5",
    "--steps",
    "3",
];

fn hapo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hapo"))
        .args(args)
        .env_remove("HAPO_RUNS_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    hapo(&args)
}

#[test]
fn train_creates_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), out.display().to_string());
    for f in ["config.toml", "metrics.jsonl", "summary.json", "checkpoints/step_000000.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn default_output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "4", "--algo", "dapo"];
    args.extend_from_slice(&SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_hapo"))
        .args(&args)
        .env("HAPO_RUNS_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("dapo-seed4/metrics.jsonl").exists());
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epsilon_hgih = 0.3\n").unwrap();
    let o = hapo(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilon_hgih"), "{}", stderr(&o));

    let o = train(&dir.path().join("r2"), &["--set", "clip.epsilon_hgih=0.3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilon_hgih"));
}

#[test]
fn override_is_reflected_in_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--set", "algo=grpo"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("algo = \"grpo\""), "{snapshot}");
    // every default is written out
    assert!(snapshot.contains("eps_high = 0.28"));
    assert!(snapshot.contains("tau = 0.05"));
}

#[test]
fn ablate_empty_flags_matches_dapo() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--flags", "", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    let o = hapo(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let dapo = dir.path().join("dapo");
    assert!(train(&dapo, &["--algo", "dapo"]).status.success());
    let a = std::fs::read(dir.path().join("ablate-none-seed0/metrics.jsonl")).unwrap();
    let b = std::fs::read(dapo.join("metrics.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_component_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--flags", "CD", "--flags", "ABCD", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(&SMALL);
    let o = hapo(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let cd = std::fs::read_to_string(dir.path().join("ablate-CD-seed0/config.toml")).unwrap();
    assert!(cd.contains("hapo_components = \"CD\""));
    let full = dir.path().join("hapo");
    assert!(train(&full, &["--algo", "hapo"]).status.success());
    assert_eq!(
        std::fs::read(dir.path().join("ablate-ABCD-seed0/metrics.jsonl")).unwrap(),
        std::fs::read(full.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn ablate_rejects_bad_letter() {
    let dir = tempfile::tempdir().unwrap();
    let o = hapo(&["ablate", "--flags", "AX", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains('X'));
}

#[test]
fn analyze_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train(&run, &["--set", "trace=true"]).status.success());
    let trace = run.join("trace.jsonl");
    for report in ["clip_patterns", "ratio_entropy", "dual_entropy", "entropy_landscape"] {
        let out = dir.path().join(format!("{report}.csv"));
        let o = hapo(&["analyze", "--trace", trace.to_str().unwrap(), "--report", report, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{report}: {}", stderr(&o));
        let first = std::fs::read_to_string(&out).unwrap();
        assert!(first.starts_with(&format!("# report: {report}")));
        hapo(&["analyze", "--trace", trace.to_str().unwrap(), "--report", report, "--out", out.to_str().unwrap()]);
        assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
    }
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = hapo(&["analyze", "--trace", empty.to_str().unwrap(), "--report", "dual_entropy", "--out", "/dev/null"]);
    assert!(!o.status.success());
    let o = hapo(&["analyze", "--trace", trace.to_str().unwrap(), "--report", "histogram", "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &[]).status.success());
    assert!(train(&b, &[]).status.success());
    let o = hapo(&["compare", b.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with(&a.display().to_string()));
    let tail = |r: &str| r.split_once(',').unwrap().1.to_string();
    assert_eq!(tail(rows[0]), tail(rows[1]));

    let missing = dir.path().join("missing");
    std::fs::create_dir(&missing).unwrap();
    let o = hapo(&["compare", a.to_str().unwrap(), missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(&missing.display().to_string()));
}
