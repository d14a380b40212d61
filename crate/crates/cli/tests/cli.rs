use std::path::{Path, PathBuf};
use std::process::Command;

const TINY: &str = include_str!("../../../configs/smoke.toml");

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Run {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vlmir"));
        cmd.current_dir(self.path())
            .args(args)
            .env_remove("VLMIR_SEED")
            .env_remove("VLMIR_DEVICE");
        for (k, v) in env {
            cmd.env(k, v);
        }
        let out = cmd.output().unwrap();
        Run {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    fn run(&self, args: &[&str]) -> Run {
        self.run_env(args, &[])
    }

    /// Runs a command that must succeed and returns the path on its last
    /// stdout line.
    fn ok(&self, args: &[&str]) -> PathBuf {
        let r = self.run(args);
        assert_eq!(r.code, 0, "{args:?} failed:\n{}", r.stderr);
        self.path().join(r.stdout.lines().last().unwrap().trim())
    }

    fn synth(&self, extra: &[&str]) -> PathBuf {
        let mut args = vec!["synth", "-c", "tiny.toml"];
        args.extend_from_slice(extra);
        self.ok(&args)
    }

    fn captioned(&self) -> PathBuf {
        let m = self.synth(&[]);
        self.ok(&["caption", "-c", "tiny.toml", "--manifest", s(&m)])
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["synth", "--tasks", "fog"]).code, 2);
    assert_eq!(ws.run(&["synth", "--bogus-flag"]).code, 2);
    std::fs::write(ws.path().join("bad.toml"), "bogus = 1\n").unwrap();
    let r = ws.run(&["synth", "-c", "bad.toml"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("bogus"), "{}", r.stderr);
    let r = ws.run_env(&["synth", "-c", "tiny.toml"], &[("VLMIR_DEVICE", "cuda")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("VLMIR_DEVICE"), "{}", r.stderr);
}

#[test]
fn runtime_failures_exit_with_one() {
    let ws = Workspace::new();
    let r = ws.run(&[
        "eval",
        "-c",
        "tiny.toml",
        "--manifest",
        "missing.json",
        "--restored",
        ".",
    ]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stderr.contains("missing.json"));
}

#[test]
fn synth_respects_tasks_and_snapshots_the_config() {
    let ws = Workspace::new();
    let m = ws.synth(&["--tasks", "haze", "--split", "test"]);
    let json = manifest_json(&m);
    let records = json["records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r["degradation"] == "haze"));
    assert_eq!(json["split"], "test");
    let run = m.parent().unwrap();
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 3"), "{snapshot}");
    assert!(run.join("invocation.json").is_file());
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("synth_"));
}

#[test]
fn env_seed_overrides_the_config() {
    let ws = Workspace::new();
    let r = ws.run_env(&["synth", "-c", "tiny.toml"], &[("VLMIR_SEED", "77")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let m = ws.path().join(r.stdout.trim());
    let snapshot = std::fs::read_to_string(m.parent().unwrap().join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 77"), "{snapshot}");
}

#[test]
fn captioning_fills_every_record_and_reuses_its_cache() {
    let ws = Workspace::new();
    let m = ws.synth(&[]);
    ws.ok(&["caption", "-c", "tiny.toml", "--manifest", s(&m)]);
    let json = manifest_json(&m);
    for r in json["records"].as_array().unwrap() {
        assert!(r["gt_caption"].is_string() && r["lq_caption"].is_string(), "{r}");
    }

    let r = ws.run(&["caption", "-c", "tiny.toml", "--manifest", s(&m)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let stats = std::fs::read_dir(ws.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path().join("caption_stats.json"))
        .filter(|p| p.is_file())
        .map(|p| manifest_json(&p))
        .find(|j| j["cache_hits"].as_u64().unwrap() > 0 && j["provider_calls"] == 0);
    assert!(stats.is_some(), "second run called the provider");
    assert_eq!(manifest_json(&m), json);
}

#[test]
fn unreachable_caption_endpoint_leaves_the_manifest_untouched() {
    let ws = Workspace::new();
    let m = ws.synth(&[]);
    let before = std::fs::read(&m).unwrap();
    std::fs::write(
        ws.path().join("remote.toml"),
        format!("{TINY}\n[caption]\ntimeout_secs = 0.5\nretries = 0\n"),
    )
    .unwrap();
    let r = ws.run(&[
        "caption",
        "-c",
        "remote.toml",
        "--manifest",
        s(&m),
        "--provider",
        "remote",
        "--endpoint",
        "http://127.0.0.1:9/caption",
    ]);
    assert_ne!(r.code, 0);
    assert_eq!(std::fs::read(&m).unwrap(), before);
}

#[test]
fn remote_provider_needs_an_endpoint() {
    let ws = Workspace::new();
    let m = ws.synth(&[]);
    let r = ws.run(&[
        "caption",
        "-c",
        "tiny.toml",
        "--manifest",
        s(&m),
        "--provider",
        "remote",
    ]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn pipeline_restores_and_evaluates() {
    let ws = Workspace::new();
    let m = ws.captioned();
    let s1 = ws.ok(&["train-stage1", "-c", "tiny.toml", "--manifest", s(&m)]);
    let s2 = ws.ok(&[
        "train-stage2",
        "-c",
        "tiny.toml",
        "--manifest",
        s(&m),
        "--stage1",
        s(&s1),
    ]);
    assert!(s2.parent().unwrap().join("loss_log.csv").is_file());

    let lq_dir = m.parent().unwrap().join("lq");
    let restored = ws.ok(&[
        "restore",
        "-c",
        "tiny.toml",
        "--stage1",
        s(&s1),
        "--stage2",
        s(&s2),
        "--input",
        s(&lq_dir),
        "--captions",
        s(&m),
    ]);
    let n = std::fs::read_dir(&restored).unwrap().count();
    assert_eq!(n, 12);
    let labels = manifest_json(&restored.parent().unwrap().join("predicted_labels.json"));
    assert_eq!(labels.as_object().unwrap().len(), 12);

    // Eval needs one file per record id.
    let ids: Vec<String> = manifest_json(&m)["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap().to_owned())
        .collect();
    let r = ws.run(&[
        "eval",
        "-c",
        "tiny.toml",
        "--manifest",
        s(&m),
        "--restored",
        s(&restored),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("psnr"));
    let missing = ws.path().join("partial");
    std::fs::create_dir(&missing).unwrap();
    std::fs::copy(
        restored.join(format!("{}.png", ids[0])),
        missing.join(format!("{}.png", ids[0])),
    )
    .unwrap();
    let r = ws.run(&[
        "eval",
        "-c",
        "tiny.toml",
        "--manifest",
        s(&m),
        "--restored",
        s(&missing),
    ]);
    assert_eq!(r.code, 1);
    assert!(
        r.stderr.contains(&ids[1]) && !r.stderr.contains(&format!("{}, ", ids[0])),
        "{}",
        r.stderr
    );

    let one = lq_dir.join(format!("{}.png", ids[0]));
    let single = ws.ok(&[
        "restore",
        "-c",
        "tiny.toml",
        "--stage1",
        s(&s1),
        "--stage2",
        s(&s2),
        "--input",
        s(&one),
        "--text-mode",
        "null",
        "--trace",
    ]);
    assert!(single.join(format!("{}.png", ids[0])).is_file());
    assert!(single.parent().unwrap().join("traces").is_dir());

    let r = ws.run(&[
        "restore",
        "-c",
        "tiny.toml",
        "--stage1",
        s(&s1),
        "--stage2",
        s(&s2),
        "--input",
        s(&one),
        "--text-mode",
        "caption",
    ]);
    assert_eq!(r.code, 2, "caption mode without captions: {}", r.stderr);
}

#[test]
fn stage2_rejects_a_stage1_with_another_embedding_width() {
    let ws = Workspace::new();
    let m = ws.captioned();
    let s1 = ws.ok(&["train-stage1", "-c", "tiny.toml", "--manifest", s(&m)]);
    std::fs::write(
        ws.path().join("wide.toml"),
        TINY.replace("cond_dim = 16", "cond_dim = 32"),
    )
    .unwrap();
    let r = ws.run(&[
        "train-stage2",
        "-c",
        "wide.toml",
        "--manifest",
        s(&m),
        "--stage1",
        s(&s1),
    ]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("cond_dim"), "{}", r.stderr);
}
