use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy100.smi");

fn mgmlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgmlab"))
        .current_dir(dir)
        .env_remove("MGMLAB_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn short_config(dir: &Path) {
    std::fs::write(dir.join("run.toml"), "[train]\nepochs = 3\nbatch_size = 16\n").unwrap();
}

#[test]
fn pretrain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    short_config(dir.path());
    for out in ["a", "b"] {
        let o = mgmlab(dir.path(), &["--config", "run.toml", "--seed", "3", "--out", out, "pretrain", TOY]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |out: &str, f: &str| std::fs::read(dir.path().join(out).join(f)).unwrap();
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    assert_eq!(read("a", "checkpoint.bin"), read("b", "checkpoint.bin"));
    let echoed = String::from_utf8(read("a", "config.toml")).unwrap();
    assert!(echoed.contains("seed = 3") && echoed.contains("epochs = 3"));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[train]\nepochs = 1\nseed = 1\n").unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mgmlab"));
        cmd.current_dir(dir.path()).env_remove("MGMLAB_SEED");
        if let Some(s) = env {
            cmd.env("MGMLAB_SEED", s);
        }
        cmd.args(["--config", "run.toml", "--out", out]);
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.args(["pretrain", TOY]).status().unwrap().success());
        std::fs::read_to_string(dir.path().join(out).join("config.toml")).unwrap()
    };
    assert!(run(None, None, "a").contains("seed = 1\n"));
    assert!(run(Some("2"), None, "b").contains("seed = 2\n"));
    assert!(run(Some("2"), Some("5"), "c").contains("seed = 5\n"));
}

#[test]
fn probe_reads_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    short_config(dir.path());
    assert!(mgmlab(dir.path(), &["--config", "run.toml", "--out", "o", "pretrain", TOY]).status.success());
    let o = mgmlab(dir.path(), &["probe", "--checkpoint", "o/checkpoint.bin", TOY]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("metric: accuracy = "));
    assert!(text.contains("baseline: majority = "));
}

#[test]
fn census_counts_every_node() {
    let dir = tempfile::tempdir().unwrap();
    let o = mgmlab(dir.path(), &["--out", "c", "census", TOY]);
    assert!(o.status.success());
    let subtrees = std::fs::read_to_string(dir.path().join("c/subtrees.csv")).unwrap();
    let atoms = std::fs::read_to_string(dir.path().join("c/atoms.csv")).unwrap();
    let total = |csv: &str| -> usize {
        csv.lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
            .sum()
    };
    assert_eq!(total(&subtrees), total(&atoms));
    assert!(subtrees.trim_end().ends_with(&format!("total={}", total(&atoms))));
}

#[test]
fn fragment_and_tokenize_print_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = mgmlab(dir.path(), &["fragment", "--recipe", "cycles > remaining_nodes", TOY]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split('\t').count() == 4));
    let o = mgmlab(dir.path(), &["tokenize", "--with", "node", TOY]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stdout.is_empty());
}

#[test]
fn gradcheck_passes() {
    let o = mgmlab(Path::new("."), &["gradcheck", "--instances", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("pipeline/v2/ce"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mgmlab(dir.path(), &["bogus"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    assert_eq!(mgmlab(dir.path(), &["--config", "bad.toml", "census", TOY]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.smi"), "C1CC(\n").unwrap();
    let o = mgmlab(dir.path(), &["parse", "bad.smi"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(mgmlab(dir.path(), &["census", "missing.smi"]).status.code(), Some(2));
}
