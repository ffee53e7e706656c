use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdmprune"))
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

/// Small budgets so each invocation finishes in a second or two.
const FAST: &[&str] = &[
    "--set",
    "corpus.size=6000",
    "--set",
    "pretrain.max_steps=6",
    "--set",
    "finetune.max_steps=3",
    "--set",
    "calibration.num_sequences=8",
    "--set",
    "calibration.batch_size=4",
];

fn run(args: &[&str], out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(shipped_config())
        .args(FAST)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn bytes(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn missing_config_file_exits_2_and_names_path() {
    let o = bin()
        .args(["pretrain", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/not/here.toml"));
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["pretrain", "--set", "pretrain.lr=-1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["pretrain", "--criterion", "bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["pretrain", "--set", "pretrain.lr=1e300", "--set", "pretrain.max_steps=20"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn config_dump_round_trips_through_the_binary() {
    let o = bin().args(["config", "dump"]).output().unwrap();
    ok(&o);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("dumped.toml");
    std::fs::write(&p, &o.stdout).unwrap();
    let again = bin().args(["config", "dump", "--config"]).arg(&p).output().unwrap();
    ok(&again);
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn seed_flag_changes_only_the_run_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["pretrain"], &a));
    ok(&run(&["pretrain", "--seed", "9"], &b));
    let ca = String::from_utf8(bytes(a.join("effective_config.toml"))).unwrap();
    let cb = String::from_utf8(bytes(b.join("effective_config.toml"))).unwrap();
    let diff: Vec<_> = ca.lines().zip(cb.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(diff, vec![("seed = 0", "seed = 9")]);
}

#[test]
fn pipeline_is_deterministic_and_rho_zero_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for tag in ["a", "b"] {
        let root = d.join(tag);
        ok(&run(&["pretrain"], &root.join("pre")));
        let base = root.join("pre/base.ckpt");
        let base = base.to_str().unwrap();
        ok(&run(&["prune", "--base", base], &root.join("prune")));
        let pruned = root.join("prune/pruned.ckpt");
        ok(&run(&["finetune", "--model", pruned.to_str().unwrap()], &root.join("ft")));
        ok(&run(&["prune", "--base", base, "--ratio", "0"], &root.join("zero")));
    }
    for f in [
        "pre/base.ckpt",
        "pre/pretrain_loss.csv",
        "prune/pruned.ckpt",
        "prune/scores_stage1.csv",
        "prune/scores_stage2.csv",
        "prune/retained.csv",
        "ft/finetuned.ckpt",
        "ft/finetune_loss.csv",
    ] {
        assert_eq!(bytes(d.join("a").join(f)), bytes(d.join("b").join(f)), "{f} differs between runs");
    }
    assert_eq!(bytes(d.join("a/zero/pruned.ckpt")), bytes(d.join("a/pre/base.ckpt")));

    let manifest = String::from_utf8(bytes(d.join("a/prune/manifest.txt"))).unwrap();
    assert!(manifest.starts_with("command prune\ninput "));
    assert!(manifest.contains(" pruned.ckpt\n"));
}

#[test]
fn eval_reports_every_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(&["pretrain"], &d.join("pre")));
    let base = d.join("pre/base.ckpt");
    ok(&run(&["prune", "--base", base.to_str().unwrap(), "--ratio", "0.2"], &d.join("prune")));
    let o = run(
        &[
            "eval",
            "--model",
            base.to_str().unwrap(),
            "--model",
            d.join("prune/pruned.ckpt").to_str().unwrap(),
        ],
        &d.join("eval"),
    );
    ok(&o);
    let mut r = csv::Reader::from_path(d.join("eval/eval.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    let params: Vec<u64> = rows.iter().map(|x| x[1].parse().unwrap()).collect();
    assert!(params[1] < params[0]);
    for row in &rows {
        let ppl: f64 = row[3].parse().unwrap();
        assert!(ppl.is_finite() && ppl > 1.0);
    }
}

#[test]
fn oracle_on_shipped_config_reports_rank_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(&["pretrain"], &d.join("pre")));
    let o = run(
        &["oracle", "--base", d.join("pre/base.ckpt").to_str().unwrap(), "--set", "calibration.seq_len=32"],
        &d.join("oracle"),
    );
    ok(&o);
    let report = String::from_utf8(bytes(d.join("oracle/oracle_report.txt"))).unwrap();
    let rho: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("spearman_all: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((-1.0..=1.0).contains(&rho));
    for f in ["scores_taylor_hard.csv", "scores_oracle.csv"] {
        let n = csv::Reader::from_path(d.join("oracle").join(f)).unwrap().records().count();
        assert_eq!(n, 128, "{f}");
    }
}

#[test]
fn grid_resumes_without_recomputing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(&["pretrain"], &d.join("pre")));
    let base = d.join("pre/base.ckpt");
    let args = [
        "grid",
        "--base",
        base.to_str().unwrap(),
        "--set",
        "grid.seeds=[0]",
        "--set",
        "grid.alphas=[0.0, 0.5]",
    ];
    ok(&run(&args, &d.join("grid")));
    let first = bytes(d.join("grid/grid.csv"));
    ok(&run(&args, &d.join("grid")));
    assert_eq!(first, bytes(d.join("grid/grid.csv")));
    assert_eq!(csv::Reader::from_reader(first.as_slice()).records().count(), 2);
}
