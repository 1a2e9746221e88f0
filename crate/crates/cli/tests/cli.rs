use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run in seconds
len = 8
motif = TATA
pwm_width = 3
steps = 16
width = 8
depth = 1
n_train = 400
n_holdout = 100
pretrain_epochs = 1
iterations = 2
batch_size = 4
truncation = 4
n_eval = 32
likelihood_draws = 2
n_reference = 200
value_rollouts = 50
value_epochs = 1
smc_particles = 8
cfg_n_train = 400
cfg_epochs = 1
cfg_quantile = 0.9
seeds = 0
";

fn drakes(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_drakes"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.code().is_some(),
        "killed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = drakes(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn records(fasta: &str) -> Vec<&str> {
    fasta.lines().filter(|l| !l.starts_with('>')).collect()
}

#[test]
fn pretrain_finetune_sample_guide_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.conf"), TINY).unwrap();
    let c = ["--config", "tiny.conf"];

    ok(dir, &[&["pretrain"][..], &c, &["--out", "pre.ckpt"]].concat());
    assert!(dir.join("pre.ckpt").exists());
    let log = fs::read_to_string(dir.join("pre.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,holdout_loss\n"));

    ok(
        dir,
        &[
            &["finetune"][..],
            &c,
            &["--pretrained", "pre.ckpt", "--out", "ft.ckpt", "--alpha", "0.01"],
        ]
        .concat(),
    );
    let metrics = fs::read_to_string(dir.join("ft.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let fasta = ok(
        dir,
        &[
            "sample",
            "--checkpoint",
            "ft.ckpt",
            "--n-samples",
            "5",
            "--trajectories",
            "t.jsonl",
        ],
    );
    let seqs = records(&fasta);
    assert_eq!(seqs.len(), 5);
    assert!(seqs
        .iter()
        .all(|s| s.len() == 8 && s.chars().all(|c| "ACGT".contains(c))));
    let traj = fs::read_to_string(dir.join("t.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), 5 * 17);
    let first: serde_json::Value = serde_json::from_str(traj.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);

    for method in ["cg", "smc", "tds", "cfg"] {
        let out = format!("{method}.fa");
        ok(
            dir,
            &[
                &["guide"][..],
                &c,
                &["--method", method, "--pretrained", "pre.ckpt", "--out", &out],
            ]
            .concat(),
        );
        assert_eq!(
            records(&fs::read_to_string(dir.join(&out)).unwrap()).len(),
            32,
            "{method}"
        );
    }

    let report = ok(
        dir,
        &[
            &["evaluate"][..],
            &c,
            &["--pretrained", "pre.ckpt", "--samples", "cg.fa"],
        ]
        .concat(),
    );
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["metrics"]["n"], 32);
    let strict = drakes(
        dir,
        &[
            &["evaluate"][..],
            &c,
            &[
                "--pretrained",
                "pre.ckpt",
                "--samples",
                "cg.fa",
                "--min-eval-reward",
                "1e9",
            ],
        ]
        .concat(),
    );
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn sampling_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.conf"), TINY).unwrap();
    ok(dir, &["pretrain", "--config", "tiny.conf", "--out", "pre.ckpt"]);
    let a = ok(
        dir,
        &["sample", "--checkpoint", "pre.ckpt", "--n-samples", "20", "--seed", "3"],
    );
    let b = ok(
        dir,
        &["sample", "--checkpoint", "pre.ckpt", "--n-samples", "20", "--seed", "3"],
    );
    let c = ok(
        dir,
        &["sample", "--checkpoint", "pre.ckpt", "--n-samples", "20", "--seed", "4"],
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn doob_guidance_on_a_single_token_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let conf =
        "len = 1\nmotif = T\npwm_width = 1\nsteps = 16\nwidth = 8\ndepth = 1\nn_train = 2000\npretrain_epochs = 2\n";
    fs::write(dir.join("one.conf"), conf).unwrap();
    ok(dir, &["pretrain", "--config", "one.conf", "--out", "one.ckpt"]);
    let args = [
        "guide",
        "--method",
        "doob",
        "--pretrained",
        "one.ckpt",
        "--steps",
        "16",
        "--n-samples",
        "4000",
    ];
    let plain = ok(dir, &[&args[..], &["--reward-values", "0,0,0,0"]].concat());
    let tilted = ok(
        dir,
        &[&args[..], &["--reward-values", "0,0,0,3", "--guide-alpha", "0.5"]].concat(),
    );
    let share = |fa: &str| records(fa).iter().filter(|s| **s == "T").count() as f64 / 4000.0;
    assert!(
        share(&tilted) > share(&plain) + 0.3,
        "{} vs {}",
        share(&tilted),
        share(&plain)
    );
}

#[test]
fn oracle_check_reports_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = ok(
        dir,
        &[
            "oracle-check",
            "--rollouts",
            "20000",
            "--particles",
            "2048",
            "--out",
            "oracle.json",
        ],
    );
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(v["pass"], true);
}

#[test]
fn compare_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.conf"), TINY).unwrap();
    let out = drakes(dir, &["compare", "--config", "tiny.conf", "--out", "cmp"]);
    assert!(
        matches!(out.status.code(), Some(0 | 1)),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "report.json",
        "manifest.json",
        "checks.json",
        "eval_reward_median.csv",
        "kmer_correlation.csv",
    ] {
        assert!(dir.join("cmp").join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.join("cmp/eval_reward_median.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("cmp/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([0]));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.conf"), "novalue\n").unwrap();
    assert_eq!(
        drakes(dir, &["pretrain", "--config", "bad.conf", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        drakes(dir, &["sample", "--checkpoint", "missing.ckpt"]).status.code(),
        Some(2)
    );
    assert_eq!(
        drakes(dir, &["pretrain", "--out", "x", "--unknown-key", "1"])
            .status
            .code(),
        Some(2)
    );
}
