use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
run_id = "tiny"
objective = "hybrid-outputs-mse"

[model]
vocab_size = 32
d_model = 16
n_layers = 1
n_heads = 2
mlp_width = 32
max_t = 32

[attention]
window = 4
sink_count = 1

[train]
pretrain_epochs = 1
transfer_epochs = 1
finetune_epochs = 1
batch_size = 4
grad_accum = 2
transfer_eval_examples = 4

[ssd]
dropout_per_epoch = [0.9, 0.75, 0.5]
window_per_epoch = [4]

[[tasks]]
kind = "assoc-recall"
length = 14
n_examples = 12

[[tasks]]
kind = "copy"
length = 12
n_examples = 12
"#;

fn hafx(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hafx"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HAFX_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = workdir();
    for args in [&["frobnicate"][..], &["bench", "--bogus"], &[]] {
        let out = hafx(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = workdir();
    std::fs::write(dir.path().join("bad.cfg"), "[attention]\ng = 1.5\n").unwrap();
    let out = hafx(&["transfer", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2: g:"), "{err}");

    let out = hafx(&["finetune", "--config", "tiny.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = hafx(&["eval", "--ckpt", "missing.hafx"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_emits_its_csv() {
    let dir = workdir();
    let csv = ok(&hafx(&["bench", "--T", "16,32", "--reps", "3"], dir.path()));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "path,T,median_ms,aux_bytes");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("streaming-la,16,"));
    assert!(lines[4].starts_with("quadratic-softmax,32,"));
}

#[test]
fn pipeline_outputs_follow_the_golden_schema() {
    let dir = workdir();
    let d = dir.path();
    ok(&hafx(&["transfer", "--config", "tiny.cfg"], d));
    let run = d.join("out/tiny");
    for f in ["base.hafx", "post-transfer.hafx", "reports.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = ok(&hafx(
        &[
            "ablate",
            "--config",
            "tiny.cfg",
            "--ckpt",
            "out/tiny/post-transfer.hafx",
            "--base",
            "out/tiny/base.hafx",
            "--modes",
            "all",
        ],
        d,
    ));
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/ablate_tiny.csv"))
        .unwrap();
    let keys: Vec<String> = csv
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 7, "{l}");
            if i > 0 {
                let v: f64 = f[5].parse().unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
            f[..5].join(",")
        })
        .collect();
    assert_eq!(keys, golden.lines().collect::<Vec<_>>());

    ok(&hafx(&["finetune", "--config", "tiny.cfg", "--ckpt", "out/tiny/post-transfer.hafx"], d));
    ok(&hafx(&["ssd-run", "--config", "tiny.cfg", "--ckpt", "out/tiny/post-transfer.hafx"], d));
    let single = ok(&hafx(&["eval", "--config", "tiny.cfg", "--ckpt", "out/tiny/post-finetune.hafx"], d));
    assert_eq!(single.lines().count(), 1 + 3);
    assert!(single.lines().nth(1).unwrap().starts_with("tiny,post-finetune,full-hybrid,assoc-recall,accuracy,"));

    let out = run.join("eval.csv");
    for _ in 0..2 {
        ok(&hafx(
            &["eval", "--config", "tiny.cfg", "--ckpt", "out/tiny/post-ssd.hafx", "--out", out.to_str().unwrap()],
            d,
        ));
    }
    let appended = std::fs::read_to_string(&out).unwrap();
    assert_eq!(appended.lines().count(), 1 + 2 * 3);
    assert_eq!(appended.matches("run_id").count(), 1);

    ok(&hafx(&["hedgecats", "--config", "tiny.cfg", "--ckpt", "out/tiny/base.hafx"], d));
    assert!(run.join("hedgecats-stage1.hafx").exists());
    assert!(run.join("hedgecats-selected.hafx").exists());

    let summary = ok(&hafx(&["report", out.to_str().unwrap(), run.join("reports.jsonl").to_str().unwrap()], d));
    assert!(summary.contains("full-hybrid"));
    assert!(summary.contains("transfer"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = workdir();
    let d = dir.path();
    let mut csvs = vec![];
    for out_dir in ["a", "b"] {
        ok(&hafx(&["transfer", "--config", "tiny.cfg", "--out-dir", out_dir], d));
        let ckpt = format!("{out_dir}/tiny/post-transfer.hafx");
        csvs.push(ok(&hafx(&["ablate", "--config", "tiny.cfg", "--ckpt", &ckpt], d)));
    }
    assert_eq!(csvs[0], csvs[1]);
    for f in ["base.hafx", "post-transfer.hafx"] {
        let a = std::fs::read(d.join("a/tiny").join(f)).unwrap();
        let b = std::fs::read(d.join("b/tiny").join(f)).unwrap();
        assert!(a == b, "{f}");
    }
}

#[test]
fn output_dir_follows_the_environment() {
    let dir = workdir();
    let out = Command::new(env!("CARGO_BIN_EXE_hafx"))
        .args(["transfer", "--config", "tiny.cfg"])
        .current_dir(dir.path())
        .env("HAFX_OUT_DIR", "elsewhere")
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("elsewhere/tiny/post-transfer.hafx").exists());
}
