use std::path::Path;

use amtl::cli::run_with;
use amtl::eval::EvalReport;

const SMALL: &[&str] = &[
    "--set", "layers=1",
    "--set", "hidden=16",
    "--set", "heads=2",
    "--set", "ffn=32",
    "--set", "lr=1e-3",
    "--set", "max_steps=12",
    "--set", "batch=4",
    "--set", "corpus_size=120",
    "--set", "heldout_size=30",
    "--set", "policy.samples=40",
    "--set", "policy.epochs=1",
];

fn call(args: &[&str], stdin: &str) -> (i32, String, String) {
    let argv: Vec<String> = std::iter::once("amtl")
        .chain(args.iter().copied())
        .map(String::from)
        .collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(&argv, &mut stdin.as_bytes(), &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn call_ok(args: &[&str], stdin: &str) -> String {
    let (code, out, err) = call(args, stdin);
    assert_eq!(code, 0, "{args:?}\n{err}");
    out
}

fn train(out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    call_ok(&args, "");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    train(&a, &[]);
    train(&b, &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(dir.path().join("a.ckpt.log.csv")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("epoch,step,")));
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    train(&ckpt, &["--phase", "amtl"]);
    let trained = EvalReport::read_metrics(&dir.path().join("m.ckpt.metrics.txt")).unwrap();

    let out = dir.path().join("eval.txt");
    let mut args = vec![
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--quick",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    call_ok(&args, "");
    let again = EvalReport::read_metrics(&out).unwrap();
    assert!(!trained.is_empty());
    assert_eq!(trained, again);
}

#[test]
fn correct_handles_empty_and_blank_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    train(&ckpt, &[]);
    let m = ckpt.to_str().unwrap();
    assert_eq!(call_ok(&["correct", "--model", m], ""), "");
    let out = call_ok(&["correct", "--model", m], "abc\n\nbcd\textra\n");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].is_empty());

    let (code, _, err) = call(&["correct", "--model", m], "a?c\n");
    assert_eq!(code, 3);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn policy_pipeline_and_fast_correction() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let pol = dir.path().join("p.ckpt");
    let cache = dir.path().join("sup.txt");
    train(&ckpt, &[]);
    let mut args = vec![
        "train-policy",
        "--model",
        ckpt.to_str().unwrap(),
        "--out",
        pol.to_str().unwrap(),
        "--cache",
        cache.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let first = call_ok(&args, "");
    assert!(first.contains("policy epoch 0"));
    assert!(cache.exists());
    // A second run reads the cache and lands on the same weights.
    let pol2 = dir.path().join("p2.ckpt");
    args[4] = pol2.to_str().unwrap();
    call_ok(&args, "");
    assert_eq!(std::fs::read(&pol).unwrap(), std::fs::read(&pol2).unwrap());

    let out = call_ok(
        &[
            "correct",
            "--model",
            ckpt.to_str().unwrap(),
            "--policy",
            pol.to_str().unwrap(),
            "--fast",
            "--explain",
        ],
        "abcde\n",
    );
    let cols: Vec<&str> = out.trim_end().split('\t').collect();
    assert_eq!(cols.len(), 4, "{out}");
    assert!(cols[1].starts_with("span="), "{out}");
}

#[test]
fn generated_pairs_round_trip_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    call_ok(
        &["gen-corpus", "--out", pairs.to_str().unwrap(), "--n", "20", "--pairs"],
        "",
    );
    let text = std::fs::read_to_string(&pairs).unwrap();
    assert!(text.starts_with("#amtl"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 20);

    let ckpt = dir.path().join("m.ckpt");
    train(&ckpt, &[]);
    let out = call_ok(
        &[
            "eval",
            "--model",
            ckpt.to_str().unwrap(),
            "--pairs",
            pairs.to_str().unwrap(),
            "--quick",
        ],
        "",
    );
    assert!(out.contains("20"), "{out}");
}

#[test]
fn config_file_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nhidden=16\nheads=2\n").unwrap();
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("c.txt");
    let (code, _, err) = call(
        &["gen-corpus", "--config", c, "--out", out.to_str().unwrap(), "--n", "5"],
        "",
    );
    assert_eq!(code, 0);
    assert!(err.contains("# hidden=16"), "{err}");

    std::fs::write(&cfg, "hiden=16\n").unwrap();
    let (code, _, err) = call(&["gen-corpus", "--config", c, "--out", "x"], "");
    assert_eq!(code, 2);
    assert!(err.contains("hiden"));
}
