use std::fs;
use std::path::Path;

use amer_cli::{run, verify_manifest};

const SMALL: &[&str] = &[
    "--set",
    "data.dim=16",
    "--set",
    "model.dim=16",
    "--set",
    "model.hidden=32",
    "--set",
    "data.n_train=200",
    "--set",
    "data.n_test=20",
    "--set",
    "data.corpus_size=2000",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.checkpoint_every=5",
];

fn amer(args: &[&str]) -> i32 {
    let mut all = vec!["amer"];
    all.extend_from_slice(args);
    run(all)
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(out: &Path, seed: &str) {
    assert_eq!(
        amer(&with_small(&["gen-data", "--seed", seed, "--out", p(out)])),
        0
    );
}

#[test]
fn exit_codes() {
    assert_eq!(amer(&["--help"]), 0);
    assert_eq!(amer(&["--version"]), 0);
    assert_eq!(amer(&["frobnicate"]), 1);
    assert_eq!(amer(&["train"]), 1);
    assert_eq!(
        amer(&["gen-data", "--set", "train.bogus=1", "--out", "/tmp/never"]),
        2
    );
    assert_eq!(amer(&["build-index", "--data", "/definitely/not/here"]), 2);
}

#[test]
fn missing_checkpoint_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "1");
    let out = dir.path().join("eval");
    let code = amer(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&dir.path().join("none.ckpt")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 2);
    assert!(!out.join("report.toml").exists());
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    gen(&a, "5");
    gen(&b, "5");
    gen(&c, "6");
    for f in [
        "train.ds",
        "val.ds",
        "test.ds",
        "corpus.bin",
        "transforms.bin",
        "config.cfg",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("train.ds")).unwrap(),
        fs::read(c.join("train.ds")).unwrap()
    );
    let m = verify_manifest(&a).unwrap();
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seeds.data, 5);
    assert_eq!(m.outputs.len(), 6);
}

#[test]
fn tampered_output_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2");
    verify_manifest(&data).unwrap();
    let mut bytes = fs::read(data.join("corpus.bin")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(data.join("corpus.bin"), bytes).unwrap();
    assert!(verify_manifest(&data).is_err());
}

#[test]
fn training_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "3");
    let mut ckpts = Vec::new();
    for threads in ["1", "3", "1"] {
        let out = dir.path().join(format!("run{}", ckpts.len()));
        let args = with_small(&[
            "train",
            "--data",
            p(&data),
            "--steps",
            "12",
            "--threads",
            threads,
            "--out",
            p(&out),
        ]);
        assert_eq!(amer(&args), 0);
        verify_manifest(&out).unwrap();
        ckpts.push((
            fs::read(out.join("model.ckpt")).unwrap(),
            fs::read(out.join("train_log.csv")).unwrap(),
        ));
    }
    assert!(ckpts.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn eval_run_file_rescores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4");
    let run_dir = dir.path().join("run");
    let args = with_small(&[
        "train",
        "--data",
        p(&data),
        "--mode",
        "single-query",
        "--steps",
        "6",
        "--out",
        p(&run_dir),
    ]);
    assert_eq!(amer(&args), 0);

    let ev = dir.path().join("eval");
    let ckpt = run_dir.join("model.ckpt");
    assert_eq!(
        amer(&[
            "eval",
            "--data",
            p(&data),
            "--checkpoint",
            p(&ckpt),
            "--out",
            p(&ev)
        ]),
        0
    );
    let report = fs::read_to_string(ev.join("report.toml")).unwrap();
    assert!(report.contains("mode = \"single-query\""));
    verify_manifest(&ev).unwrap();

    let an = dir.path().join("an");
    let code = amer(&[
        "analyze",
        "--run",
        p(&ev.join("run.txt")),
        "--targets",
        p(&ev.join("targets.txt")),
        "--corpus",
        p(&data),
        "--out",
        p(&an),
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        fs::read(ev.join("report.csv")).unwrap(),
        fs::read(an.join("report.csv")).unwrap()
    );

    let mmr = dir.path().join("mmr");
    let code = amer(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--mode",
        "single-query-mmr",
        "--out",
        p(&mmr),
    ]);
    assert_eq!(code, 0);
    assert!(fs::read_to_string(mmr.join("report.toml"))
        .unwrap()
        .contains("mmr_lambda"));

    let rr = dir.path().join("rr");
    let code = amer(&[
        "rerank",
        "--run",
        p(&ev.join("run.txt")),
        "--corpus",
        p(&data.join("corpus.bin")),
        "--lambda",
        "0.5",
        "--k",
        "10",
        "--out",
        p(&rr),
    ]);
    assert_eq!(code, 0);
    let lines = fs::read_to_string(rr.join("reranked.run")).unwrap();
    assert_eq!(lines.lines().count(), 20 * 10);
}

#[test]
fn analyze_bins_every_query_twice() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "7");
    let out = dir.path().join("bins");
    assert_eq!(
        amer(&with_small(&[
            "analyze",
            "--data",
            p(&data),
            "--split",
            "test",
            "--out",
            p(&out)
        ])),
        0
    );
    let csv = fs::read_to_string(out.join("bins.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 20);
    assert_eq!(amer(&["analyze", "--out", p(&out)]), 1);
}
