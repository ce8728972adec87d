use std::path::Path;
use std::process::{Command, Output};

fn vred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vred"))
        .args(args)
        .output()
        .expect("spawn vred")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let o = vred(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(vred(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vred(&["encode", "--model", "x"]).status.code(), Some(1));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ckpt");
    let o = vred(&[
        "decode",
        "--model",
        p(&missing),
        "--in",
        "x.vred",
        "--out",
        "y.wav",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.ckpt"), "{}", stderr(&o));

    let o = vred(&[
        "--preset",
        "tiny",
        "pretrain",
        "--in",
        p(&missing),
        "--out",
        "m.ckpt",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.ckpt"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "preset = \"tiny\"\nlearning_rate = 3\n").unwrap();
    let o = vred(&[
        "--config",
        p(&cfg),
        "gen-corpus",
        "--out",
        p(dir.path()),
        "--files",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn later_stages_require_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = vred(&[
        "--preset",
        "tiny",
        "train-vred",
        "--in",
        p(dir.path()),
        "--out",
        "m.ckpt",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn staged_training_encode_decode_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    let run = |args: &[&str]| {
        let mut full = vec!["--preset", "tiny", "--seed", "3"];
        full.extend_from_slice(args);
        let o = vred(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&[
        "gen-corpus",
        "--out",
        p(&corpus),
        "--files",
        "2",
        "--seconds",
        "0.1",
    ]);
    let (s1, s2, s3) = (d.join("s1.ckpt"), d.join("s2.ckpt"), d.join("s3.ckpt"));
    let csv = d.join("s1.csv");
    run(&[
        "pretrain",
        "--in",
        p(&corpus),
        "--out",
        p(&s1),
        "--epochs",
        "3",
        "--csv",
        p(&csv),
    ]);
    let metrics = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,stage,loss,kl,loglik,lr\n"));
    assert!(d.join("s1.timing.csv").exists());
    run(&[
        "train-vred",
        "--model",
        p(&s1),
        "--in",
        p(&corpus),
        "--out",
        p(&s2),
        "--epochs",
        "2",
    ]);
    run(&[
        "finetune",
        "--model",
        p(&s2),
        "--in",
        p(&corpus),
        "--out",
        p(&s3),
        "--epochs",
        "2",
    ]);

    let wav = corpus.join("corpus_000.wav");
    let stream = d.join("a.vred");
    run(&[
        "encode",
        "--model",
        p(&s3),
        "--in",
        p(&wav),
        "--out",
        p(&stream),
    ]);
    run(&[
        "decode",
        "--model",
        p(&s3),
        "--in",
        p(&stream),
        "--out",
        p(&d.join("a.wav")),
    ]);

    // A stream is bound to the checkpoint that produced it.
    let o = vred(&[
        "decode",
        "--model",
        p(&s2),
        "--in",
        p(&stream),
        "--out",
        p(&d.join("b.wav")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("digest"), "{}", stderr(&o));
    run(&[
        "decode",
        "--model",
        p(&s2),
        "--in",
        p(&stream),
        "--out",
        p(&d.join("b.wav")),
        "--force-digest-mismatch",
    ]);

    let eval = d.join("eval.csv");
    run(&[
        "eval",
        "--model",
        p(&s3),
        "--in",
        p(&corpus),
        "--csv",
        p(&eval),
    ]);
    let table = std::fs::read_to_string(&eval).unwrap();
    assert!(table.starts_with("file,sdr_db\n"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn gen_corpus_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        let o = vred(&[
            "--seed",
            seed,
            "gen-corpus",
            "--out",
            p(&out),
            "--files",
            "1",
            "--seconds",
            "0.05",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("corpus_000.wav")).unwrap()
    };
    assert_eq!(gen("a", "1"), gen("b", "1"));
    assert_ne!(gen("a", "1"), gen("c", "2"));
}

#[test]
fn gradcheck_reports_and_exits_zero() {
    let o = vred(&["gradcheck", "--seeds", "1", "--stage", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(
        out.contains("objective.stage3") && out.contains("0 failed"),
        "{out}"
    );
    assert_eq!(vred(&["gradcheck", "--stage", "1"]).status.code(), Some(1));
}
