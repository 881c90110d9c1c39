use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_strokeseg");

/// Small enough that training all three axes takes a few seconds.
const TINY: &str = r#"
epochs = 1
synth_cases = 4
split_ratio = 0.5

[model]
depth = 2
base_channels = 4

[synth]
extents = [12, 16, 8]
lesion_radius = [1.5, 3.0]

[pretrain]
samples = 8
epochs = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("spawn strokeseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    tmp
}

#[test]
fn full_command_chain() {
    let tmp = setup();
    let d = tmp.path();
    let base = ["--profile", "desk", "--config", "tiny.toml", "--seed", "3"];
    let with = |extra: &[&'static str]| [&base[..], extra].concat();

    let out = run(d, &with(&["--out", "data", "synth"]));
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(d.join("data/case_000/GT.nii").is_file());

    let out = run(d, &with(&["--out", "pre", "pretrain"]));
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(d.join("pre/encoder.runw").is_file());

    let out = run(
        d,
        &with(&["--out", "run", "train", "--data", "data", "--pretrained", "pre/encoder.runw", "--freeze-encoder", "--compare-scratch"]),
    );
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).starts_with("epochs=1 batch_size=4 learning_rate=0.002"), "{}", stdout(&out));
    for a in ["x", "y", "z"] {
        assert!(d.join(format!("run/model_{a}.runw")).is_file());
    }

    let out = run(d, &["--out", "pred", "predict", "--models", "run", "--cases", "data"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(d.join("pred/case_003/fused.nii").is_file());

    let out = run(d, &["--out", "fused.nii", "fuse", "pred/case_000/X.nii", "pred/case_000/Y.nii", "pred/case_000/Z.nii"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(fs::read(d.join("fused.nii")).unwrap(), fs::read(d.join("pred/case_000/fused.nii")).unwrap());

    let out = run(d, &["--out", "report", "evaluate", "--pred", "pred", "--gt", "data", "--summary", "run/train_summary.json"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("== fused ==") && text.contains("transfer"), "{text}");
    assert!(d.join("report/report.csv").is_file());
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gradcheck"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("resunet_composite"));

    let out = run(tmp.path(), &["gradcheck", "--fault-case", "conv2d"]);
    assert_eq!(code(&out), 6, "{out:?}");
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = setup();
    let d = tmp.path();

    fs::write(d.join("bad.toml"), "epochs = 0\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.toml", "--out", "x", "synth"])), 2);
    fs::write(d.join("typo.toml"), "epochz = 3\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "typo.toml", "--out", "x", "synth"])), 2);
    assert_eq!(code(&run(d, &["fuse", "a.nii"])), 2, "missing --out");

    assert_eq!(code(&run(d, &["--config", "missing.toml", "--out", "x", "synth"])), 3);
    assert_eq!(code(&run(d, &["--out", "o.nii", "fuse", "absent.nii"])), 3);

    fs::write(d.join("junk.nii"), vec![7u8; 400]).unwrap();
    assert_eq!(code(&run(d, &["--out", "o.nii", "fuse", "junk.nii"])), 4);

    assert_eq!(code(&run(d, &["--config", "tiny.toml", "--out", "data", "synth"])), 0);
    fs::write(d.join("w.runw"), b"RUNW\x01\x00\x00\x00").unwrap();
    assert_eq!(code(&run(d, &["--out", "p", "predict", "--weights-z", "w.runw", "--cases", "data"])), 5);

    assert_eq!(code(&run(d, &["--out", "r", "evaluate", "--pred", "nowhere", "--gt", "data"])), 7);
    assert_eq!(code(&run(d, &["--config", "tiny.toml", "--out", "run", "train", "--data", "empty"])), 7);
}

#[test]
fn seed_flag_changes_data_and_is_reproducible() {
    let tmp = setup();
    let d = tmp.path();
    for (out, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let o = run(d, &["--config", "tiny.toml", "--seed", seed, "--out", out, "synth", "--cases", "2"]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    let read = |p: &str| fs::read(d.join(p).join("case_000/T1.nii")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
