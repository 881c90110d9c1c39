use std::fs;
use std::path::{Path, PathBuf};

use strokeseg::metrics::Scores;
use strokeseg::nifti::{read_mask, write_mask, MaskVolume};
use strokeseg::pipeline::{
    case_dirs, cmd_evaluate, cmd_fuse, cmd_predict, cmd_pretrain, cmd_synth, cmd_train, exit_code, load_case,
    PipelineError, RunConfig, MASK_FILE, PREDICTION_FILES,
};
use strokeseg::resunet::{ModelError, ResUNetConfig};
use strokeseg::synth::SynthSpec;
use strokeseg::volume::Axis;

/// A configuration small enough to train every axis in a couple of seconds.
fn tiny(out: &Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        epochs: 2,
        batch_size: 4,
        learning_rate: 2e-3,
        synth_cases: 4,
        split_ratio: 0.5,
        model: ResUNetConfig { depth: 2, base_channels: 4, ..ResUNetConfig::default() },
        synth: SynthSpec { extents: [12, 16, 8], lesion_radius: [1.5, 3.0], ..SynthSpec::default() },
        ..RunConfig::desk()
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_tree_layout_and_byte_identical_regeneration() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny(tmp.path()).synth;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let dirs = cmd_synth(&spec, 5, 0.8, &a).unwrap();
    cmd_synth(&spec, 5, 0.8, &b).unwrap();
    assert_eq!(dirs.len(), 5);
    assert_eq!(tree(&a), tree(&b));

    let split: serde_json::Value = serde_json::from_slice(&fs::read(a.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["train"].as_array().unwrap().len(), 4);
    assert_eq!(split["validation"].as_array().unwrap().len(), 1);
    assert!(a.join("synth_spec.toml").is_file());

    let found = case_dirs(&a).unwrap();
    assert_eq!(found, dirs);
    let case = load_case(&found[0], 4, true).unwrap();
    assert_eq!(case.extents(), [12, 16, 8]);
    assert!(case.mask.unwrap().lesion_count() > 0);

    let other = tmp.path().join("c");
    cmd_synth(&SynthSpec { seed: 1, ..spec }, 5, 0.8, &other).unwrap();
    assert_ne!(tree(&a), tree(&other));
}

#[test]
fn train_predict_fuse_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("run"));
    let summary = cmd_train(&cfg).unwrap();
    assert_eq!(summary.axes.len(), 3);
    for name in ["config.toml", "train_log.csv", "train.log", "train_summary.json"] {
        assert!(cfg.out_dir.join(name).is_file(), "{name}");
    }
    let log = fs::read_to_string(cfg.out_dir.join("train.log")).unwrap();
    assert!(log.starts_with("epochs=2 batch_size=4 learning_rate=0.002"), "{log}");
    let csv = fs::read_to_string(cfg.out_dir.join("train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * cfg.epochs);
    let echoed = RunConfig::from_file(&cfg.out_dir.join("config.toml")).unwrap();
    assert_eq!(echoed, cfg);

    let data = tmp.path().join("data");
    cmd_synth(&cfg.synth, cfg.synth_cases, cfg.split_ratio, &data).unwrap();
    let pred = tmp.path().join("pred");
    let weights: Vec<_> = summary.axes.iter().map(|a| (a.axis, a.weights.clone())).collect();
    let written = cmd_predict(&weights, None, &[data.clone()], &pred).unwrap();
    assert_eq!(written.len(), cfg.synth_cases);

    for case in &written {
        let per_axis: Vec<PathBuf> = PREDICTION_FILES[..3].iter().map(|f| case.join(f)).collect();
        let refused = cmd_fuse(&per_axis, &tmp.path().join("refused.nii")).unwrap();
        assert_eq!(read_mask(case.join("fused.nii")).unwrap(), refused);
        assert_eq!(refused.extents(), [12, 16, 8]);
    }

    let report = cmd_evaluate(&pred, &data, &tmp.path().join("report"), None).unwrap();
    assert_eq!(report.sections.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["X", "Y", "Z", "fused"]);
    for s in &report.sections {
        assert_eq!(s.cases.len(), cfg.synth_cases);
        for c in &s.cases {
            assert_eq!(Scores::from_counts(&c.counts), c.scores);
        }
        let mean_dice = s.cases.iter().map(|c| c.scores.dice).sum::<f64>() / s.cases.len() as f64;
        assert!((s.mean.dice - mean_dice).abs() < 1e-15);
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report/report.json")).unwrap()).unwrap();
    assert_eq!(json["sections"][0]["cases"][0]["counts"]["fn"], report.sections[0].cases[0].counts.fn_);
    let csv = fs::read_to_string(tmp.path().join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * (cfg.synth_cases + 1));
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let data = tmp.path().join("data");
    cmd_synth(&cfg.synth, 3, 0.5, &data).unwrap();
    let pred = tmp.path().join("pred");
    for dir in case_dirs(&data).unwrap() {
        let gt = read_mask(dir.join(MASK_FILE)).unwrap();
        let out = pred.join(dir.file_name().unwrap());
        fs::create_dir_all(&out).unwrap();
        for f in PREDICTION_FILES {
            write_mask(out.join(f), &gt).unwrap();
        }
    }
    let report = cmd_evaluate(&pred, &data, &tmp.path().join("report"), None).unwrap();
    for s in &report.sections {
        assert_eq!(s.mean.dice, 1.0);
        assert_eq!(s.mean.iou, 1.0);
        assert_eq!(s.mean.accuracy, 1.0);
    }
    let text = fs::read_to_string(tmp.path().join("report/report.txt")).unwrap();
    assert!(text.contains("== fused =="));

    // A predicted case without ground truth is a data error.
    fs::create_dir_all(pred.join("case_999")).unwrap();
    write_mask(pred.join("case_999").join("X.nii"), &MaskVolume::zeros([12, 16, 8])).unwrap();
    let e = cmd_evaluate(&pred, &data, &tmp.path().join("report2"), None).unwrap_err();
    assert!(matches!(e, PipelineError::CaseMismatch(_)), "{e}");
    assert_eq!(e.exit_code(), exit_code::DATA);
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("a"));
    cfg.pretrain.samples = 16;
    cfg.pretrain.epochs = 4;
    let a = cmd_pretrain(&cfg).unwrap();
    cfg.out_dir = tmp.path().join("b");
    let b = cmd_pretrain(&cfg).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(fs::read(&a.weights).unwrap(), fs::read(&b.weights).unwrap());
    assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap(), "{:?}", a.epoch_losses);

    // The encoder file plugs into a segmentation run and freezing leaves only decoder and head.
    let mut run = tiny(&tmp.path().join("run"));
    run.epochs = 1;
    run.axes = vec![Axis::Z];
    run.pretrained = Some(a.weights.clone());
    run.freeze_encoder = true;
    run.compare_scratch = true;
    let s = cmd_train(&run).unwrap();
    let z = s.axis(Axis::Z).unwrap();
    assert_eq!(z.trainable_params, z.decoder_head_params);
    assert!(z.trainable_params < z.total_params);
    assert!(z.epoch1_val_loss.is_some() && z.scratch_epoch1_val_loss.is_some());
}

#[test]
fn error_classes_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");

    let mut cfg = tiny(tmp.path());
    cfg.epochs = 0;
    assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), exit_code::CONFIG);

    let e = cmd_fuse(&[missing.join("a.nii")], &tmp.path().join("o.nii")).unwrap_err();
    assert!(matches!(e, PipelineError::Nifti { .. }), "{e}");
    assert_eq!(e.exit_code(), exit_code::IO);

    let garbage = tmp.path().join("garbage.nii");
    fs::write(&garbage, b"not a nifti file at all").unwrap();
    assert_eq!(cmd_fuse(&[garbage], &tmp.path().join("o.nii")).unwrap_err().exit_code(), exit_code::NIFTI);

    let bad_weights = tmp.path().join("w.runw");
    fs::write(&bad_weights, b"RUNW garbage").unwrap();
    let e = cmd_predict(&[(Axis::Z, bad_weights)], None, &[tmp.path().to_path_buf()], tmp.path()).unwrap_err();
    assert!(matches!(e, PipelineError::Model(ModelError::CorruptWeights(_))), "{e}");
    assert_eq!(e.exit_code(), exit_code::WEIGHTS);

    let e = cmd_evaluate(&missing, tmp.path(), tmp.path(), None).unwrap_err();
    assert_eq!(e.exit_code(), exit_code::DATA);

    let codes = [
        exit_code::OTHER,
        exit_code::CONFIG,
        exit_code::IO,
        exit_code::NIFTI,
        exit_code::WEIGHTS,
        exit_code::GRADCHECK,
        exit_code::DATA,
    ];
    let mut unique = codes.to_vec();
    unique.dedup();
    assert_eq!(unique.len(), codes.len());
    assert!(codes.iter().all(|&c| c > 0));
}
