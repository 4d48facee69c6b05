use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcunet::data::{write_synthetic_dataset, SynthSpec};

fn mcunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcunet"))
        .args(args)
        .env("MCUNET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Four synthetic 48×48 images (two train, two test) and a small-network config.
fn toy_run(dir: &Path, epochs: usize) -> PathBuf {
    let data = dir.join("data");
    write_synthetic_dataset(&data, &SynthSpec::default(), 4, 7).unwrap();
    let config = dir.join("run.json");
    let text = format!(
        r#"{{
  "dataset_root": "data",
  "network": {{"base_channels": 4, "bottleneck_channels": 8, "seed": 3}},
  "train": {{"epochs": {epochs}, "learning_rate": 0.001, "seed": 5}}
}}"#
    );
    fs::write(&config, text).unwrap();
    config
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_run(dir.path(), 2);
    let out = dir.path().join("out");
    let o = mcunet(&["train", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.json",
        "manifest.json",
        "epochs.csv",
        "model.mcun",
        "metrics.csv",
        "per_image.csv",
        "roc.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("checkpoints/epoch_0001.mcun").is_file());
    assert!(out.join("checkpoints/epoch_0002.mcun").is_file());
    let log = fs::read_to_string(out.join("epochs.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,acc,se,sp,f1,auc");
    assert_eq!(lines.len(), 3);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("ACC,SEN,SP,AUC,F1\n"));
    assert_eq!(stdout(&o), metrics);
}

#[test]
fn training_is_deterministic() {
    let logs: Vec<(String, Vec<u8>)> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let config = toy_run(dir.path(), 1);
            let out = dir.path().join("out");
            let o = mcunet(&["train", "--config", s(&config), "--out", s(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
            (
                fs::read_to_string(out.join("epochs.csv")).unwrap(),
                fs::read(out.join("model.mcun")).unwrap(),
            )
        })
        .collect();
    assert_eq!(logs[0].0, logs[1].0);
    assert!(logs[0].1 == logs[1].1, "checkpoints differ");
}

#[test]
fn missing_label_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_run(dir.path(), 1);
    fs::remove_file(dir.path().join("data/labels/02.pgm")).unwrap();
    let o = mcunet(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error: dataset:"), "{err}");
    assert!(err.contains("02.ppm") && err.contains("labels"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn bad_config_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"train": {"epochs": 1, "learning_rat": 0.1}}"#).unwrap();
    let o = mcunet(&["train", "--config", s(&config), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: config:"));
}

#[test]
fn predict_and_evaluate_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_run(dir.path(), 1);
    let out = dir.path().join("out");
    assert!(mcunet(&["train", "--config", s(&config), "--out", s(&out)])
        .status
        .success());
    let model = out.join("model.mcun");

    // Odd size exercises padding and cropping.
    let spec = SynthSpec {
        height: 53,
        width: 61,
        ..SynthSpec::default()
    };
    let odd = dir.path().join("odd");
    write_synthetic_dataset(&odd, &spec, 1, 1).unwrap();
    let pred = dir.path().join("pred.pgm");
    let o = mcunet(&[
        "predict",
        "--model",
        s(&model),
        "--image",
        s(&odd.join("images/01.ppm")),
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let raster = mcunet::data::load_image::<f32>(&pred).unwrap();
    let shape = raster.shape();
    assert_eq!((shape.c, shape.h, shape.w), (1, 53, 61));

    let eval = dir.path().join("eval");
    let o = mcunet(&[
        "evaluate",
        "--model",
        s(&model),
        "--manifest",
        s(&out.join("manifest.json")),
        "--out",
        s(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ACC,SEN,SP,AUC,F1\n"));
    assert_eq!(
        fs::read_to_string(eval.join("metrics.csv")).unwrap(),
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    );
    let roc = fs::read_to_string(eval.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\ninf,0,0\n"), "{roc}");

    let o = mcunet(&[
        "evaluate",
        "--model",
        s(&config),
        "--manifest",
        s(&out.join("manifest.json")),
        "--out",
        s(&eval),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn ablation_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_run(dir.path(), 1);
    let out = dir.path().join("ablate");
    let o = mcunet(&["ablate", "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("dac,mkp,params,ACC,SEN,SP,AUC,F1,manifest_hash")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(keys, [("0", "0"), ("1", "0"), ("0", "1"), ("1", "1")]);
    let params: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(params[0] < params[1] && params[0] < params[2], "{params:?}");
    assert!(params[3] > params[1] && params[3] > params[2], "{params:?}");
    assert!(rows.iter().all(|r| r[8] == rows[0][8] && r[8].len() == 64));
    for d in ["dac0_mkp0", "dac1_mkp0", "dac0_mkp1", "dac1_mkp1"] {
        assert!(out.join(d).join("model.mcun").is_file(), "{d}");
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = mcunet(&["gradcheck", "--seed", "1", "--only", "conv2d_r2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));

    let o = mcunet(&["gradcheck", "--only", "relu", "--corrupt", "relu"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("relu"), "{}", stderr(&o));
}
