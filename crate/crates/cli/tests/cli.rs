use std::path::Path;
use std::process::{Command, Output};

use convformer_cli::config::{leaf_keys, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_convformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("CONVFORMER_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small(out: &Path) -> Vec<String> {
    [
        "--out",
        out.to_str().unwrap(),
        "--set",
        "fusion.depth=1",
        "--set",
        "fusion.channels=16",
        "--set",
        "pipeline.vis_channels=16",
        "--set",
        "pipeline.decoder_channels=16",
        "--set",
        "data.image_size=32",
        "--set",
        "data.train_count=16",
        "--set",
        "data.eval_count=8",
        "--set",
        "train.steps=6",
        "--set",
        "train.batch_size=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_small(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(small(out));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

#[test]
fn flops_matches_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "flops",
        "--set",
        "fusion.channels=64",
        "--set",
        "fusion.classes=8",
        "--set",
        "data.image_size=128",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let golden = include_str!("golden/flops_c64_k8_h16.csv");
    assert_eq!(String::from_utf8(o.stdout).unwrap(), golden);
    assert_eq!(std::fs::read_to_string(dir.path().join("flops.csv")).unwrap(), golden);
    let params = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert!(params.contains("\ntotal,736128\n"));
    assert!(params.contains("\nremoved_conv_side_matrices,12288\n"));
}

#[test]
fn help_lists_every_key_and_default() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8(o.stdout).unwrap();
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    for key in leaf_keys(&defaults) {
        let line = help
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key.as_str()))
            .unwrap_or_else(|| panic!("{key} missing from --help"));
        let value = key.split('.').fold(&defaults, |v, k| &v[k]);
        assert!(line.ends_with(&format!("[default: {value}]")), "{line}");
    }
    for sub in ["train", "eval", "gradcheck", "oracle", "flops", "ablate-bridge", "ablate-depth", "export-embeddings"] {
        assert!(help.contains(sub), "{sub}");
    }
    let sub = String::from_utf8(run(&["train", "--help"]).stdout).unwrap();
    assert!(sub.contains("fusion.depth"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&["nonsense"])), 2);
    assert_eq!(code(&run(&["train", "--set", "fusion.heads=3", "--set", "fusion.channels=16", "--out", out])), 2);
    assert_eq!(code(&run(&["train", "--set", "fusion.nope=1", "--out", out])), 2);
    assert_eq!(code(&run(&["train", "--set", "train.steps=\"many\"", "--out", out])), 2);
    assert_eq!(code(&run(&["eval", "--out", out])), 1);
    assert_eq!(code(&run(&["flops", "--set", "fusion.depth=0", "--out", out])), 0);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"fusion":{"depth":3,"channels":16},"seed":9,"out":"ignored"}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "flops",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "fusion.depth=2",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eff: RunConfig = serde_json::from_str(&std::fs::read_to_string(out.join("config.effective.json")).unwrap()).unwrap();
    assert_eq!((eff.fusion.depth, eff.fusion.channels, eff.seed), (2, 16, 4));
    assert_eq!(eff.out, out.to_str().unwrap());

    std::fs::write(&cfg, "[1]").unwrap();
    assert_eq!(code(&run(&["flops", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn train_artifacts_are_byte_stable_and_eval_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run_small("train", d, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "curves.csv", "checkpoint.kjtc"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 6);

    let o = run_small("eval", &a, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["miou"].as_f64(), report["miou"].as_f64());
    assert_eq!(eval["per_class_iou"], report["per_class_iou"]);
}

#[test]
fn exported_embeddings_drive_training() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["export-embeddings", "--set", "pipeline.text_channels=16", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let emb = dir.path().join("embeddings.kjte");
    assert_eq!(&std::fs::read(&emb).unwrap()[..4], b"KJTE");

    let (stub, file) = (dir.path().join("stub"), dir.path().join("file"));
    let with_file = format!("pipeline.text_embeddings={}", emb.display());
    assert_eq!(code(&run_small("train", &stub, &["--set", "pipeline.text_channels=16"])), 0);
    let o = run_small("train", &file, &["--set", "pipeline.text_channels=16", "--set", &with_file]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(stub.join("checkpoint.kjtc")).unwrap(),
        std::fs::read(file.join("checkpoint.kjtc")).unwrap()
    );

    let o = run_small("train", &file, &["--set", "fusion.classes=3", "--set", &with_file]);
    assert_eq!(code(&o), 1);
}

#[test]
fn oracle_subcommand_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle", "--set", "verify.oracle_cases=2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("oracle.json")).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
}
