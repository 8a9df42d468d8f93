use std::path::Path;
use std::process::{Command, Output};

use ttyard::data::WeightContainer;
use ttyard::rng::Rng;
use ttyard::DenseTensor;

fn ttyard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttyard"))
        .args(args)
        .env("TTYARD_THREADS", "4")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn conv_container(path: &Path, layers: &[(&str, [usize; 4])]) {
    let mut rng = Rng::new(7);
    let mut c = WeightContainer::new();
    for (name, dims) in layers {
        let w = DenseTensor::<f32>::from_fn(dims, |_| rng.normal() as f32).unwrap();
        c.push_tensor(format!("{name}.weight"), &w).unwrap();
    }
    c.write(path).unwrap();
}

#[test]
fn cost_prints_totals_with_header() {
    let o = ttyard(&["cost", "--arch", "resnet50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# ttyard "));
    assert!(text.contains("# seed: none"));
    assert!(text.contains("TTYARD_THREADS=4"));
    assert!(text.contains("4089184256") || text.contains("4.089"), "{text}");

    let dense = ttyard(&["cost", "--arch", "toy", "--res", "16"]);
    let tt = ttyard(&["cost", "--arch", "toy", "--res", "16", "--decomposed"]);
    assert!(dense.status.success() && tt.status.success());
    assert_ne!(data_lines(&stdout(&dense)), data_lines(&stdout(&tt)));
}

#[test]
fn unknown_arch_is_a_usage_error() {
    let o = ttyard(&["cost", "--arch", "vgg16"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let o = ttyard(&["verify", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("# seed: 3"));
    assert!(!text.lines().any(|l| l.starts_with("FAIL")));
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() > 5);
}

#[test]
fn decompose_writes_three_stages_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.tyt"), dir.path().join("out.tyt"));
    conv_container(&input, &[("conv", [128, 128, 3, 3])]);
    let o = ttyard(&["decompose", "--in", input.to_str().unwrap(), "--out", output.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = WeightContainer::read(&output).unwrap();
    let names: Vec<&str> = out.entries().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["conv.stage1.weight", "conv.stage2.weight", "conv.stage3.weight"]);
    let report = std::fs::read_to_string(dir.path().join("out.tyt.report.csv")).unwrap();
    let rows = data_lines(&report);
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("conv,128,128,3,2x16,"));
}

#[test]
fn decompose_refuses_narrow_layers_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let (input, output) = (dir.path().join("in.tyt"), dir.path().join("out.tyt"));
    conv_container(&input, &[("narrow", [64, 64, 3, 3]), ("wide", [128, 128, 1, 1])]);
    let o = ttyard(&["decompose", "--in", input.to_str().unwrap(), "--out", output.to_str().unwrap(), "--layer", "narrow"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("narrow") && err.contains("128"), "{err}");
    assert!(!output.exists());

    WeightContainer::new().write(&input).unwrap();
    let o = ttyard(&["decompose", "--in", input.to_str().unwrap(), "--out", output.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty"));
}

#[test]
fn yard_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ttyard(&["yard", "--M", "0", "--K", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let o = ttyard(&["yard", "--M", "1", "--K", "0", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let o = ttyard(&["yard", "--M", "1", "--K", "7", "--out", out, "--epochs-finetune", "0"]);
    assert!(!o.status.success());
    let missing = dir.path().join("nothing-here");
    let source = format!("cifar10:{}", missing.display());
    let o = ttyard(&["yard", "--data", &source, "--M", "1", "--K", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("CIFAR-10"), "{}", stderr(&o));
}

#[test]
fn yard_writes_one_row_per_iteration_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = ttyard(&["yard", "--M", "1", "--K", "2", "--epochs-finetune", "1", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let report = std::fs::read_to_string(a.join("yard_report.csv")).unwrap();
    let rows = data_lines(&report);
    assert_eq!(rows[0], "iteration,layer_id,alpha,replaced");
    assert_eq!(rows.len(), 3);
    for f in ["summary.json", "train_log.csv", "cost.txt", "model.tyt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(a.join("model.tyt")).unwrap(), std::fs::read(b.join("model.tyt")).unwrap());
    assert_eq!(
        data_lines(&report),
        data_lines(&std::fs::read_to_string(b.join("yard_report.csv")).unwrap())
    );
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["k"], 2);
}

#[test]
fn ablate_deduplicates_and_rejects_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let o = ttyard(&["ablate", "--M-list", "1,1", "--K", "1", "--epochs-finetune", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows = data_lines(&csv);
    assert_eq!(rows[0], "M,replacements,final_params,final_macs,final_accuracy");
    assert_eq!(rows.len(), 2);
    assert!(out.join("M1").join("yard_report.csv").exists());

    let o = ttyard(&["ablate", "--M-list", "--K", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = ttyard(&["ablate", "--M-list", "0,1", "--K", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
