use std::path::{Path, PathBuf};
use std::process::Command;

use pip_fcil::config::{DataSpec, ExperimentConfig, Method};
use pip_fcil::datagen::{save_features, synth_dataset, SynthSpec};
use pip_fcil::metrics::{parse_accuracy_csv, SUMMARY_HEADER};

fn pipsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pipsim"))
}

fn small(method: Method, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(method);
    cfg.data = DataSpec::Synthetic(SynthSpec {
        n_classes: 6,
        per_class: 16,
        n_tokens: 6,
        d_in: 8,
        spread: 0.5,
        anchor_scale: 1.0,
        test_fraction: 0.25,
    });
    cfg.backbone.dim = 16;
    cfg.federation.n_clients = 3;
    cfg.federation.selected = 2;
    cfg.federation.rounds = 4;
    cfg.federation.tasks = 2;
    cfg.seeds = seeds;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn run_writes_per_seed_and_mean_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::PipDualp, vec![2021, 2022, 2023]);
    cfg.output_dir = tmp.path().join("configured");
    let path = write_config(tmp.path(), "run.json", &cfg);
    let out = tmp.path().join("from-env");
    let status = pipsim().arg("run").arg(&path).env("PIP_OUTPUT_DIR", &out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(!cfg.output_dir.exists(), "environment override ignored");
    for seed in [2021, 2022, 2023] {
        for f in ["accuracy", "summary", "matrix", "audit", "manifest"] {
            let ext = match f {
                "accuracy" | "summary" => "csv",
                "audit" => "tsv",
                _ => "json",
            };
            assert!(out.join(format!("{f}_seed{seed}.{ext}")).exists(), "{f} {seed}");
        }
    }
    let rows = parse_accuracy_csv(&std::fs::read_to_string(out.join("accuracy_mean.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seed, "mean");
    assert_eq!(rows[0].per_task.len(), 2);
    let summary = std::fs::read_to_string(out.join("summary_mean.csv")).unwrap();
    assert!(summary.starts_with(SUMMARY_HEADER));

    // the report subcommand re-derives the stored metrics
    let o = pipsim().arg("report").arg(out.join("matrix_seed2022.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("stored metrics agree"), "{text}");
}

#[test]
fn invalid_config_exits_with_one_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Method::BaselineL2p, vec![1]);
    cfg.federation.selected = 7;
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let o = pipsim().arg("run").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("federation"), "{err}");
    let o = pipsim().arg("run").arg(tmp.path().join("missing.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verification_subcommands_pass() {
    let o = pipsim().args(["check-aggregation", "--trials", "300"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = pipsim().args(["gradcheck", "--lambda", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("ProT") && text.contains("PreT") && text.contains("skipped"));
}

#[test]
fn commcost_on_a_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "cc.json", &small(Method::PipL2p, vec![3]));
    let o = pipsim().arg("commcost").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("PASS") && !text.contains("FAIL"), "{text}");
}

#[test]
fn feature_file_experiment_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_classes: 4,
        per_class: 20,
        n_tokens: 1,
        d_in: 12,
        spread: 0.3,
        anchor_scale: 1.0,
        test_fraction: 0.0,
    };
    save_features(&synth_dataset(&spec, 8).unwrap(), &tmp.path().join("features.csv")).unwrap();
    let mut cfg = small(Method::PipDualp, vec![1]);
    cfg.data = DataSpec::Features {
        path: "features.csv".into(),
        holdout: 0.25,
    };
    cfg.output_dir = tmp.path().join("out");
    let path = write_config(tmp.path(), "features.json", &cfg);
    let o = pipsim().arg("run").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("out/matrix_seed1.json").exists());

    cfg.data = DataSpec::Features {
        path: "features.csv".into(),
        holdout: 0.0,
    };
    let path = write_config(tmp.path(), "no-holdout.json", &cfg);
    let o = pipsim().arg("run").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
