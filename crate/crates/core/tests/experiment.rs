use std::fs;
use std::path::Path;

use loce::experiment::{run_experiment, ExperimentConfig, Variant, STAGE1_LABEL};
use loce::metrics::{MetricsReport, REPORT_SCHEMA};
use loce::model::Model;
use loce::report;
use loce::synthetic_world::World;

fn small_config(seed: u64) -> ExperimentConfig {
    let text = "
        [world]
        num_classes = 8
        total_instances = 400
        val_per_class = 10
        feature_dim = 8

        [train]
        stage1_epochs = 2
        stage2_epochs = 2
        batch_size = 32
        hidden_dim = 16
        repr_dim = 16
    ";
    ExperimentConfig::parse(text)
        .unwrap()
        .with_seed(seed)
        .with_presets(&["ce", "loce"])
        .unwrap()
}

fn run_into(cfg: &ExperimentConfig, dir: &Path) -> Vec<std::path::PathBuf> {
    run_experiment(cfg, |_| {}).unwrap().write_artifacts(dir).unwrap()
}

#[test]
fn every_artifact_carries_digest_and_seed() {
    let cfg = small_config(11);
    let dir = tempfile::tempdir().unwrap();
    let written = run_into(&cfg, dir.path());
    let digest = cfg.digest();
    // experiment.json plus report, history and checkpoint per label.
    assert_eq!(written.len(), 1 + 3 * 3);
    for label in [STAGE1_LABEL, "ce", "loce"] {
        let r = report::load_report(&dir.path().join(format!("report_{label}.json"))).unwrap();
        assert_eq!(r.provenance.config_digest, digest);
        assert_eq!(r.provenance.seed, 11);
        assert_eq!(r.provenance.variant, label);

        let history = fs::read_to_string(dir.path().join(format!("history_{label}.csv"))).unwrap();
        let mut lines = history.lines();
        assert!(lines.next().unwrap().starts_with("config_digest,seed,variant,"));
        let rows: Vec<&str> = lines.collect();
        let expected_rows = if label == STAGE1_LABEL { 2 } else { 4 };
        assert_eq!(rows.len(), expected_rows, "{label}");
        let prefix = format!("{digest},11,{label},");
        assert!(rows.iter().all(|r| r.starts_with(&prefix)), "{label}");

        let bytes = fs::read(dir.path().join(format!("checkpoint_{label}.bin"))).unwrap();
        let (model, meta) = Model::read_checkpoint(bytes.as_slice()).unwrap();
        assert!(model.all_finite());
        assert_eq!(meta, format!("config_digest={digest}\nseed=11\nvariant={label}"));
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("experiment.json")).unwrap()).unwrap();
    assert_eq!(record["config_digest"], digest.as_str());
    assert_eq!(record["seed"], 11);
}

#[test]
fn stage1_is_shared_by_all_variants() {
    let cfg = small_config(12);
    let run = run_experiment(&cfg, |_| {}).unwrap();
    let backbone = run.stage1.model.backbone_checksum();
    for v in &run.variants {
        assert_eq!(v.output.model.backbone_checksum(), backbone, "{}", v.variant.name);
    }
    assert_eq!(run.world.train_counts(), World::generate(&cfg.world).unwrap().train_counts());
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = small_config(13);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = run_into(&cfg, a.path());
    let files_b = run_into(&cfg, b.path());
    assert_eq!(files_a.len(), files_b.len());
    for (fa, fb) in files_a.iter().zip(&files_b) {
        assert_eq!(fa.file_name(), fb.file_name());
        assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{}", fa.display());
    }
}

#[test]
fn progress_reports_each_stage() {
    let cfg = small_config(14);
    let mut lines = Vec::new();
    run_experiment(&cfg, |l| lines.push(l.to_string())).unwrap();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with(STAGE1_LABEL));
    assert!(lines[2].starts_with("loce"));
}

#[test]
fn report_loading_rejects_foreign_files() {
    let cfg = small_config(15);
    let dir = tempfile::tempdir().unwrap();
    run_into(&cfg, dir.path());
    let path = dir.path().join("report_ce.json");
    let text = fs::read_to_string(&path).unwrap();

    let wrong = dir.path().join("wrong_schema.json");
    fs::write(&wrong, text.replace(REPORT_SCHEMA, "loce.metrics.v0")).unwrap();
    let err = report::load_report(&wrong).unwrap_err().to_string();
    assert!(err.contains("schema") && err.contains("wrong_schema.json"), "{err}");

    let broken = dir.path().join("broken.json");
    fs::write(&broken, &text[..text.len() / 2]).unwrap();
    let err = report::load_report(&broken).unwrap_err().to_string();
    assert!(err.contains("line"), "{err}");

    let extra = dir.path().join("extra.json");
    fs::write(&extra, text.replacen('{', "{\"surprise\": 1,", 1)).unwrap();
    assert!(report::load_report(&extra).is_err());

    let r = MetricsReport::from_json(&text).unwrap();
    assert_eq!(r.to_json(), text);
}

#[test]
fn render_from_run_directory() {
    let cfg = small_config(16).with_presets(&Variant::PRESETS).unwrap();
    let run_dir = tempfile::tempdir().unwrap();
    run_into(&cfg, run_dir.path());
    let paths = report::collect_report_paths(&[run_dir.path().to_path_buf()]).unwrap();
    assert_eq!(paths.len(), 1 + Variant::PRESETS.len());
    let reports = paths.iter().map(|p| report::load_report(p).unwrap()).collect();
    let named = report::label_reports(reports);
    let out = tempfile::tempdir().unwrap();
    let written = report::render(&named, None, out.path()).unwrap();
    for name in ["groups.csv", "groups.svg", "comparison.csv", "curve_loce.svg", "curve_stage1.csv"] {
        assert!(written.iter().any(|p| p.ends_with(name)), "{name} missing");
    }
    let comparison = fs::read_to_string(out.path().join("comparison.csv")).unwrap();
    assert!(comparison.contains("delta_"));
    let svg = fs::read_to_string(out.path().join("curve_loce.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains(&cfg.digest()));
}
