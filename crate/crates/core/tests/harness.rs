mod common;

use serde_json::{json, Value};
use tilefuse::config::{ExperimentConfig, MatrixConfig};
use tilefuse::data::{generate, write_dataset, TaskSpec};
use tilefuse::encoder::token_budget;
use tilefuse::harness::{
    ablate, evaluate_checkpoint, report_csv, report_json, run_experiment, train, write_report,
    AblationReport, CHECKPOINT_DIR, CSV_COLUMNS, METRICS_FILE, STAGE1_DIR,
};
use tilefuse::model::HybridModel;
use tilefuse::Error;

fn cfg(v: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

fn config_problems(v: &Value) -> Vec<String> {
    match ExperimentConfig::from_json(&v.to_string()) {
        Err(Error::Config(p)) => p,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_errors_name_every_offending_key() {
    let mut v = common::tiny_experiment("bad", "complementary", 32, 32);
    v["model"]["lm"]["heads"] = json!(3);
    v["training"]["batch_size"] = json!(0);
    v["task"]["generate"]["tile_size"] = json!(16);
    v["model"]["encoder_b"]["unshuffle_r"] = json!(3);
    let p = config_problems(&v);
    for key in ["model.lm.heads", "training.batch_size", "task.generate.tile_size", "model.encoder_b.unshuffle_r"] {
        assert!(p.iter().any(|m| m.contains(key)), "{key} missing from {p:?}");
    }
}

#[test]
fn unknown_fusion_and_unknown_fields_are_rejected() {
    let mut v = common::tiny_experiment("x", "complementary", 32, 32);
    v["model"]["fusion"] = json!("cross-attention");
    let p = config_problems(&v);
    assert!(p[0].contains("cross-attention"), "{p:?}");
    let mut v = common::tiny_experiment("x", "complementary", 32, 32);
    v["model"]["lm"]["dropout"] = json!(0.1);
    assert!(config_problems(&v)[0].contains("dropout"));
}

#[test]
fn mismatched_encoder_tiles_are_rejected() {
    let mut v = common::tiny_experiment("x", "complementary", 32, 32);
    v["model"]["encoder_b"]["grid_side"] = json!(4);
    assert!(config_problems(&v).iter().any(|m| m.contains("model.encoder_b")));
}

#[test]
fn report_rows_carry_the_token_budget() {
    let c = cfg(&common::tiny_experiment("td", "tile-detail", 96, 64));
    let row = run_experiment(&c, None).unwrap();
    assert!(row.is_ok());
    let (a, b) = (c.model.encoder_a.as_ref().unwrap(), c.model.encoder_b.as_ref().unwrap());
    assert_eq!(row.tokens_per_tile, token_budget(a, b));
    assert_eq!(row.visual_tokens, 7 * row.tokens_per_tile);
    assert_eq!(row.steps, 6);
    assert_eq!(row.encoders, "A+B");

    let mut v = common::tiny_experiment("td-off", "tile-detail", 96, 64);
    v["model"]["tiling"]["enabled"] = json!(false);
    let row = run_experiment(&cfg(&v), None).unwrap();
    assert!(!row.tiling);
    assert_eq!(row.visual_tokens, row.tokens_per_tile);
}

#[test]
fn identical_runs_give_identical_csv_and_metrics() {
    let c = cfg(&common::tiny_experiment("det", "complementary", 32, 32));
    let a = train(&c, None).unwrap();
    let b = train(&c, None).unwrap();
    let key = |m: &[tilefuse::trainer::MetricsRecord]| m.iter().map(|r| r.deterministic_key()).collect::<Vec<_>>();
    assert_eq!(key(&a.metrics), key(&b.metrics));
    assert_eq!(a.checkpoint.blob_bytes(), b.checkpoint.blob_bytes());
    let rows = vec![run_experiment(&c, None).unwrap(), run_experiment(&c, None).unwrap()];
    let csv = report_csv(&rows).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert_eq!(lines[1], lines[2]);
    assert_eq!(csv, report_csv(&rows).unwrap());
}

#[test]
fn train_writes_metrics_and_checkpoints_that_evaluate_back() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(&common::tiny_experiment("ck", "complementary", 32, 32));
    let run = train(&c, Some(dir.path())).unwrap();
    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 6);
    assert!(dir.path().join(STAGE1_DIR).is_dir());
    let direct = tilefuse::harness::report_row(&c, &run.model, &run.eval, 0).unwrap();
    let restored = evaluate_checkpoint(&c, dir.path()).unwrap();
    assert_eq!(restored.accuracy, direct.accuracy);
    assert!(dir.path().join(CHECKPOINT_DIR).is_dir());

    let other = c.clone().with_seed(99);
    assert!(matches!(evaluate_checkpoint(&other, dir.path()), Err(Error::Contract(_))));
}

#[test]
fn failing_cells_leave_a_partial_report() {
    let good = cfg(&common::tiny_experiment("good", "complementary", 32, 32));
    let mut v = common::tiny_experiment("too-long", "tile-detail", 96, 64);
    v["model"]["lm"]["context_limit"] = json!(20);
    let bad = cfg(&v);
    let report = ablate("m", &[bad, good], None);
    assert!(report.partial);
    assert!(report.rows[0].status.starts_with("failed"), "{}", report.rows[0].status);
    assert!(report.rows[1].is_ok());
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &report).unwrap();
    let json: AblationReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json, report);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap(), report_csv(&report.rows).unwrap());
    assert!(report_json(&report).unwrap().contains("wall_ms"));
}

#[test]
fn matrix_loading_resolves_cells_and_overrides_seeds() {
    let dir = tempfile::tempdir().unwrap();
    for id in ["one", "two"] {
        let v = common::tiny_experiment(id, "complementary", 32, 32);
        std::fs::write(dir.path().join(format!("{id}.json")), v.to_string()).unwrap();
    }
    let m = dir.path().join("matrix.json");
    std::fs::write(&m, json!({"id": "mx", "seed": 42, "cells": ["one.json", "two.json"]}).to_string()).unwrap();
    let (matrix, cells) = MatrixConfig::load(&m).unwrap();
    assert_eq!(matrix.id, "mx");
    assert!(cells.iter().all(|c| c.seed == 42));
    std::fs::write(&m, json!({"id": "mx", "cells": ["one.json", "one.json"]}).to_string()).unwrap();
    assert!(matches!(MatrixConfig::load(&m), Err(Error::Config(p)) if p[0].contains("duplicate")));
}

#[test]
fn file_backed_tasks_match_generated_ones() {
    let dir = tempfile::tempdir().unwrap();
    let v = common::tiny_experiment("files", "complementary", 32, 32);
    let spec: TaskSpec = serde_json::from_value(v["task"]["generate"].clone()).unwrap();
    write_dataset(dir.path().join("data"), &generate(&spec).unwrap()).unwrap();
    let mut f = v.clone();
    f["task"] = json!({"files": {"train": "data/train.jsonl", "eval": "data/eval.jsonl"}});
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, f.to_string()).unwrap();
    let from_files = ExperimentConfig::load(&path).unwrap();
    let a = train(&from_files, None).unwrap();
    let b = train(&cfg(&v), None).unwrap();
    assert_eq!(a.checkpoint.blob_bytes(), b.checkpoint.blob_bytes());
}

#[test]
fn shipped_configs_and_matrices_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for m in ["matrix_training.json", "matrix_fusion.json", "matrix_tiling.json"] {
        let (_, cells) = MatrixConfig::load(root.join(m)).unwrap();
        for c in &cells {
            HybridModel::new(c.model.clone(), c.seed).unwrap();
            n += 1;
        }
    }
    assert_eq!(n, 9);
    for t in ["tasks/complementary.json", "tasks/tile_detail.json"] {
        let spec: TaskSpec = serde_json::from_str(&std::fs::read_to_string(root.join(t)).unwrap()).unwrap();
        let small = TaskSpec { n_train: 4, n_eval: 2, ..spec };
        generate(&small).unwrap();
    }
}
