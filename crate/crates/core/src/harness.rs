//! Experiment runner: data → two-stage training → greedy exact-match
//! evaluation → report rows, and the ablation matrix over many configs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, TaskSource};
use crate::data::{generate, read_split, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{HybridModel, PreparedSample};
use crate::trainer::{FeatureCache, MetricsRecord, MetricsWriter, StagePlan, StageRunner};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STAGE1_DIR: &str = "stage1";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn load_task(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.task {
        TaskSource::Generate(spec) => generate(spec),
        TaskSource::Files { train, eval } => Ok(Dataset {
            train: read_split(train)?,
            eval: read_split(eval)?,
        }),
    }
}

pub fn prepare(model: &HybridModel, samples: &[Sample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| PreparedSample::new(&model.cfg, &s.images, &s.question, &s.answer))
        .collect()
}

/// Fraction of samples whose greedy answer matches exactly.
pub fn evaluate(model: &HybridModel, samples: &[PreparedSample], max_new: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let cache = FeatureCache::build(model, samples, model.encoder_a.is_some(), model.encoder_b.is_some())?;
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if model.predict(s, cache.get(i), max_new)? == s.answer_text {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub struct TrainOutcome {
    pub model: HybridModel,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
    pub eval: Vec<PreparedSample>,
}

fn frozen_flags(cfg: &ExperimentConfig) -> (bool, bool) {
    (
        cfg.model.encoder_a.as_ref().is_some_and(|e| e.frozen),
        cfg.model.encoder_b.as_ref().is_some_and(|e| e.frozen),
    )
}

pub fn stage_plans(cfg: &ExperimentConfig) -> (StagePlan, StagePlan) {
    let (fa, fb) = frozen_flags(cfg);
    (
        StagePlan::stage1(&cfg.training.stage1, cfg.training.stage1_trains_projector_a),
        StagePlan::stage2(&cfg.training.stage2, fa, fb),
    )
}

/// Runs both stages. With `out`, writes the metrics stream, the stage-1
/// checkpoint and the final checkpoint there.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_task(cfg)?;
    let mut model = HybridModel::new(cfg.model.clone(), cfg.seed)?;
    let train_set = prepare(&model, &data.train)?;
    let eval = prepare(&model, &data.eval)?;
    let hash = cfg.hash();

    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsWriter::create(dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let mut sink = |r: &MetricsRecord| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            w.write(r)?;
        }
        metrics.push(r.clone());
        Ok(())
    };

    // every encoder is frozen in stage 1, so all branch features can be cached
    let mut cache = FeatureCache::build(
        &model,
        &train_set,
        model.encoder_a.is_some(),
        model.encoder_b.is_some(),
    )?;
    let (plan1, plan2) = stage_plans(cfg);
    {
        let mut runner = StageRunner::new(plan1, &mut model, &train_set, &cache, cfg.training.batch_size, cfg.seed)?;
        runner.run(&mut sink)?;
        let ckpt = runner.checkpoint(&hash);
        if let Some(dir) = out {
            ckpt.save(dir.join(STAGE1_DIR))?;
        }
    }
    let (fa, fb) = frozen_flags(cfg);
    cache.invalidate(!fa, !fb);
    let checkpoint = {
        let mut runner = StageRunner::new(plan2, &mut model, &train_set, &cache, cfg.training.batch_size, cfg.seed)?;
        runner.run(&mut sink)?;
        runner.checkpoint(&hash)
    };
    if let Some(dir) = out {
        checkpoint.save(dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoint,
        eval,
    })
}

/// One row of an ablation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_id: String,
    pub encoders: String,
    pub fusion: String,
    pub tiling: bool,
    /// `None` when the branch is absent.
    pub frozen_a: Option<bool>,
    pub frozen_b: Option<bool>,
    pub accuracy: f64,
    pub tokens_per_tile: usize,
    /// Visual positions of the first evaluation sample.
    pub visual_tokens: usize,
    pub steps: usize,
    pub wall_ms: u64,
    /// `"ok"` or the failure message.
    pub status: String,
}

impl ReportRow {
    fn skeleton(cfg: &ExperimentConfig) -> Self {
        let m = &cfg.model;
        Self {
            config_id: cfg.id.clone(),
            encoders: m.encoders_label().into(),
            fusion: m.fusion.as_str().into(),
            tiling: m.tiling.enabled,
            frozen_a: m.encoder_a.as_ref().map(|e| e.frozen),
            frozen_b: m.encoder_b.as_ref().map(|e| e.frozen),
            accuracy: 0.0,
            tokens_per_tile: m.fused_tokens_per_tile(),
            visual_tokens: 0,
            steps: cfg.training.stage1.steps + cfg.training.stage2.steps,
            wall_ms: 0,
            status: String::new(),
        }
    }

    pub fn failed(cfg: &ExperimentConfig, err: &Error) -> Self {
        Self {
            status: format!("failed: {err}"),
            ..Self::skeleton(cfg)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Builds the report row for a trained (or restored) model.
pub fn report_row(
    cfg: &ExperimentConfig,
    model: &HybridModel,
    eval: &[PreparedSample],
    wall_ms: u64,
) -> Result<ReportRow> {
    let accuracy = evaluate(model, eval, cfg.eval.max_new_tokens)?;
    Ok(ReportRow {
        accuracy,
        visual_tokens: eval.first().map_or(0, |s| s.visual_tokens(&model.cfg)),
        wall_ms,
        status: "ok".into(),
        ..ReportRow::skeleton(cfg)
    })
}

/// Trains, evaluates and reports one config.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ReportRow> {
    let t0 = Instant::now();
    let run = train(cfg, out)?;
    report_row(cfg, &run.model, &run.eval, t0.elapsed().as_millis() as u64)
}

/// Re-evaluates the final checkpoint written by [`train`] under `dir`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, dir: &Path) -> Result<ReportRow> {
    let t0 = Instant::now();
    let ckpt = Checkpoint::load(dir.join(CHECKPOINT_DIR))?;
    if ckpt.manifest.config_hash != cfg.hash() {
        return Err(Error::Contract(format!(
            "checkpoint in {} was trained with a different config",
            dir.display()
        )));
    }
    let mut model = HybridModel::new(cfg.model.clone(), cfg.seed)?;
    ckpt.restore_params(&mut model.store)?;
    let data = load_task(cfg)?;
    let eval = prepare(&model, &data.eval)?;
    report_row(cfg, &model, &eval, t0.elapsed().as_millis() as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub matrix_id: String,
    pub rows: Vec<ReportRow>,
    /// True when any cell failed; the report then only partially reflects
    /// the matrix.
    pub partial: bool,
}

/// Runs every cell in order; a failing cell is recorded and the rest still
/// run.
pub fn ablate(matrix_id: &str, cells: &[ExperimentConfig], out: Option<&Path>) -> AblationReport {
    let rows: Vec<ReportRow> = cells
        .iter()
        .map(|cfg| {
            let dir = out.map(|o| o.join("cells").join(&cfg.id));
            run_experiment(cfg, dir.as_deref()).unwrap_or_else(|e| ReportRow::failed(cfg, &e))
        })
        .collect();
    AblationReport {
        matrix_id: matrix_id.to_string(),
        partial: rows.iter().any(|r| !r.is_ok()),
        rows,
    }
}

pub const CSV_COLUMNS: [&str; 11] = [
    "config_id",
    "encoders",
    "fusion",
    "tiling",
    "frozen_a",
    "frozen_b",
    "accuracy",
    "tokens_per_tile",
    "visual_tokens",
    "steps",
    "status",
];

fn flag(v: Option<bool>) -> String {
    v.map_or_else(|| "-".to_string(), |b| b.to_string())
}

/// CSV with a fixed column order. Wall time is left out so identical runs
/// give identical bytes; the JSON form carries it.
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.encoders.clone(),
            r.fusion.clone(),
            r.tiling.to_string(),
            flag(r.frozen_a),
            flag(r.frozen_b),
            format!("{:.4}", r.accuracy),
            r.tokens_per_tile.to_string(),
            r.visual_tokens.to_string(),
            r.steps.to_string(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_json(report: &AblationReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Writes `report.csv` and `report.json` under `dir`.
pub fn write_report(dir: &Path, report: &AblationReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(&report.rows)?).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, report_json(report)?).map_err(|e| Error::io(&json_path, e))
}
