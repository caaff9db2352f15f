use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{corpus_from_text, generate_corpus, DataError, Split, SyntheticCorpus};
use crate::hooks::StageKind;
use crate::model::{load_checkpoint, save_checkpoint, ModelError, TransformerModel};
use crate::orchestrator::{evaluate, run_pipeline, train_reference, OrchestratorError, PipelineRun};
use crate::planner::{estimate_memory, BatchGeometry, Calibration, CostEstimate, DeviceGrid, ModelSet, PlanError, StrategyFlags, GIB};
use crate::telemetry::{write_records, TelemetryError};

use super::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Training(#[from] OrchestratorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Validation metrics of one seed's final student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub perplexity: f64,
    pub final_train_loss: f64,
    /// Relative to the output directory.
    pub checkpoint: PathBuf,
    pub telemetry: PathBuf,
}

/// Mean and population standard deviation of a metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub student: String,
    pub seeds: Vec<SeedResult>,
    pub accuracy: Spread,
    pub loss: Spread,
    pub perplexity: Spread,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planner: Option<CostEstimate>,
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = format!("method {}  student {}\n", self.method, self.student);
        s.push_str(&format!("{:>8} {:>10} {:>10} {:>12} {:>12}\n", "seed", "accuracy", "loss", "perplexity", "train_loss"));
        for r in &self.seeds {
            s.push_str(&format!(
                "{:>8} {:>10.4} {:>10.4} {:>12.4} {:>12.4}\n",
                r.seed, r.accuracy, r.loss, r.perplexity, r.final_train_loss
            ));
        }
        s.push_str(&format!(
            "{:>8} {:>10} {:>10} {:>12}\n{:>8} {:>10.4} {:>10.4} {:>12.4}\n{:>8} {:>10.4} {:>10.4} {:>12.4}\n",
            "", "", "", "",
            "mean", self.accuracy.mean, self.loss.mean, self.perplexity.mean,
            "std", self.accuracy.std, self.loss.std, self.perplexity.std
        ));
        if let Some(p) = &self.planner {
            s.push_str(&format!(
                "planner: MA {:.2} GiB, CA {:.2} GiB, feasible={}\n",
                p.ma / GIB,
                p.ca / GIB,
                p.feasible
            ));
        }
        s
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> DistillError + '_ {
    move |e| DistillError::Io { path: path.display().to_string(), source: e }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DistillError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io(path))
}

/// Generated corpus, or byte-level ingestion of `data.text`.
pub fn load_corpus(cfg: &RunConfig, vocab: usize) -> Result<SyntheticCorpus, DistillError> {
    let d = &cfg.data;
    Ok(match &d.text {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io(path))?;
            corpus_from_text(&text, vocab, d.seq, d.seed)?
        }
        None => generate_corpus(d.seed, d.size, vocab, d.seq)?,
    })
}

fn planner_estimate(cfg: &RunConfig) -> Result<Option<CostEstimate>, DistillError> {
    let Some(p) = cfg.planner else { return Ok(None) };
    let specs = cfg.model_specs()?;
    let mut flags = if p.previous { StrategyFlags::previous() } else { StrategyFlags::baseline() };
    if p.zero {
        flags = flags.zero();
    }
    if p.partition_gradients {
        flags = flags.dagger();
    }
    if p.offload {
        flags = flags.offload();
    }
    let grid = DeviceGrid::new(p.mp, p.dp).with_budget(p.budget_gib * GIB);
    let geometry = BatchGeometry { micro_batch: 1, seq: specs.student.max_seq };
    let models = ModelSet::new(specs.teachers, specs.student);
    Ok(Some(estimate_memory(&models, &grid, &flags, &geometry, &Calibration::fitted())?))
}

/// Run the configured pipeline once per seed under `out`, writing
/// checkpoints, telemetry and a seed-averaged summary.
pub fn distill(cfg: &RunConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<Summary, DistillError> {
    let descriptor = cfg.descriptor().map_err(|e| DistillError::Config(e.to_string()))?;
    let specs = cfg.model_specs()?;
    let corpus = load_corpus(cfg, specs.student.vocab)?;
    fs::create_dir_all(out).map_err(io(out))?;
    fs::write(out.join("config.json"), cfg.to_text() + "\n").map_err(io(out))?;

    let teacher_dir = out.join("teachers");
    fs::create_dir_all(&teacher_dir).map_err(io(&teacher_dir))?;
    let mut teachers = Vec::new();
    for (i, (t, spec)) in cfg.models.teachers.iter().zip(&specs.teachers).enumerate() {
        let model = match t.checkpoint() {
            Some(path) => load_checkpoint(path)?,
            None => {
                log(&format!("training teacher {i} ({})", spec.name));
                let mut tc = cfg.teacher_training.clone();
                tc.kind = StageKind::Task;
                let seed = tc.seed.wrapping_add(i as u64);
                let (model, _) = train_reference(spec, &corpus, &tc, seed)?;
                model
            }
        };
        save_checkpoint(&model, &teacher_dir.join(format!("teacher-{i}.ckpt")))?;
        teachers.push(model);
    }
    let teacher_refs: Vec<&TransformerModel> = teachers.iter().collect();
    let eval_size = cfg.stages.iter().map(|s| s.batch_size).max().unwrap_or(8).min(corpus.validation.len()).max(1);
    let validation = corpus.batches(Split::Validation, StageKind::Task, eval_size, cfg.data.seed);

    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        log(&format!("distilling {} with seed {seed}", descriptor.name));
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let run = PipelineRun {
            descriptor: descriptor.clone(),
            teachers: teacher_refs.clone(),
            assistants: specs.assistants.clone(),
            student: specs.student.clone(),
            stages: cfg.stages.clone(),
            corpus: &corpus,
            init_override: cfg.init,
            init_checkpoint: cfg.init_checkpoint.clone(),
            checkpoint_dir: Some(dir.clone()),
            seed,
        };
        let outcome = run_pipeline(&run)?;
        let checkpoint = dir.join("student.ckpt");
        save_checkpoint(&outcome.student, &checkpoint)?;
        let telemetry = dir.join("telemetry.jsonl");
        write_records(&telemetry, &outcome.records)?;
        let losses: Vec<_> = outcome
            .stages
            .iter()
            .map(|s| serde_json::json!({ "stage": s.name, "student": s.student, "losses": s.losses }))
            .collect();
        write_json(&dir.join("losses.json"), &losses)?;
        let eval = evaluate(&outcome.student, &validation)?;
        let final_train_loss = outcome.stages.last().and_then(|s| s.losses.last().copied()).unwrap_or(f64::NAN);
        results.push(SeedResult {
            seed,
            accuracy: eval.accuracy,
            loss: eval.loss,
            perplexity: eval.perplexity,
            final_train_loss,
            checkpoint: checkpoint.strip_prefix(out).unwrap_or(&checkpoint).to_path_buf(),
            telemetry: telemetry.strip_prefix(out).unwrap_or(&telemetry).to_path_buf(),
        });
    }
    let pick = |f: fn(&SeedResult) -> f64| Spread::of(&results.iter().map(f).collect::<Vec<_>>());
    let summary = Summary {
        method: descriptor.name.clone(),
        student: specs.student.name.clone(),
        accuracy: pick(|r| r.accuracy),
        loss: pick(|r| r.loss),
        perplexity: pick(|r| r.perplexity),
        seeds: results,
        planner: planner_estimate(cfg)?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
