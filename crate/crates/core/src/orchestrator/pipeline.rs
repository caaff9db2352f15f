use std::path::PathBuf;

use crate::data::SyntheticCorpus;
use crate::hooks::{StageKind, TermValue};
use crate::model::{count_params, init_student, InitSource, InitStrategy, ModelSpec, TransformerModel};
use crate::registry::{hard_label_stage, validate, MethodDescriptor, Orchestration};
use crate::rng::Rng;
use crate::telemetry::DistanceRecord;

use super::stage::{run_stage, StageConfig, StageRun};
use super::OrchestratorError;

const INIT_SALT: u64 = 0x1417;

/// A full distillation job: descriptor, models, stage loop settings and outputs.
#[derive(Debug, Clone)]
pub struct PipelineRun<'a> {
    pub descriptor: MethodDescriptor,
    /// Trained teachers; multi-teacher methods need at least two.
    pub teachers: Vec<&'a TransformerModel>,
    /// Intermediate specs of assistant chains, largest first.
    pub assistants: Vec<ModelSpec>,
    pub student: ModelSpec,
    /// Loop settings; the n-th descriptor stage of a kind uses the n-th config
    /// of that kind, or the last one when fewer are given.
    pub stages: Vec<StageConfig>,
    pub corpus: &'a SyntheticCorpus,
    /// Replaces the descriptor's initialisation strategy.
    pub init_override: Option<InitStrategy>,
    /// Source for pretrained/distilled-student initialisation.
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
}

/// One executed stage.
#[derive(Debug, Clone)]
pub struct StageSummary {
    pub name: String,
    pub kind: StageKind,
    /// Spec of the model trained in this stage.
    pub student: String,
    /// Number of teacher-side models it learned from.
    pub teachers: usize,
    pub losses: Vec<f64>,
    pub terms: Vec<Vec<TermValue>>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub student: TransformerModel,
    /// Every trained link of an assistant chain, in order; just the student otherwise.
    pub links: Vec<TransformerModel>,
    pub stages: Vec<StageSummary>,
    /// Telemetry of all stages with iterations numbered consecutively.
    pub records: Vec<DistanceRecord>,
}

impl PipelineRun<'_> {
    fn stage_config(&self, kind: StageKind, ordinal: usize) -> Result<StageConfig, OrchestratorError> {
        let of_kind: Vec<&StageConfig> = self.stages.iter().filter(|c| c.kind == kind).collect();
        of_kind
            .get(ordinal)
            .or(of_kind.last())
            .map(|c| (*c).clone())
            .ok_or_else(|| OrchestratorError::Config(format!("no {kind:?} stage settings configured")))
    }

    fn checkpoint(&self, name: &str) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("{name}.ckpt")))
    }
}

/// Specs from the first teacher to the student for chains; checks strict decrease.
fn chain_specs(run: &PipelineRun<'_>) -> Result<Vec<ModelSpec>, OrchestratorError> {
    let teacher = run.teachers.first().ok_or_else(|| OrchestratorError::Chain("a chain needs a teacher".into()))?;
    let mut specs = vec![teacher.spec().clone()];
    specs.extend(run.assistants.iter().cloned());
    specs.push(run.student.clone());
    for w in specs.windows(2) {
        let (a, b) = (count_params(&w[0]), count_params(&w[1]));
        if b >= a {
            return Err(OrchestratorError::Chain(format!(
                "`{}` ({b} parameters) does not shrink `{}` ({a} parameters)",
                w[1].name, w[0].name
            )));
        }
    }
    Ok(specs)
}

struct Runner<'r, 'a> {
    run: &'r PipelineRun<'a>,
    stages: Vec<StageSummary>,
    records: Vec<DistanceRecord>,
    offset: usize,
}

impl Runner<'_, '_> {
    /// Run every descriptor stage on `student` against `sources`.
    fn distill(
        &mut self,
        link: &str,
        student: &mut TransformerModel,
        sources: &[&TransformerModel],
        policy: Option<crate::registry::TeacherPolicy>,
    ) -> Result<(), OrchestratorError> {
        let mut ordinals = std::collections::BTreeMap::new();
        for (i, hooks) in self.run.descriptor.stages.iter().enumerate() {
            let ordinal = ordinals.entry(hooks.stage).or_insert(0usize);
            let mut cfg = self.run.stage_config(hooks.stage, *ordinal)?;
            *ordinal += 1;
            cfg.seed = self.run.seed.wrapping_add(cfg.seed).wrapping_add(i as u64);
            let name = format!("{}/{link}/{i}-{}", self.run.descriptor.name, kind_name(hooks.stage));
            let stage_run = StageRun {
                name: name.clone(),
                hooks,
                sources: sources.to_vec(),
                teachers: sources.len(),
                policy,
                corpus: self.run.corpus,
                checkpoint: self.run.checkpoint(&format!("{link}-{i}")),
            };
            let out = run_stage(student, &stage_run, &cfg)?;
            self.push(name, hooks.stage, student.spec(), sources.len(), out.losses, out.terms, out.records, cfg.iterations);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: String,
        kind: StageKind,
        spec: &ModelSpec,
        teachers: usize,
        losses: Vec<f64>,
        terms: Vec<Vec<TermValue>>,
        records: Vec<DistanceRecord>,
        iterations: usize,
    ) {
        self.records.extend(records.into_iter().map(|mut r| {
            r.iteration += self.offset;
            r
        }));
        self.offset += iterations;
        self.stages.push(StageSummary { name, kind, student: spec.name.clone(), teachers, losses, terms });
    }

    fn initial(&mut self, spec: &ModelSpec, teacher: &TransformerModel, salt: u64) -> Result<TransformerModel, OrchestratorError> {
        let run = self.run;
        let strategy = run.init_override.unwrap_or(run.descriptor.init_strategy);
        let mut rng = Rng::new(run.seed).fork(INIT_SALT).fork(salt);
        match strategy {
            InitStrategy::Random => Ok(init_student(strategy, spec, InitSource::None, &mut rng)?),
            InitStrategy::TruncateTeacher => Ok(init_student(strategy, spec, InitSource::Model(teacher), &mut rng)?),
            InitStrategy::PretrainedStudent | InitStrategy::DistilledStudent => match &run.init_checkpoint {
                Some(path) => Ok(init_student(strategy, spec, InitSource::Checkpoint(path), &mut rng)?),
                None => {
                    // No checkpoint: pretrain the student on gold labels first.
                    let mut model = init_student(InitStrategy::Random, spec, InitSource::None, &mut rng)?;
                    let kind = if run.stages.iter().any(|c| c.kind == StageKind::Pretraining) {
                        StageKind::Pretraining
                    } else {
                        StageKind::Task
                    };
                    let mut cfg = run.stage_config(kind, 0)?;
                    cfg.seed = run.seed.wrapping_add(cfg.seed) ^ INIT_SALT;
                    let hooks = hard_label_stage(kind);
                    let name = format!("{}/{}/init", run.descriptor.name, spec.name);
                    let stage_run = StageRun {
                        name: name.clone(),
                        hooks: &hooks,
                        sources: Vec::new(),
                        teachers: 0,
                        policy: None,
                        corpus: run.corpus,
                        checkpoint: run.checkpoint(&format!("{}-init", spec.name)),
                    };
                    let out = run_stage(&mut model, &stage_run, &cfg)?;
                    self.push(name, kind, spec, 0, out.losses, out.terms, out.records, cfg.iterations);
                    Ok(model)
                }
            },
        }
    }
}

fn kind_name(kind: StageKind) -> &'static str {
    match kind {
        StageKind::Pretraining => "pretraining",
        StageKind::Task => "task",
    }
}

/// Execute a descriptor end to end.
pub fn run_pipeline(run: &PipelineRun<'_>) -> Result<PipelineOutcome, OrchestratorError> {
    let problems = validate(&run.descriptor);
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
        return Err(OrchestratorError::Config(format!("descriptor `{}` is invalid: {}", run.descriptor.name, list.join("; "))));
    }
    let first = *run.teachers.first().ok_or_else(|| OrchestratorError::Config("no teacher model supplied".into()))?;
    let mut runner = Runner { run, stages: Vec::new(), records: Vec::new(), offset: 0 };
    match &run.descriptor.orchestration {
        Orchestration::SingleTeacher => {
            let mut student = runner.initial(&run.student, first, 0)?;
            runner.distill("student", &mut student, &[first], None)?;
            Ok(PipelineOutcome { links: vec![student.clone()], student, stages: runner.stages, records: runner.records })
        }
        Orchestration::MultiTeacher { policy } => {
            if run.teachers.len() < 2 {
                return Err(OrchestratorError::Policy(format!(
                    "{policy:?} needs at least 2 teachers, got {}",
                    run.teachers.len()
                )));
            }
            let mut student = runner.initial(&run.student, first, 0)?;
            runner.distill("student", &mut student, &run.teachers, Some(*policy))?;
            Ok(PipelineOutcome { links: vec![student.clone()], student, stages: runner.stages, records: runner.records })
        }
        Orchestration::AssistantChain { accumulate, .. } => {
            let specs = chain_specs(run)?;
            let mut trained: Vec<TransformerModel> = Vec::new();
            for (k, spec) in specs.iter().enumerate().skip(1) {
                let link = if k + 1 == specs.len() { "student".to_string() } else { format!("assistant{k}") };
                let mut sources: Vec<&TransformerModel> = Vec::new();
                if *accumulate {
                    sources.push(first);
                    sources.extend(trained.iter());
                } else {
                    sources.push(trained.last().unwrap_or(first));
                }
                let teacher = *sources.last().expect("non-empty");
                let mut model = runner.initial(spec, teacher, k as u64)?;
                runner.distill(&link, &mut model, &sources, None)?;
                trained.push(model);
            }
            let student = trained.last().cloned().expect("chain has a student link");
            Ok(PipelineOutcome { student, links: trained, stages: runner.stages, records: runner.records })
        }
    }
}

/// Train a model from scratch on gold labels for one stage kind.
pub fn train_reference(
    spec: &ModelSpec,
    corpus: &SyntheticCorpus,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(TransformerModel, Vec<f64>), OrchestratorError> {
    let mut model = TransformerModel::random(spec, &mut Rng::new(seed).fork(INIT_SALT))?;
    let hooks = hard_label_stage(cfg.kind);
    let run = StageRun {
        name: format!("{}/reference", spec.name),
        hooks: &hooks,
        sources: Vec::new(),
        teachers: 0,
        policy: None,
        corpus,
        checkpoint: None,
    };
    let out = run_stage(&mut model, &run, cfg)?;
    Ok((model, out.losses))
}
