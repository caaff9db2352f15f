use gkd::autodiff::{Graph, Tensor};
use gkd::data::{generate_corpus, GeneratorSpec, SyntheticCorpus};
use gkd::hooks::{
    compose_loss, resolve_terms, AuxBound, DistanceKind, DistanceSpec, ExtractionHook, FeatureSources, HookConfig,
    IterState, LossTerm, MixMode, StageContext, StageKind, Target, TeacherMix, ViewTaps,
};
use gkd::model::{named_spec, FeatureKind, InitStrategy, ModelSpec, TapKey, TransformerModel};
use gkd::orchestrator::*;
use gkd::registry::{get_descriptor, hard_label_stage};
use gkd::rng::Rng;

fn quiet(kind: StageKind, iterations: usize) -> StageConfig {
    let mut c = StageConfig::new(kind, iterations);
    c.dropout = 0.0;
    c.attention_dropout = 0.0;
    c.snapshot_every = 0;
    c
}

fn toy(name: &str) -> ModelSpec {
    named_spec(name).unwrap()
}

fn random(name: &str, seed: u64) -> TransformerModel {
    TransformerModel::random(&toy(name), &mut Rng::new(seed)).unwrap()
}

fn corpus() -> SyntheticCorpus {
    generate_corpus(11, 60, 256, 16).unwrap()
}

fn stage_run<'a>(hooks: &'a HookConfig, sources: Vec<&'a TransformerModel>, corpus: &'a SyntheticCorpus) -> StageRun<'a> {
    StageRun {
        name: "test".into(),
        hooks,
        teachers: sources.len(),
        sources,
        policy: None,
        corpus,
        checkpoint: None,
    }
}

#[test]
fn zero_iterations_leave_student_untouched() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let hooks = get_descriptor("KD").unwrap().stages[0].clone();
    let mut student = random("toy-student", 2);
    let before = student.clone();
    let out = run_stage(&mut student, &stage_run(&hooks, vec![&teacher], &data), &quiet(StageKind::Task, 0)).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(student, before);
}

#[test]
fn accumulation_matches_full_batch() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let hooks = get_descriptor("KD").unwrap().stages[0].clone();
    let run = stage_run(&hooks, vec![&teacher], &data);
    let mut full = random("toy-student", 2);
    let mut split = full.clone();
    let cfg = quiet(StageKind::Task, 3);
    run_stage(&mut full, &run, &cfg).unwrap();
    let cfg = StageConfig { micro_batch: 2, ..cfg };
    run_stage(&mut split, &run, &cfg).unwrap();
    let worst = full
        .tensors()
        .iter()
        .zip(split.tensors())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "max parameter difference {worst:e}");
}

#[test]
fn teachers_are_never_modified() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let snapshot = teacher.clone();
    let desc = get_descriptor("TinyBERT").unwrap();
    let run = PipelineRun {
        descriptor: desc,
        teachers: vec![&teacher],
        assistants: Vec::new(),
        student: toy("toy-student"),
        stages: vec![quiet(StageKind::Pretraining, 3), quiet(StageKind::Task, 3)],
        corpus: &data,
        init_override: None,
        init_checkpoint: None,
        checkpoint_dir: None,
        seed: 4,
    };
    run_pipeline(&run).unwrap();
    assert_eq!(teacher, snapshot);
}

#[test]
fn identical_seeds_are_bit_identical() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let hooks = get_descriptor("TinyBERT").unwrap().stages[1].clone();
    let run = stage_run(&hooks, vec![&teacher], &data);
    let mut cfg = StageConfig::new(StageKind::Task, 6);
    cfg.snapshot_every = 2;
    let mut a = random("toy-student", 3);
    let mut b = a.clone();
    let ra = run_stage(&mut a, &run, &cfg).unwrap();
    let rb = run_stage(&mut b, &run, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.records, rb.records);
    assert_eq!(ra.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), rb.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

/// Label is 1 exactly when the first content token is below the midpoint.
fn separable_corpus() -> SyntheticCorpus {
    let mut rng = Rng::new(5);
    let mut make = |n: usize| {
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let seq: Vec<usize> = std::iter::once(0).chain((1..8).map(|_| 4 + rng.below(252))).collect();
            labels.push(usize::from(seq[1] < 130));
            seqs.push(seq);
        }
        (seqs, labels)
    };
    let (train, train_labels) = make(64);
    let (validation, validation_labels) = make(16);
    SyntheticCorpus {
        vocab: 256,
        seq: 8,
        generator: GeneratorSpec::Markov { seed: 5, size: 80 },
        train,
        train_labels,
        validation,
        validation_labels,
    }
}

#[test]
fn hard_label_smoke_run_halves_the_loss() {
    let data = separable_corpus();
    let hooks = hard_label_stage(StageKind::Task);
    let mut student = random("toy-student", 8);
    let mut cfg = quiet(StageKind::Task, 300);
    cfg.optim.lr = 3e-3;
    let out = run_stage(&mut student, &stage_run(&hooks, Vec::new(), &data), &cfg).unwrap();
    let head: f64 = out.losses[..8].iter().sum::<f64>() / 8.0;
    let tail: f64 = out.losses[out.losses.len() - 8..].iter().sum::<f64>() / 8.0;
    assert!(tail < 0.5 * head, "initial {head}, final {tail}");
}

#[test]
fn averaged_soft_targets_match_hand_computation() {
    // Three-class example: the target is the mean of the teachers' tempered distributions.
    let spec = toy("toy-student");
    let term = LossTerm::new(
        ExtractionHook::new(Target::Student, FeatureKind::Soft),
        ExtractionHook::new(Target::Teachers, FeatureKind::Soft),
        DistanceSpec::new(DistanceKind::Kl).temperature(2.0),
    );
    let cfg = HookConfig::new(StageKind::Task, vec![term]);
    let ctx = StageContext {
        student: &spec,
        sources: vec![&spec, &spec],
        teachers: 2,
        state: IterState::new(0, 1, 1),
        seed: 0,
    };
    let res = resolve_terms(&cfg, &ctx).unwrap();
    let (z1, z2, zs) = ([2.0, 0.0, -1.0], [-0.5, 1.5, 0.25], [0.3, -0.2, 0.1]);
    let mut g = Graph::new();
    let soft = TapKey::global(FeatureKind::Soft);
    let mut taps = |z: [f64; 3]| {
        let v = g.constant(Tensor::new(vec![1, 3], z.to_vec()).unwrap());
        ViewTaps { base: [(soft, v)].into_iter().collect(), interchange: None }
    };
    let (t1, t2, st) = (taps(z1), taps(z2), taps(zs));
    let src = FeatureSources { student: &st, models: vec![Some(&t1), Some(&t2)], gold: None };
    let mix = TeacherMix { weights: vec![0.5, 0.5], mode: MixMode::Probabilities };
    let out = compose_loss(&mut g, &cfg, &res, &ctx, &src, &AuxBound::default(), &mix).unwrap();

    let softmax = |z: [f64; 3]| {
        let e: Vec<f64> = z.iter().map(|x| (x / 2.0).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p1, p2, q) = (softmax(z1), softmax(z2), softmax(zs));
    let p: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| (a + b) / 2.0).collect();
    // Averaged targets are probabilities, whose logarithm carries a 1e-12 floor.
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * ((p + 1e-12).ln() - q.ln())).sum::<f64>() * 4.0;
    assert!((g.value(out.loss).item() - kl).abs() < 1e-12, "{} vs {kl}", g.value(out.loss).item());
}

fn chain_run<'a>(name: &str, teacher: &'a TransformerModel, data: &'a SyntheticCorpus) -> PipelineRun<'a> {
    PipelineRun {
        descriptor: get_descriptor(name).unwrap(),
        teachers: vec![teacher],
        assistants: vec![toy("toy-assistant"), toy("toy-assistant-small")],
        student: toy("toy-student"),
        stages: vec![quiet(StageKind::Task, 2)],
        corpus: data,
        init_override: None,
        init_checkpoint: None,
        checkpoint_dir: None,
        seed: 1,
    }
}

#[test]
fn takd_chain_runs_three_links() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let out = run_pipeline(&chain_run("TAKD", &teacher, &data)).unwrap();
    assert_eq!(out.stages.len(), 3);
    assert_eq!(out.links.len(), 3);
    assert!(out.stages.iter().all(|s| s.teachers == 1));
    assert_eq!(out.student.spec().name, "toy-student");
    let names: Vec<&str> = out.links.iter().map(|m| m.spec().name.as_str()).collect();
    assert_eq!(names, ["toy-assistant", "toy-assistant-small", "toy-student"]);
}

#[test]
fn dgkd_link_k_learns_from_k_models() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let out = run_pipeline(&chain_run("DGKD", &teacher, &data)).unwrap();
    let counts: Vec<usize> = out.stages.iter().map(|s| s.teachers).collect();
    assert_eq!(counts, [1, 2, 3]);
}

#[test]
fn chains_must_shrink() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let mut run = chain_run("TAKD", &teacher, &data);
    run.assistants = vec![toy("toy-assistant-small"), toy("toy-assistant")];
    assert!(matches!(run_pipeline(&run), Err(OrchestratorError::Chain(_))));
}

#[test]
fn multi_teacher_methods_need_two_teachers() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let mut run = chain_run("TMKD", &teacher, &data);
    run.assistants.clear();
    assert!(matches!(run_pipeline(&run), Err(OrchestratorError::Policy(_))));
}

#[test]
fn single_stage_pipeline_equals_run_stage() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let mut run = chain_run("KD", &teacher, &data);
    run.assistants.clear();
    run.init_override = Some(InitStrategy::Random);
    let out = run_pipeline(&run).unwrap();
    // Zero iterations yield the pipeline's initial student.
    let untrained = PipelineRun { stages: vec![quiet(StageKind::Task, 0)], ..run.clone() };
    let mut student = run_pipeline(&untrained).unwrap().student;
    let hooks = run.descriptor.stages[0].clone();
    let mut cfg = quiet(StageKind::Task, 2);
    cfg.seed = run.seed;
    run_stage(&mut student, &stage_run(&hooks, vec![&teacher], &data), &cfg).unwrap();
    assert_eq!(student, out.student);
}

#[test]
fn non_finite_terms_are_named() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let term = LossTerm::new(
        ExtractionHook::new(Target::Student, FeatureKind::Soft),
        ExtractionHook::new(Target::Teacher(0), FeatureKind::Soft),
        // T² overflows while the cross-entropy itself stays positive.
        DistanceSpec::new(DistanceKind::Ce).temperature(1e200),
    )
    .named("overflowing");
    let hooks = HookConfig::new(StageKind::Task, vec![term]);
    let mut student = random("toy-student", 2);
    let err = run_stage(&mut student, &stage_run(&hooks, vec![&teacher], &data), &quiet(StageKind::Task, 1)).unwrap_err();
    match err {
        OrchestratorError::NonFinite { iteration, term, .. } => {
            assert_eq!(iteration, 0);
            assert!(term.contains("overflowing"), "{term}");
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn telemetry_snapshots_cover_feature_keys() {
    let data = corpus();
    let teacher = random("toy-teacher", 1);
    let hooks = get_descriptor("KD").unwrap().stages[0].clone();
    let mut student = random("toy-student", 2);
    let mut cfg = quiet(StageKind::Task, 5);
    cfg.snapshot_every = 2;
    let out = run_stage(&mut student, &stage_run(&hooks, vec![&teacher], &data), &cfg).unwrap();
    let its: Vec<usize> = out.records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, [0, 2, 4]);
    let r = &out.records[0];
    assert!(r.task_metric.is_some_and(|p| p >= 1.0));
    let keys: Vec<String> = r.distances.keys().map(ToString::to_string).collect();
    for k in ["Emb:pairwise", "HS@1:pairwise", "HS@2:pairwise", "Att@2", "Soft:KL1", "Soft:KL20", "Hard"] {
        assert!(keys.iter().any(|x| x == k), "missing {k} in {keys:?}");
    }
    assert!(r.distances.values().all(|v| v.is_finite() && *v >= 0.0));
}
