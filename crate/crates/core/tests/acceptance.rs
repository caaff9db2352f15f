//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; pass criterion numbers to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gkd::autodiff::{finite_diff_check, Graph, Tensor, TensorError, Var};
use gkd::data::{generate_corpus, Split, SyntheticCorpus};
use gkd::hooks::{
    apply_relation, apply_transform, compose_loss, compute_distance, compute_distance_between, interchange_forward,
    plan_operations, resolve_terms, run_student, Aggregate, AuxModel, DistanceKind, DistanceSpec, ExtractionHook,
    FeatureSources, HookConfig, IterState, LayerSelector, LossTerm, OperationHook, ReplaceProjections, Side, StageContext,
    StageKind, Target, TeacherMix, Transform, View, ViewTaps, Weight,
};
use gkd::model::{
    count_params, named_spec, FeatureKind, InitStrategy, ModelSpec, TapRequest, Taps, TokenBatch, TransformerModel,
};
use gkd::orchestrator::{evaluate, run_pipeline, train_reference, PipelineRun, StageConfig};
use gkd::planner::{
    estimate_memory, BatchGeometry, Calibration, DeviceGrid, ModelSet, StrategyFlags, GIB,
};
use gkd::registry::{
    best_c, combine, get_descriptor, hard_label_stage, soft_kl, term_set, validate, without_feature, MethodDescriptor,
    Orchestration, METHOD_NAMES,
};
use gkd::rng::Rng;
use gkd::telemetry::{normalize_series, pearson, spearman};

type Check = fn() -> Result<String, String>;

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [(usize, &str, Check); 10] = [
        (1, "parameter counts", parameter_counts),
        (2, "feasibility boundary", feasibility_boundary),
        (3, "ZeRO/offload algebra", zero_offload_algebra),
        (4, "gradient fidelity", gradient_fidelity),
        (5, "operation-hook oracles", operation_hook_oracles),
        (6, "catalog liveness", catalog_liveness),
        (7, "combination correctness", combination_correctness),
        (8, "distillation benefit", distillation_benefit),
        (9, "analytics correctness", analytics_correctness),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, title, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} {title} ({:.1}s): {detail}", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1

const TABLE_PARAMS: [(&str, u64); 22] = [
    ("22M", 22_788_864),
    ("66M", 66_811_392),
    ("110M", 109_338_624),
    ("340M", 334_688_256),
    ("1B", 1_022_682_240),
    ("1.2B", 1_173_458_944),
    ("1.5B", 1_521_700_224),
    ("2B", 1_920_122_880),
    ("5B", 5_030_587_776),
    ("6B", 5_915_828_736),
    ("7.5B", 7_385_878_656),
    ("10B", 9_880_682_496),
    ("13B", 13_170_418_176),
    ("18B", 18_125_342_976),
    ("20B", 20_175_676_160),
    ("22B", 22_104_152_064),
    ("25B", 24_660_072_448),
    ("50B", 49_577_504_000),
    ("65B", 64_813_768_448),
    ("90B", 89_957_891_328),
    ("100B", 99_465_734_144),
    ("110B", 109_620_044_032),
];

fn parameter_counts() -> Result<String, String> {
    for (name, want) in TABLE_PARAMS {
        let got = count_params(&named_spec(name).map_err(fail)?);
        ensure(got == want, || format!("{name}: {got} != {want}"))?;
    }
    Ok(format!("{} rows exact", TABLE_PARAMS.len()))
}

// 2

struct MemoryRow {
    teacher: &'static str,
    student: &'static str,
    /// `None` for rows that overflowed device memory.
    ma_gib: Option<f64>,
    mp: usize,
    dp: usize,
    previous: bool,
    zero: bool,
    offload: bool,
    calibration: bool,
}

const fn row(
    teacher: &'static str,
    student: &'static str,
    ma_gib: Option<f64>,
    (mp, dp): (usize, usize),
    (previous, zero, offload): (bool, bool, bool),
    calibration: bool,
) -> MemoryRow {
    MemoryRow { teacher, student, ma_gib, mp, dp, previous, zero, offload, calibration }
}

const PREV: (bool, bool, bool) = (true, false, false);
const OURS: (bool, bool, bool) = (false, false, false);
const ZERO: (bool, bool, bool) = (false, true, false);
const OFFLOAD: (bool, bool, bool) = (false, true, true);

const MEMORY_ROWS: [MemoryRow; 16] = [
    row("110M", "22M", Some(0.99), (1, 8), PREV, false),
    row("110M", "66M", Some(1.73), (1, 8), PREV, true),
    row("340M", "66M", Some(3.11), (1, 8), PREV, false),
    row("5B", "1B", Some(32.44), (1, 8), PREV, false),
    row("6B", "1.2B", None, (1, 8), PREV, false),
    row("6B", "1.2B", Some(18.91), (2, 4), OURS, false),
    row("7.5B", "1.5B", Some(24.22), (2, 4), OURS, false),
    row("10B", "2B", Some(30.91), (2, 4), OURS, false),
    row("10B", "2B", Some(18.45), (2, 4), ZERO, true),
    row("10B", "2B", Some(15.83), (2, 4), OFFLOAD, true),
    row("25B", "5B", Some(20.41), (8, 1), OURS, false),
    row("50B", "10B", Some(17.93), (8, 1), OFFLOAD, false),
    row("65B", "13B", Some(22.48), (8, 1), OFFLOAD, false),
    row("90B", "18B", Some(30.56), (8, 1), OFFLOAD, false),
    row("100B", "20B", Some(33.62), (8, 1), OFFLOAD, false),
    row("110B", "22B", None, (8, 1), OFFLOAD, false),
];

fn feasibility_boundary() -> Result<String, String> {
    let cal = Calibration::fitted();
    let mut worst: (f64, String) = (0.0, String::new());
    for r in &MEMORY_ROWS {
        let models = ModelSet::new(vec![named_spec(r.teacher).map_err(fail)?], named_spec(r.student).map_err(fail)?);
        let mut flags = if r.previous { StrategyFlags::previous() } else { StrategyFlags::baseline() };
        if r.zero {
            flags = flags.zero();
        }
        if r.offload {
            flags = flags.offload();
        }
        let geometry = BatchGeometry { micro_batch: 1, seq: models.student.max_seq };
        let e = estimate_memory(&models, &DeviceGrid::new(r.mp, r.dp), &flags, &geometry, &cal).map_err(fail)?;
        let label = format!("{}⇒{} {}", r.teacher, r.student, flags.label());
        ensure(e.feasible == r.ma_gib.is_some(), || format!("{label}: predicted feasible={}", e.feasible))?;
        if let (Some(ma), false, false) = (r.ma_gib, r.offload, r.calibration) {
            let err = (e.ma / GIB - ma).abs() / ma;
            if err > worst.0 {
                worst = (err, label);
            }
        }
    }
    ensure(worst.0 <= 0.25, || format!("held-out MA error {:.1}% at {}", 100.0 * worst.0, worst.1))?;
    Ok(format!("all {} feasibility labels reproduced; worst held-out MA error {:.1}% ({})", MEMORY_ROWS.len(), 100.0 * worst.0, worst.1))
}

// 3

fn zero_offload_algebra() -> Result<String, String> {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let spec = (1usize..=8, 1usize..=24, 1usize..=8, 1000usize..60000).prop_map(|(hd, layers, heads, vocab)| {
        let heads = heads * 8;
        ModelSpec::new("p", heads * hd * 4, layers, heads, vocab, 512).expect("valid spec")
    });
    let strategy = (spec.clone(), spec, 0u32..4, any::<bool>(), 1usize..4, 16usize..1024);
    let mut runner = TestRunner::new(Config { cases: 256, failure_persistence: None, ..Config::default() });
    let cal = Calibration::fitted();
    runner
        .run(&strategy, |(t, s, mpk, grads, batch, seq)| {
            let m = ModelSet::new(vec![t], s);
            let g = BatchGeometry { micro_batch: batch, seq };
            let mp = 1usize << mpk;
            let dp = 8 / mp;
            let grid = DeviceGrid::new(mp, dp);
            let partial = if grads { StrategyFlags::baseline().dagger() } else { StrategyFlags::baseline() };
            let est = |f: &StrategyFlags| estimate_memory(&m, &grid, f, &g, &cal).expect("valid plan");
            let base = est(&StrategyFlags::baseline());
            let zero = est(&partial.zero());
            let off = est(&partial.offload());
            prop_assert_eq!(zero.optimizer_bytes, base.optimizer_bytes / dp as f64);
            let moved = zero.optimizer_bytes + if grads { zero.grad_bytes } else { 0.0 };
            prop_assert_eq!(off.offloaded_bytes, moved);
            prop_assert_eq!(off.cpu_mem, cal.base_host + moved * grid.gpu_count() as f64);
            prop_assert!((zero.ma - off.ma - moved).abs() <= 1e-9 * zero.ma);
            for flags in [StrategyFlags::baseline(), partial.zero(), partial.offload()] {
                let mut last = f64::INFINITY;
                for mp in [1usize, 2, 4, 8] {
                    let e = estimate_memory(&m, &DeviceGrid::new(mp, 1), &flags, &g, &cal).expect("valid plan");
                    prop_assert!(e.ma <= last, "MA grew at MP={} under {}", mp, flags.label());
                    last = e.ma;
                }
            }
            Ok(())
        })
        .map_err(fail)?;
    Ok("256 random spec/flag/grid cases".into())
}

// 4

const FD_EPS: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
/// Whole-model checks compare components smaller than this absolutely: some
/// gradients (key biases, under softmax shift invariance) are exactly zero and
/// their numeric estimates are pure round-off.
const FD_FLOOR: f64 = 1e-5;

fn hook_to_tensor(e: gkd::hooks::HookError) -> TensorError {
    TensorError::Parameter(e.to_string())
}

fn gradient_fidelity() -> Result<String, String> {
    let mut rng = Rng::new(404);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut record = |what: &str, err: f64| -> Result<(), String> {
        checked += 1;
        worst = worst.max(err);
        ensure(err < FD_TOL, || format!("{what}: relative error {err:e}"))
    };

    for kind in [DistanceKind::Mse, DistanceKind::Kl, DistanceKind::Ce, DistanceKind::Cos, DistanceKind::Huber] {
        for trial in 0..3 {
            let target = Tensor::randn(&[3, 6], 1.0, &mut rng);
            let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
            let spec = DistanceSpec::new(kind).temperature(1.0 + trial as f64);
            let err = finite_diff_check(
                |g, x| {
                    let t = g.constant(target.clone());
                    compute_distance(g, t, x, &spec).map_err(hook_to_tensor)
                },
                &x,
                FD_EPS,
            )
            .map_err(fail)?;
            record(&format!("{kind:?} trial {trial}"), err)?;
        }
    }

    // Relation transforms: per-head self/cross relations and feature transforms.
    let (b, s, d, heads) = (2, 4, 8, 2);
    for name in ["attention", "value", "qk"] {
        let x = Tensor::randn(&[b, s, d], 1.0, &mut rng);
        let k = Tensor::randn(&[b, s, d], 1.0, &mut rng);
        let tx = Tensor::randn(&[b, s, d], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, x| {
                let other = if name == "attention" { g.constant(k.clone()) } else { x };
                let r = apply_relation(g, x, other, heads).map_err(hook_to_tensor)?;
                let t = g.constant(tx.clone());
                let tr = apply_relation(g, t, t, heads).map_err(hook_to_tensor)?;
                let spec = DistanceSpec::new(DistanceKind::Kl);
                compute_distance_between(g, Side::probs(tr), Side::probs(r), &spec, name).map_err(hook_to_tensor)
            },
            &x,
            FD_EPS,
        )
        .map_err(fail)?;
        record(&format!("{name} relation"), err)?;
    }
    for transform in [Transform::PairwiseScaledDot, Transform::ClsNormalized] {
        let x = Tensor::randn(&[b, s, d], 1.0, &mut rng);
        let tx = Tensor::randn(&[b, s, d], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, x| {
                let a = apply_transform(g, x, transform).map_err(hook_to_tensor)?;
                let t = g.constant(tx.clone());
                let t = apply_transform(g, t, transform).map_err(hook_to_tensor)?;
                compute_distance(g, t, a, &DistanceSpec::new(DistanceKind::Mse)).map_err(hook_to_tensor)
            },
            &x,
            FD_EPS,
        )
        .map_err(fail)?;
        record(&format!("{transform:?}"), err)?;
    }

    for (name, cfg) in composed_configs() {
        let err = composed_fd(&cfg).map_err(|e| format!("{name}: {e}"))?;
        record(name, err)?;
    }
    Ok(format!("{checked} checks, max relative error {worst:.2e}"))
}

fn term(student: FeatureKind, teacher: FeatureKind, layers: (LayerSelector, LayerSelector), distance: DistanceSpec) -> LossTerm {
    LossTerm::new(
        ExtractionHook::new(Target::Student, student).layers(layers.0),
        ExtractionHook::new(Target::Teacher(0), teacher).layers(layers.1),
        distance,
    )
}

fn composed_configs() -> Vec<(&'static str, HookConfig)> {
    use FeatureKind as F;
    use LayerSelector as L;
    let pair = (L::All, L::UniformMap);
    let last = (L::Last, L::Last);
    let dist = DistanceSpec::new;
    let pointwise = vec![
        term(F::Emb, F::Emb, last, dist(DistanceKind::Mse)),
        term(F::HS, F::HS, pair, dist(DistanceKind::Huber)).weight(Weight::Value(0.5)),
        term(F::Att, F::Att, pair, dist(DistanceKind::Kl)),
        term(F::Q, F::Q, last, dist(DistanceKind::Kl).relation(gkd::hooks::Relation::QkRelation)),
        term(F::Q, F::Q, last, dist(DistanceKind::Kl).relation(gkd::hooks::Relation::AttentionRelation)),
        term(F::V, F::V, last, dist(DistanceKind::Mse).relation(gkd::hooks::Relation::ValueRelation)),
        LossTerm::new(
            ExtractionHook::new(Target::Student, F::HS).transform(Transform::PairwiseScaledDot),
            ExtractionHook::new(Target::Teacher(0), F::HS).transform(Transform::PairwiseScaledDot),
            dist(DistanceKind::Mse),
        ),
        LossTerm::new(
            ExtractionHook::new(Target::Student, F::HS).transform(Transform::ClsNormalized),
            ExtractionHook::new(Target::Teacher(0), F::HS).transform(Transform::ClsNormalized),
            dist(DistanceKind::Cos),
        ),
        term(F::Soft, F::Soft, last, dist(DistanceKind::Kl).temperature(2.0)),
        term(F::Soft, F::Hard, last, dist(DistanceKind::Ce)),
        LossTerm::new(
            ExtractionHook::new(Target::Student, F::Soft),
            ExtractionHook::new(Target::Gold, F::Hard),
            dist(DistanceKind::Ce),
        ),
    ];
    let aggregates = [Aggregate::Alp, Aggregate::Contrastive, Aggregate::Ckd, Aggregate::Mgskd, Aggregate::Universal]
        .into_iter()
        .map(|a| {
            let layers = if matches!(a, Aggregate::Alp | Aggregate::Universal) { pair } else { last };
            term(F::HS, F::HS, layers, dist(DistanceKind::Mse)).aggregate(a)
        })
        .collect();
    vec![
        ("composed pointwise terms", HookConfig::new(StageKind::Task, pointwise)),
        ("composed aggregate terms", HookConfig::new(StageKind::Task, aggregates)),
    ]
}

/// Finite differences of a composed loss with respect to every student parameter.
fn composed_fd(cfg: &HookConfig) -> Result<f64, String> {
    let sspec = ModelSpec::new("fd-student", 8, 2, 2, 32, 8).map_err(fail)?;
    let tspec = ModelSpec::new("fd-teacher", 8, 4, 2, 32, 8).map_err(fail)?;
    let mut rng = Rng::new(17);
    // Move away from the small initial scale, where attention is nearly uniform
    // and key gradients vanish below finite-difference resolution.
    let mut generic = |spec: &ModelSpec| -> Result<TransformerModel, String> {
        let mut m = TransformerModel::random(spec, &mut rng).map_err(fail)?;
        for t in m.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
        }
        Ok(m)
    };
    let mut student = generic(&sspec)?;
    let teacher = generic(&tspec)?;
    let corpus = generate_corpus(5, 40, 32, 8).map_err(fail)?;
    let batch = corpus.batches(Split::Train, StageKind::Task, 4, 0).swap_remove(0);
    let ctx = StageContext { student: &sspec, sources: vec![&tspec], teachers: 1, state: IterState::new(0, 1, 1), seed: 0 };
    let res = resolve_terms(cfg, &ctx).map_err(fail)?;
    let aux = AuxModel::for_stage(cfg, &ctx, &mut rng).map_err(fail)?;
    let sreq = res.student_request(View::Base, &batch.view).ok_or("no student taps")?;
    let treq = res.model_request(0, View::Base, &batch.view).ok_or("no teacher taps")?;

    let loss = |student: &TransformerModel, grads: bool| -> Result<(f64, Vec<Option<Vec<f64>>>), String> {
        let mut g = Graph::new();
        let mut sb = student.bind(&mut g, true);
        let mut tb = teacher.bind(&mut g, false);
        let ab = aux.bind(&mut g);
        let tf = tb.forward(&mut g, &batch.tokens, &treq).map_err(fail)?;
        let sf = sb.forward(&mut g, &batch.tokens, &sreq).map_err(fail)?;
        let sv = ViewTaps { base: sf.taps, interchange: None };
        let tv = ViewTaps { base: tf.taps, interchange: None };
        let src = FeatureSources { student: &sv, models: vec![Some(&tv)], gold: Some(&batch.gold) };
        let out = compose_loss(&mut g, cfg, &res, &ctx, &src, &ab, &TeacherMix::uniform(1)).map_err(fail)?;
        let value = g.value(out.loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(out.loss).map_err(fail)?;
        Ok((value, sb.vars().iter().map(|v| g.grad(*v).map(|s| s.to_vec())).collect()))
    };

    let (_, analytic) = loss(&student, true)?;
    let mut worst = 0.0f64;
    for i in 0..student.tensors().len() {
        for j in 0..student.tensors()[i].numel() {
            let orig = student.tensors()[i].data()[j];
            let mut at = |h: f64| -> Result<f64, String> {
                student.tensors_mut()[i].data_mut()[j] = orig + h;
                let v = loss(&student, false)?.0;
                student.tensors_mut()[i].data_mut()[j] = orig;
                Ok(v)
            };
            let numeric = (8.0 * (at(FD_EPS)? - at(-FD_EPS)?) - (at(2.0 * FD_EPS)? - at(-2.0 * FD_EPS)?)) / (12.0 * FD_EPS);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

// 5

fn random_batch(rng: &mut Rng, vocab: usize) -> TokenBatch {
    let (b, s) = (3, 8);
    TokenBatch::new((0..b * s).map(|_| rng.below(vocab)).collect(), b, s).expect("valid batch")
}

fn same(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn operation_hook_oracles() -> Result<String, String> {
    let sspec = ModelSpec::new("op-student", 8, 2, 2, 32, 8).map_err(fail)?;
    for trial in 0..50u64 {
        let mut rng = Rng::new(9000 + trial);
        let tlayers = if trial % 2 == 0 { 2 } else { 4 };
        let tspec = ModelSpec::new("op-teacher", 8, tlayers, 2, 32, 8).map_err(fail)?;
        let student = TransformerModel::random(&sspec, &mut rng).map_err(fail)?;
        let teacher = TransformerModel::random(&tspec, &mut rng).map_err(fail)?;
        let base = random_batch(&mut rng, 32);
        let source = random_batch(&mut rng, 32);
        let none = TapRequest::default();

        // Interchange against a splice of plain buffers.
        let layer = 1 + rng.below(2);
        let dims = 1 + rng.below(8);
        let mut g = Graph::new();
        let mut b = student.bind(&mut g, false);
        let out = interchange_forward(&mut g, &mut b, &base, &source, layer, dims, &none).map_err(fail)?;
        let mut o = Graph::new();
        let mut b = student.bind(&mut o, false);
        let run_to = |o: &mut Graph, b: &mut gkd::model::Bound<'_>, tokens: &TokenBatch| -> Result<Var, String> {
            let mut h = b.embed(o, tokens, &mut Taps::none()).map_err(fail)?;
            for l in 1..=layer {
                h = b.layer(o, l, h, &mut Taps::none()).map_err(fail)?;
            }
            Ok(h)
        };
        let hb = run_to(&mut o, &mut b, &base)?;
        let hs = run_to(&mut o, &mut b, &source)?;
        let mut mixed = o.value(hb).data().to_vec();
        for (row, src) in mixed.chunks_mut(8).zip(o.value(hs).data().chunks(8)) {
            row[..dims].copy_from_slice(&src[..dims]);
        }
        let mut h = o.constant(Tensor::new(o.shape(hb).to_vec(), mixed).map_err(fail)?);
        for l in layer + 1..=2 {
            h = b.layer(&mut o, l, h, &mut Taps::none()).map_err(fail)?;
        }
        let logits = b.head(&mut o, h).map_err(fail)?;
        ensure(same(g.value(out.logits), o.value(logits)), || format!("trial {trial}: interchange differs from splice"))?;

        // Block replacement at a random probability and at both extremes.
        for p in [rng.next_f64(), 0.0, 1.0] {
            let hooks = vec![OperationHook::ReplaceBlock { probability: Weight::Value(p), teacher: 0 }];
            let plan = plan_operations(&hooks, &BTreeMap::new(), &IterState::new(0, 1, 1), &sspec, &[&tspec], &mut Rng::new(trial))
                .map_err(fail)?;
            let rp = plan.replace.ok_or("no replacement plan")?;
            if p == 0.0 {
                ensure(rp.replaced.iter().all(|r| !r), || format!("trial {trial}: p=0 replaced a block"))?;
            }
            if p == 1.0 {
                ensure(rp.replaced.iter().all(|&r| r), || format!("trial {trial}: p=1 kept a block"))?;
            }
            let mut g = Graph::new();
            let mut sb = student.bind(&mut g, false);
            let mut tb = teacher.bind(&mut g, false);
            let out = run_student(&mut g, &mut sb, Some(&mut tb), ReplaceProjections::default(), Some(&rp), &base, &none)
                .map_err(fail)?;
            let mut o = Graph::new();
            let mut sb = student.bind(&mut o, false);
            let mut tb = teacher.bind(&mut o, false);
            let mut h = sb.embed(&mut o, &base, &mut Taps::none()).map_err(fail)?;
            for i in 1..=2 {
                if rp.replaced[i - 1] {
                    for j in rp.groups[i - 1].clone() {
                        h = tb.layer(&mut o, j, h, &mut Taps::none()).map_err(fail)?;
                    }
                } else {
                    h = sb.layer(&mut o, i, h, &mut Taps::none()).map_err(fail)?;
                }
            }
            let logits = sb.head(&mut o, h).map_err(fail)?;
            ensure(same(g.value(out.logits), o.value(logits)), || format!("trial {trial}: replacement at p={p} differs"))?;
            if p == 0.0 {
                let mut q = Graph::new();
                let plain = student.forward_with_taps(&mut q, &base, &none).map_err(fail)?;
                ensure(same(g.value(out.logits), q.value(plain.logits)), || format!("trial {trial}: p=0 is not the student"))?;
            }
        }
    }
    Ok("50 trials bitwise, p=0 and p=1 exact".into())
}

// 6

fn stage_settings(kind: StageKind, iterations: usize, lr: f64) -> StageConfig {
    let mut c = StageConfig::new(kind, iterations);
    c.dropout = 0.0;
    c.attention_dropout = 0.0;
    c.snapshot_every = 0;
    c.optim.lr = lr;
    c
}

/// Methods whose staged schedules raise the loss by design.
const STAGED: [&str; 2] = ["MobileBERT", "SID"];

fn catalog_liveness() -> Result<String, String> {
    // One fixed training batch so every stage optimises a stationary objective.
    let corpus = generate_corpus(3, 10, 256, 16).map_err(fail)?;
    let tspec = named_spec("toy-teacher").map_err(fail)?;
    let teacher_cfg = stage_settings(StageKind::Task, 300, 1e-3);
    let (t1, _) = train_reference(&tspec, &corpus, &teacher_cfg, 1).map_err(fail)?;
    let (t2, _) = train_reference(&tspec, &corpus, &teacher_cfg, 2).map_err(fail)?;
    let mut problems = Vec::new();
    for name in METHOD_NAMES {
        let desc = get_descriptor(name).map_err(fail)?;
        let violations = validate(&desc);
        if !violations.is_empty() {
            problems.push(format!("{name} invalid: {violations:?}"));
            continue;
        }
        let teachers = match desc.orchestration {
            Orchestration::MultiTeacher { .. } => vec![&t1, &t2],
            _ => vec![&t1],
        };
        let run = PipelineRun {
            init_override: (desc.init_strategy == InitStrategy::TruncateTeacher).then_some(InitStrategy::Random),
            descriptor: desc,
            teachers,
            assistants: vec![named_spec("toy-assistant").map_err(fail)?, named_spec("toy-assistant-small").map_err(fail)?],
            student: named_spec("toy-student").map_err(fail)?,
            stages: vec![stage_settings(StageKind::Pretraining, 200, 1e-4), stage_settings(StageKind::Task, 200, 1e-4)],
            corpus: &corpus,
            init_checkpoint: None,
            checkpoint_dir: None,
            seed: 5,
        };
        let out = match run_pipeline(&run) {
            Ok(o) => o,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        for stage in &out.stages {
            if stage.losses.len() != 200 || !stage.losses.iter().all(|l| l.is_finite()) {
                problems.push(format!("{}: {} iterations, finite={}", stage.name, stage.losses.len(), stage.losses.iter().all(|l| l.is_finite())));
            }
            if STAGED.contains(&name) {
                continue;
            }
            let smooth: Vec<f64> = stage.losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
            if let Some(i) = smooth.windows(2).position(|w| w[1] > w[0]) {
                let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
                let worst = smooth.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
                problems.push(format!("{} smoothed loss rises {rises}x from window {i} (largest {worst:.2e})", stage.name));
            }
        }
    }
    ensure(problems.is_empty(), || problems.join("; "))?;
    Ok(format!("{} methods validated, ran 200 iterations per stage, finite and non-increasing", METHOD_NAMES.len()))
}

// 7

fn same_terms(a: &MethodDescriptor, b: &MethodDescriptor) -> bool {
    [StageKind::Pretraining, StageKind::Task].into_iter().all(|k| term_set(a, k) == term_set(b, k))
}

fn combination_correctness() -> Result<String, String> {
    let tiny = without_feature(&get_descriptor("TinyBERT").map_err(fail)?, FeatureKind::Att);
    let minilm = get_descriptor("MiniLMv2").map_err(fail)?;
    let soft = soft_kl();
    let none = BTreeMap::new();
    let merged = combine(&[tiny.clone(), minilm.clone(), soft.clone()], &none).map_err(fail)?;
    ensure(same_terms(&merged, &best_c()), || "combination differs from BestC".into())?;
    for d in [&tiny, &minilm, &soft, &merged] {
        let twice = combine(&[d.clone(), d.clone()], &none).map_err(fail)?;
        ensure(same_terms(&twice, d), || format!("combine is not idempotent on {}", d.name))?;
    }
    let left = combine(&[combine(&[tiny.clone(), minilm.clone()], &none).map_err(fail)?, soft.clone()], &none).map_err(fail)?;
    let right = combine(&[tiny, combine(&[minilm, soft], &none).map_err(fail)?], &none).map_err(fail)?;
    ensure(same_terms(&left, &right), || "combine is not associative".into())?;
    Ok("BestC term set reproduced; idempotent and associative".into())
}

// 8

fn hard_only() -> MethodDescriptor {
    MethodDescriptor {
        name: "hard-labels".into(),
        orchestration: Orchestration::SingleTeacher,
        init_strategy: InitStrategy::Random,
        stages: vec![hard_label_stage(StageKind::Task)],
    }
}

fn distillation_benefit() -> Result<String, String> {
    let corpus: SyntheticCorpus = generate_corpus(11, 480, 256, 16).map_err(fail)?;
    let validation = corpus.batches(Split::Validation, StageKind::Task, 8, 0);
    let tspec = named_spec("toy-teacher").map_err(fail)?;
    let (teacher, _) = train_reference(&tspec, &corpus, &StageConfig::new(StageKind::Task, 600), 21).map_err(fail)?;
    let tacc = evaluate(&teacher, &validation).map_err(fail)?.accuracy;
    let mut wins = 0;
    let mut report = Vec::new();
    for seed in 0..3u64 {
        let accuracy = |desc: MethodDescriptor| -> Result<f64, String> {
            let run = PipelineRun {
                descriptor: desc,
                teachers: vec![&teacher],
                assistants: Vec::new(),
                student: named_spec("toy-student").map_err(fail)?,
                stages: vec![StageConfig::new(StageKind::Task, 300)],
                corpus: &corpus,
                init_override: None,
                init_checkpoint: None,
                checkpoint_dir: None,
                seed,
            };
            let out = run_pipeline(&run).map_err(fail)?;
            Ok(evaluate(&out.student, &validation).map_err(fail)?.accuracy)
        };
        let kd = accuracy(get_descriptor("KD").map_err(fail)?)?;
        let hard = accuracy(hard_only())?;
        if kd >= hard {
            wins += 1;
        }
        report.push(format!("seed {seed}: KD {kd:.3} vs hard {hard:.3}"));
    }
    let detail = format!("teacher {tacc:.3}; {}", report.join(", "));
    ensure(wins >= 2, || format!("KD matched the hard-label student in {wins}/3 seeds ({detail})"))?;
    Ok(format!("KD ≥ hard-label student in {wins}/3 seeds ({detail})"))
}

// 9

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average rank by counting: 1 + #smaller + (#equal − 1)/2.
fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn analytics_correctness() -> Result<String, String> {
    let mut rng = Rng::new(99);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for trial in 0..1000 {
        let n = 3 + rng.below(10);
        // Every third series draws from a few levels to force ties.
        let draw = |rng: &mut Rng| if trial % 3 == 0 { rng.below(4) as f64 } else { rng.normal() };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let (rx, ry) = (rank_oracle(&x), rank_oracle(&y));
        let pairs = [(pearson(&x, &y), pearson_oracle(&x, &y)), (spearman(&x, &y), pearson_oracle(&rx, &ry))];
        for (got, want) in pairs {
            match got {
                Ok(v) => {
                    ensure(want.is_finite(), || format!("trial {trial}: defined value {v} for a constant series"))?;
                    worst = worst.max((v - want).abs());
                    compared += 1;
                }
                Err(_) => ensure(!want.is_finite(), || format!("trial {trial}: undefined but oracle gives {want}"))?,
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:e}"))?;
    let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[3.0, 1.0, 4.0, 2.0]).map_err(fail)?;
    ensure(s == 0.0, || format!("spearman([1,2,3,4],[3,1,4,2]) = {s}"))?;
    for trial in 0..200 {
        let n = 2 + rng.below(20);
        let v: Vec<f64> = (0..n).map(|_| rng.normal() * 100.0).collect();
        let z = normalize_series(&v);
        let (lo, hi) = (z.iter().cloned().fold(f64::INFINITY, f64::min), z.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        ensure(lo == 0.0 && hi == 1.0, || format!("trial {trial}: normalized range [{lo}, {hi}]"))?;
    }
    Ok(format!("{compared} coefficients within {worst:.1e}; spearman example exactly 0; bounds exact"))
}

// 10

const DETERMINISM_CONFIG: &str = r#"{
  "method": "TinyBERT",
  "models": { "teachers": ["toy-teacher"], "student": "toy-student" },
  "stages": [
    { "kind": "pretraining", "iterations": 12, "snapshot_every": 4 },
    { "kind": "task", "iterations": 12, "snapshot_every": 4 }
  ],
  "init": "random",
  "seeds": [3],
  "data": { "size": 80 },
  "teacher_training": { "kind": "task", "iterations": 20, "snapshot_every": 0 }
}"#;

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(fail)? {
            let path = entry.map_err(fail)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(fail)?.display().to_string();
                out.insert(rel, std::fs::read(&path).map_err(fail)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let config = tmp.path().join("run.json");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(fail)?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_gkd"))
            .args(["distill", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(fail)?;
        ensure(status.status.success(), || format!("distill failed: {}", String::from_utf8_lossy(&status.stderr)))?;
        trees.push(files(&out)?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "runs wrote different file sets".into())?;
    for key in ["seed-3/student.ckpt", "seed-3/telemetry.jsonl"] {
        ensure(a.contains_key(key), || format!("{key} missing"))?;
    }
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure(differing.is_empty(), || format!("files differ: {differing:?}"))?;
    Ok(format!("{} files bit-identical across two runs", a.len()))
}
