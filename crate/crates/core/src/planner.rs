//! Teacher-student parallel sharding and the analytic device-memory model.
//!
//! Every teacher and student matrix is split into `MP` equal column/head
//! blocks, and each device of an MP group holds the matching block of every
//! model, so teacher features for a student shard never leave the device.
//! Memory is predicted per device from byte-accounting constants plus five
//! calibrated scalars (see [`Calibration`]).

use serde::{Deserialize, Serialize};

use crate::model::{count_params, ModelSpec};

/// 2^30 bytes.
pub const GIB: f64 = 1_073_741_824.0;
/// Default per-device memory budget.
pub const DEFAULT_BUDGET: f64 = 40.0 * GIB;
/// Default number of devices on a node.
pub const DEFAULT_DEVICES: usize = 8;

/// fp16 parameter bytes.
pub const PARAM_BYTES: f64 = 2.0;
/// fp16 gradient bytes.
pub const GRAD_BYTES: f64 = 2.0;
/// Optimizer-side bytes per student parameter: fp32 master copy, two Adam
/// moments and the fp32 gradient buffer.
pub const OPTIMIZER_BYTES: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("grid error: {0}")]
    Grid(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("strategy error: {0}")]
    Strategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceGrid {
    pub mp: usize,
    pub dp: usize,
    /// Bytes available per device.
    pub gpu_mem_budget: f64,
    pub available: usize,
}

impl DeviceGrid {
    pub fn new(mp: usize, dp: usize) -> Self {
        Self { mp, dp, gpu_mem_budget: DEFAULT_BUDGET, available: DEFAULT_DEVICES }
    }

    pub fn with_budget(mut self, bytes: f64) -> Self {
        self.gpu_mem_budget = bytes;
        self
    }

    pub fn gpu_count(&self) -> usize {
        self.mp * self.dp
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.mp == 0 || self.dp == 0 {
            return Err(PlanError::Grid("MP and DP must be positive".into()));
        }
        if self.gpu_count() > self.available {
            return Err(PlanError::Grid(format!(
                "MP·DP = {} exceeds {} available devices",
                self.gpu_count(),
                self.available
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every device holds full replicas of all models.
    Previous,
    /// Matching teacher and student blocks are colocated across the MP group.
    TeacherStudentParallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyFlags {
    pub strategy: Strategy,
    pub zero_partition: bool,
    pub offload: bool,
    /// Partition (and, with offload, move) gradients as well as optimizer states.
    pub also_partition_grads: bool,
}

impl StrategyFlags {
    pub fn baseline() -> Self {
        Self { strategy: Strategy::TeacherStudentParallel, zero_partition: false, offload: false, also_partition_grads: false }
    }

    pub fn previous() -> Self {
        Self { strategy: Strategy::Previous, ..Self::baseline() }
    }

    pub fn zero(mut self) -> Self {
        self.zero_partition = true;
        self
    }

    pub fn dagger(mut self) -> Self {
        self.zero_partition = true;
        self.also_partition_grads = true;
        self
    }

    pub fn offload(mut self) -> Self {
        self.zero_partition = true;
        self.offload = true;
        self
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.offload && !self.zero_partition {
            return Err(PlanError::Strategy("offload requires ZeRO partitioning".into()));
        }
        Ok(())
    }

    /// Short label in the style `ZeRO†+Offload`.
    pub fn label(&self) -> String {
        let mut s = match self.strategy {
            Strategy::Previous => "previous".to_string(),
            Strategy::TeacherStudentParallel => "teacher-student".to_string(),
        };
        if self.zero_partition {
            s.push_str(if self.also_partition_grads { "+ZeRO†" } else { "+ZeRO" });
        }
        if self.offload {
            s.push_str("+Offload");
        }
        s
    }
}

/// Teachers (frozen, fp16 only) and the trained student.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub teachers: Vec<ModelSpec>,
    pub student: ModelSpec,
}

impl ModelSet {
    pub fn new(teachers: Vec<ModelSpec>, student: ModelSpec) -> Self {
        Self { teachers, student }
    }

    pub fn all(&self) -> impl Iterator<Item = (Role, &ModelSpec)> {
        self.teachers.iter().map(|t| (Role::Teacher, t)).chain(std::iter::once((Role::Student, &self.student)))
    }

    pub fn teacher_params(&self) -> f64 {
        self.teachers.iter().map(|t| count_params(t) as f64).sum()
    }

    pub fn student_params(&self) -> f64 {
        count_params(&self.student) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// One model's share on one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShard {
    pub model: usize,
    pub name: String,
    pub role: Role,
    /// Attention heads `[start, end)` held by this device.
    pub heads: (usize, usize),
    /// FFN inner columns `[start, end)` held by this device.
    pub ffn_columns: (usize, usize),
    /// Fraction of each parameter matrix held.
    pub fraction: f64,
    pub param_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub device: usize,
    pub mp_rank: usize,
    pub dp_rank: usize,
    pub shards: Vec<ModelShard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub grid: DeviceGrid,
    pub flags: StrategyFlags,
    pub devices: Vec<DeviceShard>,
}

impl ShardPlan {
    pub fn total_param_bytes(&self) -> f64 {
        self.devices.iter().flat_map(|d| &d.shards).map(|s| s.param_bytes).sum()
    }
}

pub fn plan_shards(models: &ModelSet, grid: &DeviceGrid, flags: &StrategyFlags) -> Result<ShardPlan, PlanError> {
    grid.validate()?;
    flags.validate()?;
    if flags.strategy == Strategy::Previous && grid.mp != 1 {
        return Err(PlanError::Strategy("the previous strategy replicates models and needs MP = 1".into()));
    }
    for (_, spec) in models.all() {
        if spec.heads % grid.mp != 0 || (4 * spec.dim) % grid.mp != 0 {
            return Err(PlanError::Split(format!(
                "{}: {} heads / FFN width {} not divisible by MP = {}",
                spec.name,
                spec.heads,
                4 * spec.dim,
                grid.mp
            )));
        }
    }
    let mut devices = Vec::with_capacity(grid.gpu_count());
    for dp_rank in 0..grid.dp {
        for mp_rank in 0..grid.mp {
            let shards = models
                .all()
                .enumerate()
                .map(|(i, (role, spec))| {
                    let h = spec.heads / grid.mp;
                    let f = 4 * spec.dim / grid.mp;
                    ModelShard {
                        model: i,
                        name: spec.name.clone(),
                        role,
                        heads: (mp_rank * h, (mp_rank + 1) * h),
                        ffn_columns: (mp_rank * f, (mp_rank + 1) * f),
                        fraction: 1.0 / grid.mp as f64,
                        param_bytes: count_params(spec) as f64 * PARAM_BYTES / grid.mp as f64,
                    }
                })
                .collect();
            devices.push(DeviceShard { device: dp_rank * grid.mp + mp_rank, mp_rank, dp_rank, shards });
        }
    }
    Ok(ShardPlan { grid: *grid, flags: *flags, devices })
}

/// Activation geometry of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchGeometry {
    pub micro_batch: usize,
    pub seq: usize,
}

/// Calibrated scalars of the memory and time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Activation bytes per (token · hidden unit · layer).
    pub alpha: f64,
    /// Cached-minus-allocated slack, bytes.
    pub kappa: f64,
    /// Host memory in use without any offloading, bytes.
    pub base_host: f64,
    /// Relative step-time growth per extra MP rank.
    pub c1: f64,
    /// Step-time factor of offloading.
    pub c2: f64,
}

// Measurements used for calibration. 110M⇒66M, MP=1, DP=8, seq 512.
const CAL_MA_GIB: f64 = 1.73;
const CAL_CA_GIB: f64 = 2.02;
const CAL_MEM_GIB: f64 = 57.60;
// 10B⇒2B, MP=2, DP=4, ZeRO without and with offload (ms per step).
const CAL_ZERO_MS: f64 = 119.72;
const CAL_OFFLOAD_MS: f64 = 387.19;
// 5B⇒1B at MP=1 and MP=8 (ms per step).
const CAL_MP1_MS: f64 = 53.34;
const CAL_MP8_MS: f64 = 231.95;

impl Calibration {
    /// Constants fit from the declared calibration measurements.
    pub fn fitted() -> Self {
        let t = crate::model::named_spec("110M").expect("built-in spec");
        let s = crate::model::named_spec("66M").expect("built-in spec");
        let params = PARAM_BYTES * count_params(&t) as f64
            + (PARAM_BYTES + GRAD_BYTES + OPTIMIZER_BYTES) * count_params(&s) as f64;
        let tokens_dl = t.max_seq as f64 * (t.dim * t.layers + s.dim * s.layers) as f64;
        Self {
            alpha: (CAL_MA_GIB * GIB - params) / tokens_dl,
            kappa: (CAL_CA_GIB - CAL_MA_GIB) * GIB,
            base_host: CAL_MEM_GIB * GIB,
            c1: (CAL_MP8_MS / CAL_MP1_MS - 1.0) / 7.0,
            c2: CAL_OFFLOAD_MS / CAL_ZERO_MS,
        }
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self::fitted()
    }
}

/// Per-device memory prediction. All byte figures are per device except `cpu_mem`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub ma: f64,
    pub ca: f64,
    pub cpu_mem: f64,
    pub relative_time: f64,
    pub feasible: bool,
    /// fp16 parameters of all resident models.
    pub param_bytes: f64,
    pub grad_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    /// Bytes this device keeps in host memory.
    pub offloaded_bytes: f64,
}

pub fn estimate_memory(
    models: &ModelSet,
    grid: &DeviceGrid,
    flags: &StrategyFlags,
    geometry: &BatchGeometry,
    cal: &Calibration,
) -> Result<CostEstimate, PlanError> {
    let plan = plan_shards(models, grid, flags)?;
    Ok(estimate_plan(&plan, models, geometry, cal))
}

fn estimate_plan(plan: &ShardPlan, models: &ModelSet, geometry: &BatchGeometry, cal: &Calibration) -> CostEstimate {
    let (grid, flags) = (&plan.grid, &plan.flags);
    let mp = grid.mp as f64;
    let dp = grid.dp as f64;
    let ps = models.student_params();

    let param_bytes = plan.devices[0].shards.iter().map(|s| s.param_bytes).sum::<f64>();
    let grad_per = if flags.also_partition_grads { GRAD_BYTES / dp } else { GRAD_BYTES };
    let opt_per = if flags.zero_partition { OPTIMIZER_BYTES / dp } else { OPTIMIZER_BYTES };
    let grad_total = ps * grad_per / mp;
    let opt_total = ps * opt_per / mp;
    let (grad_bytes, optimizer_bytes, offloaded_bytes) = if flags.offload {
        if flags.also_partition_grads {
            (0.0, 0.0, grad_total + opt_total)
        } else {
            (grad_total, 0.0, opt_total)
        }
    } else {
        (grad_total, opt_total, 0.0)
    };
    let dl: usize = models.all().map(|(_, s)| s.dim * s.layers).sum();
    let activation_bytes = cal.alpha * (geometry.micro_batch * geometry.seq) as f64 * dl as f64 / mp;

    let ma = param_bytes + grad_bytes + optimizer_bytes + activation_bytes;
    let ca = ma + cal.kappa;
    let cpu_mem = cal.base_host + offloaded_bytes * grid.gpu_count() as f64;
    let relative_time = (1.0 + cal.c1 * (mp - 1.0)) * if flags.offload { cal.c2 } else { 1.0 };
    CostEstimate {
        ma,
        ca,
        cpu_mem,
        relative_time,
        feasible: ca <= grid.gpu_mem_budget,
        param_bytes,
        grad_bytes,
        optimizer_bytes,
        activation_bytes,
        offloaded_bytes,
    }
}

/// One configuration evaluated by [`recommend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub grid: DeviceGrid,
    pub flags: StrategyFlags,
    /// `None` when the plan could not be constructed (e.g. heads not divisible).
    pub estimate: Option<CostEstimate>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Index into `trace` of the first feasible attempt.
    pub chosen: Option<usize>,
    pub trace: Vec<Attempt>,
}

impl Recommendation {
    pub fn is_exhausted(&self) -> bool {
        self.chosen.is_none()
    }

    pub fn choice(&self) -> Option<&Attempt> {
        self.chosen.map(|i| &self.trace[i])
    }
}

/// Escalate: plain data parallel, then ZeRO† (optimizer states and
/// gradients), then larger MP with ZeRO†, and finally ZeRO†+Offload.
pub fn recommend(
    models: &ModelSet,
    budget: f64,
    max_devices: usize,
    geometry: &BatchGeometry,
    cal: &Calibration,
) -> Recommendation {
    let mut candidates = Vec::new();
    let mps: Vec<usize> = (0..).map(|k| 1usize << k).take_while(|&m| m <= max_devices.max(1)).collect();
    let dp_for = |mp: usize| (max_devices / mp).max(1);
    candidates.push((1, StrategyFlags::baseline()));
    candidates.push((1, StrategyFlags::baseline().dagger()));
    for &mp in mps.iter().skip(1) {
        candidates.push((mp, StrategyFlags::baseline().dagger()));
    }
    for &mp in &mps {
        candidates.push((mp, StrategyFlags::baseline().dagger().offload()));
    }
    let mut trace = Vec::new();
    let mut chosen = None;
    for (mp, flags) in candidates {
        let grid = DeviceGrid { mp, dp: dp_for(mp), gpu_mem_budget: budget, available: max_devices.max(1) };
        let attempt = match estimate_memory(models, &grid, &flags, geometry, cal) {
            Ok(est) => Attempt { grid, flags, estimate: Some(est), note: None },
            Err(e) => Attempt { grid, flags, estimate: None, note: Some(e.to_string()) },
        };
        let ok = attempt.estimate.is_some_and(|e| e.feasible);
        trace.push(attempt);
        if ok {
            chosen = Some(trace.len() - 1);
            break;
        }
    }
    Recommendation { chosen, trace }
}
