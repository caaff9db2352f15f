use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gkd::cli::{distill, load_config, ConfigError};
use gkd::model::{count_params, named_spec, spec_names, FeatureKind};
use gkd::planner::{
    estimate_memory, recommend, BatchGeometry, Calibration, CostEstimate, DeviceGrid, ModelSet, StrategyFlags,
    DEFAULT_DEVICES, GIB,
};
use gkd::registry::{combine, get_descriptor, without_feature, MethodDescriptor};
use gkd::telemetry::{correlation_report, normalize_series, read_records, Against};

/// `println!` that reports write failures instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "gkd", version, about = "Knowledge distillation workbench for transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train teachers if needed, distill a student for every seed, and summarise.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config and GKD_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured seed list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Predict per-device memory for a teacher/student layout.
    Plan {
        #[arg(long = "teacher", required = true)]
        teachers: Vec<String>,
        #[arg(long)]
        student: String,
        #[arg(long, default_value_t = 1)]
        mp: usize,
        #[arg(long, default_value_t = 1)]
        dp: usize,
        /// Partition optimizer states across data-parallel ranks.
        #[arg(long)]
        zero: bool,
        /// Also partition gradients.
        #[arg(long)]
        partition_gradients: bool,
        /// Move partitioned states to host memory.
        #[arg(long)]
        offload: bool,
        /// Replicate every model on every device.
        #[arg(long)]
        previous: bool,
        #[arg(long, default_value_t = 40.0)]
        budget_gib: f64,
        #[arg(long, default_value_t = 1)]
        micro_batch: usize,
        /// Sequence length; defaults to the student's maximum.
        #[arg(long)]
        seq: Option<usize>,
        /// Search for the first feasible configuration instead.
        #[arg(long)]
        recommend: bool,
        #[arg(long, default_value_t = DEFAULT_DEVICES)]
        max_devices: usize,
        #[arg(long)]
        json: bool,
    },
    /// Parameter counts of named model specs.
    Params {
        #[arg(long = "spec")]
        specs: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Correlate recorded feature distances with loss or validation perplexity.
    Analyze {
        #[arg(long)]
        telemetry: PathBuf,
        #[arg(long, value_enum, default_value_t = AgainstArg::Loss)]
        against: AgainstArg,
        #[arg(long)]
        json: bool,
    },
    /// Merge descriptors into one document. Each item is a catalog name or a
    /// descriptor file, optionally suffixed `:-Feature` to drop a feature's terms.
    Combine {
        #[arg(required = true)]
        methods: Vec<String>,
        /// Write the document here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AgainstArg {
    Loss,
    Task,
}

/// Error classes reported on the last line of a failed run.
#[derive(Debug)]
enum Category {
    Config,
    Data,
    Training,
    Plan,
    Analysis,
    Io,
}

impl Category {
    fn code(&self) -> u8 {
        match self {
            Category::Config => 3,
            Category::Data => 4,
            Category::Training => 5,
            Category::Plan => 6,
            Category::Analysis => 7,
            Category::Io => 8,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Training => "training",
            Category::Plan => "plan",
            Category::Analysis => "analysis",
            Category::Io => "io",
        }
    }
}

#[derive(Debug)]
struct Failure(Category);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.0.name())
    }
}

impl std::error::Error for Failure {}

fn tagged<T, E: Into<anyhow::Error>>(r: Result<T, E>, c: Category) -> Result<T> {
    r.map_err(|e| e.into().context(Failure(c)))
}

fn category(err: &anyhow::Error) -> &Category {
    err.downcast_ref::<Failure>().map_or(&Category::Io, |f| &f.0)
}

/// The reader went away (e.g. piped into `head`); nothing left to report.
fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            let c = category(&err);
            let mut detail: Vec<String> = Vec::new();
            for e in err.chain() {
                let text = e.to_string().replace('\n', " ");
                // Skip the category tag and sources already quoted by their parent.
                if text == c.name() || detail.last().is_some_and(|d| d.ends_with(&text)) {
                    continue;
                }
                detail.push(text);
            }
            eprintln!("error[{}]: {}", c.name(), detail.join(": "));
            ExitCode::from(c.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distill { config, out, seeds } => run_distill(&config, out, seeds),
        Command::Plan {
            teachers,
            student,
            mp,
            dp,
            zero,
            partition_gradients,
            offload,
            previous,
            budget_gib,
            micro_batch,
            seq,
            recommend: search,
            max_devices,
            json,
        } => {
            let teachers = tagged(teachers.iter().map(|t| named_spec(t)).collect::<Result<Vec<_>, _>>(), Category::Config)?;
            let student = tagged(named_spec(&student), Category::Config)?;
            let geometry = BatchGeometry { micro_batch, seq: seq.unwrap_or(student.max_seq) };
            let models = ModelSet::new(teachers, student);
            let cal = Calibration::fitted();
            if search {
                let rec = recommend(&models, budget_gib * GIB, max_devices, &geometry, &cal);
                if json {
                    say!("{}", serde_json::to_string_pretty(&rec)?);
                } else {
                    print_plan_header()?;
                    for a in &rec.trace {
                        match &a.estimate {
                            Some(e) => print_plan_row(e, &a.grid, &a.flags)?,
                            None => say!("{:>10}  ({})", "-", a.note.as_deref().unwrap_or("not constructible")),
                        }
                    }
                    match rec.choice() {
                        Some(a) => say!("recommended: MP={} DP={} {}", a.grid.mp, a.grid.dp, a.flags.label()),
                        None => say!("exhausted: no configuration fits"),
                    }
                }
                return Ok(());
            }
            let mut flags = if previous { StrategyFlags::previous() } else { StrategyFlags::baseline() };
            if zero {
                flags = flags.zero();
            }
            if partition_gradients {
                flags = flags.dagger();
            }
            if offload {
                flags = flags.offload();
            }
            let grid = DeviceGrid::new(mp, dp).with_budget(budget_gib * GIB);
            let est = tagged(estimate_memory(&models, &grid, &flags, &geometry, &cal), Category::Plan)?;
            if json {
                let row = serde_json::json!({ "grid": grid, "flags": flags, "estimate": est });
                say!("{}", serde_json::to_string_pretty(&row)?);
            } else {
                print_plan_header()?;
                print_plan_row(&est, &grid, &flags)?;
                say!("feasible={}", est.feasible);
            }
            Ok(())
        }
        Command::Params { specs, json } => {
            let names: Vec<String> = if specs.is_empty() { spec_names().iter().map(|s| s.to_string()).collect() } else { specs };
            let mut rows = Vec::new();
            for n in &names {
                let spec = tagged(named_spec(n), Category::Config)?;
                rows.push((n.clone(), count_params(&spec)));
            }
            if json {
                let map: BTreeMap<&str, u64> = rows.iter().map(|(n, c)| (n.as_str(), *c)).collect();
                say!("{}", serde_json::to_string_pretty(&map)?);
            } else {
                for (n, c) in rows {
                    say!("{n:>20}  {}", group_thousands(c));
                }
            }
            Ok(())
        }
        Command::Analyze { telemetry, against, json } => {
            let records = tagged(read_records(&telemetry), Category::Data)?;
            let against = match against {
                AgainstArg::Loss => Against::Loss,
                AgainstArg::Task => Against::TaskMetric,
            };
            let report = tagged(correlation_report(&records, against), Category::Analysis)?;
            let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
            let normalized = normalize_series(&losses);
            if json {
                let doc = serde_json::json!({ "report": report, "normalized_loss": normalized });
                say!("{}", serde_json::to_string_pretty(&doc)?);
            } else {
                say!("{:<20} {:>10} {:>10} {:>7}", "feature", "pearson", "spearman", "points");
                for r in &report.rows {
                    say!("{:<20} {:>10.4} {:>10.4} {:>7}", r.key.to_string(), r.pearson, r.spearman, r.points);
                }
                if !report.undefined.is_empty() {
                    let u: Vec<String> = report.undefined.iter().map(ToString::to_string).collect();
                    say!("undefined: {}", u.join(", "));
                }
                say!();
                say!("{:>10} {:>12} {:>10}", "iteration", "loss", "normalized");
                for (r, n) in records.iter().zip(&normalized) {
                    say!("{:>10} {:>12.6} {:>10.4}", r.iteration, r.loss, n);
                }
            }
            Ok(())
        }
        Command::Combine { methods, out } => {
            let descs = methods.iter().map(|m| resolve_method(m)).collect::<Result<Vec<_>>>()?;
            let merged = tagged(combine(&descs, &BTreeMap::new()), Category::Config)?;
            let doc = merged.to_document();
            match out {
                Some(path) => tagged(std::fs::write(&path, doc + "\n"), Category::Io)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => say!("{doc}"),
            }
            Ok(())
        }
    }
}

fn run_distill(config: &Path, out: Option<PathBuf>, seeds: Vec<u64>) -> Result<()> {
    let mut cfg = load_config(config).map_err(|e| {
        let c = if matches!(e, ConfigError::Io { .. }) { "cannot load config" } else { "invalid config" };
        anyhow::Error::new(e).context(c).context(Failure(Category::Config))
    })?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    let out = out.or_else(|| std::env::var_os("GKD_OUT").map(PathBuf::from)).unwrap_or_else(|| cfg.output.clone());
    let summary = distill(&cfg, &out, |m| eprintln!("{m}")).map_err(|e| {
        use gkd::cli::DistillError as D;
        let c = match &e {
            D::Config(_) | D::Model(_) | D::Plan(_) => Category::Config,
            D::Data(_) | D::Telemetry(_) => Category::Data,
            D::Io { .. } => Category::Io,
            D::Training(_) => Category::Training,
        };
        anyhow::Error::new(e).context(Failure(c))
    })?;
    write!(std::io::stdout(), "{}", summary.to_text())?;
    say!("outputs in {}", out.display());
    Ok(())
}

fn resolve_method(item: &str) -> Result<MethodDescriptor> {
    let (name, drops) = match item.split_once(":-") {
        Some((n, rest)) => (n, rest.split(":-").collect::<Vec<_>>()),
        None => (item, Vec::new()),
    };
    let mut desc = if Path::new(name).is_file() {
        let text = tagged(std::fs::read_to_string(name), Category::Io).with_context(|| format!("reading {name}"))?;
        tagged(MethodDescriptor::from_document(&text), Category::Config)?
    } else {
        tagged(get_descriptor(name), Category::Config)?
    };
    for d in drops {
        let feature = FeatureKind::ALL
            .into_iter()
            .find(|f| f.as_str() == d)
            .ok_or_else(|| anyhow!("unknown feature `{d}`"))
            .context(Failure(Category::Config))?;
        desc = without_feature(&desc, feature);
    }
    if desc.stages.is_empty() {
        bail!(Failure(Category::Config));
    }
    Ok(desc)
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn print_plan_header() -> Result<()> {
    say!(
        "{:>10} {:>10} {:>8} {:>10} {:>4} {:>4} {:>5} {:>8} {:>9}",
        "MA(GiB)", "CA(GiB)", "time", "Mem(GiB)", "MP", "DP", "ZeRO", "Offload", "feasible"
    );
    Ok(())
}

fn print_plan_row(e: &CostEstimate, grid: &DeviceGrid, flags: &StrategyFlags) -> Result<()> {
    let zero = match (flags.zero_partition, flags.also_partition_grads) {
        (true, true) => "yes†",
        (true, false) => "yes",
        _ => "no",
    };
    say!(
        "{:>10.2} {:>10.2} {:>8.3} {:>10.2} {:>4} {:>4} {:>5} {:>8} {:>9}",
        e.ma / GIB,
        e.ca / GIB,
        e.relative_time,
        e.cpu_mem / GIB,
        grid.mp,
        grid.dp,
        zero,
        if flags.offload { "yes" } else { "no" },
        e.feasible
    );
    Ok(())
}
