//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 when the answer is an infeasibility verdict
//! (`feasible`, `autotune`), 1 on any error including bad usage.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use qsmodel_core::autotune::SearchSpace;
use qsmodel_core::report::{reference_plan, PlanChoice};
use qsmodel_core::specs::{ClusterSpec, HardwareSpec, KvMode, ModelSpec, ParallelismPlan};
use qsmodel_core::Calibration;

use crate::config::{builtin_calibration, builtin_hardware, from_json_str, load_calibration, load_cluster, resolve_model};
use crate::eval::{self, DefaultPlan};
use crate::render::{render, Format, Tabular};

#[derive(Debug, Parser)]
#[command(name = "qsmodel", version, about = "Decode-stage cost model for MoE versus quality-matched dense models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Output {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Calibration file (defaults to the shipped calibration).
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Hardware {
    /// Cluster file supplying hardware and GPU count; memory deductions come
    /// from the calibration.
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// GPU count (overrides the cluster file).
    #[arg(long)]
    gpus: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// s, q and qs for MoE configurations.
    Qs {
        /// The built-in literature table.
        #[arg(long)]
        builtin: bool,
        /// Built-in model ids or config paths.
        #[arg(long, value_delimiter = ',')]
        model: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        q: Vec<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Paired MoE/dense reuse rows.
    Pair {
        /// The shipped paired-reuse table (each row on its own cluster size).
        #[arg(long)]
        builtin: bool,
        #[arg(long, value_delimiter = ',')]
        model: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        q: Vec<f64>,
        #[arg(long, default_value_t = eval::DEFAULT_CONTEXT)]
        context: u64,
        /// `reference` (default), `auto`, or e.g. `tp=8,ep=8,kvp=8`.
        #[arg(long, default_value = "reference")]
        plan: String,
        #[command(flatten)]
        hardware: Hardware,
        #[command(flatten)]
        output: Output,
    },
    /// Throughput versus context, relative to MoE at the first context.
    Sweep {
        #[arg(long, default_value = "deepseek-v3")]
        model: String,
        #[arg(long, default_value_t = qsmodel_core::qs::DEFAULT_Q)]
        q: f64,
        #[arg(long, value_delimiter = ',', default_values_t = eval::SWEEP_CONTEXTS)]
        contexts: Vec<u64>,
        /// `auto` (default), `reference`, or an explicit plan.
        #[arg(long, default_value = "auto")]
        plan: String,
        #[command(flatten)]
        hardware: Hardware,
        #[command(flatten)]
        output: Output,
    },
    /// Per-token HBM / compute / exposed-comm split.
    Attribution {
        #[arg(long, default_value = "deepseek-v3")]
        model: String,
        #[arg(long, default_value_t = qsmodel_core::qs::DEFAULT_Q)]
        q: f64,
        #[arg(long, value_delimiter = ',', default_values_t = eval::ATTRIBUTION_CONTEXTS)]
        contexts: Vec<u64>,
        #[arg(long, default_value = "auto")]
        plan: String,
        #[command(flatten)]
        hardware: Hardware,
        #[command(flatten)]
        output: Output,
    },
    /// Dense-q throughput relative to each MoE at one context.
    Compare {
        /// The shipped comparison rows.
        #[arg(long)]
        builtin: bool,
        #[arg(long, value_delimiter = ',')]
        model: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        q: Vec<f64>,
        #[arg(long, default_value_t = eval::DEFAULT_CONTEXT)]
        context: u64,
        #[arg(long, default_value = "auto")]
        plan: String,
        #[command(flatten)]
        hardware: Hardware,
        #[command(flatten)]
        output: Output,
    },
    /// Rank every plan of a search space.
    Autotune {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = eval::DEFAULT_CONTEXT)]
        context: u64,
        /// JSON search space (defaults to the standard space).
        #[arg(long)]
        space: Option<PathBuf>,
        #[command(flatten)]
        hardware: Hardware,
        #[command(flatten)]
        output: Output,
    },
    /// Memory feasibility and latency of one plan.
    Feasible {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = eval::DEFAULT_CONTEXT)]
        context: u64,
        #[arg(long, default_value = "reference")]
        plan: String,
        #[command(flatten)]
        hardware: Hardware,
        #[command(flatten)]
        output: Output,
    },
    /// Print a JSON Schema, or write all of them with `--dir`.
    Schema {
        /// Schema name (e.g. `model`, `evaluate-request`); omit to list them.
        name: Option<String>,
        #[arg(long, conflicts_with = "name")]
        dir: Option<PathBuf>,
    },
    /// HTTP JSON planner service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Serve model configs from this directory instead of the built-ins.
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
}

/// A `--plan` value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanArg {
    Auto,
    Reference,
    Explicit(ParallelismPlan),
}

/// Parses `auto`, `reference`, or `key=value` pairs (`tp`, `ep`, `pp`, `dp`,
/// `kvp` / `cp`, `kv=none`) separated by commas or spaces. Missing factors
/// default to 1, except `dp`, which fills the remaining GPUs.
pub fn parse_plan(text: &str, num_gpus: u32) -> anyhow::Result<PlanArg> {
    match text.trim().to_ascii_lowercase().as_str() {
        "auto" => return Ok(PlanArg::Auto),
        "reference" | "ref" => return Ok(PlanArg::Reference),
        _ => {}
    }
    let (mut tp, mut ep, mut pp, mut dp) = (1u32, 1u32, 1u32, None);
    let (mut mode, mut degree) = (KvMode::None, 1u32);
    for part in text.split([',', ' ']).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').with_context(|| format!("plan component `{part}` is not key=value"))?;
        let k = k.trim().to_ascii_lowercase();
        if k == "kv" {
            if !v.eq_ignore_ascii_case("none") {
                bail!("`kv` only accepts `none`; use kvp=N or cp=N");
            }
            continue;
        }
        let n: u32 = v.trim().parse().with_context(|| format!("plan factor `{part}` is not a positive integer"))?;
        match k.as_str() {
            "tp" => tp = n,
            "ep" => ep = n,
            "pp" => pp = n,
            "dp" => dp = Some(n),
            "kvp" => (mode, degree) = (KvMode::Kvp, n),
            "cp" => (mode, degree) = (KvMode::Cp, n),
            _ => bail!("unknown plan factor `{k}` (expected tp, ep, pp, dp, kvp, cp, kv)"),
        }
    }
    let replica = tp as u64 * pp as u64 * degree as u64;
    let dp = match dp {
        Some(d) => d,
        None if replica > 0 && (num_gpus as u64).is_multiple_of(replica) => (num_gpus as u64 / replica) as u32,
        None => bail!("tp·pp·kv_degree = {replica} does not divide {num_gpus} GPUs"),
    };
    Ok(PlanArg::Explicit(ParallelismPlan { tp, ep, pp, kv_mode: mode, kv_degree: degree, dp }))
}

fn choice(plan: &str, num_gpus: u32) -> anyhow::Result<PlanChoice> {
    Ok(match parse_plan(plan, num_gpus)? {
        PlanArg::Auto => eval::plan_choice(None, DefaultPlan::Autotune, num_gpus),
        PlanArg::Reference => eval::plan_choice(None, DefaultPlan::Reference, num_gpus),
        PlanArg::Explicit(p) => PlanChoice::Fixed(p),
    })
}

fn calibration(path: &Option<PathBuf>) -> anyhow::Result<Calibration> {
    Ok(match path {
        Some(p) => load_calibration(p)?,
        None => builtin_calibration(),
    })
}

fn cluster(h: &Hardware, cal: &Calibration) -> anyhow::Result<ClusterSpec> {
    let (hw, gpus): (HardwareSpec, u32) = match &h.cluster {
        Some(p) => {
            let c = load_cluster(p)?;
            (c.hardware, c.num_gpus)
        }
        None => (builtin_hardware(), eval::DEFAULT_GPUS),
    };
    Ok(eval::cluster(&hw, h.gpus.unwrap_or(gpus), cal)?)
}

fn models(ids: &[String]) -> anyhow::Result<Vec<ModelSpec>> {
    if ids.is_empty() {
        bail!("--model is required (or use --builtin)");
    }
    ids.iter().map(|id| Ok(resolve_model(id)?)).collect()
}

fn emit<T: Tabular + ?Sized>(value: &T, output: &Output) -> anyhow::Result<()> {
    let text = render(value, output.format);
    match &output.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn execute(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Qs { builtin, model, q, output } => {
            if builtin || model.is_empty() {
                emit(eval::table1()?.as_slice(), &output)?;
            } else {
                emit(eval::qs_reports(&models(&model)?, &q)?.as_slice(), &output)?;
            }
            Ok(0)
        }
        Command::Pair { builtin, model, q, context, plan, hardware, output } => {
            let cal = calibration(&output.calibration)?;
            let rows = if builtin {
                let hw = match &hardware.cluster {
                    Some(p) => load_cluster(p)?.hardware,
                    None => builtin_hardware(),
                };
                eval::builtin_pair_rows(&hw, context, &cal)?
            } else {
                let c = cluster(&hardware, &cal)?;
                let choice = choice(&plan, c.num_gpus)?;
                eval::pair_rows(&models(&model)?, &q, &c, context, &choice, &cal)?
            };
            emit(rows.as_slice(), &output)?;
            Ok(0)
        }
        Command::Sweep { model, q, contexts, plan, hardware, output } => {
            let cal = calibration(&output.calibration)?;
            let c = cluster(&hardware, &cal)?;
            let choice = choice(&plan, c.num_gpus)?;
            emit(&eval::sweep(&resolve_model(&model)?, q, &c, &contexts, &choice, &cal)?, &output)?;
            Ok(0)
        }
        Command::Attribution { model, q, contexts, plan, hardware, output } => {
            let cal = calibration(&output.calibration)?;
            let c = cluster(&hardware, &cal)?;
            let choice = choice(&plan, c.num_gpus)?;
            emit(&eval::attribution(&resolve_model(&model)?, q, &c, &contexts, &choice, &cal)?, &output)?;
            Ok(0)
        }
        Command::Compare { builtin, model, q, context, plan, hardware, output } => {
            let cal = calibration(&output.calibration)?;
            let c = cluster(&hardware, &cal)?;
            let choice = choice(&plan, c.num_gpus)?;
            let rows = if builtin {
                eval::builtin_compare_rows(&c, context, &choice, &cal)?
            } else {
                eval::compare_rows(&models(&model)?, &q, &c, context, &choice, &cal)?
            };
            emit(rows.as_slice(), &output)?;
            Ok(0)
        }
        Command::Autotune { model, context, space, hardware, output } => {
            let cal = calibration(&output.calibration)?;
            let c = cluster(&hardware, &cal)?;
            let space = match space {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let s: SearchSpace = from_json_str(&text, &p.display().to_string())?;
                    s.validate()?;
                    s
                }
                None => SearchSpace::default(),
            };
            let result = eval::autotune_model(&resolve_model(&model)?, &c, context, &space, &cal)?;
            emit(&result, &output)?;
            Ok(if result.is_feasible() { 0 } else { 2 })
        }
        Command::Feasible { model, context, plan, hardware, output } => {
            let cal = calibration(&output.calibration)?;
            let c = cluster(&hardware, &cal)?;
            let plan = match parse_plan(&plan, c.num_gpus)? {
                PlanArg::Explicit(p) => p,
                PlanArg::Reference => reference_plan(c.num_gpus),
                PlanArg::Auto => bail!("`feasible` evaluates one plan; use `autotune` to search"),
            };
            let report = eval::feasible(&resolve_model(&model)?, &plan, &c, context, &cal)?;
            emit(&report, &output)?;
            Ok(if report.feasible { 0 } else { 2 })
        }
        Command::Schema { name, dir } => {
            if let Some(dir) = dir {
                crate::schema::write_all(&dir).with_context(|| format!("writing {}", dir.display()))?;
                return Ok(0);
            }
            let all = crate::schema::all();
            match name {
                None => all.iter().for_each(|(stem, _)| println!("{stem}")),
                Some(n) => {
                    let (_, schema) = all
                        .iter()
                        .find(|(stem, _)| *stem == n)
                        .ok_or_else(|| anyhow::anyhow!("unknown schema `{n}`; run `qsmodel schema` for the list"))?;
                    print!("{}", crate::schema::render(schema));
                }
            }
            Ok(0)
        }
        Command::Serve { addr, model_dir, calibration: cal_path } => {
            let cal = calibration(&cal_path)?;
            let state = crate::service::AppState::load(model_dir.as_deref(), cal, builtin_hardware())?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::service::serve(&addr, state))?;
            Ok(0)
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
