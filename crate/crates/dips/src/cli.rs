//! Command-line entry point: dataset generation, model training, and
//! evaluation runs.
//!
//! Exit codes: 0 success, 2 I/O error, 3 configuration or fingerprint
//! error, 4 internal failure. `DIPS_SEED` provides the seed when `--seed`
//! is not given.

use crate::diffusion::{train_diffusion, DiffusionConfig, DiffusionModel};
use crate::discriminator::{train_discriminator, Discriminator, DiscriminatorConfig};
use crate::domain::TaskSpec;
use crate::error::{DipsError, Result};
use crate::pipeline::{evaluate, generate_dataset, Method, Models, RunMetrics};
use crate::search::{SearchConfig, SearchReport};
use crate::trajopt::OptConfig;
use crate::types::{read_dataset, write_dataset, TaskKind};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "dips",
    about = "Contact-sequence planning with trajectory diffusion on planar toy manipulation tasks",
    version,
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a demonstration dataset from the task prior.
    GenData(GenDataArgs),
    /// Train the diffusion model or the discriminator on a dataset.
    Train(TrainArgs),
    /// Evaluate planning methods over seeded trials.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Random seed (falls back to $DIPS_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Zero all wall-time fields in outputs for byte-reproducible runs.
    #[arg(long, default_value_t = false)]
    no_timing: bool,
    /// Regrasp clearance threshold delta in meters.
    #[arg(long, default_value_t = 0.015)]
    delta: f64,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Task id: card | rotor.
    #[arg(long)]
    task: String,
    /// Number of demonstrations.
    #[arg(long)]
    n: usize,
    /// Output directory (receives dataset.jsonl and dataset.stats.json).
    #[arg(long)]
    out: PathBuf,
    /// Optimizer overrides as key=value (outer-iters, inner-steps,
    /// step-size, rho0, rho-max, tolerance, w-goal, w-regrasp, w-smooth,
    /// w-force).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model kind: diffusion | discriminator.
    #[arg(long)]
    kind: String,
    /// Path to dataset.jsonl (the .stats.json sidecar sits alongside).
    #[arg(long)]
    dataset: PathBuf,
    /// Training steps.
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    /// Output checkpoint path (loss curve written to <out>.loss.json).
    #[arg(long)]
    out: PathBuf,
    /// Diffusion checkpoint (required for --kind discriminator).
    #[arg(long)]
    diffusion: Option<PathBuf>,
    /// Minibatch size.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Hidden layer sizes, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    /// Classifier-free guidance weight stored in the checkpoint.
    #[arg(long, default_value_t = 1.5)]
    guidance_weight: f64,
    /// Condition dropout probability during diffusion training.
    #[arg(long, default_value_t = 0.1)]
    cond_dropout: f64,
    /// Denoising chain length.
    #[arg(long, default_value_t = 50)]
    diffusion_steps: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Task id: card | rotor.
    #[arg(long)]
    task: String,
    /// Method id (dips, csvto-fixed-sequence, dips-fixed-sequence,
    /// dips-no-replanning, dips-no-variability, dips-max-likelihood),
    /// a comma-separated list, or `all`.
    #[arg(long)]
    method: String,
    /// Trials per method.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Diffusion checkpoint (required for all dips-* methods).
    #[arg(long)]
    diffusion: Option<PathBuf>,
    /// Discriminator checkpoint (required for planning methods).
    #[arg(long)]
    discriminator: Option<PathBuf>,
    /// Output directory (metrics.csv, aggregates.json, reports.json).
    #[arg(long)]
    out: PathBuf,
    /// Particles per search node.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Score discount per tree depth.
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Heuristic weight on the expected terminal goal distance.
    #[arg(long, default_value_t = 1e4)]
    alpha: f64,
    /// Heuristic weight on the prior log-likelihood.
    #[arg(long, default_value_t = 1e3)]
    beta: f64,
    /// Planning timeout in seconds.
    #[arg(long, default_value_t = 300.0)]
    timeout: f64,
    /// Optimizer/search overrides as key=value (see gen-data --set, plus
    /// max-depth).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &DipsError) -> i32 {
    match e {
        DipsError::Io(_) => 2,
        DipsError::Config(_)
        | DipsError::FingerprintMismatch { .. }
        | DipsError::Dimension { .. }
        | DipsError::MissingStats(_)
        | DipsError::EmptyBatch
        | DipsError::Json(_) => 3,
        DipsError::NonFinite(_) | DipsError::Internal(_) => 4,
    }
}

fn seed_of(common: &CommonArgs) -> u64 {
    common
        .seed
        .or_else(|| std::env::var("DIPS_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn init_pool(common: &CommonArgs) {
    if let Some(n) = common.jobs {
        // ignore the error if a pool already exists (tests call in-process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn task_of(name: &str, delta: f64) -> Result<TaskSpec> {
    let kind: TaskKind = name.parse()?;
    let mut task = TaskSpec::by_id(kind);
    if delta != task.delta {
        task.delta = delta;
    }
    Ok(task)
}

fn apply_overrides(
    opt: &mut OptConfig,
    search: Option<&mut SearchConfig>,
    pairs: &[String],
) -> Result<()> {
    let mut search = search;
    for pair in pairs {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(DipsError::Config(format!("override `{pair}` is not key=value")));
        };
        let fval = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| DipsError::Config(format!("override `{pair}`: bad number")))
        };
        let uval = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| DipsError::Config(format!("override `{pair}`: bad integer")))
        };
        match key {
            "outer-iters" => opt.outer_iters = uval()?,
            "inner-steps" => opt.inner_steps = uval()?,
            "step-size" => opt.step_size = fval()?,
            "rho0" => opt.rho0 = fval()?,
            "rho-max" => opt.rho_max = fval()?,
            "tolerance" => opt.tolerance = fval()?,
            "w-goal" => opt.w_goal = fval()?,
            "w-regrasp" => opt.w_regrasp = fval()?,
            "w-smooth" => opt.w_smooth = fval()?,
            "w-force" => opt.w_force = fval()?,
            "max-depth" => match search.as_deref_mut() {
                Some(s) => s.max_depth = uval()?,
                None => {
                    return Err(DipsError::Config(
                        "max-depth only applies to `run`".into(),
                    ))
                }
            },
            other => {
                return Err(DipsError::Config(format!("unknown override key `{other}`")));
            }
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Run(args) => cmd_run(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    init_pool(&args.common);
    let task = task_of(&args.task, args.common.delta)?;
    let mut opt = OptConfig::default();
    apply_overrides(&mut opt, None, &args.set)?;
    let seed = seed_of(&args.common);

    std::fs::create_dir_all(&args.out)?;
    let gen = generate_dataset(&task, args.n, &opt, seed)?;
    let jsonl = args.out.join("dataset.jsonl");
    let sidecar = args.out.join("dataset.stats.json");
    write_dataset(&gen.dataset, &jsonl, &sidecar)?;

    let n_low = gen.quality.iter().filter(|q| q.low_quality).count();
    println!(
        "wrote {} entries ({} low-quality) to {}",
        gen.dataset.len(),
        n_low,
        jsonl.display()
    );
    Ok(())
}

fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("stats.json")
}

fn parse_hidden(spec: &Option<String>, default: Vec<usize>) -> Result<Vec<usize>> {
    match spec {
        None => Ok(default),
        Some(s) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| DipsError::Config(format!("bad hidden size `{p}`")))
            })
            .collect(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    init_pool(&args.common);
    let seed = seed_of(&args.common);

    // the sidecar names the task; the fingerprint check happens on read
    let sidecar = sidecar_path(&args.dataset);
    let head: crate::types::StatsSidecar =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&sidecar)?))?;
    let task = task_of(&head.task, args.common.delta)?;
    let dataset = read_dataset(&args.dataset, &sidecar, task.dims(), &task.fingerprint())?;

    let mode_index = |m: &crate::types::ContactMode| task.mode_index(m).expect("mode in table");
    let curve = match args.kind.as_str() {
        "diffusion" => {
            let config = DiffusionConfig {
                n_steps: args.diffusion_steps,
                hidden: parse_hidden(&args.hidden, DiffusionConfig::default().hidden)?,
                guidance_weight: args.guidance_weight,
                cond_dropout: args.cond_dropout,
                learning_rate: args.learning_rate,
                batch_size: args.batch_size,
                ..DiffusionConfig::default()
            };
            let (model, curve) =
                train_diffusion(&dataset, task.n_modes(), mode_index, config, args.steps, seed)?;
            model.save(&args.out)?;
            curve
        }
        "discriminator" => {
            let diffusion_path = args.diffusion.as_ref().ok_or_else(|| {
                DipsError::Config("--kind discriminator requires --diffusion CHECKPOINT".into())
            })?;
            let model = DiffusionModel::load(diffusion_path)?;
            if model.fingerprint != dataset.fingerprint {
                return Err(DipsError::FingerprintMismatch {
                    context: "diffusion checkpoint vs dataset".into(),
                    expected: dataset.fingerprint.clone(),
                    actual: model.fingerprint.clone(),
                });
            }
            let config = DiscriminatorConfig {
                hidden: parse_hidden(&args.hidden, DiscriminatorConfig::default().hidden)?,
                steps: args.steps,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate,
            };
            let (disc, curve) =
                train_discriminator(&dataset, &model, task.n_modes(), mode_index, &config, seed)?;
            disc.save(&args.out)?;
            curve
        }
        other => {
            return Err(DipsError::Config(format!(
                "unknown --kind `{other}` (expected diffusion | discriminator)"
            )))
        }
    };

    let loss_path = args.out.with_extension("loss.json");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&loss_path)?);
    serde_json::to_writer(&mut f, &curve)?;
    f.write_all(b"\n")?;
    f.flush()?;
    println!(
        "trained {} for {} steps; final loss {:.6}; checkpoint {}",
        args.kind,
        curve.len(),
        curve.last().copied().unwrap_or(0.0),
        args.out.display()
    );
    Ok(())
}

fn parse_methods(spec: &str) -> Result<Vec<Method>> {
    if spec == "all" {
        return Ok(Method::all().to_vec());
    }
    spec.split(',').map(|m| Method::parse(m.trim())).collect()
}

pub const METRICS_HEADER: &str =
    "task,method,trial,seed,metric_goal,valid,modes_executed,plan_time_s,opt_time_s";

fn write_metrics_csv(path: &Path, rows: &[RunMetrics]) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.method,
            r.trial,
            r.seed,
            r.metric_goal,
            r.valid,
            r.modes_executed,
            r.plan_time_s,
            r.opt_time_s
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct TrialReports<'a> {
    method: &'a str,
    trial: usize,
    planning_calls: &'a [SearchReport],
}

fn cmd_run(args: RunArgs) -> Result<()> {
    init_pool(&args.common);
    let task = task_of(&args.task, args.common.delta)?;
    let seed = seed_of(&args.common);
    let methods = parse_methods(&args.method)?;

    let mut opt = OptConfig::default();
    let mut search = SearchConfig {
        k: args.k,
        gamma: args.gamma,
        alpha: args.alpha,
        beta: args.beta,
        timeout_s: args.timeout,
        max_depth: task.k_max,
        ..SearchConfig::default()
    };
    apply_overrides(&mut opt, Some(&mut search), &args.set)?;

    let needs_proposal = methods.iter().any(|m| m.needs_proposal());
    let needs_scorer = methods.iter().any(|m| m.needs_scorer());
    let diffusion = match (&args.diffusion, needs_proposal) {
        (Some(p), _) => Some(DiffusionModel::load(p)?),
        (None, true) => {
            return Err(DipsError::Config(
                "the selected methods require --diffusion CHECKPOINT".into(),
            ))
        }
        (None, false) => None,
    };
    let discriminator = match (&args.discriminator, needs_scorer) {
        (Some(p), _) => Some(Discriminator::load(p)?),
        (None, true) => {
            return Err(DipsError::Config(
                "the selected methods require --discriminator CHECKPOINT".into(),
            ))
        }
        (None, false) => None,
    };
    let models = Models {
        diffusion: diffusion.as_ref(),
        discriminator: discriminator.as_ref(),
    };
    models.check_fingerprints(&task)?;

    let mut eval = evaluate(
        &task,
        &methods,
        args.trials,
        models.proposal(),
        models.scorer(),
        &search,
        &opt,
        seed,
    )?;

    if args.common.no_timing {
        for r in &mut eval.rows {
            r.plan_time_s = 0.0;
            r.opt_time_s = 0.0;
        }
        for a in &mut eval.aggregates {
            a.mean_plan_time_s = 0.0;
            a.mean_opt_time_s = 0.0;
        }
        for reports in &mut eval.reports {
            for r in reports {
                r.wall_time_s = 0.0;
            }
        }
    }

    std::fs::create_dir_all(&args.out)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &eval.rows)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(args.out.join("aggregates.json"))?);
    serde_json::to_writer_pretty(&mut f, &eval.aggregates)?;
    f.write_all(b"\n")?;
    f.flush()?;

    let trial_reports: Vec<TrialReports> = eval
        .rows
        .iter()
        .zip(&eval.reports)
        .map(|(row, reports)| TrialReports {
            method: &row.method,
            trial: row.trial,
            planning_calls: reports,
        })
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(args.out.join("reports.json"))?);
    serde_json::to_writer_pretty(&mut f, &trial_reports)?;
    f.write_all(b"\n")?;
    f.flush()?;

    for a in &eval.aggregates {
        println!(
            "{}: mean metric {:.5} (std {:.5}), valid {}/{}",
            a.method, a.mean_metric, a.std_metric, a.n_valid, a.trials
        );
    }
    Ok(())
}
