//! Dataset generation, the execution/replanning loop, method variants and
//! evaluation metrics.

use crate::diffusion::DiffusionModel;
use crate::discriminator::Discriminator;
use crate::domain::{is_valid, nominal_trajectory, rollout, TaskSpec};
use crate::error::{DipsError, Result};
use crate::search::{
    astar_plan, task_prior, update_goal_rotor, GoalSpec, ProposalModel, RealismScorer,
    SearchConfig, SearchReport, TaskContext, VariabilityMode,
};
use crate::seeding::{derive_seed, stream_rng};
use crate::trajopt::{optimize, ModeProblem, OptConfig};
use crate::types::{Dataset, DatasetEntry, TaskKind};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Method identifiers: the planner and the five §-style variants evaluated
/// against it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Full planner: replanned A* with variability propagation.
    Dips,
    /// Prior-sampled fixed sequence, cold-start optimizer initialization.
    CsvtoFixedSequence,
    /// Prior-sampled fixed sequence, diffusion optimizer initialization.
    DipsFixedSequence,
    /// Plan once at the start, execute without replanning.
    DipsNoReplanning,
    /// k = 1: no variability propagation in the search.
    DipsNoVariability,
    /// Single particle chosen as the highest-scoring of k samples.
    DipsMaxLikelihood,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Dips => "dips",
            Method::CsvtoFixedSequence => "csvto-fixed-sequence",
            Method::DipsFixedSequence => "dips-fixed-sequence",
            Method::DipsNoReplanning => "dips-no-replanning",
            Method::DipsNoVariability => "dips-no-variability",
            Method::DipsMaxLikelihood => "dips-max-likelihood",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::all()
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| DipsError::Config(format!("unknown method `{s}`")))
    }

    pub fn all() -> [Method; 6] {
        [
            Method::Dips,
            Method::CsvtoFixedSequence,
            Method::DipsFixedSequence,
            Method::DipsNoReplanning,
            Method::DipsNoVariability,
            Method::DipsMaxLikelihood,
        ]
    }

    pub fn needs_proposal(self) -> bool {
        !matches!(self, Method::CsvtoFixedSequence)
    }

    pub fn needs_scorer(self) -> bool {
        matches!(
            self,
            Method::Dips | Method::DipsNoReplanning | Method::DipsNoVariability | Method::DipsMaxLikelihood
        )
    }

    fn plans(self) -> bool {
        matches!(
            self,
            Method::Dips | Method::DipsNoReplanning | Method::DipsNoVariability | Method::DipsMaxLikelihood
        )
    }

    fn variability(self) -> VariabilityMode {
        match self {
            Method::DipsNoVariability => VariabilityMode::SingleParticle,
            Method::DipsMaxLikelihood => VariabilityMode::MaxLikelihood,
            _ => VariabilityMode::Full,
        }
    }
}

/// Per-trial outcome row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: String,
    pub method: String,
    pub trial: usize,
    pub seed: u64,
    /// Card: final |y - y_goal| (m). Rotor: total yaw turned (rad,
    /// positive clockwise).
    pub metric_goal: f64,
    pub valid: bool,
    pub modes_executed: usize,
    pub plan_time_s: f64,
    pub opt_time_s: f64,
    pub executed_seq: Vec<usize>,
}

/// Sample a contact sequence from the task's data-generation prior.
/// Card: i.i.d. uniform over the mode table. Rotor: turn, then the two
/// regrasp modes in random order, repeated and truncated.
pub fn sample_prior_sequence(task: &TaskSpec, length: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut seq = Vec::with_capacity(length);
    match task.id {
        TaskKind::Card => {
            for _ in 0..length {
                seq.push(rng.gen_range(0..task.n_modes()));
            }
        }
        TaskKind::Rotor => {
            while seq.len() < length {
                seq.push(0);
                let (first, second) = if rng.gen::<bool>() { (1, 2) } else { (2, 1) };
                seq.push(first);
                seq.push(second);
            }
            seq.truncate(length);
        }
    }
    seq
}

/// Initial-placement spread used when generating demonstrations: wide, so
/// the model sees partially exhausted workspaces.
pub fn data_spread(task: &TaskSpec) -> f64 {
    match task.id {
        TaskKind::Card => 1.0,
        TaskKind::Rotor => 0.75,
    }
}

/// Initial-placement spread for evaluation trials: near the nominal
/// placements (rotor fingers near their sector tops).
pub fn eval_spread(task: &TaskSpec) -> f64 {
    match task.id {
        TaskKind::Card => 1.0,
        TaskKind::Rotor => 0.25,
    }
}

/// Optimizer-output quality per generated segment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentQuality {
    pub max_eq_residual: f64,
    pub max_ineq_residual: f64,
    pub low_quality: bool,
}

pub struct GeneratedData {
    pub dataset: Dataset,
    pub quality: Vec<SegmentQuality>,
}

/// Generate `n_demos` demonstrations: randomized on-surface initial
/// placements, a prior-sampled sequence per demonstration, each segment
/// solved at high optimization budget from a cold-start initialization and
/// rolled through the ground-truth simulator. Segments whose optimizer
/// residuals exceed ten times the tolerance are recorded with a
/// low-quality flag.
pub fn generate_dataset(task: &TaskSpec, n_demos: usize, opt_cfg: &OptConfig, seed: u64) -> Result<GeneratedData> {
    if n_demos == 0 {
        return Err(DipsError::Config("n_demos must be >= 1".into()));
    }
    let budget = opt_cfg.high_budget();
    let seq_len = task.k_max;

    let demos: Vec<Result<Vec<(DatasetEntry, SegmentQuality)>>> = (0..n_demos)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream_rng(seed, &[0xda7a, d as u64]);
            let (s0, targets) = task.sample_initial_state(&mut rng, data_spread(task));
            let seq = sample_prior_sequence(task, seq_len, &mut rng);
            let mut out = Vec::with_capacity(seq.len());
            let mut state = s0;
            for (step, &mode_idx) in seq.iter().enumerate() {
                let problem = ModeProblem::new(task, &targets, mode_idx);
                let nominal = nominal_trajectory(task, &targets, mode_idx, &state);
                // second candidate: jittered displacements
                let mut jittered = nominal.clone();
                for u in &mut jittered.controls {
                    for dq in &mut u.dq {
                        dq.x += rng.gen_range(-0.002..0.002);
                        dq.y += rng.gen_range(-0.002..0.002);
                    }
                }
                let (traj, report) = optimize(&problem, &state, &[nominal, jittered], &budget)?;
                let executed = rollout(task, &state, &traj.controls, problem.mode());
                state = executed.last_state().clone();
                let low_quality = report.max_eq_residual > 10.0 * budget.tolerance
                    || report.max_ineq_residual > 10.0 * budget.tolerance;
                out.push((
                    DatasetEntry {
                        trajectory: executed,
                        mode: problem.mode().clone(),
                        low_quality,
                    },
                    SegmentQuality {
                        max_eq_residual: report.max_eq_residual,
                        max_ineq_residual: report.max_ineq_residual,
                        low_quality,
                    },
                ));
                let _ = step;
            }
            Ok(out)
        })
        .collect();

    let mut entries = Vec::with_capacity(n_demos * seq_len);
    let mut quality = Vec::with_capacity(n_demos * seq_len);
    for demo in demos {
        for (e, q) in demo? {
            entries.push(e);
            quality.push(q);
        }
    }
    let dataset = Dataset::from_entries(entries, task.dims(), task.fingerprint())?;
    Ok(GeneratedData { dataset, quality })
}

/// Fixed card goal: slide to y = -6 cm, done within 5 mm.
pub fn card_goal() -> GoalSpec {
    GoalSpec::CardY {
        y_goal: -0.06,
        threshold: 0.005,
    }
}

/// Fixed-goal value used by the no-replanning variant on the rotor.
pub const ROTOR_NO_REPLAN_GOAL: f64 = -1.7;

fn goal_for(task: &TaskSpec, method: Method, current_yaw: f64) -> GoalSpec {
    match task.id {
        TaskKind::Card => card_goal(),
        TaskKind::Rotor => GoalSpec::RotorYaw {
            yaw_goal: if method == Method::DipsNoReplanning {
                ROTOR_NO_REPLAN_GOAL
            } else {
                update_goal_rotor(current_yaw)
            },
        },
    }
}

fn search_depth(task: &TaskSpec, executed: usize) -> usize {
    match task.id {
        // shrinking horizon improves convergence to the fixed goal
        TaskKind::Card => task.k_max.saturating_sub(executed).max(1),
        TaskKind::Rotor => task.k_max,
    }
}

#[derive(Debug)]
pub struct ExecutionOutcome {
    pub metrics: RunMetrics,
    pub search_reports: Vec<SearchReport>,
}

/// Run one trial of a method: plan (or follow a prior-sampled sequence),
/// optimize each planned mode initialized from the proposal model (or the
/// cold start), execute through the ground-truth simulator, replan, and
/// stop at the mode cap, on goal satisfaction, or on an invalid state.
#[allow(clippy::too_many_arguments)]
pub fn execute_task(
    task: &TaskSpec,
    method: Method,
    proposal: Option<&dyn ProposalModel>,
    scorer: Option<&dyn RealismScorer>,
    search_base: &SearchConfig,
    opt_cfg: &OptConfig,
    trial: usize,
    base_seed: u64,
) -> Result<ExecutionOutcome> {
    if method.needs_proposal() && proposal.is_none() {
        return Err(DipsError::Config(format!(
            "method {} requires a trajectory proposal model",
            method.id()
        )));
    }
    if method.needs_scorer() && scorer.is_none() {
        return Err(DipsError::Config(format!(
            "method {} requires a realism scorer",
            method.id()
        )));
    }
    let method_tag = Method::all().iter().position(|m| *m == method).unwrap() as u64;

    let mut init_rng = stream_rng(base_seed, &[trial as u64, 0x5354]);
    let (s0, targets) = task.sample_initial_state(&mut init_rng, eval_spread(task));
    let yaw0 = s0.object.rotation();
    let prior = task_prior(task);
    let ctx = TaskContext {
        task,
        targets: &targets,
        opt_cfg,
    };

    // both fixed-sequence methods share the trial's prior sample
    let fixed_seq = {
        let mut rng = stream_rng(base_seed, &[trial as u64, 0x5052]);
        sample_prior_sequence(task, task.k_max, &mut rng)
    };

    let mut state = s0;
    let mut executed_seq = Vec::new();
    let mut search_reports = Vec::new();
    let mut plan_time = 0.0;
    let mut opt_time = 0.0;
    let mut valid = true;
    let mut planned_once: Option<Vec<usize>> = None;

    for step in 0..task.k_max {
        let goal = goal_for(task, method, state.object.rotation());
        let mode_idx = if method.plans() {
            let replan_needed = method != Method::DipsNoReplanning || planned_once.is_none();
            if replan_needed {
                let cfg = SearchConfig {
                    variability: method.variability(),
                    max_depth: search_depth(task, step),
                    ..search_base.clone()
                };
                let plan_seed = derive_seed(base_seed, &[trial as u64, method_tag, step as u64, 1]);
                let (seq, report) = astar_plan(
                    &ctx,
                    &state,
                    &goal,
                    proposal.unwrap(),
                    scorer.unwrap(),
                    &prior,
                    &cfg,
                    plan_seed,
                )?;
                plan_time += report.wall_time_s;
                search_reports.push(report);
                if method == Method::DipsNoReplanning {
                    planned_once = Some(seq);
                } else {
                    if seq.is_empty() {
                        break; // goal already satisfied
                    }
                    planned_once = Some(seq);
                }
            }
            let plan = planned_once.as_ref().unwrap();
            let within = if method == Method::DipsNoReplanning {
                step
            } else {
                0
            };
            match plan.get(within) {
                Some(&mi) => mi,
                None => break, // fixed plan exhausted
            }
        } else {
            fixed_seq[step]
        };

        let problem = ModeProblem::new(task, &targets, mode_idx);
        let inits = if method == Method::CsvtoFixedSequence {
            vec![nominal_trajectory(task, &targets, mode_idx, &state)]
        } else {
            let init_seed = derive_seed(base_seed, &[trial as u64, method_tag, step as u64, 2]);
            let mut samples =
                proposal
                    .unwrap()
                    .propose(mode_idx, &state, search_base.k.max(1), init_seed);
            for t in &mut samples {
                for u in &mut t.controls {
                    u.enforce_mode(problem.mode());
                }
            }
            samples
        };

        let (traj, report) = optimize(&problem, &state, &inits, opt_cfg)?;
        opt_time += report.wall_time_s;
        let executed = rollout(task, &state, &traj.controls, problem.mode());
        for s in &executed.states[1..] {
            if !is_valid(task, s, problem.mode()) {
                valid = false;
            }
        }
        state = executed.last_state().clone();
        executed_seq.push(mode_idx);
        if !valid {
            break;
        }
    }

    let metric_goal = match task.id {
        TaskKind::Card => {
            let GoalSpec::CardY { y_goal, .. } = card_goal() else {
                unreachable!()
            };
            match state.object {
                crate::types::ObjectPose::Card { y, .. } => (y - y_goal).abs(),
                _ => unreachable!(),
            }
        }
        TaskKind::Rotor => yaw0 - state.object.rotation(),
    };

    Ok(ExecutionOutcome {
        metrics: RunMetrics {
            task: task.id.as_str().to_string(),
            method: method.id().to_string(),
            trial,
            seed: base_seed,
            metric_goal,
            valid,
            modes_executed: executed_seq.len(),
            plan_time_s: plan_time,
            opt_time_s: opt_time,
            executed_seq,
        },
        search_reports,
    })
}

/// Per-method aggregate over trials.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub trials: usize,
    pub mean_metric: f64,
    pub std_metric: f64,
    pub n_valid: usize,
    pub mean_plan_time_s: f64,
    pub mean_opt_time_s: f64,
}

pub fn aggregate(rows: &[RunMetrics]) -> Vec<MethodAggregate> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.metric_goal)
                .collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let sub: Vec<&RunMetrics> = rows.iter().filter(|r| r.method == m).collect();
            MethodAggregate {
                method: m,
                trials: n,
                mean_metric: mean,
                std_metric: var.sqrt(),
                n_valid: sub.iter().filter(|r| r.valid).count(),
                mean_plan_time_s: sub.iter().map(|r| r.plan_time_s).sum::<f64>() / n as f64,
                mean_opt_time_s: sub.iter().map(|r| r.opt_time_s).sum::<f64>() / n as f64,
            }
        })
        .collect()
}

pub struct Evaluation {
    pub rows: Vec<RunMetrics>,
    pub aggregates: Vec<MethodAggregate>,
    /// Search reports per (method, trial), in row order.
    pub reports: Vec<Vec<SearchReport>>,
}

/// Run `trials` seeded trials for each method; trials are independent and
/// run in parallel, with rows canonically ordered by (method, trial).
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    task: &TaskSpec,
    methods: &[Method],
    trials: usize,
    proposal: Option<&dyn ProposalModel>,
    scorer: Option<&dyn RealismScorer>,
    search_base: &SearchConfig,
    opt_cfg: &OptConfig,
    base_seed: u64,
) -> Result<Evaluation> {
    if trials == 0 {
        return Err(DipsError::Config("trials must be >= 1".into()));
    }
    let jobs: Vec<(usize, Method, usize)> = methods
        .iter()
        .enumerate()
        .flat_map(|(mi, &m)| (0..trials).map(move |t| (mi, m, t)))
        .collect();
    let outcomes: Vec<Result<ExecutionOutcome>> = jobs
        .par_iter()
        .map(|&(_, m, t)| execute_task(task, m, proposal, scorer, search_base, opt_cfg, t, base_seed))
        .collect();

    let mut rows = Vec::with_capacity(jobs.len());
    let mut reports = Vec::with_capacity(jobs.len());
    for outcome in outcomes {
        let o = outcome?;
        rows.push(o.metrics);
        reports.push(o.search_reports);
    }
    let aggregates = aggregate(&rows);
    Ok(Evaluation {
        rows,
        aggregates,
        reports,
    })
}

/// Convenience wrapper pairing trained models for evaluation.
pub struct Models<'a> {
    pub diffusion: Option<&'a DiffusionModel>,
    pub discriminator: Option<&'a Discriminator>,
}

impl Models<'_> {
    pub fn proposal(&self) -> Option<&dyn ProposalModel> {
        self.diffusion.map(|m| m as &dyn ProposalModel)
    }

    pub fn scorer(&self) -> Option<&dyn RealismScorer> {
        self.discriminator.map(|d| d as &dyn RealismScorer)
    }

    pub fn check_fingerprints(&self, task: &TaskSpec) -> Result<()> {
        let fp = task.fingerprint();
        if let Some(m) = self.diffusion {
            if m.fingerprint != fp {
                return Err(DipsError::FingerprintMismatch {
                    context: "diffusion checkpoint vs task".into(),
                    expected: fp,
                    actual: m.fingerprint.clone(),
                });
            }
        }
        if let Some(d) = self.discriminator {
            if d.fingerprint != fp {
                return Err(DipsError::FingerprintMismatch {
                    context: "discriminator checkpoint vs task".into(),
                    expected: fp,
                    actual: d.fingerprint.clone(),
                });
            }
        }
        Ok(())
    }
}
