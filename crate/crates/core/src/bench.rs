//! Benchmark harness: scaling and regrounding experiments.
//!
//! Each benchmark point draws seeded random instances, times the solver
//! under test (assembly plus solve, no file I/O) and checks the resulting
//! trace against the task's orderings. Ensemble construction is timed
//! separately and reported in its own column.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_space::{build_gridworld, BaseSpace, StateAction};
use crate::baseline_oracle::value_iteration_full;
use crate::ensemble::{build_complete_ensemble, build_ensemble};
use crate::feasibility::Grounding;
use crate::instrument::{self, SolverCounts};
use crate::og_task::{induce_goal_orderings, ordering_cost, Goal, GoalOrderings, OgTask, TaskState};
use crate::tlmdp::{rollout, solve_gs, PolicyCost, RolloutMode, TlmdpProblem};
use crate::transfer::reground;
use crate::{Error, Result};

/// Repeat a timed call until this much wall time has accumulated.
pub const MIN_TIMED: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "GS")]
    Gs,
    #[serde(rename = "Full")]
    Full,
    /// Cost-free grounded-subspace solve (`Q_pi = I`).
    #[serde(rename = "tGIE")]
    TGie,
}

/// One CSV row. Scaling rows are 15-episode means; regrounding rows are
/// single tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub experiment: String,
    pub solver: Solver,
    pub n_goals: usize,
    /// Side length of the square grid.
    pub grid: usize,
    pub orderings: usize,
    pub wall_time_s: f64,
    pub ensemble_time_s: f64,
    pub iterations: usize,
    pub satisfied: bool,
    pub seed: u64,
    /// The point hit its timeout or the solver's state budget.
    pub censored: bool,
}

fn default_episodes() -> usize {
    15
}

fn default_cost() -> f64 {
    crate::DEFAULT_COST
}

fn default_eps() -> f64 {
    crate::DEFAULT_EPS
}

fn default_tasks() -> usize {
    50
}

fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchSpec {
    /// Every combination of grid size and goal count.
    Scaling {
        id: String,
        grids: Vec<usize>,
        goal_counts: Vec<usize>,
        #[serde(default)]
        orderings: usize,
        solvers: Vec<Solver>,
        seed: u64,
        #[serde(default = "default_episodes")]
        episodes: usize,
        #[serde(default = "default_cost")]
        cost: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        /// Per-point timeout in seconds.
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
    /// One complete ensemble, one task, many random groundings.
    Reground {
        id: String,
        grid: usize,
        n_goals: usize,
        orderings: usize,
        solvers: Vec<Solver>,
        seed: u64,
        #[serde(default = "default_tasks")]
        tasks: usize,
        #[serde(default = "default_cost")]
        cost: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

/// Number of timed samples per call; the median is reported.
pub const TIMED_SAMPLES: usize = 3;

/// Times `f` over [`TIMED_SAMPLES`] samples, each repeating the call until
/// [`MIN_TIMED`] has elapsed. Returns the median mean-time-per-call and the
/// last result.
pub fn time_adaptive<T>(mut f: impl FnMut() -> T) -> (f64, T) {
    let mut samples = Vec::with_capacity(TIMED_SAMPLES);
    let mut out = None;
    for _ in 0..TIMED_SAMPLES {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            out = Some(f());
            calls += 1;
            let elapsed = start.elapsed();
            if elapsed >= MIN_TIMED {
                samples.push(elapsed.as_secs_f64() / calls as f64);
                break;
            }
        }
    }
    samples.sort_by(f64::total_cmp);
    (samples[TIMED_SAMPLES / 2], out.expect("at least one call"))
}

/// Random task with one type per goal (`t0..t{n-1}`) and `orderings`
/// distinct type pairs, resampled until acyclic.
pub fn random_task(n_goals: usize, orderings: usize, sigma_cost: f64, rng: &mut impl Rng) -> Result<OgTask> {
    let max_pairs = n_goals * n_goals.saturating_sub(1) / 2;
    if orderings > max_pairs {
        return Err(Error::Config(format!(
            "{orderings} acyclic orderings do not fit {n_goals} goals"
        )));
    }
    let goals: Vec<Goal> = (0..n_goals)
        .map(|g| Goal::new(format!("g{g}"), &[format!("t{g}").as_str()]))
        .collect();
    loop {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(orderings);
        while pairs.len() < orderings {
            let a = rng.gen_range(0..n_goals);
            let b = rng.gen_range(0..n_goals);
            if a != b && !pairs.contains(&(a, b)) {
                pairs.push((a, b));
            }
        }
        if GoalOrderings::from_pairs(n_goals, &pairs).is_satisfiable() {
            let named: Vec<(String, String)> = pairs.iter().map(|&(a, b)| (format!("t{a}"), format!("t{b}"))).collect();
            return OgTask::new(goals, &named, sigma_cost);
        }
    }
}

/// `count` distinct free states, uniformly drawn.
pub fn random_states(space: &BaseSpace, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let free: Vec<usize> = (0..space.num_states()).filter(|&s| !space.is_obstacle(s)).collect();
    if free.len() < count {
        return Err(Error::Config(format!("{count} goals do not fit {} free cells", free.len())));
    }
    Ok(free.choose_multiple(rng, count).copied().collect())
}

/// Random grounding plus a random start, both on free cells.
pub fn random_instance(space: &BaseSpace, n_goals: usize, rng: &mut impl Rng) -> Result<(Grounding, StateAction)> {
    let states = random_states(space, n_goals, rng)?;
    let grounding = Grounding::at_states(space, &states)?;
    let start = random_states(space, 1, rng)?[0];
    Ok((grounding, StateAction::new(start, space.rest_action())))
}

/// Seed of one episode of one point; independent of the solver.
pub fn episode_seed(base: u64, grid: usize, n_goals: usize, episode: usize) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in [grid as u64, n_goals as u64, episode as u64] {
        h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
    }
    h
}

fn order_respects(order: &[usize], ord: &GoalOrderings) -> bool {
    let mut sigma = TaskState(0);
    for &g in order {
        if ordering_cost(sigma, g, ord).is_infinite() {
            return false;
        }
        sigma = sigma.with(g);
    }
    sigma == TaskState::full(ord.num_goals())
}

struct EpisodeResult {
    wall: f64,
    ensemble: f64,
    iterations: usize,
    satisfied: bool,
    censored: bool,
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    space: &Arc<BaseSpace>,
    task: &OgTask,
    grounding: &Grounding,
    start: StateAction,
    solver: Solver,
    cost: f64,
    eps: f64,
) -> Result<EpisodeResult> {
    let ord = induce_goal_orderings(task);
    match solver {
        Solver::Gs | Solver::TGie => {
            let t0 = Instant::now();
            let ensemble = build_ensemble(space, grounding.targets(), cost, eps)?;
            let ensemble_time = t0.elapsed().as_secs_f64();
            let policy_cost = if solver == Solver::Gs { PolicyCost::Value } else { PolicyCost::Identity };
            let (wall, out) = time_adaptive(|| -> Result<_> {
                let p = TlmdpProblem::new(&ensemble, task, grounding.clone())?.with_policy_cost(policy_cost);
                let s = solve_gs(&p, eps)?;
                Ok((p, s))
            });
            let (problem, sol) = out?;
            let satisfied = match rollout(&problem, &sol, start, task.initial_state(), RolloutMode::Greedy) {
                Ok(trace) => trace.final_sigma == task.final_state() && trace.violations(&ord) == 0,
                Err(Error::Infeasible) | Err(Error::StepBudget(_)) => false,
                Err(e) => return Err(e),
            };
            Ok(EpisodeResult {
                wall,
                ensemble: ensemble_time,
                iterations: sol.iterations,
                satisfied,
                censored: false,
            })
        }
        Solver::Full => {
            let (wall, out) = time_adaptive(|| value_iteration_full(space, task, grounding, cost, eps));
            match out {
                Ok(values) => {
                    let satisfied = values
                        .greedy_goal_order(space, task, grounding, start)
                        .is_some_and(|o| order_respects(&o, &ord));
                    Ok(EpisodeResult {
                        wall,
                        ensemble: 0.0,
                        iterations: values.sweeps,
                        satisfied,
                        censored: false,
                    })
                }
                Err(Error::Budget(msg)) => {
                    log::info!("full value iteration skipped: {msg}");
                    Ok(EpisodeResult {
                        wall,
                        ensemble: 0.0,
                        iterations: 0,
                        satisfied: false,
                        censored: true,
                    })
                }
                Err(e) => Err(e),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scaling_point(
    id: &str,
    grid: usize,
    n_goals: usize,
    orderings: usize,
    solver: Solver,
    seed: u64,
    episodes: usize,
    cost: f64,
    eps: f64,
    timeout_s: f64,
) -> Result<BenchRecord> {
    let space = Arc::new(build_gridworld(grid, grid, &[])?);
    let started = Instant::now();
    let (mut wall, mut ens, mut iterations) = (0.0, 0.0, 0usize);
    let mut satisfied = true;
    let mut censored = false;
    let mut done = 0usize;
    for e in 0..episodes {
        if started.elapsed().as_secs_f64() > timeout_s {
            censored = true;
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, grid, n_goals, e));
        let task = random_task(n_goals, orderings, 1.0, &mut rng)?;
        let (grounding, start) = random_instance(&space, n_goals, &mut rng)?;
        let r = run_episode(&space, &task, &grounding, start, solver, cost, eps)?;
        done += 1;
        wall += r.wall;
        ens += r.ensemble;
        iterations = iterations.max(r.iterations);
        satisfied &= r.satisfied;
        if r.censored {
            censored = true;
            break;
        }
    }
    let k = done.max(1) as f64;
    Ok(BenchRecord {
        experiment: id.to_string(),
        solver,
        n_goals,
        grid,
        orderings,
        wall_time_s: wall / k,
        ensemble_time_s: ens / k,
        iterations,
        satisfied: satisfied && !censored,
        seed,
        censored,
    })
}

/// Runs a benchmark spec. Points run sequentially unless `parallel` is
/// set, in which case timings are not meaningful.
pub fn run_bench(spec: &BenchSpec, parallel: bool) -> Result<Vec<BenchRecord>> {
    match spec {
        BenchSpec::Scaling {
            id,
            grids,
            goal_counts,
            orderings,
            solvers,
            seed,
            episodes,
            cost,
            eps,
            timeout_s,
        } => {
            let mut points = Vec::new();
            for &g in grids {
                for &n in goal_counts {
                    for &s in solvers {
                        points.push((g, n, s));
                    }
                }
            }
            let run = |&(g, n, s): &(usize, usize, Solver)| {
                scaling_point(id, g, n, *orderings, s, *seed, *episodes, *cost, *eps, *timeout_s)
            };
            if parallel {
                points.par_iter().map(run).collect()
            } else {
                points.iter().map(run).collect()
            }
        }
        BenchSpec::Reground {
            id,
            grid,
            n_goals,
            orderings,
            solvers,
            seed,
            tasks,
            cost,
            eps,
        } => {
            let series = regrounding_series(*grid, *n_goals, *orderings, *tasks, *seed, *cost, *eps, solvers)?;
            Ok(series
                .rows
                .into_iter()
                .map(|mut r| {
                    r.experiment = format!("{id}/{}", r.experiment);
                    r
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegroundSeries {
    pub rows: Vec<BenchRecord>,
    pub ensemble_time_s: f64,
    /// Solver calls made after the ensemble was built.
    pub counts: SolverCounts,
}

/// Builds one complete ensemble on a `grid`x`grid` world, then solves
/// `tasks` random regroundings of one random task. Row `experiment` holds
/// the task index; the ensemble time is reported on every row.
#[allow(clippy::too_many_arguments)]
pub fn regrounding_series(
    grid: usize,
    n_goals: usize,
    orderings: usize,
    tasks: usize,
    seed: u64,
    cost: f64,
    eps: f64,
    solvers: &[Solver],
) -> Result<RegroundSeries> {
    let space = Arc::new(build_gridworld(grid, grid, &[])?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = random_task(n_goals, orderings, 1.0, &mut rng)?;
    let t0 = Instant::now();
    let ensemble = build_complete_ensemble(&space, cost, eps)?;
    let ensemble_time = t0.elapsed().as_secs_f64();
    let ord = induce_goal_orderings(&task);
    let (g0, _) = random_instance(&space, n_goals, &mut rng)?;
    let base = TlmdpProblem::new(&ensemble, &task, g0)?;
    let before = instrument::snapshot();

    let mut rows = Vec::new();
    for t in 0..tasks {
        let (grounding, start) = random_instance(&space, n_goals, &mut rng)?;
        for &solver in solvers {
            let row = |wall: f64, iterations: usize, satisfied: bool, censored: bool| BenchRecord {
                experiment: t.to_string(),
                solver,
                n_goals,
                grid,
                orderings,
                wall_time_s: wall,
                ensemble_time_s: ensemble_time,
                iterations,
                satisfied,
                seed,
                censored,
            };
            match solver {
                Solver::Gs | Solver::TGie => {
                    let pc = if solver == Solver::Gs { PolicyCost::Value } else { PolicyCost::Identity };
                    let (wall, out) = time_adaptive(|| -> Result<_> {
                        let p = reground(&base, grounding.clone())?.with_policy_cost(pc);
                        let s = solve_gs(&p, eps)?;
                        Ok((p, s))
                    });
                    let (p, s) = out?;
                    let satisfied = rollout(&p, &s, start, task.initial_state(), RolloutMode::Greedy)
                        .map(|tr| tr.final_sigma == task.final_state() && tr.violations(&ord) == 0)
                        .unwrap_or(false);
                    rows.push(row(wall, s.iterations, satisfied, false));
                }
                Solver::Full => {
                    let r = run_episode(&space, &task, &grounding, start, Solver::Full, cost, eps)?;
                    rows.push(row(r.wall, r.iterations, r.satisfied, r.censored));
                }
            }
        }
    }
    Ok(RegroundSeries {
        rows,
        ensemble_time_s: ensemble_time,
        counts: instrument::snapshot() - before,
    })
}

/// Least-squares slope of `ys` against their index.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Writes records as CSV with a header row matching the field names.
pub fn write_csv<W: std::io::Write>(out: W, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_tasks_are_satisfiable_and_reproducible() {
        for s in 0..20 {
            let t1 = random_task(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let t2 = random_task(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(t1, t2);
            let ord = induce_goal_orderings(&t1);
            assert_eq!(ord.pairs().len(), 4);
            assert!(ord.is_satisfiable());
        }
        assert!(random_task(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_point_spec_gives_single_row() {
        let spec = BenchSpec::Scaling {
            id: "one".into(),
            grids: vec![4],
            goal_counts: vec![2],
            orderings: 1,
            solvers: vec![Solver::Gs],
            seed: 3,
            episodes: 2,
            cost: 10.0,
            eps: 1e-10,
            timeout_s: 60.0,
        };
        let rows = run_bench(&spec, false).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].satisfied && !rows[0].censored && rows[0].wall_time_s > 0.0);
        let again = run_bench(&spec, false).unwrap();
        assert_eq!(rows[0].iterations, again[0].iterations);
    }

    #[test]
    fn slope_of_a_line() {
        assert!((trend_slope(&[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(trend_slope(&[4.0]), 0.0);
    }

    #[test]
    fn csv_header_matches_fields() {
        let r = BenchRecord {
            experiment: "a,b".into(),
            solver: Solver::TGie,
            n_goals: 1,
            grid: 2,
            orderings: 0,
            wall_time_s: 0.5,
            ensemble_time_s: 0.0,
            iterations: 1,
            satisfied: true,
            seed: 7,
            censored: false,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let names: Vec<String> = serde_json::to_value(BenchRecord {
            experiment: String::new(),
            solver: Solver::Gs,
            n_goals: 0,
            grid: 0,
            orderings: 0,
            wall_time_s: 0.0,
            ensemble_time_s: 0.0,
            iterations: 0,
            satisfied: false,
            seed: 0,
            censored: false,
        })
        .unwrap()
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let mut sorted_header = header.clone();
        sorted_header.sort();
        let mut sorted_names: Vec<&str> = names.iter().map(String::as_str).collect();
        sorted_names.sort();
        assert_eq!(sorted_header, sorted_names);
        assert!(text.lines().nth(1).unwrap().starts_with("\"a,b\",tGIE,"));
    }
}
