//! `jodp` command-line interface.
//!
//! Exit status: 0 on success, 2 when the task is infeasible from the start,
//! 1 on any other error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use jodp::base_space::{BaseSpace, StateAction};
use jodp::bench::{random_states, random_task, run_bench, write_csv, BenchSpec};
use jodp::ensemble::{build_complete_ensemble, build_ensemble, PolicyEnsemble};
use jodp::feasibility::Grounding;
use jodp::instrument;
use jodp::io::{load_env, load_task, read_json, write_json, EnvSpec, GoalSpec, GroundSpec, GroundingSpec, TaskSpec};
use jodp::og_task::OgTask;
use jodp::render::{render_ascii, render_svg};
use jodp::tlmdp::{desirability_to_enter, rollout, solve_gs, GsSolution, PolicyCost, RolloutMode, RolloutTrace, TlmdpProblem};
use jodp::transfer::{check_gie, reground, GieKind, ShortestPathMatrix, DEFAULT_GIE_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "jodp", version, about = "Hierarchical planning for ordered sub-goal tasks")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Convergence tolerance of the solvers.
    #[arg(long, global = true, default_value_t = jodp::DEFAULT_EPS)]
    eps: f64,
    /// Interior state-action cost `c`. Bundles keep the cost they were built with.
    #[arg(long = "cost-c", global = true)]
    cost_c: Option<f64>,
    /// Worker threads for ensemble builds and parallel benchmarks.
    #[arg(long, global = true, env = "JODP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a grid environment, optionally with a random task on it.
    GenEnv(GenEnvArgs),
    /// Solve goal-conditioned policies and write an ensemble bundle.
    BuildEnsemble(BuildEnsembleArgs),
    /// Solve a task and execute it from a start state.
    Solve(SolveArgs),
    /// Execute a saved solution.
    Rollout(RolloutArgs),
    /// Move a task's goals and solve it again, reusing an ensemble bundle.
    Reground(RegroundArgs),
    /// Compare two groundings of one task for grounding invariance.
    CheckGie(CheckGieArgs),
    /// Run a benchmark spec.
    Bench(BenchArgs),
    /// Draw a trace.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenEnvArgs {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Fraction of cells turned into obstacles; (0, 0) always stays free.
    #[arg(long, default_value_t = 0.0)]
    obstacle_density: f64,
    /// Also write a random task with this many goals.
    #[arg(long, requires = "task_out")]
    goals: Option<usize>,
    /// Ordering pairs of the random task.
    #[arg(long, default_value_t = 0)]
    orderings: usize,
    #[arg(long)]
    task_out: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnvTask {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    task: PathBuf,
}

#[derive(Args)]
struct BuildEnsembleArgs {
    #[arg(long)]
    env: PathBuf,
    /// Build members for this task's groundings only.
    #[arg(long, conflicts_with = "complete")]
    task: Option<PathBuf>,
    /// One member per free cell (completion action), as regrounding needs.
    #[arg(long)]
    complete: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct StartArg {
    /// Start cell `x,y` or state index; defaults to the first free state.
    #[arg(long)]
    start: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cost {
    /// Charge each policy its low-level value.
    Value,
    /// Feasibility and orderings only.
    Identity,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    files: EnvTask,
    /// Ensemble bundle; built on the fly for the task's groundings if absent.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[command(flatten)]
    start: StartArg,
    #[arg(long, value_enum, default_value_t = Cost::Value)]
    policy_cost: Cost,
    #[arg(long)]
    solution_out: Option<PathBuf>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    svg_out: Option<PathBuf>,
    /// Print an ASCII map of the trace to stderr.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    files: EnvTask,
    #[arg(long)]
    solution: PathBuf,
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[command(flatten)]
    start: StartArg,
    /// Sample from the stochastic policies (seeded by `--seed`) instead of
    /// acting greedily.
    #[arg(long)]
    sample: bool,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegroundArgs {
    #[command(flatten)]
    files: EnvTask,
    /// Complete ensemble bundle from `build-ensemble --complete`.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// New grounding: a list in goal order or an object keyed by goal name.
    #[arg(long)]
    grounding: PathBuf,
    #[arg(long)]
    task_out: Option<PathBuf>,
    #[arg(long)]
    solution_out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGieArgs {
    #[arg(long)]
    env: PathBuf,
    /// Environment of the second task; defaults to `--env`.
    #[arg(long)]
    env2: Option<PathBuf>,
    #[arg(long)]
    task1: PathBuf,
    #[arg(long)]
    task2: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GIE_TOLERANCE)]
    tol: f64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Run points concurrently; timings are then not comparable.
    #[arg(long)]
    parallel: bool,
    /// Defaults to stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Picture {
    Svg,
    Ascii,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    files: EnvTask,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = Picture::Svg)]
    format: Picture,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Marker for the exit status of an infeasible task.
#[derive(Debug)]
struct Infeasible;

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("task is infeasible from the given start")
    }
}

impl std::error::Error for Infeasible {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let infeasible = e.chain().any(|c| {
                c.is::<Infeasible>() || matches!(c.downcast_ref::<jodp::Error>(), Some(jodp::Error::Infeasible))
            });
            ExitCode::from(if infeasible { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        seed: cli.seed,
        eps: cli.eps,
        cost: cli.cost_c,
    };
    match cli.command {
        Command::GenEnv(a) => gen_env(&ctx, a),
        Command::BuildEnsemble(a) => build(&ctx, a),
        Command::Solve(a) => solve(&ctx, a),
        Command::Rollout(a) => run_rollout(&ctx, a),
        Command::Reground(a) => run_reground(&ctx, a),
        Command::CheckGie(a) => run_check_gie(&ctx, a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
    }
}

struct Ctx {
    seed: u64,
    eps: f64,
    cost: Option<f64>,
}

impl Ctx {
    fn cost(&self) -> f64 {
        self.cost.unwrap_or(jodp::DEFAULT_COST)
    }

    /// The bundle at `path`, or a grounded-only ensemble for `grounding`.
    fn ensemble(&self, space: &Arc<BaseSpace>, bundle: Option<&Path>, grounding: &Grounding) -> Result<PolicyEnsemble> {
        match bundle {
            Some(path) => load_bundle(space, path),
            None => Ok(build_ensemble(space, grounding.targets(), self.cost(), self.eps)?),
        }
    }
}

fn load_bundle(space: &Arc<BaseSpace>, path: &Path) -> Result<PolicyEnsemble> {
    let text = fs::read_to_string(path).with_context(|| format!("reading ensemble bundle {}", path.display()))?;
    PolicyEnsemble::from_json(space, &text).with_context(|| format!("loading ensemble bundle {}", path.display()))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn parse_start(space: &BaseSpace, arg: &StartArg) -> Result<StateAction> {
    let state = match arg.start.as_deref() {
        None => (0..space.num_states())
            .find(|&s| !space.is_obstacle(s))
            .ok_or_else(|| anyhow!("environment has no free state"))?,
        Some(s) => match s.split_once(',') {
            Some((x, y)) => space.cell(x.trim().parse()?, y.trim().parse()?)?,
            None => s.trim().parse().with_context(|| format!("bad start {s:?}"))?,
        },
    };
    if state >= space.num_states() {
        bail!("start state {state} out of range");
    }
    if space.is_obstacle(state) {
        bail!("start state {state} is an obstacle");
    }
    Ok(StateAction::new(state, space.rest_action()))
}

fn gen_env(ctx: &Ctx, a: GenEnvArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.obstacle_density) {
        bail!("--obstacle-density must be in [0, 1)");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let obstacles: Vec<(usize, usize)> = (0..a.width * a.height)
        .map(|k| (k % a.width, k / a.width))
        .filter(|&c| c != (0, 0) && rng.gen_bool(a.obstacle_density))
        .collect();
    let spec = EnvSpec::grid(a.width, a.height, obstacles);
    let space = spec.build()?;
    write_json(&a.out, &spec)?;
    let mut report = json!({"env": a.out, "states": space.num_states(), "obstacles": space.obstacles().count()});
    if let (Some(n), Some(path)) = (a.goals, a.task_out.as_ref()) {
        let task = random_task(n, a.orderings, 1.0, &mut rng)?;
        let states = random_states(&space, n, &mut rng)?;
        let spec = task_spec(&space, &task, &states);
        write_json(path, &spec)?;
        report["task"] = json!(path);
    }
    print_json(&report)
}

fn task_spec(space: &BaseSpace, task: &OgTask, states: &[usize]) -> TaskSpec {
    TaskSpec {
        goals: task
            .goals()
            .iter()
            .zip(states)
            .map(|(g, &s)| GoalSpec {
                name: g.name.clone(),
                types: g.types.clone(),
                ground: GroundSpec::from_state_action(space, StateAction::new(s, space.completion_action())),
            })
            .collect(),
        type_orderings: task.type_orderings().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        sigma_cost: task.sigma_cost(),
    }
}

fn build(ctx: &Ctx, a: BuildEnsembleArgs) -> Result<()> {
    let (_, space) = load_env(&a.env)?;
    let space = Arc::new(space);
    let t0 = Instant::now();
    let ensemble = match (&a.task, a.complete) {
        (_, true) => build_complete_ensemble(&space, ctx.cost(), ctx.eps)?,
        (Some(task), false) => {
            let (_, _, grounding) = load_task(task, &space)?;
            build_ensemble(&space, grounding.targets(), ctx.cost(), ctx.eps)?
        }
        (None, false) => bail!("pass --task or --complete"),
    };
    let elapsed = t0.elapsed().as_secs_f64();
    fs::write(&a.out, ensemble.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&json!({
        "ensemble": a.out,
        "members": ensemble.len(),
        "kind": ensemble.kind(),
        "cost_c": ensemble.cost(),
        "build_time_s": elapsed,
    }))
}

fn solution_json(sol: &GsSolution) -> serde_json::Value {
    json!({
        "layout": {"n_goals": sol.layout.n, "dim": sol.layout.dim(), "index": "(sigma * n_goals + l) * n_goals + pi"},
        "log_z_gs": sol.log_z.iter().map(|&l| if l == f64::NEG_INFINITY { None } else { Some(l) }).collect::<Vec<_>>(),
        "iterations": sol.iterations,
        "sweeps": sol.sweeps,
        "policy_cost": sol.policy_cost,
    })
}

fn read_solution(path: &Path) -> Result<GsSolution> {
    #[derive(serde::Deserialize)]
    struct Layout {
        n_goals: usize,
    }
    #[derive(serde::Deserialize)]
    struct Saved {
        layout: Layout,
        log_z_gs: Vec<Option<f64>>,
        iterations: usize,
        sweeps: usize,
        policy_cost: PolicyCost,
    }
    let s: Saved = read_json(path)?;
    let layout = jodp::feasibility::GsLayout::new(s.layout.n_goals);
    if s.log_z_gs.len() != layout.dim() {
        bail!("{}: expected {} entries, found {}", path.display(), layout.dim(), s.log_z_gs.len());
    }
    Ok(GsSolution {
        layout,
        log_z: s.log_z_gs.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect(),
        iterations: s.iterations,
        sweeps: s.sweeps,
        policy_cost: s.policy_cost,
    })
}

fn trace_report(trace: &RolloutTrace, task: &OgTask, problem: &TlmdpProblem) -> serde_json::Value {
    let names: Vec<&str> = trace.goal_order().iter().map(|&g| task.goals()[g].name.as_str()).collect();
    json!({
        "completed": trace.final_sigma == task.final_state(),
        "goal_order": names,
        "steps": trace.total_steps(),
        "cost": trace.total_cost(),
        "violations": trace.violations(problem.orderings()),
    })
}

fn solve(ctx: &Ctx, a: SolveArgs) -> Result<()> {
    let (_, space) = load_env(&a.files.env)?;
    let space = Arc::new(space);
    let (_, task, grounding) = load_task(&a.files.task, &space)?;
    let start = parse_start(&space, &a.start)?;
    let ensemble = ctx.ensemble(&space, a.ensemble.as_deref(), &grounding)?;
    let pc = match a.policy_cost {
        Cost::Value => PolicyCost::Value,
        Cost::Identity => PolicyCost::Identity,
    };
    let problem = TlmdpProblem::new(&ensemble, &task, grounding.clone())?.with_policy_cost(pc);
    let t0 = Instant::now();
    let sol = solve_gs(&problem, ctx.eps)?;
    let solve_time = t0.elapsed().as_secs_f64();
    if let Some(p) = &a.solution_out {
        write_json(p, &solution_json(&sol))?;
    }
    let dte = desirability_to_enter(&problem, &sol, start, task.initial_state())?;
    let mut report = json!({
        "status": "feasible",
        "iterations": sol.iterations,
        "solve_time_s": solve_time,
        "dte_log": dte.log_values.iter().map(|&l| if l == f64::NEG_INFINITY { None } else { Some(l) }).collect::<Vec<_>>(),
    });
    if !dte.is_feasible() {
        report["status"] = json!("infeasible");
        print_json(&report)?;
        return Err(Infeasible.into());
    }
    let trace = rollout(&problem, &sol, start, task.initial_state(), RolloutMode::Greedy)?;
    report["trace"] = trace_report(&trace, &task, &problem);
    if let Some(p) = &a.trace_out {
        write_json(p, &trace)?;
    }
    if let Some(p) = &a.svg_out {
        fs::write(p, render_svg(&space, &grounding, &trace)?)?;
    }
    if a.ascii {
        eprint!("{}", render_ascii(&space, &grounding, &trace)?);
    }
    print_json(&report)
}

fn run_rollout(ctx: &Ctx, a: RolloutArgs) -> Result<()> {
    let (_, space) = load_env(&a.files.env)?;
    let space = Arc::new(space);
    let (_, task, grounding) = load_task(&a.files.task, &space)?;
    let start = parse_start(&space, &a.start)?;
    let sol = read_solution(&a.solution)?;
    let ensemble = ctx.ensemble(&space, a.ensemble.as_deref(), &grounding)?;
    let problem = TlmdpProblem::new(&ensemble, &task, grounding)?.with_policy_cost(sol.policy_cost);
    if problem.layout() != sol.layout {
        bail!("solution has {} goals, task has {}", sol.layout.n, task.num_goals());
    }
    let mode = if a.sample {
        RolloutMode::Sample { seed: ctx.seed }
    } else {
        RolloutMode::Greedy
    };
    let trace = rollout(&problem, &sol, start, task.initial_state(), mode)?;
    match &a.out {
        Some(p) => {
            write_json(p, &trace)?;
            print_json(&trace_report(&trace, &task, &problem))
        }
        None => print_json(&serde_json::to_value(&trace)?),
    }
}

fn run_reground(ctx: &Ctx, a: RegroundArgs) -> Result<()> {
    let (_, space) = load_env(&a.files.env)?;
    let space = Arc::new(space);
    let bundle = match &a.ensemble {
        Some(p) if p.exists() => p,
        Some(p) => bail!("no ensemble bundle at {}; build ensemble first (jodp build-ensemble --complete)", p.display()),
        None => bail!("regrounding needs an ensemble bundle (--ensemble); build ensemble first (jodp build-ensemble --complete)"),
    };
    let ensemble = load_bundle(&space, bundle)?;
    let (spec, task, old) = load_task(&a.files.task, &space)?;
    let new_spec: GroundingSpec = read_json(&a.grounding)?;
    let grounding = new_spec.resolve(&space, &task)?;
    let before = instrument::snapshot();
    let base = TlmdpProblem::new(&ensemble, &task, old).context("the bundle does not cover the task's current grounding")?;
    let problem = reground(&base, grounding.clone()).map_err(|e| match e {
        jodp::Error::Ungrounded(g) => anyhow!(
            "goal {:?} is grounded where the bundle has no policy; build ensemble first with --complete",
            task.goals()[g].name
        ),
        e => e.into(),
    })?;
    let t0 = Instant::now();
    let sol = solve_gs(&problem, ctx.eps)?;
    let solve_time = t0.elapsed().as_secs_f64();
    let counts = instrument::snapshot() - before;
    if let Some(p) = &a.task_out {
        write_json(p, &spec.with_grounding(&space, &grounding)?)?;
    }
    if let Some(p) = &a.solution_out {
        write_json(p, &solution_json(&sol))?;
    }
    print_json(&json!({
        "iterations": sol.iterations,
        "solve_time_s": solve_time,
        "salmdp_solves": counts.salmdp_solves,
        "absorption_solves": counts.absorption_solves,
    }))
}

fn run_check_gie(ctx: &Ctx, a: CheckGieArgs) -> Result<()> {
    let (_, space1) = load_env(&a.env)?;
    let space1 = Arc::new(space1);
    let space2 = match &a.env2 {
        Some(p) => Arc::new(load_env(p)?.1),
        None => space1.clone(),
    };
    let (_, task1, g1) = load_task(&a.task1, &space1)?;
    let (_, task2, g2) = load_task(&a.task2, &space2)?;
    let e1 = build_ensemble(&space1, g1.targets(), ctx.cost(), ctx.eps)?;
    let e2 = build_ensemble(&space2, g2.targets(), ctx.cost(), ctx.eps)?;
    let p1 = TlmdpProblem::new(&e1, &task1, g1)?;
    let p2 = TlmdpProblem::new(&e2, &task2, g2)?;
    let v = check_gie(&p1, &p2, a.tol)?;
    let (verdict, gamma) = match v.kind {
        GieKind::TcGie { gamma } => ("tcGIE", Some(gamma)),
        GieKind::TGie => ("tGIE", None),
        GieKind::None => ("none", None),
    };
    let s = |m: &ShortestPathMatrix| {
        m.values
            .iter()
            .map(|r| r.iter().map(|&x| x.is_finite().then_some(x)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let report = json!({
        "verdict": verdict,
        "gamma": gamma,
        "k_equal": v.k_equal,
        "ratio_spread": v.ratio_spread,
        "s1": s(&v.s1),
        "s2": s(&v.s2),
        "k1": v.k1.rows(),
        "k2": v.k2.rows(),
    });
    match &a.out {
        Some(p) => write_json(p, &report).map_err(Into::into),
        None => print_json(&report),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let spec: BenchSpec = read_json(&a.spec)?;
    let records = run_bench(&spec, a.parallel)?;
    let mut buf = Vec::new();
    match a.format {
        Format::Csv => write_csv(&mut buf, &records)?,
        Format::Json => serde_json::to_writer_pretty(&mut buf, &records)?,
    }
    write_text(a.out.as_deref(), &String::from_utf8(buf)?)
}

fn render(a: RenderArgs) -> Result<()> {
    let (_, space) = load_env(&a.files.env)?;
    let (_, _, grounding) = load_task(&a.files.task, &space)?;
    let trace: RolloutTrace = read_json(&a.trace)?;
    let text = match a.format {
        Picture::Svg => render_svg(&space, &grounding, &trace)?,
        Picture::Ascii => render_ascii(&space, &grounding, &trace)?,
    };
    write_text(a.out.as_deref(), &text)
}
