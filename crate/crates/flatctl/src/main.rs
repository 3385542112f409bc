//! Command-line frontend: load → analyze → synthesize → simulate → verify.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error, 3 numeric
//! failure (rank deficiencies, feedback singularities).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flatctl::flatsys::{builtin_academic, builtin_crane, load_system, CraneParams, FlatSystemDef};
use flatctl::kappa::{run_procedure, synthesize_feedback, verify_independence, StagePlan};
use flatctl::report;
use flatctl::sim::{error_ode_check, io_behavior_check, ClosedLoop, SimConfig};
use flatctl::track::{
    build_tracking_law, parse_control_config, synthesize_symbolic_law, ControlConfig, GainSet,
    ReferenceSignal, TrackingLaw,
};
use flatctl::DEFAULT_SEED;

const EXIT_VERIFY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "flatctl",
    version,
    about = "Quasi-static feedback linearization and tracking control for (x,u)-flat systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the staged procedure and report stages, ranks, and kappa
    Analyze(CommonArgs),
    /// Synthesize the linearizing feedback and the tracking law
    Synthesize(CommonArgs),
    /// Simulate the closed loop and write the trace CSV
    Simulate(CommonArgs),
    /// Run the closed-loop verification suites and report pass/fail
    Verify(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// System source: a description file, `builtin:academic`, or `builtin:crane`
    system: String,
    /// RNG seed for sample points and perturbations (fallback: FLATCTL_SEED, then 7)
    #[arg(long)]
    seed: Option<u64>,
    /// Integration step in seconds
    #[arg(long)]
    dt: Option<f64>,
    /// Simulation horizon in seconds
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Output directory for artifacts (plan dump, CSV traces)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gain file ([gains] section: y<j>.poles / y<j>.coeffs)
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Reference file ([reference] section: y<j> = sin/step/const)
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Tolerance for the finite-difference input-output check
    #[arg(long = "tol-io")]
    tol_io: Option<f64>,
    /// Tolerance for the linear error-ODE match
    #[arg(long = "tol-err")]
    tol_err: Option<f64>,
}

impl CommonArgs {
    fn seed(&self) -> u64 {
        self.seed
            .or_else(|| {
                std::env::var("FLATCTL_SEED")
                    .ok()
                    .and_then(|s| s.parse().ok())
            })
            .unwrap_or(DEFAULT_SEED)
    }
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl std::fmt::Display) -> Failure {
        Failure {
            code: EXIT_INPUT,
            msg: msg.to_string(),
        }
    }

    fn numeric(msg: impl std::fmt::Display) -> Failure {
        Failure {
            code: EXIT_NUMERIC,
            msg: msg.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Synthesize(args) => cmd_synthesize(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

// ---- system loading and per-system defaults ----------------------------

fn load(source: &str) -> Result<FlatSystemDef, Failure> {
    match source {
        "builtin:academic" => Ok(builtin_academic()),
        "builtin:crane" => builtin_crane(CraneParams::default()).map_err(Failure::input),
        other if other.starts_with("builtin:") => Err(Failure::input(format!(
            "unknown builtin system `{other}` (available: builtin:academic, builtin:crane)"
        ))),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::input(format!("cannot read {path}: {e}")))?;
            load_system(&text).map_err(Failure::input)
        }
    }
}

/// Simulation defaults chosen so the built-in scenarios stay well clear of
/// feedback singularities.
struct Defaults {
    dt: f64,
    t_end: f64,
    refs: Vec<ReferenceSignal>,
    tol_err: f64,
}

fn defaults_for(sys: &FlatSystemDef) -> Defaults {
    let smooth = smooth_order(sys);
    match sys.name.as_str() {
        "academic" => Defaults {
            dt: 1e-4,
            t_end: 2.0,
            refs: vec![
                ReferenceSignal::smoothstep(0.0, 0.1, 0.2, 1.8, smooth),
                ReferenceSignal::smoothstep(0.0, 0.08, 0.2, 1.8, smooth),
                ReferenceSignal::smoothstep(0.0, 0.05, 0.2, 1.8, smooth),
                ReferenceSignal::smoothstep(0.0, 1e-3, 0.1, 1.9, smooth),
            ],
            tol_err: 1e-3,
        },
        "crane" => Defaults {
            dt: 2e-3,
            t_end: 7.0,
            refs: vec![
                ReferenceSignal::smoothstep(0.0, 0.4, 0.5, 5.5, smooth),
                ReferenceSignal::smoothstep(0.0, 0.3, 0.5, 5.5, smooth),
                ReferenceSignal::smoothstep(0.5, 0.4, 0.5, 5.5, smooth),
            ],
            tol_err: 1e-2,
        },
        _ => Defaults {
            dt: 1e-3,
            t_end: 5.0,
            refs: default_hold_refs(sys),
            tol_err: 1e-3,
        },
    }
}

fn smooth_order(sys: &FlatSystemDef) -> usize {
    sys.declared_r
        .as_ref()
        .and_then(|r| r.0.iter().copied().max())
        .unwrap_or(sys.n_states())
        + 1
}

/// Constant references holding the flat output at the default rest state
/// (inputs at zero); falls back to zero where the output cannot be evaluated.
fn default_hold_refs(sys: &FlatSystemDef) -> Vec<ReferenceSignal> {
    let mut p = flatctl::expr::Valuation::new();
    for (i, &xi) in sys.default_state.iter().enumerate() {
        p.set(flatctl::jets::JetVar::state(i), xi);
    }
    for i in 0..sys.n_inputs() {
        p.set(flatctl::jets::JetVar::input(i), 0.0);
    }
    sys.outputs
        .iter()
        .map(|e| ReferenceSignal::constant(e.evaluate(&p).unwrap_or(0.0)))
        .collect()
}

fn load_control_config(args: &CommonArgs) -> Result<ControlConfig, Failure> {
    let mut cfg = ControlConfig::default();
    for path in [&args.gains, &args.reference].into_iter().flatten() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
        let parsed = parse_control_config(&text).map_err(Failure::input)?;
        cfg.gains.extend(parsed.gains);
        cfg.refs.extend(parsed.refs);
    }
    Ok(cfg)
}

fn analyze(sys: &FlatSystemDef, seed: u64) -> Result<StagePlan, Failure> {
    run_procedure(sys, seed).map_err(Failure::numeric)
}

fn build_law(
    sys: &FlatSystemDef,
    plan: &StagePlan,
    cfg: &ControlConfig,
) -> Result<(GainSet, TrackingLaw), Failure> {
    let gains = cfg.gain_set(&plan.kappa).map_err(Failure::input)?;
    let law = build_tracking_law(plan, sys, &gains).map_err(Failure::numeric)?;
    Ok((gains, law))
}

fn reference_signals(
    sys: &FlatSystemDef,
    cfg: &ControlConfig,
    defaults: &Defaults,
) -> Result<Vec<ReferenceSignal>, Failure> {
    if cfg.refs.is_empty() {
        return Ok(defaults.refs.clone());
    }
    let hold: Vec<f64> = default_hold_refs(sys)
        .iter()
        .map(|r| match r {
            ReferenceSignal::Polynomial { coeffs } => coeffs.first().copied().unwrap_or(0.0),
            _ => 0.0,
        })
        .collect();
    cfg.reference_signals(sys.n_outputs(), &hold, smooth_order(sys))
        .map_err(Failure::input)
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

// ---- subcommands -------------------------------------------------------

fn cmd_analyze(args: &CommonArgs) -> Result<u8, Failure> {
    let sys = load(&args.system)?;
    let seed = args.seed();
    let plan = analyze(&sys, seed)?;
    let indep = verify_independence(&plan, &sys, seed, None)
        .map(Some)
        .unwrap_or(None);
    print!("{}", report::analyze_report(&sys, &plan, indep.as_ref()));
    if let Some(dir) = &args.out {
        let json = serde_json::to_string_pretty(&report::plan_json(&sys, &plan))
            .expect("plan dump serializes");
        write_artifact(dir, "plan.json", &json)?;
        println!("plan dump written to {}", dir.join("plan.json").display());
    }
    if plan.kappa.total() != sys.n_states() {
        return Err(Failure::numeric("procedure ended with |kappa| != n"));
    }
    Ok(0)
}

fn cmd_synthesize(args: &CommonArgs) -> Result<u8, Failure> {
    let sys = load(&args.system)?;
    let plan = analyze(&sys, args.seed())?;
    let cfg = load_control_config(args)?;
    let (gains, mut law) = build_law(&sys, &plan, &cfg)?;
    let fb = synthesize_feedback(&plan, &sys).map_err(Failure::numeric)?;
    // full substitution is only worthwhile when the feedback itself is compact
    let compact = fb
        .inputs
        .iter()
        .map(|e| e.node_count())
        .sum::<usize>()
        <= report::PRINT_NODE_LIMIT;
    if compact && plan.stages.iter().all(|s| s.affine) {
        law.symbolic = synthesize_symbolic_law(&plan, &sys, &gains).map(Some).unwrap_or(None);
    }
    let mut text = String::new();
    text.push_str(&format!("system: {}\n", sys.name));
    text.push_str(&format!("kappa (stage form): {}\n\n", plan.kappa_stage_form()));
    text.push_str(&report::feedback_report(&sys, &plan, &fb));
    text.push('\n');
    text.push_str(&report::tracking_report(&sys, &plan, &law));
    print!("{text}");
    if let Some(dir) = &args.out {
        write_artifact(dir, "synthesis.txt", &text)?;
        let json = serde_json::to_string_pretty(&report::plan_json(&sys, &plan))
            .expect("plan dump serializes");
        write_artifact(dir, "plan.json", &json)?;
        println!("artifacts written to {}", dir.display());
    }
    Ok(0)
}

fn simulate_once(
    args: &CommonArgs,
    x0_override: Option<Vec<f64>>,
) -> Result<(FlatSystemDef, StagePlan, TrackingLaw, Vec<ReferenceSignal>, flatctl::sim::SimTrace, SimConfig), Failure> {
    let sys = load(&args.system)?;
    let plan = analyze(&sys, args.seed())?;
    let cfg = load_control_config(args)?;
    let (_, law) = build_law(&sys, &plan, &cfg)?;
    let defaults = defaults_for(&sys);
    let refs = reference_signals(&sys, &cfg, &defaults)?;
    let x0 = x0_override.unwrap_or_else(|| sys.default_state.clone());
    let sim_cfg = SimConfig::new(
        args.t_end.unwrap_or(defaults.t_end),
        args.dt.unwrap_or(defaults.dt),
        x0,
    );
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, refs.clone()).map_err(Failure::numeric)?;
    let trace = loop_.simulate(&sim_cfg).map_err(Failure::numeric)?;
    Ok((sys, plan, law, refs, trace, sim_cfg))
}

fn cmd_simulate(args: &CommonArgs) -> Result<u8, Failure> {
    let (sys, plan, _, _, trace, sim_cfg) = simulate_once(args, None)?;
    println!(
        "simulated {} for {} s at dt = {} ({} samples)",
        sys.name,
        sim_cfg.t_end,
        sim_cfg.dt,
        trace.times.len()
    );
    println!("kappa (stage form): {}", plan.kappa_stage_form());
    println!("max |e| over the horizon: {:.3e}", trace.max_abs_error());
    for ev in &trace.events {
        println!("event: {ev}");
    }
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    write_artifact(&dir, "trace.csv", &trace.to_csv())?;
    let n = sys.n_states();
    let m = sys.n_inputs();
    let p = sys.n_outputs();
    let plot = format!(
        "trace.csv columns: t, x1..x{n}, u1..u{m}, y1..y{p}, yd1..yd{p}, e1..e{p}\n\
         suggested plots:\n\
         - outputs vs references: t against y<j> and yd<j> for j = 1..{p}\n\
         - tracking errors: t against e<j> (log scale reveals the imposed exponential decay)\n\
         - inputs: t against u<i> for i = 1..{m}\n"
    );
    write_artifact(&dir, "plot.txt", &plot)?;
    println!("trace written to {}", dir.join("trace.csv").display());
    Ok(0)
}

fn cmd_verify(args: &CommonArgs) -> Result<u8, Failure> {
    use rand::{Rng, SeedableRng};

    let sys = load(&args.system)?;
    let seed = args.seed();
    let plan = analyze(&sys, seed)?;
    let cfg = load_control_config(args)?;
    let (_, law) = build_law(&sys, &plan, &cfg)?;
    let defaults = defaults_for(&sys);
    let refs = reference_signals(&sys, &cfg, &defaults)?;
    let dt = args.dt.unwrap_or(defaults.dt);
    let t_end = args.t_end.unwrap_or(defaults.t_end);
    let tol_io = args.tol_io.unwrap_or(1e-3);
    let tol_err = args.tol_err.unwrap_or(defaults.tol_err);

    let mut out = String::new();
    out.push_str(&format!("verify {} (seed {seed}, dt {dt}, horizon {t_end} s)\n", sys.name));
    out.push_str(&format!("kappa (stage form): {}\n", plan.kappa_stage_form()));

    let indep = verify_independence(&plan, &sys, seed, None).map_err(Failure::numeric)?;
    out.push_str(&format!(
        "{}  differential independence: rank {} expected, sample ranks {:?}\n",
        if indep.pass { "PASS" } else { "FAIL" },
        indep.expected_rank,
        indep.sample_ranks
    ));
    let mut all_pass = indep.pass;

    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, refs.clone()).map_err(Failure::numeric)?;

    // exact start: consistent initial state must track exactly
    let exact_cfg = SimConfig::new(t_end, dt, sys.default_state.clone());
    let exact = loop_.simulate(&exact_cfg).map_err(Failure::numeric)?;
    let e_exact = exact.max_abs_error();
    out.push_str(&report::check_line("exact-start max |e|", e_exact, 1e-6));
    all_pass &= e_exact <= 1e-6;

    // finite-difference derivatives of y must reproduce the recorded v
    let io = io_behavior_check(&exact, &plan, dt);
    out.push_str(&report::check_line(
        "input-output behavior (FD kappa-th derivative vs v)",
        io.max_deviation,
        tol_io,
    ));
    all_pass &= io.max_deviation <= tol_io;

    // perturbed start: measured errors must follow the imposed linear ODEs
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = sys
        .default_state
        .iter()
        .map(|&x| x + rng.gen_range(-0.05..0.05))
        .collect();
    let pert_cfg = SimConfig::new(t_end, dt, x0);
    let pert = loop_.simulate(&pert_cfg).map_err(Failure::numeric)?;
    let ode = error_ode_check(&pert, &plan, &law, &refs).map_err(Failure::numeric)?;
    out.push_str(&report::check_line(
        "linear error-ODE match (perturbed start)",
        ode.max_deviation,
        tol_err,
    ));
    all_pass &= ode.max_deviation <= tol_err;

    out.push_str(if all_pass {
        "all checks passed\n"
    } else {
        "VERIFICATION FAILED\n"
    });
    print!("{out}");
    if let Some(dir) = &args.out {
        write_artifact(dir, "verify.txt", &out)?;
    }
    Ok(if all_pass { 0 } else { EXIT_VERIFY })
}
