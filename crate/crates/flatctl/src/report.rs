//! Human-readable reports and machine-readable plan dumps.
//!
//! Everything here is deterministic: the same plan and law always format to
//! byte-identical text, so reports can be diffed across runs.

use crate::expr::Expr;
use crate::flatsys::FlatSystemDef;
use crate::jets::JetRegistry;
use crate::kappa::{FeedbackLaw, IndependenceReport, StagePlan};
use crate::track::TrackingLaw;

fn named(e: &Expr, registry: &JetRegistry) -> String {
    e.to_string_named(&|v| registry.name(v))
}

/// Expressions above this node count are reported by their argument list
/// rather than printed in full (the crane's closed forms run to ~10^5 nodes).
pub const PRINT_NODE_LIMIT: usize = 20_000;

/// Sorted distinct variable names occurring in `e`, for the argument-list
/// form `u = F(...)` used when an input has no closed form.
fn argument_list(e: &Expr, registry: &JetRegistry) -> String {
    let mut vars = e.free_vars();
    vars.sort();
    vars.dedup();
    let names: Vec<String> = vars.into_iter().map(|v| registry.name(v)).collect();
    names.join(", ")
}

/// Staged procedure outcome: per-stage relative degrees and ranks, the
/// resulting κ, and the |κ| = n and κ ≤ R checks.
pub fn analyze_report(
    sys: &FlatSystemDef,
    plan: &StagePlan,
    indep: Option<&IndependenceReport>,
) -> String {
    let n = sys.n_states();
    let mut out = String::new();
    out.push_str(&format!(
        "system: {} ({} states, {} inputs, {} outputs)\n",
        sys.name,
        n,
        sys.n_inputs(),
        sys.n_outputs()
    ));
    out.push_str(&format!("seed: {}\n\n", plan.seed));

    for s in &plan.stages {
        out.push_str(&format!("stage {}:\n", s.stage));
        let outputs: Vec<String> = s
            .remaining_outputs
            .iter()
            .map(|&j| format!("y{}", j + 1))
            .collect();
        let k_i: Vec<String> = s.k_i.iter().map(|k| k.to_string()).collect();
        out.push_str(&format!(
            "  outputs ({}) have relative degrees K = ({})\n",
            outputs.join(","),
            k_i.join(",")
        ));
        out.push_str(&format!(
            "  generic rank of the input Jacobian: m = {} (sample ranks {:?})\n",
            s.m_i, s.sample_ranks
        ));
        let sel: Vec<String> = s
            .selected_outputs
            .iter()
            .map(|&j| format!("y{}", j + 1))
            .collect();
        let inp: Vec<String> = s
            .selected_inputs
            .iter()
            .map(|&i| sys.registry.input_name(i).to_string())
            .collect();
        out.push_str(&format!(
            "  selected outputs {{{}}} replace inputs {{{}}} ({})\n",
            sel.join(","),
            inp.join(","),
            if s.affine {
                "solved in closed form"
            } else {
                "solved implicitly"
            }
        ));
    }

    let kappa: Vec<String> = plan.kappa.0.iter().map(|k| k.to_string()).collect();
    out.push_str(&format!(
        "\nkappa = ({}) in original output order, stage form {}\n",
        kappa.join(","),
        plan.kappa_stage_form()
    ));
    let total = plan.kappa.total();
    out.push_str(&format!(
        "|kappa| = {} {} n = {}\n",
        total,
        if total == n { "=" } else { "!=" },
        n
    ));
    if let Some(r) = &sys.declared_r {
        let ok = plan.kappa.le(r).unwrap_or(false);
        let rs: Vec<String> = r.0.iter().map(|k| k.to_string()).collect();
        out.push_str(&format!(
            "kappa <= R = ({}): {}\n",
            rs.join(","),
            if ok { "yes" } else { "NO" }
        ));
    }
    if let Some(rep) = indep {
        out.push_str(&format!(
            "differential independence: expected rank {}, sample ranks {:?} -> {}\n",
            rep.expected_rank,
            rep.sample_ranks,
            if rep.pass { "pass" } else { "FAIL" }
        ));
    }
    out
}

/// Machine-readable plan dump (stages, κ, chains as printed expressions).
pub fn plan_json(sys: &FlatSystemDef, plan: &StagePlan) -> serde_json::Value {
    let stages: Vec<serde_json::Value> = plan
        .stages
        .iter()
        .map(|s| {
            serde_json::json!({
                "stage": s.stage,
                "remaining_outputs": s.remaining_outputs.iter().map(|j| j + 1).collect::<Vec<_>>(),
                "relative_degrees": s.k_i,
                "input_rank": s.m_i,
                "sample_ranks": s.sample_ranks,
                "selected_outputs": s.selected_outputs.iter().map(|j| j + 1).collect::<Vec<_>>(),
                "selected_inputs": s.selected_inputs.iter()
                    .map(|&i| sys.registry.input_name(i).to_string()).collect::<Vec<_>>(),
                "affine": s.affine,
                "solved_inputs": s.solved.iter().map(|(i, e)| {
                    serde_json::json!({
                        "input": sys.registry.input_name(*i),
                        "expr": named(e, &plan.registry),
                    })
                }).collect::<Vec<_>>(),
            })
        })
        .collect();
    let outputs: Vec<serde_json::Value> = plan
        .outputs
        .iter()
        .enumerate()
        .map(|(j, info)| {
            serde_json::json!({
                "output": j + 1,
                "stage": info.stage,
                "component": info.comp + 1,
                "kappa": info.kappa,
                "chain": info.chain.iter().map(|e| named(e, &plan.registry)).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({
        "system": sys.name,
        "n_states": sys.n_states(),
        "n_inputs": sys.n_inputs(),
        "n_outputs": sys.n_outputs(),
        "seed": plan.seed,
        "kappa": plan.kappa.0,
        "kappa_stage_form": plan.kappa_stage_form(),
        "kappa_total": plan.kappa.total(),
        "declared_r": sys.declared_r.as_ref().map(|r| r.0.clone()),
        "stages": stages,
        "outputs": outputs,
    })
}

/// One `u = ...` line: the closed form when it is explicit and of printable
/// size, otherwise `u = F(args)` listing the variables it depends on.
fn input_line(uname: &str, e: &Expr, registry: &JetRegistry) -> String {
    if crate::flatsys::is_explicit(e) && e.node_count() <= PRINT_NODE_LIMIT {
        format!("  {} = {}\n", uname, named(e, registry))
    } else {
        let tag = if crate::flatsys::is_explicit(e) {
            "closed form elided for size"
        } else {
            "implicit stage solution"
        };
        format!("  {} = F({})   [{}]\n", uname, argument_list(e, registry), tag)
    }
}

/// Quasi-static feedback `u = α(x, v-jets)`: closed forms where available,
/// otherwise the argument list of the implicit stage solution.
pub fn feedback_report(sys: &FlatSystemDef, plan: &StagePlan, fb: &FeedbackLaw) -> String {
    let mut out = String::new();
    out.push_str("exactly linearizing quasi-static feedback u = alpha(x, v, v', ...):\n");
    for (i, e) in fb.inputs.iter().enumerate() {
        let uname = sys.registry.input_name(i);
        out.push_str(&input_line(uname, e, &plan.registry));
    }
    let orders: Vec<String> = fb.max_v_order.iter().map(|k| k.to_string()).collect();
    out.push_str(&format!(
        "highest v-jet order used per stage: ({})\n",
        orders.join(",")
    ));
    out
}

/// Tracking law report: the v-jet equations in resolution order, then the
/// input definitions, then the fully substituted closed form when available.
pub fn tracking_report(sys: &FlatSystemDef, plan: &StagePlan, law: &TrackingLaw) -> String {
    let mut out = String::new();
    out.push_str("tracking law (resolved top to bottom):\n");
    for eq in &law.equations {
        out.push_str(&format!(
            "  {} = {}\n",
            plan.registry.name(eq.var),
            named(&eq.rhs, &plan.registry)
        ));
    }
    for (var, e) in &law.input_defs {
        let uname = sys.registry.input_name(var.index as usize);
        out.push_str(&input_line(uname, e, &plan.registry));
    }
    if let Some(symbolic) = &law.symbolic {
        out.push_str("closed form over (x, y^d-jets):\n");
        for (i, e) in symbolic.iter().enumerate() {
            out.push_str(&format!(
                "  {} = {}\n",
                sys.registry.input_name(i),
                named(e, &plan.registry)
            ));
        }
    }
    let mut warned = false;
    for w in &law.gains.warnings {
        if !warned {
            out.push_str("gain warnings:\n");
            warned = true;
        }
        out.push_str(&format!("  {w}\n"));
    }
    out
}

/// One pass/fail line of a verification report.
pub fn check_line(name: &str, measured: f64, tol: f64) -> String {
    format!(
        "{}  {name}: measured {measured:.3e}, tolerance {tol:.1e}\n",
        if measured <= tol { "PASS" } else { "FAIL" }
    )
}
