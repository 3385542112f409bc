//! Tracking-law synthesis: pole/gain handling, the triangular error-feedback
//! equations defining the new-input jets `v`, and their top-to-bottom
//! resolution into `u = α(x, y^d-jets)`.
//!
//! For each output `y^j` handled in stage `i` with chain order `κ^j`, the
//! tracking law imposes the linear error dynamics
//! `e^{(κ)} + a_{κ-1} e^{(κ-1)} + … + a_0 e = 0` by setting
//!
//! ```text
//! v = y^d_[κ] − Σ_β a_β (y_[β] − y^d_[β]) ,
//! ```
//!
//! where the `y_[β]` for `β < κ` are the stage chain expressions over the
//! state and earlier new inputs. Differentiating this λ times — using that in
//! closed loop `y_[β]` evolves into `y_[β+1]` and `y_[κ+q]` equals `v_[q]` —
//! yields the required higher `v`-jets. The resulting equation set is
//! triangular: stages ascending, derivative orders ascending.

use std::collections::BTreeSet;

use num_complex::Complex64;
use thiserror::Error;

use crate::expr::{Expr, ExprError, Valuation, WarmStarts};
use crate::flatsys::FlatSystemDef;
use crate::jets::{Family, JetVar, MultiIndex, VarMap};
use crate::kappa::{synthesize_feedback, KappaError, StagePlan};

/// Default closed-loop pole location when no gains are specified.
pub const DEFAULT_POLE: f64 = -2.0;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("the system does not declare the multi-index R required for tracking")]
    MissingR,
    #[error("output y{} needs {expected} gain coefficients (κ = {expected}), found {got}", output + 1)]
    BadGainLength {
        output: usize,
        expected: usize,
        got: usize,
    },
    #[error("pole multiset is not closed under conjugation (imaginary residue {0:.3e})")]
    NonConjugatePoles(f64),
    #[error("tracking equations are not triangular: {0}")]
    NonTriangular(String),
    #[error("stage {0} was solved implicitly; no closed-form law exists")]
    NotAffine(usize),
    #[error("reference for y{} queried at derivative order {order}, declared max {max}", output + 1)]
    OrderExceeded {
        output: usize,
        order: usize,
        max: usize,
    },
    #[error("feedback evaluation failed ({context}): {source}")]
    SingularFeedback {
        context: String,
        source: ExprError,
    },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Kappa(#[from] KappaError),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

// ---- gains ------------------------------------------------------------

/// Expands a conjugate-closed pole multiset into the non-leading coefficients
/// `(a_0, …, a_{κ-1})` of the monic polynomial `Π (s − p)`.
pub fn poles_to_coefficients(poles: &[Complex64]) -> Result<Vec<f64>, TrackError> {
    // conjugate closure: the multiset must be symmetric under conjugation
    let mut unmatched: Vec<Complex64> = Vec::new();
    for &p in poles {
        if p.im == 0.0 {
            continue;
        }
        if let Some(i) = unmatched
            .iter()
            .position(|q| (q.conj() - p).norm() <= 1e-12 * (1.0 + p.norm()))
        {
            unmatched.swap_remove(i);
        } else {
            unmatched.push(p);
        }
    }
    if let Some(q) = unmatched.first() {
        return Err(TrackError::NonConjugatePoles(q.im.abs()));
    }

    // coeffs[i] multiplies s^{deg−i}; multiply (Σ c_i s^{deg−i}) by (s − p)
    let mut coeffs: Vec<Complex64> = vec![Complex64::new(1.0, 0.0)];
    for &p in poles {
        let k = coeffs.len() + 1;
        let mut next = vec![Complex64::new(0.0, 0.0); k];
        for i in 0..k - 1 {
            next[i] += coeffs[i];
            next[i + 1] -= p * coeffs[i];
        }
        coeffs = next;
    }
    // coeffs[0] = 1 (monic), coeffs[i] multiplies s^{κ-i}; return (a_0,…,a_{κ-1})
    let kappa = poles.len();
    let mut out = Vec::with_capacity(kappa);
    for i in (1..=kappa).rev() {
        out.push(coeffs[i].re);
    }
    Ok(out)
}

/// Per-output error-dynamics coefficients `a_0..a_{κ^j−1}` (monic polynomial
/// understood), in original output order.
#[derive(Clone, Debug)]
pub struct GainSet {
    pub coeffs: Vec<Vec<f64>>,
    /// Non-fatal stability notes gathered during construction.
    pub warnings: Vec<String>,
}

impl GainSet {
    /// All poles of every output at `pole` (defaults to −2 for tracking).
    pub fn uniform_poles(kappa: &MultiIndex, pole: f64) -> GainSet {
        let mut warnings = Vec::new();
        if pole >= 0.0 {
            warnings.push(format!("pole {pole} is not in the open left half-plane"));
        }
        let coeffs = kappa
            .0
            .iter()
            .map(|&k| {
                let poles = vec![Complex64::new(pole, 0.0); k];
                poles_to_coefficients(&poles).expect("real poles are conjugate-closed")
            })
            .collect();
        GainSet { coeffs, warnings }
    }

    /// Pure feedforward: every coefficient zero.
    pub fn zero(kappa: &MultiIndex) -> GainSet {
        GainSet {
            coeffs: kappa.0.iter().map(|&k| vec![0.0; k]).collect(),
            warnings: Vec::new(),
        }
    }

    pub fn default_for(kappa: &MultiIndex) -> GainSet {
        GainSet::uniform_poles(kappa, DEFAULT_POLE)
    }

    fn validate(&self, kappa: &MultiIndex) -> Result<(), TrackError> {
        for (j, c) in self.coeffs.iter().enumerate() {
            if c.len() != kappa.0[j] {
                return Err(TrackError::BadGainLength {
                    output: j,
                    expected: kappa.0[j],
                    got: c.len(),
                });
            }
        }
        Ok(())
    }
}

// ---- reference signals ------------------------------------------------

/// A closed-form reference trajectory for one output with exact analytic
/// derivatives up to a declared order.
#[derive(Clone, Debug)]
pub enum ReferenceSignal {
    /// `offset + amp·sin(omega·t + phase)`; derivatives of any order.
    Sinusoid {
        amp: f64,
        omega: f64,
        phase: f64,
        offset: f64,
    },
    /// `Σ coeffs[i]·t^i`; derivatives of any order.
    Polynomial { coeffs: Vec<f64> },
    /// Smooth point-to-point transition from `from` (t ≤ t0) to `to`
    /// (t ≥ t1) along the minimal-degree polynomial whose derivatives
    /// `1..=smooth` vanish at both ends; derivatives above `smooth` are
    /// discontinuous at the junctions and therefore refused.
    SmoothStep {
        from: f64,
        to: f64,
        t0: f64,
        t1: f64,
        /// Number of vanishing boundary derivatives.
        smooth: usize,
        /// Coefficients of s(τ) on [0,1], degree 2·smooth+1.
        coeffs: Vec<f64>,
    },
}

impl ReferenceSignal {
    pub fn constant(c: f64) -> ReferenceSignal {
        ReferenceSignal::Polynomial { coeffs: vec![c] }
    }

    pub fn sinusoid(amp: f64, omega: f64, phase: f64, offset: f64) -> ReferenceSignal {
        ReferenceSignal::Sinusoid {
            amp,
            omega,
            phase,
            offset,
        }
    }

    /// `smooth` is the number of boundary derivatives forced to zero; pick at
    /// least `max(R) + 1` for a tracking reference.
    pub fn smoothstep(from: f64, to: f64, t0: f64, t1: f64, smooth: usize) -> ReferenceSignal {
        assert!(t1 > t0, "smoothstep needs t1 > t0");
        ReferenceSignal::SmoothStep {
            from,
            to,
            t0,
            t1,
            smooth,
            coeffs: smoothstep_coeffs(smooth),
        }
    }

    pub fn max_order(&self) -> usize {
        match self {
            ReferenceSignal::Sinusoid { .. } | ReferenceSignal::Polynomial { .. } => usize::MAX,
            ReferenceSignal::SmoothStep { smooth, .. } => *smooth,
        }
    }
}

/// Coefficients of the minimal polynomial s with s(0)=0, s(1)=1 and
/// derivatives 1..=p zero at both ends: s(τ) = Σ_{i=p+1}^{2p+1} c_i τ^i.
fn smoothstep_coeffs(p: usize) -> Vec<f64> {
    // boundary conditions at τ=1 give a (p+1)×(p+1) linear system in the
    // nonzero coefficients
    let dim = p + 1;
    let mut a = nalgebra::DMatrix::zeros(dim, dim);
    let mut b = nalgebra::DVector::zeros(dim);
    b[0] = 1.0;
    for k in 0..dim {
        for (col, i) in (p + 1..=2 * p + 1).enumerate() {
            let mut falling = 1.0;
            for q in 0..k {
                falling *= (i - q) as f64;
            }
            a[(k, col)] = falling;
        }
    }
    let sol = a.lu().solve(&b).expect("Hermite system is nonsingular");
    let mut coeffs = vec![0.0; 2 * p + 2];
    for (col, i) in (p + 1..=2 * p + 1).enumerate() {
        coeffs[i] = sol[col];
    }
    coeffs
}

fn poly_derivative_at(coeffs: &[f64], t: f64, order: usize) -> f64 {
    let mut acc = 0.0;
    for (i, &c) in coeffs.iter().enumerate().skip(order) {
        let mut falling = 1.0;
        for q in 0..order {
            falling *= (i - q) as f64;
        }
        acc += c * falling * t.powi((i - order) as i32);
    }
    acc
}

/// Exact value of the `order`-th time derivative of the signal at `t`.
pub fn reference_eval(sig: &ReferenceSignal, t: f64, order: usize) -> Result<f64, TrackError> {
    match sig {
        ReferenceSignal::Sinusoid {
            amp,
            omega,
            phase,
            offset,
        } => {
            // d^k/dt^k sin(ωt+φ) = ω^k sin(ωt + φ + kπ/2)
            let shifted = omega * t + phase + order as f64 * std::f64::consts::FRAC_PI_2;
            let v = amp * omega.powi(order as i32) * shifted.sin();
            Ok(if order == 0 { offset + v } else { v })
        }
        ReferenceSignal::Polynomial { coeffs } => Ok(poly_derivative_at(coeffs, t, order)),
        ReferenceSignal::SmoothStep {
            from,
            to,
            t0,
            t1,
            smooth,
            coeffs,
        } => {
            if order > *smooth {
                return Err(TrackError::OrderExceeded {
                    output: 0,
                    order,
                    max: *smooth,
                });
            }
            if t <= *t0 {
                Ok(if order == 0 { *from } else { 0.0 })
            } else if t >= *t1 {
                Ok(if order == 0 { *to } else { 0.0 })
            } else {
                let w = t1 - t0;
                let tau = (t - t0) / w;
                let s = poly_derivative_at(coeffs, tau, order) / w.powi(order as i32);
                Ok(if order == 0 {
                    from + (to - from) * s
                } else {
                    (to - from) * s
                })
            }
        }
    }
}

/// Writes the reference jets `y^{j,d}_[0..=R_j]` at time `t` into `point`.
pub fn set_reference_jets(
    refs: &[ReferenceSignal],
    r: &MultiIndex,
    t: f64,
    point: &mut Valuation,
) -> Result<(), TrackError> {
    for (j, sig) in refs.iter().enumerate() {
        for order in 0..=r.0[j] {
            let v = reference_eval(sig, t, order).map_err(|e| match e {
                TrackError::OrderExceeded { order, max, .. } => TrackError::OrderExceeded {
                    output: j,
                    order,
                    max,
                },
                other => other,
            })?;
            point.set(JetVar::reference(j).shifted(order), v);
        }
    }
    Ok(())
}

// ---- tracking equations ----------------------------------------------

/// One row of the triangular tracking set: `var = rhs` with `rhs` over the
/// state, reference jets, and previously defined `v`-jets.
#[derive(Clone, Debug)]
pub struct TrackingEquation {
    pub var: JetVar,
    pub rhs: Expr,
}

/// The complete evaluation program for `u = α(x, y^d-jets)`: the `v`-jet
/// equations in resolution order followed by the per-stage input definitions
/// in reverse stage order.
#[derive(Clone, Debug)]
pub struct TrackingLaw {
    pub equations: Vec<TrackingEquation>,
    /// `(u_index, expr)` pairs; each expr is over x, v-jets, and inputs
    /// defined earlier in this list (later stages resolve first).
    pub input_defs: Vec<(JetVar, Expr)>,
    /// Fully substituted closed form per input, when every stage is affine.
    pub symbolic: Option<Vec<Expr>>,
    pub r: MultiIndex,
    pub gains: GainSet,
}

/// Builds the `v`-jet equations for all stages, outputs, and derivative
/// orders `λ = 0..=R_j − κ_j`, replacing output derivatives below `κ` by
/// their chain expressions, and checks the triangular dependency order.
pub fn build_tracking_equations(
    plan: &StagePlan,
    sys: &FlatSystemDef,
    gains: &GainSet,
) -> Result<Vec<TrackingEquation>, TrackError> {
    let r = sys.declared_r.clone().ok_or(TrackError::MissingR)?;
    gains.validate(&plan.kappa)?;

    let mut eqs: Vec<TrackingEquation> = Vec::new();
    for stage in &plan.stages {
        for (comp, &j) in stage.selected_outputs.iter().enumerate() {
            let info = &plan.outputs[j];
            debug_assert_eq!(info.stage, stage.stage);
            debug_assert_eq!(info.comp, comp);
            let kappa = info.kappa;
            let a = &gains.coeffs[j];
            let v_base = JetVar::new_input(stage.stage, comp);
            let yd = JetVar::reference(j);
            // closed-loop value of y^j_[q]
            let y_at = |q: usize| -> Expr {
                if q < kappa {
                    info.chain[q].clone()
                } else {
                    let v = v_base.shifted(q - kappa);
                    plan.registry.touch(v);
                    Expr::var(v)
                }
            };
            for lambda in 0..=(r.0[j] - kappa) {
                let mut rhs = Expr::var(yd.shifted(kappa + lambda));
                plan.registry.touch(yd.shifted(kappa + lambda));
                for (beta, &coeff) in a.iter().enumerate() {
                    if coeff == 0.0 {
                        continue;
                    }
                    let err = Expr::sub(
                        y_at(beta + lambda),
                        Expr::var(yd.shifted(beta + lambda)),
                    );
                    plan.registry.touch(yd.shifted(beta + lambda));
                    rhs = Expr::sub(rhs, Expr::mul(Expr::constant(coeff), err));
                }
                eqs.push(TrackingEquation {
                    var: v_base.shifted(lambda),
                    rhs: rhs.simplify(),
                });
            }
        }
    }
    check_triangular(plan, sys, &eqs)?;
    Ok(eqs)
}

/// Asserts the documented resolution order: each right-hand side may use
/// states at jet order 0, reference jets within R, and `v`-jets defined by
/// earlier equations; inputs and measured output derivatives never appear.
fn check_triangular(
    plan: &StagePlan,
    sys: &FlatSystemDef,
    eqs: &[TrackingEquation],
) -> Result<(), TrackError> {
    let r = sys.declared_r.as_ref().ok_or(TrackError::MissingR)?;
    let mut defined: BTreeSet<JetVar> = BTreeSet::new();
    for eq in eqs {
        for v in eq.rhs.free_vars() {
            let ok = match v.family {
                Family::State => v.order == 0,
                Family::Reference => v.order <= r.0[v.index as usize] as u16,
                Family::NewInput { .. } => defined.contains(&v),
                Family::Input => false,
            };
            if !ok {
                return Err(TrackError::NonTriangular(format!(
                    "equation for {} references {}",
                    plan.registry.name(eq.var),
                    plan.registry.name(v)
                )));
            }
        }
        defined.insert(eq.var);
    }
    Ok(())
}

/// Assembles the full tracking law: the `v` equations plus the per-stage
/// input solutions in reverse stage order (so that the still-remaining
/// inputs referenced by earlier stages are already defined).
pub fn build_tracking_law(
    plan: &StagePlan,
    sys: &FlatSystemDef,
    gains: &GainSet,
) -> Result<TrackingLaw, TrackError> {
    let equations = build_tracking_equations(plan, sys, gains)?;
    let r = sys.declared_r.clone().ok_or(TrackError::MissingR)?;
    let mut input_defs: Vec<(JetVar, Expr)> = Vec::new();
    for stage in plan.stages.iter().rev() {
        for (input_idx, expr) in &stage.solved {
            input_defs.push((JetVar::input(*input_idx), expr.clone()));
        }
    }
    // v-jet orders used anywhere must stay within the computed range R−κ
    let defined: BTreeSet<JetVar> = equations.iter().map(|e| e.var).collect();
    for (u, expr) in &input_defs {
        for v in expr.free_vars() {
            if matches!(v.family, Family::NewInput { .. }) && !defined.contains(&v) {
                return Err(TrackError::NonTriangular(format!(
                    "feedback for {} needs {} beyond the computed jet range",
                    plan.registry.name(*u),
                    plan.registry.name(v)
                )));
            }
        }
    }
    Ok(TrackingLaw {
        equations,
        input_defs,
        symbolic: None,
        r,
        gains: gains.clone(),
    })
}

/// Numerically resolves the triangular set at one point. `point` must hold
/// the state (jet order 0) and the reference jets up to R; it is extended
/// with the computed `v`-jets and input values. Returns the `v`-jets and the
/// inputs in original order.
pub fn resolve_tracking(
    law: &TrackingLaw,
    n_inputs: usize,
    point: &mut Valuation,
    warm: &mut WarmStarts,
) -> Result<(VarMap<f64>, Vec<f64>), TrackError> {
    let mut vjets = VarMap::new();
    for eq in &law.equations {
        let val = eq.rhs.evaluate_warm(point, warm).map_err(|e| match e {
            ExprError::SingularMatrix { .. } | ExprError::NewtonDivergence { .. } => {
                TrackError::SingularFeedback {
                    context: format!("while solving for {}", crate::expr::default_name(eq.var)),
                    source: e,
                }
            }
            other => TrackError::Expr(other),
        })?;
        point.set(eq.var, val);
        vjets.insert(eq.var, val);
    }
    let mut u = vec![f64::NAN; n_inputs];
    for (uv, expr) in &law.input_defs {
        let val = expr.evaluate_warm(point, warm).map_err(|e| match e {
            ExprError::SingularMatrix { .. } | ExprError::NewtonDivergence { .. } => {
                TrackError::SingularFeedback {
                    context: format!("while solving for {}", crate::expr::default_name(*uv)),
                    source: e,
                }
            }
            other => TrackError::Expr(other),
        })?;
        point.set(*uv, val);
        u[uv.index as usize] = val;
    }
    Ok((vjets, u))
}

/// Fully substituted closed form `u = α(x, y^d_[0..R])`, available when every
/// stage was solved symbolically.
pub fn synthesize_symbolic_law(
    plan: &StagePlan,
    sys: &FlatSystemDef,
    gains: &GainSet,
) -> Result<Vec<Expr>, TrackError> {
    for stage in &plan.stages {
        if !stage.affine {
            return Err(TrackError::NotAffine(stage.stage));
        }
    }
    let equations = build_tracking_equations(plan, sys, gains)?;
    // resolve each v-jet to an expression over (x, y^d) by forward substitution
    let mut resolved: VarMap<Expr> = VarMap::new();
    for eq in &equations {
        let rhs = eq.rhs.substitute(&resolved)?.simplify();
        resolved.insert(eq.var, rhs);
    }
    let feedback = synthesize_feedback(plan, sys)?;
    let r = sys.declared_r.as_ref().ok_or(TrackError::MissingR)?;
    let mut out = Vec::with_capacity(feedback.inputs.len());
    for (idx, e) in feedback.inputs.iter().enumerate() {
        let law = e.substitute(&resolved)?.simplify();
        for v in law.free_vars() {
            let ok = match v.family {
                Family::State => v.order == 0,
                Family::Reference => v.order <= r.0[v.index as usize] as u16,
                _ => false,
            };
            if !ok {
                return Err(TrackError::NonTriangular(format!(
                    "closed-form law for u{} still references {}",
                    idx + 1,
                    plan.registry.name(v)
                )));
            }
        }
        out.push(law);
    }
    Ok(out)
}

// ---- gain / reference configuration files -----------------------------

/// Raw gain specification for one output, before κ is known.
#[derive(Clone, Debug, PartialEq)]
pub enum GainSpec {
    Poles(Vec<Complex64>),
    Coeffs(Vec<f64>),
}

/// Raw reference specification for one output.
#[derive(Clone, Debug, PartialEq)]
pub enum RefSpec {
    Sin {
        amp: f64,
        omega: f64,
        phase: f64,
        offset: f64,
    },
    Step {
        from: f64,
        to: f64,
        t0: f64,
        t1: f64,
    },
    Const(f64),
}

/// Parsed `[gains]` / `[reference]` file.
#[derive(Clone, Debug, Default)]
pub struct ControlConfig {
    pub gains: Vec<(usize, GainSpec)>,
    pub refs: Vec<(usize, RefSpec)>,
}

impl ControlConfig {
    /// Realizes the gain entries against the computed κ; unspecified outputs
    /// fall back to all poles at −2.
    pub fn gain_set(&self, kappa: &MultiIndex) -> Result<GainSet, TrackError> {
        let mut set = GainSet::default_for(kappa);
        for (j, spec) in &self.gains {
            let j = *j;
            if j >= kappa.len() {
                return Err(TrackError::Format {
                    line: 0,
                    msg: format!("gains given for y{} but the system has {} outputs", j + 1, kappa.len()),
                });
            }
            let coeffs = match spec {
                GainSpec::Coeffs(c) => c.clone(),
                GainSpec::Poles(p) => {
                    for q in p {
                        if q.re >= 0.0 {
                            set.warnings.push(format!(
                                "y{}: pole {} is not in the open left half-plane",
                                j + 1,
                                q
                            ));
                        }
                    }
                    poles_to_coefficients(p)?
                }
            };
            if coeffs.len() != kappa.0[j] {
                return Err(TrackError::BadGainLength {
                    output: j,
                    expected: kappa.0[j],
                    got: coeffs.len(),
                });
            }
            set.coeffs[j] = coeffs;
        }
        set.validate(kappa)?;
        Ok(set)
    }

    /// Realizes the reference entries; unspecified outputs hold the value
    /// `defaults[j]` constant. `smooth` is the smoothstep boundary order
    /// (use `max(R) + 1`).
    pub fn reference_signals(
        &self,
        m: usize,
        defaults: &[f64],
        smooth: usize,
    ) -> Result<Vec<ReferenceSignal>, TrackError> {
        let mut refs: Vec<ReferenceSignal> = defaults
            .iter()
            .map(|&c| ReferenceSignal::constant(c))
            .collect();
        for (j, spec) in &self.refs {
            if *j >= m {
                return Err(TrackError::Format {
                    line: 0,
                    msg: format!("reference given for y{} but the system has {m} outputs", j + 1),
                });
            }
            refs[*j] = match *spec {
                RefSpec::Const(c) => ReferenceSignal::constant(c),
                RefSpec::Sin {
                    amp,
                    omega,
                    phase,
                    offset,
                } => ReferenceSignal::sinusoid(amp, omega, phase, offset),
                RefSpec::Step { from, to, t0, t1 } => {
                    ReferenceSignal::smoothstep(from, to, t0, t1, smooth)
                }
            };
        }
        Ok(refs)
    }
}

/// Parses a gain/reference file:
///
/// ```text
/// [gains]
/// y1.poles = -1,-1
/// y2.coeffs = 1,2
/// [reference]
/// y1 = sin(1,2,0,0)
/// y2 = step(0,1,0.5,2.5)
/// y3 = const(0)
/// ```
pub fn parse_control_config(text: &str) -> Result<ControlConfig, TrackError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Gains,
        Reference,
    }
    let fail = |line: usize, msg: String| TrackError::Format { line, msg };
    let mut cfg = ControlConfig::default();
    let mut section = Section::None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name.trim() {
                "gains" => Section::Gains,
                "reference" => Section::Reference,
                other => return Err(fail(line_no, format!("unknown section [{other}]"))),
            };
            continue;
        }
        let (lhs, rhs) = line
            .split_once('=')
            .ok_or_else(|| fail(line_no, "expected `name = value`".into()))?;
        let (lhs, rhs) = (lhs.trim(), rhs.trim());
        match section {
            Section::None => return Err(fail(line_no, "entry before any section header".into())),
            Section::Gains => {
                let (out, kind) = lhs
                    .split_once('.')
                    .ok_or_else(|| fail(line_no, "expected `y<j>.poles` or `y<j>.coeffs`".into()))?;
                let j = parse_output_name(out)
                    .ok_or_else(|| fail(line_no, format!("bad output name `{out}`")))?;
                let spec = match kind.trim() {
                    "poles" => GainSpec::Poles(
                        rhs.split(',')
                            .map(|s| {
                                parse_complex(s.trim())
                                    .ok_or_else(|| fail(line_no, format!("bad pole `{s}`")))
                            })
                            .collect::<Result<_, _>>()?,
                    ),
                    "coeffs" => GainSpec::Coeffs(
                        rhs.split(',')
                            .map(|s| {
                                s.trim()
                                    .parse::<f64>()
                                    .map_err(|_| fail(line_no, format!("bad coefficient `{s}`")))
                            })
                            .collect::<Result<_, _>>()?,
                    ),
                    other => return Err(fail(line_no, format!("unknown gain kind `{other}`"))),
                };
                cfg.gains.push((j, spec));
            }
            Section::Reference => {
                let j = parse_output_name(lhs)
                    .ok_or_else(|| fail(line_no, format!("bad output name `{lhs}`")))?;
                let (func, args) = rhs
                    .split_once('(')
                    .and_then(|(f, rest)| rest.strip_suffix(')').map(|a| (f.trim(), a)))
                    .ok_or_else(|| fail(line_no, "expected `func(args)`".into()))?;
                let nums: Vec<f64> = if args.trim().is_empty() {
                    Vec::new()
                } else {
                    args.split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<f64>()
                                .map_err(|_| fail(line_no, format!("bad number `{s}`")))
                        })
                        .collect::<Result<_, _>>()?
                };
                let want = |n: usize| -> Result<(), TrackError> {
                    if nums.len() == n {
                        Ok(())
                    } else {
                        Err(fail(
                            line_no,
                            format!("{func} expects {n} arguments, found {}", nums.len()),
                        ))
                    }
                };
                let spec = match func {
                    "sin" => {
                        want(4)?;
                        RefSpec::Sin {
                            amp: nums[0],
                            omega: nums[1],
                            phase: nums[2],
                            offset: nums[3],
                        }
                    }
                    "step" => {
                        want(4)?;
                        if nums[3] <= nums[2] {
                            return Err(fail(line_no, "step needs t1 > t0".into()));
                        }
                        RefSpec::Step {
                            from: nums[0],
                            to: nums[1],
                            t0: nums[2],
                            t1: nums[3],
                        }
                    }
                    "const" => {
                        want(1)?;
                        RefSpec::Const(nums[0])
                    }
                    other => return Err(fail(line_no, format!("unknown reference `{other}`"))),
                };
                cfg.refs.push((j, spec));
            }
        }
    }
    Ok(cfg)
}

fn parse_output_name(s: &str) -> Option<usize> {
    let n: usize = s.trim().strip_prefix('y')?.parse().ok()?;
    if n >= 1 {
        Some(n - 1)
    } else {
        None
    }
}

/// Parses `-1`, `-1.5+2i`, `-1.5-2i`, `2i`, `-i`.
fn parse_complex(s: &str) -> Option<Complex64> {
    let s = s.trim();
    if let Ok(re) = s.parse::<f64>() {
        return Some(Complex64::new(re, 0.0));
    }
    let body = s.strip_suffix('i')?;
    // split at the last +/- that is not an exponent sign or leading sign
    let bytes = body.as_bytes();
    let mut split = None;
    for k in (1..bytes.len()).rev() {
        let c = bytes[k] as char;
        if (c == '+' || c == '-') && !matches!(bytes[k - 1] as char, 'e' | 'E') {
            split = Some(k);
            break;
        }
    }
    match split {
        Some(k) => {
            let re: f64 = body[..k].trim().parse().ok()?;
            let im_str = body[k..].trim();
            let im: f64 = match im_str {
                "+" => 1.0,
                "-" => -1.0,
                other => other.parse().ok()?,
            };
            Some(Complex64::new(re, im))
        }
        None => {
            let im: f64 = match body.trim() {
                "" | "+" => 1.0,
                "-" => -1.0,
                other => other.parse().ok()?,
            };
            Some(Complex64::new(0.0, im))
        }
    }
}
