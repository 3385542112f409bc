//! System definitions: the data model, a line-oriented file loader, and the
//! two bundled benchmark systems (a 10-state academic four-input system and a
//! 3D gantry crane whose dynamics stay in mass-matrix form).

use std::sync::Arc;

use crate::expr::{parse_with_params, Expr, ExprError, LinSystem, NodeKind, Valuation};
use crate::jets::{DynamicsTable, Family, JetRegistry, JetVar, MultiIndex};
use crate::sample::SampleSpace;

/// A control system `ẋ = f(x,u)` together with its declared flat output
/// `y = φ(x,u)` and optional metadata used by the staged procedure.
#[derive(Clone, Debug)]
pub struct FlatSystemDef {
    pub name: String,
    pub registry: JetRegistry,
    pub params: Vec<(String, f64)>,
    pub dynamics: DynamicsTable,
    /// Flat output components φ^1..φ^m over (x, u) at jet order 0.
    pub outputs: Vec<Expr>,
    /// Declared multi-index R (highest derivative orders of y in the flat
    /// parameterization); optional metadata.
    pub declared_r: Option<MultiIndex>,
    /// Per-stage ordered output preferences (0-based output indices);
    /// `hints[i]` applies to stage `i+1`.
    pub hints: Vec<Vec<usize>>,
    /// Box from which semantic sample points are drawn.
    pub sample_space: SampleSpace,
    /// Convenient rest state for simulations.
    pub default_state: Vec<f64>,
    /// For mass-matrix systems: the underlying `M(q,q̇)·q̈ = rhs(q,q̇,u)`
    /// system the acceleration expressions are components of.
    pub mass_system: Option<Arc<LinSystem>>,
}

impl FlatSystemDef {
    pub fn n_states(&self) -> usize {
        self.registry.n_states()
    }

    pub fn n_inputs(&self) -> usize {
        self.registry.n_inputs()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Evaluates the flat output at a state/input point.
    pub fn output_values(&self, p: &Valuation) -> Result<Vec<f64>, ExprError> {
        self.outputs.iter().map(|e| e.evaluate(p)).collect()
    }

    fn validate(&self) -> Result<(), SystemError> {
        let n = self.n_states();
        let m = self.n_inputs();
        if self.dynamics.n_states() != n {
            return Err(SystemError::Validation(format!(
                "{} states declared but {} dynamics equations given",
                n,
                self.dynamics.n_states()
            )));
        }
        if self.outputs.len() != m {
            return Err(SystemError::Validation(format!(
                "flat output must have m = {} components, found {}",
                m,
                self.outputs.len()
            )));
        }
        if let Some(r) = &self.declared_r {
            if r.len() != m {
                return Err(SystemError::Validation(format!(
                    "declared R has {} components, expected {}",
                    r.len(),
                    m
                )));
            }
        }
        for (i, e) in self.dynamics.rhs.iter().chain(self.outputs.iter()).enumerate() {
            for v in e.free_vars() {
                let ok = matches!(v.family, Family::State | Family::Input) && v.order == 0;
                if !ok {
                    return Err(SystemError::Validation(format!(
                        "expression {} references {}; only states and inputs at jet order 0 are allowed",
                        i,
                        self.registry.name(v)
                    )));
                }
            }
        }
        for h in &self.hints {
            for &j in h {
                if j >= self.outputs.len() {
                    return Err(SystemError::Validation(format!(
                        "hint references output y{} but the system has {} outputs",
                        j + 1,
                        self.outputs.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Expr {
        line: usize,
        #[source]
        source: ExprError,
    },
    #[error("invalid system: {0}")]
    Validation(String),
    #[error("nonpositive parameter {0} = {1}")]
    NonpositiveParameter(String, f64),
}

// ---- file loader ------------------------------------------------------

/// Parses the line-oriented system description format:
///
/// ```text
/// [system] name=academic
/// [states] x1 x2 ...
/// [inputs] u1 ...
/// [params] k=2.5 ...
/// [dynamics]
/// x1' = u1
/// ...
/// [flat_output]
/// y1 = x1
/// [declare] R = (4,3,5,5)
/// [hints] stage1_outputs = y3
/// ```
pub fn load_system(text: &str) -> Result<FlatSystemDef, SystemError> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Dynamics,
        FlatOutput,
    }

    let mut name = String::new();
    let mut state_names: Vec<String> = Vec::new();
    let mut input_names: Vec<String> = Vec::new();
    let mut params: Vec<(String, f64)> = Vec::new();
    let mut dynamics_lines: Vec<(usize, String, String)> = Vec::new(); // (line, state, expr)
    let mut output_lines: Vec<(usize, usize, String)> = Vec::new(); // (line, output index, expr)
    let mut declared_r: Option<MultiIndex> = None;
    let mut hints: Vec<(usize, Vec<usize>)> = Vec::new(); // (stage, outputs)
    let mut n_output_decls = 0usize;

    let mut section = Section::None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| SystemError::Format { line, msg };
        if let Some(rest) = content.strip_prefix('[') {
            let (header, tail) = rest
                .split_once(']')
                .ok_or_else(|| err("unterminated section header".to_string()))?;
            let tail = tail.trim();
            section = Section::None;
            match header {
                "system" => {
                    let (k, v) = tail
                        .split_once('=')
                        .ok_or_else(|| err("expected `name=<id>`".to_string()))?;
                    if k.trim() != "name" {
                        return Err(err(format!("unknown [system] key `{}`", k.trim())));
                    }
                    name = v.trim().to_string();
                }
                "states" => {
                    state_names = tail.split_whitespace().map(str::to_string).collect();
                }
                "inputs" => {
                    input_names = tail.split_whitespace().map(str::to_string).collect();
                }
                "params" => {
                    for kv in tail.split_whitespace() {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected `key=value`, found `{}`", kv)))?;
                        let value: f64 = v
                            .parse()
                            .map_err(|_| err(format!("invalid parameter value `{}`", v)))?;
                        params.push((k.to_string(), value));
                    }
                }
                "dynamics" => section = Section::Dynamics,
                "flat_output" => section = Section::FlatOutput,
                "declare" => {
                    let (k, v) = tail
                        .split_once('=')
                        .ok_or_else(|| err("expected `R = (r1,...,rm)`".to_string()))?;
                    if k.trim() != "R" {
                        return Err(err(format!("unknown [declare] key `{}`", k.trim())));
                    }
                    let v = v.trim();
                    let inner = v
                        .strip_prefix('(')
                        .and_then(|s| s.strip_suffix(')'))
                        .ok_or_else(|| err("R must be parenthesized: (r1,...,rm)".to_string()))?;
                    let comps: Result<Vec<usize>, _> =
                        inner.split(',').map(|s| s.trim().parse::<usize>()).collect();
                    declared_r = Some(MultiIndex(
                        comps.map_err(|_| err("R components must be nonnegative integers".to_string()))?,
                    ));
                }
                "hints" => {
                    let (k, v) = tail
                        .split_once('=')
                        .ok_or_else(|| err("expected `stage<i>_outputs = y<a>,y<b>`".to_string()))?;
                    let k = k.trim();
                    let stage: usize = k
                        .strip_prefix("stage")
                        .and_then(|s| s.strip_suffix("_outputs"))
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(format!("unknown [hints] key `{}`", k)))?;
                    let mut outs = Vec::new();
                    for item in v.split(',') {
                        let item = item.trim();
                        let j: usize = item
                            .strip_prefix('y')
                            .and_then(|s| s.parse().ok())
                            .filter(|&j| j >= 1)
                            .ok_or_else(|| err(format!("invalid output reference `{}`", item)))?;
                        outs.push(j - 1);
                    }
                    hints.push((stage, outs));
                }
                other => return Err(err(format!("unknown section `[{}]`", other))),
            }
        } else {
            match section {
                Section::Dynamics => {
                    let (lhs, rhs) = content
                        .split_once('=')
                        .ok_or_else(|| err("expected `xk' = <expr>`".to_string()))?;
                    let lhs = lhs.trim();
                    let state = lhs
                        .strip_suffix('\'')
                        .ok_or_else(|| err(format!("dynamics left side `{}` must end with `'`", lhs)))?;
                    dynamics_lines.push((line, state.trim().to_string(), rhs.trim().to_string()));
                }
                Section::FlatOutput => {
                    let (lhs, rhs) = content
                        .split_once('=')
                        .ok_or_else(|| err("expected `y<j> = <expr>`".to_string()))?;
                    let lhs = lhs.trim();
                    let j: usize = lhs
                        .strip_prefix('y')
                        .and_then(|s| s.parse().ok())
                        .filter(|&j| j >= 1)
                        .ok_or_else(|| err(format!("invalid output name `{}`", lhs)))?;
                    n_output_decls = n_output_decls.max(j);
                    output_lines.push((line, j - 1, rhs.trim().to_string()));
                }
                Section::None => {
                    return Err(err(format!("content outside of a section: `{}`", content)))
                }
            }
        }
    }

    if state_names.is_empty() {
        return Err(SystemError::Validation("no [states] declared".to_string()));
    }
    if input_names.is_empty() {
        return Err(SystemError::Validation("no [inputs] declared".to_string()));
    }
    let mut registry = JetRegistry::new(state_names.clone(), input_names);
    registry.set_output_count(n_output_decls);

    // dynamics: one equation per state, order free
    let mut rhs: Vec<Option<Expr>> = vec![None; state_names.len()];
    for (line, state, text) in &dynamics_lines {
        let idx = state_names
            .iter()
            .position(|n| n == state)
            .ok_or(SystemError::Format {
                line: *line,
                msg: format!("unknown state `{}`", state),
            })?;
        if rhs[idx].is_some() {
            return Err(SystemError::Format {
                line: *line,
                msg: format!("duplicate dynamics for `{}`", state),
            });
        }
        let e = parse_with_params(text, &registry, &params).map_err(|source| SystemError::Expr {
            line: *line,
            source,
        })?;
        rhs[idx] = Some(e);
    }
    let rhs: Vec<Expr> = rhs
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            e.ok_or_else(|| SystemError::Validation(format!("missing dynamics for `{}`", state_names[i])))
        })
        .collect::<Result<_, _>>()?;

    let mut outputs: Vec<Option<Expr>> = vec![None; n_output_decls];
    for (line, j, text) in &output_lines {
        if outputs[*j].is_some() {
            return Err(SystemError::Format {
                line: *line,
                msg: format!("duplicate flat output y{}", j + 1),
            });
        }
        let e = parse_with_params(text, &registry, &params).map_err(|source| SystemError::Expr {
            line: *line,
            source,
        })?;
        outputs[*j] = Some(e);
    }
    let outputs: Vec<Expr> = outputs
        .into_iter()
        .enumerate()
        .map(|(j, e)| e.ok_or_else(|| SystemError::Validation(format!("missing flat output y{}", j + 1))))
        .collect::<Result<_, _>>()?;

    let mut hint_list: Vec<Vec<usize>> = Vec::new();
    for (stage, outs) in hints {
        if stage == 0 {
            return Err(SystemError::Validation("hint stages are 1-based".to_string()));
        }
        if hint_list.len() < stage {
            hint_list.resize(stage, Vec::new());
        }
        hint_list[stage - 1] = outs;
    }

    let n = state_names.len();
    let def = FlatSystemDef {
        name,
        registry,
        params,
        dynamics: DynamicsTable::new(rhs),
        outputs,
        declared_r,
        hints: hint_list,
        sample_space: SampleSpace::standard(),
        default_state: vec![0.0; n],
        mass_system: None,
    };
    def.validate()?;
    Ok(def)
}

// ---- bundled academic system ------------------------------------------

/// The bundled 10-state four-input system, in the textual format.
pub const ACADEMIC_SYSTEM_TEXT: &str = "\
[system] name=academic
[states] x1 x2 x3 x4 x5 x6 x7 x8 x9 x10
[inputs] u1 u2 u3 u4
[dynamics]
x1'  = u1
x2'  = x9
x3'  = u2 - u1*u3
x4'  = u3
x5'  = x3 + x4*u1
x6'  = x7*(u1*u3 - u2 - 1) + u1*x4*(u1 + x4) - x8*u1
x7'  = x4 + u1
x8'  = x4*x7*u1 - x6
x9'  = x10 + u2 + u3
x10' = u4
[flat_output]
y1 = x1
y2 = x2
y3 = x5
y4 = x8
[declare] R = (4,3,5,5)
";

/// The 10-state academic four-input system with flat output
/// `y = (x1, x2, x5, x8)` and `R = (4,3,5,5)`.
pub fn builtin_academic() -> FlatSystemDef {
    load_system(ACADEMIC_SYSTEM_TEXT).expect("bundled academic system must load")
}

// ---- bundled gantry crane ---------------------------------------------

/// Physical parameters of the 3D gantry crane.
#[derive(Clone, Copy, Debug)]
pub struct CraneParams {
    /// Load mass.
    pub m_l: f64,
    /// Trolley mass.
    pub m_t: f64,
    /// Bridge mass.
    pub m_b: f64,
    /// Rope drum moment of inertia.
    pub j: f64,
    /// Rope drum radius.
    pub r: f64,
    /// Gravitational acceleration.
    pub g: f64,
}

impl Default for CraneParams {
    fn default() -> Self {
        CraneParams {
            m_l: 1.0,
            m_t: 5.0,
            m_b: 10.0,
            j: 0.01,
            r: 0.1,
            g: 9.81,
        }
    }
}

/// State indices of the crane: positions then velocities.
pub mod crane_state {
    pub const X_T: usize = 0;
    pub const Y_T: usize = 1;
    pub const PHI: usize = 2;
    pub const ALPHA: usize = 3;
    pub const BETA: usize = 4;
    pub const V_XT: usize = 5;
    pub const V_YT: usize = 6;
    pub const W_PHI: usize = 7;
    pub const W_ALPHA: usize = 8;
    pub const W_BETA: usize = 9;
}

/// 3D gantry crane with state
/// `(x_T, y_T, φ, α, β, v_xT, v_yT, ω_φ, ω_α, ω_β)`, inputs
/// `(f_x, f_y, drum torque)` and the load position as flat output. The five
/// accelerations are components of the implicit system `M(q)·q̈ = rhs` taken
/// directly from the Lagrange equations; a stage-1 preference for the rope
/// length output `y3` is baked in (the alternatives are singular at
/// `α = 0` or `β = 0`).
pub fn builtin_crane(p: CraneParams) -> Result<FlatSystemDef, SystemError> {
    for (name, v) in [
        ("m_L", p.m_l),
        ("m_T", p.m_t),
        ("m_B", p.m_b),
        ("J", p.j),
        ("r", p.r),
        ("g", p.g),
    ] {
        if !(v > 0.0) {
            return Err(SystemError::NonpositiveParameter(name.to_string(), v));
        }
    }

    let state_names: Vec<String> = [
        "x_T", "y_T", "phi", "alpha", "beta", "v_xT", "v_yT", "w_phi", "w_alpha", "w_beta",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let input_names: Vec<String> = ["u1", "u2", "u3"].iter().map(|s| s.to_string()).collect();
    let mut registry = JetRegistry::new(state_names, input_names);
    registry.set_output_count(3);

    use crane_state::*;
    let c = Expr::constant;
    let x = |i: usize| Expr::var(JetVar::state(i));
    let u = |j: usize| Expr::var(JetVar::input(j));

    let phi = x(PHI);
    let sa = Expr::sin(x(ALPHA));
    let ca = Expr::cos(x(ALPHA));
    let sb = Expr::sin(x(BETA));
    let cb = Expr::cos(x(BETA));
    let wphi = x(W_PHI);
    let wa = x(W_ALPHA);
    let wb = x(W_BETA);
    let (m_l, r, g) = (c(p.m_l), c(p.r), c(p.g));

    // generalized coordinates q = (x_T, y_T, φ, α, β); the five Lagrange
    // equations in the form M(q,q̇)·q̈ = rhs(q,q̇,u)
    let zero = || c(0.0);
    let mat = vec![
        // (m_L+m_T)ẍ_T + m_L r sinβ φ̈ + m_L r φ cosβ β̈ + ... = u¹
        vec![
            c(p.m_l + p.m_t),
            zero(),
            m_l.clone() * r.clone() * sb.clone(),
            zero(),
            m_l.clone() * r.clone() * phi.clone() * cb.clone(),
        ],
        // (m_L+m_T+m_B)ÿ_T + m_L r sinα cosβ φ̈ + m_L r φ(cosα cosβ α̈ − sinα sinβ β̈) − ... = u²
        vec![
            zero(),
            c(p.m_l + p.m_t + p.m_b),
            m_l.clone() * r.clone() * sa.clone() * cb.clone(),
            m_l.clone() * r.clone() * phi.clone() * ca.clone() * cb.clone(),
            -(m_l.clone() * r.clone() * phi.clone() * sa.clone() * sb.clone()),
        ],
        // m_L r sinβ ẍ_T + m_L r sinα cosβ ÿ_T + (J+m_L r²) φ̈ − ... = u³
        vec![
            m_l.clone() * r.clone() * sb.clone(),
            m_l.clone() * r.clone() * sa.clone() * cb.clone(),
            c(p.j + p.m_l * p.r * p.r),
            zero(),
            zero(),
        ],
        // rφ cosα cosβ ÿ_T + (rφ cosβ)² α̈ + ... = 0
        vec![
            zero(),
            r.clone() * phi.clone() * ca.clone() * cb.clone(),
            zero(),
            Expr::powi(r.clone() * phi.clone() * cb.clone(), 2),
            zero(),
        ],
        // rφ cosβ ẍ_T − rφ sinα sinβ ÿ_T + (rφ)² β̈ + ... = 0
        vec![
            r.clone() * phi.clone() * cb.clone(),
            -(r.clone() * phi.clone() * sa.clone() * sb.clone()),
            zero(),
            zero(),
            Expr::powi(r.clone() * phi.clone(), 2),
        ],
    ];
    let rhs = vec![
        // u¹ − m_L r β̇ (2 cosβ φ̇ − φ sinβ β̇)
        u(0) - m_l.clone()
            * r.clone()
            * wb.clone()
            * (c(2.0) * cb.clone() * wphi.clone() - phi.clone() * sb.clone() * wb.clone()),
        // u² + m_L r ( sinα (φ cosβ (α̇²+β̇²) + 2 sinβ β̇ φ̇) + 2 cosα α̇ (φ sinβ β̇ − cosβ φ̇) )
        u(1) + m_l.clone()
            * r.clone()
            * (sa.clone()
                * (phi.clone() * cb.clone()
                    * (Expr::powi(wa.clone(), 2) + Expr::powi(wb.clone(), 2))
                    + c(2.0) * sb.clone() * wb.clone() * wphi.clone())
                + c(2.0) * ca.clone() * wa.clone()
                    * (phi.clone() * sb.clone() * wb.clone() - cb.clone() * wphi.clone())),
        // u³ + m_L r ( rφ (β̇² + (cosβ α̇)²) + g cosα cosβ )
        u(2) + m_l.clone()
            * r.clone()
            * (r.clone() * phi.clone()
                * (Expr::powi(wb.clone(), 2) + Expr::powi(cb.clone() * wa.clone(), 2))
                + g.clone() * ca.clone() * cb.clone()),
        // −rφ cosβ ( 2 r α̇ (cosβ φ̇ − φ sinβ β̇) + g sinα )
        -(r.clone() * phi.clone() * cb.clone()
            * (c(2.0) * r.clone() * wa.clone()
                * (cb.clone() * wphi.clone() - phi.clone() * sb.clone() * wb.clone())
                + g.clone() * sa.clone())),
        // −rφ ( 2 r β̇ φ̇ + rφ sinβ cosβ α̇² + cosα sinβ g )
        -(r.clone() * phi.clone()
            * (c(2.0) * r.clone() * wb.clone() * wphi.clone()
                + r.clone() * phi.clone() * sb.clone() * cb.clone() * Expr::powi(wa.clone(), 2)
                + ca.clone() * sb.clone() * g.clone())),
    ];
    let mass = Arc::new(LinSystem { mat, rhs });

    let dynamics = DynamicsTable::new(vec![
        x(V_XT),
        x(V_YT),
        x(W_PHI),
        x(W_ALPHA),
        x(W_BETA),
        Expr::lin_solve(mass.clone(), 0),
        Expr::lin_solve(mass.clone(), 1),
        Expr::lin_solve(mass.clone(), 2),
        Expr::lin_solve(mass.clone(), 3),
        Expr::lin_solve(mass.clone(), 4),
    ]);

    // load position: the flat output
    let outputs = vec![
        x(X_T) + r.clone() * phi.clone() * sb.clone(),
        x(Y_T) + r.clone() * phi.clone() * sa.clone() * cb.clone(),
        r.clone() * phi.clone() * ca.clone() * cb.clone(),
    ];

    let sample_space = SampleSpace::standard()
        .with_range(JetVar::state(PHI), 1.0, 10.0)
        .with_range(JetVar::state(ALPHA), -1.0, 1.0)
        .with_range(JetVar::state(BETA), -1.0, 1.0);

    let mut default_state = vec![0.0; 10];
    default_state[PHI] = 5.0;

    let def = FlatSystemDef {
        name: "crane".to_string(),
        registry,
        params: vec![
            ("m_L".to_string(), p.m_l),
            ("m_T".to_string(), p.m_t),
            ("m_B".to_string(), p.m_b),
            ("J".to_string(), p.j),
            ("r".to_string(), p.r),
            ("g".to_string(), p.g),
        ],
        dynamics,
        outputs,
        declared_r: Some(MultiIndex(vec![4, 4, 4])),
        hints: vec![vec![2]],
        sample_space,
        default_state,
        mass_system: Some(mass),
    };
    def.validate()?;
    Ok(def)
}

/// Checks that an expression contains no implicit solve nodes (and therefore
/// has a closed symbolic form).
pub fn is_explicit(e: &Expr) -> bool {
    fn walk(e: &Expr, seen: &mut std::collections::HashSet<usize>) -> bool {
        if !seen.insert(e.ptr_key()) {
            return true;
        }
        match e.kind() {
            NodeKind::LinSolve(..) | NodeKind::Newton(..) => false,
            NodeKind::Const(_) | NodeKind::Var(_) => true,
            NodeKind::Unary(_, a) | NodeKind::Pow(a, _) => walk(a, seen),
            NodeKind::Bin(_, a, b) => walk(a, seen) && walk(b, seen),
        }
    }
    walk(e, &mut std::collections::HashSet::new())
}
