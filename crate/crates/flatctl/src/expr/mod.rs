//! Immutable symbolic scalar expressions over jet variables.
//!
//! Trees are reference-counted and shared aggressively: differentiation,
//! substitution and simplification are memoized per call so that the cost is
//! proportional to the number of *distinct* nodes, not the unfolded tree size.
//! Besides the usual arithmetic nodes there are two implicit nodes:
//!
//! * [`NodeKind::LinSolve`] — component of the solution of a symbolic linear
//!   system `M·a = r` (used for mass-matrix dynamics), differentiated by the
//!   implicit rule `∂a = M⁻¹(∂r − ∂M·a)`;
//! * [`NodeKind::Newton`] — component of the solution of a nonlinear residual
//!   system, evaluated by damped Newton iteration and differentiated by the
//!   implicit function theorem.

mod compile;
mod parse;
mod print;
mod simplify;

pub use compile::{Tape, TapeBuilder, TapeExec};
pub use parse::{parse, parse_with_params};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::Arc;

use crate::jets::{JetVar, VarMap};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Tan,
    Sqrt,
    Exp,
    Log,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tan => x.tan(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Linear system `M·a = r` with symbolic entries; expressions refer to single
/// components of `a`.
#[derive(Debug)]
pub struct LinSystem {
    pub mat: Vec<Vec<Expr>>,
    pub rhs: Vec<Expr>,
}

impl LinSystem {
    pub fn dim(&self) -> usize {
        self.rhs.len()
    }
}

/// Nonlinear residual system `res(unknowns; env) = 0`; expressions refer to
/// single components of the solution.
#[derive(Debug)]
pub struct NewtonSystem {
    pub residuals: Vec<Expr>,
    pub unknowns: Vec<JetVar>,
}

#[derive(Debug)]
pub enum NodeKind {
    Const(f64),
    Var(JetVar),
    Unary(UnaryOp, Expr),
    Bin(BinOp, Expr, Expr),
    /// Integer power; the restriction keeps differentiation closed-form.
    Pow(Expr, i32),
    LinSolve(Arc<LinSystem>, usize),
    Newton(Arc<NewtonSystem>, usize),
}

#[derive(Debug)]
pub struct Node {
    hash: u64,
    simplified: AtomicBool,
    pub kind: NodeKind,
}

/// Immutable symbolic scalar expression.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

#[derive(Debug, thiserror::Error)]
pub enum ExprError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { name: String, offset: usize },
    #[error("exponent at byte {offset} is not an integer constant")]
    NonIntegerExponent { offset: usize },
    #[error("unbound variable `{0}` during evaluation")]
    Unbound(String),
    #[error("domain error: {op} of {value} in `{context}`")]
    Domain {
        op: &'static str,
        value: f64,
        context: String,
    },
    #[error("singular matrix in linear-solve node: {context}")]
    SingularMatrix { context: String },
    #[error("Newton iteration failed to converge (residual {residual:.3e})")]
    NewtonDivergence { residual: f64 },
    #[error("cyclic substitution: binding for `{0}` reintroduces a bound variable")]
    Cycle(String),
}

fn mix(seed: u64, v: u64) -> u64 {
    // FNV-ish combine; only used for fast inequality checks.
    (seed ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(17)
}

impl Expr {
    fn new(kind: NodeKind) -> Expr {
        let hash = match &kind {
            NodeKind::Const(c) => mix(1, c.to_bits()),
            NodeKind::Var(v) => mix(2, var_key(*v)),
            NodeKind::Unary(op, a) => mix(mix(3, *op as u64), a.0.hash),
            NodeKind::Bin(op, a, b) => mix(mix(mix(4, *op as u64), a.0.hash), b.0.hash),
            NodeKind::Pow(a, k) => mix(mix(5, a.0.hash), *k as u64),
            NodeKind::LinSolve(sys, c) => {
                let mut h = mix(6, *c as u64);
                for row in &sys.mat {
                    for e in row {
                        h = mix(h, e.0.hash);
                    }
                }
                for e in &sys.rhs {
                    h = mix(h, e.0.hash);
                }
                h
            }
            NodeKind::Newton(sys, c) => {
                let mut h = mix(7, *c as u64);
                for e in &sys.residuals {
                    h = mix(h, e.0.hash);
                }
                for u in &sys.unknowns {
                    h = mix(h, var_key(*u));
                }
                h
            }
        };
        Expr(Arc::new(Node {
            hash,
            simplified: AtomicBool::new(false),
            kind,
        }))
    }

    pub fn kind(&self) -> &NodeKind {
        &self.0.kind
    }

    pub(crate) fn ptr_key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    pub(crate) fn mark_simplified(&self) {
        self.0.simplified.store(true, AtomicOrdering::Relaxed);
    }

    pub(crate) fn is_marked_simplified(&self) -> bool {
        self.0.simplified.load(AtomicOrdering::Relaxed)
    }

    // ---- constructors -------------------------------------------------

    pub fn constant(c: f64) -> Expr {
        Expr::new(NodeKind::Const(c))
    }

    pub fn var(v: JetVar) -> Expr {
        Expr::new(NodeKind::Var(v))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.kind() {
            NodeKind::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind(), NodeKind::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self.kind(), NodeKind::Const(c) if *c == 1.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x + y);
        }
        Expr::new(NodeKind::Bin(BinOp::Add, a, b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if b.is_zero() {
            return a;
        }
        if Arc::ptr_eq(&a.0, &b.0) {
            return Expr::constant(0.0);
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x - y);
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        Expr::new(NodeKind::Bin(BinOp::Sub, a, b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if a.is_zero() || b.is_one() {
            return a;
        }
        if b.is_zero() || a.is_one() {
            return b;
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x * y);
        }
        Expr::new(NodeKind::Bin(BinOp::Mul, a, b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if b.is_one() || a.is_zero() {
            return a;
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 {
                return Expr::constant(x / y);
            }
        }
        Expr::new(NodeKind::Bin(BinOp::Div, a, b))
    }

    pub fn neg(a: Expr) -> Expr {
        match a.kind() {
            NodeKind::Const(c) => Expr::constant(-c),
            NodeKind::Unary(UnaryOp::Neg, inner) => inner.clone(),
            NodeKind::Bin(BinOp::Sub, x, y) => Expr::sub(y.clone(), x.clone()),
            _ => Expr::new(NodeKind::Unary(UnaryOp::Neg, a)),
        }
    }

    pub fn powi(a: Expr, k: i32) -> Expr {
        match k {
            0 => Expr::constant(1.0),
            1 => a,
            _ => match a.kind() {
                NodeKind::Const(c) => Expr::constant(c.powi(k)),
                NodeKind::Pow(inner, j) => Expr::powi(inner.clone(), j * k),
                _ => Expr::new(NodeKind::Pow(a, k)),
            },
        }
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        if op == UnaryOp::Neg {
            return Expr::neg(a);
        }
        if let Some(c) = a.as_const() {
            let v = op.apply(c);
            if v.is_finite() {
                return Expr::constant(v);
            }
        }
        Expr::new(NodeKind::Unary(op, a))
    }

    pub fn sin(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Sin, a)
    }
    pub fn cos(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Cos, a)
    }
    pub fn sqrt(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Sqrt, a)
    }

    pub fn lin_solve(sys: Arc<LinSystem>, comp: usize) -> Expr {
        Expr::new(NodeKind::LinSolve(sys, comp))
    }

    pub fn newton_solve(sys: Arc<NewtonSystem>, comp: usize) -> Expr {
        Expr::new(NodeKind::Newton(sys, comp))
    }

    /// Sum of a list of expressions.
    pub fn sum(terms: impl IntoIterator<Item = Expr>) -> Expr {
        terms
            .into_iter()
            .fold(Expr::constant(0.0), Expr::add)
    }

    // ---- queries ------------------------------------------------------

    /// Free variables, sorted. Newton unknowns are bound and excluded.
    pub fn free_vars(&self) -> Vec<JetVar> {
        let mut seen = HashMap::new();
        let mut out = BTreeSet::new();
        free_vars_rec(self, &mut seen, &mut out);
        out.into_iter().collect()
    }

    pub fn contains_var(&self, v: JetVar) -> bool {
        self.free_vars().contains(&v)
    }

    /// Number of distinct nodes reachable from this expression.
    pub fn node_count(&self) -> usize {
        let mut seen = BTreeSet::new();
        count_rec(self, &mut seen);
        seen.len()
    }

    /// Rendering with default names (`x1`, `u1`, `v1_1`, `y1d` + `@k`).
    pub fn to_string_default(&self) -> String {
        print::print(self, &default_name)
    }

    pub fn to_string_named(&self, namer: &dyn Fn(JetVar) -> String) -> String {
        print::print(self, namer)
    }

    // ---- calculus -----------------------------------------------------

    /// Exact partial derivative with respect to `w`.
    pub fn differentiate(&self, w: JetVar) -> Expr {
        let mut ctx = DiffCtx {
            var: w,
            memo: HashMap::new(),
            lin_memo: HashMap::new(),
            newton_memo: HashMap::new(),
        };
        diff_rec(self, &mut ctx)
    }

    /// Simultaneous substitution. Bindings must not reintroduce a substituted
    /// variable (identity bindings are fine).
    pub fn substitute(&self, bindings: &VarMap<Expr>) -> Result<Expr, ExprError> {
        let active: BTreeSet<JetVar> = bindings
            .iter()
            .filter(|(k, v)| !matches!(v.kind(), NodeKind::Var(w) if w == *k))
            .map(|(k, _)| *k)
            .collect();
        for (k, v) in bindings {
            for fv in v.free_vars() {
                if active.contains(&fv) {
                    return Err(ExprError::Cycle(default_name(*k)));
                }
            }
        }
        let mut memo = HashMap::new();
        Ok(subst_rec(self, bindings, &mut memo))
    }

    /// Substitution without the cycle check, for internal passes where the
    /// bindings are known to be a fresh-variable map.
    pub(crate) fn substitute_unchecked(&self, bindings: &VarMap<Expr>) -> Expr {
        let mut memo = HashMap::new();
        subst_rec(self, bindings, &mut memo)
    }

    /// Constant folding, 0/1 identities and collection of like terms in
    /// sums. Numeric value is preserved.
    pub fn simplify(&self) -> Expr {
        simplify::simplify(self)
    }

    /// IEEE-double evaluation at a point.
    pub fn evaluate(&self, p: &Valuation) -> Result<f64, ExprError> {
        let mut ctx = EvalCtx {
            val: p,
            memo: HashMap::new(),
            lin_memo: HashMap::new(),
            newton_memo: HashMap::new(),
            warm: None,
        };
        eval_rec(self, &mut ctx)
    }

    /// Evaluation with a persistent Newton warm-start cache (used across the
    /// steps of a simulation).
    pub fn evaluate_warm(&self, p: &Valuation, warm: &mut WarmStarts) -> Result<f64, ExprError> {
        let mut ctx = EvalCtx {
            val: p,
            memo: HashMap::new(),
            lin_memo: HashMap::new(),
            newton_memo: HashMap::new(),
            warm: Some(warm),
        };
        eval_rec(self, &mut ctx)
    }
}

// Operator overloads for readable programmatic construction (builtin systems).
impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::div(self, rhs)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

fn var_key(v: JetVar) -> u64 {
    let fam = match v.family {
        crate::jets::Family::State => 0u64,
        crate::jets::Family::Input => 1,
        crate::jets::Family::NewInput { stage } => 2 + stage as u64,
        crate::jets::Family::Reference => 1u64 << 32,
    };
    (fam << 40) | ((v.index as u64) << 20) | v.order as u64
}

/// Default variable names used in diagnostics and tests.
pub fn default_name(v: JetVar) -> String {
    use crate::jets::Family;
    let base = match v.family {
        Family::State => format!("x{}", v.index + 1),
        Family::Input => format!("u{}", v.index + 1),
        Family::NewInput { stage } => format!("v{}_{}", stage, v.index + 1),
        Family::Reference => format!("y{}d", v.index + 1),
    };
    if v.order == 0 {
        base
    } else {
        format!("{}@{}", base, v.order)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.0, &other.0) {
            return true;
        }
        if self.0.hash != other.0.hash {
            return false;
        }
        match (&self.0.kind, &other.0.kind) {
            (NodeKind::Const(a), NodeKind::Const(b)) => a.to_bits() == b.to_bits(),
            (NodeKind::Var(a), NodeKind::Var(b)) => a == b,
            (NodeKind::Unary(o1, a), NodeKind::Unary(o2, b)) => o1 == o2 && a == b,
            (NodeKind::Bin(o1, a1, b1), NodeKind::Bin(o2, a2, b2)) => {
                o1 == o2 && a1 == a2 && b1 == b2
            }
            (NodeKind::Pow(a, j), NodeKind::Pow(b, k)) => j == k && a == b,
            (NodeKind::LinSolve(s1, c1), NodeKind::LinSolve(s2, c2)) => {
                c1 == c2
                    && (Arc::ptr_eq(s1, s2)
                        || (s1.mat == s2.mat && s1.rhs == s2.rhs))
            }
            (NodeKind::Newton(s1, c1), NodeKind::Newton(s2, c2)) => {
                c1 == c2
                    && (Arc::ptr_eq(s1, s2)
                        || (s1.residuals == s2.residuals && s1.unknowns == s2.unknowns))
            }
            _ => false,
        }
    }
}

impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.0.hash);
    }
}

/// Total order used to canonicalize factor lists; ties on the fast hash are
/// broken by a structural comparison.
impl PartialOrd for Expr {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Expr {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        if Arc::ptr_eq(&self.0, &other.0) {
            return std::cmp::Ordering::Equal;
        }
        self.0
            .hash
            .cmp(&other.0.hash)
            .then_with(|| structural_cmp(self, other))
    }
}

pub(crate) fn structural_cmp(a: &Expr, b: &Expr) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    fn rank(k: &NodeKind) -> u8 {
        match k {
            NodeKind::Const(_) => 0,
            NodeKind::Var(_) => 1,
            NodeKind::Unary(..) => 2,
            NodeKind::Bin(..) => 3,
            NodeKind::Pow(..) => 4,
            NodeKind::LinSolve(..) => 5,
            NodeKind::Newton(..) => 6,
        }
    }
    if Arc::ptr_eq(&a.0, &b.0) {
        return Ordering::Equal;
    }
    match (&a.0.kind, &b.0.kind) {
        (NodeKind::Const(x), NodeKind::Const(y)) => x.total_cmp(y),
        (NodeKind::Var(x), NodeKind::Var(y)) => x.cmp(y),
        (NodeKind::Unary(o1, x), NodeKind::Unary(o2, y)) => (*o1 as u8)
            .cmp(&(*o2 as u8))
            .then_with(|| structural_cmp(x, y)),
        (NodeKind::Bin(o1, x1, y1), NodeKind::Bin(o2, x2, y2)) => (*o1 as u8)
            .cmp(&(*o2 as u8))
            .then_with(|| structural_cmp(x1, x2))
            .then_with(|| structural_cmp(y1, y2)),
        (NodeKind::Pow(x, j), NodeKind::Pow(y, k)) => {
            j.cmp(k).then_with(|| structural_cmp(x, y))
        }
        (NodeKind::LinSolve(s1, c1), NodeKind::LinSolve(s2, c2)) => {
            let mut ord = c1
                .cmp(c2)
                .then_with(|| s1.dim().cmp(&s2.dim()));
            if ord == Ordering::Equal && !Arc::ptr_eq(s1, s2) {
                'outer: for (r1, r2) in s1.mat.iter().zip(&s2.mat) {
                    for (e1, e2) in r1.iter().zip(r2) {
                        ord = structural_cmp(e1, e2);
                        if ord != Ordering::Equal {
                            break 'outer;
                        }
                    }
                }
                if ord == Ordering::Equal {
                    for (e1, e2) in s1.rhs.iter().zip(&s2.rhs) {
                        ord = structural_cmp(e1, e2);
                        if ord != Ordering::Equal {
                            break;
                        }
                    }
                }
            }
            ord
        }
        (NodeKind::Newton(s1, c1), NodeKind::Newton(s2, c2)) => {
            let mut ord = c1
                .cmp(c2)
                .then_with(|| s1.unknowns.len().cmp(&s2.unknowns.len()))
                .then_with(|| s1.unknowns.cmp(&s2.unknowns));
            if ord == Ordering::Equal && !Arc::ptr_eq(s1, s2) {
                for (e1, e2) in s1.residuals.iter().zip(&s2.residuals) {
                    ord = structural_cmp(e1, e2);
                    if ord != Ordering::Equal {
                        break;
                    }
                }
            }
            ord
        }
        (x, y) => rank(x).cmp(&rank(y)),
    }
}

// ---- free variables ---------------------------------------------------

fn free_vars_rec(e: &Expr, seen: &mut HashMap<usize, ()>, out: &mut BTreeSet<JetVar>) {
    if seen.insert(e.ptr_key(), ()).is_some() {
        return;
    }
    match e.kind() {
        NodeKind::Const(_) => {}
        NodeKind::Var(v) => {
            out.insert(*v);
        }
        NodeKind::Unary(_, a) => free_vars_rec(a, seen, out),
        NodeKind::Bin(_, a, b) => {
            free_vars_rec(a, seen, out);
            free_vars_rec(b, seen, out);
        }
        NodeKind::Pow(a, _) => free_vars_rec(a, seen, out),
        NodeKind::LinSolve(sys, _) => {
            for row in &sys.mat {
                for x in row {
                    free_vars_rec(x, seen, out);
                }
            }
            for x in &sys.rhs {
                free_vars_rec(x, seen, out);
            }
        }
        NodeKind::Newton(sys, _) => {
            let mut inner = BTreeSet::new();
            let mut inner_seen = HashMap::new();
            for r in &sys.residuals {
                free_vars_rec(r, &mut inner_seen, &mut inner);
            }
            for u in &sys.unknowns {
                inner.remove(u);
            }
            out.extend(inner);
        }
    }
}

fn count_rec(e: &Expr, seen: &mut BTreeSet<usize>) {
    if !seen.insert(e.ptr_key()) {
        return;
    }
    match e.kind() {
        NodeKind::Const(_) | NodeKind::Var(_) => {}
        NodeKind::Unary(_, a) | NodeKind::Pow(a, _) => count_rec(a, seen),
        NodeKind::Bin(_, a, b) => {
            count_rec(a, seen);
            count_rec(b, seen);
        }
        NodeKind::LinSolve(sys, _) => {
            for row in &sys.mat {
                for x in row {
                    count_rec(x, seen);
                }
            }
            for x in &sys.rhs {
                count_rec(x, seen);
            }
        }
        NodeKind::Newton(sys, _) => {
            for r in &sys.residuals {
                count_rec(r, seen);
            }
        }
    }
}

// ---- differentiation --------------------------------------------------

struct DiffCtx {
    var: JetVar,
    memo: HashMap<usize, Expr>,
    /// Derived linear systems per original system (shared by components).
    lin_memo: HashMap<usize, Arc<LinSystem>>,
    newton_memo: HashMap<usize, Arc<LinSystem>>,
}

fn diff_rec(e: &Expr, ctx: &mut DiffCtx) -> Expr {
    if let Some(d) = ctx.memo.get(&e.ptr_key()) {
        return d.clone();
    }
    let d = match e.kind() {
        NodeKind::Const(_) => Expr::constant(0.0),
        NodeKind::Var(v) => {
            if *v == ctx.var {
                Expr::constant(1.0)
            } else {
                Expr::constant(0.0)
            }
        }
        NodeKind::Unary(op, a) => {
            let da = diff_rec(a, ctx);
            if da.is_zero() {
                Expr::constant(0.0)
            } else {
                match op {
                    UnaryOp::Neg => Expr::neg(da),
                    UnaryOp::Sin => Expr::mul(Expr::cos(a.clone()), da),
                    UnaryOp::Cos => Expr::neg(Expr::mul(Expr::sin(a.clone()), da)),
                    UnaryOp::Tan => Expr::div(da, Expr::powi(Expr::cos(a.clone()), 2)),
                    UnaryOp::Sqrt => Expr::div(
                        da,
                        Expr::mul(Expr::constant(2.0), Expr::sqrt(a.clone())),
                    ),
                    UnaryOp::Exp => Expr::mul(e.clone(), da),
                    UnaryOp::Log => Expr::div(da, a.clone()),
                }
            }
        }
        NodeKind::Bin(op, a, b) => {
            let da = diff_rec(a, ctx);
            let db = diff_rec(b, ctx);
            match op {
                BinOp::Add => Expr::add(da, db),
                BinOp::Sub => Expr::sub(da, db),
                BinOp::Mul => Expr::add(
                    Expr::mul(da, b.clone()),
                    Expr::mul(a.clone(), db),
                ),
                BinOp::Div => {
                    if db.is_zero() {
                        Expr::div(da, b.clone())
                    } else {
                        Expr::div(
                            Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a.clone(), db)),
                            Expr::powi(b.clone(), 2),
                        )
                    }
                }
            }
        }
        NodeKind::Pow(a, k) => {
            let da = diff_rec(a, ctx);
            if da.is_zero() {
                Expr::constant(0.0)
            } else {
                Expr::mul(
                    Expr::constant(*k as f64),
                    Expr::mul(Expr::powi(a.clone(), k - 1), da),
                )
            }
        }
        NodeKind::LinSolve(sys, comp) => {
            let key = Arc::as_ptr(sys) as usize;
            let derived = if let Some(d) = ctx.lin_memo.get(&key) {
                d.clone()
            } else {
                let k = sys.dim();
                let sols: Vec<Expr> =
                    (0..k).map(|j| Expr::lin_solve(sys.clone(), j)).collect();
                let mut rhs = Vec::with_capacity(k);
                let mut any = false;
                for i in 0..k {
                    let mut r = diff_rec(&sys.rhs[i], ctx);
                    for j in 0..k {
                        let dm = diff_rec(&sys.mat[i][j], ctx);
                        if !dm.is_zero() {
                            r = Expr::sub(r, Expr::mul(dm, sols[j].clone()));
                        }
                    }
                    if !r.is_zero() {
                        any = true;
                    }
                    rhs.push(r);
                }
                let derived = if any {
                    Arc::new(LinSystem {
                        mat: sys.mat.clone(),
                        rhs,
                    })
                } else {
                    // derivative is identically zero
                    Arc::new(LinSystem {
                        mat: sys.mat.clone(),
                        rhs: vec![Expr::constant(0.0); k],
                    })
                };
                ctx.lin_memo.insert(key, derived.clone());
                derived
            };
            if derived.rhs.iter().all(|r| r.is_zero()) {
                Expr::constant(0.0)
            } else {
                Expr::lin_solve(derived, *comp)
            }
        }
        NodeKind::Newton(sys, comp) => {
            if sys.unknowns.contains(&ctx.var) {
                Expr::constant(0.0)
            } else {
                let key = Arc::as_ptr(sys) as usize;
                let derived = if let Some(d) = ctx.newton_memo.get(&key) {
                    d.clone()
                } else {
                    let k = sys.unknowns.len();
                    let sol_bindings: VarMap<Expr> = sys
                        .unknowns
                        .iter()
                        .enumerate()
                        .map(|(j, u)| (*u, Expr::newton_solve(sys.clone(), j)))
                        .collect();
                    let mut mat = Vec::with_capacity(k);
                    let mut rhs = Vec::with_capacity(k);
                    for i in 0..k {
                        let mut row = Vec::with_capacity(k);
                        for u in &sys.unknowns {
                            let d = sys.residuals[i].differentiate(*u);
                            row.push(d.substitute_unchecked(&sol_bindings));
                        }
                        mat.push(row);
                        let dr = diff_rec(&sys.residuals[i], ctx);
                        rhs.push(Expr::neg(dr.substitute_unchecked(&sol_bindings)));
                    }
                    let derived = Arc::new(LinSystem { mat, rhs });
                    ctx.newton_memo.insert(key, derived.clone());
                    derived
                };
                if derived.rhs.iter().all(|r| r.is_zero()) {
                    Expr::constant(0.0)
                } else {
                    Expr::lin_solve(derived, *comp)
                }
            }
        }
    };
    ctx.memo.insert(e.ptr_key(), d.clone());
    d
}

// ---- substitution -----------------------------------------------------

fn subst_rec(e: &Expr, bindings: &VarMap<Expr>, memo: &mut HashMap<usize, Expr>) -> Expr {
    if let Some(r) = memo.get(&e.ptr_key()) {
        return r.clone();
    }
    let r = match e.kind() {
        NodeKind::Const(_) => e.clone(),
        NodeKind::Var(v) => bindings.get(v).cloned().unwrap_or_else(|| e.clone()),
        NodeKind::Unary(op, a) => {
            let na = subst_rec(a, bindings, memo);
            if Arc::ptr_eq(&na.0, &a.0) {
                e.clone()
            } else {
                Expr::unary(*op, na)
            }
        }
        NodeKind::Bin(op, a, b) => {
            let na = subst_rec(a, bindings, memo);
            let nb = subst_rec(b, bindings, memo);
            if Arc::ptr_eq(&na.0, &a.0) && Arc::ptr_eq(&nb.0, &b.0) {
                e.clone()
            } else {
                match op {
                    BinOp::Add => Expr::add(na, nb),
                    BinOp::Sub => Expr::sub(na, nb),
                    BinOp::Mul => Expr::mul(na, nb),
                    BinOp::Div => Expr::div(na, nb),
                }
            }
        }
        NodeKind::Pow(a, k) => {
            let na = subst_rec(a, bindings, memo);
            if Arc::ptr_eq(&na.0, &a.0) {
                e.clone()
            } else {
                Expr::powi(na, *k)
            }
        }
        NodeKind::LinSolve(sys, comp) => {
            let mut changed = false;
            let mat: Vec<Vec<Expr>> = sys
                .mat
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|x| {
                            let nx = subst_rec(x, bindings, memo);
                            if !Arc::ptr_eq(&nx.0, &x.0) {
                                changed = true;
                            }
                            nx
                        })
                        .collect()
                })
                .collect();
            let rhs: Vec<Expr> = sys
                .rhs
                .iter()
                .map(|x| {
                    let nx = subst_rec(x, bindings, memo);
                    if !Arc::ptr_eq(&nx.0, &x.0) {
                        changed = true;
                    }
                    nx
                })
                .collect();
            if changed {
                Expr::lin_solve(Arc::new(LinSystem { mat, rhs }), *comp)
            } else {
                e.clone()
            }
        }
        NodeKind::Newton(sys, comp) => {
            debug_assert!(
                sys.unknowns.iter().all(|u| !bindings.contains_key(u)),
                "substitution must not touch Newton unknowns"
            );
            let mut changed = false;
            let residuals: Vec<Expr> = sys
                .residuals
                .iter()
                .map(|x| {
                    let nx = subst_rec(x, bindings, memo);
                    if !Arc::ptr_eq(&nx.0, &x.0) {
                        changed = true;
                    }
                    nx
                })
                .collect();
            if changed {
                Expr::newton_solve(
                    Arc::new(NewtonSystem {
                        residuals,
                        unknowns: sys.unknowns.clone(),
                    }),
                    *comp,
                )
            } else {
                e.clone()
            }
        }
    };
    memo.insert(e.ptr_key(), r.clone());
    r
}

// ---- evaluation -------------------------------------------------------

/// Numeric point: assignment of values to jet variables.
#[derive(Clone, Debug, Default)]
pub struct Valuation(pub BTreeMap<JetVar, f64>);

impl Valuation {
    pub fn new() -> Self {
        Valuation(BTreeMap::new())
    }

    pub fn set(&mut self, v: JetVar, x: f64) {
        self.0.insert(v, x);
    }

    pub fn get(&self, v: JetVar) -> Option<f64> {
        self.0.get(&v).copied()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (JetVar, f64)>) -> Self {
        Valuation(pairs.into_iter().collect())
    }
}

/// Newton warm-start cache keyed by residual-system identity.
pub type WarmStarts = HashMap<usize, Vec<f64>>;

struct EvalCtx<'a> {
    val: &'a Valuation,
    memo: HashMap<usize, f64>,
    lin_memo: HashMap<usize, Vec<f64>>,
    newton_memo: HashMap<usize, Vec<f64>>,
    warm: Option<&'a mut WarmStarts>,
}

/// Relative pivot threshold below which a mass matrix counts as singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-12;

pub(crate) fn solve_dense(
    mat: &[f64],
    rhs: &[f64],
    k: usize,
    context: &str,
) -> Result<Vec<f64>, ExprError> {
    let m = nalgebra::DMatrix::from_row_slice(k, k, mat);
    let max_abs = m.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
    let lu = m.lu();
    // partial-pivot elimination; reject near-singular systems
    let min_piv = (0..k)
        .map(|i| lu.u()[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if !min_piv.is_finite() || min_piv < SINGULAR_PIVOT_RTOL * max_abs {
        return Err(ExprError::SingularMatrix {
            context: context.to_string(),
        });
    }
    let b = nalgebra::DVector::from_row_slice(rhs);
    let sol = lu
        .solve(&b)
        .ok_or_else(|| ExprError::SingularMatrix {
            context: context.to_string(),
        })?;
    Ok(sol.iter().copied().collect())
}

fn eval_rec(e: &Expr, ctx: &mut EvalCtx) -> Result<f64, ExprError> {
    if let Some(v) = ctx.memo.get(&e.ptr_key()) {
        return Ok(*v);
    }
    let v = match e.kind() {
        NodeKind::Const(c) => *c,
        NodeKind::Var(v) => ctx
            .val
            .get(*v)
            .ok_or_else(|| ExprError::Unbound(default_name(*v)))?,
        NodeKind::Unary(op, a) => {
            let x = eval_rec(a, ctx)?;
            match op {
                UnaryOp::Log if x <= 0.0 => {
                    return Err(ExprError::Domain {
                        op: "log",
                        value: x,
                        context: a.to_string_default(),
                    })
                }
                UnaryOp::Sqrt if x < 0.0 => {
                    return Err(ExprError::Domain {
                        op: "sqrt",
                        value: x,
                        context: a.to_string_default(),
                    })
                }
                _ => {}
            }
            op.apply(x)
        }
        NodeKind::Bin(op, a, b) => {
            let x = eval_rec(a, ctx)?;
            let y = eval_rec(b, ctx)?;
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err(ExprError::Domain {
                            op: "division by zero",
                            value: y,
                            context: b.to_string_default(),
                        });
                    }
                    x / y
                }
            }
        }
        NodeKind::Pow(a, k) => eval_rec(a, ctx)?.powi(*k),
        NodeKind::LinSolve(sys, comp) => {
            let key = Arc::as_ptr(sys) as usize;
            if let Some(sol) = ctx.lin_memo.get(&key) {
                sol[*comp]
            } else {
                let k = sys.dim();
                let mut mat = Vec::with_capacity(k * k);
                for row in &sys.mat {
                    for x in row {
                        mat.push(eval_rec(x, ctx)?);
                    }
                }
                let mut rhs = Vec::with_capacity(k);
                for x in &sys.rhs {
                    rhs.push(eval_rec(x, ctx)?);
                }
                let sol = solve_dense(&mat, &rhs, k, "linear-solve node")?;
                let out = sol[*comp];
                ctx.lin_memo.insert(key, sol);
                out
            }
        }
        NodeKind::Newton(sys, comp) => {
            let key = Arc::as_ptr(sys) as usize;
            if let Some(sol) = ctx.newton_memo.get(&key) {
                sol[*comp]
            } else {
                let start = ctx
                    .warm
                    .as_ref()
                    .and_then(|w| w.get(&key).cloned())
                    .unwrap_or_else(|| vec![0.0; sys.unknowns.len()]);
                let sol = newton_solve_numeric(sys, ctx.val, &start)?;
                if let Some(w) = ctx.warm.as_deref_mut() {
                    w.insert(key, sol.clone());
                }
                let out = sol[*comp];
                ctx.newton_memo.insert(key, sol);
                out
            }
        }
    };
    ctx.memo.insert(e.ptr_key(), v);
    Ok(v)
}

pub(crate) const NEWTON_TOL: f64 = 1e-12;
pub(crate) const NEWTON_MAX_ITERS: usize = 50;

pub(crate) fn newton_solve_numeric(
    sys: &NewtonSystem,
    env: &Valuation,
    start: &[f64],
) -> Result<Vec<f64>, ExprError> {
    let k = sys.unknowns.len();
    let mut u = start.to_vec();
    let residual = |u: &[f64]| -> Result<Vec<f64>, ExprError> {
        let mut p = env.clone();
        for (j, var) in sys.unknowns.iter().enumerate() {
            p.set(*var, u[j]);
        }
        sys.residuals.iter().map(|r| r.evaluate(&p)).collect()
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut r = residual(&u)?;
    for _ in 0..NEWTON_MAX_ITERS {
        if norm(&r) <= NEWTON_TOL {
            return Ok(u);
        }
        // finite-difference Jacobian
        let mut jac = vec![0.0; k * k];
        for j in 0..k {
            let h = 1e-7 * (1.0 + u[j].abs());
            let mut up = u.clone();
            up[j] += h;
            let rp = residual(&up)?;
            for i in 0..k {
                jac[i * k + j] = (rp[i] - r[i]) / h;
            }
        }
        let neg_r: Vec<f64> = r.iter().map(|x| -x).collect();
        let step = solve_dense(&jac, &neg_r, k, "Newton Jacobian")?;
        // damped update: halve until the residual decreases
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = u
                .iter()
                .zip(&step)
                .map(|(x, s)| x + lambda * s)
                .collect();
            match residual(&trial) {
                Ok(rt) if norm(&rt) < norm(&r) || lambda < 1e-8 => {
                    u = trial;
                    r = rt;
                    break;
                }
                _ => lambda *= 0.5,
            }
            if lambda < 1e-12 {
                return Err(ExprError::NewtonDivergence { residual: norm(&r) });
            }
        }
    }
    if norm(&r) <= NEWTON_TOL {
        Ok(u)
    } else {
        Err(ExprError::NewtonDivergence { residual: norm(&r) })
    }
}

// ---- affine decomposition ---------------------------------------------

/// Result of splitting `rows` into `A·unknowns + b`.
#[derive(Debug)]
pub enum AffineDecomposition {
    Affine { a: Vec<Vec<Expr>>, b: Vec<Expr> },
    NotAffine,
}

/// Splits each row as `A·unknowns + b` when the dependence on the unknowns is
/// affine; verified numerically at the supplied points.
pub fn affine_decompose(
    rows: &[Expr],
    unknowns: &[JetVar],
    points: &[Valuation],
) -> Result<AffineDecomposition, ExprError> {
    let zero_bindings: VarMap<Expr> = unknowns
        .iter()
        .map(|u| (*u, Expr::constant(0.0)))
        .collect();
    let mut a = Vec::with_capacity(rows.len());
    let mut b = Vec::with_capacity(rows.len());
    for row in rows {
        let coeffs: Vec<Expr> = unknowns
            .iter()
            .map(|u| row.differentiate(*u).simplify())
            .collect();
        a.push(coeffs);
        b.push(row.substitute_unchecked(&zero_bindings).simplify());
    }
    // numeric verification: the reconstruction must match the row
    let mut checked = 0usize;
    for p in points {
        let mut ok = true;
        for (i, row) in rows.iter().enumerate() {
            let lhs = match row.evaluate(p) {
                Ok(v) => v,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let mut rhs = match b[i].evaluate(p) {
                Ok(v) => v,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            for (j, u) in unknowns.iter().enumerate() {
                let uj = p.get(*u).unwrap_or(0.0);
                let aij = match a[i][j].evaluate(p) {
                    Ok(v) => v,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                };
                rhs += aij * uj;
            }
            if !ok {
                break;
            }
            if (lhs - rhs).abs() > 1e-10 * (1.0 + lhs.abs()) {
                return Ok(AffineDecomposition::NotAffine);
            }
        }
        if ok {
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(ExprError::Domain {
            op: "affine verification",
            value: f64::NAN,
            context: "all sample points hit evaluation domain errors".to_string(),
        });
    }
    Ok(AffineDecomposition::Affine { a, b })
}
