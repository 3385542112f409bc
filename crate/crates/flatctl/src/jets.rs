//! Variable bookkeeping for the extended state-input manifold, multi-index
//! algebra, and the total-time-derivative (Lie derivative) operator along the
//! prolonged system vector field.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;

use crate::expr::{Expr, ExprError};

/// Which signal a [`JetVar`] belongs to.
///
/// `NewInput { stage }` variables are the closed-loop inputs `v` introduced by
/// the staged linearization procedure; `Reference` variables are the desired
/// output trajectories `y^d` used by the tracking law.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Family {
    State,
    Input,
    NewInput { stage: u8 },
    Reference,
}

/// A scalar signal together with a time-derivative (jet) order.
///
/// `index` is 0-based within the family (stage-local for `NewInput`).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct JetVar {
    pub family: Family,
    pub index: u16,
    pub order: u16,
}

impl JetVar {
    pub fn state(index: usize) -> Self {
        JetVar { family: Family::State, index: index as u16, order: 0 }
    }

    pub fn input(index: usize) -> Self {
        JetVar { family: Family::Input, index: index as u16, order: 0 }
    }

    pub fn new_input(stage: usize, index: usize) -> Self {
        JetVar { family: Family::NewInput { stage: stage as u8 }, index: index as u16, order: 0 }
    }

    pub fn reference(output: usize) -> Self {
        JetVar { family: Family::Reference, index: output as u16, order: 0 }
    }

    /// Same signal, `k` additional time derivatives.
    pub fn shifted(self, k: usize) -> Self {
        JetVar { order: self.order + k as u16, ..self }
    }

    pub fn base(self) -> Self {
        JetVar { order: 0, ..self }
    }
}

/// Name table and jet-order tracking for all variables of a system.
///
/// The maximum jet order (`l_u` of the underlying manifold) is not fixed in
/// advance; it grows monotonically as higher derivatives are produced.
#[derive(Clone, Debug)]
pub struct JetRegistry {
    state_names: Vec<String>,
    input_names: Vec<String>,
    /// Stage-local component counts for new inputs introduced so far.
    stage_sizes: Vec<usize>,
    output_count: usize,
    max_order: Cell<u16>,
}

impl JetRegistry {
    pub fn new(state_names: Vec<String>, input_names: Vec<String>) -> Self {
        JetRegistry {
            state_names,
            input_names,
            stage_sizes: Vec::new(),
            output_count: 0,
            max_order: Cell::new(0),
        }
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.input_names.len()
    }

    pub fn set_output_count(&mut self, m: usize) {
        self.output_count = m;
    }

    pub fn output_count(&self) -> usize {
        self.output_count
    }

    /// Registers the `v` components of a new stage; stages are 1-based.
    pub fn push_stage(&mut self, size: usize) -> usize {
        self.stage_sizes.push(size);
        self.stage_sizes.len()
    }

    pub fn stage_sizes(&self) -> &[usize] {
        &self.stage_sizes
    }

    /// Highest jet order handed out so far.
    pub fn current_max_order(&self) -> u16 {
        self.max_order.get()
    }

    /// Notes that `var` is in use, growing the derivative bound if needed.
    pub fn touch(&self, var: JetVar) {
        if var.order > self.max_order.get() {
            self.max_order.set(var.order);
        }
    }

    pub fn state_name(&self, index: usize) -> &str {
        &self.state_names[index]
    }

    pub fn input_name(&self, index: usize) -> &str {
        &self.input_names[index]
    }

    pub fn name(&self, var: JetVar) -> String {
        let base = match var.family {
            Family::State => self.state_names[var.index as usize].clone(),
            Family::Input => self.input_names[var.index as usize].clone(),
            Family::NewInput { stage } => format!("v{}_{}", stage, var.index + 1),
            Family::Reference => format!("y{}d", var.index + 1),
        };
        if var.order == 0 {
            base
        } else {
            format!("{}@{}", base, var.order)
        }
    }

    /// Resolves a bare identifier (without jet suffix) to a variable.
    pub fn resolve(&self, ident: &str) -> Option<JetVar> {
        if let Some(i) = self.state_names.iter().position(|n| n == ident) {
            return Some(JetVar::state(i));
        }
        if let Some(i) = self.input_names.iter().position(|n| n == ident) {
            return Some(JetVar::input(i));
        }
        // v<stage>_<comp> for new inputs
        if let Some(rest) = ident.strip_prefix('v') {
            if let Some((s, c)) = rest.split_once('_') {
                if let (Ok(stage), Ok(comp)) = (s.parse::<usize>(), c.parse::<usize>()) {
                    if stage >= 1 && comp >= 1 {
                        return Some(JetVar::new_input(stage, comp - 1));
                    }
                }
            }
        }
        // y<j>d for references
        if let Some(rest) = ident.strip_prefix('y') {
            if let Some(num) = rest.strip_suffix('d') {
                if let Ok(j) = num.parse::<usize>() {
                    if j >= 1 {
                        return Some(JetVar::reference(j - 1));
                    }
                }
            }
        }
        None
    }
}

/// Multi-index of derivative orders with the componentwise algebra.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `|A|`, the sum of the components.
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn add_scalar(&self, c: usize) -> MultiIndex {
        MultiIndex(self.0.iter().map(|a| a + c).collect())
    }

    /// Componentwise subtraction; components that would go negative are
    /// clamped to an empty range marker via `checked_sub_scalar` instead.
    pub fn sub_scalar(&self, c: usize) -> Option<MultiIndex> {
        self.0
            .iter()
            .map(|a| a.checked_sub(c))
            .collect::<Option<Vec<_>>>()
            .map(MultiIndex)
    }

    pub fn add(&self, other: &MultiIndex) -> Result<MultiIndex, LengthMismatch> {
        self.zip_with(other, |a, b| Some(a + b))
    }

    pub fn sub(&self, other: &MultiIndex) -> Result<MultiIndex, LengthMismatch> {
        self.zip_with(other, |a, b| a.checked_sub(b))
            .map_err(|_| LengthMismatch)
    }

    fn zip_with(
        &self,
        other: &MultiIndex,
        f: impl Fn(usize, usize) -> Option<usize>,
    ) -> Result<MultiIndex, LengthMismatch> {
        if self.len() != other.len() {
            return Err(LengthMismatch);
        }
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f(a, b).ok_or(LengthMismatch))
            .collect::<Result<Vec<_>, _>>()
            .map(MultiIndex)
    }

    /// `A <= B` componentwise.
    pub fn le(&self, other: &MultiIndex) -> Result<bool, LengthMismatch> {
        if self.len() != other.len() {
            return Err(LengthMismatch);
        }
        Ok(self.0.iter().zip(&other.0).all(|(a, b)| a <= b))
    }

    pub fn concat(&self, other: &MultiIndex) -> MultiIndex {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        MultiIndex(v)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", a)?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, thiserror::Error)]
#[error("multi-index length mismatch")]
pub struct LengthMismatch;

/// The right-hand sides `f^i(x, u)` of the state equations, or their image
/// under the coordinate changes of the staged procedure (then expressed over
/// `x`, `v`-jets and the remaining inputs).
#[derive(Clone, Debug)]
pub struct DynamicsTable {
    pub rhs: Vec<Expr>,
}

impl DynamicsTable {
    pub fn new(rhs: Vec<Expr>) -> Self {
        DynamicsTable { rhs }
    }

    pub fn n_states(&self) -> usize {
        self.rhs.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LieError {
    #[error("derivative order cap {cap} exceeded while differentiating an output; the declared flat output is likely not flat")]
    OrderCapExceeded { cap: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Total time derivative of `h` along the prolonged vector field: state
/// directions move with the dynamics, every jet variable shifts to its next
/// derivative.
pub fn lie_derivative(h: &Expr, dyn_table: &DynamicsTable, registry: &JetRegistry) -> Expr {
    let mut acc = Expr::constant(0.0);
    for var in h.free_vars() {
        let partial = h.differentiate(var);
        if partial.is_zero() {
            continue;
        }
        let rate = match var.family {
            Family::State => dyn_table.rhs[var.index as usize].clone(),
            _ => {
                let next = var.shifted(1);
                registry.touch(next);
                Expr::var(next)
            }
        };
        acc = Expr::add(acc, Expr::mul(partial, rate));
    }
    acc.simplify()
}

/// `[h, L h, ..., L^k h]`, each simplified.
pub fn lie_iterate(
    h: &Expr,
    dyn_table: &DynamicsTable,
    registry: &JetRegistry,
    k: usize,
    cap: usize,
) -> Result<Vec<Expr>, LieError> {
    if k > cap {
        return Err(LieError::OrderCapExceeded { cap });
    }
    let mut out = Vec::with_capacity(k + 1);
    out.push(h.simplify());
    for _ in 0..k {
        let next = lie_derivative(out.last().unwrap(), dyn_table, registry);
        out.push(next);
    }
    Ok(out)
}

/// Default derivative-order cap before a non-flat declaration is reported.
pub fn default_order_cap(n_states: usize) -> usize {
    2 * n_states + 2
}

/// Convenience map type for per-variable numeric assignments.
pub type VarMap<T> = BTreeMap<JetVar, T>;
