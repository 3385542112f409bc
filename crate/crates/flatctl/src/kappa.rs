//! The staged construction of the minimal derivative multi-index κ and the
//! exactly linearizing quasi-static feedback of the classical state.
//!
//! Each stage differentiates the remaining flat-output components until they
//! explicitly depend on a remaining input (relative degrees `K_i`), measures
//! the generic rank `m_i` of the input Jacobian, selects `m_i` outputs and
//! inputs, and solves the stage equations `φ_[K_i] = v_i` for the selected
//! inputs. The selected inputs are then eliminated from the dynamics by
//! substitution and the next stage continues with the remaining outputs. The
//! procedure terminates after at most `m` stages with `|κ| = n`.
//!
//! Semantic decisions (dependence, rank) are numeric: expressions are
//! evaluated at seeded sample points; a property must hold at a majority of
//! the points to be accepted.

use std::sync::Arc;

use crate::expr::{
    affine_decompose, AffineDecomposition, Expr, ExprError, NewtonSystem, Valuation,
};
use crate::flatsys::FlatSystemDef;
use crate::jets::{
    default_order_cap, lie_derivative, DynamicsTable, Family, JetRegistry, JetVar, LieError,
    MultiIndex, VarMap,
};
use crate::sample::{Sampler, MAJORITY, N_SAMPLES};

/// Absolute threshold below which a sampled partial derivative counts as zero.
pub const DEPENDENCE_TOL: f64 = 1e-9;

/// Relative singular-value threshold of the numeric rank decision.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum KappaError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(
        "derivative order cap {cap} exceeded for output y{output}; the declared flat output is likely not flat"
    )]
    CapExceeded { output: usize, cap: usize },
    #[error("sample points disagree on the generic rank beyond a majority: ranks {ranks:?} (non-generic sampling box?)")]
    RankDisagreement { ranks: Vec<usize> },
    #[error("procedure failed: {0}")]
    Procedure(String),
}

/// Result of a numeric generic-rank estimate of a symbolic matrix.
#[derive(Clone, Debug)]
pub struct RankResult {
    pub rank: usize,
    /// Row indices in column-pivoted QR order of the transpose (best first).
    pub row_pivots: Vec<usize>,
    /// Column indices in column-pivoted QR order (best first).
    pub col_pivots: Vec<usize>,
    /// Rank observed at each sample point.
    pub sample_ranks: Vec<usize>,
    /// A sample point at which the maximal rank is attained.
    pub witness: Valuation,
}

/// Per-original-output record of the procedure outcome.
#[derive(Clone, Debug)]
pub struct OutputInfo {
    /// 1-based stage in which this output was selected.
    pub stage: usize,
    /// Component index within the stage; the new input is `v<stage>_<comp+1>`.
    pub comp: usize,
    /// κ^j: the order at which this output's chain reaches the new input.
    pub kappa: usize,
    /// Expressions for y^j, ẏ^j, …, y^j_[κ−1] over x and v-jets of earlier
    /// stages only (the triangular structure).
    pub chain: Vec<Expr>,
}

/// Outcome of one stage of the procedure.
#[derive(Clone, Debug)]
pub struct StageRecord {
    pub stage: usize,
    /// Original indices of the outputs entering this stage.
    pub remaining_outputs: Vec<usize>,
    /// Relative degrees of those outputs (parallel to `remaining_outputs`).
    pub k_i: Vec<usize>,
    /// Generic rank of the input Jacobian at this stage.
    pub m_i: usize,
    /// Selected outputs, ascending original indices.
    pub selected_outputs: Vec<usize>,
    /// Selected (replaced) inputs, ascending original indices.
    pub selected_inputs: Vec<usize>,
    /// Solved input expressions in stage coordinates: over x, v-jets of
    /// stages ≤ this one, and still-remaining inputs at order 0.
    pub solved: Vec<(usize, Expr)>,
    /// Whether the stage equations were affine in the selected inputs (and
    /// hence solved symbolically rather than by an implicit Newton node).
    pub affine: bool,
    /// Rank diagnostics from the sampled Jacobian.
    pub sample_ranks: Vec<usize>,
}

/// Full record of the procedure.
#[derive(Clone, Debug)]
pub struct StagePlan {
    /// Registry extended with the per-stage new inputs.
    pub registry: JetRegistry,
    pub stages: Vec<StageRecord>,
    /// Indexed by original output.
    pub outputs: Vec<OutputInfo>,
    /// κ in original output order; `|κ| = n`.
    pub kappa: MultiIndex,
    pub seed: u64,
}

impl StagePlan {
    /// κ in stage form, e.g. `(1,2 | 2 | 5)`.
    pub fn kappa_stage_form(&self) -> String {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                s.selected_outputs
                    .iter()
                    .map(|&j| self.outputs[j].kappa.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        format!("({})", parts.join(" | "))
    }
}

/// The synthesized quasi-static feedback: one expression per original input
/// over the state (jet order 0) and the new-input jets.
#[derive(Clone, Debug)]
pub struct FeedbackLaw {
    pub inputs: Vec<Expr>,
    /// Highest v-jet order used, per stage (index 0 = stage 1).
    pub max_v_order: Vec<usize>,
}

// ---- numeric helpers --------------------------------------------------

fn eval_matrix(j: &[Vec<Expr>], p: &Valuation) -> Result<nalgebra::DMatrix<f64>, ExprError> {
    let rows = j.len();
    let cols = if rows == 0 { 0 } else { j[0].len() };
    let mut m = nalgebra::DMatrix::zeros(rows, cols);
    for (r, row) in j.iter().enumerate() {
        for (c, e) in row.iter().enumerate() {
            m[(r, c)] = e.evaluate(p)?;
        }
    }
    Ok(m)
}

fn numeric_rank(m: &nalgebra::DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > RANK_TOL * smax)
        .count()
}

/// Column order of a modified-Gram-Schmidt QR with column pivoting; ties are
/// broken toward the lowest index (strict `>` comparison).
fn pivot_order(m: &nalgebra::DMatrix<f64>) -> Vec<usize> {
    let cols = m.ncols();
    let mut work: Vec<nalgebra::DVector<f64>> =
        (0..cols).map(|c| m.column(c).into_owned()).collect();
    let mut remaining: Vec<usize> = (0..cols).collect();
    let mut order = Vec::with_capacity(cols);
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .reduce(|a, b| {
                if work[*b.1].norm() > work[*a.1].norm() {
                    b
                } else {
                    a
                }
            })
            .unwrap();
        remaining.remove(pos);
        order.push(best);
        let q = work[best].clone();
        let qn = q.norm();
        if qn > 0.0 {
            let q = q / qn;
            for &c in &remaining {
                let proj = q.dot(&work[c]);
                work[c] -= &q * proj;
            }
        }
    }
    order
}

/// Greedy selection from `candidates` (in the given preference order) of rows
/// of `m` that increase the numeric rank, until `target` rows are selected.
fn greedy_rows(
    m: &nalgebra::DMatrix<f64>,
    candidates: &[usize],
    target: usize,
) -> Option<Vec<usize>> {
    let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut selected = Vec::new();
    for &r in candidates {
        if selected.len() == target {
            break;
        }
        let mut v = m.row(r).transpose();
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        if v.norm() > RANK_TOL * scale {
            basis.push(v.clone() / v.norm());
            selected.push(r);
        }
    }
    (selected.len() == target).then_some(selected)
}

// ---- operations -------------------------------------------------------

/// Maximal numeric rank of a symbolic matrix over the standard batch of
/// sample points, with pivot orders computed at a rank-achieving point.
pub fn generic_rank(j: &[Vec<Expr>], sampler: &mut Sampler) -> Result<RankResult, KappaError> {
    let mut vars = std::collections::BTreeSet::new();
    let refs: Vec<&Expr> = j.iter().flatten().collect();
    for e in &refs {
        vars.extend(e.free_vars());
    }
    let vars: Vec<JetVar> = vars.into_iter().collect();
    let points = sampler.points(&vars, &refs)?;
    let mut sample_ranks = Vec::with_capacity(points.len());
    let mut best: Option<(usize, usize)> = None; // (rank, point index)
    for (i, p) in points.iter().enumerate() {
        let m = eval_matrix(j, p)?;
        let r = numeric_rank(&m);
        sample_ranks.push(r);
        if best.map_or(true, |(br, _)| r > br) {
            best = Some((r, i));
        }
    }
    let (rank, wi) = best.unwrap_or((0, 0));
    let agreeing = sample_ranks.iter().filter(|&&r| r == rank).count();
    if agreeing < MAJORITY.min(sample_ranks.len()) {
        return Err(KappaError::RankDisagreement {
            ranks: sample_ranks,
        });
    }
    let witness = points[wi].clone();
    let m = eval_matrix(j, &witness)?;
    Ok(RankResult {
        rank,
        row_pivots: pivot_order(&m.transpose()),
        col_pivots: pivot_order(&m),
        sample_ranks,
        witness,
    })
}

/// True when `e` depends on `var` at a majority of sample points
/// (|∂e/∂var| > 1e-9).
fn depends_on(e: &Expr, var: JetVar, sampler: &mut Sampler) -> Result<bool, KappaError> {
    let d = e.differentiate(var).simplify();
    if d.is_zero() {
        return Ok(false);
    }
    if let Some(c) = d.as_const() {
        return Ok(c.abs() > DEPENDENCE_TOL);
    }
    let mut vars = std::collections::BTreeSet::new();
    vars.extend(e.free_vars());
    vars.extend(d.free_vars());
    let vars: Vec<JetVar> = vars.into_iter().collect();
    let points = sampler.points(&vars, &[e, &d])?;
    let hits = points
        .iter()
        .filter(|p| d.evaluate(p).map(|v| v.abs() > DEPENDENCE_TOL).unwrap_or(false))
        .count();
    Ok(hits >= MAJORITY)
}

/// Removes numerically absent input variables from `e`: the listed inputs
/// (all jet orders) are set to zero, and the rewrite is kept only if it is
/// numerically identical to `e` on the sample batch. This realizes the
/// constant-rank assumption: derivative chains below the relative degree are
/// input-free even when cancellations are not syntactically visible.
fn prune_absent_inputs(
    e: &Expr,
    absent: &[usize],
    sampler: &mut Sampler,
) -> Result<Expr, KappaError> {
    let targets: Vec<JetVar> = e
        .free_vars()
        .into_iter()
        .filter(|v| v.family == Family::Input && absent.contains(&(v.index as usize)))
        .collect();
    if targets.is_empty() {
        return Ok(e.clone());
    }
    let bindings: VarMap<Expr> = targets
        .iter()
        .map(|v| (*v, Expr::constant(0.0)))
        .collect();
    let candidate = e.substitute_unchecked(&bindings).simplify();
    let vars = e.free_vars();
    let points = sampler.points(&vars, &[e])?;
    let mut checked = 0usize;
    for p in &points {
        let (a, b) = match (e.evaluate(p), candidate.evaluate(p)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        if (a - b).abs() > DEPENDENCE_TOL * (1.0 + a.abs()) {
            return Ok(e.clone());
        }
        checked += 1;
    }
    if checked >= MAJORITY.min(N_SAMPLES) {
        Ok(candidate)
    } else {
        Ok(e.clone())
    }
}

/// Differentiates each output until it depends on one of `remaining_inputs`;
/// returns the relative degrees and the full derivative chains (entries below
/// the relative degree pruned to be input-free).
pub fn stage_relative_degrees(
    outputs: &[(usize, Expr)],
    dyn_table: &DynamicsTable,
    registry: &JetRegistry,
    remaining_inputs: &[usize],
    sampler: &mut Sampler,
    cap: usize,
) -> Result<(Vec<usize>, Vec<Vec<Expr>>), KappaError> {
    let mut ks = Vec::with_capacity(outputs.len());
    let mut chains = Vec::with_capacity(outputs.len());
    for (orig_idx, phi) in outputs {
        let mut chain = vec![phi.simplify()];
        let mut k = 0usize;
        loop {
            let top = chain.last().unwrap().clone();
            let mut dependent = Vec::new();
            let mut absent = Vec::new();
            for &c in remaining_inputs {
                if depends_on(&top, JetVar::input(c), sampler)? {
                    dependent.push(c);
                } else {
                    absent.push(c);
                }
            }
            let pruned = prune_absent_inputs(&top, &absent, sampler)?;
            *chain.last_mut().unwrap() = pruned.clone();
            if !dependent.is_empty() {
                break;
            }
            if k >= cap {
                return Err(KappaError::CapExceeded {
                    output: orig_idx + 1,
                    cap,
                });
            }
            chain.push(lie_derivative(&pruned, dyn_table, registry));
            k += 1;
        }
        ks.push(k);
        chains.push(chain);
    }
    Ok((ks, chains))
}

/// Symbolic Gaussian elimination of `A·x = rhs` with numeric-magnitude row
/// pivoting at the witness point. `A` must be generically invertible there.
fn solve_affine(
    a: &[Vec<Expr>],
    rhs: &[Expr],
    witness: &Valuation,
) -> Result<Vec<Expr>, KappaError> {
    let k = rhs.len();
    let mut a: Vec<Vec<Expr>> = a.to_vec();
    let mut rhs: Vec<Expr> = rhs.to_vec();
    let mut perm: Vec<usize> = (0..k).collect(); // row order
    for col in 0..k {
        // choose the row with the largest coefficient magnitude at the witness
        let pivot_row = (col..k)
            .max_by(|&r1, &r2| {
                let v1 = a[perm[r1]][col].evaluate(witness).map(f64::abs).unwrap_or(0.0);
                let v2 = a[perm[r2]][col].evaluate(witness).map(f64::abs).unwrap_or(0.0);
                v1.total_cmp(&v2)
            })
            .unwrap();
        perm.swap(col, pivot_row);
        let p = perm[col];
        let pivot_val = a[p][col].evaluate(witness).map(f64::abs).unwrap_or(0.0);
        if pivot_val <= DEPENDENCE_TOL {
            return Err(KappaError::Procedure(
                "singular stage Jacobian at the sample point".to_string(),
            ));
        }
        for r in col + 1..k {
            let q = perm[r];
            if a[q][col].is_zero() {
                continue;
            }
            let factor = Expr::div(a[q][col].clone(), a[p][col].clone());
            for c in col..k {
                a[q][c] = Expr::sub(
                    a[q][c].clone(),
                    Expr::mul(factor.clone(), a[p][c].clone()),
                )
                .simplify();
            }
            rhs[q] = Expr::sub(rhs[q].clone(), Expr::mul(factor, rhs[p].clone())).simplify();
        }
    }
    let mut sol = vec![Expr::constant(0.0); k];
    for col in (0..k).rev() {
        let p = perm[col];
        let mut acc = rhs[p].clone();
        for c in col + 1..k {
            acc = Expr::sub(acc, Expr::mul(a[p][c].clone(), sol[c].clone()));
        }
        sol[col] = Expr::div(acc, a[p][col].clone()).simplify();
    }
    Ok(sol)
}

/// Runs the staged procedure on a system definition.
pub fn run_procedure(sys: &FlatSystemDef, seed: u64) -> Result<StagePlan, KappaError> {
    let n = sys.n_states();
    let m = sys.n_inputs();
    let cap = default_order_cap(n);
    let mut registry = sys.registry.clone();
    let mut sampler = Sampler::new(seed, sys.sample_space.clone());

    let mut dyn_cur = sys.dynamics.clone();
    let mut cur_outputs: Vec<(usize, Expr)> = sys.outputs.iter().cloned().enumerate().collect();
    let mut remaining_inputs: Vec<usize> = (0..m).collect();

    let mut stages: Vec<StageRecord> = Vec::new();
    let mut out_infos: Vec<Option<OutputInfo>> = vec![None; sys.n_outputs()];

    for stage in 1..=m {
        if remaining_inputs.is_empty() {
            break;
        }
        let (ks, chains) = stage_relative_degrees(
            &cur_outputs,
            &dyn_cur,
            &registry,
            &remaining_inputs,
            &mut sampler,
            cap,
        )?;

        // input Jacobian of the relative-degree derivatives
        let jac: Vec<Vec<Expr>> = chains
            .iter()
            .map(|chain| {
                remaining_inputs
                    .iter()
                    .map(|&c| {
                        chain
                            .last()
                            .unwrap()
                            .differentiate(JetVar::input(c))
                            .simplify()
                    })
                    .collect()
            })
            .collect();
        let rank = generic_rank(&jac, &mut sampler)?;
        let m_i = rank.rank;
        if m_i == 0 {
            return Err(KappaError::Procedure(format!(
                "stage {}: input Jacobian has generic rank 0",
                stage
            )));
        }

        // output selection: hints first, then ascending original index
        let hint = sys.hints.get(stage - 1).cloned().unwrap_or_default();
        let mut candidates: Vec<usize> = Vec::new(); // positions within cur_outputs
        for &j in &hint {
            if let Some(pos) = cur_outputs.iter().position(|(oj, _)| *oj == j) {
                candidates.push(pos);
            }
        }
        for pos in 0..cur_outputs.len() {
            if !candidates.contains(&pos) {
                candidates.push(pos);
            }
        }
        let jac_num = eval_matrix(&jac, &rank.witness)?;
        let mut selected_pos = greedy_rows(&jac_num, &candidates, m_i).ok_or_else(|| {
            KappaError::Procedure(format!(
                "stage {}: could not select {} independent outputs",
                stage, m_i
            ))
        })?;
        selected_pos.sort_by_key(|&p| cur_outputs[p].0);
        let selected_outputs: Vec<usize> = selected_pos.iter().map(|&p| cur_outputs[p].0).collect();

        // input selection: column-pivoted order of the selected-row submatrix
        let sub = nalgebra::DMatrix::from_fn(m_i, remaining_inputs.len(), |r, c| {
            jac_num[(selected_pos[r], c)]
        });
        let mut sel_cols: Vec<usize> = pivot_order(&sub).into_iter().take(m_i).collect();
        sel_cols.sort_unstable();
        let selected_inputs: Vec<usize> = sel_cols.iter().map(|&c| remaining_inputs[c]).collect();
        {
            // the selected columns must actually carry the rank
            let chk = nalgebra::DMatrix::from_fn(m_i, m_i, |r, c| sub[(r, sel_cols[c])]);
            if numeric_rank(&chk) < m_i {
                return Err(KappaError::Procedure(format!(
                    "stage {}: selected input columns are singular at the sample point",
                    stage
                )));
            }
        }

        let stage_no = registry.push_stage(m_i);
        debug_assert_eq!(stage_no, stage);

        // stage equations: φ_{sel,[K]} = v; solve for the selected inputs
        let unknowns: Vec<JetVar> = selected_inputs.iter().map(|&c| JetVar::input(c)).collect();
        let rows: Vec<Expr> = selected_pos
            .iter()
            .map(|&p| chains[p].last().unwrap().clone())
            .collect();
        let v_vars: Vec<Expr> = (0..m_i)
            .map(|c| {
                let v = JetVar::new_input(stage, c);
                registry.touch(v);
                Expr::var(v)
            })
            .collect();

        let mut fv = std::collections::BTreeSet::new();
        for r in &rows {
            fv.extend(r.free_vars());
        }
        let fv: Vec<JetVar> = fv.into_iter().collect();
        let row_refs: Vec<&Expr> = rows.iter().collect();
        let points = sampler.points(&fv, &row_refs)?;

        let (solved_exprs, affine) = match affine_decompose(&rows, &unknowns, &points)? {
            AffineDecomposition::Affine { a, b } => {
                let rhs: Vec<Expr> = v_vars
                    .iter()
                    .zip(&b)
                    .map(|(v, bi)| Expr::sub(v.clone(), bi.clone()))
                    .collect();
                (solve_affine(&a, &rhs, &rank.witness)?, true)
            }
            AffineDecomposition::NotAffine => {
                let residuals: Vec<Expr> = rows
                    .iter()
                    .zip(&v_vars)
                    .map(|(r, v)| Expr::sub(r.clone(), v.clone()))
                    .collect();
                let sys_newton = Arc::new(NewtonSystem {
                    residuals,
                    unknowns: unknowns.clone(),
                });
                (
                    (0..m_i)
                        .map(|c| Expr::newton_solve(sys_newton.clone(), c))
                        .collect(),
                    false,
                )
            }
        };

        // record the selected outputs' triangular chains
        for (c, &p) in selected_pos.iter().enumerate() {
            let orig = cur_outputs[p].0;
            let kappa = ks[p];
            out_infos[orig] = Some(OutputInfo {
                stage,
                comp: c,
                kappa,
                chain: chains[p][..kappa].to_vec(),
            });
        }

        let remaining_now: Vec<usize> = cur_outputs.iter().map(|(j, _)| *j).collect();

        // eliminate the solved inputs everywhere
        let subs: VarMap<Expr> = unknowns
            .iter()
            .cloned()
            .zip(solved_exprs.iter().cloned())
            .collect();
        dyn_cur = DynamicsTable::new(
            dyn_cur
                .rhs
                .iter()
                .map(|e| e.substitute(&subs).map(|x| x.simplify()))
                .collect::<Result<_, _>>()?,
        );
        cur_outputs = cur_outputs
            .into_iter()
            .enumerate()
            .filter(|(pos, _)| !selected_pos.contains(pos))
            .map(|(_, (j, e))| Ok((j, e.substitute(&subs)?.simplify())))
            .collect::<Result<_, ExprError>>()?;
        remaining_inputs.retain(|c| !selected_inputs.contains(c));

        stages.push(StageRecord {
            stage,
            remaining_outputs: remaining_now,
            k_i: ks.clone(),
            m_i,
            selected_outputs: selected_outputs.clone(),
            selected_inputs: selected_inputs.clone(),
            solved: selected_inputs
                .iter()
                .cloned()
                .zip(solved_exprs.iter().cloned())
                .collect(),
            affine,
            sample_ranks: rank.sample_ranks.clone(),
        });
    }

    if !remaining_inputs.is_empty() {
        return Err(KappaError::Procedure(format!(
            "{} input(s) still unreplaced after {} stages",
            remaining_inputs.len(),
            stages.len()
        )));
    }
    let m_sum: usize = stages.iter().map(|s| s.m_i).sum();
    if m_sum != m {
        return Err(KappaError::Procedure(format!(
            "Σ m_i = {} does not equal m = {}",
            m_sum, m
        )));
    }
    let outputs: Vec<OutputInfo> = out_infos
        .into_iter()
        .map(|o| o.expect("every output is selected in some stage"))
        .collect();
    let kappa = MultiIndex(outputs.iter().map(|o| o.kappa).collect());
    if kappa.total() != n {
        return Err(KappaError::Procedure(format!(
            "|κ| = {} does not equal n = {}; the declaration is inconsistent",
            kappa.total(),
            n
        )));
    }
    if let Some(r) = &sys.declared_r {
        if let Ok(false) = kappa.le(r) {
            return Err(KappaError::Procedure(format!(
                "κ = {} exceeds the declared R = {}",
                kappa, r
            )));
        }
    }

    Ok(StagePlan {
        registry,
        stages,
        outputs,
        kappa,
        seed,
    })
}

/// Builds the feedback `u = α(x, v-jets)` by back-substituting the stage
/// solutions from the last stage to the first.
pub fn synthesize_feedback(plan: &StagePlan, sys: &FlatSystemDef) -> Result<FeedbackLaw, KappaError> {
    let mut final_map: VarMap<Expr> = VarMap::new();
    for record in plan.stages.iter().rev() {
        for (uidx, expr) in &record.solved {
            let resolved = expr.substitute(&final_map)?.simplify();
            final_map.insert(JetVar::input(*uidx), resolved);
        }
    }
    let mut inputs = Vec::with_capacity(sys.n_inputs());
    let mut max_v_order = vec![0usize; plan.stages.len()];
    for j in 0..sys.n_inputs() {
        let e = final_map
            .get(&JetVar::input(j))
            .cloned()
            .ok_or_else(|| KappaError::Procedure(format!("input u{} was never solved", j + 1)))?;
        for v in e.free_vars() {
            match v.family {
                Family::State if v.order == 0 => {}
                Family::NewInput { stage } => {
                    let s = stage as usize - 1;
                    max_v_order[s] = max_v_order[s].max(v.order as usize);
                }
                _ => {
                    return Err(KappaError::Procedure(format!(
                        "feedback for u{} depends on {}; only x and v-jets are allowed",
                        j + 1,
                        plan.registry.name(v)
                    )))
                }
            }
        }
        inputs.push(e);
    }
    Ok(FeedbackLaw { inputs, max_v_order })
}

/// Report of the differential-independence check of the theorem: the
/// Jacobian of `(x, φ_[κ], …, φ_[R−1])` with respect to `(x, u-jets)` must
/// have full row rank `n + |R−κ|` at the sample points.
#[derive(Clone, Debug)]
pub struct IndependenceReport {
    pub expected_rank: usize,
    pub sample_ranks: Vec<usize>,
    pub pass: bool,
}

pub fn verify_independence(
    plan: &StagePlan,
    sys: &FlatSystemDef,
    seed: u64,
    kappa_override: Option<&MultiIndex>,
) -> Result<IndependenceReport, KappaError> {
    let r = sys
        .declared_r
        .as_ref()
        .ok_or_else(|| KappaError::Procedure("verify_independence requires a declared R".to_string()))?;
    let kappa = kappa_override.unwrap_or(&plan.kappa);
    let n = sys.n_states();

    // derivative chains of the original outputs, in original coordinates
    let mut funcs: Vec<Expr> = (0..n).map(|i| Expr::var(JetVar::state(i))).collect();
    for (j, phi) in sys.outputs.iter().enumerate() {
        let hi = r.0[j];
        let lo = kappa.0[j];
        // push φ^j_[κ_j], …, φ^j_[R_j−1]
        let mut chain = phi.simplify();
        for order in 0..hi {
            if order >= lo {
                funcs.push(chain.clone());
            }
            chain = lie_derivative(&chain, &sys.dynamics, &sys.registry);
        }
    }
    // n state rows plus |R−κ| output-derivative rows, all independent
    let expected_rank = funcs.len();

    // differentiation variables: states and all u-jets that occur
    let mut vars = std::collections::BTreeSet::new();
    for f in &funcs {
        vars.extend(f.free_vars());
    }
    for i in 0..n {
        vars.insert(JetVar::state(i));
    }
    let vars: Vec<JetVar> = vars
        .into_iter()
        .filter(|v| matches!(v.family, Family::State | Family::Input))
        .collect();

    let jac: Vec<Vec<Expr>> = funcs
        .iter()
        .map(|f| vars.iter().map(|v| f.differentiate(*v).simplify()).collect())
        .collect();

    let mut sampler = Sampler::new(seed, sys.sample_space.clone());
    let refs: Vec<&Expr> = funcs.iter().collect();
    let mut fv = std::collections::BTreeSet::new();
    for f in &funcs {
        fv.extend(f.free_vars());
    }
    let fv: Vec<JetVar> = fv.into_iter().collect();
    let points = sampler.points(&fv, &refs)?;
    let mut sample_ranks = Vec::new();
    for p in &points {
        let m = eval_matrix(&jac, p)?;
        sample_ranks.push(numeric_rank(&m));
    }
    let pass = sample_ranks.iter().all(|&rk| rk == expected_rank);
    Ok(IndependenceReport {
        expected_rank,
        sample_ranks,
        pass,
    })
}
