//! Light canonicalization: constant folding, 0/1 identities, collection of
//! like terms in sums, and guarded distribution of products over sums. No
//! factoring and no trigonometric rewriting — the result is numerically equal
//! to the input.
//!
//! Sums are flattened into terms `coeff · Π factor^k`; additive factors with
//! small positive exponents are multiplied out (bounded by a term budget so
//! pathological expressions cannot blow up), terms with equal factor lists
//! are combined, and the survivors are emitted in first-appearance order.
//! This is what lets the cancellations produced by the stage solves (e.g.
//! `a − a → 0` hidden inside products) disappear.

use std::collections::HashMap;

use super::{BinOp, Expr, NodeKind, UnaryOp};

/// Upper bound on the terms produced by expanding a single additive factor.
const EXPAND_FACTOR_LIMIT: usize = 8;

/// Upper bound on the total terms processed while collecting one sum.
const EXPAND_TOTAL_LIMIT: usize = 4096;

pub fn simplify(e: &Expr) -> Expr {
    let mut memo = HashMap::new();
    simp(e, &mut memo)
}

fn is_additive(e: &Expr) -> bool {
    matches!(
        e.kind(),
        NodeKind::Bin(BinOp::Add, ..) | NodeKind::Bin(BinOp::Sub, ..)
    )
}

fn simp(e: &Expr, memo: &mut HashMap<usize, Expr>) -> Expr {
    if e.is_marked_simplified() {
        return e.clone();
    }
    if let Some(r) = memo.get(&e.ptr_key()) {
        return r.clone();
    }
    let r = match e.kind() {
        NodeKind::Const(_) | NodeKind::Var(_) => e.clone(),
        NodeKind::Bin(..) | NodeKind::Unary(UnaryOp::Neg, _) | NodeKind::Pow(..) => {
            collect(e, memo)
        }
        NodeKind::Unary(op, a) => Expr::unary(*op, simp(a, memo)),
        NodeKind::LinSolve(sys, comp) => {
            let mat: Vec<Vec<Expr>> = sys
                .mat
                .iter()
                .map(|row| row.iter().map(|x| simp(x, memo)).collect())
                .collect();
            let rhs: Vec<Expr> = sys.rhs.iter().map(|x| simp(x, memo)).collect();
            if mat
                .iter()
                .zip(&sys.mat)
                .all(|(r1, r2)| r1.iter().zip(r2).all(|(a, b)| a.ptr_key() == b.ptr_key()))
                && rhs
                    .iter()
                    .zip(&sys.rhs)
                    .all(|(a, b)| a.ptr_key() == b.ptr_key())
            {
                e.clone()
            } else {
                Expr::lin_solve(
                    std::sync::Arc::new(super::LinSystem { mat, rhs }),
                    *comp,
                )
            }
        }
        NodeKind::Newton(sys, comp) => {
            let residuals: Vec<Expr> = sys.residuals.iter().map(|x| simp(x, memo)).collect();
            if residuals
                .iter()
                .zip(&sys.residuals)
                .all(|(a, b)| a.ptr_key() == b.ptr_key())
            {
                e.clone()
            } else {
                Expr::newton_solve(
                    std::sync::Arc::new(super::NewtonSystem {
                        residuals,
                        unknowns: sys.unknowns.clone(),
                    }),
                    *comp,
                )
            }
        }
    };
    r.mark_simplified();
    memo.insert(e.ptr_key(), r.clone());
    r
}

/// One term of a flattened sum: `coeff · Π factors[i].0 ^ factors[i].1`.
/// Factor lists are sorted structurally with merged exponents.
#[derive(Clone)]
struct Term {
    coeff: f64,
    factors: Vec<(Expr, i32)>,
}

/// Collects the additive structure of `e` (possibly a single term) into a
/// canonical sum of terms.
fn collect(e: &Expr, memo: &mut HashMap<usize, Expr>) -> Expr {
    let mut raw: Vec<Term> = Vec::new();
    flatten_sum(e, 1.0, memo, &mut raw);

    // collect without distribution
    let mut plain_terms: Vec<Term> = Vec::new();
    let mut plain_index: HashMap<Vec<(Expr, i32)>, usize> = HashMap::new();
    for t in raw.iter().cloned() {
        push_term(t, &mut plain_terms, &mut plain_index);
    }
    let plain = rebuild_sum(&plain_terms);

    // collect with additive factors multiplied out; prefer the expanded form
    // (it merges like terms across parentheses) unless it grew noticeably
    let expanded = rebuild_sum(&expand_terms(raw, memo));
    if expanded.node_count() <= plain.node_count() + 8 {
        expanded
    } else {
        plain
    }
}

/// Expands additive factors breadth-first under a global budget and combines
/// like terms.
fn expand_terms(mut queue: Vec<Term>, memo: &mut HashMap<usize, Expr>) -> Vec<Term> {
    let mut terms: Vec<Term> = Vec::new();
    let mut index: HashMap<Vec<(Expr, i32)>, usize> = HashMap::new();
    let mut processed = 0usize;
    queue.reverse(); // keep first-appearance order when popping from the back
    while let Some(mut t) = queue.pop() {
        processed += 1;
        let expandable = if processed > EXPAND_TOTAL_LIMIT {
            None
        } else {
            t.factors
                .iter()
                .position(|(f, k)| is_additive(f) && (1..=4).contains(k))
        };
        match expandable {
            None => push_term(t, &mut terms, &mut index),
            Some(i) => {
                let (f, k) = t.factors.remove(i);
                let subs = sum_terms(&f, memo);
                if subs.len() > EXPAND_FACTOR_LIMIT {
                    t.factors.push((f, k));
                    t.factors
                        .sort_by(|a, b| super::structural_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
                    push_term(t, &mut terms, &mut index);
                    continue;
                }
                // multiply out one copy of the sum; remaining copies stay as
                // an exponent-reduced factor and are picked up next round
                for sub in subs.iter().rev() {
                    let mut nt = Term {
                        coeff: t.coeff * sub.coeff,
                        factors: merge_factors(&t.factors, &sub.factors),
                    };
                    if k > 1 {
                        nt.factors = merge_factors(&nt.factors, &[(f.clone(), k - 1)]);
                    }
                    queue.push(nt);
                }
            }
        }
    }
    terms
}

fn flatten_sum(e: &Expr, mult: f64, memo: &mut HashMap<usize, Expr>, out: &mut Vec<Term>) {
    match e.kind() {
        NodeKind::Bin(BinOp::Add, a, b) => {
            flatten_sum(a, mult, memo, out);
            flatten_sum(b, mult, memo, out);
        }
        NodeKind::Bin(BinOp::Sub, a, b) => {
            flatten_sum(a, mult, memo, out);
            flatten_sum(b, -mult, memo, out);
        }
        NodeKind::Unary(UnaryOp::Neg, a) => flatten_sum(a, -mult, memo, out),
        _ => out.push(term_factors_simp(e, mult, memo)),
    }
}

/// Term decomposition of an already-simplified additive expression.
fn sum_terms(e: &Expr, memo: &mut HashMap<usize, Expr>) -> Vec<Term> {
    fn walk(e: &Expr, mult: f64, memo: &mut HashMap<usize, Expr>, out: &mut Vec<Term>) {
        match e.kind() {
            NodeKind::Bin(BinOp::Add, a, b) => {
                walk(a, mult, memo, out);
                walk(b, mult, memo, out);
            }
            NodeKind::Bin(BinOp::Sub, a, b) => {
                walk(a, mult, memo, out);
                walk(b, -mult, memo, out);
            }
            NodeKind::Unary(UnaryOp::Neg, a) => walk(a, -mult, memo, out),
            _ => out.push(term_factors_simp(e, mult, memo)),
        }
    }
    let mut out = Vec::new();
    walk(e, 1.0, memo, &mut out);
    out
}

fn push_term(t: Term, terms: &mut Vec<Term>, index: &mut HashMap<Vec<(Expr, i32)>, usize>) {
    if t.coeff == 0.0 {
        return;
    }
    if let Some(&i) = index.get(&t.factors) {
        terms[i].coeff += t.coeff;
    } else {
        index.insert(t.factors.clone(), terms.len());
        terms.push(t);
    }
}

fn merge_factors(a: &[(Expr, i32)], b: &[(Expr, i32)]) -> Vec<(Expr, i32)> {
    let mut all: Vec<(Expr, i32)> = a.iter().chain(b.iter()).cloned().collect();
    all.sort_by(|x, y| super::structural_cmp(&x.0, &y.0).then(x.1.cmp(&y.1)));
    let mut merged: Vec<(Expr, i32)> = Vec::with_capacity(all.len());
    for (f, k) in all {
        match merged.last_mut() {
            Some((g, j)) if *g == f => *j += k,
            _ => merged.push((f, k)),
        }
    }
    merged.retain(|(_, k)| *k != 0);
    merged
}

/// Splits an expression into coefficient and sorted factor list with integer
/// exponents, simplifying the multiplicative leaves on the way. The node
/// itself is decomposed structurally, so this never re-enters `simp` on its
/// own argument (which would not terminate).
fn term_factors_simp(e: &Expr, sign: f64, memo: &mut HashMap<usize, Expr>) -> Term {
    let mut coeff = sign;
    let mut factors: Vec<(Expr, i32)> = Vec::new();
    flatten_product(e, 1, &mut coeff, &mut factors, memo);
    Term {
        coeff,
        factors: merge_factors(&factors, &[]),
    }
}

fn flatten_product(
    e: &Expr,
    exp: i32,
    coeff: &mut f64,
    factors: &mut Vec<(Expr, i32)>,
    memo: &mut HashMap<usize, Expr>,
) {
    match e.kind() {
        NodeKind::Bin(BinOp::Mul, a, b) => {
            flatten_product(a, exp, coeff, factors, memo);
            flatten_product(b, exp, coeff, factors, memo);
        }
        NodeKind::Bin(BinOp::Div, a, b) => {
            flatten_product(a, exp, coeff, factors, memo);
            flatten_product(b, -exp, coeff, factors, memo);
        }
        NodeKind::Pow(a, k) => flatten_product(a, exp * *k, coeff, factors, memo),
        NodeKind::Unary(UnaryOp::Neg, a) => {
            if exp % 2 != 0 {
                *coeff = -*coeff;
            }
            flatten_product(a, exp, coeff, factors, memo);
        }
        NodeKind::Const(c) => {
            if *c == 0.0 && exp < 0 {
                // keep the division by zero so evaluation reports it
                factors.push((e.clone(), exp));
            } else {
                *coeff *= c.powi(exp);
            }
        }
        _ => {
            let s = simp(e, memo);
            // simplification may expose structure (a constant, a product, a
            // negation); descend into it — strictly smaller than `e`'s tree
            match s.kind() {
                NodeKind::Bin(BinOp::Mul | BinOp::Div, ..)
                | NodeKind::Pow(..)
                | NodeKind::Unary(UnaryOp::Neg, _)
                | NodeKind::Const(_)
                    if s.ptr_key() != e.ptr_key() =>
                {
                    flatten_product(&s, exp, coeff, factors, memo)
                }
                _ => factors.push((s, exp)),
            }
        }
    }
}

fn rebuild_sum(terms: &[Term]) -> Expr {
    let mut acc: Option<Expr> = None;
    for t in terms {
        if t.coeff == 0.0 {
            continue;
        }
        let body = rebuild_term(t.coeff.abs(), &t.factors);
        acc = Some(match acc {
            None => {
                if t.coeff < 0.0 {
                    Expr::neg(body)
                } else {
                    body
                }
            }
            Some(a) => {
                if t.coeff < 0.0 {
                    Expr::sub(a, body)
                } else {
                    Expr::add(a, body)
                }
            }
        });
    }
    acc.unwrap_or_else(|| Expr::constant(0.0))
}

fn rebuild_term(coeff_abs: f64, factors: &[(Expr, i32)]) -> Expr {
    let mut num: Option<Expr> = if coeff_abs != 1.0 || factors.is_empty() {
        Some(Expr::constant(coeff_abs))
    } else {
        None
    };
    let mut den: Option<Expr> = None;
    for (f, k) in factors {
        if *k > 0 {
            let p = Expr::powi(f.clone(), *k);
            num = Some(match num {
                None => p,
                Some(n) => Expr::mul(n, p),
            });
        } else {
            let p = Expr::powi(f.clone(), -*k);
            den = Some(match den {
                None => p,
                Some(d) => Expr::mul(d, p),
            });
        }
    }
    let num = num.unwrap_or_else(|| Expr::constant(1.0));
    match den {
        None => num,
        Some(d) => Expr::div(num, d),
    }
}
