//! Precedence-aware infix printing. Parentheses are inserted exactly where
//! needed so that re-parsing the output reproduces the original tree.

use super::{BinOp, Expr, NodeKind, UnaryOp};
use crate::jets::JetVar;

/// Precedence levels: sums 1, products 2, unary minus 3, power 4, atoms 5.
fn prec(e: &Expr) -> u8 {
    match e.kind() {
        NodeKind::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        NodeKind::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        NodeKind::Unary(UnaryOp::Neg, _) => 3,
        NodeKind::Const(c) if *c < 0.0 => 3, // prints with a leading minus
        NodeKind::Pow(..) => 4,
        _ => 5,
    }
}

pub fn print(e: &Expr, namer: &dyn Fn(JetVar) -> String) -> String {
    let mut out = String::new();
    write_expr(e, 0, namer, &mut out);
    out
}

fn write_child(e: &Expr, min_prec: u8, namer: &dyn Fn(JetVar) -> String, out: &mut String) {
    if prec(e) < min_prec {
        out.push('(');
        write_expr(e, 0, namer, out);
        out.push(')');
    } else {
        write_expr(e, 0, namer, out);
    }
}

fn write_expr(e: &Expr, _min: u8, namer: &dyn Fn(JetVar) -> String, out: &mut String) {
    match e.kind() {
        NodeKind::Const(c) => {
            // `{}` on f64 produces the shortest decimal that round-trips
            out.push_str(&format!("{}", c));
        }
        NodeKind::Var(v) => out.push_str(&namer(*v)),
        NodeKind::Unary(UnaryOp::Neg, a) => {
            out.push('-');
            write_child(a, 3, namer, out);
        }
        NodeKind::Unary(op, a) => {
            out.push_str(op.name());
            out.push('(');
            write_expr(a, 0, namer, out);
            out.push(')');
        }
        NodeKind::Bin(op, a, b) => {
            let (lvl, sym) = match op {
                BinOp::Add => (1, " + "),
                BinOp::Sub => (1, " - "),
                BinOp::Mul => (2, "*"),
                BinOp::Div => (2, "/"),
            };
            // left-associative: the right operand must bind strictly tighter
            write_child(a, lvl, namer, out);
            out.push_str(sym);
            write_child(b, lvl + 1, namer, out);
        }
        NodeKind::Pow(a, k) => {
            write_child(a, 5, namer, out);
            out.push('^');
            if *k < 0 {
                out.push_str(&format!("({})", k));
            } else {
                out.push_str(&format!("{}", k));
            }
        }
        NodeKind::LinSolve(sys, comp) => {
            // implicit nodes are not part of the textual grammar; shown as a
            // function of their free variables
            out.push_str(&format!("linsolve{}[{}x{}](", comp + 1, sys.dim(), sys.dim()));
            let fv = e.free_vars();
            for (i, v) in fv.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&namer(*v));
            }
            out.push(')');
        }
        NodeKind::Newton(sys, comp) => {
            out.push_str(&format!("newton{}[{}](", comp + 1, sys.unknowns.len()));
            let fv = e.free_vars();
            for (i, v) in fv.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&namer(*v));
            }
            out.push(')');
        }
    }
}
