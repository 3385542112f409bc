//! Straight-line evaluation programs ("tapes") compiled from expression
//! graphs. Shared subtrees are computed once per run, which makes the
//! closed-loop simulations orders of magnitude faster than re-walking the
//! symbolic trees at every integrator stage.

use std::collections::HashMap;
use std::sync::Arc;

use super::{
    default_name, newton_solve_numeric, solve_dense, BinOp, Expr, ExprError, NewtonSystem,
    NodeKind, UnaryOp, Valuation,
};
use crate::jets::JetVar;

#[derive(Clone, Copy, Debug)]
enum Instr {
    Const { cell: usize, v: f64 },
    Unary { cell: usize, op: UnaryOp, a: usize },
    Bin { cell: usize, op: BinOp, a: usize, b: usize },
    Powi { cell: usize, a: usize, k: i32 },
    Solve { block: usize },
    Newton { block: usize },
}

#[derive(Debug)]
struct LinBlock {
    dim: usize,
    mat: Vec<usize>,
    rhs: Vec<usize>,
    out: Vec<usize>,
}

#[derive(Debug)]
struct NewtonBlock {
    sys: Arc<NewtonSystem>,
    env: Vec<(JetVar, usize)>,
    out: Vec<usize>,
}

/// Compiled straight-line program for a set of expressions.
#[derive(Debug)]
pub struct Tape {
    instrs: Vec<Instr>,
    n_cells: usize,
    inputs: HashMap<JetVar, usize>,
    outputs: Vec<usize>,
    lin: Vec<LinBlock>,
    newtons: Vec<NewtonBlock>,
}

impl Tape {
    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Variables the tape reads from the outside, with their cell slots.
    pub fn input_vars(&self) -> impl Iterator<Item = JetVar> + '_ {
        self.inputs.keys().copied()
    }

    pub fn input_slot(&self, v: JetVar) -> Option<usize> {
        self.inputs.get(&v).copied()
    }
}

pub struct TapeBuilder {
    instrs: Vec<Instr>,
    n_cells: usize,
    memo: HashMap<usize, usize>,
    var_cells: HashMap<JetVar, usize>,
    inputs: HashMap<JetVar, usize>,
    outputs: Vec<usize>,
    lin: Vec<LinBlock>,
    lin_memo: HashMap<usize, usize>,
    newtons: Vec<NewtonBlock>,
    newton_memo: HashMap<usize, usize>,
    /// Keeps the source graphs alive so pointer-keyed memo entries stay valid.
    retained: Vec<Expr>,
}

impl Default for TapeBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl TapeBuilder {
    pub fn new() -> Self {
        TapeBuilder {
            instrs: Vec::new(),
            n_cells: 0,
            memo: HashMap::new(),
            var_cells: HashMap::new(),
            inputs: HashMap::new(),
            outputs: Vec::new(),
            lin: Vec::new(),
            lin_memo: HashMap::new(),
            newtons: Vec::new(),
            newton_memo: HashMap::new(),
            retained: Vec::new(),
        }
    }

    fn alloc(&mut self) -> usize {
        let c = self.n_cells;
        self.n_cells += 1;
        c
    }

    /// Defines `var` as the value of `e`; later references to `var` read the
    /// computed cell instead of becoming an external input.
    pub fn define(&mut self, var: JetVar, e: &Expr) {
        assert!(
            !self.inputs.contains_key(&var),
            "variable {} already referenced as an external input",
            default_name(var)
        );
        let cell = self.emit(e);
        self.var_cells.insert(var, cell);
    }

    /// Adds `e` as an output; returns the output index.
    pub fn add_output(&mut self, e: &Expr) -> usize {
        let cell = self.emit(e);
        self.outputs.push(cell);
        self.outputs.len() - 1
    }

    pub fn finish(self) -> Tape {
        Tape {
            instrs: self.instrs,
            n_cells: self.n_cells,
            inputs: self.inputs,
            outputs: self.outputs,
            lin: self.lin,
            newtons: self.newtons,
        }
    }

    fn emit(&mut self, e: &Expr) -> usize {
        self.retained.push(e.clone());
        self.emit_inner(e)
    }

    fn emit_inner(&mut self, e: &Expr) -> usize {
        if let Some(&c) = self.memo.get(&e.ptr_key()) {
            return c;
        }
        let cell = match e.kind() {
            NodeKind::Const(v) => {
                let c = self.alloc();
                self.instrs.push(Instr::Const { cell: c, v: *v });
                c
            }
            NodeKind::Var(v) => {
                if let Some(&c) = self.var_cells.get(v) {
                    c
                } else if let Some(&c) = self.inputs.get(v) {
                    c
                } else {
                    let c = self.alloc();
                    self.inputs.insert(*v, c);
                    c
                }
            }
            NodeKind::Unary(op, a) => {
                let a = self.emit_inner(a);
                let c = self.alloc();
                self.instrs.push(Instr::Unary { cell: c, op: *op, a });
                c
            }
            NodeKind::Bin(op, a, b) => {
                let a = self.emit_inner(a);
                let b = self.emit_inner(b);
                let c = self.alloc();
                self.instrs.push(Instr::Bin { cell: c, op: *op, a, b });
                c
            }
            NodeKind::Pow(a, k) => {
                let a = self.emit_inner(a);
                let c = self.alloc();
                self.instrs.push(Instr::Powi { cell: c, a, k: *k });
                c
            }
            NodeKind::LinSolve(sys, comp) => {
                let key = Arc::as_ptr(sys) as usize;
                let block = if let Some(&b) = self.lin_memo.get(&key) {
                    b
                } else {
                    let dim = sys.dim();
                    let mut mat = Vec::with_capacity(dim * dim);
                    for row in &sys.mat {
                        for x in row {
                            mat.push(self.emit_inner(x));
                        }
                    }
                    let mut rhs = Vec::with_capacity(dim);
                    for x in &sys.rhs {
                        rhs.push(self.emit_inner(x));
                    }
                    let out: Vec<usize> = (0..dim).map(|_| self.alloc()).collect();
                    let b = self.lin.len();
                    self.lin.push(LinBlock { dim, mat, rhs, out });
                    self.instrs.push(Instr::Solve { block: b });
                    self.lin_memo.insert(key, b);
                    b
                };
                self.lin[block].out[*comp]
            }
            NodeKind::Newton(sys, comp) => {
                let key = Arc::as_ptr(sys) as usize;
                let block = if let Some(&b) = self.newton_memo.get(&key) {
                    b
                } else {
                    // resolve the environment the residuals read; the solve
                    // itself runs interpretively inside the executor
                    let mut env = Vec::new();
                    let fv: Vec<JetVar> = Expr::newton_solve(sys.clone(), 0).free_vars();
                    for v in fv {
                        let c = self.emit_inner(&Expr::var(v));
                        env.push((v, c));
                    }
                    let out: Vec<usize> = (0..sys.unknowns.len()).map(|_| self.alloc()).collect();
                    let b = self.newtons.len();
                    self.newtons.push(NewtonBlock {
                        sys: sys.clone(),
                        env,
                        out,
                    });
                    self.instrs.push(Instr::Newton { block: b });
                    self.newton_memo.insert(key, b);
                    b
                };
                self.newtons[block].out[*comp]
            }
        };
        self.memo.insert(e.ptr_key(), cell);
        cell
    }
}

/// Mutable run state for a [`Tape`]; reusable across runs (Newton solves warm
/// start from the previous run's solutions).
pub struct TapeExec {
    cells: Vec<f64>,
    newton_state: Vec<Option<Vec<f64>>>,
}

impl TapeExec {
    pub fn new(tape: &Tape) -> Self {
        TapeExec {
            cells: vec![0.0; tape.n_cells],
            newton_state: vec![None; tape.newtons.len()],
        }
    }

    pub fn set_input(&mut self, tape: &Tape, var: JetVar, value: f64) {
        if let Some(slot) = tape.input_slot(var) {
            self.cells[slot] = value;
        }
    }

    pub fn output(&self, tape: &Tape, idx: usize) -> f64 {
        self.cells[tape.outputs[idx]]
    }

    pub fn run(&mut self, tape: &Tape) -> Result<(), ExprError> {
        for instr in &tape.instrs {
            match *instr {
                Instr::Const { cell, v } => self.cells[cell] = v,
                Instr::Unary { cell, op, a } => {
                    let x = self.cells[a];
                    match op {
                        UnaryOp::Log if x <= 0.0 => {
                            return Err(ExprError::Domain {
                                op: "log",
                                value: x,
                                context: "compiled program".to_string(),
                            })
                        }
                        UnaryOp::Sqrt if x < 0.0 => {
                            return Err(ExprError::Domain {
                                op: "sqrt",
                                value: x,
                                context: "compiled program".to_string(),
                            })
                        }
                        _ => {}
                    }
                    self.cells[cell] = op.apply(x);
                }
                Instr::Bin { cell, op, a, b } => {
                    let x = self.cells[a];
                    let y = self.cells[b];
                    self.cells[cell] = match op {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                        BinOp::Div => {
                            if y == 0.0 {
                                return Err(ExprError::Domain {
                                    op: "division by zero",
                                    value: y,
                                    context: "compiled program".to_string(),
                                });
                            }
                            x / y
                        }
                    };
                }
                Instr::Powi { cell, a, k } => self.cells[cell] = self.cells[a].powi(k),
                Instr::Solve { block } => {
                    let blk = &tape.lin[block];
                    let mat: Vec<f64> = blk.mat.iter().map(|&c| self.cells[c]).collect();
                    let rhs: Vec<f64> = blk.rhs.iter().map(|&c| self.cells[c]).collect();
                    let sol = solve_dense(&mat, &rhs, blk.dim, "compiled linear-solve block")?;
                    for (o, v) in blk.out.iter().zip(sol) {
                        self.cells[*o] = v;
                    }
                }
                Instr::Newton { block } => {
                    let blk = &tape.newtons[block];
                    let env = Valuation::from_pairs(
                        blk.env.iter().map(|&(v, c)| (v, self.cells[c])),
                    );
                    let start = self.newton_state[block]
                        .clone()
                        .unwrap_or_else(|| vec![0.0; blk.sys.unknowns.len()]);
                    let sol = newton_solve_numeric(&blk.sys, &env, &start)?;
                    self.newton_state[block] = Some(sol.clone());
                    for (o, v) in blk.out.iter().zip(sol) {
                        self.cells[*o] = v;
                    }
                }
            }
        }
        Ok(())
    }
}
