//! Fixed-step simulation of the closed loop, trace capture, and the numeric
//! verification utilities: finite-difference input-output checks and the
//! analytic linear error-ODE comparison.
//!
//! The control law and the dynamics are compiled to straight-line tapes once
//! per simulation; the integrator queries the control tape at every stage
//! point (t, t+dt/2, t+dt), so the recorded behavior is the genuine
//! closed-loop flow of ẋ = f(x, α(x, y^d(t))).

use thiserror::Error;

use crate::expr::{Expr, ExprError, TapeBuilder, Tape, TapeExec, Valuation};
use crate::flatsys::FlatSystemDef;
use crate::jets::{JetVar, MultiIndex};
use crate::kappa::StagePlan;
use crate::track::{reference_eval, ReferenceSignal, TrackError, TrackingLaw};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("singularity at t = {t:.6}: {detail}")]
    Singular { t: f64, detail: String },
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Rk4,
    Euler,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub x0: Vec<f64>,
}

impl SimConfig {
    pub fn new(t_end: f64, dt: f64, x0: Vec<f64>) -> SimConfig {
        SimConfig {
            t_end,
            dt,
            integrator: Integrator::Rk4,
            x0,
        }
    }

    fn validate(&self, n: usize) -> Result<usize, SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::Config(format!("dt = {} must be > 0", self.dt)));
        }
        if self.t_end < self.dt {
            return Err(SimError::Config(format!(
                "t_end = {} must be ≥ dt = {}",
                self.t_end, self.dt
            )));
        }
        if self.x0.len() != n {
            return Err(SimError::Config(format!(
                "initial state has {} components, the system {}",
                self.x0.len(),
                n
            )));
        }
        Ok((self.t_end / self.dt).round() as usize)
    }
}

/// Recorded closed-loop trajectory. All per-step columns are sampled at the
/// integrator grid points; `y` is re-evaluated from (x, u) at every step,
/// never integrated separately.
#[derive(Clone, Debug)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub yd: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    /// New-input jets per step, columns parallel to `v_layout`.
    pub vjets: Vec<Vec<f64>>,
    pub v_layout: Vec<JetVar>,
    pub events: Vec<String>,
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

impl SimTrace {
    /// CSV with header `t,x1..xn,u1..um,y1..ym,yd1..ydm,e1..em`, 17
    /// significant digits, LF line endings.
    pub fn to_csv(&self) -> String {
        let n = self.x.first().map_or(0, |r| r.len());
        let m = self.u.first().map_or(0, |r| r.len());
        let p = self.y.first().map_or(0, |r| r.len());
        let mut out = String::new();
        out.push('t');
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            out.push_str(&format!(",u{i}"));
        }
        for i in 1..=p {
            out.push_str(&format!(",y{i}"));
        }
        for i in 1..=p {
            out.push_str(&format!(",yd{i}"));
        }
        for i in 1..=p {
            out.push_str(&format!(",e{i}"));
        }
        out.push('\n');
        for k in 0..self.times.len() {
            out.push_str(&fmt17(self.times[k]));
            for row in [&self.x[k], &self.u[k], &self.y[k], &self.yd[k], &self.e[k]] {
                for &v in row.iter() {
                    out.push(',');
                    out.push_str(&fmt17(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn max_abs_error(&self) -> f64 {
        self.e
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_error_output(&self, j: usize) -> f64 {
        self.e.iter().fold(0.0f64, |m, row| m.max(row[j].abs()))
    }
}

// ---- generic fixed-step integration -----------------------------------

/// One classical RK4 step of ẋ = f(t, x).
pub fn rk4_step<F>(f: &mut F, t: f64, dt: f64, x: &[f64]) -> Result<Vec<f64>, SimError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SimError>,
{
    let k1 = f(t, x)?;
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k2 = f(t + 0.5 * dt, &x2)?;
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k3 = f(t + 0.5 * dt, &x3)?;
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
    let k4 = f(t + dt, &x4)?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, a)| a + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// One explicit Euler step.
pub fn euler_step<F>(f: &mut F, t: f64, dt: f64, x: &[f64]) -> Result<Vec<f64>, SimError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SimError>,
{
    let k = f(t, x)?;
    Ok(x.iter().zip(&k).map(|(a, k)| a + dt * k).collect())
}

/// Measures the RK4 convergence order on ẋ = x, x(0) = 1 over [0, 1]: the
/// ratio of the endpoint errors at dt and dt/2 (≈ 16 for a 4th-order method).
pub fn rk4_order_ratio() -> f64 {
    let run = |dt: f64| -> f64 {
        let steps = (1.0 / dt).round() as usize;
        let mut x = vec![1.0];
        let mut f = |_t: f64, x: &[f64]| -> Result<Vec<f64>, SimError> { Ok(vec![x[0]]) };
        for k in 0..steps {
            x = rk4_step(&mut f, k as f64 * dt, dt, &x).expect("exponential test cannot fail");
        }
        (x[0] - std::f64::consts::E).abs()
    };
    run(0.1) / run(0.05)
}

// ---- compiled closed loop ---------------------------------------------

/// Compiled control + dynamics tapes for one system/law pair.
pub struct ClosedLoop {
    control: Tape,
    control_exec: TapeExec,
    dynamics: Tape,
    dynamics_exec: TapeExec,
    refs: Vec<ReferenceSignal>,
    r: MultiIndex,
    n: usize,
    m: usize,
    p: usize,
    /// Output indices on the control tape: u's, then v-jets, then y's.
    v_layout: Vec<JetVar>,
}

impl ClosedLoop {
    /// Compiles the triangular tracking program and the dynamics. The control
    /// tape's external inputs are exactly the state variables and reference
    /// jets; the v-equations and per-stage input solutions become internal
    /// definitions, so no symbolic composition (and no expression blowup)
    /// happens here.
    pub fn new(
        sys: &FlatSystemDef,
        _plan: &StagePlan,
        law: &TrackingLaw,
        refs: Vec<ReferenceSignal>,
    ) -> Result<ClosedLoop, SimError> {
        let n = sys.n_states();
        let m = sys.n_inputs();
        let p = sys.n_outputs();
        if refs.len() != p {
            return Err(SimError::Config(format!(
                "{} reference signals for {} outputs",
                refs.len(),
                p
            )));
        }

        let mut cb = TapeBuilder::new();
        for eq in &law.equations {
            cb.define(eq.var, &eq.rhs);
        }
        for (uv, expr) in &law.input_defs {
            cb.define(*uv, expr);
        }
        for j in 0..m {
            cb.add_output(&Expr::var(JetVar::input(j)));
        }
        let v_layout: Vec<JetVar> = law.equations.iter().map(|eq| eq.var).collect();
        for v in &v_layout {
            cb.add_output(&Expr::var(*v));
        }
        for phi in &sys.outputs {
            cb.add_output(phi);
        }
        let control = cb.finish();

        let mut db = TapeBuilder::new();
        for rhs in &sys.dynamics.rhs {
            db.add_output(rhs);
        }
        let dynamics = db.finish();

        Ok(ClosedLoop {
            control_exec: TapeExec::new(&control),
            control,
            dynamics_exec: TapeExec::new(&dynamics),
            dynamics,
            refs,
            r: law.r.clone(),
            n,
            m,
            p,
            v_layout,
        })
    }

    /// Runs the control tape at (t, x); outputs stay readable until the next
    /// run.
    fn run_control(&mut self, t: f64, x: &[f64]) -> Result<(), SimError> {
        for (i, &xi) in x.iter().enumerate() {
            self.control_exec
                .set_input(&self.control, JetVar::state(i), xi);
        }
        for (j, sig) in self.refs.iter().enumerate() {
            for order in 0..=self.r.0[j] {
                let v = reference_eval(sig, t, order)?;
                self.control_exec
                    .set_input(&self.control, JetVar::reference(j).shifted(order), v);
            }
        }
        self.control_exec
            .run(&self.control)
            .map_err(|e| SimError::Singular {
                t,
                detail: e.to_string(),
            })
    }

    fn u_values(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| self.control_exec.output(&self.control, i))
            .collect()
    }

    fn v_values(&self) -> Vec<f64> {
        (0..self.v_layout.len())
            .map(|i| self.control_exec.output(&self.control, self.m + i))
            .collect()
    }

    fn y_values(&self) -> Vec<f64> {
        (0..self.p)
            .map(|i| {
                self.control_exec
                    .output(&self.control, self.m + self.v_layout.len() + i)
            })
            .collect()
    }

    fn xdot(&mut self, t: f64, x: &[f64]) -> Result<Vec<f64>, SimError> {
        self.run_control(t, x)?;
        let u = self.u_values();
        for (i, &xi) in x.iter().enumerate() {
            self.dynamics_exec
                .set_input(&self.dynamics, JetVar::state(i), xi);
        }
        for (j, &uj) in u.iter().enumerate() {
            self.dynamics_exec
                .set_input(&self.dynamics, JetVar::input(j), uj);
        }
        self.dynamics_exec
            .run(&self.dynamics)
            .map_err(|e| SimError::Singular {
                t,
                detail: e.to_string(),
            })?;
        Ok((0..self.n)
            .map(|i| self.dynamics_exec.output(&self.dynamics, i))
            .collect())
    }

    /// Simulates the closed loop and records the trace.
    pub fn simulate(&mut self, cfg: &SimConfig) -> Result<SimTrace, SimError> {
        let steps = cfg.validate(self.n)?;
        let mut trace = SimTrace {
            times: Vec::with_capacity(steps + 1),
            x: Vec::with_capacity(steps + 1),
            u: Vec::with_capacity(steps + 1),
            y: Vec::with_capacity(steps + 1),
            yd: Vec::with_capacity(steps + 1),
            e: Vec::with_capacity(steps + 1),
            vjets: Vec::with_capacity(steps + 1),
            v_layout: self.v_layout.clone(),
            events: Vec::new(),
        };
        let mut x = cfg.x0.clone();
        for k in 0..=steps {
            let t = k as f64 * cfg.dt;
            self.run_control(t, &x)?;
            let u = self.u_values();
            let y = self.y_values();
            let v = self.v_values();
            let yd: Vec<f64> = self
                .refs
                .iter()
                .map(|sig| reference_eval(sig, t, 0))
                .collect::<Result<_, _>>()?;
            let e: Vec<f64> = y.iter().zip(&yd).map(|(a, b)| a - b).collect();
            trace.times.push(t);
            trace.x.push(x.clone());
            trace.u.push(u);
            trace.y.push(y);
            trace.yd.push(yd);
            trace.e.push(e);
            trace.vjets.push(v);
            if k < steps {
                let mut f = |tt: f64, xx: &[f64]| self.xdot(tt, xx);
                x = match cfg.integrator {
                    Integrator::Rk4 => rk4_step(&mut f, t, cfg.dt, &x)?,
                    Integrator::Euler => euler_step(&mut f, t, cfg.dt, &x)?,
                };
            }
        }
        Ok(trace)
    }
}

/// Open-loop trajectory under an externally supplied input signal.
#[derive(Clone, Debug)]
pub struct OpenTrace {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// Integrates ẋ = f(x, u(t)) with a caller-provided input signal.
pub fn simulate_open_loop<U>(
    sys: &FlatSystemDef,
    mut u_of_t: U,
    cfg: &SimConfig,
) -> Result<OpenTrace, SimError>
where
    U: FnMut(f64) -> Vec<f64>,
{
    let n = sys.n_states();
    let _ = sys.n_inputs();
    let steps = cfg.validate(n)?;

    let mut db = TapeBuilder::new();
    for rhs in &sys.dynamics.rhs {
        db.add_output(rhs);
    }
    for phi in &sys.outputs {
        db.add_output(phi);
    }
    let tape = db.finish();
    let mut exec = TapeExec::new(&tape);

    let run = |t: f64, x: &[f64], u: &[f64], exec: &mut TapeExec| -> Result<(), SimError> {
        for (i, &xi) in x.iter().enumerate() {
            exec.set_input(&tape, JetVar::state(i), xi);
        }
        for (j, &uj) in u.iter().enumerate() {
            exec.set_input(&tape, JetVar::input(j), uj);
        }
        exec.run(&tape).map_err(|e| SimError::Singular {
            t,
            detail: e.to_string(),
        })
    };

    let mut trace = OpenTrace {
        times: Vec::new(),
        x: Vec::new(),
        u: Vec::new(),
        y: Vec::new(),
    };
    let mut x = cfg.x0.clone();
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let u = u_of_t(t);
        run(t, &x, &u, &mut exec)?;
        trace.times.push(t);
        trace.x.push(x.clone());
        trace.u.push(u.clone());
        trace.y.push((0..sys.n_outputs()).map(|i| exec.output(&tape, n + i)).collect());
        if k < steps {
            let mut f = |tt: f64, xx: &[f64]| -> Result<Vec<f64>, SimError> {
                let uu = u_of_t(tt);
                run(tt, xx, &uu, &mut exec)?;
                Ok((0..n).map(|i| exec.output(&tape, i)).collect())
            };
            x = match cfg.integrator {
                Integrator::Rk4 => rk4_step(&mut f, t, cfg.dt, &x)?,
                Integrator::Euler => euler_step(&mut f, t, cfg.dt, &x)?,
            };
        }
    }
    Ok(trace)
}

// ---- input-output behavior check --------------------------------------

/// Central finite-difference stencil (order 2) for the κ-th derivative, as
/// a convolution of κ/2 second-difference and κ%2 first-difference kernels.
/// Returned as (coefficients, half-width); divide by h^κ after applying.
pub fn central_stencil(kappa: usize) -> (Vec<f64>, usize) {
    let mut s = vec![1.0];
    let convolve = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    };
    for _ in 0..kappa / 2 {
        s = convolve(&s, &[1.0, -2.0, 1.0]);
    }
    if kappa % 2 == 1 {
        s = convolve(&s, &[-0.5, 0.0, 0.5]);
    }
    let half = (s.len() - 1) / 2;
    (s, half)
}

/// Sample spacing used for the κ-th-derivative check: higher orders need a
/// wider step so that floating-point noise amplified by h^{-κ} stays below
/// the truncation error of the stencil.
pub fn fd_stride(kappa: usize, dt: f64) -> usize {
    let target_h = match kappa {
        0..=2 => dt,
        3 => 4e-4,
        4 => 8e-4,
        _ => 1.6e-3,
    };
    ((target_h / dt).round() as usize).max(1)
}

#[derive(Clone, Debug)]
pub struct IoReport {
    /// Max |FD(y^j, κ_j) − v^j| per output.
    pub per_output: Vec<f64>,
    pub max_deviation: f64,
    pub strides: Vec<usize>,
}

/// Compares the κ^j-th finite-difference derivative of each recorded output
/// with the recorded new input v^j (Corollary: y_[κ] = v in closed loop).
pub fn io_behavior_check(trace: &SimTrace, plan: &StagePlan, dt: f64) -> IoReport {
    let p = plan.outputs.len();
    let mut per_output = vec![0.0f64; p];
    let mut strides = vec![1usize; p];
    for (j, info) in plan.outputs.iter().enumerate() {
        let kappa = info.kappa;
        let v_var = JetVar::new_input(info.stage, info.comp);
        let v_col = trace
            .v_layout
            .iter()
            .position(|&v| v == v_var)
            .expect("v_[0] is always recorded");
        let (stencil, half) = central_stencil(kappa);
        let stride = fd_stride(kappa, dt);
        strides[j] = stride;
        let h = stride as f64 * dt;
        let len = trace.times.len();
        if len <= 2 * half * stride {
            continue;
        }
        for k in half * stride..len - half * stride {
            let mut acc = 0.0;
            for (s, &c) in stencil.iter().enumerate() {
                let idx = k + s * stride - half * stride;
                acc += c * trace.y[idx][j];
            }
            let fd = acc / h.powi(kappa as i32);
            let dev = (fd - trace.vjets[k][v_col]).abs();
            if dev > per_output[j] {
                per_output[j] = dev;
            }
        }
    }
    let max_deviation = per_output.iter().fold(0.0f64, |m, &v| m.max(v));
    IoReport {
        per_output,
        max_deviation,
        strides,
    }
}

// ---- analytic error-ODE comparison ------------------------------------

/// Matrix exponential by scaling-and-squaring with a Taylor series; the
/// matrices here are tiny companion blocks, so this is both fast and
/// accurate.
pub fn expm(a: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let norm = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())) * a.nrows() as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let b = a / 2f64.powi(s as i32);
    let dim = a.nrows();
    let mut term = nalgebra::DMatrix::<f64>::identity(dim, dim);
    let mut acc = term.clone();
    for k in 1..=16 {
        term = (&term * &b) / k as f64;
        acc += &term;
    }
    for _ in 0..s {
        acc = &acc * &acc;
    }
    acc
}

#[derive(Clone, Debug)]
pub struct ErrorOdeReport {
    /// Max |e^j_measured(t) − e^j_model(t)| per output.
    pub per_output: Vec<f64>,
    pub max_deviation: f64,
    /// Initial error jets e^j_[0..κ_j−1](0) used by the model.
    pub initial_jets: Vec<Vec<f64>>,
}

/// Compares each measured tracking error e^j(t) = y^j − y^{j,d} against the
/// analytic solution of its imposed linear ODE
/// `e^{(κ)} + Σ a_β e^{(β)} = 0`, with initial conditions computed from the
/// stage chain expressions at x(0) and the resolved v-jets at t = 0.
pub fn error_ode_check(
    trace: &SimTrace,
    plan: &StagePlan,
    law: &TrackingLaw,
    refs: &[ReferenceSignal],
) -> Result<ErrorOdeReport, SimError> {
    let p = plan.outputs.len();
    let dt = trace.times.get(1).copied().unwrap_or(0.0) - trace.times[0];

    // valuation at t = 0: state, v-jets, reference jets
    let mut point = Valuation::new();
    for (i, &xi) in trace.x[0].iter().enumerate() {
        point.set(JetVar::state(i), xi);
    }
    for (col, &v) in trace.v_layout.iter().enumerate() {
        point.set(v, trace.vjets[0][col]);
    }
    crate::track::set_reference_jets(refs, &law.r, 0.0, &mut point)?;

    let mut per_output = vec![0.0f64; p];
    let mut initial_jets = Vec::with_capacity(p);
    for (j, info) in plan.outputs.iter().enumerate() {
        let kappa = info.kappa;
        let a = &law.gains.coeffs[j];
        // e_[β](0) = chain[β](x(0), v(0)) − y^d_[β](0)
        let mut e0 = nalgebra::DVector::zeros(kappa);
        for beta in 0..kappa {
            let y_beta = info.chain[beta].evaluate(&point)?;
            let yd_beta = reference_eval(&refs[j], 0.0, beta)?;
            e0[beta] = y_beta - yd_beta;
        }
        initial_jets.push(e0.iter().copied().collect());

        // companion matrix of e^{(κ)} = −Σ a_β e^{(β)}
        let mut comp = nalgebra::DMatrix::zeros(kappa, kappa);
        for i in 0..kappa - 1 {
            comp[(i, i + 1)] = 1.0;
        }
        for (beta, &ab) in a.iter().enumerate() {
            comp[(kappa - 1, beta)] = -ab;
        }
        let step = expm(&(comp * dt));

        let mut state = e0;
        for k in 0..trace.times.len() {
            let dev = (state[0] - trace.e[k][j]).abs();
            if dev > per_output[j] {
                per_output[j] = dev;
            }
            state = &step * state;
        }
    }
    let max_deviation = per_output.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(ErrorOdeReport {
        per_output,
        max_deviation,
        initial_jets,
    })
}
