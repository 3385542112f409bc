//! Integration, trace capture, and the numeric closed-loop verification
//! utilities.

use flatctl::expr::Valuation;
use flatctl::flatsys::{builtin_academic, builtin_crane, CraneParams, FlatSystemDef};
use flatctl::jets::JetVar;
use flatctl::kappa::{run_procedure, StagePlan};
use flatctl::sim::{
    central_stencil, error_ode_check, euler_step, expm, fd_stride, io_behavior_check, rk4_order_ratio,
    rk4_step, ClosedLoop, SimConfig, SimError, SimTrace,
};
use flatctl::track::{build_tracking_law, GainSet, ReferenceSignal, TrackingLaw};

// ---- single steps ------------------------------------------------------

#[test]
fn rk4_step_examples() {
    // ẋ = 0 keeps the state
    let mut zero = |_t: f64, _x: &[f64]| Ok::<_, SimError>(vec![0.0]);
    let next = rk4_step(&mut zero, 0.0, 0.1, &[1.25]).unwrap();
    assert_eq!(next[0], 1.25);

    // ẋ = 1 advances by exactly dt
    let mut one = |_t: f64, _x: &[f64]| Ok::<_, SimError>(vec![1.0]);
    let next = rk4_step(&mut one, 0.0, 0.1, &[2.0]).unwrap();
    assert!((next[0] - 2.1).abs() <= 1e-15);

    // ẋ = x reproduces e^0.1 up to the O(dt⁵) local truncation error
    let mut exp = |_t: f64, x: &[f64]| Ok::<_, SimError>(vec![x[0]]);
    let next = rk4_step(&mut exp, 0.0, 0.1, &[1.0]).unwrap();
    assert!((next[0] - 0.1f64.exp()).abs() <= 1e-7);
    assert!((next[0] - 0.1f64.exp()).abs() > 1e-10, "error should be O(dt^5), not zero");
}

#[test]
fn euler_step_is_first_order() {
    let mut exp = |_t: f64, x: &[f64]| Ok::<_, SimError>(vec![x[0]]);
    let next = euler_step(&mut exp, 0.0, 0.1, &[1.0]).unwrap();
    assert!((next[0] - 1.1).abs() <= 1e-15);
}

#[test]
fn rk4_measured_convergence_order() {
    let ratio = rk4_order_ratio();
    assert!(
        (12.0..=20.0).contains(&ratio),
        "halving dt changed the error by {ratio}, expected ≈ 16"
    );
}

#[test]
fn expm_matches_closed_forms() {
    // 1×1: e^a
    let a = nalgebra::DMatrix::from_row_slice(1, 1, &[0.7]);
    assert!((expm(&a)[(0, 0)] - 0.7f64.exp()).abs() <= 1e-12);
    // rotation generator: exp([[0,-θ],[θ,0]]) = [[cos,−sin],[sin,cos]]
    let th = 1.2f64;
    let g = nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, -th, th, 0.0]);
    let r = expm(&g);
    assert!((r[(0, 0)] - th.cos()).abs() <= 1e-12);
    assert!((r[(1, 0)] - th.sin()).abs() <= 1e-12);
}

// ---- configuration validation ------------------------------------------

fn academic_setup() -> (FlatSystemDef, StagePlan, TrackingLaw) {
    let sys = builtin_academic();
    let plan = run_procedure(&sys, 7).unwrap();
    let gains = GainSet::default_for(&plan.kappa);
    let law = build_tracking_law(&plan, &sys, &gains).unwrap();
    (sys, plan, law)
}

/// Gentle point-to-point references that keep the academic system far from
/// the stage-3 feedback singularity.
fn academic_refs() -> Vec<ReferenceSignal> {
    vec![
        ReferenceSignal::smoothstep(0.0, 0.1, 0.2, 1.8, 6),
        ReferenceSignal::smoothstep(0.0, 0.08, 0.2, 1.8, 6),
        ReferenceSignal::smoothstep(0.0, 0.05, 0.2, 1.8, 6),
        ReferenceSignal::smoothstep(0.0, 1e-3, 0.1, 1.9, 6),
    ]
}

#[test]
fn sim_config_validation() {
    let (sys, plan, law) = academic_setup();
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, academic_refs()).unwrap();

    for bad in [
        SimConfig::new(1.0, 0.0, vec![0.0; 10]),
        SimConfig::new(1.0, -0.1, vec![0.0; 10]),
        SimConfig::new(0.001, 0.01, vec![0.0; 10]),
        SimConfig::new(1.0, 0.01, vec![0.0; 9]),
    ] {
        assert!(matches!(
            loop_.simulate(&bad),
            Err(SimError::Config(_))
        ));
    }
}

#[test]
fn closed_loop_rejects_wrong_reference_count() {
    let (sys, plan, law) = academic_setup();
    let refs = vec![ReferenceSignal::constant(0.0); 3];
    assert!(matches!(
        ClosedLoop::new(&sys, &plan, &law, refs),
        Err(SimError::Config(_))
    ));
}

// ---- finite-difference stencils ----------------------------------------

#[test]
fn central_stencils_are_exact_on_polynomials() {
    // the order-2 central stencil for the κ-th derivative reproduces the
    // κ-th derivative of t^κ (a constant, κ!) exactly
    for kappa in 1..=5usize {
        let (s, half) = central_stencil(kappa);
        assert_eq!(s.len(), 2 * half + 1);
        let h = 0.1f64;
        let t0 = 0.7f64;
        let mut acc = 0.0;
        for (i, &cij) in s.iter().enumerate() {
            let t = t0 + (i as f64 - half as f64) * h;
            acc += cij * t.powi(kappa as i32);
        }
        let fact: f64 = (1..=kappa).product::<usize>() as f64;
        assert!(
            (acc / h.powi(kappa as i32) - fact).abs() <= 1e-8,
            "κ = {kappa}"
        );
    }
    // first and second derivative kernels are the textbook ones
    assert_eq!(central_stencil(1).0, vec![-0.5, 0.0, 0.5]);
    assert_eq!(central_stencil(2).0, vec![1.0, -2.0, 1.0]);
}

#[test]
fn fd_stride_widens_with_derivative_order() {
    let dt = 1e-4;
    assert_eq!(fd_stride(1, dt), 1);
    assert_eq!(fd_stride(2, dt), 1);
    assert!(fd_stride(3, dt) >= fd_stride(2, dt));
    assert!(fd_stride(5, dt) >= fd_stride(4, dt));
    assert!(fd_stride(5, 1e-2) >= 1);
}

// ---- trace capture -----------------------------------------------------

fn short_academic_trace() -> (FlatSystemDef, StagePlan, TrackingLaw, SimTrace) {
    let (sys, plan, law) = academic_setup();
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, academic_refs()).unwrap();
    let cfg = SimConfig::new(0.05, 1e-3, vec![0.0; 10]);
    let trace = loop_.simulate(&cfg).unwrap();
    (sys, plan, law, trace)
}

#[test]
fn csv_trace_format() {
    let (_sys, _plan, _law, trace) = short_academic_trace();
    let csv = trace.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,x1,x2,x3,x4,x5,x6,x7,x8,x9,x10,u1,u2,u3,u4,y1,y2,y3,y4,yd1,yd2,yd3,yd4,e1,e2,e3,e4"
    );
    assert!(!csv.contains('\r'), "LF line endings only");
    let cols = 1 + 10 + 4 + 4 + 4 + 4;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), cols);
        for f in fields {
            // 17 significant digits in scientific notation
            let (mantissa, _exp) = f.split_once('e').expect("scientific notation");
            let digits = mantissa
                .chars()
                .filter(|c| c.is_ascii_digit())
                .count();
            assert_eq!(digits, 17, "field `{f}`");
            f.parse::<f64>().unwrap();
        }
    }
    assert_eq!(csv.lines().count(), 1 + 51);
}

#[test]
fn trace_outputs_are_reevaluated_from_state_and_input() {
    let (sys, _plan, _law, trace) = short_academic_trace();
    for k in 0..trace.times.len() {
        let mut p = Valuation::new();
        for (i, &xi) in trace.x[k].iter().enumerate() {
            p.set(JetVar::state(i), xi);
        }
        for (j, &uj) in trace.u[k].iter().enumerate() {
            p.set(JetVar::input(j), uj);
        }
        let y = sys.output_values(&p).unwrap();
        for (j, &yj) in y.iter().enumerate() {
            assert!(
                (yj - trace.y[k][j]).abs() <= 1e-14,
                "y{} at step {k} is not φ(x, u)",
                j + 1
            );
        }
    }
}

// ---- closed-loop behavior ----------------------------------------------

#[test]
fn academic_exact_start_tracks_exactly() {
    let (sys, plan, law) = academic_setup();
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, academic_refs()).unwrap();
    let cfg = SimConfig::new(2.0, 1e-4, vec![0.0; 10]);
    let trace = loop_.simulate(&cfg).unwrap();
    assert!(
        trace.max_abs_error() <= 1e-6,
        "max |e| = {} on a consistent start",
        trace.max_abs_error()
    );
}

#[test]
fn first_error_channel_decays_like_a_first_order_lag() {
    // κ¹ = 1, poles at −2: perturbing x¹ by 0.1 gives e¹(t) = 0.1·e^{−2t}
    let (sys, plan, law) = academic_setup();
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, academic_refs()).unwrap();
    let mut x0 = vec![0.0; 10];
    x0[0] = 0.1;
    let cfg = SimConfig::new(2.0, 1e-4, x0);
    let trace = loop_.simulate(&cfg).unwrap();
    let mut worst = 0.0f64;
    for (k, &t) in trace.times.iter().enumerate() {
        let model = 0.1 * (-2.0 * t).exp();
        worst = worst.max((trace.e[k][0] - model).abs());
    }
    assert!(worst <= 1e-6, "e¹ deviates from 0.1·e^(−2t) by {worst}");
}

#[test]
fn io_behavior_matches_commanded_new_inputs() {
    let (sys, plan, law) = academic_setup();
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, academic_refs()).unwrap();
    let mut x0 = vec![0.0; 10];
    x0[0] = 0.02;
    x0[4] = -0.02;
    let cfg = SimConfig::new(2.0, 1e-4, x0);
    let trace = loop_.simulate(&cfg).unwrap();
    let report = io_behavior_check(&trace, &plan, 1e-4);
    assert_eq!(report.per_output.len(), 4);
    assert!(
        report.max_deviation <= 1e-3,
        "max FD deviation {} over outputs {:?}",
        report.max_deviation,
        report.per_output
    );
}

#[test]
fn error_ode_check_detects_a_corrupted_law() {
    // simulate with unity-coefficient error dynamics but hand the checker a
    // law object claiming the default gains: the analytic model no longer
    // matches the measured errors
    let sys = builtin_academic();
    let plan = run_procedure(&sys, 7).unwrap();
    let slow = GainSet::uniform_poles(&plan.kappa, -1.0);
    let law = build_tracking_law(&plan, &sys, &slow).unwrap();
    let refs = academic_refs();
    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, refs.clone()).unwrap();
    let mut x0 = vec![0.0; 10];
    x0[0] = 0.05;
    let cfg = SimConfig::new(2.0, 1e-3, x0);
    let trace = loop_.simulate(&cfg).unwrap();

    // honest check passes
    let honest = error_ode_check(&trace, &plan, &law, &refs).unwrap();
    assert!(honest.max_deviation <= 1e-6);

    // corrupted gains in the claimed law: the model decays at the wrong rate
    let mut corrupted = build_tracking_law(&plan, &sys, &GainSet::default_for(&plan.kappa)).unwrap();
    corrupted.equations = law.equations.clone();
    let lying = error_ode_check(&trace, &plan, &corrupted, &refs).unwrap();
    assert!(
        lying.max_deviation > 1e-3,
        "gain mismatch went unnoticed ({})",
        lying.max_deviation
    );
}

#[test]
fn crane_feedforward_holds_the_equilibrium() {
    // zero gains, constant reference at the starting load position: the pure
    // feedforward keeps the crane at rest
    let sys = builtin_crane(CraneParams::default()).unwrap();
    let plan = run_procedure(&sys, 7).unwrap();
    let law = build_tracking_law(&plan, &sys, &GainSet::zero(&plan.kappa)).unwrap();

    let mut p = Valuation::new();
    for (i, &xi) in sys.default_state.iter().enumerate() {
        p.set(JetVar::state(i), xi);
    }
    for j in 0..sys.n_inputs() {
        p.set(JetVar::input(j), 0.0);
    }
    let y0 = sys.output_values(&p).unwrap();
    let refs: Vec<ReferenceSignal> = y0.iter().map(|&c| ReferenceSignal::constant(c)).collect();

    let mut loop_ = ClosedLoop::new(&sys, &plan, &law, refs).unwrap();
    let cfg = SimConfig::new(2.0, 1e-3, sys.default_state.clone());
    let trace = loop_.simulate(&cfg).unwrap();
    assert!(
        trace.max_abs_error() <= 1e-6,
        "load drifted by {}",
        trace.max_abs_error()
    );
    assert!(trace.events.is_empty());
}
