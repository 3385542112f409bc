//! Expression core: parsing, printing, differentiation, substitution,
//! simplification, evaluation, and affine decomposition.

use flatctl::jets::VarMap;
use flatctl::expr::{
    affine_decompose, parse, parse_with_params, AffineDecomposition, Expr, ExprError, Valuation,
};
use flatctl::jets::{JetRegistry, JetVar};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn registry() -> JetRegistry {
    JetRegistry::new(
        (1..=10).map(|i| format!("x{i}")).collect(),
        (1..=4).map(|i| format!("u{i}")).collect(),
    )
}

fn x(i: usize) -> JetVar {
    JetVar::state(i - 1)
}

fn u(i: usize) -> JetVar {
    JetVar::input(i - 1)
}

// ---- parse -------------------------------------------------------------

#[test]
fn parse_sum_of_product() {
    let r = registry();
    let e = parse("x3 + x4*u1", &r).unwrap();
    let expected = Expr::add(
        Expr::var(x(3)),
        Expr::mul(Expr::var(x(4)), Expr::var(u(1))),
    );
    assert_eq!(e, expected);
}

#[test]
fn parse_crane_load_height_product() {
    let r = JetRegistry::new(
        vec!["phi".into(), "alpha".into(), "beta".into()],
        vec!["u1".into()],
    );
    let e = parse_with_params(
        "r*phi*cos(alpha)*cos(beta)",
        &r,
        &[("r".to_string(), 0.1)],
    )
    .unwrap();
    let mut p = Valuation::new();
    p.set(JetVar::state(0), 5.0);
    p.set(JetVar::state(1), 0.0);
    p.set(JetVar::state(2), 0.0);
    assert!((e.evaluate(&p).unwrap() - 0.5).abs() < 1e-15);
    // product tree of 4 factors: the parameter folds into the constant factor
    assert!(e.to_string_default().contains("cos"));
}

#[test]
fn parse_jet_suffix() {
    let r = registry();
    let e = parse("u1@2", &r).unwrap();
    assert_eq!(e, Expr::var(u(1).shifted(2)));
}

#[test]
fn parse_rejects_garbage_with_offset() {
    let r = registry();
    match parse("x1 + )", &r) {
        Err(ExprError::Parse { offset, .. }) => assert_eq!(offset, 5),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn parse_rejects_unknown_identifier() {
    let r = registry();
    assert!(matches!(
        parse("x1 + zz", &r),
        Err(ExprError::UnknownIdent { .. })
    ));
}

#[test]
fn parse_rejects_non_integer_exponent() {
    let r = registry();
    assert!(matches!(
        parse("x1^x2", &r),
        Err(ExprError::NonIntegerExponent { .. })
    ));
}

#[test]
fn parse_precedence_and_associativity() {
    let r = registry();
    // `^` binds tighter than unary minus, which binds tighter than `*`
    let e = parse("-x1^2*x2", &r).unwrap();
    let mut p = Valuation::new();
    p.set(x(1), 3.0);
    p.set(x(2), 5.0);
    assert_eq!(e.evaluate(&p).unwrap(), -45.0);
    // left-associative subtraction
    let e = parse("x1 - x2 - x1", &r).unwrap();
    assert_eq!(e.evaluate(&p).unwrap(), -5.0);
    // scientific notation
    let e = parse("1.5e2 + x1", &r).unwrap();
    assert_eq!(e.evaluate(&p).unwrap(), 153.0);
}

// ---- evaluate ----------------------------------------------------------

#[test]
fn evaluate_constant() {
    let p = Valuation::new();
    assert_eq!(Expr::constant(5.0).evaluate(&p).unwrap(), 5.0);
}

#[test]
fn evaluate_affine_combination() {
    let r = registry();
    let e = parse("x3 + x4*u1", &r).unwrap();
    let p = Valuation::from_pairs([(x(3), 1.0), (x(4), 2.0), (u(1), 3.0)]);
    assert_eq!(e.evaluate(&p).unwrap(), 7.0);
}

#[test]
fn evaluate_sin_zero() {
    let e = Expr::sin(Expr::constant(0.0));
    assert_eq!(e.evaluate(&Valuation::new()).unwrap(), 0.0);
}

#[test]
fn evaluate_reports_division_by_zero() {
    let r = registry();
    let e = parse("x1 / x2", &r).unwrap();
    let p = Valuation::from_pairs([(x(1), 1.0), (x(2), 0.0)]);
    assert!(matches!(e.evaluate(&p), Err(ExprError::Domain { .. })));
}

#[test]
fn evaluate_reports_unbound_variable() {
    let r = registry();
    let e = parse("x1 + x2", &r).unwrap();
    let p = Valuation::from_pairs([(x(1), 1.0)]);
    assert!(matches!(e.evaluate(&p), Err(ExprError::Unbound(_))));
}

// ---- differentiate -----------------------------------------------------

#[test]
fn differentiate_product_by_factor() {
    let r = registry();
    let e = parse("x4*u1", &r).unwrap();
    assert_eq!(e.differentiate(u(1)).simplify(), Expr::var(x(4)));
}

#[test]
fn differentiate_absent_variable_is_zero() {
    let r = registry();
    let e = parse("x3 + x4*u1", &r).unwrap();
    assert!(e.differentiate(x(5)).simplify().is_zero());
}

#[test]
fn differentiate_matches_finite_differences_fixture() {
    // d(x4*x7*u1 - x6)/dx7 = x4*u1, checked against the FD oracle
    let r = registry();
    let e = parse("x4*x7*u1 - x6", &r).unwrap();
    let d = e.differentiate(x(7)).simplify();
    assert_eq!(d, parse("x4*u1", &r).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let p = Valuation::from_pairs(
            [x(4), x(6), x(7), u(1)]
                .into_iter()
                .map(|v| (v, rng.gen_range(-0.9..0.9))),
        );
        let h = 1e-6;
        let mut pp = p.clone();
        pp.set(x(7), p.get(x(7)).unwrap() + h);
        let mut pm = p.clone();
        pm.set(x(7), p.get(x(7)).unwrap() - h);
        let fd = (e.evaluate(&pp).unwrap() - e.evaluate(&pm).unwrap()) / (2.0 * h);
        let exact = d.evaluate(&p).unwrap();
        assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0));
    }
}

#[test]
fn differentiate_trig_quotient() {
    let r = registry();
    let e = parse("sin(x1)/cos(x1)", &r).unwrap();
    let d = e.differentiate(x(1)).simplify();
    let p = Valuation::from_pairs([(x(1), 0.3)]);
    // d tan = 1/cos^2
    let expect = 1.0 / (0.3f64.cos() * 0.3f64.cos());
    assert!((d.evaluate(&p).unwrap() - expect).abs() < 1e-12);
}

// ---- substitute --------------------------------------------------------

#[test]
fn substitute_stage_expressions_eliminates_inputs() {
    // (x10 + u2 + u3) with the academic stage-1 substitutions leaves only
    // x- and v-variables
    let r = registry();
    let e = parse("x10 + u2 + u3", &r).unwrap();
    let v2_1 = JetVar::new_input(2, 0);
    let v1_1 = JetVar::new_input(1, 0);
    let v1_2 = JetVar::new_input(1, 1);
    let mut bindings: VarMap<Expr> = VarMap::new();
    bindings.insert(
        u(2),
        Expr::sub(
            Expr::var(v2_1),
            Expr::mul(Expr::var(x(4)), Expr::var(v1_1.shifted(1))),
        ),
    );
    bindings.insert(
        u(3),
        Expr::sum([
            Expr::var(v1_2),
            Expr::neg(Expr::var(x(10))),
            Expr::neg(Expr::var(v2_1)),
            Expr::mul(Expr::var(x(4)), Expr::var(v1_1.shifted(1))),
        ]),
    );
    let out = e.substitute(&bindings).unwrap().simplify();
    for v in out.free_vars() {
        assert!(!matches!(v.family, flatctl::jets::Family::Input));
    }
    // the substituted sum telescopes to v1_2
    assert_eq!(out, Expr::var(v1_2));
}

#[test]
fn substitute_identity_bindings() {
    let r = registry();
    let e = parse("x3 + x4*u1", &r).unwrap();
    let bindings: VarMap<Expr> = [(x(4), Expr::var(x(4)))].into_iter().collect();
    assert_eq!(e.substitute(&bindings).unwrap(), e);
}

#[test]
fn substitute_variable_by_zero() {
    let e = Expr::var(x(1));
    let bindings: VarMap<Expr> = [(x(1), Expr::constant(0.0))].into_iter().collect();
    assert!(e.substitute(&bindings).unwrap().is_zero());
}

#[test]
fn substitute_detects_cycles() {
    let bindings: VarMap<Expr> =
        [(x(1), Expr::add(Expr::var(x(1)), Expr::constant(1.0)))]
            .into_iter()
            .collect();
    assert!(matches!(
        Expr::var(x(1)).substitute(&bindings),
        Err(ExprError::Cycle(_))
    ));
}

// ---- simplify ----------------------------------------------------------

#[test]
fn simplify_zero_annihilation() {
    let r = registry();
    let e = parse("0*u1 + x3", &r).unwrap();
    assert_eq!(e.simplify(), Expr::var(x(3)));
}

#[test]
fn simplify_constant_folding() {
    let r = registry();
    assert_eq!(parse("2+3", &r).unwrap().simplify(), Expr::constant(5.0));
}

#[test]
fn simplify_drops_zero_coefficient_terms() {
    let r = registry();
    let e = parse("x4*u1 + 0*sin(x2)", &r).unwrap();
    assert_eq!(e.simplify(), parse("x4*u1", &r).unwrap());
}

#[test]
fn simplify_unit_identities() {
    let r = registry();
    assert_eq!(parse("x1*1", &r).unwrap().simplify(), Expr::var(x(1)));
    assert_eq!(parse("x1^1", &r).unwrap().simplify(), Expr::var(x(1)));
    assert_eq!(parse("x1^0", &r).unwrap().simplify(), Expr::constant(1.0));
    assert_eq!(parse("x1+0", &r).unwrap().simplify(), Expr::var(x(1)));
}

// ---- affine_decompose --------------------------------------------------

fn sample_points(vars: &[JetVar], n: usize, seed: u64) -> Vec<Valuation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Valuation::from_pairs(vars.iter().map(|v| (*v, rng.gen_range(-0.9..0.9))))
        })
        .collect()
}

#[test]
fn affine_identity_row() {
    let e = Expr::var(u(1));
    let pts = sample_points(&[u(1)], 5, 3);
    match affine_decompose(&[e], &[u(1)], &pts).unwrap() {
        AffineDecomposition::Affine { a, b } => {
            assert_eq!(a[0][0], Expr::constant(1.0));
            assert!(b[0].is_zero());
        }
        AffineDecomposition::NotAffine => panic!("u1 is affine in u1"),
    }
}

#[test]
fn affine_two_input_row() {
    let r = registry();
    let e = parse("x10 + u2 + u3", &r).unwrap();
    let pts = sample_points(&[x(10), u(2), u(3)], 5, 4);
    match affine_decompose(&[e], &[u(2), u(3)], &pts).unwrap() {
        AffineDecomposition::Affine { a, b } => {
            assert_eq!(a[0][0], Expr::constant(1.0));
            assert_eq!(a[0][1], Expr::constant(1.0));
            assert_eq!(b[0], Expr::var(x(10)));
        }
        AffineDecomposition::NotAffine => panic!("row is affine"),
    }
}

#[test]
fn affine_rejects_bilinear_row() {
    let r = registry();
    let e = parse("u1*u3", &r).unwrap();
    let pts = sample_points(&[u(1), u(3)], 5, 5);
    assert!(matches!(
        affine_decompose(&[e], &[u(1), u(3)], &pts).unwrap(),
        AffineDecomposition::NotAffine
    ));
}

#[test]
fn affine_reconstruction_accuracy() {
    let r = registry();
    let rows = [
        parse("x1*u1 + sin(x2)*u2 + x3^2", &r).unwrap(),
        parse("cos(x1)*u2 - x2*x3", &r).unwrap(),
    ];
    let vars = [x(1), x(2), x(3), u(1), u(2)];
    let pts = sample_points(&vars, 20, 6);
    match affine_decompose(&rows, &[u(1), u(2)], &pts).unwrap() {
        AffineDecomposition::Affine { a, b } => {
            for p in &pts {
                for (i, row) in rows.iter().enumerate() {
                    let mut recon = b[i].evaluate(p).unwrap();
                    for (j, uv) in [u(1), u(2)].iter().enumerate() {
                        recon += a[i][j].evaluate(p).unwrap() * p.get(*uv).unwrap();
                    }
                    assert!((row.evaluate(p).unwrap() - recon).abs() <= 1e-10);
                }
            }
        }
        AffineDecomposition::NotAffine => panic!("rows are affine"),
    }
}

// ---- property suites ---------------------------------------------------

fn fuzz_vars() -> Vec<JetVar> {
    vec![x(1), x(2), x(3), u(1), u(2), u(1).shifted(1)]
}

fn expr_strategy() -> impl Strategy<Value = Expr> {
    let vars = fuzz_vars();
    let leaf = prop_oneof![
        (-3i32..=3).prop_map(|c| Expr::constant(c as f64)),
        (0..vars.len()).prop_map(move |i| Expr::var(vars[i])),
    ];
    leaf.prop_recursive(4, 48, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(a, b)),
            // guarded quotient: denominator bounded away from zero
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                Expr::div(
                    a,
                    Expr::add(Expr::mul(b.clone(), b), Expr::constant(1.0)),
                )
            }),
            inner.clone().prop_map(Expr::sin),
            inner.clone().prop_map(Expr::cos),
            inner.clone().prop_map(Expr::neg),
            (inner.clone(), 2u32..=3).prop_map(|(a, k)| Expr::powi(a, k as i32)),
        ]
    })
}

fn fuzz_point(values: &[f64]) -> Valuation {
    Valuation::from_pairs(fuzz_vars().into_iter().zip(values.iter().copied()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    // derivative vs Richardson-extrapolated central differences
    #[test]
    fn prop_derivative_matches_finite_differences(
        e in expr_strategy(),
        vals in proptest::collection::vec(-0.9f64..0.9, 6),
        which in 0usize..6,
    ) {
        let p = fuzz_point(&vals);
        let w = fuzz_vars()[which];
        let f0 = e.evaluate(&p);
        prop_assume!(f0.is_ok() && f0.unwrap().abs() < 1e3);
        let exact = e.differentiate(w).evaluate(&p);
        prop_assume!(exact.is_ok());
        let exact = exact.unwrap();
        prop_assume!(exact.abs() < 1e6);
        let fd_at = |h: f64| -> Option<f64> {
            let mut pp = p.clone();
            pp.set(w, p.get(w).unwrap() + h);
            let mut pm = p.clone();
            pm.set(w, p.get(w).unwrap() - h);
            Some((e.evaluate(&pp).ok()? - e.evaluate(&pm).ok()?) / (2.0 * h))
        };
        let (c1, c2) = (fd_at(1e-3), fd_at(5e-4));
        prop_assume!(c1.is_some() && c2.is_some());
        // Richardson step removes the O(h^2) term
        let rich = (4.0 * c2.unwrap() - c1.unwrap()) / 3.0;
        prop_assert!((rich - exact).abs() <= 1e-6 * exact.abs().max(1.0),
            "fd {rich} vs exact {exact}");
    }

    // substitute-then-evaluate equals evaluate-with-pre-evaluated-bindings
    #[test]
    fn prop_substitute_commutes_with_evaluate(
        e in expr_strategy(),
        g in expr_strategy(),
        vals in proptest::collection::vec(-0.9f64..0.9, 6),
        which in 0usize..6,
    ) {
        let p = fuzz_point(&vals);
        let w = fuzz_vars()[which];
        let gv = g.evaluate(&p);
        prop_assume!(gv.is_ok());
        let bindings: VarMap<Expr> = [(w, g.clone())].into_iter().collect();
        let subbed = e.substitute(&bindings);
        prop_assume!(subbed.is_ok());
        let lhs = subbed.unwrap().evaluate(&p);
        let mut p2 = p.clone();
        p2.set(w, gv.unwrap());
        let rhs = e.evaluate(&p2);
        prop_assume!(lhs.is_ok() && rhs.is_ok());
        let (lhs, rhs) = (lhs.unwrap(), rhs.unwrap());
        prop_assume!(rhs.abs() < 1e9);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    // simplify preserves numeric value
    #[test]
    fn prop_simplify_preserves_value(
        e in expr_strategy(),
        seed in 0u64..1000,
    ) {
        let s = e.simplify();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = Valuation::from_pairs(
                fuzz_vars().into_iter().map(|v| (v, rng.gen_range(-0.9..0.9))),
            );
            let (a, b) = (e.evaluate(&p), s.evaluate(&p));
            prop_assume!(a.is_ok() && b.is_ok());
            let (a, b) = (a.unwrap(), b.unwrap());
            prop_assume!(a.abs() < 1e9);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0),
                "{} vs {} for {}", a, b, e.to_string_default());
        }
    }

    // print then parse reproduces the tree
    #[test]
    fn prop_print_parse_round_trip(e in expr_strategy()) {
        let r = registry();
        let text = e.to_string_default();
        let back = parse(&text, &r);
        prop_assert!(back.is_ok(), "unparseable: {text}");
        prop_assert_eq!(back.unwrap(), e, "round trip changed: {}", text);
    }
}
