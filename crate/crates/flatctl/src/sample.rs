//! Seeded random sampling of numeric points for generic-rank estimation and
//! numeric equivalence checks.
//!
//! Semantic questions about symbolic expressions (rank, dependence, affine
//! structure) are decided by evaluation at random points drawn from a box.
//! The generator is a fixed-seed ChaCha stream so every run of the toolkit
//! makes the same decisions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::expr::{Expr, ExprError, Valuation};
use crate::jets::JetVar;

/// Per-variable sampling intervals with a default box for unlisted variables.
#[derive(Clone, Debug)]
pub struct SampleSpace {
    default_range: (f64, f64),
    overrides: Vec<(JetVar, (f64, f64))>,
}

impl SampleSpace {
    /// The standard box `[-0.9, 0.9]` per coordinate.
    pub fn standard() -> Self {
        SampleSpace {
            default_range: (-0.9, 0.9),
            overrides: Vec::new(),
        }
    }

    pub fn with_range(mut self, var: JetVar, lo: f64, hi: f64) -> Self {
        self.overrides.push((var, (lo, hi)));
        self
    }

    fn range(&self, var: JetVar) -> (f64, f64) {
        self.overrides
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, r)| *r)
            .unwrap_or(self.default_range)
    }
}

/// Deterministic point generator over a [`SampleSpace`].
pub struct Sampler {
    rng: ChaCha8Rng,
    space: SampleSpace,
}

/// Number of sample points used by rank and dependence decisions.
pub const N_SAMPLES: usize = 7;

/// Minimum number of agreeing points for a dependence/rank decision.
pub const MAJORITY: usize = 4;

const MAX_RESAMPLES: usize = 50;

impl Sampler {
    pub fn new(seed: u64, space: SampleSpace) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            space,
        }
    }

    /// A point assigning a value to each listed variable.
    pub fn point(&mut self, vars: &[JetVar]) -> Valuation {
        Valuation::from_pairs(vars.iter().map(|v| {
            let (lo, hi) = self.space.range(*v);
            (*v, self.rng.gen_range(lo..hi))
        }))
    }

    /// A point at which all given expressions evaluate without domain errors;
    /// resamples up to 50 times before giving up.
    pub fn valid_point(
        &mut self,
        vars: &[JetVar],
        exprs: &[&Expr],
    ) -> Result<Valuation, ExprError> {
        let mut last_err = None;
        for _ in 0..MAX_RESAMPLES {
            let p = self.point(vars);
            match exprs.iter().try_for_each(|e| e.evaluate(&p).map(|_| ())) {
                Ok(()) => return Ok(p),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or(ExprError::Domain {
            op: "sampling",
            value: f64::NAN,
            context: "no expressions to validate".to_string(),
        }))
    }

    /// The standard batch of [`N_SAMPLES`] valid points.
    pub fn points(
        &mut self,
        vars: &[JetVar],
        exprs: &[&Expr],
    ) -> Result<Vec<Valuation>, ExprError> {
        (0..N_SAMPLES)
            .map(|_| self.valid_point(vars, exprs))
            .collect()
    }
}
