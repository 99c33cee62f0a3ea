//! Concrete test functions `phi` used by the measure observables and the
//! duality harness.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    Bounded,
    C2b,
    RapidlyDecreasing,
}

/// A real function together with (optionally) its second derivative and the
/// regularity classes it claims.
#[derive(Clone)]
pub struct TestFunction {
    id: String,
    eval: RealFn,
    laplacian: Option<RealFn>,
    classes: Vec<FunctionClass>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("id", &self.id).field("classes", &self.classes).finish()
    }
}

impl TestFunction {
    pub fn new(
        id: impl Into<String>,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        classes: &[FunctionClass],
    ) -> Self {
        Self { id: id.into(), eval: Arc::new(eval), laplacian: None, classes: classes.to_vec() }
    }

    pub fn with_laplacian(mut self, lap: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.laplacian = Some(Arc::new(lap));
        self
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn laplacian(&self, x: f64) -> Option<f64> {
        self.laplacian.as_ref().map(|l| l(x))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn classes(&self) -> &[FunctionClass] {
        &self.classes
    }

    pub fn claims(&self, class: FunctionClass) -> bool {
        self.classes.contains(&class)
    }

    /// `c * phi`.
    pub fn scaled(&self, c: f64) -> Self {
        let inner = self.eval.clone();
        let lap = self.laplacian.clone();
        Self {
            id: format!("{c}*{}", self.id),
            eval: Arc::new(move |x| c * inner(x)),
            laplacian: lap.map(|l| Arc::new(move |x| c * l(x)) as RealFn),
            classes: self.classes.clone(),
        }
    }

    /// Spot check of `sup_x e^{p|x|} |phi(x)| < infinity` for `p in {1, 2}`:
    /// on a grid over `[-60, 60]` the weighted value on the outer shell
    /// `|x| >= 40` must not exceed the inner maximum (or 1).
    pub fn check_rapid_decay(&self) -> bool {
        for p in [1.0, 2.0] {
            let mut inner = 1.0f64;
            let mut outer = 0.0f64;
            for i in -6000..=6000 {
                let x = f64::from(i) * 0.01;
                let w = (p * x.abs()).exp() * self.eval(x).abs();
                if !w.is_finite() {
                    return false;
                }
                if x.abs() < 40.0 {
                    inner = inner.max(w);
                } else {
                    outer = outer.max(w);
                }
            }
            if outer > inner {
                return false;
            }
        }
        true
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), move |_| c, &[FunctionClass::Bounded, FunctionClass::C2b])
            .with_laplacian(|_| 0.0)
    }

    pub fn zero() -> Self {
        Self::new("zero", |_| 0.0, &all_classes()).with_laplacian(|_| 0.0)
    }

    /// Heat kernel bump `psi^center_variance(y)`.
    pub fn gaussian(center: f64, variance: f64) -> Self {
        let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
        Self::new(
            format!("gauss({center},{variance})"),
            move |y| norm * (-(y - center).powi(2) / (2.0 * variance)).exp(),
            &all_classes(),
        )
        .with_laplacian(move |y| {
            let d = y - center;
            norm * (-(d * d) / (2.0 * variance)).exp() * (d * d / (variance * variance) - 1.0 / variance)
        })
    }

    /// `e^{-y^2}`.
    pub fn unnormalised_gaussian() -> Self {
        Self::new("exp(-y^2)", |y| (-y * y).exp(), &all_classes())
            .with_laplacian(|y| (4.0 * y * y - 2.0) * (-y * y).exp())
    }

    /// `y` (unbounded; only for exact generator identities).
    pub fn identity() -> Self {
        Self::new("y", |y| y, &[]).with_laplacian(|_| 0.0)
    }

    /// `y^2` (unbounded; only for exact generator identities).
    pub fn square() -> Self {
        Self::new("y^2", |y| y * y, &[]).with_laplacian(|_| 2.0)
    }

    /// `y * exp(-y^2 / 8)`: a linear function clipped by a smooth cutoff.
    pub fn linear_cutoff() -> Self {
        Self::new("y*cutoff", |y| y * (-y * y / 8.0).exp(), &all_classes()).with_laplacian(|y| {
            let e = (-y * y / 8.0).exp();
            e * (y.powi(3) / 16.0 - 3.0 * y / 4.0)
        })
    }

    /// `exp(-sqrt(1 + y^2))`, a smoothed `e^{-|y|}`. Bounded and C2 but not
    /// rapidly decreasing.
    pub fn smoothed_exp_abs() -> Self {
        Self::new("exp(-sqrt(1+y^2))", |y| (-(1.0 + y * y).sqrt()).exp(), &[FunctionClass::Bounded, FunctionClass::C2b])
    }
}

fn all_classes() -> Vec<FunctionClass> {
    vec![FunctionClass::Bounded, FunctionClass::C2b, FunctionClass::RapidlyDecreasing]
}

/// Serializable description of a library test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhiSpec {
    Zero,
    Constant { value: f64 },
    Gaussian {
        #[serde(default)]
        center: f64,
        variance: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    LinearCutoff,
    SmoothedExpAbs,
}

fn one() -> f64 {
    1.0
}

impl PhiSpec {
    pub fn build(&self) -> TestFunction {
        match *self {
            PhiSpec::Zero => TestFunction::zero(),
            PhiSpec::Constant { value } => TestFunction::constant(value),
            PhiSpec::Gaussian { center, variance, scale } => {
                let g = TestFunction::gaussian(center, variance);
                if scale == 1.0 {
                    g
                } else {
                    g.scaled(scale)
                }
            }
            PhiSpec::LinearCutoff => TestFunction::linear_cutoff(),
            PhiSpec::SmoothedExpAbs => TestFunction::smoothed_exp_abs(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn second_difference(f: &TestFunction, x: f64) -> f64 {
        let h = 1e-4;
        (f.eval(x + h) + f.eval(x - h) - 2.0 * f.eval(x)) / (h * h)
    }

    #[test]
    fn laplacians_match_finite_differences() {
        for f in [
            TestFunction::gaussian(0.3, 0.7),
            TestFunction::unnormalised_gaussian(),
            TestFunction::linear_cutoff(),
            TestFunction::square(),
            TestFunction::gaussian(0.0, 1.0).scaled(0.5),
        ] {
            for x in [-2.0, -0.4, 0.0, 0.9, 2.5] {
                let exact = f.laplacian(x).unwrap();
                assert!((exact - second_difference(&f, x)).abs() < 1e-5, "{} at {x}", f.id());
            }
        }
    }

    #[test]
    fn rapid_decay_claims_hold() {
        for f in [TestFunction::gaussian(0.0, 1.0), TestFunction::linear_cutoff(), TestFunction::zero()] {
            assert!(f.claims(FunctionClass::RapidlyDecreasing));
            assert!(f.check_rapid_decay(), "{}", f.id());
        }
        assert!(!TestFunction::smoothed_exp_abs().check_rapid_decay());
        assert!(!TestFunction::constant(1.0).check_rapid_decay());
    }

    #[test]
    fn phi_spec_parses() {
        let spec: PhiSpec = serde_json::from_str(r#"{"kind":"gaussian","variance":1.0,"scale":0.5}"#).unwrap();
        let f = spec.build();
        assert!((f.eval(0.0) - 0.5 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!(serde_json::from_str::<PhiSpec>(r#"{"kind":"gaussian"}"#).is_err());
    }
}
