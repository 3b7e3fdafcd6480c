//! Closed-form test problem library plus the tabulated reaction–diffusion
//! quantity-of-interest loader.
//!
//! Each problem exposes its high-fidelity function, one or more low-fidelity
//! sources (each with its own input dimension and domain box), and — where one
//! exists — a closed-form cross-fidelity identity used as an oracle: the
//! identity is evaluated through two independent routes and must agree to
//! near machine precision.
//!
//! Functions are total: strict domain checking happens only in [`evaluate`],
//! the dataset-generation entry point. Model-internal evaluation (through
//! trained coordinate encoders) deliberately bypasses the check, since
//! encoders may probe slightly outside the sampled box; that drift is
//! penalized by the interval score, not rejected.

use std::sync::Arc;

use crate::field::{Domain, FnField, ScalarField};
use crate::{mix_seed, Error, Result};

/// One function together with its sampling domain.
#[derive(Clone)]
pub struct SourceDef {
    pub field: Arc<dyn ScalarField>,
    pub domain: Domain,
}

impl SourceDef {
    fn new(field: Arc<dyn ScalarField>, domain: Domain) -> SourceDef {
        SourceDef { field, domain }
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }
}

/// Two-route evaluation of a known cross-fidelity identity at one point:
/// returns `(direct high-fidelity value, value reconstructed from the
/// low-fidelity closed forms)`.
pub type RelationFn = dyn Fn(&[f64]) -> (f64, f64) + Send + Sync;

/// Selects which function of a problem to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Hf,
    Lf(usize),
}

/// A registered benchmark problem.
pub struct BenchmarkProblem {
    pub name: String,
    pub hf: SourceDef,
    pub lf: Vec<SourceDef>,
    relation: Option<Arc<RelationFn>>,
    /// Seed of the noise field for stochastic problems; unused otherwise.
    pub rng_seed: u64,
}

impl BenchmarkProblem {
    pub fn hf_dim(&self) -> usize {
        self.hf.dim()
    }

    pub fn n_sources(&self) -> usize {
        self.lf.len()
    }

    fn source(&self, which: Which) -> Result<&SourceDef> {
        match which {
            Which::Hf => Ok(&self.hf),
            Which::Lf(i) => self.lf.get(i).ok_or_else(|| {
                Error::Config(format!(
                    "problem `{}` has {} LF sources, index {} requested",
                    self.name,
                    self.lf.len(),
                    i
                ))
            }),
        }
    }

    /// Vectorized evaluation with strict domain enforcement: `points` is
    /// row-major with the source's input dimension per row.
    pub fn evaluate(&self, which: Which, points: &[f64]) -> Result<Vec<f64>> {
        let src = self.source(which)?;
        let d = src.dim();
        assert_eq!(points.len() % d.max(1), 0, "ragged point matrix");
        let label = match which {
            Which::Hf => format!("{} HF", self.name),
            Which::Lf(i) => format!("{} LF{}", self.name, i + 1),
        };
        let mut out = Vec::with_capacity(points.len() / d);
        for row in points.chunks_exact(d) {
            src.domain.check(&label, row)?;
            out.push(src.field.value(row));
        }
        Ok(out)
    }

    /// Evaluates both routes of the known cross-fidelity identity, if the
    /// problem has one.
    pub fn relation_at(&self, x: &[f64]) -> Option<(f64, f64)> {
        self.relation.as_ref().map(|r| r(x))
    }

    pub fn has_relation(&self) -> bool {
        self.relation.is_some()
    }
}

/// Names accepted by [`make_problem`], in presentation order.
pub const PROBLEM_NAMES: [&str; 13] = [
    "k1", "k2", "k2-shift", "k3", "k4", "k4d", "k4u", "k4p", "2de", "2du", "rd", "gjg9", "k5",
];

/// Builds a registered problem by (case-insensitive) name.
pub fn make_problem(name: &str) -> Result<BenchmarkProblem> {
    let key = name.to_ascii_lowercase();
    match key.as_str() {
        "k1" => Ok(k1()),
        "k2" => Ok(k2()),
        "k2-shift" | "k2s" => Ok(k2_shift()),
        "k3" => Ok(k3()),
        "k4" => Ok(k4()),
        "k4d" => Ok(k4d()),
        "k4u" => Ok(k4u()),
        "k4p" => Ok(k4p()),
        "2de" => Ok(two_d_equal()),
        "2du" => Ok(two_d_unequal()),
        "rd" => rd_from_embedded(),
        "gjg9" => Ok(gjg9(GJG9_DEFAULT_SEED)),
        "k5" => Ok(k5()),
        _ => Err(Error::UnknownProblem(name.to_string())),
    }
}

// ───────────────────────── shared closed forms ─────────────────────────

/// `0.5(6x−2)² sin(12x−4) + 10x − 10` — the canonical oscillatory LF shape.
fn k1_lf_value(x: f64) -> f64 {
    let u = 6.0 * x - 2.0;
    0.5 * u * u * (12.0 * x - 4.0).sin() + 10.0 * x - 10.0
}

fn k1_lf_deriv(x: f64) -> f64 {
    let u = 6.0 * x - 2.0;
    let s = (12.0 * x - 4.0).sin();
    let c = (12.0 * x - 4.0).cos();
    6.0 * u * s + 6.0 * u * u * c + 10.0
}

/// `(6x−2)² sin(12x−4)` — the matching HF shape.
fn k1_hf_value(x: f64) -> f64 {
    let u = 6.0 * x - 2.0;
    u * u * (12.0 * x - 4.0).sin()
}

fn k1_hf_deriv(x: f64) -> f64 {
    let u = 6.0 * x - 2.0;
    12.0 * u * (12.0 * x - 4.0).sin() + 12.0 * u * u * (12.0 * x - 4.0).cos()
}

/// Half-open step `1_{(t,1]}`: 0 at the threshold itself, 1 beyond.
fn step_after(x: f64, t: f64) -> f64 {
    if x > t {
        1.0
    } else {
        0.0
    }
}

fn sin8pi(x: f64) -> f64 {
    (8.0 * std::f64::consts::PI * x).sin()
}

fn sin8pi_deriv(x: f64) -> f64 {
    8.0 * std::f64::consts::PI * (8.0 * std::f64::consts::PI * x).cos()
}

fn field1(
    value: impl Fn(f64) -> f64 + Send + Sync + 'static,
    deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> Arc<dyn ScalarField> {
    Arc::new(FnField::new(
        1,
        move |x: &[f64]| value(x[0]),
        move |x: &[f64], g: &mut [f64]| g[0] = deriv(x[0]),
    ))
}

fn unit_interval() -> Domain {
    Domain::cube(0.0, 1.0, 1)
}

// ───────────────────────── one-dimensional problems ─────────────────────────

fn k1() -> BenchmarkProblem {
    let lf = field1(k1_lf_value, k1_lf_deriv);
    let hf = field1(k1_hf_value, k1_hf_deriv);
    let lf_rel = Arc::clone(&lf);
    let hf_rel = Arc::clone(&hf);
    BenchmarkProblem {
        name: "k1".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![SourceDef::new(lf, unit_interval())],
        relation: Some(Arc::new(move |x: &[f64]| {
            // y_H = 2·y_L − 20x + 20, via the independent HF closed form.
            let lhs = hf_rel.value(x);
            let rhs = 2.0 * lf_rel.value(x) - 20.0 * x[0] + 20.0;
            (lhs, rhs)
        })),
        rng_seed: 0,
    }
}

fn k2() -> BenchmarkProblem {
    let lf = field1(
        |x| 3.0 * step_after(x, 0.5) + k1_lf_value(x),
        k1_lf_deriv,
    );
    // Explicit form: substituting y_L gives y_H = (6x−2)² sin(12x−4) + 10·1_{(0.5,1]}.
    let hf = field1(
        |x| k1_hf_value(x) + 10.0 * step_after(x, 0.5),
        k1_hf_deriv,
    );
    let lf_rel = Arc::clone(&lf);
    let hf_rel = Arc::clone(&hf);
    BenchmarkProblem {
        name: "k2".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![SourceDef::new(lf, unit_interval())],
        relation: Some(Arc::new(move |x: &[f64]| {
            // y_H = 4·1_{(0.5,1]} + 2·y_L − 20x + 20.
            let lhs = hf_rel.value(x);
            let rhs = 4.0 * step_after(x[0], 0.5) + 2.0 * lf_rel.value(x) - 20.0 * x[0] + 20.0;
            (lhs, rhs)
        })),
        rng_seed: 0,
    }
}

fn k2_shift() -> BenchmarkProblem {
    // LF discontinuity moves to 0.6 while the HF one stays at 0.5, so the
    // clean piecewise-linear relation of K2 no longer holds.
    let lf = field1(
        |x| 3.0 * step_after(x, 0.6) + k1_lf_value(x),
        k1_lf_deriv,
    );
    let hf = field1(
        |x| k1_hf_value(x) + 10.0 * step_after(x, 0.5),
        k1_hf_deriv,
    );
    BenchmarkProblem {
        name: "k2-shift".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![SourceDef::new(lf, unit_interval())],
        relation: None,
        rng_seed: 0,
    }
}

fn k3() -> BenchmarkProblem {
    let lf = field1(sin8pi, sin8pi_deriv);
    let hf = field1(
        |x| {
            let s = sin8pi(x);
            (x - std::f64::consts::SQRT_2) * s * s
        },
        |x| {
            let s = sin8pi(x);
            s * s + (x - std::f64::consts::SQRT_2) * 2.0 * s * sin8pi_deriv(x)
        },
    );
    BenchmarkProblem {
        name: "k3".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![SourceDef::new(lf, unit_interval())],
        relation: None,
        rng_seed: 0,
    }
}

/// The K4 family's phase-shifted HF target, in its two algebraically equal
/// spellings: `x² + sin²(8π(x + 1/80))` and `x² + sin²(8πx + π/10)`.
fn k4_hf_value(x: f64) -> f64 {
    let s = sin8pi(x + 1.0 / 80.0);
    x * x + s * s
}

fn k4_hf_deriv(x: f64) -> f64 {
    let s = sin8pi(x + 1.0 / 80.0);
    2.0 * x + 2.0 * s * sin8pi_deriv(x + 1.0 / 80.0)
}

fn k4_hf_value_phase(x: f64) -> f64 {
    let s = (8.0 * std::f64::consts::PI * x + std::f64::consts::PI / 10.0).sin();
    x * x + s * s
}

fn k4() -> BenchmarkProblem {
    let lf = field1(sin8pi, sin8pi_deriv);
    let hf = field1(k4_hf_value, k4_hf_deriv);
    let hf_rel = Arc::clone(&hf);
    BenchmarkProblem {
        name: "k4".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![SourceDef::new(lf, unit_interval())],
        relation: Some(Arc::new(move |x: &[f64]| {
            // x² + y_L²(x + 1/80) = x² + sin²(8πx + π/10) since 8π/80 = π/10.
            (hf_rel.value(x), k4_hf_value_phase(x[0]))
        })),
        rng_seed: 0,
    }
}

fn k4d() -> BenchmarkProblem {
    let hf = field1(k4_hf_value, k4_hf_deriv);
    let mk = || SourceDef::new(field1(sin8pi, sin8pi_deriv), unit_interval());
    BenchmarkProblem {
        name: "k4d".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![mk(), mk()],
        relation: None,
        rng_seed: 0,
    }
}

fn k4u() -> BenchmarkProblem {
    let hf = field1(k4_hf_value, k4_hf_deriv);
    BenchmarkProblem {
        name: "k4u".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![
            SourceDef::new(field1(sin8pi, sin8pi_deriv), unit_interval()),
            SourceDef::new(field1(k1_lf_value, k1_lf_deriv), unit_interval()),
        ],
        relation: None,
        rng_seed: 0,
    }
}

fn k4p() -> BenchmarkProblem {
    let hf = field1(k4_hf_value, k4_hf_deriv);
    // L1: K1-shape below 0.5, oscillation above; L2 swapped.
    let l1 = field1(
        |x| if x <= 0.5 { k1_lf_value(x) } else { sin8pi(x) },
        |x| if x <= 0.5 { k1_lf_deriv(x) } else { sin8pi_deriv(x) },
    );
    let l2 = field1(
        |x| if x <= 0.5 { sin8pi(x) } else { k1_lf_value(x) },
        |x| if x <= 0.5 { sin8pi_deriv(x) } else { k1_lf_deriv(x) },
    );
    BenchmarkProblem {
        name: "k4p".into(),
        hf: SourceDef::new(hf, unit_interval()),
        lf: vec![
            SourceDef::new(l1, unit_interval()),
            SourceDef::new(l2, unit_interval()),
        ],
        relation: None,
        rng_seed: 0,
    }
}

// ───────────────────────── multi-dimensional problems ─────────────────────────

fn two_d_equal() -> BenchmarkProblem {
    let pi3 = 3.0 * std::f64::consts::PI;
    let lf: Arc<dyn ScalarField> = Arc::new(FnField::new(
        2,
        move |x: &[f64]| (0.01 * x[0] + 0.99 * x[1]).exp() + 0.15 * (pi3 * x[1]).sin(),
        move |x: &[f64], g: &mut [f64]| {
            let e = (0.01 * x[0] + 0.99 * x[1]).exp();
            g[0] = 0.01 * e;
            g[1] = 0.99 * e + 0.15 * pi3 * (pi3 * x[1]).cos();
        },
    ));
    let hf: Arc<dyn ScalarField> = Arc::new(FnField::new(
        2,
        move |x: &[f64]| (0.7 * x[0] + 0.3 * x[1]).exp() + 0.15 * (pi3 * x[0]).sin(),
        move |x: &[f64], g: &mut [f64]| {
            let e = (0.7 * x[0] + 0.3 * x[1]).exp();
            g[0] = 0.7 * e + 0.15 * pi3 * (pi3 * x[0]).cos();
            g[1] = 0.3 * e;
        },
    ));
    let lf_rel = Arc::clone(&lf);
    let hf_rel = Arc::clone(&hf);
    BenchmarkProblem {
        name: "2de".into(),
        hf: SourceDef::new(hf, Domain::cube(-1.5, 1.5, 2)),
        lf: vec![SourceDef::new(lf, Domain::cube(-1.5, 1.5, 2))],
        relation: Some(Arc::new(move |x: &[f64]| {
            // y_H = y_L ∘ T* with T*(x₁,x₂) = (−29x₁ + 30x₂, x₁); the LF
            // closed form is total, so evaluating outside its sampling box is
            // well-defined here.
            let t = [-29.0 * x[0] + 30.0 * x[1], x[0]];
            (hf_rel.value(x), lf_rel.value(&t))
        })),
        rng_seed: 0,
    }
}

fn two_d_unequal() -> BenchmarkProblem {
    let pi = std::f64::consts::PI;
    let lf: Arc<dyn ScalarField> = Arc::new(FnField::new(
        2,
        move |x: &[f64]| (0.01 * x[0] + 0.99 * x[1]).exp() + 0.15 * (3.0 * pi * x[0]).sin(),
        move |x: &[f64], g: &mut [f64]| {
            let e = (0.01 * x[0] + 0.99 * x[1]).exp();
            g[0] = 0.01 * e + 0.45 * pi * (3.0 * pi * x[0]).cos();
            g[1] = 0.99 * e;
        },
    ));
    // HF has inputs (x, y, z): a cubic in x, the exponential trend in (y, z).
    let hf: Arc<dyn ScalarField> = Arc::new(FnField::new(
        3,
        move |x: &[f64]| {
            (0.7 * x[2] + 0.3 * x[1]).exp() + 0.15 * (2.0 * pi * x[2]).sin() + 0.5 * x[0].powi(3)
        },
        move |x: &[f64], g: &mut [f64]| {
            let e = (0.7 * x[2] + 0.3 * x[1]).exp();
            g[0] = 1.5 * x[0] * x[0];
            g[1] = 0.3 * e;
            g[2] = 0.7 * e + 0.3 * pi * (2.0 * pi * x[2]).cos();
        },
    ));
    BenchmarkProblem {
        name: "2du".into(),
        hf: SourceDef::new(hf, Domain::cube(-1.5, 1.5, 3)),
        lf: vec![SourceDef::new(lf, Domain::cube(-1.5, 1.5, 2))],
        relation: None,
        rng_seed: 0,
    }
}

const K5_DIM: usize = 20;

fn k5_lf_value(x: &[f64]) -> f64 {
    let mut acc = 0.8 * (x[0] - 1.0) * (x[0] - 1.0) - 50.0;
    for i in 0..K5_DIM - 1 {
        acc += 0.4 * (2.0 * x[i + 1] - x[i]) * (x[i + 1] - 2.0 * x[i]);
    }
    acc
}

fn k5() -> BenchmarkProblem {
    let lf: Arc<dyn ScalarField> = Arc::new(FnField::new(
        K5_DIM,
        |x: &[f64]| k5_lf_value(x),
        |x: &[f64], g: &mut [f64]| {
            // d/da (2b−a)(b−2a) = 4a − 5b; d/db = 4b − 5a.
            g.fill(0.0);
            g[0] = 1.6 * (x[0] - 1.0);
            for i in 0..K5_DIM - 1 {
                g[i] += 0.4 * (4.0 * x[i] - 5.0 * x[i + 1]);
                g[i + 1] += 0.4 * (4.0 * x[i + 1] - 5.0 * x[i]);
            }
        },
    ));
    // Simplified independent HF route: expanding 1.25·y_L + Σ 0.5·x_i·x_{i+1}
    // + 62.5 collapses to (x₁−1)² + Σ (x_{i+1}−x_i)².
    let hf: Arc<dyn ScalarField> = Arc::new(FnField::new(
        K5_DIM,
        |x: &[f64]| {
            let mut acc = (x[0] - 1.0) * (x[0] - 1.0);
            for i in 0..K5_DIM - 1 {
                let d = x[i + 1] - x[i];
                acc += d * d;
            }
            acc
        },
        |x: &[f64], g: &mut [f64]| {
            g.fill(0.0);
            g[0] = 2.0 * (x[0] - 1.0);
            for i in 0..K5_DIM - 1 {
                let d = x[i + 1] - x[i];
                g[i] -= 2.0 * d;
                g[i + 1] += 2.0 * d;
            }
        },
    ));
    let hf_rel = Arc::clone(&hf);
    BenchmarkProblem {
        name: "k5".into(),
        hf: SourceDef::new(hf, Domain::cube(-3.0, 3.0, K5_DIM)),
        lf: vec![SourceDef::new(lf, Domain::cube(-3.0, 3.0, K5_DIM))],
        relation: Some(Arc::new(move |x: &[f64]| {
            let mut cross = 0.0;
            for i in 0..K5_DIM - 1 {
                cross += 0.5 * x[i] * x[i + 1];
            }
            let rhs = 1.25 * k5_lf_value(x) + cross + 62.5;
            (hf_rel.value(x), rhs)
        })),
        rng_seed: 0,
    }
}

// ───────────────────────── noisy model array (GJG9) ─────────────────────────

/// Default noise-field seed for the GJG9 problem registry entry.
pub const GJG9_DEFAULT_SEED: u64 = 0x474A_4739;

/// Polynomial family `f_{i1,i2}` underlying every GJG9 source.
fn gjg9_core(i1: f64, i2: f64) -> Arc<dyn ScalarField> {
    Arc::new(FnField::new(
        2,
        move |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            (2.0 + 0.5 * a + 0.5 * b + 3.0 * a * b)
                + i1 * (2.0 * a.powi(5) + 2.0 * b.powi(5))
                + i2 * (a * a + b * b + 5.0 * a * a * b * b)
        },
        move |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = 0.5 + 3.0 * b + i1 * 10.0 * a.powi(4) + i2 * (2.0 * a + 10.0 * a * b * b);
            g[1] = 0.5 + 3.0 * a + i1 * 10.0 * b.powi(4) + i2 * (2.0 * b + 10.0 * a * a * b);
        },
    ))
}

/// Multiplies a base field by a frozen multiplicative Gaussian noise field:
/// `y(x) = f(x) · (1 + σ·g(x))` where `g(x)` is a standard normal draw keyed
/// deterministically on `(seed, tag, x)`. The same point always sees the same
/// factor, so the source is a total deterministic function; the factor is
/// locally constant, so `∇y = ∇f · (1 + σ·g)` almost everywhere.
pub struct NoisyField {
    base: Arc<dyn ScalarField>,
    sigma: f64,
    seed: u64,
    tag: u64,
}

impl NoisyField {
    pub fn new(base: Arc<dyn ScalarField>, variance: f64, seed: u64, tag: u64) -> NoisyField {
        NoisyField {
            base,
            sigma: variance.sqrt(),
            seed,
            tag,
        }
    }

    fn factor(&self, x: &[f64]) -> f64 {
        1.0 + self.sigma * standard_normal_at(self.seed, self.tag, x)
    }
}

impl ScalarField for NoisyField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.base.value(x) * self.factor(x)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.base.gradient(x, out);
        let c = self.factor(x);
        for g in out.iter_mut() {
            *g *= c;
        }
    }

    // The noise factor redraws under any input perturbation, so difference
    // quotients of `value` do not approximate `gradient`.
    fn fd_checkable(&self) -> bool {
        false
    }
}

/// Standard normal draw keyed on a point's exact bit pattern.
fn standard_normal_at(seed: u64, tag: u64, x: &[f64]) -> f64 {
    let mut h = mix_seed(seed, tag);
    for v in x {
        h = mix_seed(h, v.to_bits());
    }
    let a = mix_seed(h, 0xA5A5_A5A5);
    let b = mix_seed(h, 0x5A5A_5A5A);
    let u1 = ((a >> 11) as f64 + 1.0) / (1u64 << 53) as f64; // (0, 1]
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64; // [0, 1)
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gjg9(seed: u64) -> BenchmarkProblem {
    let square = Domain::cube(-1.0, 1.0, 2);
    // (core indices, noise variance) for the eight LF sources, then the HF.
    let lf_defs: [(f64, f64, f64); 8] = [
        (0.0, 0.0, 1.0 / 5.0),
        (0.0, 0.0, 1.0 / 10.0),
        (0.0, 0.0, 1.0 / 100.0),
        (0.0, 1.0, 1.0 / 5.0),
        (0.0, 1.0, 1.0 / 10.0),
        (0.0, 1.0, 1.0 / 100.0),
        (1.0, 1.0, 1.0 / 5.0),
        (1.0, 1.0, 1.0 / 10.0),
    ];
    let lf = lf_defs
        .iter()
        .enumerate()
        .map(|(i, (i1, i2, var))| {
            let field: Arc<dyn ScalarField> = Arc::new(NoisyField::new(
                gjg9_core(*i1, *i2),
                *var,
                seed,
                i as u64 + 1,
            ));
            SourceDef::new(field, square.clone())
        })
        .collect();
    let hf: Arc<dyn ScalarField> = Arc::new(NoisyField::new(
        gjg9_core(1.0, 1.0),
        1.0 / 100.0,
        seed,
        0,
    ));
    BenchmarkProblem {
        name: "gjg9".into(),
        hf: SourceDef::new(hf, square),
        lf,
        relation: None,
        rng_seed: seed,
    }
}

// ───────────────────────── tabulated reaction–diffusion QoI ─────────────────────────

/// Bilinear interpolant over a rectilinear `(D_u, D_v)` grid. Lookups clamp
/// to the grid box (constant extension with zero slope outside), matching how
/// other exact sources extend beyond their sampling domains.
pub struct BilinearTable {
    du: Vec<f64>,
    dv: Vec<f64>,
    /// Row-major: `q[i * dv.len() + j]` is the value at `(du[i], dv[j])`.
    q: Vec<f64>,
}

impl BilinearTable {
    pub fn new(du: Vec<f64>, dv: Vec<f64>, q: Vec<f64>) -> Result<BilinearTable> {
        if du.len() < 2 || dv.len() < 2 {
            return Err(Error::Table(
                "grid needs at least 2 distinct values per axis".into(),
            ));
        }
        if q.len() != du.len() * dv.len() {
            return Err(Error::Table(format!(
                "expected {}×{} = {} values, got {}",
                du.len(),
                dv.len(),
                du.len() * dv.len(),
                q.len()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Table("non-finite value in table".into()));
        }
        Ok(BilinearTable { du, dv, q })
    }

    /// The grid's bounding box.
    pub fn domain(&self) -> Domain {
        Domain::new(
            vec![self.du[0], self.dv[0]],
            vec![*self.du.last().unwrap(), *self.dv.last().unwrap()],
        )
    }

    /// Cell index and local coordinate for one axis, with clamping.
    fn locate(grid: &[f64], v: f64) -> (usize, f64, bool) {
        if v <= grid[0] {
            return (0, 0.0, v < grid[0]);
        }
        let last = grid.len() - 1;
        if v >= grid[last] {
            return (last - 1, 1.0, v > grid[last]);
        }
        let hi = grid.partition_point(|g| *g <= v); // first index with grid[hi] > v
        let i = hi - 1;
        let t = (v - grid[i]) / (grid[i + 1] - grid[i]);
        (i, t, false)
    }
}

impl ScalarField for BilinearTable {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (i, tu, _) = Self::locate(&self.du, x[0]);
        let (j, tv, _) = Self::locate(&self.dv, x[1]);
        let nv = self.dv.len();
        let q00 = self.q[i * nv + j];
        let q01 = self.q[i * nv + j + 1];
        let q10 = self.q[(i + 1) * nv + j];
        let q11 = self.q[(i + 1) * nv + j + 1];
        (1.0 - tu) * ((1.0 - tv) * q00 + tv * q01) + tu * ((1.0 - tv) * q10 + tv * q11)
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let (i, tu, u_out) = Self::locate(&self.du, x[0]);
        let (j, tv, v_out) = Self::locate(&self.dv, x[1]);
        let nv = self.dv.len();
        let q00 = self.q[i * nv + j];
        let q01 = self.q[i * nv + j + 1];
        let q10 = self.q[(i + 1) * nv + j];
        let q11 = self.q[(i + 1) * nv + j + 1];
        let hu = self.du[i + 1] - self.du[i];
        let hv = self.dv[j + 1] - self.dv[j];
        out[0] = if u_out {
            0.0
        } else {
            ((1.0 - tv) * (q10 - q00) + tv * (q11 - q01)) / hu
        };
        out[1] = if v_out {
            0.0
        } else {
            ((1.0 - tu) * (q01 - q00) + tu * (q11 - q10)) / hv
        };
    }
}

/// The stated `(D_u, D_v)` parameter box for the reaction–diffusion QoI.
const RD_BOX: (f64, f64) = (1e-3, 1e-2);

/// Parses an RD quantity-of-interest CSV in either accepted layout:
/// wide `d_u,d_v,q_hf,q_lf` (one shared grid) or long `d_u,d_v,q,fidelity`
/// (per-fidelity grids). Scattered (non-grid) data is rejected.
pub fn parse_rd_tables(text: &str) -> Result<(BilinearTable, BilinearTable)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Table("empty file".into()))?
        .split(',')
        .map(|s| s.trim().to_ascii_lowercase())
        .collect();
    let mut hf_rows: Vec<(f64, f64, f64)> = Vec::new();
    let mut lf_rows: Vec<(f64, f64, f64)> = Vec::new();
    let parse_f = |s: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Table(format!("line {line}: `{s}` is not a number")))
    };
    match header
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .as_slice()
    {
        ["d_u", "d_v", "q_hf", "q_lf"] => {
            for (idx, line) in lines.enumerate() {
                let lineno = idx + 2;
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 4 {
                    return Err(Error::Table(format!("line {lineno}: expected 4 columns")));
                }
                let du = parse_f(cols[0], lineno)?;
                let dv = parse_f(cols[1], lineno)?;
                hf_rows.push((du, dv, parse_f(cols[2], lineno)?));
                lf_rows.push((du, dv, parse_f(cols[3], lineno)?));
            }
        }
        ["d_u", "d_v", "q", "fidelity"] => {
            for (idx, line) in lines.enumerate() {
                let lineno = idx + 2;
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 4 {
                    return Err(Error::Table(format!("line {lineno}: expected 4 columns")));
                }
                let row = (
                    parse_f(cols[0], lineno)?,
                    parse_f(cols[1], lineno)?,
                    parse_f(cols[2], lineno)?,
                );
                match cols[3].trim().to_ascii_lowercase().as_str() {
                    "hf" => hf_rows.push(row),
                    "lf" => lf_rows.push(row),
                    other => {
                        return Err(Error::Table(format!(
                            "line {lineno}: fidelity must be hf or lf, got `{other}`"
                        )))
                    }
                }
            }
        }
        _ => {
            return Err(Error::Table(format!(
                "unrecognized header {header:?}; expected d_u,d_v,q_hf,q_lf or d_u,d_v,q,fidelity"
            )))
        }
    }
    Ok((grid_from_rows(&hf_rows)?, grid_from_rows(&lf_rows)?))
}

/// Assembles scattered `(du, dv, q)` rows into a full rectilinear grid,
/// rejecting data that does not cover the grid exactly once per node.
fn grid_from_rows(rows: &[(f64, f64, f64)]) -> Result<BilinearTable> {
    if rows.is_empty() {
        return Err(Error::Table("no rows for one fidelity".into()));
    }
    let mut du: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mut dv: Vec<f64> = rows.iter().map(|r| r.1).collect();
    // Tables are commonly produced by linspace-style generators whose end
    // point can overshoot the interval by a few ulps; allow that much slack.
    let slack = RD_BOX.1 * 1e-12;
    for v in du.iter().chain(dv.iter()) {
        if !v.is_finite() || *v < RD_BOX.0 - slack || *v > RD_BOX.1 + slack {
            return Err(Error::Table(format!(
                "coordinate {v} outside [{}, {}]",
                RD_BOX.0, RD_BOX.1
            )));
        }
    }
    du.sort_by(f64::total_cmp);
    du.dedup();
    dv.sort_by(f64::total_cmp);
    dv.dedup();
    if du.len() * dv.len() != rows.len() {
        return Err(Error::Table(format!(
            "scattered data rejected: {} rows do not fill a {}×{} grid",
            rows.len(),
            du.len(),
            dv.len()
        )));
    }
    let nv = dv.len();
    let mut q = vec![f64::NAN; du.len() * nv];
    for (u, v, val) in rows {
        let i = du.binary_search_by(|g| g.total_cmp(u)).expect("in index");
        let j = dv.binary_search_by(|g| g.total_cmp(v)).expect("in index");
        if !q[i * nv + j].is_nan() {
            return Err(Error::Table(format!("duplicate grid node ({u}, {v})")));
        }
        q[i * nv + j] = *val;
    }
    if q.iter().any(|v| v.is_nan()) {
        return Err(Error::Table("grid has missing or NaN nodes".into()));
    }
    BilinearTable::new(du, dv, q)
}

fn rd_problem_from_tables(hf: BilinearTable, lf: BilinearTable) -> BenchmarkProblem {
    let hf_domain = hf.domain();
    let lf_domain = lf.domain();
    BenchmarkProblem {
        name: "rd".into(),
        hf: SourceDef::new(Arc::new(hf), hf_domain),
        lf: vec![SourceDef::new(Arc::new(lf), lf_domain)],
        relation: None,
        rng_seed: 0,
    }
}

/// Loads a reaction–diffusion QoI problem from a CSV file on disk.
pub fn load_rd_table(path: &std::path::Path) -> Result<BenchmarkProblem> {
    let text = std::fs::read_to_string(path)?;
    let (hf, lf) = parse_rd_tables(&text)?;
    Ok(rd_problem_from_tables(hf, lf))
}

/// The bundled synthetic RD table (used by the `rd` registry entry so the
/// problem works without external data; see the README for the real-data
/// file contract and generator notes).
const RD_SYNTHETIC_CSV: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/data/rd_synthetic.csv"));

fn rd_from_embedded() -> Result<BenchmarkProblem> {
    let (hf, lf) = parse_rd_tables(RD_SYNTHETIC_CSV)?;
    Ok(rd_problem_from_tables(hf, lf))
}

// ── Oracle suite ────────────────────────────────────────────────────────────

/// One oracle verdict: a named check, a human-readable measurement, and
/// whether it passed.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub detail: String,
    pub passed: bool,
}

/// Runs the verification suite for one problem: the closed-form
/// cross-fidelity relation (where one is declared), domain metadata
/// consistency, finiteness of every source at probe points, and a central
/// finite-difference spot check of each source's hand-coded gradient.
pub fn oracle_checks(
    problem: &BenchmarkProblem,
    n_points: usize,
    seed: u64,
) -> Result<Vec<OracleCheck>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6F72_6163));
    let mut out = Vec::new();

    let random_point = |rng: &mut rand_chacha::ChaCha8Rng, domain: &Domain| -> Vec<f64> {
        (0..domain.dim())
            .map(|i| rng.gen_range(domain.lo[i]..domain.hi[i]))
            .collect()
    };

    // Two-route identity, scale-aware residual.
    if problem.has_relation() {
        let mut worst = 0.0f64;
        for _ in 0..n_points {
            let x = random_point(&mut rng, &problem.hf.domain);
            let (lhs, rhs) = problem.relation_at(&x).expect("has_relation checked above");
            let scaled = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
            worst = worst.max(scaled);
        }
        out.push(OracleCheck {
            name: "relation",
            detail: format!("max scaled residual {worst:.3e} over {n_points} points"),
            passed: worst <= 1e-12,
        });
    } else {
        out.push(OracleCheck {
            name: "relation",
            detail: "no closed-form cross-fidelity identity declared — skipped".into(),
            passed: true,
        });
    }

    // Sampling domains agree with each source's input dimension.
    let mut dims_ok = problem.hf.domain.dim() == problem.hf_dim();
    for lf in &problem.lf {
        dims_ok &= lf.domain.dim() == lf.dim();
    }
    out.push(OracleCheck {
        name: "domains",
        detail: format!(
            "HF dim {} and {} LF source(s) match their sampling boxes",
            problem.hf_dim(),
            problem.n_sources()
        ),
        passed: dims_ok,
    });

    // Every source stays finite across its own domain.
    let mut finite_ok = true;
    let sources: Vec<(&str, &SourceDef)> = std::iter::once(("HF", &problem.hf))
        .chain(problem.lf.iter().map(|s| ("LF", s)))
        .collect();
    for (_, src) in &sources {
        let d = src.domain.dim();
        let mut probes = vec![
            src.domain.lo.clone(),
            src.domain.hi.clone(),
            (0..d).map(|i| 0.5 * (src.domain.lo[i] + src.domain.hi[i])).collect(),
        ];
        for _ in 0..32 {
            probes.push(random_point(&mut rng, &src.domain));
        }
        for p in &probes {
            finite_ok &= src.field.value(p).is_finite();
        }
    }
    out.push(OracleCheck {
        name: "finite-values",
        detail: "all sources finite at corners, centers, and random probes".into(),
        passed: finite_ok,
    });

    // Hand-coded gradients against central finite differences. Points stay
    // off the domain edges, and sources with known derivative discontinuities
    // tolerate the occasional straddled kink via a looser vote: at least 4 of
    // 5 points must agree per source. Sources whose values carry pointwise
    // frozen noise are skipped — difference quotients there measure noise.
    let mut grad_ok = true;
    let mut worst_grad = 0.0f64;
    let mut skipped = 0usize;
    for (_, src) in &sources {
        if !src.field.fd_checkable() {
            skipped += 1;
            continue;
        }
        let d = src.domain.dim();
        let mut agree = 0;
        let total = 5;
        for _ in 0..total {
            let x: Vec<f64> = (0..d)
                .map(|i| {
                    let (lo, hi) = (src.domain.lo[i], src.domain.hi[i]);
                    let margin = 0.05 * (hi - lo);
                    rng.gen_range(lo + margin..hi - margin)
                })
                .collect();
            let mut grad = vec![0.0; d];
            src.field.gradient(&x, &mut grad);
            let mut point_ok = true;
            for i in 0..d {
                let eps = 1e-6 * x[i].abs().max(1.0);
                let mut xp = x.clone();
                xp[i] += eps;
                let fp = src.field.value(&xp);
                xp[i] = x[i] - eps;
                let fm = src.field.value(&xp);
                let fd = (fp - fm) / (2.0 * eps);
                let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
                worst_grad = worst_grad.max(err);
                point_ok &= err <= 1e-5;
            }
            agree += point_ok as usize;
        }
        grad_ok &= agree + 1 >= total;
    }
    let skip_note = if skipped > 0 {
        format!("; {skipped} noise-bearing source(s) skipped")
    } else {
        String::new()
    };
    out.push(OracleCheck {
        name: "gradients",
        detail: format!(
            "hand-coded gradients vs finite differences (worst {worst_grad:.3e}){skip_note}"
        ),
        passed: grad_ok,
    });

    Ok(out)
}
