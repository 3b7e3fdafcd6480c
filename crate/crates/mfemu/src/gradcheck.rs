//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker replays a deterministic scalar-valued forward pass while
//! perturbing one parameter coordinate at a time, then compares the central
//! difference against the adjoint from one backward pass. Builders must be
//! pure functions of the current parameter values (fresh tape per call).
//!
//! The standard suites cover every tape primitive, a full forward pass of
//! each architecture family, and the composite training loss with every term
//! active — the layers of trust from single ops to the whole objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor};
use crate::{mix_seed, Result};

/// Outcome of one gradient check: the worst coordinate over all parameters.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// `(tensor label, flat index, autodiff value, finite-difference value)`
    /// behind `max_rel_err`, when any coordinate was checked.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Total coordinates compared.
    pub coords: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor of 1, so near-zero pairs compare
/// absolutely: `|a − b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks `d loss / d p` for every labeled parameter against central finite
/// differences. `build` must recompute the same scalar loss from the current
/// parameter values on the tape it is given.
pub fn check_gradients<F>(params: &[(String, Tensor)], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape) -> Result<Tensor>,
{
    // One reverse pass for all analytic gradients.
    for (_, p) in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();

    let eval = |tape_loss: &F| -> Result<f64> {
        let mut tape = Tape::new();
        Ok(tape_loss(&mut tape)?.item())
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    for ((label, p), grads) in params.iter().zip(&analytic) {
        let base = p.to_vec();
        for i in 0..base.len() {
            let eps = 1e-6 * base[i].abs().max(1.0);
            let mut bumped = base.clone();
            bumped[i] = base[i] + eps;
            p.set_values(&bumped);
            let f_plus = eval(&build)?;
            bumped[i] = base[i] - eps;
            p.set_values(&bumped);
            let f_minus = eval(&build)?;
            p.set_values(&base);
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let err = rel_err(grads[i], fd);
            out.coords += 1;
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = Some((label.clone(), i, grads[i], fd));
            }
        }
    }
    Ok(out)
}

// ── Standard suites ─────────────────────────────────────────────────────────

/// One named gradient check from a standard suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub check: GradCheck,
}

fn rand_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink there (ReLU, |·|):
/// magnitudes in [0.2, 1.2) with random signs, so a half-step finite
/// difference never crosses the kink.
fn rand_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.2);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn entry(
    name: &str,
    params: &[(String, Tensor)],
    build: impl Fn(&mut Tape) -> Result<Tensor>,
) -> Result<SuiteEntry> {
    Ok(SuiteEntry {
        name: name.to_string(),
        check: check_gradients(params, build)?,
    })
}

/// Gradient checks for every tape primitive, each wrapped in just enough
/// structure to make the adjoint nontrivial (random constant cofactors, so a
/// dropped transpose or scale shows up as a mismatch).
pub fn primitive_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6772_6164));
    let mut out = Vec::new();

    // Random trainables and a random constant cofactor of matching shape.
    let a = Tensor::param_matrix(2, 3, rand_values(&mut rng, 6, -1.5, 1.5))?;
    let b = Tensor::param_matrix(3, 2, rand_values(&mut rng, 6, -1.5, 1.5))?;
    let c23 = Tensor::matrix(2, 3, rand_values(&mut rng, 6, -1.0, 1.0))?;
    let c22 = Tensor::matrix(2, 2, rand_values(&mut rng, 4, -1.0, 1.0))?;
    let c32 = Tensor::matrix(3, 2, rand_values(&mut rng, 6, -1.0, 1.0))?;
    let row3 = Tensor::param_vector(rand_values(&mut rng, 3, -1.0, 1.0));
    let ab = [("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
    let a_only = [("a".to_string(), a.clone())];

    out.push(entry("matmul", &ab, |tape| {
        let p = tape.matmul(&a, &b)?;
        let w = tape.mul(&p, &c22)?;
        Ok(tape.sum(&w))
    })?);
    out.push(entry("transpose", &a_only, |tape| {
        let t = tape.transpose(&a)?;
        let w = tape.mul(&t, &c32)?;
        Ok(tape.sum(&w))
    })?);
    out.push(entry("add", &ab, |tape| {
        let t = tape.transpose(&b)?;
        let s = tape.add(&a, &t)?;
        let w = tape.mul(&s, &c23)?;
        Ok(tape.sum(&w))
    })?);
    out.push(entry(
        "add/row-broadcast-right",
        &[("a".to_string(), a.clone()), ("row".to_string(), row3.clone())],
        |tape| {
            let s = tape.add(&a, &row3)?;
            let w = tape.mul(&s, &c23)?;
            Ok(tape.sum(&w))
        },
    )?);
    out.push(entry(
        "add/row-broadcast-left",
        &[("a".to_string(), a.clone()), ("row".to_string(), row3.clone())],
        |tape| {
            let s = tape.add(&row3, &a)?;
            let w = tape.mul(&s, &c23)?;
            Ok(tape.sum(&w))
        },
    )?);
    out.push(entry("sub", &ab, |tape| {
        let t = tape.transpose(&b)?;
        let s = tape.sub(&a, &t)?;
        let q = tape.square(&s);
        Ok(tape.sum(&q))
    })?);
    out.push(entry(
        "sub/row-broadcast-right",
        &[("a".to_string(), a.clone()), ("row".to_string(), row3.clone())],
        |tape| {
            let s = tape.sub(&a, &row3)?;
            let q = tape.square(&s);
            Ok(tape.sum(&q))
        },
    )?);
    out.push(entry("mul", &ab, |tape| {
        let t = tape.transpose(&b)?;
        let m = tape.mul(&a, &t)?;
        Ok(tape.sum(&m))
    })?);
    out.push(entry("scale", &a_only, |tape| {
        let s = tape.scale(&a, -1.7);
        let q = tape.square(&s);
        Ok(tape.sum(&q))
    })?);
    out.push(entry("add_scalar", &a_only, |tape| {
        let s = tape.add_scalar(&a, 0.37);
        let q = tape.square(&s);
        Ok(tape.sum(&q))
    })?);
    out.push(entry("sum", &a_only, |tape| {
        let w = tape.mul(&a, &c23)?;
        Ok(tape.sum(&w))
    })?);
    out.push(entry("mean", &a_only, |tape| {
        let w = tape.mul(&a, &c23)?;
        Ok(tape.mean(&w))
    })?);

    // Smooth unaries on generic values.
    for (name, apply) in [
        ("sin", Tape::sin as fn(&mut Tape, &Tensor) -> Tensor),
        ("cos", Tape::cos),
        ("tanh", Tape::tanh),
        ("silu", Tape::silu),
        ("square", Tape::square),
    ] {
        out.push(entry(name, &a_only, |tape| {
            let u = apply(tape, &a);
            let w = tape.mul(&u, &c23)?;
            Ok(tape.sum(&w))
        })?);
    }

    // Kinked unaries on values bounded away from the kink.
    let k = Tensor::param_matrix(2, 3, rand_off_zero(&mut rng, 6))?;
    let k_only = [("k".to_string(), k.clone())];
    for (name, apply) in [
        ("relu", Tape::relu as fn(&mut Tape, &Tensor) -> Tensor),
        ("abs", Tape::abs),
    ] {
        out.push(entry(name, &k_only, |tape| {
            let u = apply(tape, &k);
            let w = tape.mul(&u, &c23)?;
            Ok(tape.sum(&w))
        })?);
    }

    // sqrt needs strictly positive input.
    let pos = Tensor::param_matrix(2, 3, rand_values(&mut rng, 6, 0.5, 2.0))?;
    let pos_only = [("pos".to_string(), pos.clone())];
    out.push(entry("sqrt", &pos_only, |tape| {
        let r = tape.sqrt(&pos);
        let w = tape.mul(&r, &c23)?;
        Ok(tape.sum(&w))
    })?);

    // Column slicing and concatenation.
    let wide = Tensor::param_matrix(2, 5, rand_values(&mut rng, 10, -1.0, 1.0))?;
    let wide_only = [("wide".to_string(), wide.clone())];
    out.push(entry("slice_cols", &wide_only, |tape| {
        let s = tape.slice_cols(&wide, 1, 4)?;
        let w = tape.mul(&s, &c23)?;
        Ok(tape.sum(&w))
    })?);
    let c25 = Tensor::matrix(2, 5, rand_values(&mut rng, 10, -1.0, 1.0))?;
    out.push(entry("concat_cols", &ab, |tape| {
        let t = tape.transpose(&b)?;
        let joined = tape.concat_cols(&[&a, &t])?;
        let s = tape.slice_cols(&joined, 0, 5)?;
        let w = tape.mul(&s, &c25)?;
        Ok(tape.sum(&w))
    })?);

    // KAN basis expansion, inputs inside the grid support.
    let knots = crate::spline::uniform_knots(-1.0, 1.0, 5, 3);
    let n_basis = crate::spline::basis_count(&knots, 3);
    let kx = Tensor::param_matrix(3, 2, rand_values(&mut rng, 6, -0.85, 0.85))?;
    let kc = Tensor::matrix(3, 2 * n_basis, rand_values(&mut rng, 6 * n_basis, -1.0, 1.0))?;
    let kx_only = [("kx".to_string(), kx.clone())];
    out.push(entry("kan_basis", &kx_only, |tape| {
        let bases = tape.kan_basis(&kx, &knots, 3)?;
        let w = tape.mul(&bases, &kc)?;
        Ok(tape.sum(&w))
    })?);

    // Scalar-field evaluation uses the field's own exact gradient rows.
    let field = crate::field::FnField::new(
        2,
        |u: &[f64]| (3.0 * u[0]).sin() + u[1] * u[1] * u[1],
        |u: &[f64], g: &mut [f64]| {
            g[0] = 3.0 * (3.0 * u[0]).cos();
            g[1] = 3.0 * u[1] * u[1];
        },
    );
    let fx = Tensor::param_matrix(4, 2, rand_values(&mut rng, 8, -1.0, 1.0))?;
    let fc = Tensor::matrix(4, 1, rand_values(&mut rng, 4, -1.0, 1.0))?;
    let fx_only = [("fx".to_string(), fx.clone())];
    out.push(entry("field_eval", &fx_only, |tape| {
        let y = tape.field_eval(&fx, &field)?;
        let w = tape.mul(&y, &fc)?;
        Ok(tape.sum(&w))
    })?);

    Ok(out)
}

/// Full forward passes of each architecture family: the mean squared output
/// of a two-hidden-layer network, checked with respect to every parameter
/// (for KAN this includes the spline coefficient path).
pub fn architecture_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::network::{forward, init_network, NetworkKind, NetworkSpec};
    let mut out = Vec::new();
    for kind in [NetworkKind::Mlp, NetworkKind::Siren, NetworkKind::Kan] {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6172_6300 + kind as u64));
        let spec = NetworkSpec::new(kind, 2, 1, vec![5, 4]);
        let params = init_network(&spec, &mut rng)?;
        let named = params.named();
        let x = Tensor::matrix(6, 2, rand_values(&mut rng, 12, -0.9, 0.9))?;
        let name = format!("forward/{}", kind.as_str());
        out.push(SuiteEntry {
            name: name.clone(),
            check: check_gradients(&named, |tape| {
                let y = forward(&spec, &params, tape, &x)?;
                let q = tape.square(&y);
                Ok(tape.mean(&q))
            })?,
        });
    }
    Ok(out)
}

/// The composite training loss — error + regularization + encoding terms,
/// every weight nonzero, learned LF sources, nonlinear encoders, and sample
/// boxes tight enough that the interval score is active — checked with
/// respect to every parameter group at once.
pub fn composite_loss_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use crate::benchmarks::make_problem;
    use crate::encoding::EncoderMode;
    use crate::loss::{total_loss, Batch, HyperRectangle, LossWeights};
    use crate::mfmodel::{build_mf_model, MfModelSpec, Tier};
    use crate::network::NetworkKind;
    use crate::sampling::{build_datasets, fit_normalizers, DesignSpec};

    let problem = make_problem("k4u")?;
    let design = DesignSpec::for_problem(&problem, 4, mix_seed(seed, 0x636C_6F73), 0);
    let data = build_datasets(&problem, &design)?;
    let norms = fit_normalizers(&data);
    let spec = MfModelSpec {
        family: NetworkKind::Mlp,
        tier: Tier::Three,
        encoder_mode: EncoderMode::Nonlinear,
        seed: mix_seed(seed, 0x6D6F_6465),
    };
    let model = build_mf_model(&problem, &norms, &spec)?;

    let hf = Batch::new(
        Tensor::matrix(
            data.hf_train.len(),
            data.hf_train.dim,
            norms.x_h.normalize_all(&data.hf_train.xs),
        )?,
        Tensor::matrix(data.hf_train.len(), 1, norms.y_h.normalize_all(&data.hf_train.ys))?,
    )?;
    let mut lf_batches = Vec::new();
    let mut boxes = Vec::new();
    for (i, d) in data.lf_train.iter().enumerate() {
        lf_batches.push(Some(Batch::new(
            Tensor::matrix(d.len(), d.dim, norms.x_l[i].normalize_all(&d.xs))?,
            Tensor::matrix(d.len(), 1, norms.y_l[i].normalize_all(&d.ys))?,
        )?));
        // Deliberately tight boxes: identity-initialized encoders leave many
        // normalized points outside, so the interval score contributes.
        boxes.push(HyperRectangle::cube(-0.25, 0.25, d.dim));
    }
    let weights = LossWeights::new(1e-3, 1e-3, 1e-3, 1.0)?;
    let named = model.trainable_parameters().all();
    let model_ref = &model;
    let (hf_x, hf_y) = (&hf.x, &hf.y);

    // Self-check: with λ_D zeroed the loss must drop, or the tight boxes
    // failed to engage the interval-score path this suite claims to cover.
    {
        let no_d = LossWeights::new(1e-3, 1e-3, 1e-3, 0.0)?;
        let mut tape = Tape::new();
        let pred = model_ref.predict_hf(&mut tape, hf_x)?;
        let full = total_loss(model_ref, &mut tape, &pred, hf_y, &lf_batches, &boxes, &weights)?
            .item();
        let reduced =
            total_loss(model_ref, &mut tape, &pred, hf_y, &lf_batches, &boxes, &no_d)?.item();
        if !(full > reduced) {
            return Err(crate::Error::Config(
                "composite-loss gradcheck setup leaves the interval score inactive".into(),
            ));
        }
    }

    let check = check_gradients(&named, move |tape| {
        let pred = model_ref.predict_hf(tape, hf_x)?;
        total_loss(model_ref, tape, &pred, hf_y, &lf_batches, &boxes, &weights)
    })?;
    Ok(vec![SuiteEntry {
        name: "loss/composite".to_string(),
        check,
    }])
}

/// Every standard suite in report order: primitives, architectures, the
/// composite loss.
pub fn standard_suites(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = primitive_suite(seed)?;
    out.extend(architecture_suite(seed)?);
    out.extend(composite_loss_suite(seed)?);
    Ok(out)
}
