//! The composite training objective: data-fit error, ℓ2 regularization of the
//! nonlinear and learned-LF parameter groups, and — for encoded models — the
//! additivity-anchoring and extrapolation-penalty terms.
//!
//! All terms are recorded on the tape, so one `backward` on the total loss
//! reaches every trainable parameter. Zero-weighted terms are skipped rather
//! than scaled by zero: skipping keeps dead subgraphs off the tape and avoids
//! the `0 · ∞` adjoint a zero-scaled `sqrt(0)` would produce.

use crate::field::Domain;
use crate::mfmodel::{HfPrediction, MfModel, SingleFidelityModel};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Axis-aligned box `Π [a_i, b_i]` used by the interval score; same invariants
/// as a sampling domain, so the one type serves both purposes.
pub use crate::field::Domain as HyperRectangle;

/// The regularization-strength choice set explored during hyperparameter
/// search; arbitrary nonnegative values are accepted through [`LossWeights`].
pub const LAMBDA_CHOICES: [f64; 4] = [0.0, 1e-5, 1e-3, 1.0];

// ── Weights ─────────────────────────────────────────────────────────────────

/// Nonnegative multipliers for the four optional loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// λ_L: ℓ2 norms of learned low-fidelity surrogate parameters.
    pub lambda_l: f64,
    /// λ_H^nl: ℓ2 norm of the nonlinear-block parameters.
    pub lambda_h_nl: f64,
    /// λ_T: squared gap between the linear-only and full predictions.
    pub lambda_t: f64,
    /// λ_D: interval score of encoded coordinates against LF sample boxes.
    pub lambda_d: f64,
}

impl LossWeights {
    pub fn new(lambda_l: f64, lambda_h_nl: f64, lambda_t: f64, lambda_d: f64) -> Result<LossWeights> {
        for (name, v) in [
            ("lambda_l", lambda_l),
            ("lambda_h_nl", lambda_h_nl),
            ("lambda_t", lambda_t),
            ("lambda_d", lambda_d),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            lambda_l,
            lambda_h_nl,
            lambda_t,
            lambda_d,
        })
    }

    /// All terms off: the objective reduces to the data-fit error.
    pub fn zero() -> LossWeights {
        LossWeights {
            lambda_l: 0.0,
            lambda_h_nl: 0.0,
            lambda_t: 0.0,
            lambda_d: 0.0,
        }
    }
}

// ── Batches ─────────────────────────────────────────────────────────────────

/// One labeled batch: inputs `[m, k]` and targets `[m, 1]`.
#[derive(Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn new(x: Tensor, y: Tensor) -> Result<Batch> {
        if x.shape().len() != 2 {
            return Err(Error::BadShape {
                op: "Batch::new",
                expected: "a 2-D input matrix".into(),
                got: x.shape(),
            });
        }
        if y.shape() != vec![x.rows(), 1] {
            return Err(Error::ShapeMismatch {
                op: "Batch::new",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ── Term helpers ────────────────────────────────────────────────────────────

/// Folds scalar terms with `add`; no terms yields a constant zero.
fn add_terms(tape: &mut Tape, terms: Vec<Tensor>) -> Tensor {
    let mut it = terms.into_iter();
    match it.next() {
        None => Tensor::scalar(0.0),
        Some(first) => it.fold(first, |acc, t| {
            tape.add(&acc, &t).expect("scalar terms always conform")
        }),
    }
}

/// Mean squared difference between a prediction and its targets.
fn mse_term(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(&d);
    Ok(tape.mean(&sq))
}

/// Sum of squares over every element of a parameter group; `None` if the
/// group holds no elements.
fn sum_of_squares(tape: &mut Tape, params: &[(String, Tensor)]) -> Option<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (_, t) in params {
        if t.numel() == 0 {
            continue;
        }
        let sq = tape.square(t);
        let s = tape.sum(&sq);
        acc = Some(match acc {
            Some(a) => tape.add(&a, &s).expect("scalar terms always conform"),
            None => s,
        });
    }
    acc
}

/// ℓ2 norm of a group, skipping the `sqrt` when the group is exactly zero:
/// the norm has a kink there, and the zero subgradient keeps adjoints finite.
fn l2_norm(tape: &mut Tape, params: &[(String, Tensor)]) -> Option<Tensor> {
    let ss = sum_of_squares(tape, params)?;
    if ss.item() == 0.0 {
        return None;
    }
    Some(tape.sqrt(&ss))
}

// ── Loss terms ──────────────────────────────────────────────────────────────

/// Data-fit error: the mean squared HF residual of an existing prediction
/// plus, for each learned LF source, the mean squared residual on its own
/// batch. Exact sources contribute nothing; a learned source without a batch
/// is an error.
pub fn loss_err(
    model: &MfModel,
    tape: &mut Tape,
    pred: &HfPrediction,
    y_h: &Tensor,
    lf_batches: &[Option<Batch>],
) -> Result<Tensor> {
    if pred.total.rows() == 0 {
        return Err(Error::Config("loss_err requires a nonempty HF batch".into()));
    }
    if lf_batches.len() != model.n_sources() {
        return Err(Error::Config(format!(
            "expected {} LF batch slots, got {}",
            model.n_sources(),
            lf_batches.len()
        )));
    }
    let mut terms = vec![mse_term(tape, &pred.total, y_h)?];
    for (i, (src, batch)) in model.sources.iter().zip(lf_batches).enumerate() {
        if !src.is_learned() {
            continue;
        }
        let Some(batch) = batch else {
            return Err(Error::Config(format!(
                "learned LF source {i} requires a training batch"
            )));
        };
        if batch.is_empty() {
            return Err(Error::Config(format!(
                "learned LF source {i} received an empty batch"
            )));
        }
        let z = model.predict_lf(tape, i, &batch.x)?;
        terms.push(mse_term(tape, &z, &batch.y)?);
    }
    Ok(add_terms(tape, terms))
}

/// Regularization: `λ_H^nl · ‖θ_H^nl‖₂ + λ_L · Σ_i ‖θ_{L_i}‖₂` — plain norms,
/// not squared norms. The linear block and the encoders are untouched.
pub fn loss_reg(model: &MfModel, tape: &mut Tape, weights: &LossWeights) -> Tensor {
    let groups = model.trainable_parameters();
    let mut terms = Vec::new();
    if weights.lambda_h_nl > 0.0 {
        if let Some(norm) = l2_norm(tape, &groups.nl) {
            terms.push(tape.scale(&norm, weights.lambda_h_nl));
        }
    }
    if weights.lambda_l > 0.0 {
        let mut norms = Vec::new();
        for group in &groups.lf {
            if let Some(norm) = l2_norm(tape, group) {
                norms.push(norm);
            }
        }
        if !norms.is_empty() {
            let s = add_terms(tape, norms);
            terms.push(tape.scale(&s, weights.lambda_l));
        }
    }
    add_terms(tape, terms)
}

/// Average ℓ1 distance of a point cloud `[m, p]` to an axis-aligned box:
/// `(1/m) Σ_j Σ_i [relu(a_i − s_i) + relu(s_i − b_i)]`. Differentiable with
/// respect to the points; an empty cloud scores 0.
pub fn interval_score(tape: &mut Tape, points: &Tensor, rect: &HyperRectangle) -> Result<Tensor> {
    if points.shape().len() != 2 || points.cols() != rect.dim() {
        return Err(Error::BadShape {
            op: "interval_score",
            expected: format!("[m, {}] points", rect.dim()),
            got: points.shape(),
        });
    }
    let m = points.rows();
    if m == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let lo = Tensor::vector(rect.lo.clone());
    let hi = Tensor::vector(rect.hi.clone());
    let below = tape.sub(&lo, points)?;
    let below = tape.relu(&below);
    let above = tape.sub(points, &hi)?;
    let above = tape.relu(&above);
    let s_below = tape.sum(&below);
    let s_above = tape.sum(&above);
    let total = tape.add(&s_below, &s_above).expect("scalar terms always conform");
    Ok(tape.scale(&total, 1.0 / m as f64))
}

/// Encoding terms: `λ_T · Σ_batch (ŷ_H^l − ŷ_H)²` (which equals
/// `λ_T · Σ (ŷ_H^nl)²` by additivity) plus `λ_D · Σ_i IS(T_i(X_H); box_i)`,
/// where each box bounds that source's LF training inputs.
pub fn loss_enc(
    model: &MfModel,
    tape: &mut Tape,
    pred: &HfPrediction,
    lf_sample_boxes: &[HyperRectangle],
    weights: &LossWeights,
) -> Result<Tensor> {
    if lf_sample_boxes.len() != model.n_sources() {
        return Err(Error::Config(format!(
            "expected {} LF sample boxes, got {}",
            model.n_sources(),
            lf_sample_boxes.len()
        )));
    }
    let mut terms = Vec::new();
    if weights.lambda_t > 0.0 {
        let gap = tape.sub(&pred.linear, &pred.total)?;
        let sq = tape.square(&gap);
        let s = tape.sum(&sq);
        terms.push(tape.scale(&s, weights.lambda_t));
    }
    if weights.lambda_d > 0.0 {
        let mut scores = Vec::new();
        for (t, rect) in pred.encoded.iter().zip(lf_sample_boxes) {
            scores.push(interval_score(tape, t, rect)?);
        }
        let s = add_terms(tape, scores);
        terms.push(tape.scale(&s, weights.lambda_d));
    }
    Ok(add_terms(tape, terms))
}

/// The full objective for a multi-fidelity model: `L_Err + L_Reg`, plus
/// `L_Enc` when any encoder is active (mode ≠ none).
pub fn total_loss(
    model: &MfModel,
    tape: &mut Tape,
    pred: &HfPrediction,
    y_h: &Tensor,
    lf_batches: &[Option<Batch>],
    lf_sample_boxes: &[HyperRectangle],
    weights: &LossWeights,
) -> Result<Tensor> {
    let err = loss_err(model, tape, pred, y_h, lf_batches)?;
    let reg = loss_reg(model, tape, weights);
    let mut out = tape.add(&err, &reg).expect("scalar terms always conform");
    let encoded = model
        .encoder_specs
        .iter()
        .any(|s| s.mode != crate::encoding::EncoderMode::None);
    if encoded {
        let enc = loss_enc(model, tape, pred, lf_sample_boxes, weights)?;
        out = tape.add(&out, &enc).expect("scalar terms always conform");
    }
    Ok(out)
}

/// The objective for a single-fidelity baseline: mean squared error plus
/// `λ_H^nl` times the ℓ2 norm of its (only) parameter group.
pub fn sf_total_loss(
    model: &SingleFidelityModel,
    tape: &mut Tape,
    pred: &Tensor,
    y: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    if pred.rows() == 0 {
        return Err(Error::Config("sf_total_loss requires a nonempty batch".into()));
    }
    let mut terms = vec![mse_term(tape, pred, y)?];
    if weights.lambda_h_nl > 0.0 {
        let named = model.named_parameters();
        if let Some(norm) = l2_norm(tape, &named) {
            terms.push(tape.scale(&norm, weights.lambda_h_nl));
        }
    }
    Ok(add_terms(tape, terms))
}

/// Tight bounding box of each LF training input set, the reference regions
/// for the interval-score penalty.
pub fn lf_sample_boxes(lf_train: &[crate::sampling::Dataset]) -> Result<Vec<HyperRectangle>> {
    lf_train
        .iter()
        .enumerate()
        .map(|(i, d)| {
            Domain::bounding_box(&d.xs, d.dim).ok_or_else(|| {
                Error::Config(format!("LF source {i} has no samples to bound"))
            })
        })
        .collect()
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_problem, BenchmarkProblem, Which};
    use crate::encoding::EncoderMode;
    use crate::mfmodel::{build_mf_model, MfModelSpec, Tier};
    use crate::network::NetworkKind;
    use crate::sampling::{AffineNormalizer, Normalizers};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_norms(problem: &BenchmarkProblem) -> Normalizers {
        Normalizers {
            x_h: AffineNormalizer::identity(problem.hf_dim()),
            y_h: AffineNormalizer::identity(1),
            x_l: problem
                .lf
                .iter()
                .map(|s| AffineNormalizer::identity(s.dim()))
                .collect(),
            y_l: problem.lf.iter().map(|_| AffineNormalizer::identity(1)).collect(),
        }
    }

    fn model_on(problem: &BenchmarkProblem, tier: Tier, mode: EncoderMode, seed: u64) -> MfModel {
        let spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier,
            encoder_mode: mode,
            seed,
        };
        build_mf_model(problem, &identity_norms(problem), &spec).unwrap()
    }

    #[test]
    fn weights_reject_negative_or_nonfinite() {
        assert!(LossWeights::new(0.0, 1e-3, 1.0, 1e-5).is_ok());
        assert!(LossWeights::new(-1e-9, 0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN, 0.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn interval_score_hand_values() {
        let mut tape = Tape::new();
        // Single point (2, 0.5) against [0,1]²: only the first coordinate
        // exceeds, by 1.
        let p = Tensor::matrix(1, 2, vec![2.0, 0.5]).unwrap();
        let s = interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 2)).unwrap();
        assert_eq!(s.item(), 1.0);
        // {(−1), (2)} against [0,1]: (1 + 1)/2.
        let p = Tensor::matrix(2, 1, vec![-1.0, 2.0]).unwrap();
        let s = interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 1)).unwrap();
        assert_eq!(s.item(), 1.0);
        // All points inside (boundary included) → 0.
        let p = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let s = interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 2)).unwrap();
        assert_eq!(s.item(), 0.0);
        // One point nudged outside → strictly positive.
        let p = Tensor::matrix(2, 2, vec![0.5, 0.5, 1.0 + 1e-9, 0.5]).unwrap();
        let s = interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 2)).unwrap();
        assert!(s.item() > 0.0);
        // Empty cloud → 0.
        let p = Tensor::new(vec![0, 2], vec![], false).unwrap();
        let s = interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 2)).unwrap();
        assert_eq!(s.item(), 0.0);
        // Dimension mismatch rejected.
        let p = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 2)).is_err());
    }

    #[test]
    fn interval_score_is_translation_invariant() {
        // Dyadic coordinates and shift: the shifted subtractions are exact,
        // so the scores must agree bitwise.
        let pts = vec![0.25, -0.5, 1.75, 0.125, -2.0, 0.75];
        let rect = Domain::new(vec![-1.0, -0.25], vec![0.5, 1.0]);
        let shift = [2.5, -3.75];
        let shifted: Vec<f64> = pts
            .chunks(2)
            .flat_map(|row| [row[0] + shift[0], row[1] + shift[1]])
            .collect();
        let rect_shifted = Domain::new(
            vec![rect.lo[0] + shift[0], rect.lo[1] + shift[1]],
            vec![rect.hi[0] + shift[0], rect.hi[1] + shift[1]],
        );
        let mut tape = Tape::new();
        let a = interval_score(&mut tape, &Tensor::matrix(3, 2, pts).unwrap(), &rect).unwrap();
        let b = interval_score(
            &mut tape,
            &Tensor::matrix(3, 2, shifted).unwrap(),
            &rect_shifted,
        )
        .unwrap();
        assert_eq!(a.item(), b.item());
        assert!(a.item() > 0.0);
    }

    #[test]
    fn interval_score_gradient_is_the_relu_subgradient() {
        // Points (−1) and (2) against [0,1]: d/ds of (1/m)Σ relu terms is
        // −1/m below the box and +1/m above it.
        let p = Tensor::param_matrix(2, 1, vec![-1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let s = interval_score(&mut tape, &p, &Domain::cube(0.0, 1.0, 1)).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(p.grad().unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn perfect_fit_wiring_zeroes_the_error() {
        let problem = make_problem("k1").unwrap();
        let model = model_on(&problem, Tier::Two, EncoderMode::Linear, 3);
        model.lin_weight.set_values(&[-20.0, 2.0]);
        model.lin_bias.set_values(&[20.0]);
        for (_, t) in model.trainable_parameters().nl {
            t.set_values(&vec![0.0; t.numel()]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
        let ys = problem.evaluate(Which::Hf, &xs).unwrap();
        let x = Tensor::matrix(50, 1, xs).unwrap();
        let y = Tensor::matrix(50, 1, ys).unwrap();
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        let err = loss_err(&model, &mut tape, &pred, &y, &[None]).unwrap();
        assert!(err.item() <= 1e-20, "loss_err = {}", err.item());
    }

    #[test]
    fn single_point_residual_squares() {
        // ŷ − y = 0.5 on one HF point → mean squared error 0.25 exactly.
        let problem = make_problem("k1").unwrap();
        let model = model_on(&problem, Tier::Two, EncoderMode::None, 4);
        model.lin_weight.set_values(&[0.0, 0.0]);
        model.lin_bias.set_values(&[0.5]);
        for (_, t) in model.trainable_parameters().nl {
            t.set_values(&vec![0.0; t.numel()]);
        }
        let x = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        let y = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        let err = loss_err(&model, &mut tape, &pred, &y, &[None]).unwrap();
        assert_eq!(err.item(), 0.25);
    }

    #[test]
    fn learned_sources_require_batches_and_exact_sources_ignore_them() {
        let problem = make_problem("k1").unwrap();
        let x = Tensor::matrix(2, 1, vec![0.2, 0.8]).unwrap();
        let y = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();

        // Exact source: a supplied batch changes nothing vs None.
        let model = model_on(&problem, Tier::Two, EncoderMode::None, 5);
        let lf_x = Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let lf_y = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let batch = Batch::new(lf_x.clone(), lf_y.clone()).unwrap();
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        let with = loss_err(&model, &mut tape, &pred, &y, &[Some(batch.clone())]).unwrap();
        let without = loss_err(&model, &mut tape, &pred, &y, &[None]).unwrap();
        assert_eq!(with.item(), without.item());

        // Learned source: None or an empty batch is an error; a real batch
        // adds the LF mean-squared residual.
        let model = model_on(&problem, Tier::Three, EncoderMode::None, 5);
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        assert!(loss_err(&model, &mut tape, &pred, &y, &[None]).is_err());
        let empty = Batch::new(
            Tensor::new(vec![0, 1], vec![], false).unwrap(),
            Tensor::new(vec![0, 1], vec![], false).unwrap(),
        )
        .unwrap();
        assert!(loss_err(&model, &mut tape, &pred, &y, &[Some(empty)]).is_err());
        let hf_only = mse_term(&mut tape, &pred.total, &y).unwrap();
        let full = loss_err(&model, &mut tape, &pred, &y, &[Some(batch)]).unwrap();
        let mut lf_tape = Tape::new();
        let z = model.predict_lf(&mut lf_tape, 0, &lf_x).unwrap();
        let lf_term = mse_term(&mut lf_tape, &z, &lf_y).unwrap();
        assert!((full.item() - (hf_only.item() + lf_term.item())).abs() <= 1e-15);
        // Wrong slot count rejected.
        assert!(loss_err(&model, &mut tape, &pred, &y, &[]).is_err());
    }

    #[test]
    fn regularization_is_an_unsquared_norm_over_the_right_groups() {
        let problem = make_problem("k1").unwrap();
        let model = model_on(&problem, Tier::Two, EncoderMode::Linear, 6);
        // All λ zero → constant zero, no gradient anywhere.
        let mut tape = Tape::new();
        let zero = loss_reg(&model, &mut tape, &LossWeights::zero());
        assert_eq!(zero.item(), 0.0);
        assert!(!zero.requires_grad());

        // Nonlinear group with a single nonzero weight 3 → λ · 3.
        for (_, t) in model.trainable_parameters().nl {
            t.set_values(&vec![0.0; t.numel()]);
        }
        let groups = model.trainable_parameters();
        let (_, first) = &groups.nl[0];
        let mut vals = vec![0.0; first.numel()];
        vals[0] = 3.0;
        first.set_values(&vals);
        let weights = LossWeights::new(1.0, 1e-3, 0.0, 0.0).unwrap();
        let mut tape = Tape::new();
        let reg = loss_reg(&model, &mut tape, &weights);
        // Exact sources: the λ_L = 1 term contributes nothing.
        assert!((reg.item() - 3e-3).abs() <= 1e-18);
    }

    #[test]
    fn learned_lf_regularization_sums_per_source_norms() {
        let problem = make_problem("k4d").unwrap(); // two LF sources
        let model = model_on(&problem, Tier::Three, EncoderMode::None, 7);
        let groups = model.trainable_parameters();
        let mut want = 0.0;
        for group in &groups.lf {
            let ss: f64 = group
                .iter()
                .flat_map(|(_, t)| t.to_vec())
                .map(|v| v * v)
                .sum();
            want += ss.sqrt();
        }
        let weights = LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let mut tape = Tape::new();
        let reg = loss_reg(&model, &mut tape, &weights);
        assert!((reg.item() - want).abs() <= 1e-12 * want.abs());

        // Concatenating the two sources into one norm would give a different
        // (smaller) number; make sure we are not doing that.
        let all: Vec<f64> = groups
            .lf
            .iter()
            .flatten()
            .flat_map(|(_, t)| t.to_vec())
            .collect();
        let concatenated = all.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((reg.item() - concatenated).abs() > 1e-6);
    }

    #[test]
    fn encoding_loss_matches_the_nonlinear_magnitude_identity() {
        let problem = make_problem("k1").unwrap();
        let model = model_on(&problem, Tier::Two, EncoderMode::Nonlinear, 8);
        // Random nonzero nonlinear block output: perturb params.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (_, t) in model.trainable_parameters().nl {
            let vals: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            t.set_values(&vals);
        }
        let x = Tensor::matrix(6, 1, (0..6).map(|i| i as f64 / 5.0).collect()).unwrap();
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        let weights = LossWeights::new(0.0, 0.0, 0.7, 0.0).unwrap();
        let boxes = vec![Domain::cube(0.0, 1.0, 1)];
        let enc = loss_enc(&model, &mut tape, &pred, &boxes, &weights).unwrap();
        let want: f64 = pred.nonlinear.to_vec().iter().map(|v| 0.7 * v * v).sum();
        assert!(
            (enc.item() - want).abs() <= 1e-15 * want.abs().max(1.0),
            "{} vs {want}",
            enc.item()
        );
    }

    #[test]
    fn identity_encoders_inside_boxes_score_zero() {
        let problem = make_problem("k1").unwrap();
        let model = model_on(&problem, Tier::Two, EncoderMode::Linear, 9);
        let x = Tensor::matrix(4, 1, vec![0.1, 0.4, 0.6, 0.9]).unwrap();
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        let weights = LossWeights::new(0.0, 0.0, 0.0, 1.0).unwrap();
        let boxes = vec![Domain::cube(0.0, 1.0, 1)];
        let enc = loss_enc(&model, &mut tape, &pred, &boxes, &weights).unwrap();
        assert_eq!(enc.item(), 0.0);
        // Both λ zero → zero regardless of geometry.
        let off = loss_enc(&model, &mut tape, &pred, &boxes, &LossWeights::zero()).unwrap();
        assert_eq!(off.item(), 0.0);
        // Missing boxes rejected.
        assert!(loss_enc(&model, &mut tape, &pred, &[], &weights).is_err());
    }

    #[test]
    fn total_loss_adds_encoding_terms_only_for_encoded_models() {
        let problem = make_problem("k1").unwrap();
        let x = Tensor::matrix(5, 1, vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let ys = problem.evaluate(Which::Hf, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let y = Tensor::matrix(5, 1, ys).unwrap();
        let weights = LossWeights::new(1e-5, 1e-3, 1.0, 1.0).unwrap();
        // Box far away from the samples so the IS term would be nonzero.
        let boxes = vec![Domain::cube(5.0, 6.0, 1)];

        let plain = model_on(&problem, Tier::Two, EncoderMode::None, 10);
        let mut tape = Tape::new();
        let pred = plain.predict_hf(&mut tape, &x).unwrap();
        let total = total_loss(&plain, &mut tape, &pred, &y, &[None], &boxes, &weights).unwrap();
        let err = loss_err(&plain, &mut tape, &pred, &y, &[None]).unwrap();
        let reg = loss_reg(&plain, &mut tape, &weights);
        assert_eq!(total.item(), err.item() + reg.item());

        let encoded = model_on(&problem, Tier::Two, EncoderMode::Linear, 10);
        let mut tape = Tape::new();
        let pred = encoded.predict_hf(&mut tape, &x).unwrap();
        let total = total_loss(&encoded, &mut tape, &pred, &y, &[None], &boxes, &weights).unwrap();
        let err = loss_err(&encoded, &mut tape, &pred, &y, &[None]).unwrap();
        let reg = loss_reg(&encoded, &mut tape, &weights);
        let enc = loss_enc(&encoded, &mut tape, &pred, &boxes, &weights).unwrap();
        assert!(enc.item() > 0.0, "IS term should fire for the distant box");
        assert_eq!(total.item(), err.item() + reg.item() + enc.item());
    }

    #[test]
    fn total_loss_backward_reaches_every_group_with_finite_adjoints() {
        let problem = make_problem("k4u").unwrap(); // two LF sources
        let model = model_on(&problem, Tier::Three, EncoderMode::Nonlinear, 11);
        let x = Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let y = Tensor::matrix(3, 1, vec![0.3, -0.1, 0.8]).unwrap();
        let lf_x = Tensor::matrix(4, 1, vec![0.0, 0.3, 0.6, 1.0]).unwrap();
        let lf_y = Tensor::matrix(4, 1, vec![0.5, 0.2, -0.4, 0.9]).unwrap();
        let batch = Batch::new(lf_x, lf_y).unwrap();
        let weights = LossWeights::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let boxes = vec![Domain::cube(0.25, 0.75, 1), Domain::cube(0.25, 0.75, 1)];
        let mut tape = Tape::new();
        let pred = model.predict_hf(&mut tape, &x).unwrap();
        let total = total_loss(
            &model,
            &mut tape,
            &pred,
            &y,
            &[Some(batch.clone()), Some(batch)],
            &boxes,
            &weights,
        )
        .unwrap();
        assert!(total.item().is_finite());
        tape.backward(&total).unwrap();
        for (name, t) in model.trainable_parameters().all() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} missing grad"));
            assert!(g.iter().all(|v| v.is_finite()), "{name} has nonfinite grad");
        }
    }

    #[test]
    fn sf_loss_is_mse_plus_network_norm() {
        let problem = make_problem("k1").unwrap();
        let spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier: Tier::Two,
            encoder_mode: EncoderMode::None,
            seed: 12,
        };
        let sf = crate::mfmodel::build_sf_model(&problem, &spec).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.2, 0.5, 0.8]).unwrap();
        let y = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let pred = sf.predict(&mut tape, &x).unwrap();
        let weights = LossWeights::new(1.0, 1e-3, 1.0, 1.0).unwrap();
        let loss = sf_total_loss(&sf, &mut tape, &pred, &y, &weights).unwrap();
        let mse = mse_term(&mut tape, &pred, &y).unwrap();
        let norm: f64 = sf
            .named_parameters()
            .iter()
            .flat_map(|(_, t)| t.to_vec())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let want = mse.item() + 1e-3 * norm;
        assert!((loss.item() - want).abs() <= 1e-15 * want.abs().max(1.0));
    }

    #[test]
    fn sample_boxes_bound_the_lf_training_inputs() {
        use crate::sampling::{build_datasets, DesignSpec};
        let problem = make_problem("k1").unwrap();
        let design = DesignSpec::for_problem(&problem, 8, 0, 0);
        let data = build_datasets(&problem, &design).unwrap();
        let boxes = lf_sample_boxes(&data.lf_train).unwrap();
        assert_eq!(boxes.len(), 1);
        for row in data.lf_train[0].xs.chunks(1) {
            assert!(boxes[0].contains(row));
        }
    }
}
