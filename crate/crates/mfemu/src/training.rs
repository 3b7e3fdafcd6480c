//! Adam optimization, the full-batch training loop, normalized test-set
//! evaluation, random hyperparameter search, and the experiment grid runner
//! (complexity tiers × dataset sizes × encodings, plus single-fidelity
//! baselines, each over independent repetitions).
//!
//! Everything is deterministic: each trial derives its model and data RNG
//! streams from the master seed and stable trial indices, so a rerun with the
//! same configuration reproduces every number bit for bit. Trials are
//! embarrassingly parallel — each one builds its own model, tape, and data
//! inside its thread and returns plain `f64` archives.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::benchmarks::BenchmarkProblem;
use crate::encoding::EncoderMode;
use crate::loss::{self, Batch, LossWeights, LAMBDA_CHOICES};
use crate::mfmodel::{build_mf_model, build_sf_model, MfModel, MfModelSpec, SingleFidelityModel, Tier};
use crate::network::NetworkKind;
use crate::sampling::{build_datasets, fit_normalizers, AffineNormalizer, Dataset, DesignSpec, Normalizers};
use crate::tensor::{Tape, Tensor};
use crate::{mix_seed, Error, Result};

/// Training losses above this threshold mark the trial as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

// Stream tags for deriving per-component seeds from the master seed.
const TAG_DATA: u64 = 0x6461_7461;
const TAG_CONFIG: u64 = 0x6366_6700;
const TAG_REP: u64 = 0x7265_7000;
const TAG_SEARCH_DRAW: u64 = 0x7364_7277;
const TAG_SEARCH_MODEL: u64 = 0x736D_6F64;

/// Data-stream seed for one HF design size. Deliberately independent of the
/// configuration, so single- and multi-fidelity cells of the same size train
/// and test on identical datasets.
pub fn data_seed_for(master_seed: u64, n_hf: usize) -> u64 {
    mix_seed(master_seed, TAG_DATA + n_hf as u64)
}

/// Seed governing one grid configuration's search draws and repetition
/// model initializations; `index` is the configuration's position in the
/// stable enumeration order.
pub fn config_seed_for(master_seed: u64, index: usize) -> u64 {
    mix_seed(master_seed, TAG_CONFIG + index as u64)
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// Bias-corrected Adam with `(β₁, β₂, ε) = (0.9, 0.999, 1e-8)`. Moment
/// buffers are allocated per parameter tensor and indexed positionally, so
/// the same parameter slice must be passed to every step.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[(String, Tensor)]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Applies one update from the parameters' current gradients. A
    /// non-finite gradient aborts with a diagnostic naming the parameter so
    /// the caller can mark the trial failed instead of corrupting it.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter list changed size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, p)) in params.iter().enumerate() {
            let g = p.grad_or_zeros();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "non-finite gradient in `{name}` at step {}",
                    self.step
                )));
            }
            let mut vals = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, gj) in g.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                vals[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_values(&vals);
        }
        Ok(())
    }
}

// ── Configuration types ─────────────────────────────────────────────────────

/// Learning rate plus loss-term weights — one point of the search space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub lr: f64,
    pub weights: LossWeights,
}

impl HyperParams {
    pub fn new(lr: f64, weights: LossWeights) -> Result<HyperParams> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {lr}"
            )));
        }
        Ok(HyperParams { lr, weights })
    }
}

/// Epoch budget and training-mode switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    /// Full-batch epochs (datasets are small enough that minibatching would
    /// only add noise).
    pub epochs: usize,
    /// Keep the per-epoch loss trace in the result.
    pub record_trace: bool,
    /// Alternative two-stage mode: first fit learned LF surrogates alone on
    /// their own data for `epochs`, then freeze them and train the remaining
    /// groups for another `epochs`. Default is joint end-to-end training.
    pub pretrain_freeze: bool,
}

impl Default for TrainSchedule {
    fn default() -> TrainSchedule {
        TrainSchedule {
            epochs: 20_000,
            record_trace: false,
            pretrain_freeze: false,
        }
    }
}

/// Identity of one grid cell; `encoding: None` marks a single-fidelity
/// baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigKey {
    pub problem: String,
    pub architecture: NetworkKind,
    pub tier: Tier,
    pub encoding: Option<EncoderMode>,
    pub n_hf: usize,
}

impl ConfigKey {
    pub fn encoding_label(&self) -> &'static str {
        match self.encoding {
            None => "sf",
            Some(mode) => mode.as_str(),
        }
    }

    pub fn id(&self) -> String {
        format!(
            "{}/{}/tier{}/{}/n{}",
            self.problem,
            self.architecture.as_str(),
            self.tier.index(),
            self.encoding_label(),
            self.n_hf
        )
    }
}

/// Whether a trial belongs to the hyperparameter search or to the final
/// repetitions run with the chosen hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    Search { candidate: usize },
    Final { repetition: usize },
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::Search { .. } => "search",
            Phase::Final { .. } => "final",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Phase::Search { candidate } => *candidate,
            Phase::Final { repetition } => *repetition,
        }
    }
}

/// Everything needed to run one trial on its own thread.
#[derive(Clone, Debug)]
pub struct TrialSpec {
    pub key: ConfigKey,
    pub phase: Phase,
    pub model_seed: u64,
    pub data_seed: u64,
    /// Sample-set repetition index (Sobol block and test-set stream).
    pub repetition: usize,
    pub hp: HyperParams,
    pub schedule: TrainSchedule,
}

/// Outcome of one trial. Parameters are archived as plain values so results
/// can cross threads; a model can be rebuilt from (key, model_seed) and these
/// values. Deliberately not `PartialEq`: `wall_time_s` varies across reruns,
/// so equality checks must pick fields explicitly.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub key: ConfigKey,
    pub phase: Phase,
    pub hp: HyperParams,
    pub model_seed: u64,
    pub data_seed: u64,
    pub repetition: usize,
    pub failed: bool,
    pub failure: Option<String>,
    /// Training loss at the last completed epoch.
    pub final_loss: f64,
    /// Test MSE in original (de-normalized) units; NaN for failed trials.
    pub mse: f64,
    /// Test MSE divided by the mean of `y_H²` over the test set.
    pub normalized_mse: f64,
    /// The normalization constant was zero, so `normalized_mse` is raw.
    pub unnormalized: bool,
    pub loss_trace: Option<Vec<f64>>,
    /// Informational only — never serialized into result files, which must
    /// be byte-identical across reruns.
    pub wall_time_s: f64,
    pub params: Vec<(String, Vec<f64>)>,
}

// ── Training internals ──────────────────────────────────────────────────────

fn normalized_batch(d: &Dataset, xn: &AffineNormalizer, yn: &AffineNormalizer) -> Result<Batch> {
    let x = Tensor::matrix(d.len(), d.dim, xn.normalize_all(&d.xs))?;
    let y = Tensor::matrix(d.len(), 1, yn.normalize_all(&d.ys))?;
    Batch::new(x, y)
}

fn zero_grads(params: &[(String, Tensor)]) {
    for (_, t) in params {
        t.zero_grad();
    }
}

/// Full-batch optimization driver: each epoch rebuilds the tape via
/// `forward`, checks for divergence, and applies one Adam step to
/// `step_params` (gradients of `all_params` are cleared first, so frozen
/// groups never accumulate stale adjoints). Returns the failure diagnostic
/// (if any), the optional loss trace, and the last finite loss.
fn optimize(
    schedule: &TrainSchedule,
    lr: f64,
    all_params: &[(String, Tensor)],
    step_params: &[(String, Tensor)],
    mut forward: impl FnMut(&mut Tape) -> Result<Tensor>,
) -> Result<(Option<String>, Option<Vec<f64>>, f64)> {
    let mut adam = Adam::new(lr, step_params);
    let mut trace = schedule.record_trace.then(|| Vec::with_capacity(schedule.epochs));
    let mut last = f64::NAN;
    for _ in 0..schedule.epochs {
        let mut tape = Tape::new();
        zero_grads(all_params);
        let loss = forward(&mut tape)?;
        let l = loss.item();
        if let Some(tr) = trace.as_mut() {
            tr.push(l);
        }
        if !l.is_finite() || l > DIVERGENCE_LIMIT {
            return Ok((Some(format!("diverged: loss = {l}")), trace, last));
        }
        last = l;
        tape.backward(&loss)?;
        if let Err(e) = adam.step(step_params) {
            return Ok((Some(e.to_string()), trace, last));
        }
    }
    Ok((None, trace, last))
}

fn archive_params(params: &[(String, Tensor)]) -> Vec<(String, Vec<f64>)> {
    params.iter().map(|(n, t)| (n.clone(), t.to_vec())).collect()
}

// ── Evaluation ──────────────────────────────────────────────────────────────

/// A trained surrogate of either kind, ready for evaluation.
pub enum TrainedModel {
    Mf(MfModel),
    Sf(SingleFidelityModel),
}

impl TrainedModel {
    /// De-normalized predictions at original-unit inputs.
    pub fn predict_original(&self, norms: &Normalizers, xs: &[f64], dim: usize) -> Result<Vec<f64>> {
        let n = if dim == 0 { 0 } else { xs.len() / dim };
        let x = Tensor::matrix(n, dim, norms.x_h.normalize_all(xs))?;
        let mut tape = Tape::new();
        let pred = match self {
            TrainedModel::Mf(m) => m.predict_hf(&mut tape, &x)?.total,
            TrainedModel::Sf(m) => m.predict(&mut tape, &x)?,
        };
        Ok(norms.y_h.denormalize_all(&pred.to_vec()))
    }
}

/// Rebuilds a trial's trained model from its archived values: the data and
/// normalizers are re-derived from the recorded seeds, the model is built
/// fresh from the recorded model seed, and the archived parameter values are
/// written in by name.
pub fn rebuild_trial_model(
    problem: &BenchmarkProblem,
    result: &TrialResult,
) -> Result<(TrainedModel, Normalizers)> {
    let design = DesignSpec::for_problem(
        problem,
        result.key.n_hf,
        result.data_seed,
        result.repetition,
    );
    let data = build_datasets(problem, &design)?;
    let norms = fit_normalizers(&data);
    let model_spec = MfModelSpec {
        family: result.key.architecture,
        tier: result.key.tier,
        encoder_mode: result.key.encoding.unwrap_or(EncoderMode::None),
        seed: result.model_seed,
    };
    let (model, named) = match result.key.encoding {
        None => {
            let sf = build_sf_model(problem, &model_spec)?;
            let named = sf.named_parameters();
            (TrainedModel::Sf(sf), named)
        }
        Some(_) => {
            let mf = build_mf_model(problem, &norms, &model_spec)?;
            let named = mf.trainable_parameters().all();
            (TrainedModel::Mf(mf), named)
        }
    };
    if named.len() != result.params.len() {
        return Err(Error::Config(format!(
            "trial archived {} parameter tensors but the rebuilt model has {}",
            result.params.len(),
            named.len()
        )));
    }
    for (name, t) in &named {
        let (_, values) = result
            .params
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("trial has no archived values for `{name}`")))?;
        t.set_values(values);
    }
    Ok((model, norms))
}

/// Test metrics of one trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    /// Mean squared error in original units.
    pub mse: f64,
    /// `mse` divided by the sampled squared norm `mean(y_H²)` of the target.
    pub normalized_mse: f64,
    /// Set when the normalization constant was zero and `normalized_mse`
    /// therefore equals the raw `mse`.
    pub unnormalized: bool,
}

/// Evaluates a trained model on a labeled test set: predictions are made in
/// normalized space, mapped back to original units, and compared against the
/// original labels. The normalization constant `mean(y²)` is the Monte-Carlo
/// estimate of the target's squared norm over the sampling domain.
pub fn evaluate_normalized_mse(
    model: &TrainedModel,
    norms: &Normalizers,
    test: &Dataset,
) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty test set".into()));
    }
    let pred = model.predict_original(norms, &test.xs, test.dim)?;
    let n = test.len() as f64;
    let mse = pred
        .iter()
        .zip(&test.ys)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n;
    let constant = test.ys.iter().map(|y| y * y).sum::<f64>() / n;
    if constant == 0.0 {
        return Ok(EvalOutcome {
            mse,
            normalized_mse: mse,
            unnormalized: true,
        });
    }
    Ok(EvalOutcome {
        mse,
        normalized_mse: mse / constant,
        unnormalized: false,
    })
}

// ── Single-trial runner ─────────────────────────────────────────────────────

/// Builds the data and model for one trial, trains it, and evaluates it on
/// the repetition's test set. Divergence and non-finite gradients yield a
/// failed result, not an error; errors are reserved for misconfiguration.
pub fn run_trial(problem: &BenchmarkProblem, spec: &TrialSpec) -> Result<TrialResult> {
    let start = Instant::now();
    let design = DesignSpec::for_problem(problem, spec.key.n_hf, spec.data_seed, spec.repetition);
    let data = build_datasets(problem, &design)?;
    let norms = fit_normalizers(&data);
    let hf = normalized_batch(&data.hf_train, &norms.x_h, &norms.y_h)?;

    let model_spec = MfModelSpec {
        family: spec.key.architecture,
        tier: spec.key.tier,
        encoder_mode: spec.key.encoding.unwrap_or(EncoderMode::None),
        seed: spec.model_seed,
    };

    let (failure, trace, final_loss, params, model) = match spec.key.encoding {
        None => {
            let sf = build_sf_model(problem, &model_spec)?;
            let named = sf.named_parameters();
            let weights = spec.hp.weights;
            let (failure, trace, final_loss) =
                optimize(&spec.schedule, spec.hp.lr, &named, &named, |tape| {
                    let pred = sf.predict(tape, &hf.x)?;
                    loss::sf_total_loss(&sf, tape, &pred, &hf.y, &weights)
                })?;
            let params = archive_params(&named);
            (failure, trace, final_loss, params, TrainedModel::Sf(sf))
        }
        Some(_) => {
            let model = build_mf_model(problem, &norms, &model_spec)?;
            let mut lf_batches = Vec::with_capacity(model.n_sources());
            for i in 0..model.n_sources() {
                lf_batches.push(Some(normalized_batch(
                    &data.lf_train[i],
                    &norms.x_l[i],
                    &norms.y_l[i],
                )?));
            }
            // Interval-score boxes live in original LF units, the space the
            // encoders produce.
            let boxes = loss::lf_sample_boxes(&data.lf_train)?;
            let groups = model.trainable_parameters();
            let all = groups.all();
            let weights = spec.hp.weights;

            let mut failure = None;
            let mut trace = None;
            let mut final_loss = f64::NAN;

            let has_learned = model.sources.iter().any(|s| s.is_learned());
            let freeze = spec.schedule.pretrain_freeze && has_learned;
            if freeze {
                let lf_params: Vec<(String, Tensor)> =
                    groups.lf.iter().flatten().cloned().collect();
                let batches = &lf_batches;
                let model_ref = &model;
                let (f, t, l) = optimize(&spec.schedule, spec.hp.lr, &all, &lf_params, |tape| {
                    let mut terms = Vec::new();
                    for (i, batch) in batches.iter().enumerate() {
                        if !model_ref.sources[i].is_learned() {
                            continue;
                        }
                        let batch = batch.as_ref().expect("all batches built above");
                        let z = model_ref.predict_lf(tape, i, &batch.x)?;
                        let d = tape.sub(&z, &batch.y)?;
                        let sq = tape.square(&d);
                        terms.push(tape.mean(&sq));
                    }
                    let mut it = terms.into_iter();
                    let first = it.next().expect("at least one learned source");
                    Ok(it.fold(first, |acc, t| {
                        tape.add(&acc, &t).expect("scalar terms always conform")
                    }))
                })?;
                failure = f;
                trace = t;
                final_loss = l;
            }

            if failure.is_none() {
                let step_params: Vec<(String, Tensor)> = if freeze {
                    groups
                        .enc
                        .iter()
                        .chain(&groups.lin)
                        .chain(&groups.nl)
                        .cloned()
                        .collect()
                } else {
                    all.clone()
                };
                let model_ref = &model;
                let (hf_x, hf_y) = (&hf.x, &hf.y);
                let (batches, boxes_ref) = (&lf_batches, &boxes);
                let (f, t, l) =
                    optimize(&spec.schedule, spec.hp.lr, &all, &step_params, |tape| {
                        let pred = model_ref.predict_hf(tape, hf_x)?;
                        loss::total_loss(model_ref, tape, &pred, hf_y, batches, boxes_ref, &weights)
                    })?;
                failure = f;
                final_loss = l;
                trace = match (trace, t) {
                    (Some(mut a), Some(b)) => {
                        a.extend(b);
                        Some(a)
                    }
                    (a, b) => b.or(a),
                };
            }

            let params = archive_params(&all);
            (failure, trace, final_loss, params, TrainedModel::Mf(model))
        }
    };

    let eval = if failure.is_none() {
        evaluate_normalized_mse(&model, &norms, &data.hf_test)?
    } else {
        EvalOutcome {
            mse: f64::NAN,
            normalized_mse: f64::NAN,
            unnormalized: false,
        }
    };

    Ok(TrialResult {
        key: spec.key.clone(),
        phase: spec.phase,
        hp: spec.hp,
        model_seed: spec.model_seed,
        data_seed: spec.data_seed,
        repetition: spec.repetition,
        failed: failure.is_some(),
        failure,
        final_loss,
        mse: eval.mse,
        normalized_mse: eval.normalized_mse,
        unnormalized: eval.unnormalized,
        loss_trace: trace,
        wall_time_s: start.elapsed().as_secs_f64(),
        params,
    })
}

// ── Hyperparameter search ───────────────────────────────────────────────────

/// One random draw from the search space: `lr ~ exp(U(ln 1e-5, ln 1e-3))`,
/// each λ uniform over the four-element choice set. Draw order is fixed
/// (lr, λ_L, λ_H^nl, λ_T, λ_D) so a seeded stream is reproducible.
pub fn draw_hyperparams(rng: &mut ChaCha8Rng) -> HyperParams {
    let ln_lo = (1e-5f64).ln();
    let ln_hi = (1e-3f64).ln();
    let lr = rng.gen_range(ln_lo..=ln_hi).exp();
    let pick = |rng: &mut ChaCha8Rng| LAMBDA_CHOICES[rng.gen_range(0..LAMBDA_CHOICES.len())];
    let lambda_l = pick(rng);
    let lambda_h_nl = pick(rng);
    let lambda_t = pick(rng);
    let lambda_d = pick(rng);
    HyperParams {
        lr,
        weights: LossWeights::new(lambda_l, lambda_h_nl, lambda_t, lambda_d)
            .expect("choice-set values are valid"),
    }
}

/// Search result: the winning hyperparameters and every candidate trial.
pub struct SearchOutcome {
    pub best: HyperParams,
    pub best_normalized_mse: f64,
    pub trials: Vec<TrialResult>,
}

/// Random search over the hyperparameter space, each candidate scored by its
/// validation normalized MSE on repetition 0's data. The winner is reused for
/// all final repetitions of the configuration.
pub fn hyper_search(
    problem: &BenchmarkProblem,
    key: &ConfigKey,
    budget: usize,
    data_seed: u64,
    config_seed: u64,
    schedule: &TrainSchedule,
) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config_seed, TAG_SEARCH_DRAW));
    let specs: Vec<TrialSpec> = (0..budget)
        .map(|c| TrialSpec {
            key: key.clone(),
            phase: Phase::Search { candidate: c },
            model_seed: mix_seed(config_seed, TAG_SEARCH_MODEL + c as u64),
            data_seed,
            repetition: 0,
            hp: draw_hyperparams(&mut rng),
            schedule: *schedule,
        })
        .collect();
    let trials: Vec<TrialResult> = specs
        .par_iter()
        .map(|s| run_trial(problem, s))
        .collect::<Result<_>>()?;

    let mut best: Option<&TrialResult> = None;
    for t in &trials {
        if t.failed {
            continue;
        }
        if best.is_none_or(|b| t.normalized_mse < b.normalized_mse) {
            best = Some(t);
        }
    }
    let Some(best) = best else {
        let failures: Vec<String> = trials
            .iter()
            .map(|t| {
                format!(
                    "candidate {}: {}",
                    t.phase.index(),
                    t.failure.as_deref().unwrap_or("unknown")
                )
            })
            .collect();
        return Err(Error::Config(format!(
            "all {budget} search trials for {} failed: {}",
            key.id(),
            failures.join("; ")
        )));
    };
    Ok(SearchOutcome {
        best: best.hp,
        best_normalized_mse: best.normalized_mse,
        trials,
    })
}

// ── Grid runner ─────────────────────────────────────────────────────────────

/// The experiment grid: subsets of each axis, repetitions, seeds, budgets.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub architectures: Vec<NetworkKind>,
    pub tiers: Vec<Tier>,
    pub hf_sizes: Vec<usize>,
    pub encodings: Vec<EncoderMode>,
    pub repetitions: usize,
    pub master_seed: u64,
    pub search_budget: usize,
    pub schedule: TrainSchedule,
}

/// Aggregate of one grid cell over its repetitions.
#[derive(Clone, Debug)]
pub struct AggregateRow {
    pub key: ConfigKey,
    pub best_hp: HyperParams,
    /// Mean normalized MSE over non-failed repetitions (NaN if all failed).
    pub mean_normalized_mse: f64,
    /// Coefficient of variation: sample standard deviation over mean.
    pub cov: f64,
    pub failed: usize,
    pub search_trials: Vec<TrialResult>,
    pub repetition_trials: Vec<TrialResult>,
}

/// Sample mean and coefficient of variation (sample std / mean) of a slice;
/// `(NaN, NaN)` when empty, CoV 0 when a single value or a zero mean leaves
/// no measurable relative variation.
pub fn mean_cov(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let cov = if mean == 0.0 { 0.0 } else { std / mean };
    (mean, cov)
}

/// Median with the even-count convention of averaging the middle two values;
/// NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Enumerates the grid's configurations in a stable order: multi-fidelity
/// cells (architecture → tier → size → encoding) first, then single-fidelity
/// baselines. Encoding `none` is skipped for problems whose LF input
/// dimensions differ from the HF dimension.
pub fn enumerate_configs(problem: &BenchmarkProblem, grid: &GridSpec) -> Vec<ConfigKey> {
    let dims_differ = problem.lf.iter().any(|s| s.dim() != problem.hf_dim());
    let mut keys = Vec::new();
    for &arch in &grid.architectures {
        for &tier in &grid.tiers {
            for &n_hf in &grid.hf_sizes {
                for &enc in &grid.encodings {
                    if enc == EncoderMode::None && dims_differ {
                        continue;
                    }
                    keys.push(ConfigKey {
                        problem: problem.name.clone(),
                        architecture: arch,
                        tier,
                        encoding: Some(enc),
                        n_hf,
                    });
                }
            }
        }
    }
    for &arch in &grid.architectures {
        for &tier in &grid.tiers {
            for &n_hf in &grid.hf_sizes {
                keys.push(ConfigKey {
                    problem: problem.name.clone(),
                    architecture: arch,
                    tier,
                    encoding: None,
                    n_hf,
                });
            }
        }
    }
    keys
}

/// Runs the whole grid: per configuration, a hyperparameter search scored on
/// repetition 0, then the final repetitions with the winning hyperparameters,
/// aggregated into mean normalized MSE and CoV. Single- and multi-fidelity
/// cells with the same size and repetition share identical HF datasets (the
/// data stream depends only on the master seed, the size, and the
/// repetition).
pub fn run_grid(problem: &BenchmarkProblem, grid: &GridSpec) -> Result<Vec<AggregateRow>> {
    if grid.architectures.is_empty()
        || grid.tiers.is_empty()
        || grid.hf_sizes.is_empty()
        || grid.encodings.is_empty()
    {
        return Err(Error::Config("every grid axis needs at least one value".into()));
    }
    if grid.repetitions == 0 {
        return Err(Error::Config("grid needs at least one repetition".into()));
    }
    let keys = enumerate_configs(problem, grid);
    let mut rows = Vec::with_capacity(keys.len());
    for (k, key) in keys.iter().enumerate() {
        let config_seed = config_seed_for(grid.master_seed, k);
        let data_seed = data_seed_for(grid.master_seed, key.n_hf);
        let search = hyper_search(
            problem,
            key,
            grid.search_budget,
            data_seed,
            config_seed,
            &grid.schedule,
        )?;
        let specs: Vec<TrialSpec> = (0..grid.repetitions)
            .map(|r| TrialSpec {
                key: key.clone(),
                phase: Phase::Final { repetition: r },
                model_seed: mix_seed(config_seed, TAG_REP + r as u64),
                data_seed,
                repetition: r,
                hp: search.best,
                schedule: grid.schedule,
            })
            .collect();
        let reps: Vec<TrialResult> = specs
            .par_iter()
            .map(|s| run_trial(problem, s))
            .collect::<Result<_>>()?;
        let ok: Vec<f64> = reps
            .iter()
            .filter(|t| !t.failed)
            .map(|t| t.normalized_mse)
            .collect();
        let (mean, cov) = mean_cov(&ok);
        rows.push(AggregateRow {
            key: key.clone(),
            best_hp: search.best,
            mean_normalized_mse: mean,
            cov,
            failed: reps.len() - ok.len(),
            search_trials: search.trials,
            repetition_trials: reps,
        });
    }
    Ok(rows)
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::make_problem;

    fn scalar_param(v: f64) -> (String, Tensor) {
        ("p".to_string(), Tensor::param_vector(vec![v]))
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let params = vec![scalar_param(0.7)];
        let mut adam = Adam::new(0.1, &params);
        for _ in 0..5 {
            params[0].1.zero_grad();
            // grad stays absent → treated as zero.
            adam.step(&params).unwrap();
        }
        assert_eq!(params[0].1.to_vec(), vec![0.7]);
    }

    #[test]
    fn adam_first_step_has_bias_corrected_magnitude() {
        let params = vec![scalar_param(0.0)];
        let mut adam = Adam::new(0.1, &params);
        let mut tape = Tape::new();
        let s = tape.sum(&params[0].1); // d s / d p = 1
        tape.backward(&s).unwrap();
        adam.step(&params).unwrap();
        let v = params[0].1.to_vec()[0];
        assert!((v + 0.1).abs() <= 1e-8, "first step was {v}");

        // Constant unit gradient keeps stepping by ≈ lr.
        for _ in 0..3 {
            params[0].1.zero_grad();
            let mut tape = Tape::new();
            let s = tape.sum(&params[0].1);
            tape.backward(&s).unwrap();
            adam.step(&params).unwrap();
        }
        let v = params[0].1.to_vec()[0];
        assert!((v + 0.4).abs() <= 1e-6, "after 4 steps at {v}");
    }

    #[test]
    fn adam_rejects_nonfinite_gradients() {
        // An infinite scale factor pushes ∞ into the adjoint; the step must
        // refuse it by name instead of corrupting the parameter.
        let params = vec![scalar_param(0.5)];
        let mut adam = Adam::new(0.1, &params);
        let mut tape = Tape::new();
        let r = tape.scale(&params[0].1, f64::INFINITY);
        let s = tape.sum(&r);
        tape.backward(&s).unwrap();
        let err = adam.step(&params).unwrap_err().to_string();
        assert!(err.contains("`p`"), "diagnostic should name the parameter: {err}");
        assert_eq!(params[0].1.to_vec(), vec![0.5], "failed step must not write");
    }

    #[test]
    fn optimize_minimizes_a_quadratic_and_records_the_trace() {
        // Tiny quadratic: fit a single parameter to y ≡ 0 from x = 1. Adam
        // overshoots and oscillates near the optimum, so check the floor it
        // reaches rather than monotonicity.
        let p = Tensor::param_vector(vec![1.0]);
        let params = vec![("w".to_string(), p.clone())];
        let schedule = TrainSchedule {
            epochs: 100,
            record_trace: true,
            pretrain_freeze: false,
        };
        let (failure, trace, last) = optimize(&schedule, 0.05, &params, &params, |tape| {
            let sq = tape.square(&p);
            Ok(tape.sum(&sq))
        })
        .unwrap();
        assert!(failure.is_none());
        let trace = trace.unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trace.iter().all(|l| l.is_finite()));
        let floor = trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(floor < 1e-6, "optimizer never got close: floor = {floor}");
        assert!(last < 1e-2 * trace[0], "final loss {last} vs initial {}", trace[0]);
    }

    #[test]
    fn evaluate_flags_zero_normalization_constant() {
        let problem = make_problem("k1").unwrap();
        let spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier: Tier::Two,
            encoder_mode: EncoderMode::None,
            seed: 1,
        };
        let sf = build_sf_model(&problem, &spec).unwrap();
        let norms = Normalizers {
            x_h: AffineNormalizer::identity(1),
            y_h: AffineNormalizer::identity(1),
            x_l: vec![AffineNormalizer::identity(1)],
            y_l: vec![AffineNormalizer::identity(1)],
        };
        let test = Dataset::new(1, vec![0.1, 0.5, 0.9], vec![0.0, 0.0, 0.0]);
        let out = evaluate_normalized_mse(&TrainedModel::Sf(sf), &norms, &test).unwrap();
        assert!(out.unnormalized);
        assert_eq!(out.mse, out.normalized_mse);
    }

    #[test]
    fn evaluate_scores_constant_zero_predictor_at_one() {
        let problem = make_problem("k1").unwrap();
        let spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier: Tier::Two,
            encoder_mode: EncoderMode::None,
            seed: 2,
        };
        let sf = build_sf_model(&problem, &spec).unwrap();
        for (_, t) in sf.named_parameters() {
            t.set_values(&vec![0.0; t.numel()]);
        }
        let norms = Normalizers {
            x_h: AffineNormalizer::identity(1),
            y_h: AffineNormalizer::identity(1),
            x_l: vec![AffineNormalizer::identity(1)],
            y_l: vec![AffineNormalizer::identity(1)],
        };
        let xs = vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let ys = problem.evaluate(crate::benchmarks::Which::Hf, &xs).unwrap();
        let test = Dataset::new(1, xs, ys);
        let out = evaluate_normalized_mse(&TrainedModel::Sf(sf), &norms, &test).unwrap();
        assert!((out.normalized_mse - 1.0).abs() <= 1e-12);
        assert!(!out.unnormalized);
    }

    #[test]
    fn trials_are_bitwise_deterministic() {
        let problem = make_problem("k1").unwrap();
        let spec = TrialSpec {
            key: ConfigKey {
                problem: "k1".into(),
                architecture: NetworkKind::Mlp,
                tier: Tier::Two,
                encoding: Some(EncoderMode::Linear),
                n_hf: 8,
            },
            phase: Phase::Final { repetition: 0 },
            model_seed: 11,
            data_seed: 22,
            repetition: 0,
            hp: HyperParams::new(1e-3, LossWeights::new(0.0, 1e-5, 1e-3, 1e-3).unwrap()).unwrap(),
            schedule: TrainSchedule {
                epochs: 60,
                record_trace: false,
                pretrain_freeze: false,
            },
        };
        let a = run_trial(&problem, &spec).unwrap();
        let b = run_trial(&problem, &spec).unwrap();
        assert!(!a.failed);
        assert_eq!(a.final_loss, b.final_loss);
        assert_eq!(a.mse, b.mse);
        assert_eq!(a.normalized_mse, b.normalized_mse);
        assert_eq!(a.params, b.params);

        // Rebuilding from the archived values reproduces the recorded metrics.
        let (model, norms) = rebuild_trial_model(&problem, &a).unwrap();
        let design = DesignSpec::for_problem(&problem, a.key.n_hf, a.data_seed, a.repetition);
        let data = build_datasets(&problem, &design).unwrap();
        let eval = evaluate_normalized_mse(&model, &norms, &data.hf_test).unwrap();
        assert_eq!(eval.mse, a.mse);
        assert_eq!(eval.normalized_mse, a.normalized_mse);
    }

    #[test]
    fn learned_lf_surrogate_converges_on_its_own_data() {
        // Tier 3's LF network must be able to fit the low-fidelity function
        // from an 8×-oversampled design.
        let problem = make_problem("k1").unwrap();
        let design = DesignSpec::for_problem(&problem, 8, 5, 0);
        let data = build_datasets(&problem, &design).unwrap();
        let norms = fit_normalizers(&data);
        let model_spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier: Tier::Three,
            encoder_mode: EncoderMode::None,
            seed: 3,
        };
        let model = build_mf_model(&problem, &norms, &model_spec).unwrap();
        let batch = normalized_batch(&data.lf_train[0], &norms.x_l[0], &norms.y_l[0]).unwrap();
        let lf_params: Vec<(String, Tensor)> = model
            .trainable_parameters()
            .lf
            .into_iter()
            .flatten()
            .collect();
        let schedule = TrainSchedule {
            epochs: 6000,
            record_trace: false,
            pretrain_freeze: false,
        };
        let model_ref = &model;
        let (failure, _, last) = optimize(&schedule, 3e-3, &lf_params, &lf_params, |tape| {
            let z = model_ref.predict_lf(tape, 0, &batch.x)?;
            let d = tape.sub(&z, &batch.y)?;
            let sq = tape.square(&d);
            Ok(tape.mean(&sq))
        })
        .unwrap();
        assert!(failure.is_none());
        assert!(last < 1e-3, "LF training MSE stalled at {last}");
    }

    #[test]
    fn pretrain_freeze_leaves_lf_parameters_at_their_pretrained_values() {
        let problem = make_problem("k1").unwrap();
        let key = ConfigKey {
            problem: "k1".into(),
            architecture: NetworkKind::Mlp,
            tier: Tier::Three,
            encoding: Some(EncoderMode::None),
            n_hf: 8,
        };
        let hp = HyperParams::new(1e-3, LossWeights::zero()).unwrap();
        let schedule = TrainSchedule {
            epochs: 40,
            record_trace: false,
            pretrain_freeze: true,
        };
        let spec = TrialSpec {
            key,
            phase: Phase::Final { repetition: 0 },
            model_seed: 17,
            data_seed: 23,
            repetition: 0,
            hp,
            schedule,
        };
        let result = run_trial(&problem, &spec).unwrap();
        assert!(!result.failed);

        // Reproduce stage 1 alone with the same seeds; the frozen run's final
        // LF parameters must equal the stage-1-only values bitwise.
        let design = DesignSpec::for_problem(&problem, 8, 23, 0);
        let data = build_datasets(&problem, &design).unwrap();
        let norms = fit_normalizers(&data);
        let model_spec = MfModelSpec {
            family: NetworkKind::Mlp,
            tier: Tier::Three,
            encoder_mode: EncoderMode::None,
            seed: 17,
        };
        let model = build_mf_model(&problem, &norms, &model_spec).unwrap();
        let batch = normalized_batch(&data.lf_train[0], &norms.x_l[0], &norms.y_l[0]).unwrap();
        let lf_params: Vec<(String, Tensor)> = model
            .trainable_parameters()
            .lf
            .into_iter()
            .flatten()
            .collect();
        let stage1 = TrainSchedule {
            epochs: 40,
            record_trace: false,
            pretrain_freeze: false,
        };
        let model_ref = &model;
        let (failure, _, _) = optimize(&stage1, 1e-3, &lf_params, &lf_params, |tape| {
            let z = model_ref.predict_lf(tape, 0, &batch.x)?;
            let d = tape.sub(&z, &batch.y)?;
            let sq = tape.square(&d);
            Ok(tape.mean(&sq))
        })
        .unwrap();
        assert!(failure.is_none());
        for (name, t) in &lf_params {
            let (_, frozen) = result
                .params
                .iter()
                .find(|(n, _)| n == name)
                .expect("lf params archived");
            assert_eq!(&t.to_vec(), frozen, "{name} moved during stage 2");
        }
    }

    #[test]
    fn search_draws_stay_inside_the_space_and_pick_the_best() {
        let problem = make_problem("k1").unwrap();
        let key = ConfigKey {
            problem: "k1".into(),
            architecture: NetworkKind::Mlp,
            tier: Tier::Two,
            encoding: Some(EncoderMode::None),
            n_hf: 8,
        };
        let schedule = TrainSchedule {
            epochs: 30,
            record_trace: false,
            pretrain_freeze: false,
        };
        let out = hyper_search(&problem, &key, 10, 7, 9, &schedule).unwrap();
        assert_eq!(out.trials.len(), 10);
        for t in &out.trials {
            assert!(t.hp.lr >= 1e-5 && t.hp.lr <= 1e-3, "lr {} escaped", t.hp.lr);
            for l in [
                t.hp.weights.lambda_l,
                t.hp.weights.lambda_h_nl,
                t.hp.weights.lambda_t,
                t.hp.weights.lambda_d,
            ] {
                assert!(LAMBDA_CHOICES.contains(&l), "λ {l} escaped the choice set");
            }
        }
        let best_by_hand = out
            .trials
            .iter()
            .filter(|t| !t.failed)
            .map(|t| t.normalized_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_normalized_mse, best_by_hand);

        // Budget 1 returns that single draw.
        let one = hyper_search(&problem, &key, 1, 7, 9, &schedule).unwrap();
        assert_eq!(one.trials.len(), 1);
        assert_eq!(one.best, one.trials[0].hp);
    }

    #[test]
    fn grid_enumeration_counts_and_skips() {
        let grid = GridSpec {
            architectures: vec![NetworkKind::Mlp],
            tiers: Tier::ALL.to_vec(),
            hf_sizes: vec![8, 16, 32],
            encodings: vec![EncoderMode::None, EncoderMode::Linear, EncoderMode::Nonlinear],
            repetitions: 4,
            master_seed: 0,
            search_budget: 1,
            schedule: TrainSchedule::default(),
        };
        let k1 = make_problem("k1").unwrap();
        let keys = enumerate_configs(&k1, &grid);
        let mf = keys.iter().filter(|k| k.encoding.is_some()).count();
        let sf = keys.iter().filter(|k| k.encoding.is_none()).count();
        assert_eq!((mf, sf), (27, 9));

        // Mismatched-dimension problem: encoding `none` is skipped.
        let du = make_problem("2du").unwrap();
        let keys = enumerate_configs(&du, &grid);
        let mf = keys.iter().filter(|k| k.encoding.is_some()).count();
        assert_eq!(mf, 18);
        assert!(keys
            .iter()
            .all(|k| k.encoding != Some(EncoderMode::None)));
    }

    #[test]
    fn grid_rows_aggregate_and_share_data_per_size() {
        let problem = make_problem("k1").unwrap();
        let grid = GridSpec {
            architectures: vec![NetworkKind::Mlp],
            tiers: vec![Tier::Two],
            hf_sizes: vec![8],
            encodings: vec![EncoderMode::None, EncoderMode::Linear],
            repetitions: 2,
            master_seed: 99,
            search_budget: 2,
            schedule: TrainSchedule {
                epochs: 15,
                record_trace: false,
                pretrain_freeze: false,
            },
        };
        let rows = run_grid(&problem, &grid).unwrap();
        assert_eq!(rows.len(), 3); // 2 MF cells + 1 SF baseline
        let sf_row = rows.iter().find(|r| r.key.encoding.is_none()).unwrap();
        assert_eq!(sf_row.key.encoding_label(), "sf");
        for row in &rows {
            assert_eq!(row.repetition_trials.len(), 2);
            assert_eq!(row.search_trials.len(), 2);
            // Same size → same data stream for SF and MF cells alike.
            assert_eq!(row.repetition_trials[0].data_seed, rows[0].repetition_trials[0].data_seed);
            if row.failed == 0 {
                let vals: Vec<f64> = row
                    .repetition_trials
                    .iter()
                    .map(|t| t.normalized_mse)
                    .collect();
                let (mean, cov) = mean_cov(&vals);
                assert_eq!(row.mean_normalized_mse, mean);
                assert_eq!(row.cov, cov);
            }
        }

        // Bitwise repeatability of the whole grid (wall time is the one
        // field allowed to differ between reruns).
        let rows2 = run_grid(&problem, &grid).unwrap();
        for (a, b) in rows.iter().zip(&rows2) {
            assert_eq!(a.key, b.key);
            assert_eq!(a.mean_normalized_mse, b.mean_normalized_mse);
            assert_eq!(a.cov, b.cov);
            for (ta, tb) in a.repetition_trials.iter().zip(&b.repetition_trials) {
                assert_eq!(ta.hp, tb.hp);
                assert_eq!(ta.final_loss, tb.final_loss);
                assert_eq!(ta.normalized_mse, tb.normalized_mse);
                assert_eq!(ta.params, tb.params);
            }
        }
    }

    #[test]
    fn statistics_helpers_match_hand_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert!(median(&[]).is_nan());
        let (mean, cov) = mean_cov(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!((mean, cov), (2.0, 0.0));
        let (mean, cov) = mean_cov(&[1.0, 3.0]);
        assert_eq!(mean, 2.0);
        assert!((cov - std::f64::consts::SQRT_2 / 2.0).abs() <= 1e-15);
        let (mean, _) = mean_cov(&[]);
        assert!(mean.is_nan());
    }
}
