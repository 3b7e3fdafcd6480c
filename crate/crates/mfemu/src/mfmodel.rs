//! Composition of low-fidelity sources, coordinate encoders, and correlation
//! blocks into the multi-fidelity surrogate
//! `ŷ_H(x) = ŷ_H^l(x, z_1..z_n) + ŷ_H^nl(x, z_1..z_n)` with
//! `z_i = ŷ_{L_i}(T_i(x))`, plus the single-fidelity baseline. Models operate
//! on normalized data; exact closed-form sources are wrapped so they consume
//! and produce normalized values too.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::benchmarks::BenchmarkProblem;
use crate::encoding::{self, EncoderMode, EncoderParams, EncoderSpec};
use crate::field::ScalarField;
use crate::network::{self, LayerParams, NetworkKind, NetworkParams, NetworkSpec};
use crate::sampling::Normalizers;
use crate::tensor::{Tape, Tensor};
use crate::{mix_seed, Error, Result};

// ── Complexity tiers ────────────────────────────────────────────────────────

/// The three study configurations: tier 1 is the large network with exact LF
/// functions, tier 2 the small network with exact LF, tier 3 the small
/// network with learned LF surrogates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    One,
    Two,
    Three,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::One, Tier::Two, Tier::Three];

    /// Hidden widths shared by the correlation block, encoder bodies, and
    /// (tier 3) the LF surrogates.
    pub fn hidden(&self) -> Vec<usize> {
        match self {
            Tier::One => vec![16, 16, 16],
            Tier::Two | Tier::Three => vec![8],
        }
    }

    /// Whether LF sources are trained networks instead of exact functions.
    pub fn learned_lf(&self) -> bool {
        matches!(self, Tier::Three)
    }

    pub fn index(&self) -> usize {
        match self {
            Tier::One => 1,
            Tier::Two => 2,
            Tier::Three => 3,
        }
    }

    pub fn parse(text: &str) -> Result<Tier> {
        match text.trim() {
            "1" => Ok(Tier::One),
            "2" => Ok(Tier::Two),
            "3" => Ok(Tier::Three),
            other => Err(Error::Config(format!(
                "unknown tier `{other}` (expected 1, 2, or 3)"
            ))),
        }
    }
}

// ── Normalized wrapping of exact sources ────────────────────────────────────

/// An original-unit scalar field re-expressed in normalized coordinates:
/// `g(u) = W_Y(f(W_X⁻¹(u)))`, with the chain-rule factors `α_X/α_Y` applied
/// to the gradient.
pub struct NormalizedField {
    base: Arc<dyn ScalarField>,
    alpha_x: Vec<f64>,
    beta_x: Vec<f64>,
    alpha_y: f64,
    beta_y: f64,
}

impl NormalizedField {
    pub fn new(
        base: Arc<dyn ScalarField>,
        x_norm: &crate::sampling::AffineNormalizer,
        y_norm: &crate::sampling::AffineNormalizer,
    ) -> NormalizedField {
        assert_eq!(x_norm.dim(), base.dim(), "input normalizer width");
        assert_eq!(y_norm.dim(), 1, "output normalizer must be scalar");
        NormalizedField {
            base,
            alpha_x: x_norm.alpha.clone(),
            beta_x: x_norm.beta.clone(),
            alpha_y: y_norm.alpha[0],
            beta_y: y_norm.beta[0],
        }
    }

    fn original_x(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.alpha_x.iter().zip(&self.beta_x))
            .map(|(v, (a, b))| a * v + b)
            .collect()
    }
}

impl ScalarField for NormalizedField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, u: &[f64]) -> f64 {
        (self.base.value(&self.original_x(u)) - self.beta_y) / self.alpha_y
    }

    fn gradient(&self, u: &[f64], out: &mut [f64]) {
        self.base.gradient(&self.original_x(u), out);
        for (g, a) in out.iter_mut().zip(&self.alpha_x) {
            *g *= a / self.alpha_y;
        }
    }
}

// ── Model types ─────────────────────────────────────────────────────────────

/// One low-fidelity information source inside the surrogate. Encoders hand
/// every source original-unit LF coordinates; each variant carries the fixed
/// affine constants that bridge those coordinates into its own space.
pub enum LfSource {
    /// Closed-form function evaluated in original units; `y_alpha`/`y_beta`
    /// re-express its outputs in normalized feature units. Contributes no
    /// trainable parameters and no data-fit term.
    Exact {
        field: Arc<dyn ScalarField>,
        y_alpha: f64,
        y_beta: f64,
    },
    /// Trainable surrogate network over normalized LF coordinates (the space
    /// its training data lives in); `x_alpha_inv_diag` ([k_L, k_L]) and
    /// `x_beta` ([k_L]) are the constant normalization of its inputs.
    Learned {
        spec: NetworkSpec,
        params: NetworkParams,
        x_alpha_inv_diag: Tensor,
        x_beta: Tensor,
    },
}

impl LfSource {
    pub fn is_learned(&self) -> bool {
        matches!(self, LfSource::Learned { .. })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            LfSource::Exact { field, .. } => field.dim(),
            LfSource::Learned { spec, .. } => spec.input_dim,
        }
    }
}

/// The encoded multi-fidelity surrogate. The linear block is affine (with
/// bias) in the joint features `(x, z_1..z_n)`; the nonlinear block is a
/// network over the same features with no output bias, so every constant
/// offset lives in the linear part.
///
/// Coordinate conventions: the correlation blocks read normalized features,
/// but the encoders `T_i` act in original units — `T_i` maps the original HF
/// input to original LF coordinates, so identity initialization means
/// `z_i = y_{L_i}(x)` exactly, independent of how each space was normalized.
/// The normalized-space transport `W_{X_L} ∘ T_i ∘ W_{X_H}⁻¹` is realized by
/// the constant affine bridges stored alongside the trainable pieces.
pub struct MfModel {
    pub hf_dim: usize,
    pub sources: Vec<LfSource>,
    pub encoder_specs: Vec<EncoderSpec>,
    pub encoders: Vec<EncoderParams>,
    /// `[hf_dim, hf_dim]` diagonal of HF input scales: constant that
    /// de-normalizes the correlation input for the encoder path.
    pub x_alpha_diag: Tensor,
    /// `[hf_dim]` HF input offsets, the other half of that constant.
    pub x_beta: Tensor,
    /// `[1, hf_dim + n]` weight of the linear block.
    pub lin_weight: Tensor,
    /// `[1]` bias of the linear block.
    pub lin_bias: Tensor,
    pub nl_spec: NetworkSpec,
    pub nl_params: NetworkParams,
}

/// Everything `predict_hf` produces for one batch, all recorded on the tape.
pub struct HfPrediction {
    /// `ŷ_H = ŷ_H^l + ŷ_H^nl`, shape `[m, 1]`.
    pub total: Tensor,
    /// Linear component `ŷ_H^l`, shape `[m, 1]`.
    pub linear: Tensor,
    /// Nonlinear component `ŷ_H^nl`, shape `[m, 1]`.
    pub nonlinear: Tensor,
    /// Normalized LF predictions at encoded coordinates, each `[m, 1]`.
    pub z: Vec<Tensor>,
    /// Encoded coordinates `T_i(x)` in original LF units, each `[m, k_{L_i}]`.
    pub encoded: Vec<Tensor>,
}

/// Baseline trained on HF data alone, with the same architecture family and
/// tier as the multi-fidelity model it is compared against.
pub struct SingleFidelityModel {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
}

/// Trainable parameters split into the groups the loss consumes separately.
pub struct ParamGroups {
    /// Per-source LF surrogate parameters; empty vectors for exact sources.
    pub lf: Vec<Vec<(String, Tensor)>>,
    /// All encoder parameters pooled.
    pub enc: Vec<(String, Tensor)>,
    /// Linear block weight and bias.
    pub lin: Vec<(String, Tensor)>,
    /// Nonlinear block parameters.
    pub nl: Vec<(String, Tensor)>,
}

impl ParamGroups {
    /// Flat concatenation in group order, for the optimizer and archives.
    pub fn all(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for group in &self.lf {
            out.extend(group.iter().cloned());
        }
        out.extend(self.enc.iter().cloned());
        out.extend(self.lin.iter().cloned());
        out.extend(self.nl.iter().cloned());
        out
    }
}

// ── Construction ────────────────────────────────────────────────────────────

/// Configuration of one model build; `seed` fixes every sub-initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct MfModelSpec {
    pub family: NetworkKind,
    pub tier: Tier,
    pub encoder_mode: EncoderMode,
    pub seed: u64,
}

// Component tags mixed into the model seed; the nonlinear block and the
// single-fidelity baseline share one stream so their common-shaped weights
// start identical (fair-comparison determinism).
const TAG_LF_BASE: u64 = 0x4C46_0000;
const TAG_ENC_BASE: u64 = 0x454E_0000;
const TAG_LIN: u64 = 0x4C49_4E00;
const TAG_NL: u64 = 0x4E4C_0000;

fn component_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag))
}

/// Row-major square matrix with `d` on the diagonal, zeros elsewhere.
fn diag_values(d: &[f64]) -> Vec<f64> {
    let k = d.len();
    let mut out = vec![0.0; k * k];
    for (i, v) in d.iter().enumerate() {
        out[i * k + i] = *v;
    }
    out
}

/// Builds the multi-fidelity model for a problem: per-source encoders and LF
/// surrogates (exact fields wrapped into normalized coordinates in tiers 1–2,
/// trainable networks in tier 3), a Xavier-initialized linear block, and a
/// bias-free nonlinear block of the chosen family.
pub fn build_mf_model(
    problem: &BenchmarkProblem,
    norms: &Normalizers,
    spec: &MfModelSpec,
) -> Result<MfModel> {
    let k_h = problem.hf_dim();
    let n = problem.n_sources();
    if norms.x_l.len() != n || norms.y_l.len() != n {
        return Err(Error::Config(format!(
            "normalizers describe {} LF sources, problem `{}` has {n}",
            norms.x_l.len(),
            problem.name
        )));
    }

    let mut sources = Vec::with_capacity(n);
    let mut encoder_specs = Vec::with_capacity(n);
    let mut encoders = Vec::with_capacity(n);
    for i in 0..n {
        let k_l = problem.lf[i].dim();
        let enc_spec = EncoderSpec::new(spec.encoder_mode, k_h, k_l, spec.tier.hidden());
        let enc = encoding::init_encoder(&enc_spec, &mut component_rng(spec.seed, TAG_ENC_BASE + i as u64))?;
        encoder_specs.push(enc_spec);
        encoders.push(enc);

        if spec.tier.learned_lf() {
            let net_spec = NetworkSpec::new(spec.family, k_l, 1, spec.tier.hidden());
            let params =
                network::init_network(&net_spec, &mut component_rng(spec.seed, TAG_LF_BASE + i as u64))?;
            let inv: Vec<f64> = norms.x_l[i].alpha.iter().map(|a| 1.0 / a).collect();
            sources.push(LfSource::Learned {
                spec: net_spec,
                params,
                x_alpha_inv_diag: Tensor::matrix(k_l, k_l, diag_values(&inv))?,
                x_beta: Tensor::vector(norms.x_l[i].beta.clone()),
            });
        } else {
            sources.push(LfSource::Exact {
                field: Arc::clone(&problem.lf[i].field),
                y_alpha: norms.y_l[i].alpha[0],
                y_beta: norms.y_l[i].beta[0],
            });
        }
    }

    // The linear block is a zero-hidden-layer MLP: Xavier weight, zero bias.
    let lin_spec = NetworkSpec::new(NetworkKind::Mlp, k_h + n, 1, vec![]);
    let lin = network::init_mlp(&lin_spec, &mut component_rng(spec.seed, TAG_LIN))?;
    let LayerParams::Dense { weight, bias } = &lin.layers[0] else {
        unreachable!("mlp init yields dense layers");
    };
    let (lin_weight, lin_bias) = (weight.clone(), bias.clone().expect("bias enabled"));

    let nl_spec = NetworkSpec::new(spec.family, k_h + n, 1, spec.tier.hidden()).without_output_bias();
    let nl_params = network::init_network(&nl_spec, &mut component_rng(spec.seed, TAG_NL))?;

    Ok(MfModel {
        hf_dim: k_h,
        sources,
        encoder_specs,
        encoders,
        x_alpha_diag: Tensor::matrix(k_h, k_h, diag_values(&norms.x_h.alpha))?,
        x_beta: Tensor::vector(norms.x_h.beta.clone()),
        lin_weight,
        lin_bias,
        nl_spec,
        nl_params,
    })
}

/// Builds the single-fidelity baseline: one network of the same family and
/// tier mapping the HF input directly to the output, drawn from the same
/// stream as the MF nonlinear block.
pub fn build_sf_model(problem: &BenchmarkProblem, spec: &MfModelSpec) -> Result<SingleFidelityModel> {
    let net_spec = NetworkSpec::new(spec.family, problem.hf_dim(), 1, spec.tier.hidden());
    let params = network::init_network(&net_spec, &mut component_rng(spec.seed, TAG_NL))?;
    Ok(SingleFidelityModel {
        spec: net_spec,
        params,
    })
}

// ── Prediction ──────────────────────────────────────────────────────────────

impl MfModel {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    /// Full composed forward pass on a `[m, hf_dim]` batch; every returned
    /// tensor lives on the tape, and `total` is bitwise `linear + nonlinear`.
    pub fn predict_hf(&self, tape: &mut Tape, x: &Tensor) -> Result<HfPrediction> {
        if x.shape().len() != 2 || x.cols() != self.hf_dim {
            return Err(Error::BadShape {
                op: "predict_hf",
                expected: format!("[batch, {}] input", self.hf_dim),
                got: x.shape(),
            });
        }
        // Encoders act in original units: de-normalize the correlation input
        // once, and bridge each encoder's output into its source's own space.
        let scaled = tape.matmul(x, &self.x_alpha_diag)?;
        let x_orig = tape.add(&scaled, &self.x_beta)?;
        let mut z = Vec::with_capacity(self.n_sources());
        let mut encoded = Vec::with_capacity(self.n_sources());
        for (src, enc) in self.sources.iter().zip(&self.encoders) {
            let t = encoding::encode(enc, tape, &x_orig)?;
            if t.cols() != src.input_dim() {
                return Err(Error::ShapeMismatch {
                    op: "predict_hf: encoder output vs LF input",
                    lhs: t.shape(),
                    rhs: vec![src.input_dim()],
                });
            }
            let zi = match src {
                LfSource::Exact {
                    field,
                    y_alpha,
                    y_beta,
                } => {
                    let v = tape.field_eval(&t, field.as_ref())?;
                    let shifted = tape.add_scalar(&v, -y_beta);
                    tape.scale(&shifted, 1.0 / y_alpha)
                }
                LfSource::Learned {
                    spec,
                    params,
                    x_alpha_inv_diag,
                    x_beta,
                } => {
                    let centered = tape.sub(&t, x_beta)?;
                    let u = tape.matmul(&centered, x_alpha_inv_diag)?;
                    network::forward(spec, params, tape, &u)?
                }
            };
            encoded.push(t);
            z.push(zi);
        }
        let mut parts: Vec<&Tensor> = vec![x];
        parts.extend(z.iter());
        let features = tape.concat_cols(&parts)?;

        let wt = tape.transpose(&self.lin_weight)?;
        let lin = tape.matmul(&features, &wt)?;
        let linear = tape.add(&lin, &self.lin_bias)?;
        let nonlinear = network::forward(&self.nl_spec, &self.nl_params, tape, &features)?;
        let total = tape.add(&linear, &nonlinear)?;
        Ok(HfPrediction {
            total,
            linear,
            nonlinear,
            z,
            encoded,
        })
    }

    /// Evaluates learned LF surrogate `i` at raw (normalized) LF coordinates —
    /// no encoder is applied; encoders act only inside the HF composition.
    pub fn predict_lf(&self, tape: &mut Tape, i: usize, x_l: &Tensor) -> Result<Tensor> {
        let src = self.sources.get(i).ok_or_else(|| {
            Error::Config(format!(
                "LF index {i} out of range for {} sources",
                self.n_sources()
            ))
        })?;
        match src {
            LfSource::Exact { .. } => Err(Error::Config(format!(
                "LF source {i} is exact; only learned surrogates are evaluated"
            ))),
            LfSource::Learned { spec, params, .. } => network::forward(spec, params, tape, x_l),
        }
    }

    /// Exact partition of the trainable parameters into the groups the loss
    /// treats differently: θ_L per learned source, θ_T, θ_H^l, θ_H^nl.
    pub fn trainable_parameters(&self) -> ParamGroups {
        let lf = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, src)| match src {
                LfSource::Exact { .. } => Vec::new(),
                LfSource::Learned { params, .. } => params
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("lf{i}.{n}"), t))
                    .collect(),
            })
            .collect();
        let enc = self
            .encoders
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.named(&format!("enc{i}")))
            .collect();
        let lin = vec![
            ("lin.weight".to_string(), self.lin_weight.clone()),
            ("lin.bias".to_string(), self.lin_bias.clone()),
        ];
        let nl = self
            .nl_params
            .named()
            .into_iter()
            .map(|(n, t)| (format!("nl.{n}"), t))
            .collect();
        ParamGroups { lf, enc, lin, nl }
    }
}

impl SingleFidelityModel {
    pub fn predict(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        network::forward(&self.spec, &self.params, tape, x)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (format!("sf.{n}"), t))
            .collect()
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
