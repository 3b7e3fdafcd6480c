//! Coordinate encoders `T_i` mapping the high-fidelity input space into each
//! low-fidelity input space: linear (one trainable affine layer) or nonlinear
//! (a fixed selector plus a residual MLP), both exactly the identity-like
//! selector map at initialization.

use rand_chacha::ChaCha8Rng;

use crate::network::{self, LayerParams, NetworkKind, NetworkParams, NetworkSpec};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

// ── Specification ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// No map at all; only valid when the LF input space equals the HF one.
    None,
    /// Trainable affine map `T(x) = Wx + b`.
    Linear,
    /// Residual map `T(x) = Px + M(x)` with `P` fixed and `M` a trainable
    /// MLP whose last layer starts at zero, so `T = P` at initialization.
    Nonlinear,
}

impl EncoderMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderMode::None => "none",
            EncoderMode::Linear => "linear",
            EncoderMode::Nonlinear => "nonlinear",
        }
    }

    pub fn parse(name: &str) -> Result<EncoderMode> {
        match name.to_ascii_lowercase().as_str() {
            "none" => Ok(EncoderMode::None),
            "linear" => Ok(EncoderMode::Linear),
            "nonlinear" => Ok(EncoderMode::Nonlinear),
            other => Err(Error::Config(format!("unknown encoder mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub mode: EncoderMode,
    pub hf_dim: usize,
    pub lf_dim: usize,
    /// Hidden widths of the nonlinear residual body; ignored otherwise.
    pub hidden: Vec<usize>,
}

impl EncoderSpec {
    pub fn new(mode: EncoderMode, hf_dim: usize, lf_dim: usize, hidden: Vec<usize>) -> EncoderSpec {
        EncoderSpec {
            mode,
            hf_dim,
            lf_dim,
            hidden,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hf_dim == 0 || self.lf_dim == 0 {
            return Err(Error::Config(
                "encoder dimensions must be positive".into(),
            ));
        }
        if self.mode == EncoderMode::None && self.hf_dim != self.lf_dim {
            return Err(Error::Config(format!(
                "encoder mode `none` needs matching dimensions, got {} HF and {} LF",
                self.hf_dim, self.lf_dim
            )));
        }
        Ok(())
    }
}

// ── Parameters ──────────────────────────────────────────────────────────────

/// Values of the selector matrix `I_{k_L,k_H}`: ones on the diagonal, the
/// identity when the dimensions match.
fn selector_values(lf_dim: usize, hf_dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; lf_dim * hf_dim];
    for i in 0..lf_dim.min(hf_dim) {
        p[i * hf_dim + i] = 1.0;
    }
    p
}

#[derive(Clone)]
pub enum EncoderParams {
    /// Pass-through; `dim` kept for shape validation.
    None { dim: usize },
    Linear {
        /// `[k_L, k_H]`, initialized to the selector matrix.
        weight: Tensor,
        bias: Tensor,
    },
    Nonlinear {
        /// Fixed (non-trainable) selector `[k_L, k_H]`.
        selector: Tensor,
        body_spec: NetworkSpec,
        body: NetworkParams,
    },
}

impl EncoderParams {
    /// Trainable `(name, tensor)` pairs under the given prefix. The fixed
    /// selector of the nonlinear mode is deliberately absent.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        match self {
            EncoderParams::None { .. } => Vec::new(),
            EncoderParams::Linear { weight, bias } => vec![
                (format!("{prefix}.weight"), weight.clone()),
                (format!("{prefix}.bias"), bias.clone()),
            ],
            EncoderParams::Nonlinear { body, .. } => body
                .named()
                .into_iter()
                .map(|(n, t)| (format!("{prefix}.{n}"), t))
                .collect(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            EncoderParams::None { dim } => *dim,
            EncoderParams::Linear { weight, .. } => weight.cols(),
            EncoderParams::Nonlinear { selector, .. } => selector.cols(),
        }
    }
}

/// Builds encoder parameters so that `T(x) = Px` exactly at initialization:
/// linear mode starts at the selector with zero bias; nonlinear mode adds an
/// MLP body whose final layer weights and bias are zeroed.
pub fn init_encoder(spec: &EncoderSpec, rng: &mut ChaCha8Rng) -> Result<EncoderParams> {
    spec.validate()?;
    match spec.mode {
        EncoderMode::None => Ok(EncoderParams::None { dim: spec.hf_dim }),
        EncoderMode::Linear => Ok(EncoderParams::Linear {
            weight: Tensor::new(
                vec![spec.lf_dim, spec.hf_dim],
                selector_values(spec.lf_dim, spec.hf_dim),
                true,
            )?,
            bias: Tensor::zeros(vec![spec.lf_dim], true)?,
        }),
        EncoderMode::Nonlinear => {
            let body_spec = NetworkSpec::new(
                NetworkKind::Mlp,
                spec.hf_dim,
                spec.lf_dim,
                spec.hidden.clone(),
            );
            let body = network::init_mlp(&body_spec, rng)?;
            if let Some(LayerParams::Dense { weight, bias }) = body.layers.last() {
                weight.set_values(&vec![0.0; weight.numel()]);
                if let Some(b) = bias {
                    b.set_values(&vec![0.0; b.numel()]);
                }
            }
            Ok(EncoderParams::Nonlinear {
                selector: Tensor::new(
                    vec![spec.lf_dim, spec.hf_dim],
                    selector_values(spec.lf_dim, spec.hf_dim),
                    false,
                )?,
                body_spec,
                body,
            })
        }
    }
}

/// Applies the encoder to a `[batch, k_H]` tensor, recording on the tape;
/// returns `[batch, k_L]`, differentiable with respect to both the input and
/// the encoder parameters.
pub fn encode(params: &EncoderParams, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != params.input_dim() {
        return Err(Error::BadShape {
            op: "encode",
            expected: format!("[batch, {}] input", params.input_dim()),
            got: x.shape(),
        });
    }
    match params {
        EncoderParams::None { .. } => Ok(x.clone()),
        EncoderParams::Linear { weight, bias } => {
            let wt = tape.transpose(weight)?;
            let z = tape.matmul(x, &wt)?;
            tape.add(&z, bias)
        }
        EncoderParams::Nonlinear {
            selector,
            body_spec,
            body,
        } => {
            let pt = tape.transpose(selector)?;
            let px = tape.matmul(x, &pt)?;
            let mx = network::forward(body_spec, body, tape, x)?;
            tape.add(&px, &mx)
        }
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────
