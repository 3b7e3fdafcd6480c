//! The three sub-network architectures — tanh MLP, sinusoidal representation
//! network, and Kolmogorov–Arnold network with B-spline edges — with their
//! initialization schemes and define-by-run forward passes. Any of them can
//! serve as a low-fidelity surrogate, a nonlinear correlation block, or the
//! body of a nonlinear coordinate encoder.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::spline;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

// ── Specification ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkKind {
    Mlp,
    Siren,
    Kan,
}

impl NetworkKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetworkKind::Mlp => "mlp",
            NetworkKind::Siren => "siren",
            NetworkKind::Kan => "kan",
        }
    }

    pub fn parse(name: &str) -> Result<NetworkKind> {
        match name.to_ascii_lowercase().as_str() {
            "mlp" => Ok(NetworkKind::Mlp),
            "siren" => Ok(NetworkKind::Siren),
            "kan" => Ok(NetworkKind::Kan),
            other => Err(Error::Config(format!("unknown network kind `{other}`"))),
        }
    }
}

/// Architecture description; widths run input → hidden… → output.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    /// The nonlinear correlation block must end in a pure linear map, so its
    /// spec turns this off; everything else keeps the default `true`.
    pub use_bias_on_output: bool,
    /// Frequency factor of the first Siren layer only.
    pub siren_omega0: f64,
    /// Numerator of the Siren hidden-layer init bound `sqrt(c/(ω0²·n_l))`.
    pub siren_c: f64,
    /// Number of interior grid intervals per KAN edge.
    pub kan_grid_size: usize,
    /// B-spline order (polynomial degree) of KAN edges.
    pub kan_spline_order: usize,
    /// Grid support of KAN edges; inputs beyond it are clamped for the basis
    /// lookup while the SiLU residual path sees the raw value.
    pub kan_grid_range: (f64, f64),
}

impl NetworkSpec {
    pub fn new(
        kind: NetworkKind,
        input_dim: usize,
        output_dim: usize,
        hidden: Vec<usize>,
    ) -> NetworkSpec {
        NetworkSpec {
            kind,
            input_dim,
            output_dim,
            hidden,
            use_bias_on_output: true,
            siren_omega0: 30.0,
            siren_c: 6.0,
            kan_grid_size: 5,
            kan_spline_order: 3,
            kan_grid_range: (-1.0, 1.0),
        }
    }

    pub fn without_output_bias(mut self) -> NetworkSpec {
        self.use_bias_on_output = false;
        self
    }

    /// Layer widths including input and output, e.g. `[1, 16, 16, 16, 1]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "network widths must be positive, got {:?}",
                self.widths()
            )));
        }
        match self.kind {
            NetworkKind::Siren => {
                if !(self.siren_omega0 > 0.0) || !(self.siren_c > 0.0) {
                    return Err(Error::Config(format!(
                        "siren frequency/init constants must be positive, got ω0={}, c={}",
                        self.siren_omega0, self.siren_c
                    )));
                }
            }
            NetworkKind::Kan => {
                if self.kan_grid_size == 0 || self.kan_spline_order == 0 {
                    return Err(Error::Config(
                        "kan grid size and spline order must be positive".into(),
                    ));
                }
                if !(self.kan_grid_range.1 > self.kan_grid_range.0) {
                    return Err(Error::Config(format!(
                        "kan grid range must be a proper interval, got [{}, {}]",
                        self.kan_grid_range.0, self.kan_grid_range.1
                    )));
                }
            }
            NetworkKind::Mlp => {}
        }
        Ok(())
    }

    /// Extended knot vector of every KAN edge in this network.
    pub fn kan_knots(&self) -> Rc<[f64]> {
        spline::uniform_knots(
            self.kan_grid_range.0,
            self.kan_grid_range.1,
            self.kan_grid_size,
            self.kan_spline_order,
        )
    }
}

// ── Parameters ──────────────────────────────────────────────────────────────

/// One layer's trainable tensors.
#[derive(Clone)]
pub enum LayerParams {
    /// Affine layer `x ↦ xWᵀ (+ b)`; weight is stored `[out, in]`.
    Dense { weight: Tensor, bias: Option<Tensor> },
    /// KAN layer: every edge computes `w_b·SiLU(x) + Σ_k c_k·B_k(x)`.
    /// `base_weight` is `[out, in]`, `spline_coef` is `[out, in·nb]` with
    /// `nb` basis functions per edge.
    Kan {
        base_weight: Tensor,
        spline_coef: Tensor,
    },
}

/// All trainable tensors of one network, in layer order.
#[derive(Clone)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    /// Stable `(name, tensor)` pairs, e.g. `layer0.weight`, `layer2.bias`,
    /// `layer1.spline_coef`; used by the optimizer, gradient checks, and
    /// archives.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Dense { weight, bias } => {
                    out.push((format!("layer{l}.weight"), weight.clone()));
                    if let Some(b) = bias {
                        out.push((format!("layer{l}.bias"), b.clone()));
                    }
                }
                LayerParams::Kan {
                    base_weight,
                    spline_coef,
                } => {
                    out.push((format!("layer{l}.base_weight"), base_weight.clone()));
                    out.push((format!("layer{l}.spline_coef"), spline_coef.clone()));
                }
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::param_matrix(rows, cols, values).expect("consistent by construction")
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Tensor {
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param_vector(values)
}

/// Xavier-uniform MLP init: `W_l ~ U(−a, a)` with `a = sqrt(6/(n_in+n_out))`,
/// biases zero (the output bias is omitted when the spec says so).
pub fn init_mlp(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
    spec.validate()?;
    let widths = spec.widths();
    let last = spec.n_layers() - 1;
    let mut layers = Vec::with_capacity(spec.n_layers());
    for l in 0..spec.n_layers() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let weight = uniform_matrix(rng, n_out, n_in, bound);
        let bias = if l == last && !spec.use_bias_on_output {
            None
        } else {
            Some(Tensor::zeros(vec![n_out], true).expect("vector shape"))
        };
        layers.push(LayerParams::Dense { weight, bias });
    }
    Ok(NetworkParams { layers })
}

/// Siren init: `W_0, b_0 ~ U(−1/n_0, 1/n_0)` with `n_0` the input dimension;
/// all later layers draw from `U(±sqrt(c/(ω0²·n_l)))` with `n_l` the fan-in.
pub fn init_siren(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
    spec.validate()?;
    let widths = spec.widths();
    let last = spec.n_layers() - 1;
    let mut layers = Vec::with_capacity(spec.n_layers());
    for l in 0..spec.n_layers() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let bound = if l == 0 {
            1.0 / n_in as f64
        } else {
            (spec.siren_c / (spec.siren_omega0 * spec.siren_omega0 * n_in as f64)).sqrt()
        };
        let weight = uniform_matrix(rng, n_out, n_in, bound);
        let bias = if l == last && !spec.use_bias_on_output {
            None
        } else {
            Some(uniform_vector(rng, n_out, bound))
        };
        layers.push(LayerParams::Dense { weight, bias });
    }
    Ok(NetworkParams { layers })
}

/// KAN init: base weights Kaiming-uniform `U(±sqrt(6/n_in))`; spline
/// coefficients Kaiming-uniform over their own fan-in `n_in·nb`, then scaled
/// by 0.1 so edges start near the SiLU-dominated regime.
pub fn init_kan(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
    spec.validate()?;
    let widths = spec.widths();
    let nb = spline::basis_count(&spec.kan_knots(), spec.kan_spline_order);
    let mut layers = Vec::with_capacity(spec.n_layers());
    for l in 0..spec.n_layers() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let base_bound = (6.0 / n_in as f64).sqrt();
        let spline_bound = (6.0 / (n_in * nb) as f64).sqrt();
        let base_weight = uniform_matrix(rng, n_out, n_in, base_bound);
        let spline_coef = uniform_matrix(rng, n_out, n_in * nb, spline_bound);
        spline_coef.set_values(
            &spline_coef
                .to_vec()
                .iter()
                .map(|v| 0.1 * v)
                .collect::<Vec<f64>>(),
        );
        layers.push(LayerParams::Kan {
            base_weight,
            spline_coef,
        });
    }
    Ok(NetworkParams { layers })
}

/// Initializes parameters for whichever architecture the spec names.
pub fn init_network(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
    match spec.kind {
        NetworkKind::Mlp => init_mlp(spec, rng),
        NetworkKind::Siren => init_siren(spec, rng),
        NetworkKind::Kan => init_kan(spec, rng),
    }
}

// ── Forward passes ──────────────────────────────────────────────────────────

fn dense_layer(
    tape: &mut Tape,
    h: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let wt = tape.transpose(weight)?;
    let z = tape.matmul(h, &wt)?;
    match bias {
        Some(b) => tape.add(&z, b),
        None => Ok(z),
    }
}

/// Runs the network on a `[batch, input_dim]` tensor, recording every step on
/// the tape; returns a `[batch, output_dim]` tensor.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    tape: &mut Tape,
    x: &Tensor,
) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != spec.input_dim {
        return Err(Error::BadShape {
            op: "network forward",
            expected: format!("[batch, {}] input", spec.input_dim),
            got: x.shape(),
        });
    }
    if params.layers.len() != spec.n_layers() {
        return Err(Error::BadShape {
            op: "network forward",
            expected: format!("{} layers", spec.n_layers()),
            got: vec![params.layers.len()],
        });
    }
    let last = spec.n_layers() - 1;
    let mut h = x.clone();
    match spec.kind {
        NetworkKind::Mlp => {
            for (l, layer) in params.layers.iter().enumerate() {
                let LayerParams::Dense { weight, bias } = layer else {
                    return Err(Error::Config("mlp forward on non-dense layer".into()));
                };
                h = dense_layer(tape, &h, weight, bias.as_ref())?;
                if l < last {
                    h = tape.tanh(&h);
                }
            }
        }
        NetworkKind::Siren => {
            for (l, layer) in params.layers.iter().enumerate() {
                let LayerParams::Dense { weight, bias } = layer else {
                    return Err(Error::Config("siren forward on non-dense layer".into()));
                };
                if l == 0 && l < last {
                    // φ_0(x) = sin(ω0·(xW₀ᵀ) + b₀): the frequency factor
                    // multiplies the product only, the bias is added after.
                    let wt = tape.transpose(weight)?;
                    let z = tape.matmul(&h, &wt)?;
                    let z = tape.scale(&z, spec.siren_omega0);
                    let z = match bias {
                        Some(b) => tape.add(&z, b)?,
                        None => z,
                    };
                    h = tape.sin(&z);
                } else {
                    h = dense_layer(tape, &h, weight, bias.as_ref())?;
                    if l < last {
                        h = tape.sin(&h);
                    }
                }
            }
        }
        NetworkKind::Kan => {
            let knots = spec.kan_knots();
            for layer in &params.layers {
                let LayerParams::Kan {
                    base_weight,
                    spline_coef,
                } = layer
                else {
                    return Err(Error::Config("kan forward on non-kan layer".into()));
                };
                let basis = tape.kan_basis(&h, &knots, spec.kan_spline_order)?;
                let ct = tape.transpose(spline_coef)?;
                let spline_out = tape.matmul(&basis, &ct)?;
                let silu_h = tape.silu(&h);
                let wt = tape.transpose(base_weight)?;
                let base_out = tape.matmul(&silu_h, &wt)?;
                h = tape.add(&spline_out, &base_out)?;
            }
        }
    }
    Ok(h)
}

/// Convenience evaluation without keeping the tape: runs `forward` on a fresh
/// tape and returns the flat output values.
pub fn forward_values(
    spec: &NetworkSpec,
    params: &NetworkParams,
    xs: &[f64],
    batch: usize,
) -> Result<Vec<f64>> {
    let x = Tensor::matrix(batch, spec.input_dim, xs.to_vec())?;
    let mut tape = Tape::new();
    Ok(forward(spec, params, &mut tape, &x)?.to_vec())
}

// ── Tests ───────────────────────────────────────────────────────────────────
