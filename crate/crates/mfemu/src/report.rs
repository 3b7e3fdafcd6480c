//! Experiment configuration and results files: the JSON config schema, the
//! three CSV artifacts (`grid.csv`, `trials.csv`, `best_fit.csv`), and the
//! reproducibility manifest (`manifest.json`).
//!
//! Everything written here is a pure function of the experiment results, so
//! a rerun with the same config produces byte-identical files. The one
//! measurement that varies between runs — wall time — is deliberately kept
//! out of every artifact for that reason.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::benchmarks::{load_rd_table, make_problem, BenchmarkProblem, Which};
use crate::encoding::EncoderMode;
use crate::mfmodel::Tier;
use crate::network::NetworkKind;
use crate::tensor::{Tape, Tensor};
use crate::training::{
    config_seed_for, data_seed_for, enumerate_configs, rebuild_trial_model, run_grid,
    AggregateRow, GridSpec, TrainSchedule, TrainedModel, TrialResult,
};
use crate::{Error, Result};

/// Environment variable naming the default output directory when the config
/// leaves `output_dir` unset.
pub const OUTPUT_DIR_ENV: &str = "MFEMU_OUT_DIR";

const FALLBACK_OUTPUT_DIR: &str = "results";

// ── Config schema ───────────────────────────────────────────────────────────

fn default_architectures() -> Vec<String> {
    vec!["mlp".into(), "siren".into(), "kan".into()]
}

fn default_tiers() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_encodings() -> Vec<String> {
    vec!["none".into(), "linear".into(), "nonlinear".into()]
}

fn default_repetitions() -> usize {
    4
}

fn default_epochs() -> usize {
    20_000
}

fn default_search_budget() -> usize {
    30
}

/// The experiment as a JSON document. Field names are the schema and stay
/// stable; omitted fields take the documented defaults, with `hf_sizes`
/// defaulting to the canonical sizes for the problem's input dimension
/// (8/16/32 in one dimension, 64/128/256 otherwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<String>,
    #[serde(default = "default_tiers")]
    pub tiers: Vec<usize>,
    #[serde(default)]
    pub hf_sizes: Vec<usize>,
    #[serde(default = "default_encodings")]
    pub encodings: Vec<String>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_search_budget")]
    pub search_budget: usize,
    #[serde(default)]
    pub pretrain_freeze: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rd_table: Option<PathBuf>,
}

impl ExperimentConfig {
    /// A minimal config for one problem, everything else defaulted.
    pub fn for_problem(problem: &str) -> ExperimentConfig {
        ExperimentConfig {
            problem: problem.to_string(),
            architectures: default_architectures(),
            tiers: default_tiers(),
            hf_sizes: Vec::new(),
            encodings: default_encodings(),
            repetitions: default_repetitions(),
            master_seed: 0,
            epochs: default_epochs(),
            search_budget: default_search_budget(),
            pretrain_freeze: false,
            output_dir: None,
            rd_table: None,
        }
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(&fs::read_to_string(path)?)
    }

    /// Builds the benchmark problem this config names. The reaction–diffusion
    /// problem draws its fidelity tables from measurement files and therefore
    /// requires `rd_table`.
    pub fn build_problem(&self) -> Result<BenchmarkProblem> {
        if self.problem == "rd" {
            let Some(path) = &self.rd_table else {
                return Err(Error::Config(
                    "problem `rd` requires the `rd_table` config field (path to its QoI table file)"
                        .into(),
                ));
            };
            return load_rd_table(path);
        }
        if self.rd_table.is_some() {
            return Err(Error::Config(format!(
                "`rd_table` is only meaningful for problem `rd`, not `{}`",
                self.problem
            )));
        }
        make_problem(&self.problem)
    }

    /// Canonical HF design sizes when the config leaves `hf_sizes` empty.
    pub fn resolved_hf_sizes(&self, problem: &BenchmarkProblem) -> Vec<usize> {
        if !self.hf_sizes.is_empty() {
            return self.hf_sizes.clone();
        }
        if problem.hf_dim() == 1 {
            vec![8, 16, 32]
        } else {
            vec![64, 128, 256]
        }
    }

    /// Validates the subsets and lowers the config into a grid description.
    pub fn build_grid(&self, problem: &BenchmarkProblem) -> Result<GridSpec> {
        if self.architectures.is_empty()
            || self.tiers.is_empty()
            || self.encodings.is_empty()
        {
            return Err(Error::Config(
                "architectures, tiers, and encodings must each name at least one value".into(),
            ));
        }
        let architectures = self
            .architectures
            .iter()
            .map(|s| NetworkKind::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let tiers = self
            .tiers
            .iter()
            .map(|t| Tier::parse(&t.to_string()))
            .collect::<Result<Vec<_>>>()?;
        let encodings = self
            .encodings
            .iter()
            .map(|s| EncoderMode::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let hf_sizes = self.resolved_hf_sizes(problem);
        if hf_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("hf_sizes must be positive".into()));
        }
        Ok(GridSpec {
            architectures,
            tiers,
            hf_sizes,
            encodings,
            repetitions: self.repetitions,
            master_seed: self.master_seed,
            search_budget: self.search_budget,
            schedule: TrainSchedule {
                epochs: self.epochs,
                record_trace: false,
                pretrain_freeze: self.pretrain_freeze,
            },
        })
    }

    /// Output directory: explicit config value, else the environment
    /// default, else `./results`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from(FALLBACK_OUTPUT_DIR)
    }
}

// ── CSV rendering ───────────────────────────────────────────────────────────

/// Quotes a CSV field per RFC 4180 when it contains a delimiter, quote, or
/// newline.
fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Shortest decimal that parses back to the same double, so CSV numbers are
/// exact and reruns are byte-identical. Extreme magnitudes switch to
/// scientific notation (plain `Display` would write hundreds of zeros).
fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e16) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub const GRID_CSV_HEADER: &str =
    "problem,architecture,tier,encoding,n_hf,mean_normalized_mse,cov,failed_count";

/// One line per aggregate row, schema fixed by [`GRID_CSV_HEADER`].
pub fn render_grid_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            csv_field(&row.key.problem),
            row.key.architecture.as_str(),
            row.key.tier.index(),
            row.key.encoding_label(),
            row.key.n_hf,
            fmt_f64(row.mean_normalized_mse),
            fmt_f64(row.cov),
            row.failed,
        ));
    }
    out
}

pub const TRIALS_CSV_HEADER: &str = "problem,architecture,tier,encoding,n_hf,phase,trial_index,\
repetition,model_seed,data_seed,lr,lambda_l,lambda_h_nl,lambda_t,lambda_d,failed,failure,\
final_loss,mse,normalized_mse,unnormalized";

fn trial_line(t: &TrialResult) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        csv_field(&t.key.problem),
        t.key.architecture.as_str(),
        t.key.tier.index(),
        t.key.encoding_label(),
        t.key.n_hf,
        t.phase.label(),
        t.phase.index(),
        t.repetition,
        t.model_seed,
        t.data_seed,
        fmt_f64(t.hp.lr),
        fmt_f64(t.hp.weights.lambda_l),
        fmt_f64(t.hp.weights.lambda_h_nl),
        fmt_f64(t.hp.weights.lambda_t),
        fmt_f64(t.hp.weights.lambda_d),
        t.failed,
        csv_field(t.failure.as_deref().unwrap_or("")),
        fmt_f64(t.final_loss),
        fmt_f64(t.mse),
        fmt_f64(t.normalized_mse),
        t.unnormalized,
    )
}

/// Every trial — search candidates first, then final repetitions — for each
/// grid row in order. Wall time is intentionally absent.
pub fn render_trials_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(TRIALS_CSV_HEADER);
    out.push('\n');
    for row in rows {
        for t in &row.search_trials {
            out.push_str(&trial_line(t));
        }
        for t in &row.repetition_trials {
            out.push_str(&trial_line(t));
        }
    }
    out
}

// ── Best-trial fit curves ───────────────────────────────────────────────────

/// Evaluation points for fit curves: a 512-point inclusive grid in one
/// dimension, a 64×64 inclusive grid (first coordinate outermost) in two,
/// and the trial's own HF test points above two where a dense grid is
/// impractical to plot anyway.
fn fit_points(problem: &BenchmarkProblem, test: &crate::sampling::Dataset) -> Vec<f64> {
    let domain = &problem.hf.domain;
    match problem.hf_dim() {
        1 => {
            let n = 512;
            (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    domain.lo[0] + t * (domain.hi[0] - domain.lo[0])
                })
                .collect()
        }
        2 => {
            let n = 64;
            let mut xs = Vec::with_capacity(n * n * 2);
            for i in 0..n {
                let t0 = i as f64 / (n - 1) as f64;
                let x0 = domain.lo[0] + t0 * (domain.hi[0] - domain.lo[0]);
                for j in 0..n {
                    let t1 = j as f64 / (n - 1) as f64;
                    let x1 = domain.lo[1] + t1 * (domain.hi[1] - domain.lo[1]);
                    xs.push(x0);
                    xs.push(x1);
                }
            }
            xs
        }
        _ => test.xs.clone(),
    }
}

/// Best-fit CSV header for a given problem: coordinates, the true HF value,
/// the prediction and its linear/nonlinear split, then one column per LF
/// source seen through its encoder.
pub fn best_fit_header(problem: &BenchmarkProblem) -> String {
    let mut cols: Vec<String> = vec![
        "problem".into(),
        "architecture".into(),
        "tier".into(),
        "encoding".into(),
        "n_hf".into(),
    ];
    for d in 0..problem.hf_dim() {
        cols.push(format!("x{d}"));
    }
    cols.push("y_hf".into());
    cols.push("pred".into());
    cols.push("pred_linear".into());
    cols.push("pred_nonlinear".into());
    for i in 0..problem.n_sources() {
        cols.push(format!("lf{i}"));
    }
    cols.join(",")
}

struct FitColumns {
    pred: Vec<f64>,
    pred_linear: Vec<f64>,
    pred_nonlinear: Vec<f64>,
    lf: Vec<Vec<f64>>,
}

/// Component predictions in original units. The de-normalization offset
/// belongs to the affine (linear) part, so `pred = pred_linear +
/// pred_nonlinear` holds in original units too. A single-fidelity model has
/// no decomposition; its component columns are all-NaN.
fn fit_columns(
    model: &TrainedModel,
    norms: &crate::sampling::Normalizers,
    xs: &[f64],
    dim: usize,
    n_sources: usize,
) -> Result<FitColumns> {
    let n = xs.len() / dim;
    let x = Tensor::matrix(n, dim, norms.x_h.normalize_all(xs))?;
    let mut tape = Tape::new();
    match model {
        TrainedModel::Mf(m) => {
            let pred = m.predict_hf(&mut tape, &x)?;
            let alpha = norms.y_h.alpha[0];
            let beta = norms.y_h.beta[0];
            let linear: Vec<f64> = pred
                .linear
                .to_vec()
                .iter()
                .map(|v| alpha * v + beta)
                .collect();
            let nonlinear: Vec<f64> = pred.nonlinear.to_vec().iter().map(|v| alpha * v).collect();
            let mut lf = Vec::with_capacity(n_sources);
            for (i, z) in pred.z.iter().enumerate() {
                lf.push(norms.y_l[i].denormalize_all(&z.to_vec()));
            }
            Ok(FitColumns {
                pred: norms.y_h.denormalize_all(&pred.total.to_vec()),
                pred_linear: linear,
                pred_nonlinear: nonlinear,
                lf,
            })
        }
        TrainedModel::Sf(m) => {
            let pred = m.predict(&mut tape, &x)?;
            Ok(FitColumns {
                pred: norms.y_h.denormalize_all(&pred.to_vec()),
                pred_linear: vec![f64::NAN; n],
                pred_nonlinear: vec![f64::NAN; n],
                lf: vec![vec![f64::NAN; n]; n_sources],
            })
        }
    }
}

/// Picks the best final-phase trial (lowest normalized MSE, ties to the
/// earlier row) for each (encoding, size) pair, in first-seen order.
fn best_trials_per_encoding_and_size(rows: &[AggregateRow]) -> Vec<&TrialResult> {
    let mut best: Vec<(&str, usize, &TrialResult)> = Vec::new();
    for row in rows {
        for t in &row.repetition_trials {
            if t.failed {
                continue;
            }
            let label = t.key.encoding_label();
            match best
                .iter_mut()
                .find(|(l, n, _)| *l == label && *n == t.key.n_hf)
            {
                Some(slot) => {
                    if t.normalized_mse < slot.2.normalized_mse {
                        slot.2 = t;
                    }
                }
                None => best.push((label, t.key.n_hf, t)),
            }
        }
    }
    best.into_iter().map(|(_, _, t)| t).collect()
}

/// Dense fit curves for the best trial of each (encoding, size): the true HF
/// function, the prediction with its linear/nonlinear decomposition, and
/// each LF source seen through its encoder, all in original units.
pub fn render_best_fit_csv(problem: &BenchmarkProblem, rows: &[AggregateRow]) -> Result<String> {
    let dim = problem.hf_dim();
    let n_sources = problem.n_sources();
    let mut out = best_fit_header(problem);
    out.push('\n');
    for trial in best_trials_per_encoding_and_size(rows) {
        let (model, norms) = rebuild_trial_model(problem, trial)?;
        let design = crate::sampling::DesignSpec::for_problem(
            problem,
            trial.key.n_hf,
            trial.data_seed,
            trial.repetition,
        );
        let data = crate::sampling::build_datasets(problem, &design)?;
        let xs = fit_points(problem, &data.hf_test);
        let y_hf = problem.evaluate(Which::Hf, &xs)?;
        let cols = fit_columns(&model, &norms, &xs, dim, n_sources)?;
        let n = xs.len() / dim;
        for r in 0..n {
            let mut fields: Vec<String> = vec![
                csv_field(&trial.key.problem),
                trial.key.architecture.as_str().to_string(),
                trial.key.tier.index().to_string(),
                trial.key.encoding_label().to_string(),
                trial.key.n_hf.to_string(),
            ];
            for d in 0..dim {
                fields.push(fmt_f64(xs[r * dim + d]));
            }
            fields.push(fmt_f64(y_hf[r]));
            fields.push(fmt_f64(cols.pred[r]));
            fields.push(fmt_f64(cols.pred_linear[r]));
            fields.push(fmt_f64(cols.pred_nonlinear[r]));
            for lf in &cols.lf {
                fields.push(fmt_f64(lf[r]));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    Ok(out)
}

// ── Manifest ────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PackageStamp {
    pub name: String,
    pub version: String,
}

/// Everything needed to reproduce any grid row: the config echo (with the
/// resolved design sizes), the derived per-size data seeds and per-config
/// seeds, and the package version that produced the files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub package: PackageStamp,
    pub config: ExperimentConfig,
    pub resolved_hf_sizes: Vec<usize>,
    /// `(n_hf, seed)` pairs feeding the sampling streams.
    pub data_seeds: Vec<(usize, u64)>,
    /// `(config id, seed)` pairs feeding search draws and repetition
    /// model initializations, in grid enumeration order.
    pub config_seeds: Vec<(String, u64)>,
}

pub fn build_manifest(
    config: &ExperimentConfig,
    problem: &BenchmarkProblem,
    grid: &GridSpec,
) -> Manifest {
    let data_seeds = grid
        .hf_sizes
        .iter()
        .map(|&n| (n, data_seed_for(grid.master_seed, n)))
        .collect();
    let config_seeds = enumerate_configs(problem, grid)
        .iter()
        .enumerate()
        .map(|(k, key)| (key.id(), config_seed_for(grid.master_seed, k)))
        .collect();
    Manifest {
        format_version: 1,
        package: PackageStamp {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        config: config.clone(),
        resolved_hf_sizes: grid.hf_sizes.clone(),
        data_seeds,
        config_seeds,
    }
}

// ── Experiment driver ───────────────────────────────────────────────────────

/// Paths of the artifacts one run writes.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub grid_csv: PathBuf,
    pub trials_csv: PathBuf,
    pub best_fit_csv: PathBuf,
    pub manifest_json: PathBuf,
    pub rows: Vec<AggregateRow>,
}

/// Runs the configured experiment grid and writes the four artifacts into
/// the resolved output directory, creating it if needed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let problem = config.build_problem()?;
    let grid = config.build_grid(&problem)?;
    let rows = run_grid(&problem, &grid)?;

    let dir = config.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    let grid_csv = dir.join("grid.csv");
    let trials_csv = dir.join("trials.csv");
    let best_fit_csv = dir.join("best_fit.csv");
    let manifest_json = dir.join("manifest.json");

    fs::write(&grid_csv, render_grid_csv(&rows))?;
    fs::write(&trials_csv, render_trials_csv(&rows))?;
    fs::write(&best_fit_csv, render_best_fit_csv(&problem, &rows)?)?;
    let manifest = build_manifest(config, &problem, &grid);
    fs::write(&manifest_json, serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunArtifacts {
        output_dir: dir,
        grid_csv,
        trials_csv,
        best_fit_csv,
        manifest_json,
        rows,
    })
}

// ── Tests ───────────────────────────────────────────────────────────────────
