//! Experiment designs: Sobol low-discrepancy sampling with seeded
//! power-of-two offset blocks, boundary augmentation, dataset assembly with
//! low-fidelity oversampling, and min-max affine normalization together with
//! exact recovery of linear-block coefficients in original data units.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::benchmarks::{BenchmarkProblem, Which};
use crate::field::Domain;
use crate::sobol_tables::{M_INIT, POLY, SOBOL_DIMS};
use crate::{mix_seed, Error, Result};

// ── Sobol sequence ──────────────────────────────────────────────────────────

/// Number of seeded offset blocks a single sequence is partitioned into.
const MAX_OFFSET_BLOCKS: u64 = 1 << 16;

/// Expands the tabulated initial values of one dimension into 64 direction
/// numbers `v_k = m_k · 2^(k-64)` stored as fixed-point `u64`.
fn direction_numbers(dim_index: usize) -> [u64; 64] {
    let mut m = [1u64; 64];
    if dim_index > 0 {
        let poly = POLY[dim_index];
        let s = (31 - poly.leading_zeros()) as usize;
        m[..s].copy_from_slice(&M_INIT[dim_index][..s]);
        for k in s..64 {
            // m_k = 2^s·m_{k-s} ⊕ m_{k-s} ⊕ (⊕_{i=1..s-1} a_i·2^i·m_{k-i}),
            // with a_i the inner coefficients of the primitive polynomial.
            let mut next = (m[k - s] << s) ^ m[k - s];
            for i in 1..s {
                if poly >> (s - i) & 1 == 1 {
                    next ^= m[k - i] << i;
                }
            }
            m[k] = next;
        }
    }
    let mut v = [0u64; 64];
    for (k, value) in m.iter().enumerate() {
        v[k] = value << (63 - k);
    }
    v
}

/// `n` consecutive Sobol points starting at sequence index `start ≥ 1`
/// (index 0 is the all-zeros point, which is never emitted).
pub(crate) fn sobol_block(n: usize, dim: usize, start: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(Error::Config("sobol: dimension must be at least 1".into()));
    }
    if dim > SOBOL_DIMS {
        return Err(Error::SobolDim {
            dim,
            max: SOBOL_DIMS,
        });
    }
    let dirs: Vec<[u64; 64]> = (0..dim).map(direction_numbers).collect();
    // Random access to the first point: x(i) = ⊕_{set bits b of gray(i)} v_{b+1}.
    let gray = start ^ (start >> 1);
    let mut acc = vec![0u64; dim];
    for b in 0..64 {
        if gray >> b & 1 == 1 {
            for (a, d) in acc.iter_mut().zip(&dirs) {
                *a ^= d[b];
            }
        }
    }
    let scale = 2f64.powi(-64);
    let mut out = Vec::with_capacity(n);
    let mut index = start;
    loop {
        out.push(acc.iter().map(|&a| a as f64 * scale).collect());
        if out.len() == n {
            return Ok(out);
        }
        // Successive gray codes differ in the lowest zero-run bit.
        index += 1;
        let bit = index.trailing_zeros() as usize;
        for (a, d) in acc.iter_mut().zip(&dirs) {
            *a ^= d[bit];
        }
    }
}

/// The `k`-th distinct block offset drawn from a seeded stream, so distinct
/// repetition indices always land in disjoint blocks of the same sequence.
fn nth_distinct_offset(seed: u64, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: Vec<u64> = Vec::with_capacity(k + 1);
    while seen.len() <= k {
        let r = rng.gen_range(0..MAX_OFFSET_BLOCKS);
        if !seen.contains(&r) {
            seen.push(r);
        }
    }
    seen[k]
}

/// `n` Sobol points in `[0,1)^dim` taken from a randomized power-of-two
/// aligned block: the block offset is `r · 2^⌈log2 n⌉` where `r` is the
/// `repetition_index`-th distinct draw of a stream seeded by `seed`, so equal
/// seeds with distinct repetition indices yield disjoint index ranges.
pub fn sobol(n: usize, dim: usize, seed: u64, repetition_index: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Config("sobol: need at least one point".into()));
    }
    let block = (n as u64).next_power_of_two();
    let r = nth_distinct_offset(seed, repetition_index);
    sobol_block(n, dim, r * block + 1)
}

// ── Boundary augmentation ───────────────────────────────────────────────────

/// Appends domain boundary points so that models never extrapolate: both
/// endpoints in 1D, every corner in 2D/3D, and the two diagonal corners
/// (all-lower, all-upper) above 3D. Points already present are not repeated.
pub fn augment_boundary(mut points: Vec<Vec<f64>>, domain: &Domain) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let corners: Vec<Vec<f64>> = match d {
        1 => vec![vec![domain.lo[0]], vec![domain.hi[0]]],
        2 | 3 => (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|j| {
                        if mask >> j & 1 == 1 {
                            domain.hi[j]
                        } else {
                            domain.lo[j]
                        }
                    })
                    .collect()
            })
            .collect(),
        _ => vec![domain.lo.clone(), domain.hi.clone()],
    };
    for corner in corners {
        if !points.contains(&corner) {
            points.push(corner);
        }
    }
    points
}

// ── Datasets ────────────────────────────────────────────────────────────────

/// Labeled sample set: `xs` is row-major with `dim` coordinates per row and
/// `ys` holds one scalar label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, xs: Vec<f64>, ys: Vec<f64>) -> Dataset {
        assert!(dim > 0, "dataset needs at least one input dimension");
        assert_eq!(xs.len(), ys.len() * dim, "ragged dataset");
        Dataset { dim, xs, ys }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    /// Serializes as CSV with header `x1,…,xd,y`; float formatting is the
    /// shortest round-trip representation, so export/import is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 1..=self.dim {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("y\n");
        for (i, y) in self.ys.iter().enumerate() {
            for v in self.row(i) {
                out.push_str(&format!("{v:?},"));
            }
            out.push_str(&format!("{y:?}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Archive("dataset csv: empty file".into()))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(Error::Archive(
                "dataset csv: header needs x columns and a y column".into(),
            ));
        }
        let dim = cols - 1;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::Archive(format!(
                    "dataset csv: row {} has {} fields, expected {cols}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let mut row = Vec::with_capacity(cols);
            for f in &fields {
                row.push(f.trim().parse::<f64>().map_err(|_| {
                    Error::Archive(format!("dataset csv: bad number `{f}` on row {}", lineno + 2))
                })?);
            }
            ys.push(row.pop().expect("cols >= 2"));
            xs.extend(row);
        }
        Ok(Dataset::new(dim, xs, ys))
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Dataset> {
        Dataset::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Sizes, box, and seeding of one experiment repetition's sample sets.
///
/// The canonical study sizes are `n_hf ∈ {8, 16, 32}` for 1D problems and
/// `{64, 128, 256}` for multi-dimensional ones, with `lf_ratio = 8`; the
/// builder accepts any positive values for ad-hoc runs.
#[derive(Clone, Debug)]
pub struct DesignSpec {
    pub n_hf: usize,
    pub lf_ratio: usize,
    /// Box the high-fidelity training and test points are drawn from.
    pub domain: Domain,
    pub seed: u64,
    pub repetition_index: usize,
}

impl DesignSpec {
    /// Design over the problem's own high-fidelity domain with the default
    /// low-fidelity oversampling ratio of 8.
    pub fn for_problem(
        problem: &BenchmarkProblem,
        n_hf: usize,
        seed: u64,
        repetition_index: usize,
    ) -> DesignSpec {
        DesignSpec {
            n_hf,
            lf_ratio: 8,
            domain: problem.hf.domain.clone(),
            seed,
            repetition_index,
        }
    }
}

/// Training and test sets of one repetition.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub hf_train: Dataset,
    pub lf_train: Vec<Dataset>,
    pub hf_test: Dataset,
}

// Sub-stream tags mixed into the design seed, one per sample set.
const STREAM_HF_TRAIN: u64 = 1;
const STREAM_HF_TEST: u64 = 2;
const STREAM_LF_BASE: u64 = 16;

fn labeled(problem: &BenchmarkProblem, which: Which, rows: &[Vec<f64>]) -> Result<Dataset> {
    let dim = rows.first().map_or(1, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let ys = problem.evaluate(which, &flat)?;
    Ok(Dataset::new(dim, flat, ys))
}

/// Builds all sample sets of one repetition: boundary-augmented Sobol
/// high-fidelity training points, `lf_ratio · n_hf` Sobol points per
/// low-fidelity source on that source's own domain (always generated, so
/// exact-form and learned low-fidelity experiments share normalization
/// statistics), and `n_hf` i.i.d. uniform high-fidelity test points.
pub fn build_datasets(problem: &BenchmarkProblem, design: &DesignSpec) -> Result<Datasets> {
    if design.n_hf == 0 || design.lf_ratio == 0 {
        return Err(Error::Config(
            "design: n_hf and lf_ratio must be positive".into(),
        ));
    }
    if design.domain.dim() != problem.hf_dim() {
        return Err(Error::Config(format!(
            "design domain is {}-dimensional but problem `{}` has {} HF inputs",
            design.domain.dim(),
            problem.name,
            problem.hf_dim()
        )));
    }

    let unit = sobol(
        design.n_hf,
        design.domain.dim(),
        mix_seed(design.seed, STREAM_HF_TRAIN),
        design.repetition_index,
    )?;
    let pts: Vec<Vec<f64>> = unit.iter().map(|u| design.domain.from_unit(u)).collect();
    let pts = augment_boundary(pts, &design.domain);
    let hf_train = labeled(problem, Which::Hf, &pts)?;

    let mut lf_train = Vec::with_capacity(problem.n_sources());
    for i in 0..problem.n_sources() {
        let dom = &problem.lf[i].domain;
        let unit = sobol(
            design.lf_ratio * design.n_hf,
            dom.dim(),
            mix_seed(design.seed, STREAM_LF_BASE + i as u64),
            design.repetition_index,
        )?;
        let pts: Vec<Vec<f64>> = unit.iter().map(|u| dom.from_unit(u)).collect();
        lf_train.push(labeled(problem, Which::Lf(i), &pts)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        mix_seed(design.seed, STREAM_HF_TEST),
        design.repetition_index as u64,
    ));
    let d = design.domain.dim();
    let mut pts = Vec::with_capacity(design.n_hf);
    for _ in 0..design.n_hf {
        let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        pts.push(design.domain.from_unit(&u));
    }
    let hf_test = labeled(problem, Which::Hf, &pts)?;

    Ok(Datasets {
        hf_train,
        lf_train,
        hf_test,
    })
}

// ── Affine normalization ────────────────────────────────────────────────────

/// Per-dimension affine map `W(z) = α⁻¹(z − β)` with inverse
/// `W⁻¹(z) = αz + β`; fitting sends the training range to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNormalizer {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineNormalizer {
    pub fn identity(dim: usize) -> AffineNormalizer {
        AffineNormalizer {
            alpha: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    /// Min-max fit of row-major `data` with `dim` columns: α = (max−min)/2
    /// and β = (max+min)/2 per column, sending observed values to `[-1, 1]`.
    /// Degenerate columns (max = min) get α = 1 so the map stays invertible.
    pub fn fit(data: &[f64], dim: usize) -> AffineNormalizer {
        assert!(dim > 0, "normalizer needs at least one dimension");
        assert_eq!(data.len() % dim, 0, "ragged data");
        assert!(!data.is_empty(), "cannot fit a normalizer on no data");
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in data.chunks_exact(dim) {
            for (j, v) in row.iter().enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
        let mut alpha = Vec::with_capacity(dim);
        let mut beta = Vec::with_capacity(dim);
        for j in 0..dim {
            if hi[j] > lo[j] {
                alpha.push((hi[j] - lo[j]) / 2.0);
                beta.push((hi[j] + lo[j]) / 2.0);
            } else {
                alpha.push(1.0);
                beta.push(lo[j]);
            }
        }
        AffineNormalizer { alpha, beta }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// `W(z) = α⁻¹(z − β)` applied elementwise to one row.
    pub fn normalize(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim(), "normalize: wrong row width");
        z.iter()
            .zip(self.alpha.iter().zip(&self.beta))
            .map(|(v, (a, b))| (v - b) / a)
            .collect()
    }

    /// `W⁻¹(z) = αz + β` applied elementwise to one row.
    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim(), "denormalize: wrong row width");
        z.iter()
            .zip(self.alpha.iter().zip(&self.beta))
            .map(|(v, (a, b))| a * v + b)
            .collect()
    }

    /// Normalizes a whole row-major matrix.
    pub fn normalize_all(&self, flat: &[f64]) -> Vec<f64> {
        assert_eq!(flat.len() % self.dim(), 0, "ragged data");
        flat.chunks_exact(self.dim())
            .flat_map(|row| self.normalize(row))
            .collect()
    }

    /// Denormalizes a whole row-major matrix.
    pub fn denormalize_all(&self, flat: &[f64]) -> Vec<f64> {
        assert_eq!(flat.len() % self.dim(), 0, "ragged data");
        flat.chunks_exact(self.dim())
            .flat_map(|row| self.denormalize(row))
            .collect()
    }
}

/// Affine normalizers for every space of a multi-fidelity problem, fitted on
/// training data only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizers {
    pub x_h: AffineNormalizer,
    pub y_h: AffineNormalizer,
    pub x_l: Vec<AffineNormalizer>,
    pub y_l: Vec<AffineNormalizer>,
}

/// Fits min-max normalizers for the HF input/output spaces and each LF
/// input/output space from the corresponding training sets.
pub fn fit_normalizers(data: &Datasets) -> Normalizers {
    Normalizers {
        x_h: AffineNormalizer::fit(&data.hf_train.xs, data.hf_train.dim),
        y_h: AffineNormalizer::fit(&data.hf_train.ys, 1),
        x_l: data
            .lf_train
            .iter()
            .map(|d| AffineNormalizer::fit(&d.xs, d.dim))
            .collect(),
        y_l: data
            .lf_train
            .iter()
            .map(|d| AffineNormalizer::fit(&d.ys, 1))
            .collect(),
    }
}

// ── Recovery of unnormalized coefficients ───────────────────────────────────

/// Linear block of the high-fidelity correlation in explicit form:
/// `y = Σ_i a_i·y_{L_i} + b·x + c` with one `a` entry per LF source and one
/// `b` entry per HF input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCoefficients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

/// Transports linear-block coefficients learned on normalized data back to
/// original units:
///
/// - `A_i = α_YH · Ã_i / α_YLi`
/// - `B_j = α_YH · B̃_j / α_XH,j`
/// - `C   = α_YH·C̃ − Σ_i A_i·β_YLi − Σ_j B_j·β_XH,j + β_YH`
pub fn recover_unnormalized_coefficients(
    tilde: &LinearCoefficients,
    norms: &Normalizers,
) -> Result<LinearCoefficients> {
    if norms.y_h.dim() != 1 || norms.y_l.iter().any(|n| n.dim() != 1) {
        return Err(Error::Config(
            "coefficient recovery: output spaces must be scalar".into(),
        ));
    }
    if tilde.a.len() != norms.y_l.len() || tilde.b.len() != norms.x_h.dim() {
        return Err(Error::Config(format!(
            "coefficient recovery: got {} LF weights / {} input weights, \
             normalizers describe {} sources / {} inputs",
            tilde.a.len(),
            tilde.b.len(),
            norms.y_l.len(),
            norms.x_h.dim()
        )));
    }
    let scales = norms
        .y_h
        .alpha
        .iter()
        .chain(&norms.x_h.alpha)
        .chain(norms.y_l.iter().flat_map(|n| &n.alpha));
    for a in scales {
        if *a == 0.0 {
            return Err(Error::Config(
                "coefficient recovery: normalizer scale must be nonzero".into(),
            ));
        }
    }
    let ay = norms.y_h.alpha[0];
    let a: Vec<f64> = tilde
        .a
        .iter()
        .zip(&norms.y_l)
        .map(|(t, n)| ay * t / n.alpha[0])
        .collect();
    let b: Vec<f64> = tilde
        .b
        .iter()
        .zip(&norms.x_h.alpha)
        .map(|(t, ax)| ay * t / ax)
        .collect();
    let mut c = ay * tilde.c + norms.y_h.beta[0];
    for (ai, n) in a.iter().zip(&norms.y_l) {
        c -= ai * n.beta[0];
    }
    for (bj, beta) in b.iter().zip(&norms.x_h.beta) {
        c -= bj * beta;
    }
    Ok(LinearCoefficients { a, b, c })
}

/// Transports a nonlinear residual defined on normalized quantities back to
/// original units: the returned closure takes the original-unit HF input and
/// the original-unit LF predictions at encoded coordinates and evaluates
/// `Δ(x, y_L) = α_YH · Δ̃(W_XH(x), W_YL1(y_L1), …, W_YLn(y_Ln))`.
pub fn wrap_residual<'a, F>(
    delta_tilde: F,
    norms: &'a Normalizers,
) -> impl Fn(&[f64], &[f64]) -> f64 + 'a
where
    F: Fn(&[f64], &[f64]) -> f64 + 'a,
{
    move |x: &[f64], y_l: &[f64]| {
        let xt = norms.x_h.normalize(x);
        let zt: Vec<f64> = y_l
            .iter()
            .zip(&norms.y_l)
            .map(|(y, n)| (y - n.beta[0]) / n.alpha[0])
            .collect();
        norms.y_h.alpha[0] * delta_tilde(&xt, &zt)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::make_problem;

    mod reference {
        // (dimension, index of first row, expected consecutive points).
        include!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/sobol_reference.in"
        ));
    }

    #[test]
    fn sobol_blocks_match_independent_reference_points() {
        for &(dim, start, rows) in reference::REFERENCE_BLOCKS {
            let got = sobol_block(rows.len(), dim, start).unwrap();
            for (i, (g, want)) in got.iter().zip(rows).enumerate() {
                assert_eq!(
                    g.as_slice(),
                    *want,
                    "dim {dim}, sequence index {}",
                    start + i as u64
                );
            }
        }
    }

    #[test]
    fn first_skip_zero_points_in_one_dimension() {
        let pts = sobol_block(4, 1, 1).unwrap();
        let flat: Vec<f64> = pts.into_iter().flatten().collect();
        assert_eq!(flat, vec![0.5, 0.75, 0.25, 0.375]);
    }

    #[test]
    fn sobol_outputs_stay_in_unit_box_and_repeat_deterministically() {
        let a = sobol(50, 7, 99, 2).unwrap();
        let b = sobol(50, 7, 99, 2).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.iter().all(|v| (0.0..1.0).contains(v)), "point {p:?}");
        }
    }

    #[test]
    fn distinct_repetitions_use_disjoint_blocks() {
        // Offsets drawn for one seed are pairwise distinct, hence the
        // power-of-two aligned index ranges are disjoint.
        let offsets: Vec<u64> = (0..4).map(|k| nth_distinct_offset(123, k)).collect();
        for i in 0..offsets.len() {
            for j in 0..i {
                assert_ne!(offsets[i], offsets[j]);
            }
        }
        // And the emitted point sets do not overlap (the sequence never
        // repeats a point at distinct indices).
        let a = sobol(16, 3, 7, 0).unwrap();
        let b = sobol(16, 3, 7, 1).unwrap();
        for p in &a {
            assert!(!b.contains(p));
        }
    }

    #[test]
    fn sobol_rejects_unprovisioned_dimensions() {
        match sobol(4, 33, 0, 0) {
            Err(Error::SobolDim { dim: 33, max: 32 }) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
        assert!(sobol(4, 0, 0, 0).is_err());
        assert!(sobol(0, 1, 0, 0).is_err());
    }

    #[test]
    fn boundary_rule_per_dimension() {
        let pts = |n: usize, d: usize| -> Vec<Vec<f64>> {
            sobol(n, d, 5, 0)
                .unwrap()
                .iter()
                .map(|u| Domain::cube(0.0, 1.0, d).from_unit(u))
                .collect()
        };
        let one = augment_boundary(pts(8, 1), &Domain::cube(0.0, 1.0, 1));
        assert_eq!(one.len(), 10);
        assert!(one.contains(&vec![0.0]) && one.contains(&vec![1.0]));

        let two = augment_boundary(pts(8, 2), &Domain::cube(0.0, 1.0, 2));
        assert_eq!(two.len(), 12);

        let three = augment_boundary(pts(8, 3), &Domain::cube(0.0, 1.0, 3));
        assert_eq!(three.len(), 16);

        let twenty = augment_boundary(pts(8, 20), &Domain::cube(-1.0, 2.0, 20));
        assert_eq!(twenty.len(), 10);
        assert!(twenty.contains(&vec![-1.0; 20]) && twenty.contains(&vec![2.0; 20]));
    }

    #[test]
    fn boundary_augmentation_skips_existing_duplicates() {
        let existing = vec![vec![0.0, 0.0], vec![0.25, 0.5]];
        let out = augment_boundary(existing, &Domain::cube(0.0, 1.0, 2));
        // Four corners, one of which was already present.
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn dataset_sizes_for_smallest_design() {
        let problem = make_problem("k1").unwrap();
        let design = DesignSpec::for_problem(&problem, 8, 42, 0);
        let data = build_datasets(&problem, &design).unwrap();
        assert_eq!(data.hf_train.len(), 10); // 8 Sobol + 2 endpoints
        assert_eq!(data.lf_train.len(), 1);
        assert_eq!(data.lf_train[0].len(), 64);
        assert_eq!(data.hf_test.len(), 8);
        // Labels agree with direct evaluation.
        let y0 = problem
            .evaluate(Which::Hf, data.hf_train.row(0))
            .unwrap()[0];
        assert_eq!(y0, data.hf_train.ys[0]);
    }

    #[test]
    fn repetitions_share_no_training_points() {
        let problem = make_problem("k2").unwrap();
        for (a, b) in [(0usize, 1usize), (1, 2), (0, 3)] {
            let da = build_datasets(&problem, &DesignSpec::for_problem(&problem, 8, 11, a)).unwrap();
            let db = build_datasets(&problem, &DesignSpec::for_problem(&problem, 8, 11, b)).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    assert_ne!(da.hf_train.row(i), db.hf_train.row(j));
                }
            }
        }
    }

    #[test]
    fn dataset_csv_round_trips_bit_exactly() {
        let problem = make_problem("2de").unwrap();
        let design = DesignSpec::for_problem(&problem, 16, 3, 1);
        let data = build_datasets(&problem, &design).unwrap();
        let text = data.lf_train[0].to_csv();
        let back = Dataset::from_csv(&text).unwrap();
        assert_eq!(back, data.lf_train[0]);
        assert_eq!(back.to_csv(), text);
        assert!(text.starts_with("x1,x2,y\n"));
    }

    #[test]
    fn dataset_csv_rejects_malformed_rows() {
        assert!(Dataset::from_csv("").is_err());
        assert!(Dataset::from_csv("x1,y\n1.0\n").is_err());
        assert!(Dataset::from_csv("x1,y\n1.0,abc\n").is_err());
    }

    #[test]
    fn minmax_fit_hand_values() {
        // Data spanning [0,1]: α = 0.5, β = 0.5.
        let n = AffineNormalizer::fit(&[0.0, 0.25, 1.0], 1);
        assert_eq!(n.alpha, vec![0.5]);
        assert_eq!(n.beta, vec![0.5]);
        // Data already spanning [-1,1]: identity-like.
        let n = AffineNormalizer::fit(&[-1.0, 0.3, 1.0], 1);
        assert_eq!(n.alpha, vec![1.0]);
        assert_eq!(n.beta, vec![0.0]);
        // Constant column: degenerate rule α = 1, β = value.
        let n = AffineNormalizer::fit(&[4.0, 4.0, 4.0], 1);
        assert_eq!(n.alpha, vec![1.0]);
        assert_eq!(n.beta, vec![4.0]);
        assert_eq!(n.normalize(&[4.0]), vec![0.0]);
    }

    #[test]
    fn normalizer_round_trip_within_1e14() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let dim = rng.gen_range(1..5);
            let data: Vec<f64> = (0..dim * 17)
                .map(|_| rng.gen::<f64>() * 200.0 - 100.0)
                .collect();
            let norm = AffineNormalizer::fit(&data, dim);
            for row in data.chunks_exact(dim) {
                let mapped = norm.normalize(row);
                assert!(mapped.iter().all(|v| (-1.0..=1.0).contains(v)));
                let back = norm.denormalize(&mapped);
                for (orig, b) in row.iter().zip(&back) {
                    assert!(
                        (orig - b).abs() <= 1e-14 * orig.abs().max(1.0),
                        "round trip {orig} -> {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn recovery_hand_values_and_identity_transport() {
        // Identity normalizers leave coefficients unchanged.
        let norms = Normalizers {
            x_h: AffineNormalizer::identity(2),
            y_h: AffineNormalizer::identity(1),
            x_l: vec![AffineNormalizer::identity(2)],
            y_l: vec![AffineNormalizer::identity(1)],
        };
        let tilde = LinearCoefficients {
            a: vec![2.5],
            b: vec![-1.0, 4.0],
            c: 0.75,
        };
        assert_eq!(
            recover_unnormalized_coefficients(&tilde, &norms).unwrap(),
            tilde
        );

        // Scalar case α_YH = 2, Ã = 3, α_YL = 4 ⇒ A = 1.5.
        let norms = Normalizers {
            x_h: AffineNormalizer::identity(1),
            y_h: AffineNormalizer {
                alpha: vec![2.0],
                beta: vec![0.0],
            },
            x_l: vec![AffineNormalizer::identity(1)],
            y_l: vec![AffineNormalizer {
                alpha: vec![4.0],
                beta: vec![0.0],
            }],
        };
        let tilde = LinearCoefficients {
            a: vec![3.0],
            b: vec![0.0],
            c: 0.0,
        };
        let rec = recover_unnormalized_coefficients(&tilde, &norms).unwrap();
        assert_eq!(rec.a, vec![1.5]);
    }

    #[test]
    fn recovery_rejects_zero_scale() {
        let mut norms = Normalizers {
            x_h: AffineNormalizer::identity(1),
            y_h: AffineNormalizer::identity(1),
            x_l: vec![AffineNormalizer::identity(1)],
            y_l: vec![AffineNormalizer::identity(1)],
        };
        norms.y_l[0].alpha[0] = 0.0;
        let tilde = LinearCoefficients {
            a: vec![1.0],
            b: vec![1.0],
            c: 0.0,
        };
        assert!(recover_unnormalized_coefficients(&tilde, &norms).is_err());
    }

    /// Composition oracle for the full recovery: an unnormalized prediction
    /// assembled from recovered (A, B, C, Δ) must equal the denormalized
    /// output of the normalized model at the normalized input.
    #[test]
    fn recovery_round_trips_through_a_synthetic_normalized_model() {
        let norms = Normalizers {
            x_h: AffineNormalizer {
                alpha: vec![0.5, 2.0],
                beta: vec![0.5, -1.0],
            },
            y_h: AffineNormalizer {
                alpha: vec![3.0],
                beta: vec![0.25],
            },
            x_l: vec![
                AffineNormalizer {
                    alpha: vec![1.5],
                    beta: vec![0.0],
                },
                AffineNormalizer {
                    alpha: vec![0.7],
                    beta: vec![2.0],
                },
            ],
            y_l: vec![
                AffineNormalizer {
                    alpha: vec![2.0],
                    beta: vec![-0.5],
                },
                AffineNormalizer {
                    alpha: vec![0.25],
                    beta: vec![1.0],
                },
            ],
        };
        // Original-unit LF predictions at encoded coordinates, as arbitrary
        // smooth functions of the HF input.
        let f1 = |x: &[f64]| (x[0] - 0.3 * x[1]).tanh() * 2.0 - 0.5;
        let f2 = |x: &[f64]| 1.0 + (0.5 * x[0] + 0.1 * x[1]).sin();
        // Normalized model pieces.
        let tilde = LinearCoefficients {
            a: vec![1.2, -0.7],
            b: vec![0.4, -2.0],
            c: 0.3,
        };
        let delta_tilde =
            |xt: &[f64], zt: &[f64]| (xt[0] * zt[1]).sin() * 0.2 + 0.05 * zt[0] * xt[1];

        let rec = recover_unnormalized_coefficients(&tilde, &norms).unwrap();
        let delta = wrap_residual(delta_tilde, &norms);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let x = [rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 4.0 - 3.0];
            let y_l = [f1(&x), f2(&x)];
            // Normalized route.
            let xt = norms.x_h.normalize(&x);
            let zt: Vec<f64> = y_l
                .iter()
                .zip(&norms.y_l)
                .map(|(y, n)| (y - n.beta[0]) / n.alpha[0])
                .collect();
            let mut yt = tilde.c + delta_tilde(&xt, &zt);
            for (t, z) in tilde.a.iter().zip(&zt) {
                yt += t * z;
            }
            for (t, v) in tilde.b.iter().zip(&xt) {
                yt += t * v;
            }
            let via_normalized = norms.y_h.denormalize(&[yt])[0];
            // Recovered route in original units.
            let mut direct = rec.c + delta(&x, &y_l);
            for (ai, y) in rec.a.iter().zip(&y_l) {
                direct += ai * y;
            }
            for (bj, v) in rec.b.iter().zip(&x) {
                direct += bj * v;
            }
            assert!(
                (via_normalized - direct).abs() <= 1e-10 * via_normalized.abs().max(1.0),
                "routes disagree: {via_normalized} vs {direct}"
            );
        }
    }

    #[test]
    fn exact_lf_problems_still_get_lf_training_data() {
        // K1's LF has a closed form, yet the builder must emit LF samples so
        // normalization statistics exist in exact-LF mode.
        let problem = make_problem("k1").unwrap();
        let data =
            build_datasets(&problem, &DesignSpec::for_problem(&problem, 8, 1, 0)).unwrap();
        assert!(!data.lf_train[0].is_empty());
        let norms = fit_normalizers(&data);
        assert_eq!(norms.x_l.len(), 1);
        assert_eq!(norms.y_l.len(), 1);
        // HF inputs span [0,1] after boundary augmentation, so the fitted
        // input normalizer is exactly α = 0.5, β = 0.5.
        assert_eq!(norms.x_h.alpha, vec![0.5]);
        assert_eq!(norms.x_h.beta, vec![0.5]);
    }
}
