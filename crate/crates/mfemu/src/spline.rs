//! Uniform B-spline bases via the Cox–de Boor recurrence.
//!
//! A KAN edge uses `grid_size` equal intervals of degree `degree` splines over
//! a fixed range, with the knot vector extended `degree` knots past each end
//! (no repeated boundary knots), giving `grid_size + degree` basis functions.
//! Inputs outside the range are clamped for basis lookup, which extends every
//! basis function as a constant (zero slope) beyond the grid.

use std::rc::Rc;

/// Uniform knot vector for `grid_size` intervals of the given degree over
/// `[lo, hi]`: `t_i = lo + (i − degree)·h` for `i = 0..=grid_size + 2·degree`.
pub fn uniform_knots(lo: f64, hi: f64, grid_size: usize, degree: usize) -> Rc<[f64]> {
    assert!(grid_size >= 1 && hi > lo, "degenerate spline grid");
    let h = (hi - lo) / grid_size as f64;
    let count = grid_size + 2 * degree + 1;
    let knots: Vec<f64> = (0..count)
        .map(|i| lo + (i as f64 - degree as f64) * h)
        .collect();
    knots.into()
}

/// Number of basis functions on a knot vector: `knots − degree − 1`
/// (equals `grid_size + degree` for [`uniform_knots`]).
pub fn basis_count(knots: &[f64], degree: usize) -> usize {
    knots.len() - degree - 1
}

/// Index range `[lo, hi]` of the grid inside the extended knot vector.
fn grid_range(knots: &[f64], degree: usize) -> (f64, f64) {
    (knots[degree], knots[knots.len() - 1 - degree])
}

/// Knot span index `s` with `t_s ≤ u < t_{s+1}` for `u` inside the grid
/// (the right boundary folds into the last interior span).
fn find_span(knots: &[f64], degree: usize, u: f64) -> usize {
    let last_interior = knots.len() - 2 - degree;
    let mut s = degree;
    while s < last_interior && u >= knots[s + 1] {
        s += 1;
    }
    s
}

/// The `degree + 1` basis values that are nonzero on span `s`, by the
/// triangular Cox–de Boor scheme. `n[0..=degree]` maps to basis indices
/// `s-degree ..= s`. The values sum to 1 by construction.
fn nonzero_basis(knots: &[f64], degree: usize, s: usize, u: f64, n: &mut [f64]) {
    n[0] = 1.0;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for j in 1..=degree {
        left[j] = u - knots[s + 1 - j];
        right[j] = knots[s + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
}

/// Evaluates all basis functions at `x` into `out` (length [`basis_count`]).
/// `x` is clamped to the grid range first.
pub fn basis_values(knots: &[f64], degree: usize, x: f64, out: &mut [f64]) {
    out.fill(0.0);
    let (lo, hi) = grid_range(knots, degree);
    let u = x.clamp(lo, hi);
    let s = find_span(knots, degree, u);
    let mut n = vec![0.0; degree + 1];
    nonzero_basis(knots, degree, s, u, &mut n);
    out[s - degree..=s].copy_from_slice(&n);
}

/// Evaluates all first derivatives `B'_i(x)` into `out`. Outside the grid
/// range the clamped extension is constant, so every derivative is zero.
pub fn basis_derivatives(knots: &[f64], degree: usize, x: f64, out: &mut [f64]) {
    out.fill(0.0);
    let (lo, hi) = grid_range(knots, degree);
    if x < lo || x > hi {
        return;
    }
    if degree == 0 {
        return;
    }
    let s = find_span(knots, degree, x);
    // Degree-1 lower basis: indices s-degree+1 ..= s are the nonzero ones.
    let mut lower = vec![0.0; degree];
    nonzero_basis(knots, degree - 1, s, x, &mut lower);
    // B'_{i,k} = k·( N_{i,k-1}/(t_{i+k}−t_i) − N_{i+1,k-1}/(t_{i+k+1}−t_{i+1}) ).
    let scaled = |i: usize| -> f64 {
        let first = s + 1 - degree;
        if i < first || i > s {
            return 0.0;
        }
        lower[i - first] / (knots[i + degree] - knots[i])
    };
    for i in (s - degree)..=s {
        out[i] = degree as f64 * (scaled(i) - scaled(i + 1));
    }
}
