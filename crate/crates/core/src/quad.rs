//! Trapezoid-rule quadrature on (possibly non-uniform) grids.
//!
//! All L2 inner products in this crate use the trapezoid rule on the
//! declared grid; at 101 points this is accurate enough for every check
//! performed here and keeps independent test oracles simple.

/// Trapezoid weights for a strictly increasing grid.
///
/// `sum(w_i * f_i)` approximates the integral of `f` over the grid span.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    assert!(n >= 2, "quadrature grid needs at least two points");
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = grid[i + 1] - grid[i];
        debug_assert!(h > 0.0, "grid must be strictly increasing");
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Trapezoid approximation of the L2 inner product of two functions
/// sampled on a shared grid.
pub fn inner(grid: &[f64], f: &[f64], g: &[f64]) -> f64 {
    assert_eq!(f.len(), grid.len());
    assert_eq!(g.len(), grid.len());
    trapezoid_weights(grid)
        .iter()
        .zip(f.iter().zip(g.iter()))
        .map(|(w, (a, b))| w * a * b)
        .sum()
}

/// Squared L2 norm under trapezoid quadrature.
pub fn norm_sq(grid: &[f64], f: &[f64]) -> f64 {
    inner(grid, f, f)
}
