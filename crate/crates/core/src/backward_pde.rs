//! Backward Cauchy problems `h_t + ½a(t,x)h_xx (+ c(t,x)h_x) = 0` with terminal data in class G.
//!
//! Two routes: density quadrature `h(t,x) = ∫ p(t,x;T,y)·h(T,y) dy` when a transition density is
//! known, and Crank–Nicolson time stepping otherwise. Boundary rows use `h_xx = 0` (affine
//! extrapolation), which for a driftless equation freezes the boundary nodes at their terminal
//! values.

use crate::error::{Error, Result};
use crate::kernels::TransitionDensity;
use crate::monotone_fn::MonotoneMap;
use crate::quadrature::integrate_split;
use crate::surface::{fd_slopes, SolutionSurface, SpaceTimeGrid};

/// Below this remaining time the density is treated as a point mass.
const POINT_MASS_TAU: f64 = 1e-6;

/// `h(t_i, x_j) = ∫ p(t_i, x_j; T, y)·terminal(y) dy` by adaptive Gauss–Kronrod split at `y = x`.
pub fn solve_density_quadrature(
    density: &dyn TransitionDensity,
    terminal: &MonotoneMap,
    grid: &SpaceTimeGrid,
) -> Result<SolutionSurface> {
    let horizon = grid.horizon();
    let (nt, nx) = (grid.nt(), grid.nx());
    let mut values = Vec::with_capacity(nt * nx);
    let mut slopes = vec![0.0; nt * nx];
    for (k, &t) in grid.t_nodes.iter().enumerate() {
        let row_start = values.len();
        if horizon - t < POINT_MASS_TAU {
            for (j, &x) in grid.x_nodes.iter().enumerate() {
                values.push(terminal.eval(x));
                slopes[k * nx + j] = terminal.deriv(x);
            }
            continue;
        }
        for &x in &grid.x_nodes {
            let (lo, hi) = density.window(t, x, horizon);
            let v = integrate_split(|y| density.pdf(t, x, horizon, y) * terminal.eval(y), lo, hi, &[x], 1e-11, 1e-12)
                .map_err(|e| Error::Range { t, detail: format!("density quadrature at x = {x}: {e}") })?;
            values.push(v);
        }
        fd_slopes(&grid.x_nodes, &values[row_start..], &mut slopes[k * nx..(k + 1) * nx]);
    }
    SolutionSurface::from_values_and_slopes(grid.clone(), values, slopes)
}

/// Crank–Nicolson for `h_t + ½a·h_xx = 0`.
pub fn solve_crank_nicolson(
    a: impl Fn(f64, f64) -> f64,
    terminal: &MonotoneMap,
    grid: &SpaceTimeGrid,
) -> Result<SolutionSurface> {
    march(grid, terminal, |t, x| {
        let v = a(t, x);
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveCoefficient { t, x, value: v });
        }
        Ok((0.5 * v, 0.0))
    })
}

/// Crank–Nicolson for `h_t + ½h_xx + c(t,x)·h_x = 0`.
pub fn solve_drift_heat(
    drift: impl Fn(f64, f64) -> f64,
    terminal: &MonotoneMap,
    grid: &SpaceTimeGrid,
) -> Result<SolutionSurface> {
    march(grid, terminal, |t, x| {
        let c = drift(t, x);
        if !c.is_finite() {
            return Err(Error::invalid(format!("drift is not finite at (t = {t}, x = {x})")));
        }
        Ok((0.5, c))
    })
}

/// Runs a solver on a grid widened by `pad` nodes on each side (same end spacing) and restricts
/// the result to `grid`. Keeps the `h_xx = 0` boundary rows away from the nodes being reported.
pub fn solve_padded(
    grid: &SpaceTimeGrid,
    pad: usize,
    solve: impl FnOnce(&SpaceTimeGrid) -> Result<SolutionSurface>,
) -> Result<SolutionSurface> {
    if pad == 0 {
        return solve(grid);
    }
    let xs = &grid.x_nodes;
    let n = xs.len();
    let (h_lo, h_hi) = (xs[1] - xs[0], xs[n - 1] - xs[n - 2]);
    let mut wide = Vec::with_capacity(n + 2 * pad);
    wide.extend((1..=pad).rev().map(|i| xs[0] - h_lo * i as f64));
    wide.extend_from_slice(xs);
    wide.extend((1..=pad).map(|i| xs[n - 1] + h_hi * i as f64));
    let big = SpaceTimeGrid::new(grid.t_nodes.clone(), wide)?;
    let full = solve(&big)?;
    let (nt, nw) = (grid.nt(), big.nx());
    let mut values = Vec::with_capacity(nt * n);
    let mut slopes = Vec::with_capacity(nt * n);
    for k in 0..nt {
        values.extend_from_slice(&full.values()[k * nw + pad..k * nw + pad + n]);
        slopes.extend_from_slice(&full.slopes()[k * nw + pad..k * nw + pad + n]);
    }
    SolutionSurface::from_values_and_slopes(grid.clone(), values, slopes)
}

/// Generic backward march; `coeffs(t, x)` returns (diffusion ½a, drift c).
fn march(
    grid: &SpaceTimeGrid,
    terminal: &MonotoneMap,
    coeffs: impl Fn(f64, f64) -> Result<(f64, f64)>,
) -> Result<SolutionSurface> {
    let (nt, nx) = (grid.nt(), grid.nx());
    let xs = &grid.x_nodes;
    let mut values = vec![0.0; nt * nx];
    let mut slopes = vec![0.0; nt * nx];
    let last = nt - 1;
    for (j, &x) in xs.iter().enumerate() {
        values[last * nx + j] = terminal.eval(x);
        slopes[last * nx + j] = terminal.deriv(x);
    }
    let mut op_next = operator(xs, grid.t_nodes[last], &coeffs)?;
    let mut rhs = vec![0.0; nx];
    let (mut lower, mut diag, mut upper) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    for k in (0..last).rev() {
        let dt = grid.t_nodes[k + 1] - grid.t_nodes[k];
        let op_now = operator(xs, grid.t_nodes[k], &coeffs)?;
        let prev = &values[(k + 1) * nx..(k + 2) * nx];
        for j in 0..nx {
            let (l, d, u) = op_next[j];
            let mut acc = prev[j] * (1.0 + 0.5 * dt * d);
            if j > 0 {
                acc += 0.5 * dt * l * prev[j - 1];
            }
            if j + 1 < nx {
                acc += 0.5 * dt * u * prev[j + 1];
            }
            rhs[j] = acc;
            let (l, d, u) = op_now[j];
            lower[j] = -0.5 * dt * l;
            diag[j] = 1.0 - 0.5 * dt * d;
            upper[j] = -0.5 * dt * u;
        }
        let row = &mut values[k * nx..(k + 1) * nx];
        thomas(&lower, &diag, &upper, &rhs, row)?;
        fd_slopes(xs, &values[k * nx..(k + 1) * nx], &mut slopes[k * nx..(k + 1) * nx]);
        op_next = op_now;
    }
    SolutionSurface::from_values_and_slopes(grid.clone(), values, slopes)
}

/// Tridiagonal spatial operator `L = (½a)·D2 + c·D1` per node as (lower, diag, upper).
///
/// Interior drift uses central differences while the row stays an M-matrix (`a ≥ |c|·h`) and
/// switches to upwinding otherwise. Boundary rows use `h_xx = 0`, leaving `c·h_x` with an
/// inward one-sided difference.
fn operator(
    xs: &[f64],
    t: f64,
    coeffs: &impl Fn(f64, f64) -> Result<(f64, f64)>,
) -> Result<Vec<(f64, f64, f64)>> {
    let n = xs.len();
    let mut op = vec![(0.0, 0.0, 0.0); n];
    for j in 1..n - 1 {
        let (half_a, c) = coeffs(t, xs[j])?;
        let hl = xs[j] - xs[j - 1];
        let hr = xs[j + 1] - xs[j];
        let s = hl + hr;
        let mut l = half_a * 2.0 / (hl * s);
        let mut d = -half_a * 2.0 / (hl * hr);
        let mut u = half_a * 2.0 / (hr * s);
        if c != 0.0 {
            if 2.0 * half_a >= c.abs() * hl.max(hr) {
                l += -c * hr / (hl * s);
                d += c * (hr - hl) / (hl * hr);
                u += c * hl / (hr * s);
            } else if c > 0.0 {
                d -= c / hr;
                u += c / hr;
            } else {
                l -= c / hl;
                d += c / hl;
            }
        }
        op[j] = (l, d, u);
    }
    for (j, nb) in [(0usize, 1usize), (n - 1, n - 2)] {
        let (_, c) = coeffs(t, xs[j])?;
        if c != 0.0 {
            let h = xs[nb] - xs[j];
            // c·(h_nb − h_j)/(x_nb − x_j)
            if nb > j {
                op[j] = (0.0, -c / h, c / h);
            } else {
                op[j] = (c / h, -c / h, 0.0);
            }
        }
    }
    Ok(op)
}

/// Thomas algorithm for a tridiagonal system; `lower[0]` and `upper[n-1]` are ignored.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64], out: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::Singular(0));
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::Singular(i));
        }
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    out[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d[i] - c[i] * out[i + 1];
    }
    Ok(())
}

/// Sup-norm of the residual `u_t + ½·a(t,u)/u_x²·u_xx` over interior nodes, by finite differences.
pub fn nonlinear_residual(u: &SolutionSurface, a: impl Fn(f64, f64) -> f64) -> f64 {
    let g = u.grid();
    let (nt, nx) = (g.nt(), g.nx());
    let xs = &g.x_nodes;
    let mut worst: f64 = 0.0;
    for k in 1..nt - 1 {
        let dt = g.t_nodes[k + 1] - g.t_nodes[k - 1];
        for j in 1..nx - 1 {
            let ut = (u.node(k + 1, j) - u.node(k - 1, j)) / dt;
            let (hl, hr) = (xs[j] - xs[j - 1], xs[j + 1] - xs[j]);
            let (vl, v, vr) = (u.node(k, j - 1), u.node(k, j), u.node(k, j + 1));
            let ux = (hl * hl * (vr - v) + hr * hr * (v - vl)) / (hl * hr * (hl + hr));
            let uxx = 2.0 * (hl * (vr - v) - hr * (v - vl)) / (hl * hr * (hl + hr));
            let r = ut + 0.5 * a(g.t_nodes[k], v) / (ux * ux) * uxx;
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Linear-problem residual `h_t + ½a(t,x)h_xx` over interior nodes (diagnostic).
pub fn linear_residual(h: &SolutionSurface, a: impl Fn(f64, f64) -> f64) -> f64 {
    let g = h.grid();
    let xs = &g.x_nodes;
    let mut worst: f64 = 0.0;
    for k in 1..g.nt() - 1 {
        let dt = g.t_nodes[k + 1] - g.t_nodes[k - 1];
        for j in 1..g.nx() - 1 {
            let ht = (h.node(k + 1, j) - h.node(k - 1, j)) / dt;
            let (hl, hr) = (xs[j] - xs[j - 1], xs[j + 1] - xs[j]);
            let (vl, v, vr) = (h.node(k, j - 1), h.node(k, j), h.node(k, j + 1));
            let hxx = 2.0 * (hl * (vr - v) - hr * (v - vl)) / (hl * hr * (hl + hr));
            worst = worst.max((ht + 0.5 * a(g.t_nodes[k], xs[j]) * hxx).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GaussianDensity;
    use crate::monotone_fn::{uniform, Interval};

    fn wavy(eps: f64) -> MonotoneMap {
        MonotoneMap::tabulate(Interval::real_line(), -30.0, 30.0, 3841, |y| y + eps * y.sin(), |y| 1.0 + eps * y.cos())
            .unwrap()
    }

    fn exact(eps: f64, horizon: f64, t: f64, x: f64) -> f64 {
        x + eps * (-(horizon - t) / 2.0).exp() * x.sin()
    }

    #[test]
    fn affine_terminal_is_invariant() {
        let grid = SpaceTimeGrid::uniform(1.0, 33, -4.0, 4.0, 65).unwrap();
        let id = MonotoneMap::identity();
        let h = solve_crank_nicolson(|_, x| 1.0 + 0.5 * x.sin().powi(2), &id, &grid).unwrap();
        assert!(h.max_node_error(|_, j| grid.x_nodes[j], None) < 1e-12);
        let q = solve_density_quadrature(&GaussianDensity, &id, &grid).unwrap();
        assert!(q.max_node_error(|_, j| grid.x_nodes[j], None) < 1e-9);
    }

    #[test]
    fn constant_drift_shifts_affine_terminal() {
        let c = 0.7;
        let grid = SpaceTimeGrid::uniform(1.0, 65, -6.0, 6.0, 97).unwrap();
        let h = solve_drift_heat(|_, _| c, &MonotoneMap::identity(), &grid).unwrap();
        let err = h.max_node_error(|k, j| grid.x_nodes[j] + c * (1.0 - grid.t_nodes[k]), None);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gaussian_oracle_on_coarse_grid() {
        let eps = 0.3;
        let grid = SpaceTimeGrid::uniform(1.0, 129, -8.0, 8.0, 129).unwrap();
        let terminal = wavy(eps);
        let q = solve_density_quadrature(&GaussianDensity, &terminal, &grid).unwrap();
        let err_q = q.max_node_error(|k, j| exact(eps, 1.0, grid.t_nodes[k], grid.x_nodes[j]), None);
        assert!(err_q < 1e-6, "quadrature {err_q}");
        let cn = solve_padded(&grid, 64, |g| solve_crank_nicolson(|_, _| 1.0, &terminal, g)).unwrap();
        let err_cn = cn.max_node_error(|k, j| exact(eps, 1.0, grid.t_nodes[k], grid.x_nodes[j]), None);
        assert!(err_cn < 2e-3, "crank-nicolson {err_cn}");
    }

    #[test]
    fn refinement_is_second_order() {
        let eps = 0.3;
        let terminal = wavy(eps);
        let err = |n: usize| {
            let grid = SpaceTimeGrid::uniform(1.0, n, -8.0, 8.0, n).unwrap();
            let cn = solve_padded(&grid, n / 2, |g| solve_crank_nicolson(|_, _| 1.0, &terminal, g)).unwrap();
            cn.max_node_error(|k, j| exact(eps, 1.0, grid.t_nodes[k], grid.x_nodes[j]), None)
        };
        let (coarse, fine) = (err(65), err(129));
        assert!(coarse / fine >= 3.0, "{coarse} -> {fine}");
    }

    #[test]
    fn zero_drift_matches_gaussian_convolution() {
        let eps = 0.3;
        let terminal = wavy(eps);
        let grid = SpaceTimeGrid::uniform(1.0, 257, -8.0, 8.0, 257).unwrap();
        let h = solve_padded(&grid, 128, |g| solve_drift_heat(|_, _| 0.0, &terminal, g)).unwrap();
        let k = 64;
        let conv = crate::kernels::gauss_convolve_cdf(&terminal, 1.0 - grid.t_nodes[k]).unwrap();
        for (j, &x) in grid.x_nodes.iter().enumerate() {
            assert!((h.node(k, j) - conv.eval(x)).abs() < 1e-3);
        }
    }

    #[test]
    fn comparison_principle() {
        let grid = SpaceTimeGrid::uniform(1.0, 65, -6.0, 6.0, 97).unwrap();
        let low = wavy(0.2);
        let high = MonotoneMap::tabulate(Interval::real_line(), -30.0, 30.0, 3841, |y| y + 0.2 * y.sin() + 0.1, |y| {
            1.0 + 0.2 * y.cos()
        })
        .unwrap();
        let a = |_: f64, x: f64| 1.0 + 0.3 * x.cos();
        let h1 = solve_crank_nicolson(a, &low, &grid).unwrap();
        let h2 = solve_crank_nicolson(a, &high, &grid).unwrap();
        assert!(h1.values().iter().zip(h2.values()).all(|(p, q)| p <= q));
        assert!(h1.monotone_in_x() && h2.monotone_in_x());
    }

    #[test]
    fn rejects_non_positive_coefficient() {
        let grid = SpaceTimeGrid::uniform(1.0, 5, -1.0, 1.0, 9).unwrap();
        let r = solve_crank_nicolson(|_, x| x, &MonotoneMap::identity(), &grid);
        assert!(matches!(r, Err(Error::NonPositiveCoefficient { .. })));
    }

    #[test]
    fn thomas_solves_and_detects_singularity() {
        let mut out = vec![0.0; 3];
        thomas(&[0.0, 1.0, 1.0], &[2.0, 2.0, 2.0], &[1.0, 1.0, 0.0], &[3.0, 4.0, 3.0], &mut out).unwrap();
        for v in out {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert!(matches!(thomas(&[0.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[1.0, 1.0], &mut [0.0; 2]), Err(Error::Singular(0))));
    }

    #[test]
    fn residuals_vanish_for_identity() {
        let grid = SpaceTimeGrid::uniform(1.0, 9, -2.0, 2.0, 17).unwrap();
        let u = SolutionSurface::tabulate(grid, |_, x| x, |_, _| 1.0).unwrap();
        assert!(nonlinear_residual(&u, |_, _| 1.0) < 1e-12);
        assert!(linear_residual(&u, |_, _| 1.0) < 1e-12);
        let _ = uniform(0.0, 1.0, 2);
    }
}
