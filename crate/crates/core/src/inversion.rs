//! Inverse of the pricing operator: given `M` and a payoff `v`, the martingale `X` with
//! `M(t) = E[v(X(T)) | F^X(t)]`.
//!
//! `h` solves `h_t + ½σ²h_xx = 0` with `h(T, ·) = v⁻¹`, `X = h(t, M)`, and `u(t, ·) = h(t, ·)⁻¹`
//! recovers `M = u(t, X)`. As its own SDE, `dX = σ(t, u)/u_x dB`.

use std::sync::Arc;

use serde::Serialize;

use crate::backward_pde::{solve_crank_nicolson, solve_density_quadrature, solve_padded};
use crate::error::{Error, Result};
use crate::kernels::{coef, DiffusionSpec};
use crate::monotone_fn::{uniform, Interval, MonotoneMap};
use crate::surface::{invert_surface, SolutionSurface, SpaceTimeGrid};

/// Grid for `h`: `nt` uniform times on `[0, T]`, `nx` uniform states on the working interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InversionGrid {
    pub nt: usize,
    pub nx: usize,
    /// Padding nodes for the finite-difference route.
    pub pad: usize,
}

impl Default for InversionGrid {
    fn default() -> Self {
        Self { nt: 101, nx: 401, pad: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Density,
    CrankNicolson,
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub h: Arc<SolutionSurface>,
    pub u: Arc<SolutionSurface>,
    /// `v⁻¹`.
    pub terminal: MonotoneMap,
    pub payoff: MonotoneMap,
    pub route: Route,
}

/// Solves for `h` and `u`; uses the transition density when the spec has one.
pub fn invert_pricing(spec: &DiffusionSpec, v: &MonotoneMap, grid: InversionGrid) -> Result<Inversion> {
    let c = v.check_class_g();
    if !c.pass {
        return Err(Error::invalid(format!("payoff is not in class G: derivative spans [{}, {}]", c.d_min, c.d_max)));
    }
    let terminal = v.invert()?;
    let w = spec.working;
    let g = SpaceTimeGrid::new(uniform(0.0, spec.horizon, grid.nt), uniform(w.lo, w.hi, grid.nx))?;
    let (h, route) = match &spec.density {
        Some(d) => (solve_density_quadrature(d.as_ref(), &terminal, &g)?, Route::Density),
        None => {
            let s = spec.sigma.clone();
            let ss = spec.state_space;
            let h = solve_padded(&g, grid.pad, |big| {
                solve_crank_nicolson(|t, x| s(t, ss.clamp(x)).powi(2).max(1e-300), &terminal, big)
            })?;
            (h, Route::CrankNicolson)
        }
    };
    if !h.monotone_in_x() {
        return Err(Error::invalid("h is not increasing in x"));
    }
    let u = invert_surface(&h)?;
    Ok(Inversion { h: Arc::new(h), u: Arc::new(u), terminal, payoff: v.clone(), route })
}

/// `X` as a diffusion in its own right: `σ_X(t, x) = σ(t, u(t, x))/u_x(t, x)`, started at
/// `h(0, m0)` on the payoff's domain.
pub fn x_spec(spec: &DiffusionSpec, inv: &Inversion, label: impl Into<String>) -> Result<DiffusionSpec> {
    let (u, s, ss) = (inv.u.clone(), spec.sigma.clone(), spec.state_space);
    let sigma = move |t: f64, x: f64| {
        let [m, mx, _] = u.eval_all(t, x);
        let m = ss.clamp(m);
        let v = s(t, m) / mx;
        if v.is_finite() {
            v.max(0.0)
        } else {
            0.0
        }
    };
    let sig = Arc::new(sigma);
    let sx = {
        let sig = sig.clone();
        move |t: f64, x: f64| {
            let e = 1e-6 * (1.0 + x.abs());
            (sig(t, x + e) - sig(t, x - e)) / (2.0 * e)
        }
    };
    let (lo, hi) = inv.u.grid().x_range();
    let mut x = DiffusionSpec::new(
        label,
        coef({
            let sig = sig.clone();
            move |t, x| sig(t, x)
        }),
        coef(sx),
        inv.payoff.domain(),
        Interval::new(lo, hi)?,
        inv.h.eval(0.0, spec.m0),
        spec.horizon,
    )?;
    x.time_dependent = true;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{make_bm, make_kimura, scaled_sine_payoff, sine_payoff};

    #[test]
    fn identity_payoff_gives_identity_surface() {
        let bm = make_bm(0.0, 1.0).unwrap();
        let v = MonotoneMap::identity();
        let inv = invert_pricing(&bm, &v, InversionGrid { nt: 11, nx: 65, pad: 0 }).unwrap();
        let g = inv.h.grid().clone();
        for k in 0..g.nt() {
            for &x in &g.x_nodes {
                assert!((inv.h.slice_eval(k, x)[0] - x).abs() < 1e-9);
            }
        }
        let xs = x_spec(&bm, &inv, "x").unwrap();
        assert!((xs.sigma(0.3, 1.2) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn brownian_sine_matches_heat_extension() {
        // h(t, x) = E[v⁻¹(x + √(T − t)·Z)] by independent Gauss quadrature.
        let bm = make_bm(0.0, 1.0).unwrap();
        let v = sine_payoff(0.4, 12.0, 2049).unwrap();
        let inv = invert_pricing(&bm, &v, InversionGrid { nt: 11, nx: 161, pad: 0 }).unwrap();
        let vinv = v.invert().unwrap();
        for &x in &[-2.0, 0.3, 1.7] {
            let direct = crate::quadrature::integrate(
                |z| crate::normal::pdf(z) * vinv.eval(x + z * 0.5f64.sqrt()),
                -12.0,
                12.0,
                1e-12,
                1e-12,
            )
            .unwrap();
            assert!((inv.h.eval(0.5, x) - direct).abs() < 1e-8);
            assert!((v.eval(inv.h.eval(1.0, x)) - x).abs() < 1e-8);
            // u interpolates exact inverse nodes; the cubic Hermite error at spacing 0.1 is ~1e-7.
            assert!((inv.u.eval(0.5, inv.h.eval(0.5, x)) - x).abs() < 5e-7);
        }
    }

    #[test]
    fn kimura_inversion_is_monotone_and_matches_at_horizon() {
        let k = make_kimura(0.5, 1.0).unwrap();
        let v = scaled_sine_payoff(0.4, 5.0, 1025).unwrap();
        let inv = invert_pricing(&k, &v, InversionGrid { nt: 21, nx: 201, pad: 0 }).unwrap();
        assert_eq!(inv.route, Route::Density);
        for &m in &[0.01, 0.3, 0.5, 0.97] {
            assert!((v.eval(inv.h.eval(1.0, m)) - m).abs() < 1e-8);
        }
        // Martingale property at the start: h(0, m0) = E[v⁻¹(M_T)].
        let d = k.density.clone().unwrap();
        let e = crate::quadrature::integrate_split(|y| d.pdf(0.0, 0.5, 1.0, y) * inv.terminal.eval(y), 0.0, 1.0, &[0.5], 1e-12, 1e-12)
            .unwrap();
        assert!((inv.h.eval(0.0, 0.5) - e).abs() < 1e-9);
        let xs = x_spec(&k, &inv, "x").unwrap();
        assert!(xs.sigma(0.5, xs.m0) > 0.0);
    }
}
