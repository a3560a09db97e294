//! Diffusion descriptions, heat-kernel convolutions, the Kimura transition
//! density and the `Σ`/`Θ` transforms.
//!
//! For a diffusion coefficient `σ(t, x)` the potential is
//! `Σ(t, x) = ∫_{m0}^x dy/σ(t, y)` and `Θ(t, ·)` is its spatial inverse.
//! Built-in families supply closed forms; anything else falls back to
//! adaptive quadrature and bracketed Newton.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::monotone_fn::{Interval, MonotoneMap};
use crate::normal;
use crate::quadrature::{gauss_expect, integrate, integrate_split};
use crate::roots::{expand_bracket, newton_bracketed, solve_increasing};
use crate::surface::{SolutionSurface, SpaceTimeGrid};

/// Coefficient evaluator `(t, x) ↦ value`.
pub type Coef = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

pub fn coef(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Coef {
    Arc::new(f)
}

/// Closed-form transition density `p(t, x; T, y)`.
pub trait TransitionDensity: Send + Sync {
    fn pdf(&self, t: f64, x: f64, horizon: f64, y: f64) -> f64;

    /// Interval of `y` carrying all but a negligible part of the mass.
    fn window(&self, t: f64, x: f64, horizon: f64) -> (f64, f64);
}

/// Closed forms for `Σ`, `Θ = Σ⁻¹` and `Σ_t`.
///
/// `Σ` may differ from the normalised potential by a function of `t` alone; that shift
/// is absorbed by `b` in the consistency ODE and leaves `Γ` unchanged.
#[derive(Clone)]
pub struct Potential {
    pub sigma_big: Coef,
    pub theta: Coef,
    pub sigma_big_t: Coef,
}

/// A Brownian martingale `dM = σ(t, M) dB` on an interval.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub label: String,
    pub sigma: Coef,
    pub sigma_x: Coef,
    /// `∂σ/∂λ` for members of a λ-indexed family.
    pub sigma_lambda: Option<Coef>,
    pub time_dependent: bool,
    pub state_space: Interval,
    /// Compact sub-interval used for grids and probes.
    pub working: Interval,
    pub m0: f64,
    pub horizon: f64,
    pub density: Option<Arc<dyn TransitionDensity>>,
    pub potential: Option<Potential>,
    /// `σ` blows up as `t → T` (time-changed diffusions).
    pub singular_at_horizon: bool,
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("label", &self.label)
            .field("state_space", &self.state_space)
            .field("working", &self.working)
            .field("m0", &self.m0)
            .field("horizon", &self.horizon)
            .field("density", &self.density.is_some())
            .field("potential", &self.potential.is_some())
            .finish()
    }
}

impl DiffusionSpec {
    /// Minimal spec with σ, σ_x on a state space; no closed forms.
    pub fn new(
        label: impl Into<String>,
        sigma: Coef,
        sigma_x: Coef,
        state_space: Interval,
        working: Interval,
        m0: f64,
        horizon: f64,
    ) -> Result<Self> {
        if !state_space.contains(m0) {
            return Err(Error::Domain { what: "initial value", x: m0, lo: state_space.lo, hi: state_space.hi });
        }
        if !(horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            label: label.into(),
            sigma,
            sigma_x,
            sigma_lambda: None,
            time_dependent: true,
            state_space,
            working,
            m0,
            horizon,
            density: None,
            potential: None,
            singular_at_horizon: false,
        })
    }

    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        (self.sigma)(t, x)
    }

    pub fn sigma_x(&self, t: f64, x: f64) -> f64 {
        (self.sigma_x)(t, x)
    }

    /// Checks σ > 0 on a probe grid over `[0, T) × working`.
    pub fn check_positive(&self) -> Result<()> {
        let end = if self.singular_at_horizon { 0.99 } else { 1.0 };
        for i in 0..=20 {
            let t = self.horizon * end * i as f64 / 20.0;
            for j in 0..=40 {
                let x = self.working.lo + self.working.width() * j as f64 / 40.0;
                let s = self.sigma(t, x);
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::NonPositiveCoefficient { t, x, value: s });
                }
            }
        }
        Ok(())
    }

    /// Mass and mean of the transition density from `(t, x)`.
    pub fn density_moments(&self, t: f64, x: f64) -> Result<(f64, f64)> {
        let d = self.density.as_ref().ok_or_else(|| Error::invalid("spec has no closed-form density"))?;
        let (lo, hi) = d.window(t, x, self.horizon);
        let mass = integrate_split(|y| d.pdf(t, x, self.horizon, y), lo, hi, &[x], 1e-12, 1e-12)?;
        let mean = integrate_split(|y| y * d.pdf(t, x, self.horizon, y), lo, hi, &[x], 1e-12, 1e-12)?;
        Ok((mass, mean))
    }
}

/// Standard normal kernel with variance `T − t`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDensity;

impl TransitionDensity for GaussianDensity {
    fn pdf(&self, t: f64, x: f64, horizon: f64, y: f64) -> f64 {
        normal::pdf_var(y - x, horizon - t)
    }

    fn window(&self, t: f64, x: f64, horizon: f64) -> (f64, f64) {
        let w = 12.0 * (horizon - t).sqrt();
        (x - w, x + w)
    }
}

/// Kimura transition density, evaluated in log space.
///
/// Returns 0 outside `(0, 1)` and for `t ≥ T`; use [`kimura_density`] for checked access.
pub fn kimura_pdf(t: f64, x: f64, horizon: f64, y: f64) -> f64 {
    let tau = horizon - t;
    if !(tau > 0.0 && x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
        return 0.0;
    }
    let l = (y * (1.0 - x) / (x * (1.0 - y))).ln();
    let log_p = -0.5 * (2.0 * std::f64::consts::PI * tau).ln() + 0.5 * (x.ln() + (1.0 - x).ln())
        - 1.5 * (y.ln() + (1.0 - y).ln())
        - tau / 8.0
        - l * l / (2.0 * tau);
    log_p.exp()
}

/// Checked Kimura transition density `p(t, x; T, y)`.
pub fn kimura_density(t: f64, x: f64, horizon: f64, y: f64) -> Result<f64> {
    let unit = Interval::unit();
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain { what: "kimura state x", x, lo: unit.lo, hi: unit.hi });
    }
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Domain { what: "kimura state y", x: y, lo: unit.lo, hi: unit.hi });
    }
    if !(t < horizon) || t < 0.0 {
        return Err(Error::Domain { what: "kimura time t", x: t, lo: 0.0, hi: horizon });
    }
    Ok(kimura_pdf(t, x, horizon, y))
}

#[derive(Debug, Clone, Copy)]
pub struct KimuraDensity;

impl TransitionDensity for KimuraDensity {
    fn pdf(&self, t: f64, x: f64, horizon: f64, y: f64) -> f64 {
        kimura_pdf(t, x, horizon, y)
    }

    fn window(&self, t: f64, x: f64, horizon: f64) -> (f64, f64) {
        let tau = horizon - t;
        let w = 12.0 * tau.sqrt() + tau;
        let lx = (x / (1.0 - x)).ln();
        (logistic(lx - w), logistic(lx + w))
    }
}

/// Density of `A·M + B` given the density of `M`.
pub struct AffineDensity {
    pub base: Arc<dyn TransitionDensity>,
    pub a: f64,
    pub b: f64,
}

impl TransitionDensity for AffineDensity {
    fn pdf(&self, t: f64, x: f64, horizon: f64, y: f64) -> f64 {
        self.base.pdf(t, (x - self.b) / self.a, horizon, (y - self.b) / self.a) / self.a
    }

    fn window(&self, t: f64, x: f64, horizon: f64) -> (f64, f64) {
        let (lo, hi) = self.base.window(t, (x - self.b) / self.a, horizon);
        (self.a * lo + self.b, self.a * hi + self.b)
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gaussian smoothing of a measure CDF: `x ↦ E[m(x + √s·Z)]`.
///
/// Plain tables are smoothed exactly piece by piece (cubic times Gaussian has a closed form),
/// other maps by Gauss–Hermite with node doubling. The result is tabulated on the input knots,
/// extended by `13√s` on each side so the affine tails stay exact.
pub fn gauss_convolve_cdf(m: &MonotoneMap, s: f64) -> Result<MonotoneMap> {
    if s < 0.0 || !s.is_finite() {
        return Err(Error::invalid(format!("variance must be non-negative and finite, got {s}")));
    }
    if s == 0.0 {
        return Ok(m.clone());
    }
    let knots = extended_knots(m.knots(), 13.0 * s.sqrt());
    let mut values = Vec::with_capacity(knots.len());
    let mut derivs = Vec::with_capacity(knots.len());
    for &x in &knots {
        let [v, d, _] = smooth_point(m, x, s)?;
        values.push(v);
        derivs.push(d);
    }
    MonotoneMap::from_table(m.domain(), knots, values, derivs, Some(m.tail_slopes()))
}

/// Value, first and second derivative of `E[m(x + √s·Z)]` at one point.
pub fn smooth_point(m: &MonotoneMap, x: f64, s: f64) -> Result<[f64; 3]> {
    if let Some(r) = m.gauss_smooth(x, s) {
        return Ok(r);
    }
    let v = gauss_expect(|y| m.eval(y), x, s, 1e-10)?;
    let d = gauss_expect(|y| m.deriv(y), x, s, 1e-10)?;
    let dd = gauss_expect(|y| m.second_deriv(y), x, s, 1e-10)?;
    Ok([v, d, dd])
}

fn extended_knots(knots: &[f64], reach: f64) -> Vec<f64> {
    let n = knots.len();
    let h_lo = knots[1] - knots[0];
    let h_hi = knots[n - 1] - knots[n - 2];
    let n_lo = ((reach / h_lo).ceil() as usize).min(4096);
    let n_hi = ((reach / h_hi).ceil() as usize).min(4096);
    let mut out = Vec::with_capacity(n + n_lo + n_hi);
    out.extend((1..=n_lo).rev().map(|i| knots[0] - h_lo * i as f64));
    out.extend_from_slice(knots);
    out.extend((1..=n_hi).map(|i| knots[n - 1] + h_hi * i as f64));
    out
}

/// Quantile function: the spatial inverse of a (smoothed) measure CDF.
pub fn quantile(theta_t: &MonotoneMap) -> Result<MonotoneMap> {
    theta_t.invert()
}

/// `Θ̃^λ(t, y) = (f^λ ∗ φ_{T−t+κ})(y)` and its first two y-derivatives.
pub fn example1_theta(lambda: f64, kappa: f64, horizon: f64, t: f64, y: f64) -> [f64; 3] {
    let s = horizon - t + kappa;
    let phi = normal::pdf_var(y, s);
    let cdf = normal::cdf_var(y, s);
    [(lambda - 1.0) * s * phi + y + (lambda - 1.0) * y * cdf, 1.0 + (lambda - 1.0) * cdf, (lambda - 1.0) * phi]
}

/// `∂Θ̃^λ/∂λ (t, y) = s·φ_s(y) + y·Φ_s(y)`.
pub fn example1_theta_lambda(kappa: f64, horizon: f64, t: f64, y: f64) -> f64 {
    let s = horizon - t + kappa;
    s * normal::pdf_var(y, s) + y * normal::cdf_var(y, s)
}

/// Quantile `q^λ_{T−t}(x)`: the root of `Θ̃^λ(t, q) = x`.
///
/// Newton from `q = x` (from `x/λ` on the positive side, where the map has slope ≈ λ),
/// at most 50 iterations to 1e-12, with a bisection fallback on a geometrically grown bracket.
pub fn example1_quantile(lambda: f64, kappa: f64, horizon: f64, t: f64, x: f64) -> Result<f64> {
    check_example1(lambda, kappa)?;
    if !(t < horizon + kappa) || !x.is_finite() {
        return Err(Error::Range { t, detail: format!("no quantile at x = {x}") });
    }
    let start = if x > 0.0 { x / lambda } else { x };
    solve_increasing(
        |q| {
            let [v, d, _] = example1_theta(lambda, kappa, horizon, t, q);
            (v, d)
        },
        x,
        start,
        1e-12,
        50,
    )
}

fn check_example1(lambda: f64, kappa: f64) -> Result<()> {
    if !(lambda >= 1.0) {
        return Err(Error::invalid(format!("example1 requires lambda >= 1, got {lambda}")));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid(format!("example1 requires kappa in (0, 1), got {kappa}")));
    }
    Ok(())
}

/// `σ^λ(t, x) = 1/(q^λ_{T−t})'(x) = Θ̃^λ_y(t, q)`.
///
/// This is algebraically the same as `(x − (λ−1)√(s/2π)·e^{−q²/2s})/q`, but stays finite at `q = 0`.
pub fn example1_sigma(lambda: f64, kappa: f64, horizon: f64, t: f64, x: f64) -> Result<f64> {
    let q = example1_quantile(lambda, kappa, horizon, t, x)?;
    Ok(example1_theta(lambda, kappa, horizon, t, q)[1])
}

/// Evaluators of `Σ`, `Θ` and `Σ_t` for a spec, closed form when available.
#[derive(Clone, Debug)]
pub struct SigmaTransform {
    pub spec: DiffusionSpec,
}

impl SigmaTransform {
    pub fn new(spec: DiffusionSpec) -> Self {
        Self { spec }
    }

    pub fn sigma(&self, t: f64, x: f64) -> f64 {
        self.spec.sigma(t, x)
    }

    pub fn sigma_x(&self, t: f64, x: f64) -> f64 {
        self.spec.sigma_x(t, x)
    }

    /// `Σ(t, x)`.
    pub fn sigma_big(&self, t: f64, x: f64) -> Result<f64> {
        if let Some(p) = &self.spec.potential {
            return Ok((p.sigma_big)(t, x));
        }
        self.spec.state_space.check("potential argument", x)?;
        let m0 = self.spec.m0;
        let sign = if x >= m0 { 1.0 } else { -1.0 };
        let (a, b) = if x >= m0 { (m0, x) } else { (x, m0) };
        Ok(sign * integrate(|y| 1.0 / self.spec.sigma(t, y), a, b, 1e-13, 1e-13)?)
    }

    /// `Θ(t, y)`, the state with `Σ(t, Θ) = y`.
    pub fn theta(&self, t: f64, y: f64) -> Result<f64> {
        if let Some(p) = &self.spec.potential {
            return Ok((p.theta)(t, y));
        }
        let spec = &self.spec;
        let ss = spec.state_space;
        let f = |x: f64| -> f64 { self.sigma_big(t, ss.clamp(x)).map(|v| v - y).unwrap_or(f64::NAN) };
        let x0 = ss.clamp(spec.m0 + spec.sigma(t, spec.m0) * y);
        let w = spec.sigma(t, spec.m0).max(1e-3);
        let (lo, hi) = if ss.is_bounded() {
            let margin = 1e-12 * ss.width();
            (ss.lo + margin, ss.hi - margin)
        } else {
            expand_bracket(f, x0 - w, x0 + w, 200)?
        };
        newton_bracketed(
            |x| (f(x), 1.0 / spec.sigma(t, x)),
            lo,
            hi,
            x0,
            1e-13,
            100,
        )
        .map_err(|e| Error::Range { t, detail: format!("Θ({t}, {y}) is undefined: {e}") })
    }

    /// `∂Σ/∂t`; closed form, zero for time-homogeneous specs, else a centred difference
    /// with step `1e-4·T`.
    pub fn sigma_big_t(&self, t: f64, x: f64) -> Result<f64> {
        if let Some(p) = &self.spec.potential {
            return Ok((p.sigma_big_t)(t, x));
        }
        if !self.spec.time_dependent {
            return Ok(0.0);
        }
        let h = 1e-4 * self.spec.horizon;
        let lo = (t - h).max(0.0);
        let hi = (t + h).min(self.spec.horizon);
        Ok((self.sigma_big(hi, x)? - self.sigma_big(lo, x)?) / (hi - lo))
    }

    /// Tabulates `Σ` on `grid` and `Θ` on the common range of `Σ` over the grid.
    pub fn tabulate(&self, grid: &SpaceTimeGrid) -> Result<SolutionSurfaces> {
        let mut sig = Vec::with_capacity(grid.nt() * grid.nx());
        let mut sig_x = Vec::with_capacity(grid.nt() * grid.nx());
        for &t in &grid.t_nodes {
            for &x in &grid.x_nodes {
                sig.push(self.sigma_big(t, x).map_err(|e| slice_error(t, e))?);
                sig_x.push(1.0 / self.sigma(t, x));
            }
        }
        let sigma_big = SolutionSurface::from_values_and_slopes(grid.clone(), sig, sig_x)?;
        let theta = crate::surface::invert_surface(&sigma_big)?;
        Ok(SolutionSurfaces { sigma_big, theta })
    }
}

fn slice_error(t: f64, e: Error) -> Error {
    Error::Range { t, detail: format!("potential quadrature failed on this slice: {e}") }
}

/// Tabulated `Σ` and `Θ`.
#[derive(Debug, Clone)]
pub struct SolutionSurfaces {
    pub sigma_big: SolutionSurface,
    pub theta: SolutionSurface,
}

/// Pointwise transform plus its tabulation on `grid`.
pub fn sigma_transform(spec: DiffusionSpec, grid: &SpaceTimeGrid) -> Result<(SigmaTransform, SolutionSurfaces)> {
    let st = SigmaTransform::new(spec);
    let surfaces = st.tabulate(grid)?;
    Ok((st, surfaces))
}
