//! Consistency of two Brownian martingales: the `b`-ODE, the coupling map `Γ`, the
//! initial-value identity, consistent families built from a backward heat equation, and
//! coupled surfaces.
//!
//! Convention: `st1` plays the unhatted role `(Σ, σ)` and `st2` the hatted one `(Σ̃, σ̃)`.
//! The ODE reads
//!
//! ```text
//! ḃ = −½σ_x(t, Θ(t, Σ̃ + b)) + Σ_t(t, Θ(t, Σ̃ + b)) + ½σ̃_x(t, x) − Σ̃_t(t, x)
//! ```
//!
//! and `Γ = lim_{t↑T} Θ(t, Σ̃(t, ·) + b(t))`.

use std::sync::Arc;

use serde::Serialize;

use crate::backward_pde::{solve_drift_heat, solve_padded};
use crate::error::{Error, Result};
use crate::kernels::{coef, smooth_point, DiffusionSpec, Potential, SigmaTransform, TransitionDensity};
use crate::monotone_fn::{uniform, Interval, MonotoneMap};
use crate::quadrature::integrate_split;
use crate::roots::{brent, expand_bracket, solve_increasing};
use crate::surface::{invert_surface, SolutionSurface, SpaceTimeGrid};

/// Tolerances and sizes for a certificate.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyOptions {
    pub tol_x: f64,
    pub tol_limit: f64,
    pub tol_iv: f64,
    pub n_probes: usize,
    pub n_steps: usize,
    pub gamma_knots: usize,
    pub method: IvMethod,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self {
            tol_x: 1e-5,
            tol_limit: 1e-5,
            tol_iv: 1e-6,
            n_probes: 9,
            n_steps: 200,
            gamma_knots: 513,
            method: IvMethod::Quadrature,
        }
    }
}

/// How `E[Γ⁻¹(M(T))]` is computed.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IvMethod {
    Quadrature,
    MonteCarlo { n_paths: usize, dt: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Indeterminate,
}

/// Initial value of `b`.
#[derive(Debug, Clone, Copy)]
pub enum B0 {
    Fixed(f64),
    /// Solve the initial-value identity for `b(0)`.
    Auto,
}

/// Probe states spanning the central 80% of the working interval.
pub fn probe_states(spec: &DiffusionSpec, n: usize) -> Vec<f64> {
    let w = spec.working;
    let pad = 0.1 * w.width();
    uniform(w.lo + pad, w.hi - pad, n.max(1))
}

/// End of the integration interval: `T` for regular specs, `T(1 − 10⁻⁴)` otherwise.
pub fn integration_end(st1: &SigmaTransform, st2: &SigmaTransform) -> f64 {
    let horizon = st2.spec.horizon;
    if st1.spec.singular_at_horizon || st2.spec.singular_at_horizon {
        horizon * (1.0 - 1e-4)
    } else {
        horizon
    }
}

/// Right-hand side of the `b`-ODE at `(t, x)`.
pub fn consistency_rhs(st1: &SigmaTransform, st2: &SigmaTransform, t: f64, x: f64, b: f64) -> Result<f64> {
    let y = st2.sigma_big(t, x)? + b;
    let z = st1.theta(t, y)?;
    if !z.is_finite() || !st1.spec.state_space.contains(z) {
        return Err(Error::Range { t, detail: format!("Σ⁻¹ is undefined at Σ̃ + b = {y} (x = {x})") });
    }
    let v = -0.5 * st1.sigma_x(t, z) + st1.sigma_big_t(t, z)? + 0.5 * st2.sigma_x(t, x) - st2.sigma_big_t(t, x)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Range { t, detail: format!("right-hand side is not finite at x = {x}") })
    }
}

/// Sampled `b` trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct BTrajectory {
    pub t: Vec<f64>,
    pub b: Vec<f64>,
    pub b0: f64,
    /// Largest spread of the right-hand side across the probes.
    pub x_independence_residual: f64,
    /// Time and message of a range violation that stopped the integration.
    pub failure: Option<(f64, String)>,
}

impl BTrajectory {
    /// Linear interpolation in `t`, flat beyond the last sample.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.t.len();
        if t <= self.t[0] {
            return self.b[0];
        }
        if t >= self.t[n - 1] {
            return self.b[n - 1];
        }
        let k = self.t.partition_point(|&s| s <= t) - 1;
        let w = (t - self.t[k]) / (self.t[k + 1] - self.t[k]);
        (1.0 - w) * self.b[k] + w * self.b[k + 1]
    }
}

/// Time grid for the ODE: `n` uniform steps on `[0, end]` plus the Γ ladder times.
pub fn ode_grid(horizon: f64, end: f64, n: usize) -> Vec<f64> {
    let mut t = uniform(0.0, end, n + 1);
    for tau in LADDER {
        let s = horizon - tau * horizon;
        if s > 0.0 && s < end {
            t.push(s);
        }
    }
    t.sort_by(|a, b| a.total_cmp(b));
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    t
}

/// Classical RK4 from `b(0) = b0`, driven by the median probe; records the spread across probes.
pub fn solve_b_ode(
    st1: &SigmaTransform,
    st2: &SigmaTransform,
    b0: f64,
    probes: &[f64],
    t_grid: &[f64],
) -> Result<BTrajectory> {
    if probes.is_empty() {
        return Err(Error::invalid("no probe states"));
    }
    let mut sorted = probes.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let x_med = sorted[sorted.len() / 2];
    let mut spread: f64 = 0.0;
    let mut eval = |t: f64, b: f64| -> Result<f64> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in probes {
            let v = consistency_rhs(st1, st2, t, x, b)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        spread = spread.max(hi - lo);
        consistency_rhs(st1, st2, t, x_med, b)
    };
    let mut ts = vec![t_grid[0]];
    let mut bs = vec![b0];
    let mut failure = None;
    let mut b = b0;
    for w in t_grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let step = (|| -> Result<f64> {
            let k1 = eval(t, b)?;
            let k2 = eval(t + 0.5 * h, b + 0.5 * h * k1)?;
            let k3 = eval(t + 0.5 * h, b + 0.5 * h * k2)?;
            let k4 = eval(t + h, b + h * k3)?;
            Ok(b + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        })();
        match step {
            Ok(next) => {
                b = next;
                ts.push(w[1]);
                bs.push(b);
            }
            Err(e) => {
                failure = Some((t, e.to_string()));
                break;
            }
        }
    }
    Ok(BTrajectory { t: ts, b: bs, b0, x_independence_residual: spread, failure })
}

/// Distances `(T − t)/T` of the limit ladder.
pub const LADDER: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Γ together with its ladder diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct GammaLimit {
    pub gamma: MonotoneMap,
    /// Largest disagreement between the finest Richardson estimate and the value at `T` when both
    /// specs are regular there, else between successive Richardson estimates.
    pub max_ladder_gap: f64,
    pub flagged: usize,
    pub total: usize,
}

fn gamma_at(st1: &SigmaTransform, st2: &SigmaTransform, t: f64, b: f64, x: f64) -> Result<(f64, f64)> {
    let g = st1.theta(t, st2.sigma_big(t, x)? + b)?;
    Ok((g, st1.sigma(t, g) / st2.sigma(t, x)))
}

/// `Γ(x) = lim_{t↑T} Θ(t, Σ̃(t, x) + b(t))` on `knots`, Richardson-extrapolated along the ladder
/// assuming first-order convergence in `T − t`.
pub fn gamma_limit(
    st1: &SigmaTransform,
    st2: &SigmaTransform,
    b: &BTrajectory,
    knots: &[f64],
    tol_limit: f64,
) -> Result<GammaLimit> {
    let horizon = st2.spec.horizon;
    let regular = !st1.spec.singular_at_horizon && !st2.spec.singular_at_horizon;
    let ladder: Vec<f64> = LADDER.iter().map(|tau| horizon - tau * horizon).collect();
    let mut values = Vec::with_capacity(knots.len());
    let mut derivs = Vec::with_capacity(knots.len());
    let (mut flagged, mut worst) = (0usize, 0.0f64);
    for &x in knots {
        let mut g = [0.0; 3];
        let mut d = [0.0; 3];
        for (i, &t) in ladder.iter().enumerate() {
            (g[i], d[i]) = gamma_at(st1, st2, t, b.at(t), x)?;
        }
        // Ladder ratio 10: first-order Richardson.
        let r12 = g[1] + (g[1] - g[0]) / 9.0;
        let r23 = g[2] + (g[2] - g[1]) / 9.0;
        // With the value at T available, the coarse rung is not needed: it can sit outside the
        // first-order regime when the terminal has a sharp feature.
        let (val, der, gap) = if regular {
            let (gt, dt) = gamma_at(st1, st2, horizon, b.at(horizon), x)?;
            (gt, dt, (gt - r23).abs())
        } else {
            (r23, d[2] + (d[2] - d[1]) / 9.0, (r23 - r12).abs())
        };
        if !(gap <= tol_limit) {
            flagged += 1;
        }
        worst = worst.max(gap);
        values.push(val);
        derivs.push(der);
    }
    let total = knots.len();
    if flagged * 100 > total {
        return Err(Error::Limit { failed: flagged, total });
    }
    let gamma = MonotoneMap::from_table(st2.spec.state_space, knots.to_vec(), values, derivs, None)?;
    Ok(GammaLimit { gamma, max_ladder_gap: worst, flagged, total })
}

/// `E[Γ⁻¹(M(T))]` under spec 1 from its initial value, and the defect against `m0_2`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InitialValueCheck {
    pub expectation: f64,
    pub target: f64,
    pub defect: f64,
    /// 3-sigma half-width (0 for quadrature).
    pub half_width: f64,
}

pub fn verify_initial_value(
    spec1: &DiffusionSpec,
    gamma: &MonotoneMap,
    m0_2: f64,
    method: IvMethod,
) -> Result<InitialValueCheck> {
    let inv = gamma.invert()?;
    let (expectation, half_width) = match (method, &spec1.density) {
        (IvMethod::Quadrature, Some(d)) => {
            let (t, x, horizon) = (0.0, spec1.m0, spec1.horizon);
            let (lo, hi) = d.window(t, x, horizon);
            let e = integrate_split(|y| d.pdf(t, x, horizon, y) * inv.eval(y), lo, hi, &[x], 1e-12, 1e-12)?;
            (e, 0.0)
        }
        (IvMethod::Quadrature, None) => {
            return Err(Error::invalid(format!("spec {} has no density for quadrature", spec1.label)))
        }
        (IvMethod::MonteCarlo { n_paths, dt, seed }, _) => {
            let samples = crate::sde_sim::terminal_samples(spec1, n_paths, dt, seed)?;
            let n = samples.len() as f64;
            let vals: Vec<f64> = samples.iter().map(|&y| inv.eval(y)).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, 3.0 * (var / n).sqrt())
        }
    };
    Ok(InitialValueCheck { expectation, target: m0_2, defect: (expectation - m0_2).abs(), half_width })
}

/// Everything known about a pair.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyCertificate {
    pub pair: (String, String),
    pub b: BTrajectory,
    pub x_independence_residual: f64,
    pub gamma: Option<GammaLimit>,
    pub gamma_class_g: bool,
    pub initial_value: Option<InitialValueCheck>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

/// Runs the ODE, the limit and the initial-value identity for a pair.
pub fn certify(
    st1: &SigmaTransform,
    st2: &SigmaTransform,
    b0: B0,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyCertificate> {
    let b0 = match b0 {
        B0::Fixed(v) => v,
        B0::Auto => auto_b0(st1, st2, opts)?,
    };
    let probes = probe_states(&st2.spec, opts.n_probes);
    let end = integration_end(st1, st2);
    let grid = ode_grid(st2.spec.horizon, end, opts.n_steps);
    let b = solve_b_ode(st1, st2, b0, &probes, &grid)?;
    let pair = (st1.spec.label.clone(), st2.spec.label.clone());
    let residual = b.x_independence_residual;
    let mut notes = Vec::new();
    if let Some((t, msg)) = &b.failure {
        notes.push(format!("integration stopped at t = {t}: {msg}"));
        return Ok(ConsistencyCertificate {
            pair,
            b,
            x_independence_residual: residual,
            gamma: None,
            gamma_class_g: false,
            initial_value: None,
            verdict: Verdict::Indeterminate,
            notes,
        });
    }
    let w = st2.spec.working;
    let knots = uniform(w.lo, w.hi, opts.gamma_knots);
    let (gamma, limit_failed) = match gamma_limit(st1, st2, &b, &knots, opts.tol_limit) {
        Ok(g) => (Some(g), false),
        Err(Error::Limit { failed, total }) => {
            notes.push(format!("limit did not settle at {failed} of {total} points"));
            (None, true)
        }
        Err(e) => {
            notes.push(format!("limit evaluation failed: {e}"));
            (None, false)
        }
    };
    let class_g = gamma.as_ref().map(|g| g.gamma.check_class_g().pass).unwrap_or(false);
    let iv = match &gamma {
        Some(g) => match verify_initial_value(&st1.spec, &g.gamma, st2.spec.m0, opts.method) {
            Ok(iv) => Some(iv),
            Err(e) => {
                notes.push(format!("initial-value check failed: {e}"));
                None
            }
        },
        None => None,
    };
    let x_ok = residual <= opts.tol_x;
    let iv_ok = iv.map(|c| c.defect <= opts.tol_iv.max(c.half_width));
    let verdict = if !x_ok || limit_failed || iv_ok == Some(false) || (gamma.is_some() && !class_g) {
        Verdict::Inconsistent
    } else if iv_ok == Some(true) && class_g {
        Verdict::Consistent
    } else {
        Verdict::Indeterminate
    };
    if !x_ok {
        notes.push(format!("right-hand side varies with x by {residual:.3e}"));
    }
    Ok(ConsistencyCertificate {
        pair,
        b,
        x_independence_residual: residual,
        gamma,
        gamma_class_g: class_g,
        initial_value: iv,
        verdict,
        notes,
    })
}

/// Solves the initial-value identity for `b(0)` by a bracketed root search.
///
/// `Γ` increases with `b`, so `E[Γ⁻¹(M(T))]` decreases and the root is unique.
pub fn auto_b0(st1: &SigmaTransform, st2: &SigmaTransform, opts: &ConsistencyOptions) -> Result<f64> {
    let probes = probe_states(&st2.spec, opts.n_probes);
    let end = integration_end(st1, st2);
    let grid = ode_grid(st2.spec.horizon, end, opts.n_steps.min(50));
    let w = st2.spec.working;
    let knots = uniform(w.lo, w.hi, opts.gamma_knots.min(257));
    let defect = |b0: f64| -> f64 {
        let run = || -> Result<f64> {
            let b = solve_b_ode(st1, st2, b0, &probes, &grid)?;
            if let Some((t, msg)) = b.failure {
                return Err(Error::Range { t, detail: msg });
            }
            let g = gamma_limit(st1, st2, &b, &knots, f64::INFINITY)?;
            let iv = verify_initial_value(&st1.spec, &g.gamma, st2.spec.m0, opts.method)?;
            Ok(iv.expectation - iv.target)
        };
        run().unwrap_or(f64::NAN)
    };
    let (a, b) = expand_bracket(|b0| -defect(b0), -0.5, 0.5, 40)?;
    brent(|b0| -defect(b0), a, b, 1e-12)
}

/// `ṽ = Γ⁻¹ ∘ v`.
pub fn derive_payoff(gamma: &MonotoneMap, v: &MonotoneMap) -> Result<MonotoneMap> {
    gamma.invert()?.compose(v)
}

/// `h̃(t, x) = h(t, Θ(t, Σ̃(t, x) + b(t)))` with `h = u⁻¹`, tabulated on `x_nodes` at the time
/// nodes of `u`.
pub fn build_coupled_surface(
    u: &SolutionSurface,
    st1: &SigmaTransform,
    st2: &SigmaTransform,
    b: &BTrajectory,
    x_nodes: Vec<f64>,
) -> Result<SolutionSurface> {
    let h = invert_surface(u)?;
    let grid = SpaceTimeGrid::new(u.grid().t_nodes.clone(), x_nodes)?;
    let mut values = Vec::with_capacity(grid.nt() * grid.nx());
    let mut slopes = Vec::with_capacity(grid.nt() * grid.nx());
    let singular = st1.spec.singular_at_horizon || st2.spec.singular_at_horizon;
    let horizon = grid.horizon();
    for (k, &t) in grid.t_nodes.iter().enumerate() {
        // Singular potentials are evaluated just before the horizon.
        let te = if singular && k + 1 == grid.nt() { horizon * (1.0 - 1e-4) } else { t };
        for &x in &grid.x_nodes {
            let z = st1.theta(te, st2.sigma_big(te, x)? + b.at(te))?;
            let [hv, hd, _] = h.slice_eval(k, z);
            values.push(hv);
            slopes.push(hd * st1.sigma(te, z) / st2.sigma(te, x));
        }
    }
    SolutionSurface::from_values_and_slopes(grid, values, slopes)
}

/// Largest `|Σ(t, u(t, ξ)) − Σ̃(t, ũ(t, ξ)) − b(t)|` over probe states `ξ` on the slices of `u`
/// strictly before the horizon.
pub fn matching_defect(
    u: &SolutionSurface,
    u_tilde: &SolutionSurface,
    st1: &SigmaTransform,
    st2: &SigmaTransform,
    b: &BTrajectory,
    probes: &[f64],
) -> Result<f64> {
    let g = u.grid();
    let mut worst: f64 = 0.0;
    for k in 0..g.nt() - 1 {
        let t = g.t_nodes[k];
        for &xi in probes {
            let m = u.slice_eval(k, xi)[0];
            let m_tilde = u_tilde.slice_eval(k, xi)[0];
            let d = st1.sigma_big(t, m)? - st2.sigma_big(t, m_tilde)? - b.at(t);
            worst = worst.max(d.abs());
        }
    }
    Ok(worst)
}

/// `Θ̃(t, y)` with its first two `y`-derivatives, and the slice inverse (the quantile).
pub trait ThetaField: Send + Sync {
    fn theta(&self, t: f64, y: f64) -> [f64; 3];
    fn quantile(&self, t: f64, x: f64) -> Result<f64>;
}

/// Heat-equation smoothing of a tabulated terminal: `Θ̃(t, y) = E[Θ̃(T, y + √(T−t)·Z)]`.
pub struct SmoothedTerminal {
    pub terminal: MonotoneMap,
    pub horizon: f64,
}

impl ThetaField for SmoothedTerminal {
    fn theta(&self, t: f64, y: f64) -> [f64; 3] {
        smooth_point(&self.terminal, y, (self.horizon - t).max(0.0)).unwrap_or([f64::NAN; 3])
    }

    fn quantile(&self, t: f64, x: f64) -> Result<f64> {
        let start = self.terminal.invert().map(|inv| inv.eval(x)).unwrap_or(x);
        solve_increasing(
            |q| {
                let [v, d, _] = self.theta(t, q);
                (v, d)
            },
            x,
            start,
            1e-12,
            50,
        )
    }
}

/// `Θ̃` tabulated as a surface (drifted heat equations).
pub struct SurfaceTheta(pub SolutionSurface);

impl ThetaField for SurfaceTheta {
    fn theta(&self, t: f64, y: f64) -> [f64; 3] {
        self.0.eval_all(t, y)
    }

    fn quantile(&self, t: f64, x: f64) -> Result<f64> {
        self.0.solve_x(t, x)
    }
}

/// Spec with `σ̃ = Θ̃_y(t, q)`, `Σ̃ = q` and `Σ̃_t = ½σ̃_x + c(t, q)`, where `q = Θ̃⁻¹(t, ·)` and
/// `c` is the drift of the heat equation solved by `Θ̃`.
pub fn spec_from_theta(
    label: impl Into<String>,
    field: Arc<dyn ThetaField>,
    drift: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    m0: f64,
    working: Interval,
    horizon: f64,
) -> Result<DiffusionSpec> {
    let q = {
        let f = field.clone();
        move |t: f64, x: f64| f.quantile(t, x).unwrap_or(f64::NAN)
    };
    let sigma = {
        let (f, q) = (field.clone(), q.clone());
        coef(move |t, x| f.theta(t, q(t, x))[1])
    };
    let sigma_x = {
        let (f, q) = (field.clone(), q.clone());
        coef(move |t, x| {
            let [_, d, dd] = f.theta(t, q(t, x));
            dd / d
        })
    };
    let sigma_big_t = {
        let (f, q) = (field.clone(), q.clone());
        coef(move |t, x| {
            let y = q(t, x);
            let [_, d, dd] = f.theta(t, y);
            0.5 * dd / d + drift(t, y)
        })
    };
    let theta = {
        let f = field.clone();
        coef(move |t, y| f.theta(t, y)[0])
    };
    let mut spec = DiffusionSpec::new(label, sigma, sigma_x, Interval::real_line(), working, m0, horizon)?;
    spec.potential = Some(Potential { sigma_big: coef(q), theta, sigma_big_t });
    Ok(spec)
}

/// Transition density of a driftless member of a Θ field: `Σ(t, M_t)` is a Brownian motion, so
/// `p(t, x; T, y) = φ_{T−t}(q(T, y) − q(t, x)) / Θ_y(T, q(T, y))`.
pub struct ThetaDensity(pub Arc<dyn ThetaField>);

impl TransitionDensity for ThetaDensity {
    fn pdf(&self, t: f64, x: f64, horizon: f64, y: f64) -> f64 {
        let (Ok(a), Ok(b)) = (self.0.quantile(t, x), self.0.quantile(horizon, y)) else {
            return 0.0;
        };
        let d = self.0.theta(horizon, b)[1];
        if d > 0.0 {
            crate::normal::pdf_var(b - a, horizon - t) / d
        } else {
            0.0
        }
    }

    fn window(&self, t: f64, x: f64, horizon: f64) -> (f64, f64) {
        let a = self.0.quantile(t, x).unwrap_or(0.0);
        let w = 12.0 * (horizon - t).sqrt();
        (self.0.theta(horizon, a - w)[0], self.0.theta(horizon, a + w)[0])
    }
}

/// Grid for surface-based family members: `y ∈ [−L, L]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FamilyGrid {
    pub nt: usize,
    pub nx: usize,
    pub half_width: f64,
    /// Extra nodes on each side keeping the boundary rows away from the reported grid.
    pub pad: usize,
}

impl Default for FamilyGrid {
    fn default() -> Self {
        Self { nt: 257, nx: 513, half_width: 12.0, pad: 128 }
    }
}

/// Drift `c(t, y) = −½σ_x(t, Θ(t, y − D)) + Σ_t(t, Θ(t, y − D))` of the heat equation for `Θ̃`.
pub fn family_drift(base: &SigmaTransform, d: f64) -> Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> {
    let st = base.clone();
    Arc::new(move |t, y| {
        let z = match st.theta(t, y - d) {
            Ok(z) => z,
            Err(_) => return f64::NAN,
        };
        -0.5 * st.sigma_x(t, z) + st.sigma_big_t(t, z).unwrap_or(f64::NAN)
    })
}

fn drift_vanishes(base: &SigmaTransform, d: f64) -> bool {
    let c = family_drift(base, d);
    let h = base.spec.horizon;
    let w = base.spec.working;
    (0..=8).all(|i| {
        let t = h * i as f64 / 8.0 * 0.999;
        (0..=16).all(|j| {
            let x = w.lo + w.width() * j as f64 / 16.0;
            base.sigma_big(t, x).map(|y| c(t, y + d) == 0.0).unwrap_or(false)
        })
    })
}

/// Members built from terminals `Θ̃^λ(T, ·)` and shifts `D^λ` over `base`.
///
/// A vanishing drift with tabulated terminals uses exact Gaussian smoothing pointwise;
/// otherwise the drifted heat equation is solved on `grid`. The initial value is
/// `m̃0 = E[Θ̃(T, Σ(T, M(T)) + D)]` under the base (density quadrature), falling back to
/// `Θ̃(0, Σ(0, m0) + D)` when the base has no density.
pub fn build_consistent_family(
    base: &DiffusionSpec,
    terminals: &[MonotoneMap],
    ds: &[f64],
    grid: FamilyGrid,
) -> Result<Vec<DiffusionSpec>> {
    if terminals.len() != ds.len() {
        return Err(Error::invalid("one shift D per terminal is required"));
    }
    let st = SigmaTransform::new(base.clone());
    let horizon = base.horizon;
    let mut out = Vec::with_capacity(terminals.len());
    for (i, (terminal, &d)) in terminals.iter().zip(ds).enumerate() {
        let label = format!("{}-family[{i}]", base.label);
        let wrap = |e: Error| Error::invalid(format!("family member {i} (D = {d}): {e}"));
        let drift = family_drift(&st, d);
        let (field, working): (Arc<dyn ThetaField>, Interval) =
            if terminal.gauss_smooth(0.0, 1.0).is_some() && drift_vanishes(&st, d) {
                let f = SmoothedTerminal { terminal: terminal.clone(), horizon };
                let y0 = st.sigma_big(0.0, base.m0).map_err(wrap)? + d;
                let reach = 8.0 * horizon.sqrt();
                let lo = f.theta(0.0, y0 - reach)[0].max(terminal.eval(y0 - reach));
                let hi = f.theta(0.0, y0 + reach)[0].min(terminal.eval(y0 + reach));
                (Arc::new(f), Interval::new(lo, hi)?)
            } else {
                let l = grid.half_width;
                let g = SpaceTimeGrid::uniform(horizon, grid.nt, -l, l, grid.nx)?;
                let c = drift.clone();
                let theta = solve_padded(&g, grid.pad, |gg| solve_drift_heat(|t, y| c(t, y), terminal, gg))
                    .map_err(wrap)?;
                // States whose quantile stays inside [−0.75L, 0.75L] at every slice.
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..g.nt() {
                    lo = lo.max(theta.slice_eval(k, -0.75 * l)[0]);
                    hi = hi.min(theta.slice_eval(k, 0.75 * l)[0]);
                }
                (Arc::new(SurfaceTheta(theta)), Interval::new(lo, hi)?)
            };
        let m0 = match &base.density {
            Some(dens) => {
                let (lo, hi) = dens.window(0.0, base.m0, horizon);
                let f = &field;
                integrate_split(
                    |y| {
                        let s = st.sigma_big(horizon, y).unwrap_or(f64::NAN);
                        dens.pdf(0.0, base.m0, horizon, y) * f.theta(horizon, s + d)[0]
                    },
                    lo,
                    hi,
                    &[base.m0],
                    1e-12,
                    1e-12,
                )
                .map_err(wrap)?
            }
            None => field.theta(0.0, st.sigma_big(0.0, base.m0).map_err(wrap)? + d)[0],
        };
        let spec = spec_from_theta(label, field, drift, m0, working, horizon).map_err(wrap)?;
        out.push(spec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{make_affine, make_bm, make_example1, make_kimura, perturbed};

    fn st(spec: DiffusionSpec) -> SigmaTransform {
        SigmaTransform::new(spec)
    }

    #[test]
    fn identical_specs_have_zero_rhs() {
        let k = st(make_kimura(0.3, 1.0).unwrap());
        for &x in &[0.1, 0.5, 0.8] {
            assert!(consistency_rhs(&k, &k, 0.4, x, 0.0).unwrap().abs() < 1e-15);
        }
        let c = certify(&k, &k, B0::Fixed(0.0), &ConsistencyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Consistent, "{:?}", c.notes);
        assert!(c.b.b.iter().all(|&b| b.abs() < 1e-14));
    }

    #[test]
    fn affine_pair_is_consistent() {
        let base = make_kimura(0.3, 1.0).unwrap();
        let (a, b) = (2.0, 1.0);
        let other = make_affine(&base, a, b).unwrap();
        let (s1, s2) = (st(base), st(other));
        let c = certify(&s1, &s2, B0::Fixed(0.0), &ConsistencyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Consistent, "{:?}", c.notes);
        assert!(c.x_independence_residual <= 1e-8);
        assert!(c.b.b.iter().all(|v| v.abs() < 1e-10));
        let g = &c.gamma.unwrap().gamma;
        for x in uniform(1.1, 2.9, 50) {
            assert!((g.eval(x) - (x - b) / a).abs() < 1e-6);
        }
        assert!(c.initial_value.unwrap().defect < 1e-8);
    }

    #[test]
    fn perturbed_sigma_is_flagged() {
        let base = make_bm(0.0, 1.0).unwrap();
        let other = perturbed(&base, 0.1).unwrap();
        let c = certify(&st(base), &st(other), B0::Fixed(0.0), &ConsistencyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Inconsistent);
        assert!(c.x_independence_residual > 1e-2);
    }

    #[test]
    fn quantile_pair_recovers_shifted_quantile() {
        let base = make_bm(0.0, 1.0).unwrap();
        let terminal = MonotoneMap::tabulate(Interval::real_line(), -12.0, 12.0, 1025, |y| y + 0.3 * y.sin(), |y| {
            1.0 + 0.3 * y.cos()
        })
        .unwrap();
        let d = 0.4;
        let fam = build_consistent_family(&base, &[terminal.clone()], &[d], FamilyGrid::default()).unwrap();
        let (s1, s2) = (st(base), st(fam[0].clone()));
        let c = certify(&s1, &s2, B0::Fixed(-d), &ConsistencyOptions::default()).unwrap();
        assert_eq!(c.verdict, Verdict::Consistent, "{:?}", c.notes);
        let q0 = terminal.invert().unwrap();
        let g = &c.gamma.unwrap().gamma;
        for x in probe_states(&s2.spec, 40) {
            assert!((g.eval(x) - (q0.eval(x) - d)).abs() < 1e-6);
        }
        let auto = auto_b0(&s1, &s2, &ConsistencyOptions::default()).unwrap();
        assert!((auto + d).abs() < 1e-6, "{auto}");
    }

    #[test]
    fn example1_pair_has_constant_b_and_ordered_gamma() {
        let fam = make_example1(&[1.0, 2.0], 1e-2, 1.0).unwrap();
        let (s1, s2) = (st(fam[0].clone()), st(fam[1].clone()));
        let opts = ConsistencyOptions { method: IvMethod::Quadrature, ..Default::default() };
        let c = certify(&s1, &s2, B0::Fixed(0.0), &opts).unwrap();
        assert!(c.x_independence_residual < 1e-8, "{:?}", c.notes);
        let g = &c.gamma.as_ref().expect(&format!("{:?}", c.notes)).gamma;
        for x in probe_states(&s2.spec, 50) {
            assert!(g.eval(x) <= x + 1e-12);
        }
        assert_eq!(c.verdict, Verdict::Consistent, "{:?}", c.notes);
    }

    #[test]
    fn derive_payoff_with_affine_gamma() {
        let gamma = MonotoneMap::affine(0.5, -0.5).unwrap();
        let v = MonotoneMap::tabulate(Interval::real_line(), -5.0, 5.0, 257, |x| x + 0.4 * x.sin(), |x| 1.0 + 0.4 * x.cos())
            .unwrap();
        let vt = derive_payoff(&gamma, &v).unwrap();
        for x in uniform(-4.0, 4.0, 33) {
            assert!((vt.eval(x) - (2.0 * v.eval(x) + 1.0)).abs() < 1e-12);
        }
        assert!(derive_payoff(&MonotoneMap::identity(), &v).unwrap().eval(1.3) - v.eval(1.3) == 0.0);
    }

    #[test]
    fn coupled_surface_for_identical_specs_is_h() {
        let spec = make_bm(0.0, 1.0).unwrap();
        let s = st(spec);
        let grid = SpaceTimeGrid::uniform(1.0, 9, -3.0, 3.0, 65).unwrap();
        let u = SolutionSurface::tabulate(grid.clone(), |t, x| x + 0.1 * t, |_, _| 1.0).unwrap();
        let b = BTrajectory { t: vec![0.0, 1.0], b: vec![0.0, 0.0], b0: 0.0, x_independence_residual: 0.0, failure: None };
        let ht = build_coupled_surface(&u, &s, &s, &b, uniform(-2.0, 2.0, 33)).unwrap();
        let h = invert_surface(&u).unwrap();
        for k in 0..grid.nt() {
            for (j, &x) in ht.grid().x_nodes.iter().enumerate() {
                assert!((ht.node(k, j) - h.slice_eval(k, x)[0]).abs() < 1e-12);
            }
        }
        let ut = invert_surface(&ht).unwrap();
        assert!(matching_defect(&u, &ut, &s, &s, &b, &[-0.5, 0.0, 0.5]).unwrap() < 1e-10);
    }

    #[test]
    fn ode_grid_contains_ladder() {
        let g = ode_grid(1.0, 1.0, 10);
        for tau in LADDER {
            assert!(g.iter().any(|&t| (t - (1.0 - tau)).abs() < 1e-15));
        }
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
