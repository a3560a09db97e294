//! Seeded Euler–Maruyama simulation of martingale families driven by one Brownian motion, the
//! transform `X = h(t, M)`, digital solutions, and the `λ`-derivative field.
//!
//! Paths are simulated independently (in parallel) from per-path counter-based streams. All
//! members of a path step in lockstep on a deterministic time mesh, so with shared noise they see
//! the very same increments.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::DiffusionSpec;
use crate::monotone_fn::MonotoneMap;
use crate::rng::{stream_id, NormalStream};
use crate::surface::SolutionSurface;

/// Handling of diffusions whose coefficient blows up at the horizon.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SingularGuard {
    /// Mesh stops at `T − eta`.
    pub eta: f64,
    /// Step cap `dt ≤ gamma·(T − t)`.
    pub gamma: f64,
    /// Terminal rounding radius around `{lo, hi}` of the state space.
    pub rho: f64,
    /// Intrinsic-clock step of the tail continuation.
    pub tail_step: f64,
    /// Intrinsic-clock budget of the tail continuation.
    pub tail_budget: f64,
}

impl Default for SingularGuard {
    fn default() -> Self {
        Self { eta: 1e-4, gamma: 0.05, rho: 1e-3, tail_step: 0.02, tail_budget: 200.0 }
    }
}

/// `min(dt, gamma·(T − t))` for specs singular at the horizon, `dt` otherwise.
pub fn time_changed_step_guard(spec: &DiffusionSpec, t: f64, dt: f64, gamma: f64) -> f64 {
    if spec.singular_at_horizon {
        dt.min(gamma * (spec.horizon - t))
    } else {
        dt
    }
}

/// Ordered pair tracked at every step: counts `M_a > M_b + slack`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairSpec {
    pub a: usize,
    pub b: usize,
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub shared: bool,
    /// Start time (0 for fresh bundles, `t` for nested sub-bundles).
    pub t0: f64,
    /// Initial states; defaults to each spec's `m0`.
    pub x0: Option<Vec<f64>>,
    /// Record every `record_every`-th base step (the final time is always recorded).
    pub record_every: usize,
    /// Offset added to path indices when selecting streams.
    pub stream_base: u64,
    pub track: Vec<PairSpec>,
    /// `(member, ε)`: first time the member enters `(−∞, ε]`.
    pub hit_levels: Vec<(usize, f64)>,
    /// `(member, H(0))`: members whose `λ`-derivative is propagated.
    pub derivative: Vec<(usize, f64)>,
    pub guard: SingularGuard,
}

impl SimOptions {
    pub fn new(horizon: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            horizon,
            dt,
            n_paths,
            seed,
            shared: true,
            t0: 0.0,
            x0: None,
            record_every: 1,
            stream_base: 0,
            track: Vec::new(),
            hit_levels: Vec::new(),
            derivative: Vec::new(),
            guard: SingularGuard::default(),
        }
    }
}

/// Time mesh with the subset of nodes that are recorded.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub t: Vec<f64>,
    pub record: Vec<usize>,
    /// Mesh ends at `T − η` and a tail continuation follows.
    pub tail: bool,
}

pub fn build_mesh(specs: &[DiffusionSpec], opts: &SimOptions) -> Result<Mesh> {
    let (t0, horizon, dt) = (opts.t0, opts.horizon, opts.dt);
    if !(dt > 0.0 && t0 < horizon) {
        return Err(Error::invalid(format!("need dt > 0 and t0 < T, got dt = {dt}, t0 = {t0}")));
    }
    let every = opts.record_every.max(1);
    let singular = specs.iter().any(|s| s.singular_at_horizon);
    if !singular {
        let n = (((horizon - t0) / dt).round() as usize).max(1);
        let h = (horizon - t0) / n as f64;
        let mut t: Vec<f64> = (0..=n).map(|i| t0 + h * i as f64).collect();
        t[n] = horizon;
        let record = (0..=n).filter(|i| i % every == 0 || *i == n).collect();
        return Ok(Mesh { t, record, tail: false });
    }
    let g = opts.guard;
    let end = horizon - g.eta;
    if !(t0 < end) {
        return Err(Error::invalid("start time lies inside the horizon guard"));
    }
    let n_base = ((end - t0) / dt).floor() as usize;
    let mut base: Vec<f64> = (0..=n_base).map(|k| t0 + dt * k as f64).collect();
    if end - base[n_base] > 1e-12 * horizon {
        base.push(end);
    } else {
        *base.last_mut().unwrap() = end;
    }
    let mut t = vec![t0];
    let mut record = vec![0];
    for (k, w) in base.windows(2).enumerate() {
        let mut s = w[0];
        while s < w[1] {
            let h = (dt.min(g.gamma * (horizon - s))).min(w[1] - s);
            s = if w[1] - (s + h) < 1e-15 * horizon { w[1] } else { s + h };
            t.push(s);
        }
        if (k + 1) % every == 0 || k + 2 == base.len() {
            record.push(t.len() - 1);
        }
    }
    Ok(Mesh { t, record, tail: true })
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct NoiseStats {
    pub count: u64,
    /// Mean and variance of the standardised increments `ΔB/√h`.
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairTrack {
    pub a: String,
    pub b: String,
    pub slack: f64,
    pub violations: u64,
    pub max_gap: f64,
}

/// Simulated family under one seed.
#[derive(Debug, Clone, Serialize)]
pub struct PathBundle {
    pub options: SimOptions,
    pub labels: Vec<String>,
    /// Recorded times (the last one is `T`).
    pub t_nodes: Vec<f64>,
    pub n_steps: usize,
    #[serde(skip)]
    pub paths: Vec<Vec<f64>>,
    #[serde(skip)]
    pub derivs: Vec<Option<Vec<f64>>>,
    #[serde(skip)]
    pub hits: Vec<Option<Vec<f64>>>,
    pub ordering: Vec<PairTrack>,
    pub clamps: Vec<u64>,
    /// Paths whose singular tail was not resolved within the budget.
    pub flagged: Vec<u64>,
    pub noise: NoiseStats,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.options.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn member(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::invalid(format!("no family member labelled {label}")))
    }

    /// Value of member `m` on path `p` at recorded node `k`.
    pub fn value(&self, m: usize, p: usize, k: usize) -> f64 {
        self.paths[m][p * self.n_nodes() + k]
    }

    /// Cross-section of member `m` at node `k`.
    pub fn slice(&self, m: usize, k: usize) -> Vec<f64> {
        let n = self.n_nodes();
        (0..self.n_paths()).map(|p| self.paths[m][p * n + k]).collect()
    }

    pub fn terminal(&self, m: usize) -> Vec<f64> {
        self.slice(m, self.n_nodes() - 1)
    }

    /// Nearest recorded node to `t`.
    pub fn node_at(&self, t: f64) -> usize {
        let mut best = 0;
        for (k, &s) in self.t_nodes.iter().enumerate() {
            if (s - t).abs() < (self.t_nodes[best] - t).abs() {
                best = k;
            }
        }
        best
    }

    /// Adds a derived family member.
    pub fn push_member(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.labels.push(label.into());
        self.paths.push(values);
        self.derivs.push(None);
        self.hits.push(None);
        self.clamps.push(0);
        self.flagged.push(0);
    }
}

struct PathOut {
    rec: Vec<Vec<f64>>,
    der: Vec<Vec<f64>>,
    hits: Vec<f64>,
    violations: Vec<u64>,
    max_gap: Vec<f64>,
    clamps: Vec<u64>,
    flagged: Vec<bool>,
    zsum: f64,
    zsq: f64,
    zn: u64,
}

struct Bounds {
    lo: f64,
    hi: f64,
}

fn clamp_bounds(spec: &DiffusionSpec) -> Bounds {
    let ss = spec.state_space;
    let width = if ss.is_bounded() { ss.width() } else { 1.0 };
    let d = 1e-9 * width;
    Bounds { lo: ss.lo + d, hi: ss.hi - d }
}

fn sim_path(specs: &[DiffusionSpec], opts: &SimOptions, mesh: &Mesh, bounds: &[Bounds], path: usize) -> Result<PathOut> {
    let nm = specs.len();
    let nrec = mesh.record.len();
    let id = opts.stream_base + path as u64;
    let mut shared = NormalStream::new(opts.seed, stream_id(id as usize, None));
    let mut own: Vec<NormalStream> = if opts.shared {
        Vec::new()
    } else {
        (0..nm).map(|m| NormalStream::new(opts.seed, stream_id(id as usize, Some(m)))).collect()
    };
    let mut x: Vec<f64> = match &opts.x0 {
        Some(v) => v.clone(),
        None => specs.iter().map(|s| s.m0).collect(),
    };
    let mut hder: Vec<f64> = vec![0.0; nm];
    let der_on: Vec<bool> = (0..nm).map(|m| opts.derivative.iter().any(|&(i, _)| i == m)).collect();
    for &(m, h0) in &opts.derivative {
        hder[m] = h0;
    }
    let mut out = PathOut {
        rec: vec![Vec::with_capacity(nrec); nm],
        der: vec![Vec::new(); nm],
        hits: vec![opts.horizon; opts.hit_levels.len()],
        violations: vec![0; opts.track.len()],
        max_gap: vec![f64::NEG_INFINITY; opts.track.len()],
        clamps: vec![0; nm],
        flagged: vec![false; nm],
        zsum: 0.0,
        zsq: 0.0,
        zn: 0,
    };
    let mut hit_done = vec![false; opts.hit_levels.len()];
    let mut next_rec = 0;
    let record = |out: &mut PathOut, x: &[f64], hder: &[f64]| {
        for m in 0..nm {
            out.rec[m].push(x[m]);
            if der_on[m] {
                out.der[m].push(hder[m]);
            }
        }
    };
    if mesh.record[0] == 0 {
        record(&mut out, &x, &hder);
        next_rec = 1;
    }
    let n_steps = mesh.t.len() - 1;
    let last_recorded_in_loop = if mesh.tail { nrec - 1 } else { nrec };
    for i in 0..n_steps {
        let t = mesh.t[i];
        let h = mesh.t[i + 1] - t;
        let sq = h.sqrt();
        let z = shared.next();
        out.zsum += z;
        out.zsq += z * z;
        out.zn += 1;
        for m in 0..nm {
            let zm = if opts.shared { z } else { own[m].next() };
            let db = sq * zm;
            let s = specs[m].sigma(t, x[m]);
            if !s.is_finite() {
                return Err(Error::Simulation(format!(
                    "σ of {} is not finite at (t = {t}, x = {})",
                    specs[m].label, x[m]
                )));
            }
            if der_on[m] {
                let sl = specs[m].sigma_lambda.as_ref().map(|f| f(t, x[m])).unwrap_or(0.0);
                hder[m] += (sl + specs[m].sigma_x(t, x[m]) * hder[m]) * db;
            }
            let mut nx = x[m] + s * db;
            if nx < bounds[m].lo {
                nx = bounds[m].lo;
                out.clamps[m] += 1;
            } else if nx > bounds[m].hi {
                nx = bounds[m].hi;
                out.clamps[m] += 1;
            }
            x[m] = nx;
        }
        for (j, p) in opts.track.iter().enumerate() {
            let gap = x[p.a] - x[p.b];
            if gap > p.slack {
                out.violations[j] += 1;
            }
            out.max_gap[j] = out.max_gap[j].max(gap);
        }
        for (j, &(m, eps)) in opts.hit_levels.iter().enumerate() {
            if !hit_done[j] && x[m] <= eps {
                hit_done[j] = true;
                out.hits[j] = mesh.t[i + 1];
            }
        }
        if next_rec < last_recorded_in_loop && mesh.record[next_rec] == i + 1 {
            record(&mut out, &x, &hder);
            next_rec += 1;
        }
    }
    if mesh.tail {
        singular_tail(specs, opts, mesh, &mut shared, &mut x, &mut out.flagged);
        record(&mut out, &x, &hder);
    }
    Ok(out)
}

/// Continues singular members past `T − η` on their intrinsic clock `τ = log(1/(T − t))`, where
/// `σ(t, x)·√(T − t)` is evaluated at `T − η`, until each state is within `ρ` of an end of the
/// state space; then rounds it there. Unresolved members are rounded and flagged.
fn singular_tail(
    specs: &[DiffusionSpec],
    opts: &SimOptions,
    mesh: &Mesh,
    noise: &mut NormalStream,
    x: &mut [f64],
    flagged: &mut [bool],
) {
    let g = opts.guard;
    let t_end = *mesh.t.last().unwrap();
    let scale = (opts.horizon - t_end).sqrt();
    let near = |m: usize, v: f64| {
        let ss = specs[m].state_space;
        (v - ss.lo).abs() < g.rho * ss.width() || (ss.hi - v).abs() < g.rho * ss.width()
    };
    let mut done: Vec<bool> = (0..specs.len()).map(|m| !specs[m].singular_at_horizon || near(m, x[m])).collect();
    let sq = g.tail_step.sqrt();
    let mut clock = 0.0;
    while clock < g.tail_budget && done.iter().any(|d| !d) {
        let z = noise.next();
        for m in 0..specs.len() {
            if done[m] {
                continue;
            }
            let ss = specs[m].state_space;
            let s = specs[m].sigma(t_end, x[m]) * scale;
            x[m] = (x[m] + s * sq * z).clamp(ss.lo, ss.hi);
            done[m] = near(m, x[m]);
        }
        clock += g.tail_step;
    }
    for m in 0..specs.len() {
        if !specs[m].singular_at_horizon {
            continue;
        }
        flagged[m] = !done[m];
        let ss = specs[m].state_space;
        x[m] = if x[m] - ss.lo < ss.hi - x[m] { ss.lo } else { ss.hi };
    }
}

/// Euler–Maruyama `M_{k+1} = M_k + σ(t_k, M_k)·ΔB_k` for every spec.
pub fn simulate_paths(specs: &[DiffusionSpec], opts: &SimOptions) -> Result<PathBundle> {
    if specs.is_empty() {
        return Err(Error::invalid("no specs to simulate"));
    }
    if opts.n_paths == 0 {
        return Err(Error::invalid("n_paths must be positive"));
    }
    if let Some(x0) = &opts.x0 {
        if x0.len() != specs.len() {
            return Err(Error::invalid("one initial state per spec is required"));
        }
    }
    for (m, s) in specs.iter().enumerate() {
        let x = opts.x0.as_ref().map(|v| v[m]).unwrap_or(s.m0);
        s.state_space.check("initial state", x)?;
    }
    for p in &opts.track {
        if p.a >= specs.len() || p.b >= specs.len() {
            return Err(Error::invalid("tracked pair refers to a missing member"));
        }
    }
    for &(m, _) in &opts.derivative {
        if specs.get(m).and_then(|s| s.sigma_lambda.as_ref()).is_none() {
            return Err(Error::invalid(format!("member {m} lacks the ∂σ/∂λ evaluator")));
        }
    }
    let mesh = build_mesh(specs, opts)?;
    let bounds: Vec<Bounds> = specs.iter().map(clamp_bounds).collect();
    let outs: Vec<PathOut> =
        (0..opts.n_paths).into_par_iter().map(|p| sim_path(specs, opts, &mesh, &bounds, p)).collect::<Result<_>>()?;
    let nm = specs.len();
    let nrec = mesh.record.len();
    let mut t_nodes: Vec<f64> = mesh.record.iter().map(|&i| mesh.t[i]).collect();
    *t_nodes.last_mut().unwrap() = opts.horizon;
    let mut paths = vec![Vec::with_capacity(opts.n_paths * nrec); nm];
    let mut derivs: Vec<Option<Vec<f64>>> = (0..nm)
        .map(|m| opts.derivative.iter().any(|&(i, _)| i == m).then(|| Vec::with_capacity(opts.n_paths * nrec)))
        .collect();
    let mut hits: Vec<Option<Vec<f64>>> = vec![None; nm];
    for &(m, _) in &opts.hit_levels {
        hits[m] = Some(Vec::with_capacity(opts.n_paths));
    }
    let mut violations = vec![0u64; opts.track.len()];
    let mut max_gap = vec![f64::NEG_INFINITY; opts.track.len()];
    let mut clamps = vec![0u64; nm];
    let mut flagged = vec![0u64; nm];
    let (mut zsum, mut zsq, mut zn) = (0.0, 0.0, 0u64);
    for o in outs {
        for m in 0..nm {
            paths[m].extend_from_slice(&o.rec[m]);
            if let Some(d) = derivs[m].as_mut() {
                d.extend_from_slice(&o.der[m]);
            }
            clamps[m] += o.clamps[m];
            flagged[m] += o.flagged[m] as u64;
        }
        for (j, &(m, _)) in opts.hit_levels.iter().enumerate() {
            hits[m].as_mut().unwrap().push(o.hits[j]);
        }
        for j in 0..opts.track.len() {
            violations[j] += o.violations[j];
            max_gap[j] = max_gap[j].max(o.max_gap[j]);
        }
        zsum += o.zsum;
        zsq += o.zsq;
        zn += o.zn;
    }
    let n_steps = mesh.t.len() - 1;
    let total = (opts.n_paths * n_steps) as f64;
    for (m, &c) in clamps.iter().enumerate() {
        if c as f64 > 0.01 * total {
            return Err(Error::Simulation(format!(
                "{} of {} steps of {} were clamped to the state space",
                c, total, specs[m].label
            )));
        }
    }
    let mean = zsum / zn as f64;
    let noise = NoiseStats { count: zn, mean, var: zsq / zn as f64 - mean * mean };
    let ordering = opts
        .track
        .iter()
        .zip(violations.iter().zip(&max_gap))
        .map(|(p, (&v, &g))| PairTrack {
            a: specs[p.a].label.clone(),
            b: specs[p.b].label.clone(),
            slack: p.slack,
            violations: v,
            max_gap: g,
        })
        .collect();
    Ok(PathBundle {
        options: opts.clone(),
        labels: specs.iter().map(|s| s.label.clone()).collect(),
        t_nodes,
        n_steps,
        paths,
        derivs,
        hits,
        ordering,
        clamps,
        flagged,
        noise,
    })
}

/// Terminal values `M(T)` of one spec.
pub fn terminal_samples(spec: &DiffusionSpec, n_paths: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
    let mut opts = SimOptions::new(spec.horizon, dt, n_paths, seed);
    opts.record_every = usize::MAX;
    let b = simulate_paths(std::slice::from_ref(spec), &opts)?;
    Ok(b.terminal(0))
}

/// Coefficient of the `X` diffusion, `h_x(t, M)·σ(t, M)`, at recorded node `k`.
fn surface_at(h: &SolutionSurface, t: f64, m: f64) -> [f64; 3] {
    let g = h.grid();
    let k = g.t_nodes.iter().position(|&s| (s - t).abs() <= 1e-12 * g.horizon().max(1.0));
    match k {
        Some(k) => h.slice_eval(k, m),
        None => h.eval_all(t, m),
    }
}

/// `X(t_k) = h(t_k, M(t_k))` pathwise; adds member `label` and returns the per-node coefficients
/// `h_x(t, M)·σ(t, M)` of the `X` diffusion.
pub fn transform_x(
    bundle: &mut PathBundle,
    member: &str,
    spec: &DiffusionSpec,
    h: &SolutionSurface,
    label: &str,
) -> Result<Vec<f64>> {
    if !h.monotone_in_x() {
        return Err(Error::invalid("transform surface is not monotone in x"));
    }
    let m = bundle.member(member)?;
    let n = bundle.n_nodes();
    let mut xs = Vec::with_capacity(bundle.paths[m].len());
    let mut coefs = Vec::with_capacity(bundle.paths[m].len());
    for p in 0..bundle.n_paths() {
        for k in 0..n {
            let t = bundle.t_nodes[k];
            let v = bundle.value(m, p, k);
            let [x, dx, _] = surface_at(h, t, v);
            if !x.is_finite() {
                return Err(Error::Range { t, detail: format!("h is undefined at M = {v}") });
            }
            xs.push(x);
            let s = if k + 1 == n && spec.singular_at_horizon { 0.0 } else { spec.sigma(t, v) };
            coefs.push(dx * s);
        }
    }
    bundle.push_member(label, xs);
    Ok(coefs)
}

/// Realised against predicted quadratic variation of `X = h(t, M)` over `[0, T]`, averaged over
/// paths. Simulated at every step of `dt`.
pub fn quadratic_variation_ratio(
    spec: &DiffusionSpec,
    h: &SolutionSurface,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<f64> {
    let n = ((spec.horizon / dt).round() as usize).max(1);
    let step = spec.horizon / n as f64;
    let sums: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut z = NormalStream::new(seed, stream_id(p, None));
            let mut m = spec.m0;
            let mut x = h.eval(0.0, m);
            let (mut realised, mut predicted) = (0.0, 0.0);
            for i in 0..n {
                let t = step * i as f64;
                let s = spec.sigma(t, m);
                let c = h.dx(t, m) * s;
                predicted += c * c * step;
                m = spec.state_space.clamp(m + s * step.sqrt() * z.next());
                let nx = h.eval(t + step, m);
                realised += (nx - x) * (nx - x);
                x = nx;
            }
            (realised, predicted)
        })
        .collect();
    let (r, q) = sums.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    Ok(r / q)
}

/// Outcome of a digital transform `X = c1·M + c0·(1 − M)`.
#[derive(Debug, Clone, Serialize)]
pub struct DigitalReport {
    pub c0: f64,
    pub c1: f64,
    pub c: f64,
    /// Fraction of terminal states within 1e-3 of {0, 1}.
    pub concentration: f64,
    pub p_hat: f64,
    pub half_width: f64,
    pub m0: f64,
    pub pass: bool,
}

/// Adds `X = c1·M + c0·(1 − M)` to the bundle and estimates `P(X(T) ≥ c)` against `m0`.
pub fn digital_solution(
    bundle: &mut PathBundle,
    member: &str,
    m0: f64,
    c0: f64,
    c1: f64,
    c: f64,
    label: &str,
) -> Result<DigitalReport> {
    if !(c0 < c && c <= c1) {
        return Err(Error::invalid(format!("need c0 < c <= c1, got ({c0}, {c}, {c1})")));
    }
    let m = bundle.member(member)?;
    if bundle.paths[m].iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
        return Err(Error::invalid("digital transform needs paths in [0, 1]"));
    }
    let term = bundle.terminal(m);
    let n = term.len() as f64;
    let concentrated = term.iter().filter(|&&v| v.min(1.0 - v) <= 1e-3).count() as f64 / n;
    if concentrated < 0.99 {
        return Err(Error::invalid(format!(
            "only {:.2}% of terminal states sit at 0 or 1; the terminal law is not digital",
            100.0 * concentrated
        )));
    }
    let xs: Vec<f64> = bundle.paths[m].iter().map(|&v| c1 * v + c0 * (1.0 - v)).collect();
    let hits = term.iter().filter(|&&v| c1 * v + c0 * (1.0 - v) >= c).count() as f64;
    bundle.push_member(label, xs);
    let p_hat = hits / n;
    let half_width = 3.0 * (m0 * (1.0 - m0) / n).sqrt();
    Ok(DigitalReport {
        c0,
        c1,
        c,
        concentration: concentrated,
        p_hat,
        half_width,
        m0,
        pass: (p_hat - m0).abs() <= half_width,
    })
}

/// Derivative field `H_λ` along a shared-noise bundle.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeField {
    pub labels: Vec<String>,
    pub dm0_dlambda: Vec<f64>,
    pub t_nodes: Vec<f64>,
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
    /// The replayed `M` paths are bit-identical to the bundle's.
    pub replay_identical: bool,
}

/// Replays `bundle`'s noise and propagates `dH_λ = (σ_λ + σ_x·H_λ) dB` with `H_λ(0) = dm0/dλ`.
pub fn simulate_derivative_field(
    specs: &[DiffusionSpec],
    bundle: &PathBundle,
    dm0_dlambda: &[f64],
) -> Result<DerivativeField> {
    if specs.len() != dm0_dlambda.len() {
        return Err(Error::invalid("one initial derivative per spec is required"));
    }
    if !bundle.options.shared {
        return Err(Error::invalid("the derivative field needs a shared-noise bundle"));
    }
    let mut opts = bundle.options.clone();
    opts.derivative = dm0_dlambda.iter().enumerate().map(|(i, &d)| (i, d)).collect();
    opts.track.clear();
    opts.hit_levels.clear();
    let replay = simulate_paths(specs, &opts)?;
    let replay_identical = specs.iter().enumerate().all(|(i, s)| {
        bundle.member(&s.label).map(|m| bundle.paths[m] == replay.paths[i]).unwrap_or(false)
    });
    Ok(DerivativeField {
        labels: replay.labels.clone(),
        dm0_dlambda: dm0_dlambda.to_vec(),
        t_nodes: replay.t_nodes.clone(),
        values: replay.derivs.into_iter().map(|d| d.unwrap_or_default()).collect(),
        replay_identical,
    })
}

/// Expected payoff `E[f(M(T))]` and its 3-sigma half-width from simulated terminals.
pub fn mc_mean(samples: &[f64], f: impl Fn(f64) -> f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let vals: Vec<f64> = samples.iter().map(|&s| f(s)).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, 3.0 * (var / n).sqrt())
}

/// Applies a monotone map pathwise to a member.
pub fn map_member(bundle: &mut PathBundle, member: &str, f: &MonotoneMap, label: &str) -> Result<()> {
    let m = bundle.member(member)?;
    let xs = bundle.paths[m].iter().map(|&v| f.eval(v)).collect();
    bundle.push_member(label, xs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{make_affine, make_bm, make_example1, make_kimura, make_kimura_timechanged};
    use crate::surface::SpaceTimeGrid;

    #[test]
    fn brownian_terminal_variance() {
        let bm = make_bm(0.0, 1.0).unwrap();
        let mut o = SimOptions::new(1.0, 0.01, 100_000, 3);
        o.record_every = 1000;
        let b = simulate_paths(&[bm], &o).unwrap();
        let t = b.terminal(0);
        let n = t.len() as f64;
        let var = t.iter().map(|x| x * x).sum::<f64>() / n;
        // Var of the sample variance of N(0,1) is 2/n.
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{var}");
        assert!(b.noise.mean.abs() < 4.0 / (b.noise.count as f64).sqrt());
        assert!((b.noise.var - 1.0).abs() < 0.05);
    }

    #[test]
    fn kimura_mean_is_preserved() {
        let k = make_kimura(0.3, 1.0).unwrap();
        let t = terminal_samples(&k, 20_000, 1e-3, 11).unwrap();
        let (mean, hw) = mc_mean(&t, |x| x);
        assert!((mean - 0.3).abs() <= hw, "{mean} ± {hw}");
    }

    #[test]
    fn determinism_and_thread_independence() {
        let fam = make_example1(&[1.0, 2.0], 1e-2, 1.0).unwrap();
        let o = SimOptions::new(1.0, 0.01, 64, 5);
        let a = simulate_paths(&fam, &o).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_paths(&fam, &o).unwrap());
        assert_eq!(a.paths, b.paths);
    }

    #[test]
    fn shared_noise_drives_affine_images_exactly() {
        let k = make_kimura(0.4, 1.0).unwrap();
        let img = make_affine(&k, 2.0, 1.0).unwrap();
        let b = simulate_paths(&[k, img], &SimOptions::new(1.0, 0.01, 200, 9)).unwrap();
        for (x, y) in b.paths[0].iter().zip(&b.paths[1]) {
            assert!((2.0 * x + 1.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_noise_differs() {
        let bm = make_bm(0.0, 1.0).unwrap();
        let mut o = SimOptions::new(1.0, 0.1, 10, 1);
        o.shared = false;
        let b = simulate_paths(&[bm.clone(), bm], &o).unwrap();
        assert_ne!(b.paths[0], b.paths[1]);
    }

    #[test]
    fn flat_field_for_lambda_free_sigma() {
        let mut bm = make_bm(0.0, 1.0).unwrap();
        bm.sigma_lambda = Some(crate::kernels::coef(|_, _| 0.0));
        let b = simulate_paths(&[bm.clone()], &SimOptions::new(1.0, 0.01, 20, 2)).unwrap();
        let f = simulate_derivative_field(&[bm], &b, &[0.7]).unwrap();
        assert!(f.replay_identical);
        assert!(f.values[0].iter().all(|&h| h == 0.7));
    }

    #[test]
    fn step_guard() {
        let tc = make_kimura_timechanged(0.5, 1.0).unwrap();
        assert_eq!(time_changed_step_guard(&tc, 0.1, 1e-3, 0.05), 1e-3);
        assert!((time_changed_step_guard(&tc, 0.999, 1e-3, 0.05) - 0.05e-3).abs() < 1e-15);
    }

    #[test]
    fn timechanged_terminal_law() {
        let tc = make_kimura_timechanged(0.5, 1.0).unwrap();
        let mut o = SimOptions::new(1.0, 1e-3, 4000, 21);
        o.record_every = 100;
        let b = simulate_paths(&[tc], &o).unwrap();
        assert!(b.flagged[0] as f64 <= 0.005 * 4000.0, "{}", b.flagged[0]);
        let t = b.terminal(0);
        assert!(t.iter().all(|&v| v == 0.0 || v == 1.0));
        let p = t.iter().sum::<f64>() / t.len() as f64;
        assert!((p - 0.5).abs() <= 3.0 * (0.25f64 / 4000.0).sqrt(), "{p}");
        assert_eq!(*b.t_nodes.last().unwrap(), 1.0);
    }

    #[test]
    fn identity_transform_and_digital_identity() {
        let bm = make_bm(0.0, 1.0).unwrap();
        let mut b = simulate_paths(&[bm.clone()], &SimOptions::new(1.0, 0.05, 50, 4)).unwrap();
        let grid = SpaceTimeGrid::uniform(1.0, 21, -10.0, 10.0, 41).unwrap();
        let h = SolutionSurface::tabulate(grid, |_, x| x, |_, _| 1.0).unwrap();
        transform_x(&mut b, "bm", &bm, &h, "X").unwrap();
        assert!(b.paths[0].iter().zip(&b.paths[1]).all(|(a, c)| (a - c).abs() < 1e-12));

        let tc = make_kimura_timechanged(0.3, 1.0).unwrap();
        let mut o = SimOptions::new(1.0, 1e-2, 400, 8);
        o.record_every = 10;
        let mut b = simulate_paths(&[tc], &o).unwrap();
        let r = digital_solution(&mut b, "kimura-timechanged", 0.3, 0.0, 1.0, 0.5, "X").unwrap();
        assert!(b.paths[0] == b.paths[1]);
        assert!(r.concentration >= 0.99);
    }
}
