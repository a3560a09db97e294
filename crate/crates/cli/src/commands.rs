//! The scenario commands. Each writes its artifacts and verdicts into one directory.

use std::path::Path;

use martinv_core::consistency::{certify, probe_states, ConsistencyCertificate, Verdict, B0};
use martinv_core::families::example1_dm0_dlambda;
use martinv_core::inversion::{invert_pricing, x_spec};
use martinv_core::kernels::{DiffusionSpec, SigmaTransform};
use martinv_core::monotone_fn::uniform;
use martinv_core::sde_sim::{
    digital_solution, simulate_derivative_field, simulate_paths, transform_x, PairSpec, PathBundle, SimOptions,
};
use martinv_core::verify::{
    hitting_dominance, law_equality_test, martingale_test, nested_check, ordering_check, quarter_pairs,
};

use crate::config::{B0Config, Config, CoupleCase, Expect, InvertCase, PairCase};
use crate::output::{CliError, Result, Run, RunManifest, VerdictLine};

/// Seed offsets of the independent simulations inside a scenario.
const OUTER: u64 = 0;
const X_SDE: u64 = 1;
const NESTED: u64 = 2;

fn finish(run: Run, section: &impl serde::Serialize, cfg: &Config) -> Result<RunManifest> {
    let mut v = serde_json::to_value(section)?;
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("seed".into(), cfg.seed.into());
        m.insert("horizon".into(), cfg.horizon.into());
    }
    run.finish(v)
}

/// First `n` paths of the listed members at every recorded node: `t,path,<labels>`.
fn path_rows(bundle: &PathBundle, members: &[usize], n: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for p in 0..n.min(bundle.n_paths()) {
        for (k, &t) in bundle.t_nodes.iter().enumerate() {
            let mut r = vec![t, p as f64];
            r.extend(members.iter().map(|&m| bundle.value(m, p, k)));
            rows.push(r);
        }
    }
    rows
}

fn write_paths(run: &mut Run, name: &str, bundle: &PathBundle, members: &[usize], n: usize) -> Result<()> {
    let labels: Vec<&str> = members.iter().map(|&m| bundle.labels[m].as_str()).collect();
    let mut header = vec!["t", "path"];
    header.extend(labels);
    run.csv(name, &header, path_rows(bundle, members, n))
}

pub fn invert(cfg: &Config, dir: &Path) -> Result<RunManifest> {
    let mut run = Run::new("invert", dir, cfg.seed)?;
    for (i, case) in cfg.invert.cases.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(100 * i as u64);
        run.stage(&case.name, |run| invert_case(run, case, cfg.horizon, seed));
    }
    finish(run, &cfg.invert, cfg)
}

fn invert_case(run: &mut Run, case: &InvertCase, horizon: f64, seed: u64) -> Result<()> {
    let s = &case.sim;
    let name = &case.name;
    let spec = case.spec.build(horizon)?;
    let v = case.payoff.build()?;
    let inv = invert_pricing(&spec, &v, case.grid.into())?;
    inv.h.write_csv(run.create(&format!("{name}_h.csv"))?)?;

    // Pathwise: X(T) = h(T, M(T)) must satisfy v(X(T)) = M(T).
    let mut opts = SimOptions::new(horizon, s.dt, s.n_paths, seed + OUTER);
    opts.record_every = s.record_every;
    let mut bundle = simulate_paths(std::slice::from_ref(&spec), &opts)?;
    transform_x(&mut bundle, &spec.label, &spec, &inv.h, "X")?;
    let xm = bundle.member("X")?;
    let defect = bundle.terminal(xm).iter().zip(bundle.terminal(0)).map(|(x, m)| (v.eval(*x) - m).abs()).fold(0.0, f64::max);
    run.push(VerdictLine::at_most(format!("{name}: pathwise |v(X(T)) - M(T)|"), defect, s.defect_tol, format!(
        "{} paths, route {:?}",
        s.n_paths, inv.route
    )));
    write_paths(run, &format!("{name}_paths.csv"), &bundle, &[0, xm], s.n_plot_paths)?;

    // X as its own diffusion, independent noise.
    let xs = x_spec(&spec, &inv, format!("{name}:X"))?;
    let mut xo = SimOptions::new(horizon, s.dt, s.n_paths, seed + X_SDE);
    xo.record_every = s.record_every;
    let xb = simulate_paths(std::slice::from_ref(&xs), &xo)?;
    run.stat(&martingale_test(&xb, 0, &quarter_pairs(&xb))?);
    for &q in &s.ks_times {
        let t = q * horizon;
        let (kx, km) = (xb.node_at(t), bundle.node_at(t));
        let tx = xb.t_nodes[kx];
        let ux: Vec<f64> = xb.slice(0, kx).iter().map(|&x| inv.u.eval(tx, x)).collect();
        let r = law_equality_test(&format!("{name}: KS M vs u(t, X) at t = {tx}"), &bundle.slice(0, km), &ux, s.alpha)?;
        run.stat(&r);
    }

    // E[v(X(T)) | X(t)] = u(t, X(t)) from nested continuations of X.
    let k = xb.node_at(s.nested_t * horizon);
    let t = xb.t_nodes[k];
    let starts: Vec<f64> = xb.slice(0, k).into_iter().take(s.n_outer).collect();
    let targets: Vec<f64> = starts.iter().map(|&x| inv.u.eval(t, x)).collect();
    let r = nested_check(&xs, t, &starts, &targets, |x| v.eval(x), s.n_inner, s.inner_dt, seed + NESTED)?;
    run.stat(&r);
    Ok(())
}

pub fn consistency(cfg: &Config, dir: &Path) -> Result<RunManifest> {
    let mut run = Run::new("consistency", dir, cfg.seed)?;
    let mut summary = Vec::new();
    for pair in &cfg.consistency.pairs {
        if let Some(c) = run.stage(&pair.name, |run| consistency_pair(run, pair, cfg)) {
            summary.push(c);
        }
    }
    run.json("certificates.json", &summary)?;
    finish(run, &cfg.consistency, cfg)
}

fn consistency_pair(run: &mut Run, pair: &PairCase, cfg: &Config) -> Result<ConsistencyCertificate> {
    let c = &cfg.consistency;
    let name = &pair.name;
    let st1 = SigmaTransform::new(pair.first.build(cfg.horizon)?);
    let st2 = SigmaTransform::new(pair.second.build(cfg.horizon)?);
    let b0 = match pair.b0 {
        B0Config::Value(v) => B0::Fixed(v),
        B0Config::Auto => B0::Auto,
    };
    let cert = certify(&st1, &st2, b0, &c.options())?;
    let notes = cert.notes.join("; ");
    run.csv(&format!("{name}_b.csv"), &["t", "b"], cert.b.t.iter().zip(&cert.b.b).map(|(t, b)| vec![*t, *b]))?;
    match pair.expect {
        Expect::Consistent => {
            run.push(VerdictLine::flag(
                format!("{name}: verdict"),
                cert.verdict == Verdict::Consistent,
                format!("{:?}; b(0) = {}; {notes}", cert.verdict, cert.b.b0),
            ));
            run.push(VerdictLine::at_most(
                format!("{name}: x-independence residual"),
                cert.x_independence_residual,
                c.tol_x,
                "",
            ));
            let iv = cert.initial_value.map(|iv| iv.defect).unwrap_or(f64::INFINITY);
            run.push(VerdictLine::at_most(format!("{name}: initial-value defect"), iv, c.tol_iv, "quadrature"));
        }
        Expect::Inconsistent => {
            run.push(VerdictLine::flag(
                format!("{name}: flagged inconsistent"),
                cert.verdict == Verdict::Inconsistent,
                format!("{:?}; residual {:.3e}; {notes}", cert.verdict, cert.x_independence_residual),
            ));
        }
    }
    if let (Some(oracle), Some(g)) = (&pair.gamma, &cert.gamma) {
        let exact = oracle.build()?;
        let probes = probe_states(&st2.spec, 100);
        let rows: Vec<Vec<f64>> = probes.iter().map(|&x| vec![x, g.gamma.eval(x), exact.eval(x)]).collect();
        let err = rows.iter().map(|r| (r[1] - r[2]).abs()).fold(0.0, f64::max);
        run.push(VerdictLine::at_most(format!("{name}: Gamma vs closed form"), err, c.tol_gamma, "100 probes"));
        run.csv(&format!("{name}_gamma.csv"), &["x", "gamma", "closed_form"], rows)?;
    } else if pair.gamma.is_some() {
        run.push(VerdictLine::flag(format!("{name}: Gamma vs closed form"), false, "no Gamma was extracted"));
    }
    Ok(cert)
}

/// Largest `σ` over the working interval and `[0, T)`.
pub fn sigma_max(specs: &[DiffusionSpec]) -> f64 {
    let mut m: f64 = 0.0;
    for s in specs {
        let w = s.working;
        for t in uniform(0.0, s.horizon * (1.0 - 1e-3), 33) {
            for x in uniform(w.lo, w.hi, 257) {
                let v = s.sigma(t, x);
                if v.is_finite() {
                    m = m.max(v);
                }
            }
        }
    }
    m
}

pub fn couple(cfg: &Config, dir: &Path) -> Result<RunManifest> {
    let mut run = Run::new("couple", dir, cfg.seed)?;
    for (i, case) in cfg.couple.cases.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(100 * i as u64);
        run.stage(&case.name, |run| couple_case(run, case, cfg.horizon, seed));
    }
    finish(run, &cfg.couple, cfg)
}

fn couple_case(run: &mut Run, case: &CoupleCase, horizon: f64, seed: u64) -> Result<PathBundle> {
    let name = &case.name;
    let specs: Vec<DiffusionSpec> = case.members.iter().map(|m| m.build(horizon)).collect::<martinv_core::error::Result<_>>()?;
    if specs.len() < 2 {
        return Err(CliError::Config(format!("{name}: a coupling needs at least two members")));
    }
    let slack = case.slack.unwrap_or_else(|| 2.0 * case.dt.sqrt() * sigma_max(&specs));
    let mut opts = SimOptions::new(horizon, case.dt, case.n_paths, seed);
    opts.record_every = case.record_every;
    opts.track = (0..specs.len() - 1).map(|i| PairSpec { a: i, b: i + 1, slack }).collect();
    if let Some(h) = case.hitting {
        opts.hit_levels = (0..specs.len()).map(|i| (i, h.eps)).collect();
    }
    let bundle = simulate_paths(&specs, &opts)?;
    run.csv(
        &format!("{name}_initial_values.csv"),
        &["member", "m0"],
        specs.iter().enumerate().map(|(i, s)| vec![i as f64, s.m0]),
    )?;
    let all: Vec<usize> = (0..specs.len()).collect();
    write_paths(run, &format!("{name}_paths.csv"), &bundle, &all, case.n_plot_paths)?;
    let pairs: Vec<(&str, &str)> =
        (0..specs.len() - 1).map(|i| (bundle.labels[i].as_str(), bundle.labels[i + 1].as_str())).collect();
    let mut r = ordering_check(&bundle, &pairs, slack)?;
    r.name = format!("{name}: ordering violations beyond slack {slack:.4}");
    run.stat(&r);
    if case.control {
        let mut o = opts.clone();
        o.shared = false;
        o.hit_levels.clear();
        let indep = simulate_paths(&specs, &o)?;
        let c = ordering_check(&indep, &pairs, slack)?;
        run.push(VerdictLine::flag(
            format!("{name}: independent-noise control violates ordering"),
            c.value > 0.0,
            format!("{} violations; {}", c.value, c.detail),
        ));
    }
    if let Some(h) = case.hitting {
        let grid = uniform(0.0, horizon, h.n_grid + 1)[1..].to_vec();
        for (a, b) in &pairs {
            let mut r = hitting_dominance(&bundle, (a, b), h.eps, &grid)?;
            r.name = format!("{name}: {}", r.name);
            run.stat(&r);
        }
        let rows: Vec<Vec<f64>> = grid
            .iter()
            .map(|&t| {
                let mut row = vec![t];
                for m in 0..specs.len() {
                    let times = martinv_core::verify::hitting_times(&bundle, m, h.eps);
                    row.push(times.iter().filter(|&&s| s > t).count() as f64 / times.len() as f64);
                }
                row
            })
            .collect();
        let mut header = vec!["t"];
        header.extend(bundle.labels.iter().map(|s| s.as_str()));
        run.csv(&format!("{name}_survival.csv"), &header, rows)?;
    }
    Ok(bundle)
}

/// Outcome of the derivative-field comparison for one `δ`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DeltaGap {
    pub delta: f64,
    pub rms: f64,
    pub h0: f64,
    pub replay_identical: bool,
}

pub fn surface(cfg: &Config, dir: &Path) -> Result<RunManifest> {
    let mut run = Run::new("surface", dir, cfg.seed)?;
    let s = cfg.surface.clone();
    let gaps = run.stage("derivative field", |run| derivative_gaps(run, cfg)).unwrap_or_default();
    if !gaps.is_empty() {
        let decreasing = gaps.windows(2).all(|w| w[1].rms < w[0].rms);
        let detail = gaps.iter().map(|g| format!("delta {}: {:.3e}", g.delta, g.rms)).collect::<Vec<_>>().join(", ");
        run.push(VerdictLine::flag("RMS gap decreases with delta", decreasing, detail));
        let last = gaps.last().unwrap();
        run.push(VerdictLine::at_most(format!("RMS gap at delta = {}", last.delta), last.rms, s.rms_tol, ""));
        let d = example1_dm0_dlambda(s.kappa, cfg.horizon);
        let worst = gaps.iter().map(|g| (g.h0 - d).abs()).fold(0.0, f64::max);
        run.push(VerdictLine::at_most("H_lambda(0) = dm0/dlambda", worst, 0.0, format!("H(0) = {}", gaps[0].h0)));
        run.push(VerdictLine::flag(
            "derivative replay reproduces the paths",
            gaps.iter().all(|g| g.replay_identical),
            "",
        ));
    }
    run.stage("plot data", |run| surface_plot(run, cfg));
    finish(run, &cfg.surface, cfg)
}

/// RMS over paths and recorded nodes between `H_λ` and shared-noise central differences.
pub fn derivative_gaps(run: &mut Run, cfg: &Config) -> Result<Vec<DeltaGap>> {
    let s = &cfg.surface;
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for &delta in &s.deltas {
        let lambdas = [s.lambda - delta, s.lambda, s.lambda + delta];
        let specs = martinv_core::families::make_example1(&lambdas, s.kappa, cfg.horizon)?;
        let mut opts = SimOptions::new(cfg.horizon, s.dt, s.n_paths, cfg.seed);
        opts.record_every = s.record_every;
        let bundle = simulate_paths(&specs, &opts)?;
        let d = example1_dm0_dlambda(s.kappa, cfg.horizon);
        let field = simulate_derivative_field(&specs[1..2], &bundle, &[d])?;
        let h = &field.values[0];
        let (lo, hi) = (&bundle.paths[0], &bundle.paths[2]);
        let sum: f64 = (0..h.len()).map(|i| (h[i] - (hi[i] - lo[i]) / (2.0 * delta)).powi(2)).sum();
        let rms = (sum / h.len() as f64).sqrt();
        rows.push(vec![delta, rms]);
        out.push(DeltaGap { delta, rms, h0: h[0], replay_identical: field.replay_identical });
    }
    run.csv("derivative_gap.csv", &["delta", "rms"], rows)?;
    Ok(out)
}

/// `(λ, t, path, H, H_λ)` on the configured `λ` grid.
fn surface_plot(run: &mut Run, cfg: &Config) -> Result<()> {
    let s = &cfg.surface;
    let specs = martinv_core::families::make_example1(&s.plot_lambdas, s.kappa, cfg.horizon)?;
    let mut opts = SimOptions::new(cfg.horizon, s.dt, s.n_plot_paths, cfg.seed);
    opts.record_every = s.record_every;
    let bundle = simulate_paths(&specs, &opts)?;
    let d = vec![example1_dm0_dlambda(s.kappa, cfg.horizon); specs.len()];
    let field = simulate_derivative_field(&specs, &bundle, &d)?;
    let mut rows = Vec::new();
    for (m, &lambda) in s.plot_lambdas.iter().enumerate() {
        for p in 0..bundle.n_paths() {
            for (k, &t) in bundle.t_nodes.iter().enumerate() {
                let i = p * bundle.n_nodes() + k;
                rows.push(vec![lambda, t, p as f64, bundle.paths[m][i], field.values[m][i]]);
            }
        }
    }
    run.csv("surface.csv", &["lambda", "t", "path", "H", "H_lambda"], rows)
}

pub fn digital(cfg: &Config, dir: &Path) -> Result<RunManifest> {
    let mut run = Run::new("digital", dir, cfg.seed)?;
    run.stage("digital", |run| digital_run(run, cfg));
    finish(run, &cfg.digital, cfg)
}

fn digital_run(run: &mut Run, cfg: &Config) -> Result<()> {
    let d = &cfg.digital;
    let spec = martinv_core::families::make_kimura_timechanged(d.m0, cfg.horizon)?;
    let mut opts = SimOptions::new(cfg.horizon, d.dt, d.n_paths, cfg.seed + OUTER);
    opts.record_every = d.record_every;
    opts.guard.eta = d.eta;
    let mut bundle = simulate_paths(std::slice::from_ref(&spec), &opts)?;
    let mut law = Vec::new();
    let mut members = vec![0];
    for (i, ch) in d.choices.iter().enumerate() {
        let label = format!("X{i}");
        let rep = digital_solution(&mut bundle, &spec.label, d.m0, ch.c0, ch.c1, ch.c, &label)?;
        run.push(VerdictLine::at_most(
            format!("(c0, c1) = ({}, {}): |P(X(T) = c1) - m0|", ch.c0, ch.c1),
            (rep.p_hat - rep.m0).abs(),
            rep.half_width,
            format!("p = {}, concentration {}", rep.p_hat, rep.concentration),
        ));
        law.push(vec![ch.c0, ch.c1, ch.c, rep.p_hat, rep.half_width]);
        let xm = bundle.member(&label)?;
        members.push(xm);
        let k = bundle.node_at(d.nested_t * cfg.horizon);
        let t = bundle.t_nodes[k];
        let xs: Vec<f64> = bundle.slice(xm, k).into_iter().take(d.n_outer).collect();
        // u(t, x) = (x − c0)/(c1 − c0) is also the state of M from which to continue.
        let targets: Vec<f64> = xs.iter().map(|x| (x - ch.c0) / (ch.c1 - ch.c0)).collect();
        let (c0, c1, c) = (ch.c0, ch.c1, ch.c);
        let mut inner = spec.clone();
        inner.label = format!("{}:X{i}", spec.label);
        let mut r = nested_check(
            &inner,
            t,
            &targets,
            &targets,
            move |m| if c1 * m + c0 * (1.0 - m) >= c { 1.0 } else { 0.0 },
            d.n_inner,
            d.inner_dt,
            cfg.seed + NESTED + i as u64,
        )?;
        r.name = format!("(c0, c1) = ({c0}, {c1}): {}", r.name);
        run.stat(&r);
    }
    run.csv("terminal_law.csv", &["c0", "c1", "c", "p_hat", "half_width"], law)?;
    write_paths(run, "paths.csv", &bundle, &members, 20)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InvertCase, PayoffConfig, SpecConfig};

    #[test]
    fn identity_payoff_gives_x_equal_to_m() {
        let mut case = InvertCase::new("id", SpecConfig::Bm { m0: 0.0 }, PayoffConfig::Identity);
        case.grid.nt = 11;
        case.grid.nx = 65;
        case.grid.pad = 0;
        let s = &mut case.sim;
        (s.n_paths, s.dt, s.record_every) = (10_000, 1e-2, 25);
        (s.n_outer, s.n_inner, s.inner_dt) = (40, 64, 1e-2);
        let mut cfg = Config::default();
        cfg.invert.cases = vec![case];
        let dir = tempfile::tempdir().unwrap();
        let m = invert(&cfg, dir.path()).unwrap();
        assert!(m.pass, "{:#?}", m.verdicts);
        assert!(m.verdicts[0].value < 1e-9);
    }

    #[test]
    fn sigma_max_of_brownian_motion_is_one() {
        let bm = martinv_core::families::make_bm(0.0, 1.0).unwrap();
        assert_eq!(sigma_max(&[bm]), 1.0);
    }
}
