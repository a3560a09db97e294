//! Statistical checks on simulated bundles: martingale property, equality of marginal laws,
//! pathwise ordering and stochastic dominance of hitting times.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::DiffusionSpec;
use crate::sde_sim::{simulate_paths, PathBundle, SimOptions};

/// Outcome of one statistic.
#[derive(Debug, Clone, Serialize)]
pub struct StatReport {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub n: usize,
    pub pass: bool,
    pub half_width: Option<f64>,
    pub detail: String,
}

/// Minimum sample size for the martingale and law-equality tests.
pub const MIN_SAMPLES: usize = 10_000;

fn need(n: usize, what: &str) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::invalid(format!("{what} needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    Ok(())
}

/// Solves the 3×3 (or smaller) symmetric system by Gaussian elimination with partial pivoting.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn inverse_small(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let e: Vec<f64> = (0..n).map(|i| (i == j) as u8 as f64).collect();
        cols.push(solve_small(a.to_vec(), e)?);
    }
    Some((0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}

/// OLS of `y` on `basis` rows with heteroskedasticity-robust (HC0) standard errors.
/// Returns `(coefficients, standard errors)`.
pub fn robust_ols(rows: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = rows.first().map_or(0, |r| r.len());
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (r, &v) in rows.iter().zip(y) {
        for i in 0..p {
            xty[i] += r[i] * v;
            for j in 0..p {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    let inv = inverse_small(&xtx).ok_or_else(|| Error::invalid("regression design is singular"))?;
    let beta: Vec<f64> = (0..p).map(|i| (0..p).map(|j| inv[i][j] * xty[j]).sum()).collect();
    let mut meat = vec![vec![0.0; p]; p];
    for (r, &v) in rows.iter().zip(y) {
        let e = v - (0..p).map(|i| r[i] * beta[i]).sum::<f64>();
        for i in 0..p {
            for j in 0..p {
                meat[i][j] += e * e * r[i] * r[j];
            }
        }
    }
    let se = (0..p)
        .map(|i| {
            let mut v = 0.0;
            for j in 0..p {
                for k in 0..p {
                    v += inv[i][j] * meat[j][k] * inv[k][i];
                }
            }
            v.max(0.0).sqrt()
        })
        .collect();
    Ok((beta, se))
}

/// Regresses `M(t₂) − M(t₁)` on `1`, `z` and `z²`, with `z` the standardised `M(t₁)` clipped at
/// ±4, for each pair of recorded node indices. Passes when every coefficient lies within four
/// standard errors of zero.
pub fn martingale_test(bundle: &PathBundle, member: usize, pairs: &[(usize, usize)]) -> Result<StatReport> {
    let n = bundle.n_paths();
    need(n, "martingale test")?;
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for &(k1, k2) in pairs {
        let a = bundle.slice(member, k1);
        let b = bundle.slice(member, k2);
        let y: Vec<f64> = b.iter().zip(&a).map(|(b, a)| b - a).collect();
        let mean = a.iter().sum::<f64>() / n as f64;
        let sd = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let rows: Vec<Vec<f64>> = if sd > 1e-12 * mean.abs().max(1.0) {
            a.iter()
                .map(|v| {
                    let z = ((v - mean) / sd).clamp(-4.0, 4.0);
                    vec![1.0, z, z * z]
                })
                .collect()
        } else {
            vec![vec![1.0]; n]
        };
        let (beta, se) = robust_ols(&rows, &y)?;
        let t_max = beta.iter().zip(&se).map(|(b, s)| if *s > 0.0 { (b / s).abs() } else { 0.0 }).fold(0.0, f64::max);
        worst = worst.max(t_max);
        detail.push(format!("[{:.4},{:.4}] |t|max={t_max:.3}", bundle.t_nodes[k1], bundle.t_nodes[k2]));
    }
    Ok(StatReport {
        name: format!("martingale[{}]", bundle.labels[member]),
        value: worst,
        threshold: 4.0,
        n,
        pass: worst <= 4.0,
        half_width: None,
        detail: detail.join("; "),
    })
}

/// Standard ladder of node pairs: consecutive quarters of the recorded times and `(0, T)`.
pub fn quarter_pairs(bundle: &PathBundle) -> Vec<(usize, usize)> {
    let horizon = *bundle.t_nodes.last().unwrap();
    let t0 = bundle.t_nodes[0];
    let q: Vec<usize> = (0..=4).map(|i| bundle.node_at(t0 + (horizon - t0) * i as f64 / 4.0)).collect();
    let mut pairs: Vec<(usize, usize)> = q.windows(2).map(|w| (w[0], w[1])).filter(|(a, b)| a < b).collect();
    if q[0] < q[4] {
        pairs.push((q[0], q[4]));
    }
    pairs
}

/// Kolmogorov survival function `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_sf(lambda))
}

/// KS law equality; passes when `p ≥ alpha`.
pub fn law_equality_test(name: &str, a: &[f64], b: &[f64], alpha: f64) -> Result<StatReport> {
    need(a.len().min(b.len()), "law equality test")?;
    let (d, p) = ks_two_sample(a, b);
    Ok(StatReport {
        name: name.to_string(),
        value: p,
        threshold: alpha,
        n: a.len().min(b.len()),
        pass: p >= alpha,
        half_width: None,
        detail: format!("D = {d:.5}"),
    })
}

/// Counts `(path, step)` events with `M^a > M^b + slack` for each labelled pair.
///
/// Uses the online per-step tracks of the bundle when one matches the pair and slack, and the
/// recorded nodes otherwise.
pub fn ordering_check(bundle: &PathBundle, order: &[(&str, &str)], slack: f64) -> Result<StatReport> {
    let mut count = 0u64;
    let mut max_gap = f64::NEG_INFINITY;
    let mut sources = Vec::new();
    for &(la, lb) in order {
        let (a, b) = (bundle.member(la)?, bundle.member(lb)?);
        if let Some(tr) = bundle.ordering.iter().find(|tr| tr.a == la && tr.b == lb && tr.slack == slack) {
            count += tr.violations;
            max_gap = max_gap.max(tr.max_gap);
            sources.push(format!("{la}<={lb}: steps"));
            continue;
        }
        for p in 0..bundle.n_paths() {
            for k in 0..bundle.n_nodes() {
                let gap = bundle.value(a, p, k) - bundle.value(b, p, k);
                max_gap = max_gap.max(gap);
                if gap > slack {
                    count += 1;
                }
            }
        }
        sources.push(format!("{la}<={lb}: nodes"));
    }
    Ok(StatReport {
        name: "ordering".into(),
        value: count as f64,
        threshold: 0.0,
        n: bundle.n_paths(),
        pass: count == 0,
        half_width: None,
        detail: format!("max gap {max_gap:.3e}; {}", sources.join(", ")),
    })
}

/// Hitting times of `[0, ε]` for a member (`T` when never hit): exact per-step times when the
/// bundle tracked this level, first recorded node otherwise.
pub fn hitting_times(bundle: &PathBundle, member: usize, eps: f64) -> Vec<f64> {
    let tracked = bundle.options.hit_levels.iter().any(|&(m, l)| m == member && l == eps);
    if let (true, Some(h)) = (tracked, bundle.hits[member].as_ref()) {
        return h.clone();
    }
    let horizon = *bundle.t_nodes.last().unwrap();
    (0..bundle.n_paths())
        .map(|p| {
            (0..bundle.n_nodes()).find(|&k| bundle.value(member, p, k) <= eps).map_or(horizon, |k| bundle.t_nodes[k])
        })
        .collect()
}

/// Checks `P(τ_ε > t) ≤ P(τ̃_ε > t)` on `t_grid`, where `τ` belongs to the first label.
/// Passes when the excess never exceeds three binomial standard errors.
pub fn hitting_dominance(bundle: &PathBundle, labels: (&str, &str), eps: f64, t_grid: &[f64]) -> Result<StatReport> {
    let (a, b) = (bundle.member(labels.0)?, bundle.member(labels.1)?);
    for m in [a, b] {
        let m0 = bundle.value(m, 0, 0);
        if !(eps > 0.0 && eps < m0) {
            return Err(Error::invalid(format!("epsilon {eps} must lie in (0, m0 = {m0}) for {}", bundle.labels[m])));
        }
    }
    let (ta, tb) = (hitting_times(bundle, a, eps), hitting_times(bundle, b, eps));
    let n = ta.len() as f64;
    let (mut worst, mut widest) = (f64::NEG_INFINITY, 0.0f64);
    for &t in t_grid {
        let pa = ta.iter().filter(|&&s| s > t).count() as f64 / n;
        let pb = tb.iter().filter(|&&s| s > t).count() as f64 / n;
        let hw = 3.0 * (pa * (1.0 - pa) / n + pb * (1.0 - pb) / n).sqrt();
        worst = worst.max(pa - pb - hw);
        widest = widest.max(hw);
    }
    Ok(StatReport {
        name: format!("hitting[{}<={}]", labels.0, labels.1),
        value: worst,
        threshold: 0.0,
        n: ta.len(),
        pass: worst <= 0.0,
        half_width: Some(widest),
        detail: format!("epsilon {eps}, {} grid times", t_grid.len()),
    })
}

/// Checks `E[f(Y(T)) | Y(t) = y_p] = target_p` by simulating `n_inner` continuations of `spec`
/// from each start. Passes when the pooled z-score is within 3 and at most 1% of the per-start
/// z-scores exceed 3.
pub fn nested_check(
    spec: &DiffusionSpec,
    t: f64,
    starts: &[f64],
    targets: &[f64],
    f: impl Fn(f64) -> f64,
    n_inner: usize,
    dt: f64,
    seed: u64,
) -> Result<StatReport> {
    if starts.len() != targets.len() || starts.is_empty() || n_inner < 2 {
        return Err(Error::invalid("nested check needs matching starts/targets and n_inner >= 2"));
    }
    let (mut sum_gap, mut sum_var, mut exceed, mut worst) = (0.0, 0.0, 0usize, 0.0f64);
    for (p, (&y, &target)) in starts.iter().zip(targets).enumerate() {
        let mut opts = SimOptions::new(spec.horizon, dt, n_inner, seed);
        opts.t0 = t;
        opts.x0 = Some(vec![y]);
        opts.record_every = usize::MAX;
        opts.stream_base = (p * n_inner) as u64;
        let b = simulate_paths(std::slice::from_ref(spec), &opts)?;
        let vals: Vec<f64> = b.terminal(0).into_iter().map(&f).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n;
        sum_gap += mean - target;
        sum_var += var;
        if var > 0.0 {
            let z = (mean - target).abs() / var.sqrt();
            worst = worst.max(z);
            if z > 3.0 {
                exceed += 1;
            }
        } else if (mean - target).abs() > 1e-12 {
            exceed += 1;
        }
    }
    let pooled = if sum_var > 0.0 { sum_gap / sum_var.sqrt() } else { 0.0 };
    let frac = exceed as f64 / starts.len() as f64;
    Ok(StatReport {
        name: format!("nested[{}, t={t}]", spec.label),
        value: pooled.abs(),
        threshold: 3.0,
        n: starts.len(),
        pass: pooled.abs() <= 3.0 && frac <= 0.01,
        half_width: Some(3.0 * sum_var.sqrt() / starts.len() as f64),
        detail: format!(
            "mean gap {:.3e}, {exceed} of {} starts beyond 3 sigma, max |z| {worst:.2}",
            sum_gap / starts.len() as f64,
            starts.len()
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{make_bm, make_example1};
    use crate::rng::NormalStream;
    use crate::sde_sim::{simulate_paths, PairSpec, SimOptions};

    #[test]
    fn ks_identical_and_shifted() {
        let mut s = NormalStream::new(3, 0);
        let a: Vec<f64> = (0..100_000).map(|_| s.next()).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);
        let b: Vec<f64> = (0..100_000).map(|_| s.next() + 0.1).collect();
        assert!(!law_equality_test("shift", &a, &b, 0.01).unwrap().pass);
        let c: Vec<f64> = (0..100_000).map(|_| s.next()).collect();
        assert!(law_equality_test("same", &a, &c, 0.01).unwrap().pass);
        assert!(law_equality_test("small", &a[..10], &c[..10], 0.01).is_err());
    }

    #[test]
    fn nested_check_on_brownian_identity_and_square() {
        let bm = make_bm(0.0, 1.0).unwrap();
        let starts = [-1.0, 0.0, 0.7];
        // E[B_T | B_t = y] = y; E[B_T² | B_t = y] = y² + T − t.
        let ok = nested_check(&bm, 0.5, &starts, &starts, |x| x, 4000, 0.05, 9).unwrap();
        assert!(ok.pass, "{ok:?}");
        let sq: Vec<f64> = starts.iter().map(|y| y * y + 0.5).collect();
        assert!(nested_check(&bm, 0.5, &starts, &sq, |x| x * x, 4000, 0.05, 9).unwrap().pass);
        let wrong: Vec<f64> = starts.iter().map(|y| y * y).collect();
        assert!(!nested_check(&bm, 0.5, &starts, &wrong, |x| x * x, 4000, 0.05, 9).unwrap().pass);
    }

    #[test]
    fn kolmogorov_sf_reference_points() {
        // Tabulated quantiles of the Kolmogorov distribution.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn robust_ols_recovers_a_line() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..100).map(|i| 2.0 + 0.5 * i as f64).collect();
        let (b, se) = robust_ols(&rows, &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-10 && (b[1] - 0.5).abs() < 1e-12);
        assert!(se.iter().all(|&s| s < 1e-8));
    }

    #[test]
    fn martingale_test_accepts_bm_and_rejects_drift() {
        let spec = make_bm(0.0, 1.0).unwrap();
        let mut opts = SimOptions::new(1.0, 0.05, 100_000, 11);
        opts.record_every = 5;
        let mut bundle = simulate_paths(&[spec], &opts).unwrap();
        let pairs = quarter_pairs(&bundle);
        assert!(martingale_test(&bundle, 0, &pairs).unwrap().pass);
        let n = bundle.n_nodes();
        let drifted: Vec<f64> = (0..bundle.n_paths() * n).map(|i| bundle.paths[0][i] + 0.5 * bundle.t_nodes[i % n]).collect();
        bundle.push_member("drifted", drifted);
        assert!(!martingale_test(&bundle, 1, &pairs).unwrap().pass);
    }

    #[test]
    fn ordering_and_hitting_on_example1() {
        let fam = make_example1(&[1.0, 2.0], 1e-2, 1.0).unwrap();
        let shifted: Vec<_> =
            fam.iter().map(|s| crate::families::make_affine(s, 1.0, 1.0).unwrap()).collect();
        let dt: f64 = 1e-3;
        let slack = 2.0 * dt.sqrt() * 2.0;
        let eps = 0.5;
        let mut opts = SimOptions::new(1.0, dt, 2000, 5);
        opts.track = vec![PairSpec { a: 0, b: 1, slack }];
        opts.hit_levels = vec![(0, eps), (1, eps)];
        opts.record_every = 10;
        let bundle = simulate_paths(&shifted, &opts).unwrap();
        let (la, lb) = (bundle.labels[0].clone(), bundle.labels[1].clone());
        assert!(ordering_check(&bundle, &[(&la, &la)], 0.0).unwrap().pass);
        assert!(ordering_check(&bundle, &[(&la, &lb)], slack).unwrap().pass);
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!(hitting_dominance(&bundle, (&la, &lb), eps, &grid).unwrap().pass);
        assert!(hitting_dominance(&bundle, (&la, &la), eps, &grid).unwrap().value <= 0.0);
        assert!(!hitting_dominance(&bundle, (&lb, &la), eps, &grid).unwrap().pass);
        assert!(hitting_dominance(&bundle, (&la, &lb), 5.0, &grid).is_err());

        opts.shared = false;
        let indep = simulate_paths(&shifted, &opts).unwrap();
        assert!(!ordering_check(&indep, &[(&la, &lb)], slack).unwrap().pass);
    }
}
