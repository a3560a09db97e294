//! Built-in diffusion families: Brownian motion, the smoothed-kink family, the Kimura martingale
//! and its time change, affine images, and families built from terminal CDFs.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::consistency::{build_consistent_family, spec_from_theta, FamilyGrid, ThetaDensity, ThetaField};
use crate::error::{Error, Result};
use crate::kernels::{
    coef, example1_quantile, example1_theta, example1_theta_lambda, logistic, AffineDensity, DiffusionSpec,
    GaussianDensity, KimuraDensity, Potential,
};
use crate::monotone_fn::{Interval, MonotoneMap};
use crate::normal;
use crate::roots::brent;

/// Margin of the Kimura working interval `[δ, 1 − δ]`.
pub const KIMURA_DELTA: f64 = 1e-4;

/// `dM = dB` from `m0`. The potential is `Σ = x` (not re-centred at `m0`).
pub fn make_bm(m0: f64, horizon: f64) -> Result<DiffusionSpec> {
    let reach = 8.0 * horizon.sqrt();
    let working = Interval::new(m0 - reach, m0 + reach)?;
    let mut spec = DiffusionSpec::new(
        "bm",
        coef(|_, _| 1.0),
        coef(|_, _| 0.0),
        Interval::real_line(),
        working,
        m0,
        horizon,
    )?;
    spec.time_dependent = false;
    spec.density = Some(Arc::new(GaussianDensity));
    spec.potential = Some(Potential {
        sigma_big: coef(|_, x| x),
        theta: coef(|_, y| y),
        sigma_big_t: coef(|_, _| 0.0),
    });
    Ok(spec)
}

/// `m0^λ = (λ − 1)·√((T + κ)/2π)`.
pub fn example1_m0(lambda: f64, kappa: f64, horizon: f64) -> f64 {
    (lambda - 1.0) * ((horizon + kappa) / (2.0 * PI)).sqrt()
}

/// `dm0^λ/dλ = √((T + κ)/2π)`.
pub fn example1_dm0_dlambda(kappa: f64, horizon: f64) -> f64 {
    ((horizon + kappa) / (2.0 * PI)).sqrt()
}

struct Example1Field {
    lambda: f64,
    kappa: f64,
    horizon: f64,
}

impl ThetaField for Example1Field {
    fn theta(&self, t: f64, y: f64) -> [f64; 3] {
        example1_theta(self.lambda, self.kappa, self.horizon, t, y)
    }

    fn quantile(&self, t: f64, x: f64) -> Result<f64> {
        example1_quantile(self.lambda, self.kappa, self.horizon, t, x)
    }
}

/// Members `σ^λ = 1/(q^λ_{T−t})'` of the family whose terminal CDFs are `f^λ ∗ φ_κ` with
/// `f^λ(x) = x + (λ − 1)·max(x, 0)`.
pub fn make_example1(lambdas: &[f64], kappa: f64, horizon: f64) -> Result<Vec<DiffusionSpec>> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            if !(lambda >= 1.0) {
                return Err(Error::invalid(format!("lambda must be at least 1, got {lambda}")));
            }
            let m0 = example1_m0(lambda, kappa, horizon);
            let reach = 8.0 * lambda * horizon.sqrt();
            let working = Interval::new(m0 - reach, m0 + reach)?;
            let field = Arc::new(Example1Field { lambda, kappa, horizon });
            let mut spec =
                spec_from_theta(format!("example1[{lambda}]"), field.clone(), Arc::new(|_, _| 0.0), m0, working, horizon)?;
            spec.density = Some(Arc::new(ThetaDensity(field)));
            spec.sigma_lambda = Some(coef(move |t, x| {
                let q = example1_quantile(lambda, kappa, horizon, t, x).unwrap_or(f64::NAN);
                let s = horizon - t + kappa;
                let [_, d, _] = example1_theta(lambda, kappa, horizon, t, q);
                let q_lambda = -example1_theta_lambda(kappa, horizon, t, q) / d;
                normal::cdf_var(q, s) + (lambda - 1.0) * normal::pdf_var(q, s) * q_lambda
            }));
            Ok(spec)
        })
        .collect()
}

/// Terminal CDF `f^λ ∗ φ_κ` tabulated on `n` uniform knots over `[−reach, reach]`.
pub fn example1_terminal(lambda: f64, kappa: f64, reach: f64, n: usize) -> Result<MonotoneMap> {
    let horizon = 1.0;
    MonotoneMap::tabulate(
        Interval::real_line(),
        -reach,
        reach,
        n,
        |y| example1_theta(lambda, kappa, horizon, horizon, y)[0],
        |y| example1_theta(lambda, kappa, horizon, horizon, y)[1],
    )
}

fn check_unit(m0: f64) -> Result<()> {
    if m0 > 0.0 && m0 < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("m0 must lie in (0, 1), got {m0}")))
    }
}

fn log_odds(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// Kimura martingale `dM = M(1 − M) dB` on `(0, 1)`.
pub fn make_kimura(m0: f64, horizon: f64) -> Result<DiffusionSpec> {
    check_unit(m0)?;
    let working = Interval::new(KIMURA_DELTA, 1.0 - KIMURA_DELTA)?;
    let mut spec = DiffusionSpec::new(
        "kimura",
        coef(|_, x| x * (1.0 - x)),
        coef(|_, x| 1.0 - 2.0 * x),
        Interval::unit(),
        working,
        m0,
        horizon,
    )?;
    spec.time_dependent = false;
    spec.density = Some(Arc::new(KimuraDensity));
    let l0 = log_odds(m0);
    spec.potential = Some(Potential {
        sigma_big: coef(move |_, x| log_odds(x) - l0),
        theta: coef(move |_, y| logistic(y + l0)),
        sigma_big_t: coef(|_, _| 0.0),
    });
    Ok(spec)
}

/// Time-changed Kimura martingale `dM = M(1 − M)/√(T − t) dB`; `M(T) ∈ {0, 1}`.
pub fn make_kimura_timechanged(m0: f64, horizon: f64) -> Result<DiffusionSpec> {
    check_unit(m0)?;
    let working = Interval::new(KIMURA_DELTA, 1.0 - KIMURA_DELTA)?;
    let rem = move |t: f64| (horizon - t).max(f64::MIN_POSITIVE);
    let mut spec = DiffusionSpec::new(
        "kimura-timechanged",
        coef(move |t, x| x * (1.0 - x) / rem(t).sqrt()),
        coef(move |t, x| (1.0 - 2.0 * x) / rem(t).sqrt()),
        Interval::unit(),
        working,
        m0,
        horizon,
    )?;
    spec.singular_at_horizon = true;
    let l0 = log_odds(m0);
    spec.potential = Some(Potential {
        sigma_big: coef(move |t, x| rem(t).sqrt() * (log_odds(x) - l0)),
        theta: coef(move |t, y| logistic(y / rem(t).sqrt() + l0)),
        sigma_big_t: coef(move |t, x| -(log_odds(x) - l0) / (2.0 * rem(t).sqrt())),
    });
    Ok(spec)
}

/// Image `A·M + B` of a spec: `σ₂(t, x) = A·σ₁(t, (x − B)/A)`, `m0 ↦ A·m0 + B`.
pub fn make_affine(base: &DiffusionSpec, a: f64, b: f64) -> Result<DiffusionSpec> {
    if !(a > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::invalid(format!("affine map needs A > 0 and finite B, got A = {a}, B = {b}")));
    }
    let map = |i: Interval| Interval { lo: a * i.lo + b, hi: a * i.hi + b };
    let back = move |x: f64| (x - b) / a;
    let (s, sx) = (base.sigma.clone(), base.sigma_x.clone());
    let mut spec = DiffusionSpec::new(
        format!("{}*{a}+{b}", base.label),
        coef(move |t, x| a * s(t, back(x))),
        coef(move |t, x| sx(t, back(x))),
        map(base.state_space),
        map(base.working),
        a * base.m0 + b,
        base.horizon,
    )?;
    spec.time_dependent = base.time_dependent;
    spec.singular_at_horizon = base.singular_at_horizon;
    spec.density = base
        .density
        .clone()
        .map(|d| Arc::new(AffineDensity { base: d, a, b }) as Arc<dyn crate::kernels::TransitionDensity>);
    spec.potential = base.potential.clone().map(|p| {
        let (sb, th, st) = (p.sigma_big, p.theta, p.sigma_big_t);
        Potential {
            sigma_big: coef(move |t, x| sb(t, back(x))),
            theta: coef(move |t, y| a * th(t, y) + b),
            sigma_big_t: coef(move |t, x| st(t, back(x))),
        }
    });
    Ok(spec)
}

pub fn make_affine_family(base: &DiffusionSpec, a_list: &[f64], b_list: &[f64]) -> Result<Vec<DiffusionSpec>> {
    if a_list.len() != b_list.len() {
        return Err(Error::invalid("A and B lists differ in length"));
    }
    a_list.iter().zip(b_list).map(|(&a, &b)| make_affine(base, a, b)).collect()
}

/// `σ·(1 + ε·sin x)`, with no closed forms: not consistent with the base.
pub fn perturbed(base: &DiffusionSpec, eps: f64) -> Result<DiffusionSpec> {
    if !(eps.abs() < 1.0) {
        return Err(Error::invalid(format!("perturbation must satisfy |eps| < 1, got {eps}")));
    }
    let (s, sx) = (base.sigma.clone(), base.sigma_x.clone());
    let s2 = s.clone();
    let mut spec = DiffusionSpec::new(
        format!("{}~sin{eps}", base.label),
        coef(move |t, x| s(t, x) * (1.0 + eps * x.sin())),
        coef(move |t, x| sx(t, x) * (1.0 + eps * x.sin()) + s2(t, x) * eps * x.cos()),
        base.state_space,
        base.working,
        base.m0,
        base.horizon,
    )?;
    spec.time_dependent = base.time_dependent;
    Ok(spec)
}

/// Quantile family over Brownian motion from `m0`: `Θ̃(t, ·) = terminal ∗ φ_{T−t}`, shifted by `D`.
pub fn make_quantile_cdf(m0: f64, horizon: f64, terminal: &MonotoneMap, d: f64) -> Result<DiffusionSpec> {
    let base = make_bm(m0, horizon)?;
    let mut v = build_consistent_family(&base, std::slice::from_ref(terminal), &[d], FamilyGrid::default())?;
    let mut spec = v.remove(0);
    spec.label = format!("quantile-cdf[D={d}]");
    Ok(spec)
}

/// Family consistent with the Kimura martingale (shift `D = 0`), one member per terminal.
pub fn make_kimura_family(
    m0: f64,
    horizon: f64,
    terminals: &[MonotoneMap],
    grid: FamilyGrid,
) -> Result<Vec<DiffusionSpec>> {
    let base = make_kimura(m0, horizon)?;
    let ds = vec![0.0; terminals.len()];
    let mut out = build_consistent_family(&base, terminals, &ds, grid)?;
    for (i, s) in out.iter_mut().enumerate() {
        s.label = format!("kimura-family[{i}]");
    }
    Ok(out)
}

/// Payoff `v(x) = x + eps·sin x` on the real line (tabulated on `[−reach, reach]`).
pub fn sine_payoff(eps: f64, reach: f64, n: usize) -> Result<MonotoneMap> {
    if !(eps.abs() < 1.0) {
        return Err(Error::invalid(format!("payoff x + eps·sin x needs |eps| < 1, got {eps}")));
    }
    MonotoneMap::tabulate(Interval::real_line(), -reach, reach, n, move |x| x + eps * x.sin(), move |x| {
        1.0 + eps * x.cos()
    })
}

/// Payoff `v(x) = ½ + (x + eps·sin x)/(2·scale)`, restricted to the interval it maps onto `(0, 1)`.
pub fn scaled_sine_payoff(eps: f64, scale: f64, n: usize) -> Result<MonotoneMap> {
    if !(eps.abs() < 1.0 && scale > 0.0) {
        return Err(Error::invalid("scaled payoff needs |eps| < 1 and scale > 0"));
    }
    let g = move |x: f64| x + eps * x.sin();
    let edge = brent(|x| g(x) - scale, 0.0, 2.0 * scale + 2.0, 1e-14)?;
    let domain = Interval::new(-edge, edge)?;
    MonotoneMap::tabulate(domain, -edge, edge, n, move |x| 0.5 + g(x) / (2.0 * scale), move |x| {
        (1.0 + eps * x.cos()) / (2.0 * scale)
    })
}

/// Default Kimura payoff: `ε = 0.4`, `x + 0.4·sin x ∈ (−5, 5)`.
pub fn kimura_payoff() -> Result<MonotoneMap> {
    scaled_sine_payoff(0.4, 5.0, 1025)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{example1_sigma, SigmaTransform};
    use crate::monotone_fn::uniform;

    #[test]
    fn example1_density_is_a_martingale_kernel() {
        let fam = make_example1(&[2.0], 1e-2, 1.0).unwrap();
        let d = fam[0].density.clone().unwrap();
        for &(t, x) in &[(0.0, fam[0].m0), (0.5, -0.3), (0.9, 0.2)] {
            let (lo, hi) = d.window(t, x, 1.0);
            let mass = crate::quadrature::integrate_split(|y| d.pdf(t, x, 1.0, y), lo, hi, &[0.0, x], 1e-12, 1e-12).unwrap();
            let mean =
                crate::quadrature::integrate_split(|y| y * d.pdf(t, x, 1.0, y), lo, hi, &[0.0, x], 1e-12, 1e-12).unwrap();
            assert!((mass - 1.0).abs() < 1e-8, "{mass}");
            assert!((mean - x).abs() < 1e-7, "{mean} vs {x}");
        }
    }

    #[test]
    fn example1_initial_values() {
        let fam = make_example1(&[1.0, 2.0, 3.0, 4.0, 5.0], 1e-4, 1.0).unwrap();
        // E[f^λ(Y)] with Y ~ N(0, T + κ): (λ − 1)·E[max(Y, 0)] by quadrature.
        let s = 1.0001f64;
        let half_mean = crate::quadrature::integrate(|y| y * normal::pdf_var(y, s), 0.0, 40.0, 1e-14, 1e-14).unwrap();
        for (i, spec) in fam.iter().enumerate() {
            assert!((spec.m0 - i as f64 * half_mean).abs() < 1e-12, "{}", spec.m0);
        }
        assert!((fam[1].m0 - 0.398962).abs() < 5e-7);
        assert_eq!(fam[0].sigma(0.3, 1.7), 1.0);
        assert!((example1_dm0_dlambda(1e-4, 1.0) - half_mean).abs() < 1e-12);
    }

    #[test]
    fn example1_potential_vanishes_at_m0() {
        for spec in make_example1(&[1.5, 3.0], 1e-2, 1.0).unwrap() {
            let st = SigmaTransform::new(spec.clone());
            assert!(st.sigma_big(0.0, spec.m0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn example1_sigma_lambda_matches_difference() {
        let (kappa, t) = (1e-2, 0.3);
        let fam = make_example1(&[3.0], kappa, 1.0).unwrap();
        let sl = fam[0].sigma_lambda.clone().unwrap();
        let h = 1e-5;
        for x in [-1.0, 0.2, 0.8, 2.5] {
            let fd = (example1_sigma(3.0 + h, kappa, 1.0, t, x).unwrap() - example1_sigma(3.0 - h, kappa, 1.0, t, x).unwrap())
                / (2.0 * h);
            assert!((sl(t, x) - fd).abs() < 1e-6, "{x}: {} vs {fd}", sl(t, x));
        }
    }

    #[test]
    fn example1_sigma_x_matches_difference() {
        let fam = make_example1(&[2.0], 1e-2, 1.0).unwrap();
        let s = &fam[0];
        let h = 1e-6;
        for x in [-0.5, 0.1, 0.4, 1.3] {
            let fd = (s.sigma(0.5, x + h) - s.sigma(0.5, x - h)) / (2.0 * h);
            assert!((s.sigma_x(0.5, x) - fd).abs() < 1e-5);
        }
    }

    #[test]
    fn kimura_closed_forms() {
        let k = make_kimura(0.3, 1.0).unwrap();
        assert_eq!(k.sigma(0.0, 0.5), 0.25);
        let st = SigmaTransform::new(k);
        for x in uniform(0.05, 0.95, 19) {
            let y = st.sigma_big(0.2, x).unwrap();
            assert!((st.theta(0.2, y).unwrap() - x).abs() < 1e-12);
            assert!((y - (x * 0.7 / ((1.0 - x) * 0.3)).ln()).abs() < 1e-12);
        }
        assert!(make_kimura(1.0, 1.0).is_err());
    }

    #[test]
    fn timechanged_kimura_potential_matches_quadrature() {
        let spec = make_kimura_timechanged(0.3, 1.0).unwrap();
        let closed = SigmaTransform::new(spec.clone());
        let mut bare = spec.clone();
        bare.potential = None;
        let numeric = SigmaTransform::new(bare);
        for &t in &[0.3, 0.5, 0.9] {
            for &x in &[0.1, 0.5, 0.8] {
                let a = closed.sigma_big(t, x).unwrap();
                assert!((a - numeric.sigma_big(t, x).unwrap()).abs() < 1e-9);
                assert!((closed.sigma_big_t(t, x).unwrap() - numeric.sigma_big_t(t, x).unwrap()).abs() < 1e-6);
                assert!((closed.theta(t, a).unwrap() - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_identity_and_composition() {
        let k = make_kimura(0.4, 1.0).unwrap();
        let same = make_affine(&k, 1.0, 0.0).unwrap();
        assert_eq!(same.m0, k.m0);
        assert_eq!(same.sigma(0.2, 0.3), k.sigma(0.2, 0.3));
        let twice = make_affine(&make_affine(&k, 2.0, 1.0).unwrap(), 3.0, -1.0).unwrap();
        let once = make_affine(&k, 6.0, 2.0).unwrap();
        assert!((twice.m0 - once.m0).abs() < 1e-14);
        for x in uniform(2.1, 7.9, 13) {
            assert!((twice.sigma(0.5, x) - once.sigma(0.5, x)).abs() < 1e-13);
            assert!((twice.sigma_x(0.5, x) - once.sigma_x(0.5, x)).abs() < 1e-13);
        }
        assert!(make_affine(&k, -1.0, 0.0).is_err());
    }

    #[test]
    fn quantile_cdf_with_identity_terminal_is_shifted_bm() {
        let spec = make_quantile_cdf(0.2, 1.0, &MonotoneMap::affine(1.0, 0.0).unwrap(), 0.5).unwrap();
        assert!((spec.m0 - 0.7).abs() < 1e-10);
        for x in [-2.0, 0.0, 1.5] {
            assert!((spec.sigma(0.4, x) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn quantile_cdf_matches_example1_closed_form() {
        let kappa = 0.1;
        let terminal = example1_terminal(3.0, kappa, 14.0, 2049).unwrap();
        let spec = make_quantile_cdf(0.0, 1.0, &terminal, 0.0).unwrap();
        assert!((spec.m0 - example1_m0(3.0, kappa, 1.0)).abs() < 1e-6);
        for &t in &[0.0, 0.5, 0.9] {
            for x in uniform(-2.0, 4.0, 7) {
                let exact = example1_sigma(3.0, kappa, 1.0, t, x).unwrap();
                assert!((spec.sigma(t, x) - exact).abs() < 5e-4, "t = {t}, x = {x}");
            }
        }
    }

    #[test]
    fn payoffs_are_in_class_g() {
        let v = kimura_payoff().unwrap();
        let r = v.range();
        assert!(r.lo.abs() < 1e-12 && (r.hi - 1.0).abs() < 1e-12);
        assert!(v.check_class_g().pass);
        assert!(sine_payoff(0.4, 20.0, 2049).unwrap().check_class_g().pass);
    }
}
