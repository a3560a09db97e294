//! Adaptive Gauss–Kronrod integration and Gauss–Hermite Gaussian expectations.

use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
///
/// Stops when the summed error estimate is below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature(format!("integration limits must be finite, got [{a}, {b}]")));
    }
    let (value, err) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, err });
    let (mut total, mut total_err) = (value, err);
    for _ in 0..4000 {
        if total_err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let seg = heap.pop().expect("heap is never empty");
        let m = 0.5 * (seg.a + seg.b);
        let (v1, e1) = gk15(&f, seg.a, m);
        let (v2, e2) = gk15(&f, m, seg.b);
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.err;
        heap.push(Segment { a: seg.a, b: m, value: v1, err: e1 });
        heap.push(Segment { a: m, b: seg.b, value: v2, err: e2 });
    }
    if !total.is_finite() {
        return Err(Error::Quadrature(format!("non-finite integral over [{a}, {b}]")));
    }
    // Recompute the error from the segments to avoid drift in the running sum.
    let err: f64 = heap.iter().map(|s| s.err).sum();
    if err > abs_tol.max(rel_tol * total.abs()) * 10.0 {
        return Err(Error::Quadrature(format!(
            "no convergence over [{a}, {b}]: estimate {total}, error {err}"
        )));
    }
    Ok(total)
}

/// Integrates over `[a, b]` after splitting at the interior points in `breaks`.
pub fn integrate_split(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&p| p > a && p < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let share = abs_tol / (pts.len() - 1) as f64;
    pts.windows(2).map(|w| integrate(&f, w[0], w[1], share, rel_tol)).sum()
}

/// Gauss–Hermite rule for the weight `exp(-x²)`: nodes and weights.
#[derive(Debug)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Largest rule the node-doubling loop will try.
pub const GH_MAX_NODES: usize = 1024;

/// Cached Gauss–Hermite rule with `n` nodes.
pub fn hermite_rule(n: usize) -> Arc<HermiteRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<HermiteRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().expect("rule cache poisoned").get(&n) {
        return r.clone();
    }
    let rule = Arc::new(build_hermite(n));
    cache.lock().expect("rule cache poisoned").insert(n, rule.clone());
    rule
}

// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix (implicit QL, eigenvalues only),
// polished by Newton on the orthonormal recurrence, which also yields the weights.
fn build_hermite(n: usize) -> HermiteRule {
    let mut d = vec![0.0; n];
    let mut e: Vec<f64> = (1..n).map(|i| (i as f64 / 2.0).sqrt()).chain([0.0]).collect();
    tridiagonal_eigenvalues(&mut d, &mut e);
    d.sort_by(f64::total_cmp);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut weights = vec![0.0; n];
    for (z, w) in d.iter_mut().zip(weights.iter_mut()) {
        let mut pp = 1.0;
        for iter in 0..3 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = *z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            if iter < 2 && pp != 0.0 && (p1 / pp).abs() < 1e-6 {
                *z -= p1 / pp;
            }
        }
        *w = if pp.is_finite() && pp != 0.0 { 2.0 / (pp * pp) } else { 0.0 };
    }
    HermiteRule { nodes: d, weights }
}

// Eigenvalues of a symmetric tridiagonal matrix with diagonal `d` and off-diagonal `e[0..n-1]`.
fn tridiagonal_eigenvalues(d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for l in 0..n {
        for _ in 0..60 {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// `E[f(x + √s·Z)]` for standard normal `Z` with `n` Gauss–Hermite nodes.
pub fn gauss_expect_n(f: &impl Fn(f64) -> f64, x: f64, s: f64, n: usize) -> f64 {
    let rule = hermite_rule(n);
    let scale = (2.0 * s).sqrt();
    let sum: f64 = rule.nodes.iter().zip(&rule.weights).map(|(&xi, &wi)| wi * f(x + scale * xi)).sum();
    sum / std::f64::consts::PI.sqrt()
}

/// `E[f(x + √s·Z)]`, doubling the node count from 64 until successive results agree within `tol`.
pub fn gauss_expect(f: impl Fn(f64) -> f64, x: f64, s: f64, tol: f64) -> Result<f64> {
    if s == 0.0 {
        return Ok(f(x));
    }
    if s < 0.0 {
        return Err(Error::invalid(format!("variance must be non-negative, got {s}")));
    }
    let mut n = 64;
    let mut prev = gauss_expect_n(&f, x, s, n);
    while n < GH_MAX_NODES {
        n *= 2;
        let next = gauss_expect_n(&f, x, s, n);
        if (next - prev).abs() < tol * (1.0 + next.abs()) {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature(format!(
        "Gauss–Hermite expectation at x = {x}, s = {s} did not stabilise with {GH_MAX_NODES} nodes"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk_integrates_polynomials_and_peaks() {
        let v = integrate(|x| x * x * x - x, 0.0, 2.0, 1e-14, 1e-14).unwrap();
        assert!((v - 2.0).abs() < 1e-13);
        let s = 1e-3;
        let v = integrate(|x| (-x * x / (2.0 * s)).exp(), -1.0, 1.0, 1e-13, 1e-12).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI * s).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hermite_rule_moments() {
        for n in [64, 128, 256, 512, 1024] {
            let r = hermite_rule(n);
            let total: f64 = r.weights.iter().sum();
            assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12, "n = {n}: {total}");
            let second: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
            assert!((second - 0.5 * std::f64::consts::PI.sqrt()).abs() < 1e-12, "n = {n}");
            assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn gaussian_expectation_of_sine() {
        let (x, s) = (0.7, 0.8);
        let v = gauss_expect(f64::sin, x, s, 1e-12).unwrap();
        assert!((v - (-s / 2.0).exp() * x.sin()).abs() < 1e-13);
    }

    #[test]
    fn gaussian_expectation_of_kink_does_not_stabilise() {
        assert!(gauss_expect(|y: f64| y.abs(), 0.0, 1.0, 1e-12).is_err());
    }
}
