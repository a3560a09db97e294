//! Scalar root finding on brackets.

use crate::error::{Error, Result};

/// Grows `[a, b]` geometrically about its midpoint until `f` changes sign.
pub fn expand_bracket(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, max_doublings: usize) -> Result<(f64, f64)> {
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..max_doublings {
        if fa * fb <= 0.0 {
            return Ok((a, b));
        }
        let w = b - a;
        if fa.abs() < fb.abs() {
            a -= w;
            fa = f(a);
        } else {
            b += w;
            fb = f(b);
        }
        if !(fa.is_finite() && fb.is_finite()) {
            break;
        }
    }
    if fa * fb <= 0.0 {
        return Ok((a, b));
    }
    Err(Error::Bracket(format!("no sign change found around [{a}, {b}] (f = {fa}, {fb})")))
}

/// Brent's method. `f(a)` and `f(b)` must differ in sign.
pub fn brent(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(Error::Bracket(format!("f({a}) = {fa} and f({b}) = {fb} have the same sign")));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * xm * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    Err(Error::Bracket("Brent iteration did not converge".into()))
}

/// Newton's method safeguarded by bisection inside `[lo, hi]`; `fdf` returns `(f, f')`.
///
/// Requires `f(lo) <= 0 <= f(hi)` (increasing orientation).
pub fn newton_bracketed(
    fdf: impl Fn(f64) -> (f64, f64),
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let mut x = if x0 > lo && x0 < hi { x0 } else { 0.5 * (lo + hi) };
    for _ in 0..max_iter.max(1) * 4 {
        let (f, df) = fdf(x);
        if f == 0.0 {
            return Ok(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let mut next = x - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step <= tol || hi - lo <= tol {
            return Ok(x);
        }
    }
    Err(Error::Bracket(format!("Newton iteration did not converge in [{lo}, {hi}]")))
}

/// Solves the increasing equation `g(q) = target` by Newton from `x0` with a bisection fallback
/// on a bracket grown geometrically from `[x0 - 1, x0 + 1]`.
pub fn solve_increasing(
    gdg: impl Fn(f64) -> (f64, f64),
    target: f64,
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let h = |q: f64| {
        let (g, dg) = gdg(q);
        (g - target, dg)
    };
    let mut x = x0;
    for _ in 0..max_iter {
        let (f, df) = h(x);
        if !(f.is_finite() && df.is_finite() && df > 0.0) {
            break;
        }
        let step = f / df;
        x -= step;
        if step.abs() <= tol * (1.0 + x.abs()) {
            if h(x).0.abs() <= 1e3 * f64::EPSILON * (1.0 + target.abs()) || step.abs() <= tol {
                return Ok(x);
            }
        }
    }
    let (a, b) = expand_bracket(|q| h(q).0, x0 - 1.0, x0 + 1.0, 200)?;
    newton_bracketed(h, a, b, 0.5 * (a + b), tol, 200)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_cubic_root() {
        let r = brent(|x| x * x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.cbrt()).abs() < 1e-13);
    }

    #[test]
    fn brent_rejects_unbracketed() {
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn expand_then_solve() {
        let f = |x: f64| x - 1000.0;
        let (a, b) = expand_bracket(f, -1.0, 1.0, 100).unwrap();
        assert!(a <= 1000.0 && b >= 1000.0);
    }

    #[test]
    fn increasing_solver_handles_flat_start() {
        // Derivative vanishes at the start; the bracket fallback takes over.
        let q = solve_increasing(|x| (x * x * x, 3.0 * x * x), 8.0, 0.0, 1e-13, 50).unwrap();
        assert!((q - 2.0).abs() < 1e-12);
    }
}
