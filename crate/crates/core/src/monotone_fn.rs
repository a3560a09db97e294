//! Strictly increasing C¹ maps on an interval.
//!
//! A [`MonotoneMap`] is a monotone cubic Hermite interpolant over ascending
//! knots with affine extensions beyond the first and last knot. Inverses are
//! exact inverses of the interpolant (each evaluation solves the forward cubic
//! on the bracketing piece), and compositions are kept as compositions, so the
//! round trip `invert(f)(f(x)) = x` holds to root-finding precision instead of
//! interpolation precision.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for the root refinement inside inverse evaluation.
pub const TOL_INV: f64 = 1e-12;

/// Default tabulation density on a working interval.
pub const DEFAULT_KNOTS: usize = 513;

/// Relative clamping allowance used by [`MonotoneMap::compose`].
const CLAMP_TOL: f64 = 1e-9;

/// Open interval with possibly infinite endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::invalid(format!("interval requires lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn real_line() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn unit() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.max(self.lo).min(self.hi)
    }

    /// Scale used for relative tolerances: the width when bounded, else 1.
    pub fn scale(&self) -> f64 {
        if self.is_bounded() {
            self.width()
        } else {
            1.0
        }
    }

    pub fn check(&self, what: &'static str, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain { what, x, lo: self.lo, hi: self.hi })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IntervalRepr {
    lo: Option<f64>,
    hi: Option<f64>,
}

impl Serialize for Interval {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        IntervalRepr {
            lo: self.lo.is_finite().then_some(self.lo),
            hi: self.hi.is_finite().then_some(self.hi),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = IntervalRepr::deserialize(d)?;
        Interval::new(r.lo.unwrap_or(f64::NEG_INFINITY), r.hi.unwrap_or(f64::INFINITY))
            .map_err(serde::de::Error::custom)
    }
}

/// Cubic Hermite table with affine tails.
#[derive(Debug, Clone, PartialEq)]
struct Table {
    knots: Vec<f64>,
    values: Vec<f64>,
    derivs: Vec<f64>,
    tail_lo: f64,
    tail_hi: f64,
}

impl Table {
    fn validate(&self) -> Result<()> {
        let n = self.knots.len();
        if n < 2 || self.values.len() != n || self.derivs.len() != n {
            return Err(Error::invalid(format!(
                "table needs >= 2 knots with matching lengths (knots {}, values {}, derivs {})",
                n,
                self.values.len(),
                self.derivs.len()
            )));
        }
        for i in 0..n - 1 {
            if !(self.knots[i + 1] > self.knots[i]) {
                return Err(Error::invalid(format!("knots not strictly ascending at index {i}")));
            }
            if !(self.values[i + 1] > self.values[i]) {
                return Err(Error::NotMonotone {
                    index: i,
                    left: self.values[i],
                    right: self.values[i + 1],
                });
            }
        }
        if let Some(i) = self.derivs.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::invalid(format!("derivative at knot {i} is not positive")));
        }
        if !(self.tail_lo > 0.0 && self.tail_hi > 0.0 && self.tail_lo.is_finite() && self.tail_hi.is_finite()) {
            return Err(Error::invalid("tail slopes must be positive and finite"));
        }
        Ok(())
    }

    fn first(&self) -> f64 {
        self.knots[0]
    }

    fn last(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn piece(&self, x: f64) -> usize {
        let n = self.knots.len();
        let i = self.knots.partition_point(|&k| k <= x);
        i.saturating_sub(1).min(n - 2)
    }

    fn coeffs(&self, i: usize) -> (f64, f64, f64, f64, f64, f64) {
        (
            self.knots[i],
            self.knots[i + 1] - self.knots[i],
            self.values[i],
            self.values[i + 1],
            self.derivs[i],
            self.derivs[i + 1],
        )
    }

    /// Piece `i` as `y0 + u·(d0 + u·(c2 + u·c3))` in `u = x − x_i`.
    fn poly(&self, i: usize) -> (f64, f64, f64, f64, f64) {
        let (x0, h, y0, y1, d0, d1) = self.coeffs(i);
        let c2 = (3.0 * (y1 - y0) / h - 2.0 * d0 - d1) / h;
        let c3 = (2.0 * (y0 - y1) / h + d0 + d1) / (h * h);
        (x0, y0, d0, c2, c3)
    }

    fn eval(&self, x: f64) -> f64 {
        if x < self.first() {
            return self.values[0] + self.tail_lo * (x - self.first());
        }
        if x > self.last() {
            return self.values[self.values.len() - 1] + self.tail_hi * (x - self.last());
        }
        let (x0, y0, d0, c2, c3) = self.poly(self.piece(x));
        let u = x - x0;
        y0 + u * (d0 + u * (c2 + u * c3))
    }

    fn deriv(&self, x: f64) -> f64 {
        if x < self.first() {
            return self.tail_lo;
        }
        if x > self.last() {
            return self.tail_hi;
        }
        let (x0, _, d0, c2, c3) = self.poly(self.piece(x));
        let u = x - x0;
        d0 + u * (2.0 * c2 + 3.0 * u * c3)
    }

    fn second(&self, x: f64) -> f64 {
        if x < self.first() || x > self.last() {
            return 0.0;
        }
        let (x0, _, _, c2, c3) = self.poly(self.piece(x));
        2.0 * c2 + 6.0 * c3 * (x - x0)
    }

    /// Exact inverse of the interpolant at `y`.
    fn solve(&self, y: f64) -> f64 {
        let n = self.values.len();
        if y < self.values[0] {
            return self.first() + (y - self.values[0]) / self.tail_lo;
        }
        if y > self.values[n - 1] {
            return self.last() + (y - self.values[n - 1]) / self.tail_hi;
        }
        let i = self.values.partition_point(|&v| v <= y).saturating_sub(1).min(n - 2);
        let (mut a, mut b) = (self.knots[i], self.knots[i + 1]);
        let (ya, yb) = (self.values[i], self.values[i + 1]);
        if y <= ya {
            return a;
        }
        if y >= yb {
            return b;
        }
        let mut x = a + (b - a) * (y - ya) / (yb - ya);
        let tol = TOL_INV.min(1e-14 * (1.0 + x.abs()).max(b - a));
        for _ in 0..100 {
            let r = self.eval(x) - y;
            if r == 0.0 {
                return x;
            }
            if r > 0.0 {
                b = x;
            } else {
                a = x;
            }
            let d = self.deriv(x);
            let mut next = x - r / d;
            if !(next > a && next < b) || !next.is_finite() {
                next = 0.5 * (a + b);
            }
            let step = (next - x).abs();
            x = next;
            if step <= tol * 1e-2 || b - a <= tol * 1e-2 {
                break;
            }
        }
        x
    }

    fn gauss_smooth(&self, x: f64, s: f64) -> [f64; 3] {
        if s <= 0.0 {
            return [self.eval(x), self.deriv(x), self.second(x)];
        }
        let sd = s.sqrt();
        let reach = GAUSS_REACH * sd;
        let n = self.knots.len();
        let mut out = [0.0; 3];
        let mut add = |c: [f64; 4], alpha: f64, beta: f64| {
            let m = truncated_moments(alpha, beta, s);
            out[0] += c[0] * m[0] + c[1] * m[1] + c[2] * m[2] + c[3] * m[3];
            out[1] += c[1] * m[0] + 2.0 * c[2] * m[1] + 3.0 * c[3] * m[2];
            out[2] += 2.0 * c[2] * m[0] + 6.0 * c[3] * m[1];
        };
        // Affine tails, expressed as polynomials in z = y − x.
        let za = self.first() - x;
        if za > -reach {
            let c0 = self.values[0] - self.tail_lo * za;
            add([c0, self.tail_lo, 0.0, 0.0], f64::NEG_INFINITY, za.min(reach));
        }
        let zb = self.last() - x;
        if zb < reach {
            let c0 = self.values[n - 1] - self.tail_hi * zb;
            add([c0, self.tail_hi, 0.0, 0.0], zb.max(-reach), f64::INFINITY);
        }
        let lo = self.knots.partition_point(|&k| k <= x - reach).saturating_sub(1);
        let hi = self.knots.partition_point(|&k| k < x + reach).min(n - 1);
        for i in lo..hi {
            let (x0, a0, a1, a2, a3) = self.poly(i);
            let h = self.knots[i + 1] - x0;
            // Shift the cubic from u = y − x0 to z = y − x.
            let z0 = x0 - x;
            let c = [
                a0 - z0 * (a1 - z0 * (a2 - z0 * a3)),
                a1 - z0 * (2.0 * a2 - 3.0 * z0 * a3),
                a2 - 3.0 * a3 * z0,
                a3,
            ];
            add(c, z0.max(-reach), (z0 + h).min(reach));
        }
        out
    }

    fn swapped(&self) -> Table {
        Table {
            knots: self.values.clone(),
            values: self.knots.clone(),
            derivs: self.derivs.iter().map(|d| 1.0 / d).collect(),
            tail_lo: 1.0 / self.tail_lo,
            tail_hi: 1.0 / self.tail_hi,
        }
    }

    /// Exact extrema of the interpolant's derivative (piecewise quadratic) and tails.
    fn exact_bounds(&self) -> (f64, f64) {
        let mut lo = self.tail_lo.min(self.tail_hi);
        let mut hi = self.tail_lo.max(self.tail_hi);
        for i in 0..self.knots.len() - 1 {
            let (_, h, y0, y1, d0, d1) = self.coeffs(i);
            lo = lo.min(d0).min(d1);
            hi = hi.max(d0).max(d1);
            let a = 6.0 * (y0 - y1) / h + 3.0 * d0 + 3.0 * d1;
            let b = -6.0 * (y0 - y1) / h - 4.0 * d0 - 2.0 * d1;
            if a != 0.0 {
                let s = -b / (2.0 * a);
                if s > 0.0 && s < 1.0 {
                    let v = a * s * s + b * s + d0;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }

    /// Fritsch–Carlson limiter: scales slope pairs back into the monotone disc.
    fn limit(&mut self) {
        for i in 0..self.knots.len() - 1 {
            let delta = (self.values[i + 1] - self.values[i]) / (self.knots[i + 1] - self.knots[i]);
            let alpha = self.derivs[i] / delta;
            let beta = self.derivs[i + 1] / delta;
            let r2 = alpha * alpha + beta * beta;
            if r2 > 9.0 {
                let tau = 3.0 / r2.sqrt();
                self.derivs[i] = tau * alpha * delta;
                self.derivs[i + 1] = tau * beta * delta;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Table,
    /// Exact inverse of the contained forward table.
    Inverse(Arc<Table>),
    /// `outer ∘ inner`, with the inner range clamped to `clamp` before the outer call.
    Composite { outer: Box<MonotoneMap>, inner: Box<MonotoneMap>, clamp: Interval },
}

/// Strictly increasing C¹ map with derivative bounded between two positive constants.
#[derive(Debug, Clone)]
pub struct MonotoneMap {
    domain: Interval,
    view: Arc<Table>,
    repr: Repr,
    deriv_bounds: (f64, f64),
    clamped: bool,
}

/// Result of scanning a map's derivative over a probe grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassGReport {
    pub d_min: f64,
    pub d_max: f64,
    pub pass: bool,
}

impl MonotoneMap {
    /// Builds a map from an explicit Hermite table. Tail slopes default to the end derivatives.
    pub fn from_table(
        domain: Interval,
        knots: Vec<f64>,
        values: Vec<f64>,
        derivs: Vec<f64>,
        tails: Option<(f64, f64)>,
    ) -> Result<Self> {
        let (tail_lo, tail_hi) = tails.unwrap_or_else(|| {
            (derivs.first().copied().unwrap_or(1.0), derivs.last().copied().unwrap_or(1.0))
        });
        let table = Table { knots, values, derivs, tail_lo, tail_hi };
        table.validate()?;
        Self::from_validated(domain, table)
    }

    fn from_validated(domain: Interval, table: Table) -> Result<Self> {
        if !domain.contains(table.first()) || !domain.contains(table.last()) {
            return Err(Error::invalid(format!(
                "knots [{}, {}] fall outside the domain [{}, {}]",
                table.first(),
                table.last(),
                domain.lo,
                domain.hi
            )));
        }
        let deriv_bounds = table.exact_bounds();
        if !(deriv_bounds.0 > 0.0) {
            return Err(Error::invalid("interpolant derivative is not bounded away from zero"));
        }
        Ok(Self { domain, view: Arc::new(table), repr: Repr::Table, deriv_bounds, clamped: false })
    }

    /// Tabulates `f` with exact slopes `df` at the given knots.
    pub fn from_fn(
        domain: Interval,
        knots: &[f64],
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let values: Vec<f64> = knots.iter().map(|&x| f(x)).collect();
        let derivs: Vec<f64> = knots.iter().map(|&x| df(x)).collect();
        let mut table = Table {
            knots: knots.to_vec(),
            tail_lo: derivs.first().copied().unwrap_or(1.0),
            tail_hi: derivs.last().copied().unwrap_or(1.0),
            values,
            derivs,
        };
        table.validate()?;
        table.limit();
        Self::from_validated(domain, table)
    }

    /// Tabulates `f` on `n` uniform knots over `[lo, hi]`.
    pub fn tabulate(
        domain: Interval,
        lo: f64,
        hi: f64,
        n: usize,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        Self::from_fn(domain, &uniform(lo, hi, n), f, df)
    }

    /// Interpolates samples with Fritsch–Carlson slopes (harmonic-mean interior estimates).
    pub fn from_points(domain: Interval, knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = knots.len();
        if n < 2 || values.len() != n {
            return Err(Error::invalid("need at least two samples with matching lengths"));
        }
        let mut secants = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let h = knots[i + 1] - knots[i];
            if !(h > 0.0) {
                return Err(Error::invalid(format!("knots not strictly ascending at index {i}")));
            }
            let dy = values[i + 1] - values[i];
            if !(dy > 0.0) {
                return Err(Error::NotMonotone { index: i, left: values[i], right: values[i + 1] });
            }
            secants.push(dy / h);
        }
        let mut derivs = vec![0.0; n];
        if n == 2 {
            derivs[0] = secants[0];
            derivs[1] = secants[0];
        } else {
            for i in 1..n - 1 {
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                let w0 = 2.0 * h1 + h0;
                let w1 = h1 + 2.0 * h0;
                derivs[i] = (w0 + w1) / (w0 / secants[i - 1] + w1 / secants[i]);
            }
            derivs[0] = end_slope(knots[1] - knots[0], knots[2] - knots[1], secants[0], secants[1]);
            derivs[n - 1] = end_slope(
                knots[n - 1] - knots[n - 2],
                knots[n - 2] - knots[n - 3],
                secants[n - 2],
                secants[n - 3],
            );
        }
        let mut table = Table {
            tail_lo: derivs[0],
            tail_hi: derivs[n - 1],
            knots,
            values,
            derivs,
        };
        table.limit();
        table.tail_lo = table.derivs[0];
        table.tail_hi = table.derivs[n - 1];
        table.validate()?;
        Self::from_validated(domain, table)
    }

    pub fn identity() -> Self {
        Self::affine(1.0, 0.0).expect("identity is a valid affine map")
    }

    /// `x ↦ slope·x + intercept` on the real line.
    pub fn affine(slope: f64, intercept: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::invalid(format!("affine slope must be positive, got {slope}")));
        }
        Self::from_table(
            Interval::real_line(),
            vec![0.0, 1.0],
            vec![intercept, intercept + slope],
            vec![slope, slope],
            None,
        )
    }

    pub fn domain(&self) -> Interval {
        self.domain
    }

    pub fn knots(&self) -> &[f64] {
        &self.view.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.view.values
    }

    pub fn derivs(&self) -> &[f64] {
        &self.view.derivs
    }

    pub fn tail_slopes(&self) -> (f64, f64) {
        (self.view.tail_lo, self.view.tail_hi)
    }

    pub fn deriv_bounds(&self) -> (f64, f64) {
        self.deriv_bounds
    }

    /// True when a composition had to clamp the inner range onto the outer domain.
    pub fn clamped(&self) -> bool {
        self.clamped
    }

    /// Range of the tabulated knots.
    pub fn tabulated_range(&self) -> (f64, f64) {
        (self.view.first(), self.view.last())
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        self.domain.check("evaluate", x)?;
        Ok(self.eval(x))
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        self.domain.check("derivative", x)?;
        Ok(self.deriv(x))
    }

    /// Evaluation without the domain check; affine tails extend past the domain.
    pub fn eval(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Table => self.view.eval(x),
            Repr::Inverse(fwd) => fwd.solve(x),
            Repr::Composite { outer, inner, clamp } => outer.eval(clamp.clamp(inner.eval(x))),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Table => self.view.deriv(x),
            Repr::Inverse(fwd) => 1.0 / fwd.deriv(fwd.solve(x)),
            Repr::Composite { outer, inner, clamp } => {
                outer.deriv(clamp.clamp(inner.eval(x))) * inner.deriv(x)
            }
        }
    }

    /// Second derivative of the interpolant (piecewise linear, zero in the tails).
    pub fn second_deriv(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Table => self.view.second(x),
            Repr::Inverse(fwd) => {
                let z = fwd.solve(x);
                let d = fwd.deriv(z);
                -fwd.second(z) / (d * d * d)
            }
            Repr::Composite { outer, inner, clamp } => {
                let z = clamp.clamp(inner.eval(x));
                let d = inner.deriv(x);
                outer.second_deriv(z) * d * d + outer.deriv(z) * inner.second_deriv(x)
            }
        }
    }

    /// Image of the domain.
    pub fn range(&self) -> Interval {
        let lo = if self.domain.lo.is_finite() { self.eval(self.domain.lo) } else { f64::NEG_INFINITY };
        let hi = if self.domain.hi.is_finite() { self.eval(self.domain.hi) } else { f64::INFINITY };
        Interval { lo, hi }
    }

    /// Spatial inverse: swaps knots and values and evaluates by bracketed root refinement.
    pub fn invert(&self) -> Result<MonotoneMap> {
        let domain = self.range();
        let deriv_bounds = (1.0 / self.deriv_bounds.1, 1.0 / self.deriv_bounds.0);
        let out = match &self.repr {
            Repr::Table => MonotoneMap {
                domain,
                view: Arc::new(self.view.swapped()),
                repr: Repr::Inverse(self.view.clone()),
                deriv_bounds,
                clamped: false,
            },
            Repr::Inverse(fwd) => MonotoneMap {
                domain,
                view: fwd.clone(),
                repr: Repr::Table,
                deriv_bounds,
                clamped: false,
            },
            Repr::Composite { outer, inner, .. } => inner.invert()?.compose(&outer.invert()?)?,
        };
        Ok(out)
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &MonotoneMap) -> Result<MonotoneMap> {
        let range = inner.range();
        let tol = CLAMP_TOL * self.domain.scale().max(1.0);
        let below = if self.domain.lo == f64::NEG_INFINITY { 0.0 } else { self.domain.lo - range.lo };
        let above = if self.domain.hi == f64::INFINITY { 0.0 } else { range.hi - self.domain.hi };
        let excess = below.max(above);
        if excess.is_nan() || excess > tol {
            return Err(Error::invalid(format!(
                "range [{}, {}] of the inner map is not contained in the domain [{}, {}]",
                range.lo, range.hi, self.domain.lo, self.domain.hi
            )));
        }
        let clamped = excess > 0.0;
        let knots = inner.knots().to_vec();
        let values: Vec<f64> = knots.iter().map(|&x| self.eval(self.domain.clamp(inner.eval(x)))).collect();
        let derivs: Vec<f64> = knots
            .iter()
            .map(|&x| self.deriv(self.domain.clamp(inner.eval(x))) * inner.deriv(x))
            .collect();
        let (tlo, thi) = inner.tail_slopes();
        let (olo, ohi) = self.tail_slopes();
        let view = Table { knots, values, derivs, tail_lo: tlo * olo, tail_hi: thi * ohi };
        Ok(MonotoneMap {
            domain: inner.domain,
            view: Arc::new(view),
            repr: Repr::Composite {
                outer: Box::new(self.clone()),
                inner: Box::new(inner.clone()),
                clamp: self.domain,
            },
            deriv_bounds: (
                self.deriv_bounds.0 * inner.deriv_bounds.0,
                self.deriv_bounds.1 * inner.deriv_bounds.1,
            ),
            clamped: clamped || self.clamped || inner.clamped,
        })
    }

    /// Scans the derivative over 1000 probes covering the table and a tenth of its span on each side.
    pub fn check_class_g(&self) -> ClassGReport {
        let (a, b) = self.tabulated_range();
        let pad = 0.1 * (b - a);
        let lo = (a - pad).max(self.domain.lo);
        let hi = (b + pad).min(self.domain.hi);
        let mut d_min = f64::INFINITY;
        let mut d_max = f64::NEG_INFINITY;
        for x in uniform(lo, hi, 1000) {
            let d = self.deriv(x);
            d_min = d_min.min(d);
            d_max = d_max.max(d);
        }
        let (dl, dh) = self.deriv_bounds;
        let pass = d_min > 0.0 && d_min >= dl * (1.0 - 0.01) && d_max <= dh * (1.0 + 0.01);
        ClassGReport { d_min, d_max, pass }
    }

    /// Exact Gaussian smoothing `E[f(x + √s·Z)]` of a plain tabulated map, with its first and
    /// second x-derivatives. Returns `None` for inverses and compositions, whose interpolants are
    /// not piecewise cubic in their own variable.
    pub fn gauss_smooth(&self, x: f64, s: f64) -> Option<[f64; 3]> {
        match self.repr {
            Repr::Table => Some(self.view.gauss_smooth(x, s)),
            _ => None,
        }
    }

    pub fn to_json(&self) -> MonotoneMapJson {
        MonotoneMapJson {
            domain: self.domain,
            knots: self.view.knots.clone(),
            values: self.view.values.clone(),
            derivs: self.view.derivs.clone(),
            deriv_bounds: [self.deriv_bounds.0, self.deriv_bounds.1],
            tail_slopes: Some([self.view.tail_lo, self.view.tail_hi]),
        }
    }

    /// Rebuilds a tabulated map. Inverses and compositions come back as their tabulated view.
    pub fn from_json(json: &MonotoneMapJson) -> Result<Self> {
        let map = Self::from_table(
            json.domain,
            json.knots.clone(),
            json.values.clone(),
            json.derivs.clone(),
            json.tail_slopes.map(|[a, b]| (a, b)),
        )?;
        let [dl, dh] = json.deriv_bounds;
        if !(dl > 0.0 && dl <= dh) {
            return Err(Error::invalid(format!("invalid deriv_bounds ({dl}, {dh})")));
        }
        if let Some(i) = map.derivs().iter().position(|&d| d < dl || d > dh) {
            return Err(Error::invalid(format!("derivative at knot {i} outside declared deriv_bounds")));
        }
        Ok(Self { deriv_bounds: (dl, dh), ..map })
    }
}

impl Serialize for MonotoneMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MonotoneMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let json = MonotoneMapJson::deserialize(d)?;
        MonotoneMap::from_json(&json).map_err(serde::de::Error::custom)
    }
}

/// Wire format of a [`MonotoneMap`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneMapJson {
    pub domain: Interval,
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
    pub deriv_bounds: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_slopes: Option<[f64; 2]>,
}

/// Gaussian mass beyond this many standard deviations is ignored by exact smoothing.
const GAUSS_REACH: f64 = 13.0;

/// `∫_α^β z^k φ_s(z) dz` for k = 0..3; either end may be infinite.
fn truncated_moments(alpha: f64, beta: f64, s: f64) -> [f64; 4] {
    if !(beta > alpha) {
        return [0.0; 4];
    }
    let sd = s.sqrt();
    let (a, b) = (alpha / sd, beta / sd);
    let m0 = if a > 0.0 {
        crate::normal::cdf(-a) - crate::normal::cdf(-b)
    } else {
        crate::normal::cdf(b) - crate::normal::cdf(a)
    };
    // Boundary terms z^k φ_s(z), zero at infinite ends.
    let g = |z: f64, k: i32| if z.is_finite() { z.powi(k) * crate::normal::pdf_var(z, s) } else { 0.0 };
    let m1 = -s * (g(beta, 0) - g(alpha, 0));
    let m2 = s * m0 - s * (g(beta, 1) - g(alpha, 1));
    let m3 = 2.0 * s * m1 - s * (g(beta, 2) - g(alpha, 2));
    [m0, m1, m2, m3]
}

fn end_slope(h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
    if d <= 0.0 {
        0.5 * s0
    } else if d > 3.0 * s0 {
        3.0 * s0
    } else {
        d
    }
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn uniform(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| if i == n - 1 { hi } else { lo + h * i as f64 }).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn wavy(amp: f64) -> MonotoneMap {
        MonotoneMap::tabulate(
            Interval::real_line(),
            -10.0,
            10.0,
            DEFAULT_KNOTS,
            |x| x + amp * x.sin(),
            |x| 1.0 + amp * x.cos(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_affine_evaluate_exactly() {
        let id = MonotoneMap::identity();
        assert_eq!(id.evaluate(0.7).unwrap(), 0.7);
        assert_eq!(id.derivative(123.0).unwrap(), 1.0);
        let f = MonotoneMap::affine(2.0, 1.0).unwrap();
        assert!((f.evaluate(3.0).unwrap() - 7.0).abs() < 1e-15);
        assert_eq!(f.derivative(-50.0).unwrap(), 2.0);
        assert_eq!(f.derivative(0.3).unwrap(), 2.0);
    }

    #[test]
    fn wavy_map_matches_closed_form() {
        let f = wavy(0.5);
        let x = FRAC_PI_2;
        assert!((f.evaluate(x).unwrap() - (FRAC_PI_2 + 0.5)).abs() < 1e-8);
        assert!((f.derivative(0.0).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn inverse_of_affine_is_affine() {
        let g = MonotoneMap::affine(2.0, 1.0).unwrap().invert().unwrap();
        for y in [-5.0, 0.0, 1.0, 2.5, 40.0] {
            assert!((g.eval(y) - (y - 1.0) / 2.0).abs() < 1e-14);
            assert!((g.deriv(y) - 0.5).abs() < 1e-14);
        }
        let id = MonotoneMap::identity().invert().unwrap();
        assert!((id.eval(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn inverse_round_trip_on_wavy_map() {
        let f = wavy(0.5);
        let g = f.invert().unwrap();
        let worst = uniform(-10.0, 10.0, 1000)
            .into_iter()
            .map(|x| (g.eval(f.eval(x)) - x).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-10, "round trip error {worst}");
        assert_eq!(g.deriv_bounds().0, 1.0 / f.deriv_bounds().1);
    }

    #[test]
    fn inverse_derivative_is_reciprocal() {
        let f = wavy(0.4);
        let g = f.invert().unwrap();
        for x in uniform(-9.0, 9.0, 333) {
            let prod = g.deriv(f.eval(x)) * f.deriv(x);
            assert!((prod - 1.0).abs() < 1e-6, "at {x}: {prod}");
        }
    }

    #[test]
    fn composition_of_affines() {
        let f = MonotoneMap::affine(2.0, 1.0).unwrap();
        let g = MonotoneMap::affine(3.0, 0.0).unwrap();
        let h = f.compose(&g).unwrap();
        for x in [-2.0, 0.0, 0.5, 7.0] {
            assert!((h.eval(x) - (6.0 * x + 1.0)).abs() < 1e-13);
        }
        assert_eq!(h.deriv_bounds(), (6.0, 6.0));
        let id = MonotoneMap::identity().compose(&wavy(0.3)).unwrap();
        for x in uniform(-3.0, 3.0, 50) {
            assert_eq!(id.eval(x), wavy(0.3).eval(x));
        }
    }

    #[test]
    fn affine_gamma_inverse_composed_with_payoff() {
        // Γ(x) = (x − B)/A, so Γ⁻¹∘v = A·v + B.
        let (a, b) = (2.0, 1.0);
        let gamma = MonotoneMap::affine(1.0 / a, -b / a).unwrap();
        let v = wavy(0.4);
        let vt = gamma.invert().unwrap().compose(&v).unwrap();
        for x in uniform(-8.0, 8.0, 101) {
            let want = a * (x + 0.4 * x.sin()) + b;
            assert!((vt.eval(x) - want).abs() < 1e-7, "at {x}");
        }
    }

    #[test]
    fn inverse_composed_with_map_is_identity() {
        let f = wavy(0.5);
        let id = f.invert().unwrap().compose(&f).unwrap();
        for x in uniform(-10.0, 10.0, 1000) {
            assert!((id.eval(x) - x).abs() < 1e-8);
        }
    }

    #[test]
    fn inverse_of_composite_round_trips() {
        let f = wavy(0.3).compose(&MonotoneMap::affine(0.5, 0.2).unwrap()).unwrap();
        let g = f.invert().unwrap();
        for x in uniform(-15.0, 15.0, 200) {
            assert!((g.eval(f.eval(x)) - x).abs() < 1e-10);
        }
    }

    #[test]
    fn class_g_reports() {
        let r = MonotoneMap::identity().check_class_g();
        assert_eq!((r.d_min, r.d_max, r.pass), (1.0, 1.0, true));
        let r = wavy(0.5).check_class_g();
        assert!(r.pass);
        assert!((r.d_min - 0.5).abs() < 1e-3, "{r:?}");
        assert!((r.d_max - 1.5).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn rejects_non_monotone_tables() {
        let err = MonotoneMap::from_points(Interval::real_line(), vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0]);
        assert!(matches!(err, Err(Error::NotMonotone { index: 1, .. })));
        let flat = MonotoneMap::from_table(
            Interval::real_line(),
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            None,
        );
        assert!(flat.is_err());
        // A tiny violation is rejected rather than repaired.
        let tiny = MonotoneMap::from_points(Interval::real_line(), vec![0.0, 1.0], vec![1.0, 1.0 - 1e-15]);
        assert!(tiny.is_err());
    }

    #[test]
    fn domain_violations_are_errors() {
        let f = MonotoneMap::tabulate(Interval::unit(), 0.1, 0.9, 9, |x| x * x + x, |x| 2.0 * x + 1.0)
            .unwrap();
        assert!(f.evaluate(0.95).is_ok());
        assert!(matches!(f.evaluate(1.5), Err(Error::Domain { .. })));
        assert!(f.derivative(-0.1).is_err());
    }

    #[test]
    fn compose_rejects_range_mismatch() {
        let outer = MonotoneMap::tabulate(Interval::unit(), 0.0, 1.0, 5, |x| x, |_| 1.0).unwrap();
        assert!(outer.compose(&MonotoneMap::identity()).is_err());
    }

    #[test]
    fn json_round_trip_preserves_evaluation() {
        let f = wavy(0.2);
        let text = serde_json::to_string(&f).unwrap();
        let g: MonotoneMap = serde_json::from_str(&text).unwrap();
        for x in uniform(-12.0, 12.0, 77) {
            assert_eq!(f.eval(x), g.eval(x));
        }
        assert!(text.contains("\"domain\":{\"lo\":null,\"hi\":null}"));
    }

    #[test]
    fn from_points_is_monotone_and_c1() {
        let xs = uniform(0.0, 4.0, 40);
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let f = MonotoneMap::from_points(Interval::real_line(), xs.clone(), ys).unwrap();
        let mut prev = f.eval(-1.0);
        for x in uniform(-1.0, 5.0, 3000).into_iter().skip(1) {
            let y = f.eval(x);
            assert!(y > prev);
            prev = y;
        }
        for &k in &xs[1..xs.len() - 1] {
            let l = f.deriv(k - 1e-12);
            let r = f.deriv(k + 1e-12);
            assert!((l - r).abs() < 1e-6 * l.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn round_trip_holds_for_random_tables(
            steps in prop::collection::vec(0.01f64..2.0, 3..40),
            gaps in prop::collection::vec(0.01f64..2.0, 3..40),
        ) {
            let n = steps.len().min(gaps.len());
            let mut xs = vec![0.0];
            let mut ys = vec![0.0];
            for i in 0..n {
                xs.push(xs[i] + steps[i]);
                ys.push(ys[i] + gaps[i]);
            }
            let f = MonotoneMap::from_points(Interval::real_line(), xs.clone(), ys).unwrap();
            let g = f.invert().unwrap();
            let (a, b) = (xs[0], xs[xs.len() - 1]);
            let width = b - a;
            for x in uniform(a - 1.0, b + 1.0, 1000) {
                prop_assert!((g.eval(f.eval(x)) - x).abs() <= 1e-8 * width.max(1.0));
            }
            let (dl, dh) = f.deriv_bounds();
            for x in uniform(a, b, 200) {
                let d = f.deriv(x);
                prop_assert!(d >= dl * (1.0 - 1e-12) && d <= dh * (1.0 + 1e-12));
            }
        }
    }
}
