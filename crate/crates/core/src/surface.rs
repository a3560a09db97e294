//! Space-time grids and tabulated surfaces.
//!
//! A [`SolutionSurface`] stores node values and spatial slopes on a tensor grid.
//! Each time slice is a cubic Hermite interpolant in `x` (affine beyond the grid),
//! and slices are blended linearly in `t`.

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::monotone_fn::{uniform, Interval, MonotoneMap};

const MAGIC: &[u8; 4] = b"MSRF";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceTimeGrid {
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
}

impl SpaceTimeGrid {
    pub fn new(t_nodes: Vec<f64>, x_nodes: Vec<f64>) -> Result<Self> {
        if t_nodes.len() < 3 || x_nodes.len() < 3 {
            return Err(Error::invalid("a grid needs at least 3 nodes per axis"));
        }
        for (name, v) in [("t", &t_nodes), ("x", &x_nodes)] {
            if v.windows(2).any(|w| !(w[1] > w[0])) || v.iter().any(|z| !z.is_finite()) {
                return Err(Error::invalid(format!("{name} nodes must be finite and strictly ascending")));
            }
        }
        if t_nodes[0] < 0.0 {
            return Err(Error::invalid("time nodes must be non-negative"));
        }
        Ok(Self { t_nodes, x_nodes })
    }

    /// Uniform grid with `nt` time nodes on `[0, T]` and `nx` space nodes on `[x_lo, x_hi]`.
    pub fn uniform(horizon: f64, nt: usize, x_lo: f64, x_hi: f64, nx: usize) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        Self::new(uniform(0.0, horizon, nt), uniform(x_lo, x_hi, nx))
    }

    pub fn horizon(&self) -> f64 {
        self.t_nodes[self.t_nodes.len() - 1]
    }

    pub fn nt(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn nx(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x_nodes[0], self.x_nodes[self.nx() - 1])
    }

    /// Index `k` and weight `w` with `t = (1 − w)·t_k + w·t_{k+1}`; times outside are clamped.
    pub fn locate_t(&self, t: f64) -> (usize, f64) {
        let n = self.nt();
        if t <= self.t_nodes[0] {
            return (0, 0.0);
        }
        if t >= self.t_nodes[n - 1] {
            return (n - 2, 1.0);
        }
        let k = self.t_nodes.partition_point(|&s| s <= t).saturating_sub(1).min(n - 2);
        (k, (t - self.t_nodes[k]) / (self.t_nodes[k + 1] - self.t_nodes[k]))
    }

    fn locate_x(&self, x: f64) -> usize {
        self.x_nodes.partition_point(|&s| s <= x).saturating_sub(1).min(self.nx() - 2)
    }

    /// True when the spacing is uniform up to rounding.
    pub fn x_uniform(&self) -> bool {
        let (a, b) = self.x_range();
        let h = (b - a) / (self.nx() - 1) as f64;
        self.x_nodes.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h)
    }
}

/// Scalar function tabulated on a [`SpaceTimeGrid`].
#[derive(Debug, Clone)]
pub struct SolutionSurface {
    grid: SpaceTimeGrid,
    values: Vec<f64>,
    slopes: Vec<f64>,
    monotone_in_x: bool,
}

impl SolutionSurface {
    /// Builds a surface from row-major values (`nt × nx`), estimating x-slopes by finite differences.
    pub fn from_values(grid: SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        let (nt, nx) = (grid.nt(), grid.nx());
        if values.len() != nt * nx {
            return Err(Error::invalid(format!("expected {} values, got {}", nt * nx, values.len())));
        }
        let mut slopes = vec![0.0; nt * nx];
        for k in 0..nt {
            fd_slopes(&grid.x_nodes, &values[k * nx..(k + 1) * nx], &mut slopes[k * nx..(k + 1) * nx]);
        }
        Ok(Self::assemble(grid, values, slopes))
    }

    /// Builds a surface from row-major values and exact x-slopes.
    pub fn from_values_and_slopes(grid: SpaceTimeGrid, values: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        let n = grid.nt() * grid.nx();
        if values.len() != n || slopes.len() != n {
            return Err(Error::invalid(format!("expected {n} values and slopes")));
        }
        Ok(Self::assemble(grid, values, slopes))
    }

    /// Tabulates `f(t, x)` and `f_x(t, x)` on the grid.
    pub fn tabulate(
        grid: SpaceTimeGrid,
        f: impl Fn(f64, f64) -> f64,
        fx: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.nt() * grid.nx());
        let mut slopes = Vec::with_capacity(grid.nt() * grid.nx());
        for &t in &grid.t_nodes {
            for &x in &grid.x_nodes {
                values.push(f(t, x));
                slopes.push(fx(t, x));
            }
        }
        Self::from_values_and_slopes(grid, values, slopes)
    }

    fn assemble(grid: SpaceTimeGrid, values: Vec<f64>, slopes: Vec<f64>) -> Self {
        let nx = grid.nx();
        let monotone_in_x = values.chunks(nx).zip(slopes.chunks(nx)).all(|(row, d)| {
            row.windows(2).all(|w| w[1] > w[0]) && d.iter().all(|&s| s > 0.0 && s.is_finite())
        });
        Self { grid, values, slopes, monotone_in_x }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn monotone_in_x(&self) -> bool {
        self.monotone_in_x
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.values[k * nx..(k + 1) * nx]
    }

    pub fn slope_row(&self, k: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.slopes[k * nx..(k + 1) * nx]
    }

    pub fn node(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.grid.nx() + j]
    }

    /// Value, x-derivative and second x-derivative of slice `k` at `x`.
    pub fn slice_eval(&self, k: usize, x: f64) -> [f64; 3] {
        let xs = &self.grid.x_nodes;
        let (v, d) = (self.row(k), self.slope_row(k));
        let n = xs.len();
        if x < xs[0] {
            return [v[0] + d[0] * (x - xs[0]), d[0], 0.0];
        }
        if x > xs[n - 1] {
            return [v[n - 1] + d[n - 1] * (x - xs[n - 1]), d[n - 1], 0.0];
        }
        let j = self.grid.locate_x(x);
        let h = xs[j + 1] - xs[j];
        let c2 = (3.0 * (v[j + 1] - v[j]) / h - 2.0 * d[j] - d[j + 1]) / h;
        let c3 = (2.0 * (v[j] - v[j + 1]) / h + d[j] + d[j + 1]) / (h * h);
        let u = x - xs[j];
        [
            v[j] + u * (d[j] + u * (c2 + u * c3)),
            d[j] + u * (2.0 * c2 + 3.0 * u * c3),
            2.0 * c2 + 6.0 * c3 * u,
        ]
    }

    /// Value and x-derivatives at an arbitrary `(t, x)`.
    pub fn eval_all(&self, t: f64, x: f64) -> [f64; 3] {
        let (k, w) = self.grid.locate_t(t);
        let a = self.slice_eval(k, x);
        if w == 0.0 {
            return a;
        }
        let b = self.slice_eval(k + 1, x);
        if w == 1.0 {
            return b;
        }
        [0, 1, 2].map(|i| (1.0 - w) * a[i] + w * b[i])
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        self.eval_all(t, x)[0]
    }

    pub fn dx(&self, t: f64, x: f64) -> f64 {
        self.eval_all(t, x)[1]
    }

    pub fn dxx(&self, t: f64, x: f64) -> f64 {
        self.eval_all(t, x)[2]
    }

    /// Time derivative of the piecewise-linear time interpolation.
    pub fn dt(&self, t: f64, x: f64) -> f64 {
        let (k, _) = self.grid.locate_t(t);
        let g = &self.grid.t_nodes;
        (self.slice_eval(k + 1, x)[0] - self.slice_eval(k, x)[0]) / (g[k + 1] - g[k])
    }

    /// Solves `eval(t, x) = y` for `x`; requires monotone slices.
    pub fn solve_x(&self, t: f64, y: f64) -> Result<f64> {
        if !self.monotone_in_x {
            return Err(Error::invalid("surface slices are not monotone"));
        }
        let (k, w) = self.grid.locate_t(t);
        let xs = &self.grid.x_nodes;
        let n = xs.len();
        let blend = |j: usize| (1.0 - w) * self.node(k, j) + w * self.node(k + 1, j);
        let eval = |x: f64| {
            let a = self.slice_eval(k, x);
            let b = self.slice_eval(k + 1, x);
            ((1.0 - w) * a[0] + w * b[0], (1.0 - w) * a[1] + w * b[1])
        };
        let (y0, yn) = (blend(0), blend(n - 1));
        if y <= y0 || y >= yn {
            // Affine extrapolation region.
            let (x_end, y_end) = if y <= y0 { (xs[0], y0) } else { (xs[n - 1], yn) };
            let slope = eval(x_end).1;
            return Ok(x_end + (y - y_end) / slope);
        }
        let (mut lo, mut hi) = (0, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if blend(mid) <= y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (mut a, mut b) = (xs[lo], xs[hi]);
        let (ya, yb) = (blend(lo), blend(hi));
        let mut x = a + (b - a) * (y - ya) / (yb - ya);
        for _ in 0..100 {
            let (f, df) = eval(x);
            let r = f - y;
            if r == 0.0 {
                break;
            }
            if r > 0.0 {
                b = x;
            } else {
                a = x;
            }
            let mut next = x - r / df;
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            let step = (next - x).abs();
            x = next;
            if step <= 1e-15 * (1.0 + x.abs()) || b - a <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        Ok(x)
    }

    /// Time slice `k` as a [`MonotoneMap`] on the given domain.
    pub fn slice_map(&self, k: usize, domain: Interval) -> Result<MonotoneMap> {
        MonotoneMap::from_table(
            domain,
            self.grid.x_nodes.clone(),
            self.row(k).to_vec(),
            self.slope_row(k).to_vec(),
            None,
        )
    }

    /// Largest absolute node difference against another surface on the same grid,
    /// restricted to x nodes inside `region`.
    pub fn max_node_diff(&self, other: &SolutionSurface, region: Option<(f64, f64)>) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::invalid("surfaces live on different grids"));
        }
        Ok(self.max_node_error(|k, j| other.node(k, j), region))
    }

    /// Largest absolute node error against `exact(k, j)`, restricted to x nodes inside `region`.
    pub fn max_node_error(&self, exact: impl Fn(usize, usize) -> f64, region: Option<(f64, f64)>) -> f64 {
        let (lo, hi) = region.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let mut worst: f64 = 0.0;
        for k in 0..self.grid.nt() {
            for (j, &x) in self.grid.x_nodes.iter().enumerate() {
                if x >= lo && x <= hi {
                    worst = worst.max((self.node(k, j) - exact(k, j)).abs());
                }
            }
        }
        worst
    }

    /// Writes `t,x,value` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,x,value")?;
        for (k, &t) in self.grid.t_nodes.iter().enumerate() {
            for (j, &x) in self.grid.x_nodes.iter().enumerate() {
                writeln!(w, "{t},{x},{}", self.node(k, j))?;
            }
        }
        Ok(())
    }

    /// Compact binary dump: magic, version, dimensions, flags, then little-endian f64 arrays
    /// (t nodes, x nodes, values, slopes).
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.nt() as u32).to_le_bytes())?;
        w.write_all(&(self.grid.nx() as u32).to_le_bytes())?;
        w.write_all(&u32::from(self.monotone_in_x).to_le_bytes())?;
        for v in [&self.grid.t_nodes, &self.grid.x_nodes, &self.values, &self.slopes] {
            for z in v.iter() {
                w.write_all(&z.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a surface dump (bad magic bytes)"));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported surface format version {version}")));
        }
        let nt = word()? as usize;
        let nx = word()? as usize;
        let _flags = word()?;
        let mut floats = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
        };
        let t_nodes = floats(nt)?;
        let x_nodes = floats(nx)?;
        let values = floats(nt * nx)?;
        let slopes = floats(nt * nx)?;
        Self::from_values_and_slopes(SpaceTimeGrid::new(t_nodes, x_nodes)?, values, slopes)
    }
}

/// Finite-difference slopes: fourth order on uniform grids, second order otherwise.
pub fn fd_slopes(x: &[f64], v: &[f64], out: &mut [f64]) {
    let n = x.len();
    let h = (x[n - 1] - x[0]) / (n - 1) as f64;
    let uniform = x.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h);
    if uniform && n >= 5 {
        out[0] = (-25.0 * v[0] + 48.0 * v[1] - 36.0 * v[2] + 16.0 * v[3] - 3.0 * v[4]) / (12.0 * h);
        out[1] = (-3.0 * v[0] - 10.0 * v[1] + 18.0 * v[2] - 6.0 * v[3] + v[4]) / (12.0 * h);
        for j in 2..n - 2 {
            out[j] = (v[j - 2] - 8.0 * v[j - 1] + 8.0 * v[j + 1] - v[j + 2]) / (12.0 * h);
        }
        out[n - 2] = (3.0 * v[n - 1] + 10.0 * v[n - 2] - 18.0 * v[n - 3] + 6.0 * v[n - 4] - v[n - 5]) / (12.0 * h);
        out[n - 1] =
            (25.0 * v[n - 1] - 48.0 * v[n - 2] + 36.0 * v[n - 3] - 16.0 * v[n - 4] + 3.0 * v[n - 5]) / (12.0 * h);
        return;
    }
    for j in 0..n {
        let (a, b, c) = if j == 0 {
            (0, 1, 2)
        } else if j == n - 1 {
            (n - 3, n - 2, n - 1)
        } else {
            (j - 1, j, j + 1)
        };
        // Derivative of the quadratic through three points, evaluated at x[j].
        let (xa, xb, xc) = (x[a], x[b], x[c]);
        let z = x[j];
        let la = ((z - xb) + (z - xc)) / ((xa - xb) * (xa - xc));
        let lb = ((z - xa) + (z - xc)) / ((xb - xa) * (xb - xc));
        let lc = ((z - xa) + (z - xb)) / ((xc - xa) * (xc - xb));
        out[j] = la * v[a] + lb * v[b] + lc * v[c];
    }
}

/// Slice-wise spatial inverse. The new x-axis spans the y-range common to all slices,
/// with the same number of nodes; node values are exact slice inverses and slopes are `1/h_x`.
pub fn invert_surface(h: &SolutionSurface) -> Result<SolutionSurface> {
    if !h.monotone_in_x() {
        return Err(Error::invalid("cannot invert a surface whose slices are not monotone"));
    }
    let g = h.grid();
    let nx = g.nx();
    let lo = (0..g.nt()).map(|k| h.node(k, 0)).fold(f64::NEG_INFINITY, f64::max);
    let hi = (0..g.nt()).map(|k| h.node(k, nx - 1)).fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return Err(Error::invalid("slices share no common range"));
    }
    let ys = uniform(lo, hi, nx);
    let grid = SpaceTimeGrid::new(g.t_nodes.clone(), ys.clone())?;
    let mut values = Vec::with_capacity(g.nt() * nx);
    let mut slopes = Vec::with_capacity(g.nt() * nx);
    for &t in &g.t_nodes {
        for &y in &ys {
            let x = h.solve_x(t, y)?;
            values.push(x);
            slopes.push(1.0 / h.dx(t, x));
        }
    }
    SolutionSurface::from_values_and_slopes(grid, values, slopes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_surface(nx: usize) -> SolutionSurface {
        let grid = SpaceTimeGrid::uniform(1.0, 65, -8.0, 8.0, nx).unwrap();
        SolutionSurface::tabulate(
            grid,
            |t, x| x + 0.3 * (-(1.0 - t) / 2.0).exp() * x.sin(),
            |t, x| 1.0 + 0.3 * (-(1.0 - t) / 2.0).exp() * x.cos(),
        )
        .unwrap()
    }

    #[test]
    fn nodes_are_reproduced_exactly() {
        let s = gaussian_surface(129);
        let g = s.grid().clone();
        for k in [0, 10, 64] {
            for j in [0, 5, 128] {
                assert_eq!(s.eval(g.t_nodes[k], g.x_nodes[j]), s.node(k, j));
            }
        }
    }

    #[test]
    fn fourth_order_slopes_on_uniform_grid() {
        let x = uniform(0.0, 1.0, 41);
        let v: Vec<f64> = x.iter().map(|z| z.exp()).collect();
        let mut d = vec![0.0; 41];
        fd_slopes(&x, &v, &mut d);
        let worst = x.iter().zip(&d).map(|(z, s)| (s - z.exp()).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn identity_surface_inverts_to_identity() {
        let grid = SpaceTimeGrid::uniform(1.0, 5, -2.0, 2.0, 9).unwrap();
        let h = SolutionSurface::tabulate(grid, |_, x| x, |_, _| 1.0).unwrap();
        let u = invert_surface(&h).unwrap();
        for &y in &[-1.9, -0.3, 0.0, 1.7] {
            assert!((u.eval(0.4, y) - y).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_slices_invert_with_reciprocal_slope() {
        let grid = SpaceTimeGrid::uniform(1.0, 5, -2.0, 2.0, 9).unwrap();
        let h = SolutionSurface::tabulate(grid, |t, x| (1.0 + t) * x + t, |t, _| 1.0 + t).unwrap();
        let u = invert_surface(&h).unwrap();
        let t = 0.5;
        for &y in &[-1.0, 0.0, 0.9] {
            assert!((u.eval(t, y) - (y - t) / (1.0 + t)).abs() < 1e-13);
            assert!((u.dx(t, y) - 1.0 / (1.0 + t)).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_round_trip_through_inverse() {
        let h = gaussian_surface(513);
        let u = invert_surface(&h).unwrap();
        let mut worst: f64 = 0.0;
        // Probes at the slice times, where the inverse is defined slice by slice.
        for &t in h.grid().t_nodes.iter().take(64) {
            for j in 0..160 {
                let x = -7.0 + 14.0 * j as f64 / 159.0;
                worst = worst.max((u.eval(t, h.eval(t, x)) - x).abs());
            }
        }
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let s = gaussian_surface(17);
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MSRF");
        let back = SolutionSurface::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.values(), s.values());
        assert_eq!(back.grid(), s.grid());
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 65 * 17);
        assert!(SolutionSurface::read_binary(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(SpaceTimeGrid::new(vec![0.0, 1.0], vec![0.0, 1.0, 2.0]).is_err());
        assert!(SpaceTimeGrid::new(vec![0.0, 0.5, 0.5], vec![0.0, 1.0, 2.0]).is_err());
        assert!(SpaceTimeGrid::uniform(1.0, 3, 0.0, 1.0, 3).is_ok());
    }
}
