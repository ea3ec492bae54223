//! Quadrature for the nonlocal energies `A^h[T]` and `R^h[T]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::TriangulatedMap;
use crate::data::{BandwidthField, DensitySpec, Histogram};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::lattice::{lorentz_rectangle, pair_integral, PairKernel, PairOptions};
use crate::microstructure::CuttingMap;
use crate::quad::{integrate_with, trapezoid_weights, GaussLegendre, Tol};

/// Default nodes per axis.
pub const DEFAULT_NODES_1D: usize = 2048;
pub const DEFAULT_NODES_2D: usize = 256;
pub const MAX_TARGET_DIM: usize = 8;

/// Map sampled on a uniform grid over a box in `R^d`, `d ∈ {1, 2}`,
/// interpolated piecewise linearly (`d = 1`) or bilinearly (`d = 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub d: usize,
    pub m: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: usize,
    /// Node-major values; for `d = 2` the first axis is slowest.
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn from_fn<F: Fn(&[f64]) -> Vec<f64>>(domain: &[[f64; 2]], nodes: usize, m: usize, f: F) -> Result<Self> {
        let d = domain.len();
        if !(1..=2).contains(&d) {
            return Err(Error::Dimension(format!("grid maps need d ∈ {{1, 2}}, got {d}")));
        }
        if m == 0 || m > MAX_TARGET_DIM {
            return Err(Error::Dimension(format!("target dimension must lie in 1..={MAX_TARGET_DIM}, got {m}")));
        }
        if nodes < 2 || domain.iter().any(|b| !(b[1] > b[0])) {
            return Err(Error::Parameter("grid needs at least two nodes and positive spacing".into()));
        }
        let lo: Vec<f64> = domain.iter().map(|b| b[0]).collect();
        let hi: Vec<f64> = domain.iter().map(|b| b[1]).collect();
        let mut map = GridMap {
            d,
            m,
            lo,
            hi,
            nodes,
            values: Vec::with_capacity(nodes.pow(d as u32) * m),
        };
        let total = nodes.pow(d as u32);
        for idx in 0..total {
            let x = map.node_point(idx);
            let v = f(&x);
            if v.len() != m {
                return Err(Error::Dimension(format!("map returned {} values, expected {m}", v.len())));
            }
            if v.iter().any(|t| !t.is_finite()) {
                return Err(Error::Input("grid map values must be finite".into()));
            }
            map.values.extend(v);
        }
        Ok(map)
    }

    /// `T(x) = x` on the domain.
    pub fn identity(domain: &[[f64; 2]], nodes: usize) -> Result<Self> {
        Self::from_fn(domain, nodes, domain.len(), |x| x.to_vec())
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.nodes - 1 {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.spacing(axis)
        }
    }

    fn node_point(&self, idx: usize) -> Vec<f64> {
        match self.d {
            1 => vec![self.coord(0, idx)],
            _ => vec![self.coord(0, idx / self.nodes), self.coord(1, idx % self.nodes)],
        }
    }

    fn node_value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.m..(idx + 1) * self.m]
    }

    /// Interpolated value at `x` (clamped to the box).
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let locate = |axis: usize, v: f64| {
            let s = ((v - self.lo[axis]) / self.spacing(axis)).clamp(0.0, (self.nodes - 1) as f64);
            let i = (s.floor() as usize).min(self.nodes - 2);
            (i, s - i as f64)
        };
        match self.d {
            1 => {
                let (i, t) = locate(0, x[0]);
                let (a, b) = (self.node_value(i), self.node_value(i + 1));
                for r in 0..self.m {
                    out[r] = a[r] + t * (b[r] - a[r]);
                }
            }
            _ => {
                let (i, t) = locate(0, x[0]);
                let (j, u) = locate(1, x[1]);
                let n = self.nodes;
                let (a, b, c, e) = (
                    self.node_value(i * n + j),
                    self.node_value((i + 1) * n + j),
                    self.node_value(i * n + j + 1),
                    self.node_value((i + 1) * n + j + 1),
                );
                for r in 0..self.m {
                    out[r] = (1.0 - t) * (1.0 - u) * a[r] + t * (1.0 - u) * b[r] + (1.0 - t) * u * c[r] + t * u * e[r];
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.eval_into(x, &mut out);
        out
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= lambda);
        out
    }

    pub fn translated(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            *v += c[k % self.m];
        }
        out
    }

    /// The same map on the reflected domain, `x ↦ T(lo + hi − x)`.
    pub fn reflected(&self) -> Self {
        let mut out = self.clone();
        let n = self.nodes;
        for idx in 0..n.pow(self.d as u32) {
            let src = match self.d {
                1 => n - 1 - idx,
                _ => (n - 1 - idx / n) * n + (n - 1 - idx % n),
            };
            out.values[idx * self.m..(idx + 1) * self.m].copy_from_slice(self.node_value(src));
        }
        out
    }

    /// Same node values on the triangulated grid (`d = 2`).
    pub fn to_triangulated(&self) -> Result<TriangulatedMap> {
        if self.d != 2 {
            return Err(Error::Dimension("triangulation needs d = 2".into()));
        }
        Ok(TriangulatedMap {
            lo: [self.lo[0], self.lo[1]],
            hi: [self.hi[0], self.hi[1]],
            nodes: [self.nodes, self.nodes],
            m: self.m,
            values: self.values.clone(),
        })
    }
}

fn check_inputs(map: &GridMap, density: &DensitySpec, h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!("h must be positive, got {h}")));
    }
    if density.dim() != map.d {
        return Err(Error::Dimension("density and grid map dimensions differ".into()));
    }
    let dx = (0..map.d).map(|a| map.spacing(a)).fold(0.0, f64::max);
    if h < 2.0 * dx {
        return Err(Error::Resolution(format!("h = {h} is below twice the grid spacing {dx}")));
    }
    Ok(())
}

#[inline]
fn log_term(a: &[f64], b: &[f64], ih2: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ih2 * r2).ln_1p()
}

/// `∬ η_{hσ(x)}(|x − x'|) log(1 + h⁻²|T(x) − T(x')|²) ρ_X(x) dx dx'`.
pub fn nonlocal_attraction(map: &GridMap, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec, h: f64) -> Result<f64> {
    check_inputs(map, density, h)?;
    if kernel.dim != map.d {
        return Err(Error::Dimension("kernel and grid map dimensions differ".into()));
    }
    let pdf = |x: &[f64]| density.pdf(x);
    let sig = |x: &[f64]| sigma.eval(x, density);
    Ok(attraction_with(map, kernel, &pdf, &sig, h))
}

/// Attraction with an arbitrary (possibly unnormalized) outer weight.
pub fn attraction_with(map: &GridMap, kernel: &KernelSpec, pdf: &(dyn Fn(&[f64]) -> f64 + Sync), sigma: &(dyn Fn(&[f64]) -> f64 + Sync), h: f64) -> f64 {
    match map.d {
        1 => attraction_1d(map, kernel, pdf, sigma, h),
        _ => attraction_2d(map, kernel, pdf, sigma, h),
    }
}

fn attraction_1d(map: &GridMap, kernel: &KernelSpec, pdf: &(dyn Fn(&[f64]) -> f64 + Sync), sigma: &(dyn Fn(&[f64]) -> f64 + Sync), h: f64) -> f64 {
    let n = map.nodes;
    let xs: Vec<f64> = (0..n).map(|i| map.coord(0, i)).collect();
    let w = trapezoid_weights(&xs);
    let ih2 = 1.0 / (h * h);
    let radius = kernel.window_radius();
    let (a, b) = (map.lo[0], map.hi[0]);
    let dx = map.spacing(0);
    let tol = Tol::new(1e-15, 1e-11);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = xs[i];
            let hs = h * sigma(&[x]);
            let lo = (x - radius * hs).max(a);
            let hi = (x + radius * hs).min(b);
            let ti = map.node_value(i).to_vec();
            let first = ((lo - a) / dx).ceil() as usize;
            let breaks: Vec<f64> = (first..n).map(|j| xs[j]).take_while(|&v| v < hi).filter(|&v| v > lo).collect();
            let inner = integrate_with(
                |xp| {
                    let mut buf = [0.0; MAX_TARGET_DIM];
                    map.eval_into(&[xp], &mut buf[..map.m]);
                    kernel.scaled(xp - x, hs) * log_term(&ti, &buf[..map.m], ih2)
                },
                lo,
                hi,
                &breaks,
                tol,
            )
            .value;
            w[i] * pdf(&[x]) * inner
        })
        .collect();
    rows.iter().sum()
}

fn attraction_2d(map: &GridMap, kernel: &KernelSpec, pdf: &(dyn Fn(&[f64]) -> f64 + Sync), sigma: &(dyn Fn(&[f64]) -> f64 + Sync), h: f64) -> f64 {
    let n = map.nodes;
    let w0 = trapezoid_weights(&(0..n).map(|i| map.coord(0, i)).collect::<Vec<_>>());
    let w1 = trapezoid_weights(&(0..n).map(|i| map.coord(1, i)).collect::<Vec<_>>());
    let ih2 = 1.0 / (h * h);
    let radius = kernel.window_radius();
    let theta = GaussLegendre::new(48);
    let radial = GaussLegendre::new(16);
    let (lo, hi) = (map.lo.clone(), map.hi.clone());
    let rows: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            let x = [map.coord(0, i), map.coord(1, j)];
            let hs = h * sigma(&x);
            let ti = map.node_value(idx).to_vec();
            let mut buf = vec![0.0; map.m];
            // polar coordinates x' = x + hσ r (cos θ, sin θ), r clipped at the box
            let mut total = 0.0;
            for (q, wq) in theta.mapped(0.0, 2.0 * std::f64::consts::PI) {
                let (c, s) = (q.cos(), q.sin());
                let mut rmax = radius;
                for (axis, dir) in [(0usize, c), (1usize, s)] {
                    if dir > 1e-15 {
                        rmax = rmax.min((hi[axis] - x[axis]) / (hs * dir));
                    } else if dir < -1e-15 {
                        rmax = rmax.min((lo[axis] - x[axis]) / (hs * dir));
                    }
                }
                if rmax <= 0.0 {
                    continue;
                }
                let mut line = 0.0;
                for (r, wr) in radial.mapped(0.0, rmax) {
                    map.eval_into(&[x[0] + hs * r * c, x[1] + hs * r * s], &mut buf);
                    line += wr * r * kernel.profile(r) * log_term(&ti, &buf, ih2);
                }
                total += wq * line;
            }
            w0[i] * w1[j] * pdf(&x) * total
        })
        .collect();
    rows.iter().sum()
}

/// `R^h[T] = log ∬ (1 + h⁻²|T(x) − T(x')|²)⁻¹ ρ_X(x) ρ_X(x') dx dx'`.
///
/// For `d = 1` each cell carries its exact `ρ_X` mass spread uniformly along
/// its image segment; for `d = 2` the pushforward form over a histogram is used.
pub fn nonlocal_repulsion(map: &GridMap, density: &DensitySpec, h: f64) -> Result<f64> {
    check_inputs(map, density, h)?;
    match map.d {
        1 => Ok(repulsion_segments(map, density, h).ln()),
        _ => {
            let hist = if map.m == 1 {
                scalar_pushforward_histogram(map, density, crate::continuum::FALLBACK_BINS)
            } else {
                map.to_triangulated()?.pushforward_histogram(density, crate::continuum::FALLBACK_BINS, 4)
            };
            match hist {
                Ok(hist) => repulsion_pushforward(&hist, h),
                // a map with a flat image axis still has a well-defined nonlocal repulsion
                Err(Error::DegenerateSupport(_)) => Ok(repulsion_2d_direct(map, density, h).ln()),
                Err(e) => Err(e),
            }
        }
    }
}

/// CDF of `f(U)` for `U` uniform on a triangle and `f` affine with sorted vertex values `v`.
fn triangle_cdf(v: [f64; 3], y: f64) -> f64 {
    if y <= v[0] {
        return 0.0;
    }
    if y >= v[2] {
        return 1.0;
    }
    let span = v[2] - v[0];
    if y <= v[1] {
        (y - v[0]).powi(2) / (span * (v[1] - v[0]))
    } else {
        1.0 - (v[2] - y).powi(2) / (span * (v[2] - v[1]))
    }
}

/// Exact bin masses of a scalar `d = 2` map, with `ρ_X` frozen at triangle centroids.
fn scalar_pushforward_histogram(map: &GridMap, density: &DensitySpec, bins: usize) -> Result<Histogram> {
    let (lo, hi) = map.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Err(Error::DegenerateSupport("map image is a point".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut mass = vec![0.0; bins];
    let n = map.nodes;
    let cell = map.spacing(0) * map.spacing(1) / 2.0;
    let bin_of = |y: f64| (((y - lo) / width).floor() as usize).min(bins - 1);
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let corner = |a: usize, b: usize| ([map.coord(0, a), map.coord(1, b)], map.node_value(a * n + b)[0]);
            for tri in [
                [corner(i, j), corner(i + 1, j), corner(i + 1, j + 1)],
                [corner(i, j), corner(i + 1, j + 1), corner(i, j + 1)],
            ] {
                let c = [(tri[0].0[0] + tri[1].0[0] + tri[2].0[0]) / 3.0, (tri[0].0[1] + tri[1].0[1] + tri[2].0[1]) / 3.0];
                let w = density.pdf(&c) * cell;
                let mut v = [tri[0].1, tri[1].1, tri[2].1];
                v.sort_by(f64::total_cmp);
                if v[2] == v[0] {
                    mass[bin_of(v[0])] += w;
                    continue;
                }
                let (b0, b1) = (bin_of(v[0]), bin_of(v[2]));
                for (b, slot) in mass.iter_mut().enumerate().take(b1 + 1).skip(b0) {
                    let (y0, y1) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
                    *slot += w * (triangle_cdf(v, y1) - triangle_cdf(v, y0));
                }
            }
        }
    }
    Ok(Histogram {
        lo: vec![lo],
        width: vec![width],
        shape: vec![bins],
        values: mass.into_iter().map(|m| m / width).collect(),
    })
}

/// `log ∬ (1 + h⁻²|y − y'|²)⁻¹ ρ_Y ρ_Y'` for a histogram pushforward.
pub fn repulsion_pushforward(rho_y: &Histogram, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("h must be positive, got {h}")));
    }
    Ok(pair_integral(rho_y, PairKernel::Lorentz { h }, PairOptions::default())?.ln())
}

/// Uniform-density segment pair with the Lorentz kernel, normalized to unit masses.
fn segment_pair_1d(h: f64, a: f64, b: f64, c: f64, d: f64) -> f64 {
    let (a, b) = (a.min(b), a.max(b));
    let (c, d) = (c.min(d), c.max(d));
    let (l1, l2) = (b - a, d - c);
    let eps = 1e-9 * h;
    let k = |t: f64| 1.0 / (1.0 + t * t / (h * h));
    let line = |p: f64, c: f64, d: f64| h * (((p - c) / h).atan() - ((p - d) / h).atan()) / (d - c);
    match (l1 > eps, l2 > eps) {
        (true, true) => lorentz_rectangle(h, a, b, c, d) / (l1 * l2),
        (false, true) => line(0.5 * (a + b), c, d),
        (true, false) => line(0.5 * (c + d), a, b),
        (false, false) => k(0.5 * (a + b) - 0.5 * (c + d)),
    }
}

/// `∫_0^1 (1 + h⁻²|p − A − t(B − A)|²)⁻¹ dt` in closed form.
fn point_segment(h: f64, p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let l2: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
    let pa2: f64 = p.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum();
    if l2 < 1e-24 * h * h {
        return 1.0 / (1.0 + pa2 / (h * h));
    }
    let t0: f64 = p.iter().zip(a).zip(b).map(|((p, a), b)| (p - a) * (b - a)).sum::<f64>() / l2;
    let perp2 = (pa2 - t0 * t0 * l2).max(0.0);
    let c = ((h * h + perp2) / l2).sqrt();
    h * h / (l2 * c) * (((1.0 - t0) / c).atan() + (t0 / c).atan())
}

fn repulsion_segments(map: &GridMap, density: &DensitySpec, h: f64) -> f64 {
    let n = map.nodes;
    let cells = n - 1;
    let mass: Vec<f64> = (0..cells).map(|j| density.mass1(map.coord(0, j), map.coord(0, j + 1))).collect();
    let gl = GaussLegendre::new(6);
    let rows: Vec<f64> = (0..cells)
        .into_par_iter()
        .map(|i| {
            if mass[i] == 0.0 {
                return 0.0;
            }
            let (ai, bi) = (map.node_value(i), map.node_value(i + 1));
            let mut s = 0.0;
            for j in 0..cells {
                if mass[j] == 0.0 {
                    continue;
                }
                let (aj, bj) = (map.node_value(j), map.node_value(j + 1));
                let k = if map.m == 1 {
                    segment_pair_1d(h, ai[0], bi[0], aj[0], bj[0])
                } else {
                    let mut p = vec![0.0; map.m];
                    let f = |t: f64, p: &mut Vec<f64>| {
                        for r in 0..map.m {
                            p[r] = ai[r] + t * (bi[r] - ai[r]);
                        }
                        point_segment(h, p, aj, bj)
                    };
                    let li: f64 = ai.iter().zip(bi).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
                    let dist: f64 = ai.iter().zip(aj).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
                    if li > 2.0 * h && dist < 10.0 * (li + h) {
                        integrate_with(|t| f(t, &mut p.clone()), 0.0, 1.0, &[], Tol::new(1e-13, 1e-10)).value
                    } else {
                        gl.mapped(0.0, 1.0).map(|(t, w)| w * f(t, &mut p)).sum()
                    }
                };
                s += mass[j] * k;
            }
            mass[i] * s
        })
        .collect();
    rows.iter().sum()
}

fn repulsion_2d_direct(map: &GridMap, density: &DensitySpec, h: f64) -> f64 {
    let n = map.nodes;
    let xs0: Vec<f64> = (0..n).map(|i| map.coord(0, i)).collect();
    let xs1: Vec<f64> = (0..n).map(|i| map.coord(1, i)).collect();
    let (w0, w1) = (trapezoid_weights(&xs0), trapezoid_weights(&xs1));
    let wt: Vec<f64> = (0..n * n)
        .map(|idx| w0[idx / n] * w1[idx % n] * density.pdf(&[xs0[idx / n], xs1[idx % n]]))
        .collect();
    let ih2 = 1.0 / (h * h);
    let rows: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|a| {
            let ta = map.node_value(a);
            let s: f64 = (0..n * n)
                .map(|b| {
                    let tb = map.node_value(b);
                    let r2: f64 = ta.iter().zip(tb).map(|(x, y)| (x - y) * (x - y)).sum();
                    wt[b] / (1.0 + ih2 * r2)
                })
                .sum();
            wt[a] * s
        })
        .collect();
    rows.iter().sum()
}

/// `A^h` of a `(d = 2, m = 1)` cutting map with uniform `ρ_X` and `σ ≡ 1`,
/// reduced to `∫dx₂ ∫dz η(z) (1 − h|z₁|)₊ 1[x₂ + hz₂ ∈ [0,1]] log(1 + (z₁ + Δφ/h)²)`.
pub fn cut_sensitivity(map: &CuttingMap, kernel: &KernelSpec, h: f64) -> Result<f64> {
    if map.d != 2 || map.m != 1 || map.rescaled {
        return Err(Error::Dimension("cut sensitivity is implemented for unrescaled d = 2, m = 1 maps".into()));
    }
    if kernel.dim != 2 {
        return Err(Error::Dimension("kernel must be two-dimensional".into()));
    }
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Parameter(format!("h must lie in (0, 1), got {h}")));
    }
    if map.k > 1 && map.mu > 0.01 * map.k as f64 * h {
        return Err(Error::Precondition(format!("μ = {} exceeds 0.01·k·h = {}", map.mu, 0.01 * map.k as f64 * h)));
    }
    let radius = kernel.window_radius();
    let kf = map.k as f64;
    let mut cut_pts = vec![0.0, 1.0];
    for n in 1..map.k {
        cut_pts.push(n as f64 / kf);
        cut_pts.push((n as f64 - map.mu) / kf);
    }
    cut_pts.sort_by(f64::total_cmp);
    let tol = Tol {
        abs: 1e-13,
        rel: 1e-9,
        max_intervals: 2000,
    };
    let inner_z1 = |z2: f64, c: f64| {
        let half = (radius * radius - z2 * z2).max(0.0).sqrt();
        let lo = (-half).max(-1.0 / h);
        let hi = half.min(1.0 / h);
        let br: Vec<f64> = [-c, 0.0].into_iter().filter(|&v| v > lo && v < hi).collect();
        integrate_with(
            |z1| kernel.profile((z1 * z1 + z2 * z2).sqrt()) * (1.0 - h * z1.abs()) * (z1 + c).powi(2).ln_1p(),
            lo,
            hi,
            &br,
            tol,
        )
        .value
    };
    let over_z2 = |x2: f64| {
        let lo = (-radius).max(-x2 / h);
        let hi = radius.min((1.0 - x2) / h);
        if hi <= lo {
            return 0.0;
        }
        let phi0 = map.phi(x2);
        let br: Vec<f64> = cut_pts.iter().map(|&p| (p - x2) / h).filter(|&v| v > lo && v < hi).collect();
        integrate_with(|z2| inner_z1(z2, (map.phi(x2 + h * z2) - phi0) / h), lo, hi, &br, tol).value
    };
    let mut outer: Vec<f64> = cut_pts
        .iter()
        .flat_map(|&p| [p - radius * h, p, p + radius * h])
        .filter(|&v| v > 0.0 && v < 1.0)
        .collect();
    outer.sort_by(f64::total_cmp);
    outer.dedup();
    let mut edges = vec![0.0];
    edges.extend(outer);
    edges.push(1.0);
    let pieces: Vec<f64> = edges.par_windows(2).map(|w| integrate_with(over_z2, w[0], w[1], &[], tol).value).collect();
    Ok(pieces.iter().sum())
}
