//! Continuum energies `A[T; Φ_s]`, `R[T]`, scaling identities, monotone
//! rearrangement, the SNE continuum energy and the Perona–Malik energy.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{BandwidthField, Coarea1D, DensitySpec, Histogram, PushforwardDensity};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, Scale};
use crate::lattice::{pair_integral, PairKernel, PairOptions};
use crate::quad::{integrate_with, Tol};

/// Continuous piecewise linear map `T: [a, b] → R` given by nodal values.
///
/// Repeated abscissae are allowed and encode jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearMap {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
}

impl PiecewiseLinearMap {
    pub fn new(x: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if x.len() != t.len() || x.len() < 2 {
            return Err(Error::Input("map needs matching x and t with at least two nodes".into()));
        }
        if x.iter().chain(&t).any(|v| !v.is_finite()) {
            return Err(Error::Input("map values must be finite".into()));
        }
        if x.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("map abscissae must be nondecreasing".into()));
        }
        if !(x[x.len() - 1] > x[0]) {
            return Err(Error::Input("map domain has zero length".into()));
        }
        Ok(PiecewiseLinearMap { x, t })
    }

    /// `n` equally spaced nodes on `[a, b]` with `t_j = f(x_j)`.
    pub fn uniform_grid<F: Fn(f64) -> f64>(a: f64, b: f64, n: usize, f: F) -> Self {
        let n = n.max(2);
        let x: Vec<f64> = (0..n).map(|j| if j == n - 1 { b } else { a + (b - a) * j as f64 / (n - 1) as f64 }).collect();
        let t = x.iter().map(|&v| f(v)).collect();
        PiecewiseLinearMap { x, t }
    }

    pub fn cells(&self) -> usize {
        self.x.len() - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    /// Slope of cell `j`, `None` for a jump.
    pub fn slope(&self, j: usize) -> Option<f64> {
        let dx = self.x[j + 1] - self.x[j];
        (dx > 0.0).then(|| (self.t[j + 1] - self.t[j]) / dx)
    }

    /// True when `T` increases strictly on every cell and never jumps down.
    pub fn is_strictly_increasing(&self) -> bool {
        (0..self.cells()).all(|j| match self.slope(j) {
            Some(a) => a > 0.0,
            None => self.t[j + 1] >= self.t[j],
        })
    }

    pub fn range(&self) -> (f64, f64) {
        let lo = self.t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Value at `x` (right-continuous at jumps).
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= self.x[0] {
            return self.t[0];
        }
        if x >= self.x[n - 1] {
            return self.t[n - 1];
        }
        let j = self.x.partition_point(|&v| v <= x) - 1;
        match self.slope(j) {
            Some(a) => self.t[j] + a * (x - self.x[j]),
            None => self.t[j + 1],
        }
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        PiecewiseLinearMap {
            x: self.x.clone(),
            t: self.t.iter().map(|v| v * lambda).collect(),
        }
    }
}

/// Triangulated continuous piecewise affine map from a rectangle to `R^m`.
///
/// Each grid square `[x_i, x_{i+1}] × [y_j, y_{j+1}]` is split along its
/// rising diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulatedMap {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nodes: [usize; 2],
    pub m: usize,
    /// Node-major values, `x` index slowest.
    pub values: Vec<f64>,
}

struct Triangle {
    vertices: [[f64; 2]; 3],
    jacobian: DMatrix<f64>,
    det: f64,
}

impl TriangulatedMap {
    pub fn from_fn<F: Fn(f64, f64) -> Vec<f64>>(lo: [f64; 2], hi: [f64; 2], nodes: [usize; 2], m: usize, f: F) -> Result<Self> {
        if nodes[0] < 2 || nodes[1] < 2 || !(hi[0] > lo[0] && hi[1] > lo[1]) {
            return Err(Error::Input("triangulated map needs a nondegenerate grid".into()));
        }
        let mut values = Vec::with_capacity(nodes[0] * nodes[1] * m);
        for i in 0..nodes[0] {
            for j in 0..nodes[1] {
                let (x, y) = node_coord(lo, hi, nodes, i, j);
                let v = f(x, y);
                if v.len() != m {
                    return Err(Error::Dimension(format!("map returned {} values, expected {m}", v.len())));
                }
                values.extend(v);
            }
        }
        Ok(TriangulatedMap { lo, hi, nodes, m, values })
    }

    fn node(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.nodes[1] + j) * self.m;
        &self.values[k..k + self.m]
    }

    fn triangles(&self) -> Vec<Triangle> {
        let hx = (self.hi[0] - self.lo[0]) / (self.nodes[0] - 1) as f64;
        let hy = (self.hi[1] - self.lo[1]) / (self.nodes[1] - 1) as f64;
        let m = self.m;
        let mut out = Vec::with_capacity(2 * (self.nodes[0] - 1) * (self.nodes[1] - 1));
        for i in 0..self.nodes[0] - 1 {
            for j in 0..self.nodes[1] - 1 {
                let p = |a: usize, b: usize| {
                    let (x, y) = node_coord(self.lo, self.hi, self.nodes, a, b);
                    [x, y]
                };
                let (t00, t10, t11, t01) = (self.node(i, j), self.node(i + 1, j), self.node(i + 1, j + 1), self.node(i, j + 1));
                let lower = DMatrix::from_fn(m, 2, |r, c| if c == 0 { (t10[r] - t00[r]) / hx } else { (t11[r] - t10[r]) / hy });
                let upper = DMatrix::from_fn(m, 2, |r, c| if c == 0 { (t11[r] - t01[r]) / hx } else { (t01[r] - t00[r]) / hy });
                for (verts, jac) in [
                    ([p(i, j), p(i + 1, j), p(i + 1, j + 1)], lower),
                    ([p(i, j), p(i + 1, j + 1), p(i, j + 1)], upper),
                ] {
                    let det = if m == 2 { jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)] } else { 0.0 };
                    out.push(Triangle {
                        vertices: verts,
                        jacobian: jac,
                        det,
                    });
                }
            }
        }
        out
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v *= lambda;
        }
        out
    }

    /// True when all triangles have the same strict orientation and the image
    /// of the boundary is a simple closed polygon, which makes the map injective.
    pub fn is_injective(&self) -> bool {
        if self.m != 2 {
            return false;
        }
        let tris = self.triangles();
        let pos = tris.iter().all(|t| t.det > 0.0);
        let neg = tris.iter().all(|t| t.det < 0.0);
        if !(pos || neg) {
            return false;
        }
        let (nx, ny) = (self.nodes[0], self.nodes[1]);
        let mut ring: Vec<[f64; 2]> = Vec::new();
        for i in 0..nx {
            ring.push(self.point(i, 0));
        }
        for j in 1..ny {
            ring.push(self.point(nx - 1, j));
        }
        for i in (0..nx - 1).rev() {
            ring.push(self.point(i, ny - 1));
        }
        for j in (1..ny - 1).rev() {
            ring.push(self.point(0, j));
        }
        simple_polygon(&ring)
    }

    fn point(&self, i: usize, j: usize) -> [f64; 2] {
        let v = self.node(i, j);
        [v[0], v[1]]
    }

    fn image_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.m];
        let mut hi = vec![f64::NEG_INFINITY; self.m];
        for (k, v) in self.values.iter().enumerate() {
            let a = k % self.m;
            lo[a] = lo[a].min(*v);
            hi[a] = hi[a].max(*v);
        }
        (lo, hi)
    }

    /// Histogram of `T_#ρ_X` with `bins` per axis on the image bounding box;
    /// each triangle's mass is split over `sub²` subtriangles placed at their centroids.
    pub fn pushforward_histogram(&self, density: &DensitySpec, bins: usize, sub: usize) -> Result<Histogram> {
        let (lo, hi) = self.image_box();
        if lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::DegenerateSupport("map image has an empty interior".into()));
        }
        let width: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a) / bins as f64).collect();
        let mut pts = Vec::new();
        let mut wts = Vec::new();
        let sub = sub.max(1);
        let sf = sub as f64;
        for tri in self.triangles() {
            let [a, b, c] = tri.vertices;
            let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
            // barycentric subdivision into sub² congruent triangles
            for p in 0..sub {
                for q in 0..sub - p {
                    let mut centroids = vec![[(p as f64 + 1.0 / 3.0) / sf, (q as f64 + 1.0 / 3.0) / sf]];
                    if p + q + 1 < sub {
                        centroids.push([(p as f64 + 2.0 / 3.0) / sf, (q as f64 + 2.0 / 3.0) / sf]);
                    }
                    for [u, v] in centroids {
                        let x = [a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]), a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1])];
                        let w = density.pdf(&x) * area / (sf * sf);
                        let base = self.eval_affine(&tri, &x);
                        pts.extend(base);
                        wts.push(w);
                    }
                }
            }
        }
        Histogram::from_weighted_points(&pts, Some(&wts), lo, width, vec![bins; self.m])
    }

    fn eval_affine(&self, tri: &Triangle, x: &[f64; 2]) -> Vec<f64> {
        let a = tri.vertices[0];
        let i = ((a[0] - self.lo[0]) / (self.hi[0] - self.lo[0]) * (self.nodes[0] - 1) as f64).round() as usize;
        let j = ((a[1] - self.lo[1]) / (self.hi[1] - self.lo[1]) * (self.nodes[1] - 1) as f64).round() as usize;
        let t0 = self.node(i, j);
        (0..self.m)
            .map(|r| t0[r] + tri.jacobian[(r, 0)] * (x[0] - a[0]) + tri.jacobian[(r, 1)] * (x[1] - a[1]))
            .collect()
    }
}

fn node_coord(lo: [f64; 2], hi: [f64; 2], nodes: [usize; 2], i: usize, j: usize) -> (f64, f64) {
    let f = |l: f64, h: f64, n: usize, k: usize| if k == n - 1 { h } else { l + (h - l) * k as f64 / (n - 1) as f64 };
    (f(lo[0], hi[0], nodes[0], i), f(lo[1], hi[1], nodes[1], j))
}

fn simple_polygon(ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let on_seg = |p: [f64; 2], a: [f64; 2], b: [f64; 2]| p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1]);
    let intersects = |a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]| {
        let d1 = cross(c, d, a);
        let d2 = cross(c, d, b);
        let d3 = cross(a, b, c);
        let d4 = cross(a, b, d);
        if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
            return true;
        }
        (d1 == 0.0 && on_seg(a, c, d)) || (d2 == 0.0 && on_seg(b, c, d)) || (d3 == 0.0 && on_seg(c, a, b)) || (d4 == 0.0 && on_seg(d, a, b))
    };
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if intersects(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Which repulsion functional applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `log ∫ ρ_Y²` for `m ≤ 2`.
    L2,
    /// `log ∬ ρ_Y(y) ρ_Y(y') |y − y'|⁻²` for `m ≥ 3`.
    Riesz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuumEnergyReport {
    pub attraction: f64,
    pub repulsion: f64,
    pub total: f64,
    pub s: Scale,
    pub regime: Regime,
}

/// `s = ∞` split `A[T; Φ_∞] = ∫ avg_w log|DT w|² ρ_X + C₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfinityDecomposition {
    pub sphere_term: f64,
    /// `C₂ = C₁ + ∫ log σ² ρ_X`
    pub c2: f64,
}

fn cell_tol() -> Tol {
    Tol::new(1e-14, 1e-12)
}

fn breaks_in(breaks: &[f64], a: f64, b: f64) -> Vec<f64> {
    breaks.iter().copied().filter(|&v| v > a && v < b).collect()
}

fn is_constant_field(sigma: &BandwidthField) -> Option<f64> {
    match *sigma {
        BandwidthField::Constant { value } => Some(value),
        _ => None,
    }
}

/// `∫ g(x) ρ_X(x) dx` over `[a, b]`, exploiting uniform densities and constant `g`.
fn weighted_cell<G: Fn(f64) -> f64>(g: G, constant: bool, a: f64, b: f64, density: &DensitySpec, breaks: &[f64]) -> f64 {
    if constant {
        g(0.5 * (a + b)) * density.mass1(a, b)
    } else {
        integrate_with(|x| g(x) * density.pdf1(x), a, b, &breaks_in(breaks, a, b), cell_tol()).value
    }
}

fn check_1d(kernel: &KernelSpec, density: &DensitySpec) -> Result<()> {
    if kernel.dim != 1 || density.dim() != 1 {
        return Err(Error::Dimension("one-dimensional map needs d = 1 kernel and density".into()));
    }
    Ok(())
}

/// `A[T; Φ_s] = ∫ Φ_s(σ T') ρ_X dx` for a 1D map.
pub fn continuum_attraction(map: &PiecewiseLinearMap, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec, s: Scale) -> Result<f64> {
    check_1d(kernel, density)?;
    let s = s.validate()?;
    let breaks = density.breaks1();
    let sig_const = is_constant_field(sigma);
    let uniform = density.is_uniform();
    let c1 = kernel.log_moment();
    let mut flat = Vec::new();
    let mut total = 0.0;
    for j in 0..map.cells() {
        let Some(a) = map.slope(j) else { continue };
        let (x0, x1) = (map.x[j], map.x[j + 1]);
        if let Scale::Infinite = s {
            if a == 0.0 && density.mass1(x0, x1) > 0.0 {
                flat.push(j);
                continue;
            }
        }
        let phi = |x: f64| {
            let v = sigma.eval1(x, density) * a;
            match s {
                Scale::Infinite => (v * v).ln() + c1,
                Scale::Finite(s) => -2.0 * s.ln() + kernel.phi1(s * v),
            }
        };
        total += weighted_cell(phi, uniform && sig_const.is_some(), x0, x1, density, &breaks);
    }
    if !flat.is_empty() {
        return Err(Error::Divergence(format!("Φ_∞ diverges on flat cells {flat:?}")));
    }
    Ok(total)
}

/// The `s = ∞` decomposition of the attraction for a 1D map.
pub fn attraction_infinity_decomposition(
    map: &PiecewiseLinearMap,
    kernel: &KernelSpec,
    sigma: &BandwidthField,
    density: &DensitySpec,
) -> Result<InfinityDecomposition> {
    check_1d(kernel, density)?;
    let breaks = density.breaks1();
    let (lo, hi) = map.domain();
    let log_sigma = integrate_with(
        |x| (sigma.eval1(x, density).powi(2)).ln() * density.pdf1(x),
        lo,
        hi,
        &breaks_in(&breaks, lo, hi),
        cell_tol(),
    )
    .value;
    let mut sphere = 0.0;
    for j in 0..map.cells() {
        let Some(a) = map.slope(j) else { continue };
        let mass = density.mass1(map.x[j], map.x[j + 1]);
        if mass == 0.0 {
            continue;
        }
        if a == 0.0 {
            return Err(Error::Divergence(format!("flat cell {j}")));
        }
        sphere += (a * a).ln() * mass;
    }
    Ok(InfinityDecomposition {
        sphere_term: sphere,
        c2: kernel.log_moment() + log_sigma,
    })
}

/// `R[T]` from a pushforward density: `log ∫ρ_Y²` (`m ≤ 2`) or the Riesz form (`m ≥ 3`).
pub fn continuum_repulsion(rho_y: &PushforwardDensity) -> Result<(f64, Regime)> {
    let mass = rho_y.mass();
    if (mass - 1.0).abs() > 1e-3 {
        return Err(Error::Input(format!("pushforward density has mass {mass}, expected 1")));
    }
    if rho_y.dim() <= 2 {
        let l2 = rho_y.l2_squared();
        if !l2.is_finite() {
            return Err(Error::InfiniteEnergy("pushforward density is not square integrable".into()));
        }
        return Ok((l2.ln(), Regime::L2));
    }
    match rho_y {
        PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => Ok((riesz_energy(h)?.ln(), Regime::Riesz)),
        PushforwardDensity::ExactMonotone1d(_) => unreachable!("exact representation is one-dimensional"),
    }
}

/// `∬ ρ(y) ρ(y') |y − y'|⁻² dy dy'` for a 3D histogram density.
pub fn riesz_energy(hist: &Histogram) -> Result<f64> {
    pair_integral(hist, PairKernel::Riesz, PairOptions { far_radius: 10.0 })
}

/// Continuum energies of a map.
pub trait ContinuumMap {
    fn target_dim(&self) -> usize;
    fn attraction(&self, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec, s: Scale) -> Result<f64>;
    fn repulsion(&self, density: &DensitySpec) -> Result<f64>;
    fn dilate(&self, lambda: f64) -> Self;

    fn energy(&self, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec, s: Scale) -> Result<ContinuumEnergyReport> {
        let attraction = self.attraction(kernel, sigma, density, s)?;
        let repulsion = self.repulsion(density)?;
        Ok(ContinuumEnergyReport {
            attraction,
            repulsion,
            total: attraction + repulsion,
            s,
            regime: if self.target_dim() >= 3 { Regime::Riesz } else { Regime::L2 },
        })
    }
}

impl ContinuumMap for PiecewiseLinearMap {
    fn target_dim(&self) -> usize {
        1
    }

    fn attraction(&self, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec, s: Scale) -> Result<f64> {
        continuum_attraction(self, kernel, sigma, density, s)
    }

    fn repulsion(&self, density: &DensitySpec) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(hi > lo) {
            return Err(Error::DegenerateSupport("T is constant, ρ_Y is a point mass".into()));
        }
        // branch sum of the coarea formula, exact for folded maps too
        let l2 = Coarea1D {
            map: self.clone(),
            density: density.clone(),
        }
        .l2_squared();
        if !l2.is_finite() {
            return Err(Error::InfiniteEnergy("T is constant on a cell carrying mass".into()));
        }
        Ok(l2.ln())
    }

    fn dilate(&self, lambda: f64) -> Self {
        self.scaled(lambda)
    }
}

/// Bins per axis used when a 2D map falls back to a histogram.
pub const FALLBACK_BINS: usize = 128;

impl ContinuumMap for TriangulatedMap {
    fn target_dim(&self) -> usize {
        self.m
    }

    fn attraction(&self, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec, s: Scale) -> Result<f64> {
        if kernel.dim != 2 || density.dim() != 2 {
            return Err(Error::Dimension("triangulated maps need d = 2 kernel and density".into()));
        }
        let s = s.validate()?;
        let sig_const = is_constant_field(sigma);
        let mut total = 0.0;
        for tri in self.triangles() {
            let [a, b, c] = tri.vertices;
            let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
            let mids = [
                [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
                [0.5 * (b[0] + c[0]), 0.5 * (b[1] + c[1])],
                [0.5 * (c[0] + a[0]), 0.5 * (c[1] + a[1])],
            ];
            if let Some(sv) = sig_const {
                let phi = kernel.phi_s(s, &(tri.jacobian.clone() * sv))?;
                let mass: f64 = mids.iter().map(|p| density.pdf(p)).sum::<f64>() * area / 3.0;
                total += phi * mass;
            } else {
                // Φ_s(σA) = Φ_{sσ}(A) + 2 log σ
                for p in &mids {
                    let sv = sigma.eval(p, density);
                    let phi = kernel.phi_s(s.times(sv), &tri.jacobian)? + 2.0 * sv.ln();
                    total += phi * density.pdf(p) * area / 3.0;
                }
            }
        }
        Ok(total)
    }

    fn repulsion(&self, density: &DensitySpec) -> Result<f64> {
        if self.m == 2 && self.is_injective() {
            let mut l2 = 0.0;
            for tri in self.triangles() {
                let [a, b, c] = tri.vertices;
                let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
                let mids = [
                    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
                    [0.5 * (b[0] + c[0]), 0.5 * (b[1] + c[1])],
                    [0.5 * (c[0] + a[0]), 0.5 * (c[1] + a[1])],
                ];
                let r2: f64 = mids.iter().map(|p| density.pdf(p).powi(2)).sum::<f64>() * area / 3.0;
                l2 += r2 / tri.det.abs();
            }
            return Ok(l2.ln());
        }
        let hist = self.pushforward_histogram(density, FALLBACK_BINS, 4)?;
        continuum_repulsion(&PushforwardDensity::Histogram(hist)).map(|r| r.0)
    }

    fn dilate(&self, lambda: f64) -> Self {
        self.scaled(lambda)
    }
}

/// Both sides of `E[λT; Φ_s] = E[T; Φ_{sλ}] + (2 − m)₊ log λ`.
pub fn scaling_identity_check<M: ContinuumMap>(
    map: &M,
    kernel: &KernelSpec,
    sigma: &BandwidthField,
    density: &DensitySpec,
    s: Scale,
    lambda: f64,
) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("λ must be positive, got {lambda}")));
    }
    let lhs = map.dilate(lambda).energy(kernel, sigma, density, s)?.total;
    let m = map.target_dim() as f64;
    let rhs = map.energy(kernel, sigma, density, s.times(lambda))?.total + (2.0 - m).max(0.0) * lambda.ln();
    Ok((lhs, rhs))
}

/// Monotone rearrangement `T*(x) = ∫_a^x |T'|`, including jump magnitudes.
pub fn rearrange_1d(map: &PiecewiseLinearMap) -> PiecewiseLinearMap {
    let mut t = Vec::with_capacity(map.x.len());
    let mut acc = 0.0;
    t.push(0.0);
    for j in 0..map.cells() {
        acc += (map.t[j + 1] - map.t[j]).abs();
        t.push(acc);
    }
    PiecewiseLinearMap { x: map.x.clone(), t }
}

/// SNE continuum energy `c_η ∫ |T'|² σ² ρ_X + log ∫ ρ_Y²`; returns (attraction, repulsion).
pub fn sne_continuum_energy(map: &PiecewiseLinearMap, kernel: &KernelSpec, sigma: &BandwidthField, density: &DensitySpec) -> Result<(f64, f64)> {
    check_1d(kernel, density)?;
    let c_eta = kernel.directional_second_moment();
    let breaks = density.breaks1();
    let sig_const = is_constant_field(sigma).is_some() && density.is_uniform();
    let mut attraction = 0.0;
    for j in 0..map.cells() {
        let Some(a) = map.slope(j) else { continue };
        let g = |x: f64| {
            let s = sigma.eval1(x, density);
            a * a * s * s
        };
        attraction += weighted_cell(g, sig_const, map.x[j], map.x[j + 1], density, &breaks);
    }
    let repulsion = map.repulsion(density)?;
    Ok((c_eta * attraction, repulsion))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::Parameter(format!("λ = {lambda} outside (0, 2): the energy is unbounded below")));
    }
    Ok(())
}

/// Perona–Malik type energy `∫ log(1 + u²) ρ + λ log ∫ u⁻¹ ρ²` on a grid
/// (trapezoid rule); `rho` holds nodal density values.
pub fn perona_malik_energy_u(x: &[f64], u: &[f64], rho: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    perona_malik_functional(x, u, rho, lambda)
}

/// The same functional without the admissibility check on `λ`.
pub fn perona_malik_functional(x: &[f64], u: &[f64], rho: &[f64], lambda: f64) -> Result<f64> {
    if x.len() != u.len() || x.len() != rho.len() || x.len() < 2 {
        return Err(Error::Dimension("grid, u and ρ must have equal length ≥ 2".into()));
    }
    if u.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InfiniteEnergy("u vanishes at a grid node".into()));
    }
    let w = crate::quad::trapezoid_weights(x);
    let mut a = 0.0;
    let mut b = 0.0;
    for j in 0..x.len() {
        a += w[j] * (u[j] * u[j]).ln_1p() * rho[j];
        b += w[j] * rho[j] * rho[j] / u[j];
    }
    Ok(a + lambda * b.ln())
}

/// Perona–Malik energy of a 1D map, with `u = |T'|` per cell.
pub fn perona_malik_energy(map: &PiecewiseLinearMap, density: &DensitySpec, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if density.dim() != 1 {
        return Err(Error::Dimension("needs a 1D density".into()));
    }
    let breaks = density.breaks1();
    let mut a = 0.0;
    let mut b = 0.0;
    for j in 0..map.cells() {
        let Some(s) = map.slope(j) else { continue };
        let (x0, x1) = (map.x[j], map.x[j + 1]);
        let br = breaks_in(&breaks, x0, x1);
        a += (s * s).ln_1p() * density.mass1(x0, x1);
        let r2 = integrate_with(|x| density.pdf1(x).powi(2), x0, x1, &br, cell_tol()).value;
        if r2 > 0.0 {
            if s == 0.0 {
                return Err(Error::InfiniteEnergy(format!("T' vanishes on cell {j}")));
            }
            b += r2 / s.abs();
        }
    }
    Ok(a + lambda * b.ln())
}

/// `F(x) = x + θ 1{x ≥ x₀}` represented with a jump node pair on `[0, 1]`.
pub fn heaviside_map(theta: f64, x0: f64) -> PiecewiseLinearMap {
    PiecewiseLinearMap {
        x: vec![0.0, x0, x0, 1.0],
        t: vec![0.0, x0, x0 + theta, 1.0 + theta],
    }
}

/// Lipschitz approximation of `heaviside_map` with a ramp of width `1/n` starting at `x₀`.
pub fn heaviside_ramp(theta: f64, x0: f64, n: f64) -> PiecewiseLinearMap {
    let x1 = x0 + 1.0 / n;
    PiecewiseLinearMap {
        x: vec![0.0, x0, x1, 1.0],
        t: vec![0.0, x0, x1 + theta, 1.0 + theta],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    fn uniform() -> DensitySpec {
        DensitySpec::unit_interval()
    }

    fn one() -> BandwidthField {
        BandwidthField::constant(1.0)
    }

    #[test]
    fn attraction_examples() {
        let k = KernelSpec::epanechnikov(1);
        let flat = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 5, |_| 0.3);
        assert_eq!(continuum_attraction(&flat, &k, &one(), &uniform(), Scale::Finite(1.0)).unwrap(), 0.0);
        let id = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 17, |x| x);
        let a = continuum_attraction(&id, &k, &one(), &uniform(), Scale::Finite(1.0)).unwrap();
        let phi = k.phi_s(Scale::Finite(1.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((a - phi).abs() < 1e-13);
        assert!(matches!(
            continuum_attraction(&flat, &k, &one(), &uniform(), Scale::Infinite),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn halving_sigma_shifts_infinite_attraction() {
        let k = KernelSpec::epanechnikov(1);
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let map = PiecewiseLinearMap::uniform_grid(-1.0, 1.0, 101, |x| x + 0.2 * x * x * x);
        let a1 = continuum_attraction(&map, &k, &BandwidthField::KnnProxy, &d, Scale::Infinite).unwrap();
        let s = BandwidthField::KnnProxy;
        let half = |x: f64| 0.5 * s.eval1(x, &d);
        // σ/2 through the decomposition: only C₂ changes
        let dec = attraction_infinity_decomposition(&map, &k, &s, &d).unwrap();
        assert!((dec.sphere_term + dec.c2 - a1).abs() < 1e-10);
        let c = BandwidthField::constant(1.0);
        let a_c = continuum_attraction(&map, &k, &c, &d, Scale::Infinite).unwrap();
        let a_h = continuum_attraction(&map, &k, &BandwidthField::constant(0.5), &d, Scale::Infinite).unwrap();
        assert!((a_h - a_c + 2.0 * 2f64.ln()).abs() < 1e-10);
        assert!(half(0.0) > 0.0);
    }

    #[test]
    fn repulsion_examples() {
        let id = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 9, |x| x);
        assert!(id.repulsion(&uniform()).unwrap().abs() < 1e-12);
        let dbl = id.scaled(2.0);
        assert!((dbl.repulsion(&uniform()).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        let bad = PushforwardDensity::Histogram(Histogram {
            lo: vec![0.0],
            width: vec![1.0],
            shape: vec![1],
            values: vec![0.5],
        });
        assert!(matches!(continuum_repulsion(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn scaling_identity_one_dimensional() {
        let k = KernelSpec::epanechnikov(1);
        let map = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 33, |x| x + 0.3 * x * x);
        let (l, r) = scaling_identity_check(&map, &k, &one(), &uniform(), Scale::Finite(1.0), 1.0).unwrap();
        assert_eq!(l, r);
        let (l, r) = scaling_identity_check(&map, &k, &one(), &uniform(), Scale::Finite(1.0), 2.0).unwrap();
        assert!((l - r).abs() < 1e-10, "{l} {r}");
        let e1 = map.energy(&k, &one(), &uniform(), Scale::Infinite).unwrap().total;
        let e3 = map.dilate(3.0).energy(&k, &one(), &uniform(), Scale::Infinite).unwrap().total;
        assert!((e3 - e1 - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn two_dimensional_maps_are_scale_invariant_at_infinity() {
        let k = KernelSpec::epanechnikov(2);
        let d = DensitySpec::unit_cube(2);
        let map = TriangulatedMap::from_fn([0.0, 0.0], [1.0, 1.0], [5, 5], 2, |x, y| vec![x + 0.2 * y * y, y + 0.1 * x]).unwrap();
        assert!(map.is_injective());
        let e1 = map.energy(&k, &one(), &d, Scale::Infinite).unwrap().total;
        let e3 = map.dilate(3.0).energy(&k, &one(), &d, Scale::Infinite).unwrap().total;
        assert!((e3 - e1).abs() < 1e-9, "{e1} {e3}");
        let folded = TriangulatedMap::from_fn([0.0, 0.0], [1.0, 1.0], [5, 5], 2, |x, y| vec![(x - 0.5).abs(), y]).unwrap();
        assert!(!folded.is_injective());
        let id = TriangulatedMap::from_fn([0.0, 0.0], [1.0, 1.0], [3, 3], 2, |x, y| vec![x, y]).unwrap();
        assert!(id.repulsion(&d).unwrap().abs() < 1e-12);
        let h = id.pushforward_histogram(&d, 8, 4).unwrap();
        assert!((h.mass() - 1.0).abs() < 1e-12);
        assert!(h.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn rearrangement_of_tent() {
        let k = KernelSpec::epanechnikov(1);
        let tent = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 101, |x| (x - 0.5).abs());
        let star = rearrange_1d(&tent);
        for (x, t) in star.x.iter().zip(&star.t) {
            assert!((x - t).abs() < 1e-12);
        }
        let a0 = continuum_attraction(&tent, &k, &one(), &uniform(), Scale::Finite(1.0)).unwrap();
        let a1 = continuum_attraction(&star, &k, &one(), &uniform(), Scale::Finite(1.0)).unwrap();
        assert!((a0 - a1).abs() < 1e-12);
        assert!(star.repulsion(&uniform()).unwrap() < tent.repulsion(&uniform()).unwrap());
        let inc = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 11, |x| x * x + x);
        let r = rearrange_1d(&inc);
        for (a, b) in r.t.iter().zip(&inc.t) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sne_energy_examples() {
        let k = KernelSpec::epanechnikov(1);
        let id = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 9, |x| x);
        let (a, r) = sne_continuum_energy(&id, &k, &one(), &uniform()).unwrap();
        assert!((a - 0.2).abs() < 1e-13 && r.abs() < 1e-12);
        let (a2, r2) = sne_continuum_energy(&id.scaled(2.0), &k, &one(), &uniform()).unwrap();
        assert!((a2 - 4.0 * a).abs() < 1e-12 && (r2 - r + 2f64.ln()).abs() < 1e-12);
        let flat = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 9, |_| 1.0);
        assert!(matches!(sne_continuum_energy(&flat, &k, &one(), &uniform()), Err(Error::DegenerateSupport(_))));
        let g = KernelSpec::new(KernelFamily::Gaussian, 1).unwrap();
        let (a, _) = sne_continuum_energy(&id, &g, &one(), &uniform()).unwrap();
        assert!((a - 1.0).abs() < 1e-10);
    }

    #[test]
    fn perona_malik_examples() {
        let x: Vec<f64> = (0..101).map(|j| j as f64 / 100.0).collect();
        let ones = vec![1.0; x.len()];
        let e = perona_malik_energy_u(&x, &ones, &ones, 1.0).unwrap();
        assert!((e - 2f64.ln()).abs() < 1e-14);
        assert!(perona_malik_energy_u(&x, &ones, &ones, 2.0).is_err());
        // small total density: F[C] → −∞ as C grows
        let rho: Vec<f64> = vec![0.1; x.len()];
        let vals: Vec<f64> = [1e2, 1e3, 1e4, 1e5]
            .iter()
            .map(|&c| perona_malik_energy_u(&x, &vec![c; x.len()], &rho, 0.3).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
        let id = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 9, |x| x);
        assert!((perona_malik_energy(&id, &uniform(), 1.0).unwrap() - 2f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn heaviside_family_energy_converges() {
        let k = KernelSpec::epanechnikov(1);
        let f = heaviside_map(1.0, 0.5);
        let ef = f.energy(&k, &one(), &uniform(), Scale::Finite(1.0)).unwrap().total;
        assert!((ef - k.phi1(1.0)).abs() < 1e-12);
        let errs: Vec<f64> = [10.0, 100.0, 1000.0, 10000.0]
            .iter()
            .map(|&n| (heaviside_ramp(1.0, 0.5, n).energy(&k, &one(), &uniform(), Scale::Finite(1.0)).unwrap().total - ef).abs())
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }
}
