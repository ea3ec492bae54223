//! Data densities, sampling, bandwidth fields and pushforward densities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::continuum::PiecewiseLinearMap;
use crate::error::{Error, Result};
use crate::quad::{integrate_with, Tol};

/// Number of grid points used to bound the density.
pub const BOUND_GRID: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DensityFamily {
    Uniform,
    /// `p(G_σ(x − c) + G_σ(x + c)) + (1 − 2p)/|Ω|`, renormalized on the interval.
    Mixture {
        p: f64,
        c: f64,
        var: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    /// One `[lo, hi]` pair per axis.
    pub domain: Vec<[f64; 2]>,
    #[serde(flatten)]
    pub family: DensityFamily,
}

/// Data density `ρ_X` on an interval or box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityConfig", into = "DensityConfig")]
pub struct DensitySpec {
    config: DensityConfig,
    norm: f64,
    masses: [f64; 2],
    rho_min: f64,
    rho_max: f64,
}

impl From<DensitySpec> for DensityConfig {
    fn from(d: DensitySpec) -> Self {
        d.config
    }
}

impl TryFrom<DensityConfig> for DensitySpec {
    type Error = Error;
    fn try_from(c: DensityConfig) -> Result<Self> {
        DensitySpec::new(c)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

impl DensitySpec {
    pub fn new(config: DensityConfig) -> Result<Self> {
        if config.domain.is_empty() {
            return Err(Error::Parameter("density domain must have at least one axis".into()));
        }
        for [a, b] in &config.domain {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::Parameter(format!("bad domain interval [{a}, {b}]")));
            }
        }
        let mut spec = DensitySpec {
            config,
            norm: 1.0,
            masses: [0.0; 2],
            rho_min: 0.0,
            rho_max: 0.0,
        };
        match spec.config.family.clone() {
            DensityFamily::Uniform => {
                let v = spec.volume();
                spec.norm = 1.0 / v;
                spec.rho_min = 1.0 / v;
                spec.rho_max = 1.0 / v;
            }
            DensityFamily::Mixture { p, c, var } => {
                if spec.dim() != 1 {
                    return Err(Error::Parameter("mixture density is one-dimensional".into()));
                }
                if !(0.0..0.5).contains(&p) || !(var > 0.0) || !c.is_finite() {
                    return Err(Error::Parameter(format!("mixture needs p ∈ [0, 1/2), var > 0 (p={p}, var={var})")));
                }
                let [a, b] = spec.config.domain[0];
                let sd = var.sqrt();
                let m_plus = std_normal_cdf((b - c) / sd) - std_normal_cdf((a - c) / sd);
                let m_minus = std_normal_cdf((b + c) / sd) - std_normal_cdf((a + c) / sd);
                spec.masses = [m_plus, m_minus];
                let z = p * (m_plus + m_minus) + (1.0 - 2.0 * p);
                spec.norm = 1.0 / z;
                let (lo, hi) = spec.grid_bounds();
                spec.rho_min = lo;
                spec.rho_max = hi;
            }
        }
        if !(spec.rho_min > 0.0) {
            return Err(Error::Parameter("density must be bounded below by a positive constant".into()));
        }
        Ok(spec)
    }

    pub fn uniform(domain: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(DensityConfig {
            domain,
            family: DensityFamily::Uniform,
        })
    }

    pub fn unit_interval() -> Self {
        Self::uniform(vec![[0.0, 1.0]]).expect("valid domain")
    }

    pub fn unit_cube(d: usize) -> Self {
        Self::uniform(vec![[0.0, 1.0]; d]).expect("valid domain")
    }

    /// The two-bump mixture on `[-1, 1]`.
    pub fn mixture(p: f64, var: f64, c: f64) -> Result<Self> {
        Self::new(DensityConfig {
            domain: vec![[-1.0, 1.0]],
            family: DensityFamily::Mixture { p, c, var },
        })
    }

    /// Parse `uniform`, `uniform:a,b` or `mixture:p,var,c`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, args) = text.split_once(':').unwrap_or((text, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Parameter(format!("bad number '{t}'"))))
                .collect::<Result<_>>()?
        };
        match (kind, nums.as_slice()) {
            ("uniform", []) => Ok(Self::unit_interval()),
            ("uniform", [a, b]) => Self::uniform(vec![[*a, *b]]),
            ("mixture", [p, var, c]) => Self::mixture(*p, *var, *c),
            _ => Err(Error::Parameter(format!("cannot parse density '{text}'"))),
        }
    }

    pub fn config(&self) -> &DensityConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.domain.len()
    }

    pub fn domain(&self) -> &[[f64; 2]] {
        &self.config.domain
    }

    pub fn volume(&self) -> f64 {
        self.config.domain.iter().map(|[a, b]| b - a).product()
    }

    pub fn rho_min(&self) -> f64 {
        self.rho_min
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.config.family, DensityFamily::Uniform)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.config.domain).all(|(v, [a, b])| *v >= *a && *v <= *b)
    }

    /// `ρ_X(x)`; zero outside the domain.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        match &self.config.family {
            DensityFamily::Uniform => self.norm,
            DensityFamily::Mixture { .. } => self.mixture_raw(x[0]) * self.norm,
        }
    }

    /// One-dimensional `ρ_X(x)`.
    #[inline]
    pub fn pdf1(&self, x: f64) -> f64 {
        self.pdf(&[x])
    }

    fn mixture_raw(&self, x: f64) -> f64 {
        match self.config.family {
            DensityFamily::Mixture { p, c, var } => {
                let [a, b] = self.config.domain[0];
                let g = |t: f64| (-(t * t) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                p * (g(x - c) + g(x + c)) + (1.0 - 2.0 * p) / (b - a)
            }
            DensityFamily::Uniform => 1.0,
        }
    }

    /// Cumulative distribution in one dimension.
    pub fn cdf1(&self, x: f64) -> f64 {
        let [a, b] = self.config.domain[0];
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return 1.0;
        }
        match self.config.family {
            DensityFamily::Uniform => (x - a) / (b - a),
            DensityFamily::Mixture { p, c, var } => {
                let sd = var.sqrt();
                let gp = std_normal_cdf((x - c) / sd) - std_normal_cdf((a - c) / sd);
                let gm = std_normal_cdf((x + c) / sd) - std_normal_cdf((a + c) / sd);
                self.norm * (p * (gp + gm) + (1.0 - 2.0 * p) * (x - a) / (b - a))
            }
        }
    }

    /// `∫_lo^hi ρ_X` in one dimension.
    pub fn mass1(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        match self.config.family {
            DensityFamily::Uniform => {
                let [a, b] = self.config.domain[0];
                (hi.min(b) - lo.max(a)).max(0.0) / (b - a)
            }
            // Direct quadrature avoids cancellation in CDF differences on short cells.
            _ => integrate_with(|x| self.pdf1(x), lo, hi, &self.breaks1(), Tol::new(1e-300, 1e-13)).value,
        }
    }

    /// Points where the one-dimensional density changes character.
    pub fn breaks1(&self) -> Vec<f64> {
        match self.config.family {
            DensityFamily::Mixture { c, var, .. } => {
                let sd = var.sqrt();
                let mut v = Vec::new();
                for center in [-c, c] {
                    for k in [-3.0, -1.0, 0.0, 1.0, 3.0] {
                        v.push(center + k * sd);
                    }
                }
                v
            }
            DensityFamily::Uniform => Vec::new(),
        }
    }

    fn grid_bounds(&self) -> (f64, f64) {
        let [a, b] = self.config.domain[0];
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..BOUND_GRID {
            let x = a + (b - a) * i as f64 / (BOUND_GRID - 1) as f64;
            let v = self.pdf1(x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// `n` i.i.d. draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::Parameter("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n * d);
        match self.config.family {
            DensityFamily::Uniform => {
                for _ in 0..n {
                    for [a, b] in &self.config.domain {
                        points.push(a + (b - a) * rng.gen::<f64>());
                    }
                }
            }
            DensityFamily::Mixture { p, c, var } => {
                let [a, b] = self.config.domain[0];
                let w_plus = p * self.masses[0] * self.norm;
                let w_minus = p * self.masses[1] * self.norm;
                let plus = Normal::new(c, var.sqrt()).expect("positive variance");
                let minus = Normal::new(-c, var.sqrt()).expect("positive variance");
                for _ in 0..n {
                    let u: f64 = rng.gen();
                    let x = if u < w_plus {
                        loop {
                            let x = plus.sample(&mut rng);
                            if x >= a && x <= b {
                                break x;
                            }
                        }
                    } else if u < w_plus + w_minus {
                        loop {
                            let x = minus.sample(&mut rng);
                            if x >= a && x <= b {
                                break x;
                            }
                        }
                    } else {
                        a + (b - a) * rng.gen::<f64>()
                    };
                    points.push(x);
                }
            }
        }
        Ok(PointCloud { d, points, seed })
    }
}

/// Sampled points, row-major `n × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub d: usize,
    pub points: Vec<f64>,
    pub seed: u64,
}

impl PointCloud {
    pub fn from_points(d: usize, points: Vec<f64>) -> Result<Self> {
        if d == 0 || !points.len().is_multiple_of(d) {
            return Err(Error::Dimension("point array length must be a multiple of d".into()));
        }
        Ok(PointCloud { d, points, seed: 0 })
    }

    pub fn n(&self) -> usize {
        self.points.len() / self.d
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }
}

/// Bandwidth field `σ(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum BandwidthField {
    Constant {
        value: f64,
    },
    /// `σ(x) = ρ_max / ρ_X(x)`
    KnnProxy,
    /// `σ(x) = ρ_X(x)^{-1/d}`
    InverseDensityPower,
}

impl BandwidthField {
    pub fn constant(value: f64) -> Self {
        BandwidthField::Constant { value }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "knn" | "knn-proxy" => Ok(BandwidthField::KnnProxy),
            "inverse-density-power" | "power" => Ok(BandwidthField::InverseDensityPower),
            t => {
                let v = t.strip_prefix("constant:").unwrap_or(t);
                let value = v.parse::<f64>().map_err(|_| Error::Parameter(format!("bad bandwidth field '{text}'")))?;
                if !(value > 0.0) {
                    return Err(Error::Parameter("constant bandwidth must be positive".into()));
                }
                Ok(BandwidthField::Constant { value })
            }
        }
    }

    /// `σ(x)` for a point inside the domain.
    pub fn eval(&self, x: &[f64], density: &DensitySpec) -> f64 {
        match *self {
            BandwidthField::Constant { value } => value,
            BandwidthField::KnnProxy => density.rho_max() / density.pdf(x),
            BandwidthField::InverseDensityPower => density.pdf(x).powf(-1.0 / density.dim() as f64),
        }
    }

    #[inline]
    pub fn eval1(&self, x: f64, density: &DensitySpec) -> f64 {
        self.eval(&[x], density)
    }

    /// `(σ_min, σ_max)` implied by the density bounds.
    pub fn bounds(&self, density: &DensitySpec) -> (f64, f64) {
        match *self {
            BandwidthField::Constant { value } => (value, value),
            BandwidthField::KnnProxy => (1.0, density.rho_max() / density.rho_min()),
            BandwidthField::InverseDensityPower => {
                let e = -1.0 / density.dim() as f64;
                (density.rho_max().powf(e), density.rho_min().powf(e))
            }
        }
    }
}

/// Regular histogram (or binned KDE) on an axis-aligned box, last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: Vec<f64>,
    pub width: Vec<f64>,
    pub shape: Vec<usize>,
    /// Density values per bin.
    pub values: Vec<f64>,
}

impl Histogram {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn cell_volume(&self) -> f64 {
        self.width.iter().product()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn l2_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Bin masses (value × volume).
    pub fn masses(&self) -> Vec<f64> {
        let v = self.cell_volume();
        self.values.iter().map(|x| x * v).collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut k = 0;
        for (i, &s) in idx.iter().zip(&self.shape) {
            k = k * s + i;
        }
        k
    }

    fn locate(&self, y: &[f64]) -> Option<usize> {
        let mut k = 0;
        for a in 0..self.dim() {
            let t = (y[a] - self.lo[a]) / self.width[a];
            if !(t >= 0.0) {
                return None;
            }
            let mut i = t.floor() as usize;
            if i >= self.shape[a] {
                // points on the closing edge belong to the last bin
                if t <= self.shape[a] as f64 * (1.0 + 1e-12) {
                    i = self.shape[a] - 1;
                } else {
                    return None;
                }
            }
            k = k * self.shape[a] + i;
        }
        Some(k)
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        self.locate(y).map_or(0.0, |k| self.values[k])
    }

    /// Weighted point histogram with explicit geometry.
    pub fn from_weighted_points(points: &[f64], weights: Option<&[f64]>, lo: Vec<f64>, width: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let m = shape.len();
        if lo.len() != m || width.len() != m || !points.len().is_multiple_of(m) {
            return Err(Error::Dimension("histogram geometry mismatch".into()));
        }
        let n = points.len() / m;
        let mut h = Histogram {
            lo,
            width,
            shape,
            values: vec![0.0; 0],
        };
        h.values = vec![0.0; h.shape.iter().product()];
        let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
        let vol = h.cell_volume();
        for i in 0..n {
            let y = &points[i * m..(i + 1) * m];
            let w = weights.map_or(1.0, |w| w[i]);
            let k = h
                .locate(y)
                .ok_or_else(|| Error::Resolution(format!("point {i} lies outside the histogram box")))?;
            h.values[k] += w;
        }
        for v in h.values.iter_mut() {
            *v /= total * vol;
        }
        Ok(h)
    }
}

/// One-dimensional pushforward by a piecewise linear map, evaluated branch by branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coarea1D {
    pub map: PiecewiseLinearMap,
    pub density: DensitySpec,
}

impl Coarea1D {
    /// `ρ_Y(y) = Σ_branches ρ_X(x)/|T'(x)|`.
    pub fn eval(&self, y: f64) -> f64 {
        let x = &self.map.x;
        let t = &self.map.t;
        let top = self.map.range().1;
        let mut s = 0.0;
        for j in 0..x.len() - 1 {
            let dx = x[j + 1] - x[j];
            if dx <= 0.0 {
                continue;
            }
            let (ya, yb) = (t[j].min(t[j + 1]), t[j].max(t[j + 1]));
            // half-open so shared nodes are counted once
            if y < ya || y > yb || ya == yb || (y == yb && y < top) {
                continue;
            }
            let a = (t[j + 1] - t[j]) / dx;
            let xs = x[j] + (y - t[j]) / a;
            s += self.density.pdf1(xs) / a.abs();
        }
        s
    }

    pub fn mass(&self) -> f64 {
        let x = &self.map.x;
        (0..x.len() - 1).map(|j| self.density.mass1(x[j], x[j + 1])).sum()
    }

    /// `∫ ρ_Y²`, infinite when a cell of positive length is flat.
    pub fn l2_squared(&self) -> f64 {
        let x = &self.map.x;
        let t = &self.map.t;
        struct Piece {
            ya: f64,
            yb: f64,
            x0: f64,
            t0: f64,
            a: f64,
        }
        let mut pieces = Vec::new();
        for j in 0..x.len() - 1 {
            let dx = x[j + 1] - x[j];
            if dx <= 0.0 {
                continue;
            }
            if t[j + 1] == t[j] {
                if self.density.mass1(x[j], x[j + 1]) > 0.0 {
                    return f64::INFINITY;
                }
                continue;
            }
            let a = (t[j + 1] - t[j]) / dx;
            pieces.push(Piece {
                ya: t[j].min(t[j + 1]),
                yb: t[j].max(t[j + 1]),
                x0: x[j],
                t0: t[j],
                a,
            });
        }
        let mut breaks: Vec<f64> = pieces.iter().flat_map(|p| [p.ya, p.yb]).collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let mut order: Vec<usize> = (0..pieces.len()).collect();
        order.sort_by(|&i, &j| pieces[i].ya.total_cmp(&pieces[j].ya));
        let mut active: Vec<usize> = Vec::new();
        let mut next = 0;
        let mut total = 0.0;
        let dens_breaks = self.density.breaks1();
        for w in breaks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            active.retain(|&i| pieces[i].yb > lo);
            while next < order.len() && pieces[order[next]].ya <= lo {
                if pieces[order[next]].yb > lo {
                    active.push(order[next]);
                }
                next += 1;
            }
            if active.is_empty() {
                continue;
            }
            let f = |y: f64| {
                let mut s = 0.0;
                for &i in &active {
                    let p = &pieces[i];
                    let xs = p.x0 + (y - p.t0) / p.a;
                    s += self.density.pdf1(xs) / p.a.abs();
                }
                s * s
            };
            if self.density.is_uniform() && active.len() == 1 {
                let v = f(0.5 * (lo + hi));
                total += v * (hi - lo);
                continue;
            }
            // map density breakpoints into y for each active branch
            let mut yb: Vec<f64> = Vec::new();
            for &i in &active {
                let p = &pieces[i];
                for &xb in &dens_breaks {
                    let y = p.t0 + p.a * (xb - p.x0);
                    if y > lo && y < hi {
                        yb.push(y);
                    }
                }
            }
            total += integrate_with(f, lo, hi, &yb, Tol::new(1e-300, 1e-13)).value;
        }
        total
    }

    pub fn max_value(&self) -> f64 {
        let mut m = 0.0f64;
        for &y in &self.map.t {
            m = m.max(self.eval(y));
        }
        let n = 4 * self.map.x.len();
        let (lo, hi) = self.map.range();
        for i in 0..=n {
            m = m.max(self.eval(lo + (hi - lo) * i as f64 / n as f64));
        }
        m
    }
}

/// Pushforward density representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "representation", rename_all = "kebab-case")]
pub enum PushforwardDensity {
    ExactMonotone1d(Coarea1D),
    Histogram(Histogram),
    Kde(Histogram),
}

impl PushforwardDensity {
    pub fn dim(&self) -> usize {
        match self {
            PushforwardDensity::ExactMonotone1d(_) => 1,
            PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => h.dim(),
        }
    }

    pub fn mass(&self) -> f64 {
        match self {
            PushforwardDensity::ExactMonotone1d(c) => c.mass(),
            PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => h.mass(),
        }
    }

    pub fn l2_squared(&self) -> f64 {
        match self {
            PushforwardDensity::ExactMonotone1d(c) => c.l2_squared(),
            PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => h.l2_squared(),
        }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            PushforwardDensity::ExactMonotone1d(c) => c.eval(y[0]),
            PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => h.eval(y),
        }
    }

    pub fn max_value(&self) -> f64 {
        match self {
            PushforwardDensity::ExactMonotone1d(c) => c.max_value(),
            PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => h.max_value(),
        }
    }

    /// Mass tolerance appropriate for the representation.
    pub fn mass_tolerance(&self) -> f64 {
        match self {
            PushforwardDensity::Kde(_) => 1e-3,
            _ => 1e-6,
        }
    }

    /// Rows `(y, ρ_Y(y))` for CSV emission.
    pub fn rows(&self) -> Vec<(Vec<f64>, f64)> {
        match self {
            PushforwardDensity::ExactMonotone1d(c) => {
                let mut out = Vec::new();
                let (x, t) = (&c.map.x, &c.map.t);
                for j in 0..x.len() - 1 {
                    if x[j + 1] <= x[j] {
                        continue;
                    }
                    let a = (t[j + 1] - t[j]) / (x[j + 1] - x[j]);
                    out.push((vec![t[j]], c.density.pdf1(x[j]) / a));
                    out.push((vec![t[j + 1]], c.density.pdf1(x[j + 1]) / a));
                }
                out
            }
            PushforwardDensity::Histogram(h) | PushforwardDensity::Kde(h) => {
                let m = h.dim();
                let mut out = Vec::with_capacity(h.values.len());
                let mut idx = vec![0usize; m];
                for &v in &h.values {
                    let c: Vec<f64> = (0..m).map(|a| h.lo[a] + (idx[a] as f64 + 0.5) * h.width[a]).collect();
                    out.push((c, v));
                    for a in (0..m).rev() {
                        idx[a] += 1;
                        if idx[a] < h.shape[a] {
                            break;
                        }
                        idx[a] = 0;
                    }
                }
                out
            }
        }
    }
}

/// Pushforward of `ρ_X` under a 1D piecewise linear map.
///
/// Strictly increasing maps give the exact density; otherwise an exact-mass
/// histogram is returned and the flag is `false`.
pub fn pushforward_density_1d(map: &PiecewiseLinearMap, density: &DensitySpec) -> Result<(PushforwardDensity, bool)> {
    if density.dim() != 1 {
        return Err(Error::Dimension("pushforward_density_1d needs a 1D density".into()));
    }
    if map.is_strictly_increasing() {
        return Ok((
            PushforwardDensity::ExactMonotone1d(Coarea1D {
                map: map.clone(),
                density: density.clone(),
            }),
            true,
        ));
    }
    let bins = (map.x.len() - 1).max(16);
    Ok((PushforwardDensity::Histogram(exact_mass_histogram(map, density, bins)?), false))
}

/// Histogram whose bin masses are the exact `ρ_X`-mass mapped into each bin.
pub fn exact_mass_histogram(map: &PiecewiseLinearMap, density: &DensitySpec, bins: usize) -> Result<Histogram> {
    let (lo, hi) = map.range();
    if !(hi > lo) {
        return Err(Error::DegenerateSupport("map is constant".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut mass = vec![0.0; bins];
    let (x, t) = (&map.x, &map.t);
    let bin_of = |y: f64| (((y - lo) / width).floor() as usize).min(bins - 1);
    for j in 0..x.len() - 1 {
        if x[j + 1] <= x[j] {
            continue;
        }
        if t[j + 1] == t[j] {
            mass[bin_of(t[j])] += density.mass1(x[j], x[j + 1]);
            continue;
        }
        let a = (t[j + 1] - t[j]) / (x[j + 1] - x[j]);
        let (ya, yb) = (t[j].min(t[j + 1]), t[j].max(t[j + 1]));
        let (ba, bb) = (bin_of(ya), bin_of(yb));
        for (b, slot) in mass.iter_mut().enumerate().take(bb + 1).skip(ba) {
            let y0 = (lo + b as f64 * width).max(ya);
            let y1 = (lo + (b + 1) as f64 * width).min(yb);
            if y1 <= y0 {
                continue;
            }
            let xa = x[j] + (y0 - t[j]) / a;
            let xb = x[j] + (y1 - t[j]) / a;
            *slot += density.mass1(xa.min(xb), xa.max(xb));
        }
    }
    Ok(Histogram {
        lo: vec![lo],
        width: vec![width],
        shape: vec![bins],
        values: mass.into_iter().map(|m| m / width).collect(),
    })
}

/// Estimator for `pushforward_density_md`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Estimator {
    /// `bins` per axis; default `⌈n^{1/(m+2)}⌉`.
    Histogram { bins: Option<usize> },
    /// Gaussian product kernel, Scott bandwidth, binned exactly on a `bins`-per-axis grid.
    Kde { bins: Option<usize> },
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::Histogram { bins: None }
    }
}

/// Density estimate of embedded points (`n × m`, row-major).
pub fn pushforward_density_md(points: &[f64], m: usize, estimator: Estimator) -> Result<PushforwardDensity> {
    if !(1..=3).contains(&m) || !points.len().is_multiple_of(m) {
        return Err(Error::Dimension(format!("m must be 1, 2 or 3 (got {m})")));
    }
    let n = points.len() / m;
    if n < 2 {
        return Err(Error::Parameter("need at least two points".into()));
    }
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        for a in 0..m {
            lo[a] = lo[a].min(points[i * m + a]);
            hi[a] = hi[a].max(points[i * m + a]);
        }
    }
    if (0..m).all(|a| hi[a] == lo[a]) {
        return Err(Error::DegenerateSupport("all points coincide".into()));
    }
    for a in 0..m {
        if hi[a] == lo[a] {
            // flat axis: give it unit extent so the box has positive volume
            lo[a] -= 0.5;
            hi[a] += 0.5;
        }
    }
    match estimator {
        Estimator::Histogram { bins } => {
            let b = bins.unwrap_or_else(|| (n as f64).powf(1.0 / (m as f64 + 2.0)).ceil() as usize).max(1);
            let width: Vec<f64> = (0..m).map(|a| (hi[a] - lo[a]) / b as f64).collect();
            Ok(PushforwardDensity::Histogram(Histogram::from_weighted_points(
                points,
                None,
                lo,
                width,
                vec![b; m],
            )?))
        }
        Estimator::Kde { bins } => {
            let b = bins.unwrap_or(match m {
                1 => 256,
                2 => 64,
                _ => 24,
            });
            let mut bw = vec![0.0; m];
            for (a, h) in bw.iter_mut().enumerate() {
                let mean = (0..n).map(|i| points[i * m + a]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (points[i * m + a] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                let sd = if var > 0.0 { var.sqrt() } else { (hi[a] - lo[a]) / 4.0 };
                *h = sd * (n as f64).powf(-1.0 / (m as f64 + 4.0));
            }
            let glo: Vec<f64> = (0..m).map(|a| lo[a] - 6.0 * bw[a]).collect();
            let width: Vec<f64> = (0..m).map(|a| (hi[a] + 6.0 * bw[a] - glo[a]) / b as f64).collect();
            let mut values = vec![0.0; b.pow(m as u32)];
            let mut axis_mass = vec![vec![0.0; b]; m];
            for i in 0..n {
                for a in 0..m {
                    let x = points[i * m + a];
                    for (k, slot) in axis_mass[a].iter_mut().enumerate() {
                        let e0 = glo[a] + k as f64 * width[a];
                        let e1 = e0 + width[a];
                        *slot = std_normal_cdf((e1 - x) / bw[a]) - std_normal_cdf((e0 - x) / bw[a]);
                    }
                }
                match m {
                    1 => {
                        for k in 0..b {
                            values[k] += axis_mass[0][k];
                        }
                    }
                    2 => {
                        for k0 in 0..b {
                            for k1 in 0..b {
                                values[k0 * b + k1] += axis_mass[0][k0] * axis_mass[1][k1];
                            }
                        }
                    }
                    _ => {
                        for k0 in 0..b {
                            for k1 in 0..b {
                                let w = axis_mass[0][k0] * axis_mass[1][k1];
                                for k2 in 0..b {
                                    values[(k0 * b + k1) * b + k2] += w * axis_mass[2][k2];
                                }
                            }
                        }
                    }
                }
            }
            let vol: f64 = width.iter().product();
            for v in values.iter_mut() {
                *v /= n as f64 * vol;
            }
            Ok(PushforwardDensity::Kde(Histogram {
                lo: glo,
                width,
                shape: vec![b; m],
                values,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;

    #[test]
    fn mixture_normalized_and_bounded() {
        for c in [0.0, 0.1, 0.5] {
            let d = DensitySpec::mixture(0.4, 0.005, c).unwrap();
            let m = integrate_with(|x| d.pdf1(x), -1.0, 1.0, &d.breaks1(), Tol::new(1e-14, 1e-13)).value;
            assert!((m - 1.0).abs() < 1e-8, "c={c}: {m}");
            assert!((d.cdf1(1.0) - 1.0).abs() < 1e-15);
            assert!((d.cdf1(0.3) - d.mass1(-1.0, 0.3)).abs() < 1e-10);
            assert!(d.rho_min() > 0.0 && d.rho_min() <= d.rho_max());
        }
        // printed form on [−1, 1]
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let g = |t: f64| (-(t * t) / 0.01).exp() / (2.0 * std::f64::consts::PI * 0.005).sqrt();
        let printed = 0.4 * (g(0.2 - 0.5) + g(0.2 + 0.5)) + 0.5 * (1.0 - 0.8);
        assert!((d.pdf1(0.2) - printed).abs() < 1e-9);
    }

    #[test]
    fn uniform_sample_mean() {
        let d = DensitySpec::unit_interval();
        let n = 100_000;
        let pc = d.sample(n, 7).unwrap();
        let mean = pc.points.iter().sum::<f64>() / n as f64;
        let bound = 3.0 * (1.0 / 12f64.sqrt()) / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < bound);
        let one = d.sample(1, 3).unwrap();
        assert!(d.contains(one.point(0)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.1).unwrap();
        assert_eq!(d.sample(500, 11).unwrap(), d.sample(500, 11).unwrap());
        assert_ne!(d.sample(500, 11).unwrap(), d.sample(500, 12).unwrap());
    }

    #[test]
    fn mixture_sample_histogram_matches_density() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.0).unwrap();
        let n = 400_000;
        let pc = d.sample(n, 1).unwrap();
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for &x in &pc.points {
            counts[(((x + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let lo = -1.0 + 2.0 * k as f64 / bins as f64;
            let hi = lo + 2.0 / bins as f64;
            let expect = d.mass1(lo, hi);
            let sd = (expect / n as f64).sqrt();
            assert!((c as f64 / n as f64 - expect).abs() < 5.0 * sd + 1e-4, "bin {k}");
        }
    }

    #[test]
    fn bandwidth_fields() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let b = BandwidthField::KnnProxy;
        let (lo, hi) = b.bounds(&d);
        for i in 0..100 {
            let x = -1.0 + 2.0 * i as f64 / 99.0;
            let s = b.eval1(x, &d);
            assert!(s >= lo - 1e-9 && s <= hi + 1e-9);
            assert!((s * d.pdf1(x) - d.rho_max()).abs() < 1e-12);
        }
        let u = DensitySpec::uniform(vec![[0.0, 2.0], [0.0, 2.0]]).unwrap();
        assert!((BandwidthField::InverseDensityPower.eval(&[1.0, 1.0], &u) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn pushforward_examples() {
        let u = DensitySpec::unit_interval();
        let id = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 9, |x| x);
        let (p, mono) = pushforward_density_1d(&id, &u).unwrap();
        assert!(mono);
        assert!((p.eval(&[0.37]) - 1.0).abs() < 1e-14);
        assert!((p.mass() - 1.0).abs() < 1e-14);
        let dbl = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 9, |x| 2.0 * x);
        let (p, _) = pushforward_density_1d(&dbl, &u).unwrap();
        assert!((p.eval(&[1.5]) - 0.5).abs() < 1e-14);
        assert!((p.l2_squared() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pushforward_square_map_l2() {
        // T(x) = x² on a fine grid: ∫_ε^1 (1/(2√y))² dy = (1/4) log(1/ε)
        let u = DensitySpec::unit_interval();
        let eps: f64 = 1e-2;
        let n = 4000;
        let x0 = eps.sqrt();
        let map = PiecewiseLinearMap::uniform_grid(x0, 1.0, n, |x| x * x);
        let c = Coarea1D { map, density: u };
        let exact = 0.25 * (1.0 / eps).ln();
        let v = c.l2_squared();
        assert!((v - exact).abs() / exact < 1e-5, "{v} vs {exact}");
    }

    #[test]
    fn l2_matches_reciprocal_slope_integral() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let map = PiecewiseLinearMap::uniform_grid(-1.0, 1.0, 301, |x| x + 0.3 * x.powi(3) + 0.05 * (5.0 * x).sin());
        let c = Coarea1D {
            map: map.clone(),
            density: d.clone(),
        };
        let direct: f64 = (0..map.x.len() - 1)
            .map(|j| {
                let a = (map.t[j + 1] - map.t[j]) / (map.x[j + 1] - map.x[j]);
                integrate_with(|x| d.pdf1(x).powi(2), map.x[j], map.x[j + 1], &d.breaks1(), Tol::new(1e-300, 1e-13)).value / a
            })
            .sum();
        assert!((c.l2_squared() - direct).abs() < 1e-6 * direct);
        assert!((c.mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nonmonotone_falls_back_to_histogram() {
        let u = DensitySpec::unit_interval();
        let map = PiecewiseLinearMap::uniform_grid(0.0, 1.0, 101, |x| (x - 0.5).abs());
        let (p, mono) = pushforward_density_1d(&map, &u).unwrap();
        assert!(!mono);
        assert!(matches!(p, PushforwardDensity::Histogram(_)));
        assert!((p.mass() - 1.0).abs() < 1e-12);
        // two branches of slope 1 stacked on [0, 1/2]
        assert!((p.eval(&[0.2]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn md_histograms() {
        let mut pts = Vec::new();
        let k = 40;
        for i in 0..k {
            for j in 0..k {
                pts.push((i as f64 + 0.5) / k as f64);
                pts.push((j as f64 + 0.5) / k as f64);
            }
        }
        let p = pushforward_density_md(&pts, 2, Estimator::Histogram { bins: Some(8) }).unwrap();
        assert!((p.mass() - 1.0).abs() < 1e-12);
        if let PushforwardDensity::Histogram(h) = &p {
            let mean = h.values.iter().sum::<f64>() / h.values.len() as f64;
            assert!(h.values.iter().all(|v| (v - mean).abs() < 1e-12));
        }
        let two = pushforward_density_md(&[0.0, 1.0], 1, Estimator::default()).unwrap();
        if let PushforwardDensity::Histogram(h) = &two {
            assert_eq!(h.shape, vec![2]);
            assert!(h.masses().iter().all(|m| (m - 0.5).abs() < 1e-15));
        }
        assert!(matches!(
            pushforward_density_md(&[0.3, 0.3, 0.3], 1, Estimator::default()),
            Err(Error::DegenerateSupport(_))
        ));
        // clusters: masses per half-space
        let pts: Vec<f64> = (0..300)
            .map(|i| if i < 100 { -5.0 + 0.001 * i as f64 } else { 5.0 + 0.001 * i as f64 })
            .collect();
        let p = pushforward_density_md(&pts, 1, Estimator::Histogram { bins: Some(10) }).unwrap();
        let left = integrate(|y| p.eval(&[y]), -6.0, 0.0);
        assert!((left - 1.0 / 3.0).abs() < 1e-9);
        let kde = pushforward_density_md(&pts, 1, Estimator::Kde { bins: None }).unwrap();
        assert!((kde.mass() - 1.0).abs() < 1e-3);
    }
}
