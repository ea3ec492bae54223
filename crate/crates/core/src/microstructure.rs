//! Cutting maps `T_k(x) = P(x) + φ_k(x_{m+1}) e₁` and their energy scans.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::riesz_energy;
use crate::data::Histogram;
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, Scale};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuttingMap {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    /// Transition width; the cut intervals are `[(n − μ)/k, n/k]`, `n = 1..k−1`.
    pub mu: f64,
    pub alpha: Option<f64>,
    pub rescaled: bool,
}

/// `μ = k^{−α/(1−α)}`
pub fn mu_schedule(k: usize, alpha: f64) -> f64 {
    (k as f64).powf(-alpha / (1.0 - alpha))
}

impl CuttingMap {
    pub fn new(d: usize, m: usize, k: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let mut map = Self::with_mu(d, m, k, if k == 1 { 0.25 } else { mu_schedule(k, alpha) })?;
        map.alpha = Some(alpha);
        Ok(map)
    }

    pub fn with_mu(d: usize, m: usize, k: usize, mu: f64) -> Result<Self> {
        if d <= m || m == 0 {
            return Err(Error::Dimension(format!("cutting maps need d > m ≥ 1, got d = {d}, m = {m}")));
        }
        if k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if !(mu > 0.0 && mu < 0.5) {
            return Err(Error::Parameter(format!("μ = {mu} (k = {k}) is outside (0, 1/2)")));
        }
        Ok(CuttingMap {
            d,
            m,
            k,
            mu,
            alpha: None,
            rescaled: false,
        })
    }

    /// The family `T̃_k = k^{−1/(2m)} T_k`.
    pub fn rescale(mut self) -> Self {
        self.rescaled = true;
        self
    }

    pub fn scale_factor(&self) -> f64 {
        if self.rescaled {
            (self.k as f64).powf(-1.0 / (2.0 * self.m as f64))
        } else {
            1.0
        }
    }

    /// `|I_k| = (k − 1) μ / k`
    pub fn cut_fraction(&self) -> f64 {
        (self.k - 1) as f64 * self.mu / self.k as f64
    }

    /// Slope of the ramp in the cut direction.
    pub fn lipschitz_cut(&self) -> f64 {
        if self.k == 1 {
            0.0
        } else {
            self.k as f64 / self.mu
        }
    }

    /// `φ(s) = (k/μ) ∫_0^s 1_{I_k}`.
    pub fn phi(&self, s: f64) -> f64 {
        let kf = self.k as f64;
        let mut v = 0.0;
        for n in 1..self.k {
            let hi = n as f64 / kf;
            let lo = hi - self.mu / kf;
            if s >= hi {
                v += 1.0;
            } else if s > lo {
                v += (s - lo) * kf / self.mu;
            } else {
                break;
            }
        }
        v
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let lam = self.scale_factor();
        let mut y: Vec<f64> = x[..self.m].to_vec();
        y[0] += self.phi(x[self.m]);
        y.iter_mut().for_each(|v| *v *= lam);
        y
    }

    /// Width of strip `n` in the cut coordinate.
    fn strip_width(&self, n: usize) -> f64 {
        let kf = self.k as f64;
        if n + 1 == self.k {
            1.0 / kf
        } else {
            (1.0 - self.mu) / kf
        }
    }

    /// Endpoint values of the first-coordinate density of `T_k` on `[n, n + 1]`.
    fn segment(&self, n: usize) -> (f64, f64) {
        let tri = self.mu / self.k as f64;
        let w = self.strip_width(n);
        (w + if n >= 1 { tri } else { 0.0 }, w + if n + 1 < self.k { tri } else { 0.0 })
    }

    /// Exact `ρ_Y` of the unrescaled map at `y₁` (uniform in the other coordinates).
    pub fn strip_density(&self, y1: f64) -> f64 {
        if !(0.0..=self.k as f64).contains(&y1) {
            return 0.0;
        }
        let n = (y1.floor() as usize).min(self.k - 1);
        let (a, b) = self.segment(n);
        let t = y1 - n as f64;
        a + (b - a) * t
    }

    /// Exact `∫ ρ_Y²`, including the rescaling.
    pub fn l2_squared_exact(&self) -> f64 {
        let s: f64 = (0..self.k)
            .map(|n| {
                let (a, b) = self.segment(n);
                (a * a + a * b + b * b) / 3.0
            })
            .sum();
        s * self.scale_factor().powi(-(self.m as i32))
    }

    /// Exact `max ρ_Y`, including the rescaling.
    pub fn max_density_exact(&self) -> f64 {
        let mx = (0..self.k).map(|n| {
            let (a, b) = self.segment(n);
            a.max(b)
        });
        mx.fold(0.0, f64::max) * self.scale_factor().powi(-(self.m as i32))
    }

    /// `(DP, DP + (k/μ) e₁ e_{m+1}ᵀ)` including the rescaling.
    pub fn jacobians(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let lam = self.scale_factor();
        let p = DMatrix::from_fn(self.m, self.d, |r, c| if r == c { lam } else { 0.0 });
        let mut cut = p.clone();
        cut[(0, self.m)] += lam * self.lipschitz_cut();
        (p, cut)
    }

    /// `A[T_k; Φ] = (1 − |I|) Φ(DP) + |I| Φ(DP + (k/μ) e₁ e_{m+1}ᵀ)` for uniform `ρ_X` and `σ ≡ 1`.
    pub fn attraction(&self, potential: &Potential) -> Result<f64> {
        let (p, cut) = self.jacobians();
        let f = self.cut_fraction();
        let a0 = potential.eval(&p)?;
        if f == 0.0 {
            return Ok(a0);
        }
        Ok((1.0 - f) * a0 + f * potential.eval(&cut)?)
    }

    /// Histogram of `n` Monte-Carlo images, strip-aligned with `bins_per_unit`
    /// bins per unit along `e₁` and one bin across the remaining unit axes.
    pub fn sample_histogram(&self, n: usize, seed: u64, bins_per_unit: usize) -> Result<Histogram> {
        if bins_per_unit == 0 {
            return Err(Error::Resolution("histogram needs at least one bin per strip".into()));
        }
        let lam = self.scale_factor();
        let mut shape = vec![1usize; self.m];
        shape[0] = bins_per_unit * self.k;
        let mut width = vec![lam; self.m];
        width[0] = lam / bins_per_unit as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0u64; shape[0]];
        let mut x = vec![0.0; self.d];
        for _ in 0..n {
            x.iter_mut().for_each(|v| *v = rng.gen::<f64>());
            let y0 = (x[0] + self.phi(x[self.m])) * lam;
            let b = ((y0 / width[0]).floor() as usize).min(shape[0] - 1);
            counts[b] += 1;
        }
        let cell: f64 = width.iter().product();
        let values = counts.iter().map(|&c| c as f64 / (n as f64 * cell)).collect();
        Ok(Histogram {
            lo: vec![0.0; self.m],
            width,
            shape,
            values,
        })
    }
}

/// Attraction potentials used in the scans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Potential {
    /// `C (1 + |A|^α)` with the Frobenius norm.
    Sublinear { c: f64, alpha: f64 },
    /// `Φ_s` of the given kernel.
    Kernel { kernel: KernelSpec, s: Scale },
}

impl Potential {
    pub fn eval(&self, a: &DMatrix<f64>) -> Result<f64> {
        match self {
            Potential::Sublinear { c, alpha } => Ok(c * (1.0 + a.norm().powf(*alpha))),
            Potential::Kernel { kernel, s } => kernel.phi_s(*s, a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub samples: usize,
    pub seed: u64,
    pub bins_per_unit: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            samples: 1_000_000,
            seed: 20_240_601,
            bins_per_unit: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub k: usize,
    pub mu: f64,
    pub attraction: f64,
    /// `R[T_k]` from the sampled histogram.
    pub repulsion: f64,
    pub repulsion_exact: Option<f64>,
    pub max_density: f64,
    pub max_density_exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub d: usize,
    pub m: usize,
    pub rescaled: bool,
    pub rows: Vec<ScanRow>,
    /// OLS slope of `R` vs `log k` over the top half of the list.
    pub repulsion_slope: f64,
    pub attraction_slope: f64,
    /// `(max − min) / mean` of the attraction over the list.
    pub attraction_spread: f64,
    /// max/min of `k · max ρ_Y` over the list.
    pub density_ratio: f64,
}

/// Ordinary least-squares slope.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn top_half_slope(ks: &[usize], v: &[f64]) -> f64 {
    let start = ks.len() / 2;
    let start = start.min(ks.len().saturating_sub(2));
    let x: Vec<f64> = ks[start..].iter().map(|&k| (k as f64).ln()).collect();
    ols_slope(&x, &v[start..])
}

/// Energies of the cutting family over `ks` with `μ = k^{−α/(1−α)}`.
pub fn cutting_energy_scan(d: usize, m: usize, ks: &[usize], alpha: f64, rescaled: bool, potential: &Potential, opts: ScanOptions) -> Result<ScanSummary> {
    if ks.len() < 2 {
        return Err(Error::Parameter("scan needs at least two values of k".into()));
    }
    let rows: Vec<Result<ScanRow>> = ks
        .par_iter()
        .map(|&k| {
            let mut map = CuttingMap::new(d, m, k, alpha)?;
            if rescaled {
                map = map.rescale();
            }
            let hist = map.sample_histogram(opts.samples, opts.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), opts.bins_per_unit)?;
            let (repulsion, repulsion_exact) = if m <= 2 {
                (hist.l2_squared().ln(), Some(map.l2_squared_exact().ln()))
            } else {
                (riesz_energy(&hist)?.ln(), None)
            };
            Ok(ScanRow {
                k,
                mu: map.mu,
                attraction: map.attraction(potential)?,
                repulsion,
                repulsion_exact,
                max_density: hist.max_value(),
                max_density_exact: map.max_density_exact(),
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let r: Vec<f64> = rows.iter().map(|r| r.repulsion).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.attraction).collect();
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let spread = (a.iter().copied().fold(f64::NEG_INFINITY, f64::max) - a.iter().copied().fold(f64::INFINITY, f64::min)) / mean.abs();
    let kd: Vec<f64> = rows.iter().map(|r| r.k as f64 * r.max_density).collect();
    let density_ratio = kd.iter().copied().fold(f64::NEG_INFINITY, f64::max) / kd.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ScanSummary {
        d,
        m,
        rescaled,
        repulsion_slope: top_half_slope(ks, &r),
        attraction_slope: top_half_slope(ks, &a),
        attraction_spread: spread,
        density_ratio,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_breaks;

    #[test]
    fn k1_is_the_projection() {
        let map = CuttingMap::new(3, 2, 1, 0.5).unwrap();
        for x in [[0.1, 0.2, 0.9], [0.7, 0.3, 0.5], [1.0, 0.0, 1.0]] {
            assert_eq!(map.eval(&x), vec![x[0], x[1]]);
        }
        assert_eq!(map.cut_fraction(), 0.0);
    }

    #[test]
    fn first_cut_offsets_by_one() {
        let map = CuttingMap::with_mu(2, 1, 2, 0.1).unwrap();
        assert_eq!(map.eval(&[0.3, 0.7]), vec![1.3]);
        assert_eq!(map.eval(&[0.3, 0.2]), vec![0.3]);
        // mid-ramp: s = 0.475 is halfway through [0.45, 0.5]
        assert!((map.phi(0.475) - 0.5).abs() < 1e-12);
        let (h, eps) = (1e-7, 0.47);
        assert!(((map.phi(eps + h) - map.phi(eps)) / h - map.lipschitz_cut()).abs() < 1e-4);
    }

    #[test]
    fn inadmissible_mu_is_rejected() {
        assert!(CuttingMap::new(2, 1, 2, 0.5).is_err());
        assert!(CuttingMap::new(1, 1, 4, 0.5).is_err());
        assert!(CuttingMap::new(2, 1, 4, 0.5).is_ok());
    }

    #[test]
    fn strip_density_is_a_probability_density() {
        for (k, mu) in [(1, 0.2), (2, 0.3), (5, 0.01), (16, 0.2)] {
            let map = CuttingMap::with_mu(2, 1, k, mu).unwrap();
            let br: Vec<f64> = (1..k).map(|n| n as f64).collect();
            let mass = integrate_breaks(|y| map.strip_density(y), 0.0, k as f64, &br);
            assert!((mass - 1.0).abs() < 1e-12, "{k}");
            let l2 = integrate_breaks(|y| map.strip_density(y).powi(2), 0.0, k as f64, &br);
            assert!((l2 - map.l2_squared_exact()).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_matches_exact_density() {
        let map = CuttingMap::with_mu(2, 1, 4, 0.3).unwrap();
        let h = map.sample_histogram(400_000, 7, 8).unwrap();
        assert!((h.mass() - 1.0).abs() < 1e-12);
        assert!((h.l2_squared() / map.l2_squared_exact() - 1.0).abs() < 5e-3);
        let r = map.rescale();
        let h = CuttingMap::with_mu(3, 2, 4, 0.3).unwrap().rescale().sample_histogram(100_000, 1, 8).unwrap();
        assert!((h.mass() - 1.0).abs() < 1e-12);
        assert!(r.scale_factor() == 1.0 / 2.0);
    }

    #[test]
    fn sublinear_attraction_stays_bounded() {
        let pot = Potential::Sublinear { c: 1.0, alpha: 0.5 };
        let vals: Vec<f64> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&k| CuttingMap::new(2, 1, k, 0.5).unwrap().attraction(&pot).unwrap())
            .collect();
        assert!(vals.iter().all(|v| *v > 1.0 && *v < 4.0), "{vals:?}");
    }

    #[test]
    fn ols_recovers_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        assert!((ols_slope(&x, &y) + 0.5).abs() < 1e-14);
    }
}
