//! Exact 1D continuum solver: invert `Θ(v_b) = b σ ρ` and iterate `u ← u_{B[u]}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::PiecewiseLinearMap;
use crate::data::{BandwidthField, DensitySpec};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::quad::{cumulative_trapezoid, trapezoid_weights};

/// Scalar potential `Φ` with `Θ(v) = v² Φ'(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Potential1D {
    /// `Φ_s(v) = Φ₁(sv) − 2 log s` of a 1D kernel.
    Kernel { kernel: KernelSpec, s: f64 },
    /// `Φ(v) = log(1 + v²)`
    PeronaMalik,
}

impl Potential1D {
    pub fn kernel(kernel: KernelSpec) -> Self {
        Potential1D::Kernel { kernel, s: 1.0 }
    }

    pub fn phi(&self, v: f64) -> f64 {
        match *self {
            Potential1D::Kernel { kernel, s } => kernel.phi1(s * v) - 2.0 * s.ln(),
            Potential1D::PeronaMalik => (v * v).ln_1p(),
        }
    }

    pub fn theta(&self, v: f64) -> Result<f64> {
        match *self {
            Potential1D::Kernel { kernel, s } => Ok(kernel.theta(s * v)? / s),
            Potential1D::PeronaMalik => Ok(2.0 * v * v * v / (1.0 + v * v)),
        }
    }

    /// `Φ'(v) = Θ(v)/v²`
    pub fn phi_prime(&self, v: f64) -> Result<f64> {
        if v == 0.0 {
            return Ok(0.0);
        }
        Ok(self.theta(v)? / (v * v))
    }
}

/// Solve `Θ(v) = target` by bisection with a geometrically expanded bracket.
pub fn invert_theta(potential: &Potential1D, target: f64) -> Result<f64> {
    if !(target >= 0.0) || !target.is_finite() {
        return Err(Error::Parameter(format!("Θ target must be nonnegative and finite, got {target}")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0f64;
    while potential.theta(hi)? <= target {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Nonconvergence {
                iterations: 0,
                last_change: hi,
                residual: target,
            });
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-12f64.max(4.0 * f64::EPSILON * hi) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if potential.theta(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `v_b(x_j)` for samples of `σρ`.
pub fn v_b(potential: &Potential1D, b: f64, sigma_rho: &[f64]) -> Result<Vec<f64>> {
    if !(b > 0.0) {
        return Err(Error::Parameter(format!("b must be positive, got {b}")));
    }
    if sigma_rho.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Parameter("σρ must be positive".into()));
    }
    sigma_rho.par_iter().map(|&sr| invert_theta(potential, b * sr)).collect()
}

/// Gridded `u` with the associated `σ`, `ρ` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile1D {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Discretized problem: minimize `F[u] = ∫ Φ(σu) ρ + log ∫ u⁻¹ ρ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem1D {
    pub x: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    pub potential: Potential1D,
    #[serde(skip)]
    weights: Vec<f64>,
}

pub const DEFAULT_GRID: usize = 4096;

impl Problem1D {
    pub fn from_samples(x: Vec<f64>, sigma: Vec<f64>, rho: Vec<f64>, potential: Potential1D) -> Result<Self> {
        if x.len() < 2 || sigma.len() != x.len() || rho.len() != x.len() {
            return Err(Error::Dimension("grid, σ and ρ must have equal length ≥ 2".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("grid must be strictly increasing".into()));
        }
        if sigma.iter().chain(&rho).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter("σ and ρ must be positive and finite on the grid".into()));
        }
        if let Potential1D::Kernel { kernel, s } = potential {
            if kernel.dim != 1 || !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter("need a 1D kernel and finite s > 0".into()));
            }
        }
        let weights = trapezoid_weights(&x);
        Ok(Problem1D {
            x,
            sigma,
            rho,
            potential,
            weights,
        })
    }

    /// Uniform grid of `nodes` points over the density's domain.
    pub fn new(density: &DensitySpec, sigma: &BandwidthField, potential: Potential1D, nodes: usize) -> Result<Self> {
        if density.dim() != 1 {
            return Err(Error::Dimension("the 1D solver needs a 1D density".into()));
        }
        if nodes < 2 {
            return Err(Error::Parameter("grid needs at least two nodes".into()));
        }
        let [a, b] = density.domain()[0];
        let x: Vec<f64> = (0..nodes)
            .map(|j| if j + 1 == nodes { b } else { a + (b - a) * j as f64 / (nodes - 1) as f64 })
            .collect();
        let sig = x.iter().map(|&v| sigma.eval1(v, density)).collect();
        let rho = x.iter().map(|&v| density.pdf1(v)).collect();
        Self::from_samples(x, sig, rho, potential)
    }

    /// `Ĩ_λ` problem: `Φ = log(1 + v²)`, `σ ≡ 1`, `ρ̃ = ρ/λ`.
    pub fn perona_malik(density: &DensitySpec, lambda: f64, nodes: usize) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 2.0) {
            return Err(Error::Parameter(format!("λ = {lambda} outside (0, 2)")));
        }
        let mut p = Self::new(density, &BandwidthField::constant(1.0), Potential1D::PeronaMalik, nodes)?;
        p.rho.iter_mut().for_each(|r| *r /= lambda);
        Ok(p)
    }

    /// Same problem with `Φ_s` in place of `Φ₁`.
    pub fn with_scale(&self, s: f64) -> Result<Self> {
        match self.potential {
            Potential1D::Kernel { kernel, .. } => Self::from_samples(self.x.clone(), self.sigma.clone(), self.rho.clone(), Potential1D::Kernel { kernel, s }),
            Potential1D::PeronaMalik => Err(Error::Parameter("scale transfer applies to kernel potentials".into())),
        }
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma_rho(&self) -> Vec<f64> {
        self.sigma.iter().zip(&self.rho).map(|(s, r)| s * r).collect()
    }

    pub fn mass(&self) -> f64 {
        self.weights().iter().zip(&self.rho).map(|(w, r)| w * r).sum()
    }

    pub fn v_b(&self, b: f64) -> Result<Vec<f64>> {
        v_b(&self.potential, b, &self.sigma_rho())
    }

    /// `u_b = v_b / σ`
    pub fn u_b(&self, b: f64) -> Result<Vec<f64>> {
        Ok(self.v_b(b)?.iter().zip(&self.sigma).map(|(v, s)| v / s).collect())
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.x.len() {
            return Err(Error::Dimension("profile length differs from the grid".into()));
        }
        Ok(())
    }

    /// `B[u] = (∫ u⁻¹ ρ²)⁻¹`
    pub fn b_functional(&self, u: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        if u.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InfiniteEnergy("u vanishes at a grid node".into()));
        }
        let s: f64 = self.weights().iter().zip(u).zip(&self.rho).map(|((w, u), r)| w * r * r / u).sum();
        Ok(1.0 / s)
    }

    /// `F[u] = ∫ Φ(σu) ρ + log ∫ u⁻¹ ρ²`
    pub fn functional_f(&self, u: &[f64]) -> Result<f64> {
        let b = self.b_functional(u)?;
        let a: f64 = (0..u.len())
            .map(|j| self.weights()[j] * self.potential.phi(self.sigma[j] * u[j]) * self.rho[j])
            .sum();
        Ok(a - b.ln())
    }

    /// `∫ (Φ'(σu) σ ρ − B[u] ρ²/u²) w`
    pub fn first_variation(&self, u: &[f64], w: &[f64]) -> Result<f64> {
        self.check_len(w)?;
        let b = self.b_functional(u)?;
        let mut s = 0.0;
        for j in 0..u.len() {
            let g = self.potential.phi_prime(self.sigma[j] * u[j])? * self.sigma[j] * self.rho[j] - b * self.rho[j] * self.rho[j] / (u[j] * u[j]);
            s += self.weights()[j] * g * w[j];
        }
        Ok(s)
    }

    /// `sup_j |Θ(σ_j u_j) − b σ_j ρ_j|`
    pub fn el_residual(&self, u: &[f64], b: f64) -> Result<f64> {
        let mut r = 0.0f64;
        for j in 0..u.len() {
            r = r.max((self.potential.theta(self.sigma[j] * u[j])? - b * self.sigma[j] * self.rho[j]).abs());
        }
        Ok(r)
    }

    /// `∫ (b / v_b) σ ρ² dx`, equal to 1 at the fixed point.
    pub fn consistency(&self, b: f64) -> Result<f64> {
        let v = self.v_b(b)?;
        Ok((0..v.len())
            .map(|j| self.weights()[j] * b / v[j] * self.sigma[j] * self.rho[j] * self.rho[j])
            .sum())
    }

    /// Monotone iteration `u_{k+1} = u_{B[u_k]}` from `u₀ ≡ δ₀`.
    pub fn solve(&self, opts: SolverOptions) -> Result<SolverResult> {
        let mass = self.mass();
        if !(mass > 0.5) {
            return Err(Error::Precondition(format!("∫ρ = {mass} must exceed 1/2")));
        }
        let n = self.x.len();
        let mut delta = opts.delta0;
        let mut u = loop {
            let u0 = vec![delta; n];
            let next = self.u_b(self.b_functional(&u0)?)?;
            if next.iter().all(|&v| v >= delta) {
                break u0;
            }
            delta *= 0.5;
            if delta < 1e-300 {
                return Err(Error::Precondition("no admissible δ₀ found".into()));
            }
        };
        let mut b_history = Vec::new();
        let mut last_change = f64::INFINITY;
        for it in 1..=opts.max_iter {
            let b = self.b_functional(&u)?;
            b_history.push(b);
            let next = self.u_b(b)?;
            let mut change = 0.0f64;
            for j in 0..n {
                let d = next[j] - u[j];
                if d < -MONOTONE_SLACK * u[j].max(1.0) {
                    return Err(Error::InternalConsistency(format!(
                        "iterate decreased at node {j} on step {it}: {} → {}",
                        u[j], next[j]
                    )));
                }
                change = change.max(d.abs());
            }
            u = next;
            last_change = change;
            if change < opts.tol {
                return self.finish(u, it, delta, b_history);
            }
        }
        let b = self.b_functional(&u)?;
        Err(Error::Nonconvergence {
            iterations: opts.max_iter,
            last_change,
            residual: self.el_residual(&u, b)?,
        })
    }

    fn finish(&self, u: Vec<f64>, iterations: usize, delta0: f64, b_history: Vec<f64>) -> Result<SolverResult> {
        let b_star = self.b_functional(&u)?;
        let residual = self.el_residual(&u, b_star)?;
        let f_value = self.functional_f(&u)?;
        let t = cumulative_trapezoid(&self.x, &u);
        let t_star = PiecewiseLinearMap::new(self.x.clone(), t)?;
        Ok(SolverResult {
            u_star: Profile1D {
                x: self.x.clone(),
                u,
                sigma: self.sigma.clone(),
                rho: self.rho.clone(),
            },
            b_star,
            t_star,
            residual,
            iterations,
            f_value,
            delta0,
            b_history,
        })
    }
}

/// Allowed relative decrease between iterates, for bisection round-off.
const MONOTONE_SLACK: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub delta0: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            delta0: 1e-3,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub u_star: Profile1D,
    pub b_star: f64,
    /// `T*(x) = ∫_a^x u*`, so `T*(a) = 0`.
    pub t_star: PiecewiseLinearMap,
    pub residual: f64,
    pub iterations: usize,
    pub f_value: f64,
    /// The `δ₀` actually used after halving.
    pub delta0: f64,
    pub b_history: Vec<f64>,
}

/// Solve `Ĩ_λ` and report `I_λ = λ (Ĩ_λ + 2 log λ)` alongside the result.
pub fn perona_malik_solve(density: &DensitySpec, lambda: f64, nodes: usize, opts: SolverOptions) -> Result<(SolverResult, f64)> {
    let p = Problem1D::perona_malik(density, lambda, nodes)?;
    let r = p.solve(opts)?;
    let i = lambda * (r.f_value + 2.0 * lambda.ln());
    Ok((r, i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuum::perona_malik_energy_u;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn epa() -> Potential1D {
        Potential1D::kernel(KernelSpec::epanechnikov(1))
    }

    fn uniform_problem(n: usize) -> Problem1D {
        Problem1D::new(&DensitySpec::unit_interval(), &BandwidthField::constant(1.0), epa(), n).unwrap()
    }

    #[test]
    fn theta_inversion() {
        let p = epa();
        assert_eq!(invert_theta(&p, 0.0).unwrap(), 0.0);
        assert!(invert_theta(&p, -1.0).is_err());
        let t1 = p.theta(1.0).unwrap();
        assert!((invert_theta(&p, t1).unwrap() - 1.0).abs() < 1e-10);
        let b = 1e6;
        let v = v_b(&p, b, &[1.0]).unwrap()[0];
        assert!((v / b - 0.5).abs() < 1e-3);
        let v1 = v_b(&p, 2.0, &[0.5, 1.0, 3.0]).unwrap();
        let v2 = v_b(&p, 2.5, &[0.5, 1.0, 3.0]).unwrap();
        assert!(v1.iter().zip(&v2).all(|(a, b)| b > a));
    }

    #[test]
    fn b_functional_examples() {
        let p = uniform_problem(2001);
        assert!((p.b_functional(&vec![3.0; 2001]).unwrap() - 3.0).abs() < 1e-12);
        let u: Vec<f64> = p.x.iter().map(|x| x + 1.0).collect();
        assert!((p.b_functional(&u).unwrap() - 1.0 / 2f64.ln()).abs() < 1e-7);
        let mut z = vec![1.0; 2001];
        z[10] = 0.0;
        assert!(matches!(p.b_functional(&z), Err(Error::InfiniteEnergy(_))));
        let f = p.functional_f(&vec![1.0; 2001]).unwrap();
        assert!((f - KernelSpec::epanechnikov(1).phi1(1.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_solution_is_the_theta_fixed_point() {
        let p = uniform_problem(257);
        let r = p.solve(SolverOptions::default()).unwrap();
        // independent bisection on Θ(v) − v over (0, 10]
        let (mut lo, mut hi) = (1e-3, 10.0);
        let k = KernelSpec::epanechnikov(1);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if k.theta(mid).unwrap() - mid < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(r.u_star.u.iter().all(|u| (u - lo).abs() < 1e-8));
        assert!((r.b_star - lo).abs() < 1e-8);
        assert!(r.residual < 1e-8);
        assert!(r.b_history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(r.t_star.eval(0.0), 0.0);
        assert!(r.t_star.is_strictly_increasing());
    }

    #[test]
    fn first_variation_matches_finite_difference() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let p = Problem1D::new(&d, &BandwidthField::KnnProxy, epa(), 513).unwrap();
        let u: Vec<f64> = p.x.iter().map(|x| 1.0 + 0.5 * (3.0 * x).sin()).collect();
        let w: Vec<f64> = p.x.iter().map(|x| (5.0 * x).cos()).collect();
        let t = 1e-6;
        let plus: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + t * b).collect();
        let minus: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a - t * b).collect();
        let fd = (p.functional_f(&plus).unwrap() - p.functional_f(&minus).unwrap()) / (2.0 * t);
        let an = p.first_variation(&u, &w).unwrap();
        assert!((fd - an).abs() < 1e-4 * an.abs().max(1e-3), "{fd} {an}");
        // constant u, constant w, uniform data: (Φ'(c) − 1/c)·w
        let q = uniform_problem(101);
        let c = 2.0;
        let expect = (epa().phi_prime(c).unwrap() - 1.0 / c) * 0.7;
        assert!((q.first_variation(&vec![c; 101], &vec![0.7; 101]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mixture_solution_is_a_global_minimum_among_perturbations() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let p = Problem1D::new(&d, &BandwidthField::KnnProxy, epa(), 1025).unwrap();
        let r = p.solve(SolverOptions::default()).unwrap();
        assert!(r.residual < 1e-8);
        assert!((p.consistency(r.b_star).unwrap() - 1.0).abs() < 1e-6);
        let u = &r.u_star.u;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let amp: f64 = rng.gen_range(0.01..0.5);
            let freq: f64 = rng.gen_range(1.0..20.0);
            let ph: f64 = rng.gen_range(0.0..6.3);
            let w: Vec<f64> = p.x.iter().map(|x| (freq * x + ph).sin()).collect();
            let v: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a * (1.0 + amp * b)).collect();
            assert!(p.functional_f(&v).unwrap() >= r.f_value - 1e-12);
            assert!(p.first_variation(u, &w).unwrap().abs() < 1e-6);
        }
        let big: Vec<f64> = u.iter().map(|a| a * 1.1).collect();
        assert!(p.functional_f(&big).unwrap() > r.f_value);
    }

    #[test]
    fn truncation_does_not_increase_f() {
        let p = uniform_problem(257);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let u: Vec<f64> = (0..257).map(|_| rng.gen_range(0.1..5.0)).collect();
            let ub = p.u_b(p.b_functional(&u).unwrap()).unwrap();
            let lo: Vec<f64> = u.iter().zip(&ub).map(|(a, b)| a.min(*b)).collect();
            let hi: Vec<f64> = u.iter().zip(&ub).map(|(a, b)| a.max(*b)).collect();
            let f = p.functional_f(&u).unwrap();
            assert!(p.functional_f(&lo).unwrap() <= f + 1e-10);
            assert!(p.functional_f(&hi).unwrap() <= f + 1e-10);
        }
    }

    #[test]
    fn scale_transfer() {
        let d = DensitySpec::mixture(0.4, 0.005, 0.5).unwrap();
        let p = Problem1D::new(&d, &BandwidthField::KnnProxy, epa(), 257).unwrap();
        let r1 = p.solve(SolverOptions::default()).unwrap();
        for s in [0.5, 3.0] {
            let rs = p.with_scale(s).unwrap().solve(SolverOptions::default()).unwrap();
            for (a, b) in rs.u_star.u.iter().zip(&r1.u_star.u) {
                assert!((a * s - b).abs() < 1e-8 * b, "{s}: {a} {b}");
            }
        }
    }

    #[test]
    fn perona_malik_reduction() {
        let d = DensitySpec::unit_interval();
        let (r, i) = perona_malik_solve(&d, 1.0, 257, SolverOptions::default()).unwrap();
        assert!(r.residual < 1e-8);
        let rho = vec![1.0; 257];
        let direct = perona_malik_energy_u(&r.u_star.x, &r.u_star.u, &rho, 1.0).unwrap();
        assert!((i - direct).abs() < 1e-12);
        assert!(Problem1D::perona_malik(&d, 2.0, 10).is_err());
    }
}
