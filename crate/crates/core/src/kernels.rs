//! Attraction and repulsion kernels and the derived potentials.
//!
//! `η` is a radial profile normalized so that `∫_{R^d} η(|z|) dz = 1`.
//! `Φ_s(A) = ∫ η(|z|) log(s⁻² + |Az|²) dz` and, in one dimension,
//! `Θ(v) = v² Φ₁'(v) = ∫ η(z) 2v³z² / (1 + v²z²) dz`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quad::{integrate_with, Tol};

/// Radius at which the truncated Gaussian is cut.
pub const TRUNCATION_RADIUS: f64 = 3.0;
/// Radial cutoff used when integrating the untruncated Gaussian (`e^{-72}` tail).
pub const GAUSSIAN_CUTOFF: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
    TruncatedGaussian,
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "truncated-gaussian" => Ok(KernelFamily::TruncatedGaussian),
            _ => Err(Error::Parameter(format!("unknown kernel family '{s}'"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::TruncatedGaussian => "truncated-gaussian",
        })
    }
}

/// Embedding-space kernel `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepulsionKernel {
    /// `ψ(t) = (1 + t²)⁻¹`
    StudentT,
    /// `ψ(t) = e^{-t²}`
    Gaussian,
}

impl RepulsionKernel {
    /// `ψ` as a function of the squared distance.
    #[inline]
    pub fn eval_sq(self, t2: f64) -> f64 {
        match self {
            RepulsionKernel::StudentT => 1.0 / (1.0 + t2),
            RepulsionKernel::Gaussian => (-t2).exp(),
        }
    }

    /// `log ψ⁻¹` as a function of the squared distance.
    #[inline]
    pub fn neg_log_sq(self, t2: f64) -> f64 {
        match self {
            RepulsionKernel::StudentT => t2.ln_1p(),
            RepulsionKernel::Gaussian => t2,
        }
    }
}

/// Scaling parameter `s ∈ (0, ∞]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Finite(f64),
    Infinite,
}

impl Scale {
    pub fn validate(self) -> Result<Self> {
        match self {
            Scale::Finite(s) if !(s > 0.0 && s.is_finite()) => Err(Error::Parameter(format!("scale s must be positive, got {s}"))),
            _ => Ok(self),
        }
    }

    /// `s · λ`.
    pub fn times(self, lambda: f64) -> Scale {
        match self {
            Scale::Finite(s) => Scale::Finite(s * lambda),
            Scale::Infinite => Scale::Infinite,
        }
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Scale::Infinite),
            t => t.parse::<f64>().map_err(|_| Error::Parameter(format!("bad scale '{t}'"))).and_then(|v| {
                if v.is_infinite() && v > 0.0 {
                    Ok(Scale::Infinite)
                } else {
                    Scale::Finite(v).validate()
                }
            }),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Finite(s) => write!(f, "{s}"),
            Scale::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Scale {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Scale::Finite(s) => ser.serialize_f64(*s),
            Scale::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Scale::Finite(v).validate().map_err(serde::de::Error::custom),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Surface area of the unit sphere `S^{d-1}` in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0),
    }
}

/// Attraction kernel `η` in dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub dim: usize,
    /// Normalization constant multiplying the unnormalized profile.
    pub norm: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("kernel dimension must be positive".into()));
        }
        let area = sphere_area(dim);
        let df = dim as f64;
        let norm = match family {
            KernelFamily::Gaussian => (2.0 * PI).powf(-df / 2.0),
            KernelFamily::Epanechnikov => df * (df + 2.0) / (2.0 * area),
            KernelFamily::TruncatedGaussian => {
                let m = integrate_with(
                    |r| (-0.5 * r * r).exp() * r.powi(dim as i32 - 1),
                    0.0,
                    TRUNCATION_RADIUS,
                    &[],
                    Tol::new(1e-16, 1e-15),
                )
                .value;
                1.0 / (area * m)
            }
        };
        Ok(KernelSpec { family, dim, norm })
    }

    pub fn epanechnikov(dim: usize) -> Self {
        Self::new(KernelFamily::Epanechnikov, dim).expect("valid dimension")
    }

    pub fn gaussian(dim: usize) -> Self {
        Self::new(KernelFamily::Gaussian, dim).expect("valid dimension")
    }

    /// Radial profile `η(r)`.
    #[inline]
    pub fn profile(&self, r: f64) -> f64 {
        let r = r.abs();
        match self.family {
            KernelFamily::Gaussian => self.norm * (-0.5 * r * r).exp(),
            KernelFamily::Epanechnikov => {
                if r < 1.0 {
                    self.norm * (1.0 - r * r)
                } else {
                    0.0
                }
            }
            KernelFamily::TruncatedGaussian => {
                if r <= TRUNCATION_RADIUS {
                    self.norm * (-0.5 * r * r).exp()
                } else {
                    0.0
                }
            }
        }
    }

    /// Bandwidth-scaled kernel `η_h(r) = h^{-d} η(r/h)`.
    #[inline]
    pub fn scaled(&self, r: f64, h: f64) -> f64 {
        self.profile(r / h) / h.powi(self.dim as i32)
    }

    /// Radius of the support, `None` for unbounded support.
    pub fn support_radius(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Gaussian => None,
            KernelFamily::Epanechnikov => Some(1.0),
            KernelFamily::TruncatedGaussian => Some(TRUNCATION_RADIUS),
        }
    }

    /// Radius beyond which the profile is treated as zero in quadrature.
    pub fn quad_radius(&self) -> f64 {
        self.support_radius().unwrap_or(GAUSSIAN_CUTOFF)
    }

    /// Window radius used when truncating nonlocal sums (6 bandwidths for the Gaussian).
    pub fn window_radius(&self) -> f64 {
        self.support_radius().unwrap_or(6.0)
    }

    /// `|S^{d-1}| ∫_0^R η(r) r^{d-1} f(r) dr`.
    pub fn radial_integral<F: Fn(f64) -> f64>(&self, f: F, breaks: &[f64], tol: Tol) -> f64 {
        let d = self.dim as i32;
        let r_max = self.quad_radius();
        let v = integrate_with(|r| self.profile(r) * r.powi(d - 1) * f(r), 0.0, r_max, breaks, tol).value;
        sphere_area(self.dim) * v
    }

    /// `m_k(η) = ∫ η(|z|) |z|^k dz`.
    pub fn moment(&self, k: u32) -> Result<f64> {
        if k > 4 {
            return Err(Error::Parameter(format!("moment order {k} not supported (k ≤ 4)")));
        }
        let area = sphere_area(self.dim);
        let p = (k as usize + self.dim) as f64;
        Ok(match self.family {
            KernelFamily::Gaussian => area * self.norm * 2f64.powf(p / 2.0 - 1.0) * gamma(p / 2.0),
            KernelFamily::Epanechnikov => area * self.norm * (1.0 / p - 1.0 / (p + 2.0)),
            KernelFamily::TruncatedGaussian => self.radial_integral(|r| r.powi(k as i32), &[], Tol::new(1e-16, 1e-15)),
        })
    }

    /// Second directional moment `c_η = ∫ η(|z|) z_1² dz = m_2 / d`.
    pub fn directional_second_moment(&self) -> f64 {
        self.moment(2).expect("k = 2 supported") / self.dim as f64
    }

    /// Tail mass `γ(r) = 1 − ∫_{B_r} η(|z|) dz`.
    pub fn tail_mass(&self, r: f64) -> f64 {
        let r = r.max(0.0);
        if r == 0.0 {
            return 1.0;
        }
        let r_max = self.quad_radius();
        let upper = match self.family {
            KernelFamily::Gaussian => r.max(r_max) + 15.0,
            _ => r_max,
        };
        if r >= upper {
            return 0.0;
        }
        let d = self.dim as i32;
        let v = integrate_with(|t| self.profile(t) * t.powi(d - 1), r, upper, &[], Tol::new(1e-300, 1e-13)).value;
        (sphere_area(self.dim) * v).clamp(0.0, 1.0)
    }

    /// Radial log-moment `C₁ = ∫ η(|z|) log |z|² dz`.
    pub fn log_moment(&self) -> f64 {
        self.radial_integral(|r| 2.0 * r.ln(), &[], Tol::new(1e-15, 1e-14))
    }

    /// `∫ η(|z|) log(s⁻² + |Az|²) dz` for an `m × d` matrix `A`.
    pub fn phi_s(&self, s: Scale, a: &DMatrix<f64>) -> Result<f64> {
        s.validate()?;
        if a.ncols() != self.dim {
            return Err(Error::Dimension(format!("matrix has {} columns, kernel dimension is {}", a.ncols(), self.dim)));
        }
        if self.dim > 3 {
            return Err(Error::Dimension("phi_s supports d ≤ 3".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("matrix has non-finite entries".into()));
        }
        let lam = gram_eigenvalues(a);
        match s {
            Scale::Infinite => {
                if lam[0] <= 0.0 {
                    return Err(Error::Divergence("Φ_∞ diverges for the zero matrix".into()));
                }
                Ok(sphere_log_average(&lam) + self.log_moment())
            }
            Scale::Finite(s) => Ok(self.phi_finite(s, &lam)),
        }
    }

    /// Scalar `Φ_s` for `d = 1` and `A = [v]`.
    pub fn phi_s_scalar(&self, s: Scale, v: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::Dimension("scalar Φ_s requires d = 1".into()));
        }
        match s.validate()? {
            Scale::Infinite => {
                if v == 0.0 {
                    return Err(Error::Divergence("Φ_∞(0) diverges".into()));
                }
                Ok((v * v).ln() + self.log_moment())
            }
            Scale::Finite(s) => Ok(-2.0 * s.ln() + self.phi1(s * v)),
        }
    }

    /// `Φ₁(v) = ∫ η(z) log(1 + v²z²) dz` in one dimension.
    pub fn phi1(&self, v: f64) -> f64 {
        let a = v.abs();
        if a == 0.0 {
            return 0.0;
        }
        if self.family == KernelFamily::Epanechnikov && self.dim == 1 {
            return epanechnikov_phi1(a);
        }
        self.radial_log1p(a * a)
    }

    // |S|∫η r^{d-1} log(1 + q r²) dr
    fn radial_log1p(&self, q: f64) -> f64 {
        if q <= 0.0 {
            return 0.0;
        }
        let r0 = 1.0 / q.sqrt();
        let rm = self.quad_radius();
        let breaks: Vec<f64> = [r0, 10.0 * r0].into_iter().filter(|&b| b < rm).collect();
        self.radial_integral(|r| (q * r * r).ln_1p(), &breaks, Tol::new(1e-15, 1e-13))
    }

    fn phi_finite(&self, s: f64, lam: &[f64]) -> f64 {
        let c = s * s;
        let shift = -2.0 * s.ln();
        let g = |q: f64| self.radial_log1p(c * q);
        let tol = Tol::new(1e-14, 1e-12);
        let avg = match self.dim {
            1 => g(lam[0]),
            2 => azimuthal_average(&g, lam[0], lam[1], c, tol),
            _ => {
                integrate_with(
                    |t| {
                        let s2 = 1.0 - t * t;
                        let a = lam[2] * t * t + lam[0] * s2;
                        let b = lam[2] * t * t + lam[1] * s2;
                        azimuthal_average(&g, a, b, c, tol)
                    },
                    0.0,
                    1.0,
                    &[],
                    Tol::new(1e-13, 1e-11),
                )
                .value
            }
        };
        shift + avg
    }

    /// `Θ(v) = v² Φ₁'(v)`; closed form for the 1D Epanechnikov kernel.
    pub fn theta(&self, v: f64) -> Result<f64> {
        self.require_1d()?;
        if !(v >= 0.0) {
            return Err(Error::Parameter(format!("Θ requires v ≥ 0, got {v}")));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        if self.family == KernelFamily::Epanechnikov {
            return Ok(epanechnikov_theta(v));
        }
        Ok(self.theta_quadrature_unchecked(v))
    }

    /// `Θ` by quadrature of the defining integral, for any family.
    pub fn theta_quadrature(&self, v: f64) -> Result<f64> {
        self.require_1d()?;
        if !(v >= 0.0) {
            return Err(Error::Parameter(format!("Θ requires v ≥ 0, got {v}")));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        Ok(self.theta_quadrature_unchecked(v))
    }

    fn theta_quadrature_unchecked(&self, v: f64) -> f64 {
        let rm = self.quad_radius();
        let z0 = 1.0 / v;
        let breaks: Vec<f64> = [z0, 10.0 * z0, 0.1 * z0].into_iter().filter(|&b| b < rm).collect();
        let tol = Tol::new(1e-300, 2e-15);
        if v <= 1.0 {
            let v2 = v * v;
            2.0 * integrate_with(
                |z| {
                    let w = v2 * z * z;
                    self.profile(z) * 2.0 * v * w / (1.0 + w)
                },
                0.0,
                rm,
                &breaks,
                tol,
            )
            .value
        } else {
            let j = 2.0 * integrate_with(|z| self.profile(z) / (1.0 + v * v * z * z), 0.0, rm, &breaks, tol).value;
            2.0 * v * (1.0 - j)
        }
    }

    /// `Θ'(v) = ∫ η(z) (2v⁴z⁴ + 6v²z²) / (1 + v²z²)² dz`, by quadrature.
    pub fn theta_prime(&self, v: f64) -> Result<f64> {
        self.require_1d()?;
        if !(v >= 0.0) {
            return Err(Error::Parameter(format!("Θ' requires v ≥ 0, got {v}")));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        let rm = self.quad_radius();
        let z0 = 1.0 / v;
        let breaks: Vec<f64> = [z0, 10.0 * z0, 0.1 * z0].into_iter().filter(|&b| b < rm).collect();
        let tol = Tol::new(1e-300, 2e-15);
        let v2 = v * v;
        if v <= 1.0 {
            Ok(2.0
                * integrate_with(
                    |z| {
                        let w = v2 * z * z;
                        self.profile(z) * (2.0 * w * w + 6.0 * w) / ((1.0 + w) * (1.0 + w))
                    },
                    0.0,
                    rm,
                    &breaks,
                    tol,
                )
                .value)
        } else {
            let corr = 2.0
                * integrate_with(
                    |z| {
                        let w = v2 * z * z;
                        self.profile(z) * (2.0 * w - 2.0) / ((1.0 + w) * (1.0 + w))
                    },
                    0.0,
                    rm,
                    &breaks,
                    tol,
                )
                .value;
            Ok(2.0 + corr)
        }
    }

    fn require_1d(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::Dimension("Θ is defined for one-dimensional kernels".into()));
        }
        Ok(())
    }
}

/// Both sides of `Φ₁(sA) = Φ_s(A) + 2 log s` and of the dilation form
/// `Φ_s(λA) = Φ_{sλ}(A) + 2 log λ`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhiScaling {
    pub lhs: f64,
    pub rhs: f64,
    pub dilation_lhs: f64,
    pub dilation_rhs: f64,
}

pub fn phi_scaling_check(spec: &KernelSpec, s: f64, lambda: f64, a: &DMatrix<f64>) -> Result<PhiScaling> {
    if !(s > 0.0 && lambda > 0.0) {
        return Err(Error::Parameter("s and λ must be positive".into()));
    }
    let lhs = spec.phi_s(Scale::Finite(1.0), &(a * s))?;
    let rhs = spec.phi_s(Scale::Finite(s), a)? + 2.0 * s.ln();
    let dilation_lhs = spec.phi_s(Scale::Finite(s), &(a * lambda))?;
    let dilation_rhs = spec.phi_s(Scale::Finite(s * lambda), a)? + 2.0 * lambda.ln();
    Ok(PhiScaling {
        lhs,
        rhs,
        dilation_lhs,
        dilation_rhs,
    })
}

/// Eigenvalues of `AᵀA`, descending, clamped at zero.
pub fn gram_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let d = a.ncols();
    if d == 1 {
        return vec![a.iter().map(|x| x * x).sum()];
    }
    let m = a.transpose() * a;
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut lam: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    lam.sort_by(|x, y| y.total_cmp(x));
    lam
}

/// Average of `log(wᵀMw)` over the unit sphere, from the eigenvalues of `M`.
pub fn sphere_log_average(lam: &[f64]) -> f64 {
    match lam.len() {
        1 => lam[0].ln(),
        2 => 2.0 * ((lam[0].sqrt() + lam[1].sqrt()) / 2.0).ln(),
        _ => {
            let (l1, l2, l3) = (lam[0], lam[1], lam[2]);
            integrate_with(
                |t| {
                    let s2 = 1.0 - t * t;
                    let a = (l3 * t * t + l1 * s2).sqrt();
                    let b = (l3 * t * t + l2 * s2).sqrt();
                    2.0 * ((a + b) / 2.0).ln()
                },
                0.0,
                1.0,
                &[],
                Tol::new(1e-15, 1e-14),
            )
            .value
        }
    }
}

// (2/π) ∫_0^{π/2} g(a cos²θ + b sin²θ) dθ
fn azimuthal_average<G: Fn(f64) -> f64>(g: &G, a: f64, b: f64, c: f64, tol: Tol) -> f64 {
    let mut breaks = Vec::new();
    // g changes character where c·q ≈ 1; split there when it happens inside.
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if c * hi > 1.0 && c * lo < 1.0 && hi > lo {
        let target = 1.0 / c;
        let x = ((target - lo) / (hi - lo)).clamp(0.0, 1.0);
        let th = if a >= b { x.sqrt().acos() } else { x.sqrt().asin() };
        breaks.push(th);
    }
    let v = integrate_with(
        |th| {
            let (sn, cs) = th.sin_cos();
            g(a * cs * cs + b * sn * sn)
        },
        0.0,
        PI / 2.0,
        &breaks,
        tol,
    )
    .value;
    v * 2.0 / PI
}

/// Epanechnikov moments `μ_{2j} = ∫ η z^{2j} dz = 3 / ((2j+1)(2j+3))`.
#[inline]
pub fn epanechnikov_even_moment(j: u32) -> f64 {
    let j = j as f64;
    3.0 / ((2.0 * j + 1.0) * (2.0 * j + 3.0))
}

const SERIES_CUTOFF: f64 = 0.3;

/// `Θ(v) = 3(v + 1/v)(1 − arctan(v)/v) − v`, with a Taylor series near 0.
pub fn epanechnikov_theta(v: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    if v < SERIES_CUTOFF {
        // Θ = 2 Σ_k (−1)^k μ_{2k+2} v^{2k+3}
        let v2 = v * v;
        let mut term = v2 * v;
        let mut sum = 0.0;
        for k in 0..40u32 {
            let t = epanechnikov_even_moment(k + 1) * term;
            if k % 2 == 0 {
                sum += t;
            } else {
                sum -= t;
            }
            if t < 1e-18 * sum.abs() {
                break;
            }
            term *= v2;
        }
        return 2.0 * sum;
    }
    3.0 * (v + 1.0 / v) * (1.0 - v.atan() / v) - v
}

/// `Φ₁(a) = (3/4) ∫_{-1}^{1} (1 − z²) log(1 + a²z²) dz` in closed form.
pub fn epanechnikov_phi1(a: f64) -> f64 {
    let a = a.abs();
    if a == 0.0 {
        return 0.0;
    }
    if a < SERIES_CUTOFF {
        let a2 = a * a;
        let mut p = a2;
        let mut sum = 0.0;
        for k in 1..60u32 {
            let t = epanechnikov_even_moment(k) * p / k as f64;
            if k % 2 == 1 {
                sum += t;
            } else {
                sum -= t;
            }
            if t < 1e-18 * sum.abs() {
                break;
            }
            p *= a2;
        }
        return sum;
    }
    let l = (a * a).ln_1p();
    let at = a.atan();
    let i0 = 2.0 * (l - 2.0 + 2.0 * at / a);
    let i2 = (2.0 / 3.0) * (l - 2.0 / 3.0 + 2.0 / (a * a) - 2.0 * at / (a * a * a));
    0.75 * (i0 - i2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;

    #[test]
    fn unit_mass_all_families() {
        for fam in [KernelFamily::Gaussian, KernelFamily::Epanechnikov, KernelFamily::TruncatedGaussian] {
            for d in 1..=3 {
                let k = KernelSpec::new(fam, d).unwrap();
                let m0 = k.moment(0).unwrap();
                assert!((m0 - 1.0).abs() < 1e-10, "{fam} d={d}: {m0}");
                let q = k.radial_integral(|_| 1.0, &[], Tol::new(1e-16, 1e-14));
                assert!((q - 1.0).abs() < 1e-10, "{fam} d={d} quad: {q}");
            }
        }
    }

    #[test]
    fn moments_known_values() {
        let e = KernelSpec::epanechnikov(1);
        assert!((e.moment(2).unwrap() - 0.2).abs() < 1e-15);
        let oracle = integrate(|z| 0.75 * (1.0 - z * z) * z * z, -1.0, 1.0);
        assert!((e.moment(2).unwrap() - oracle).abs() < 1e-14);
        let g = KernelSpec::gaussian(1);
        assert!((g.moment(2).unwrap() - 1.0).abs() < 1e-13);
        assert!((g.moment(4).unwrap() - 3.0).abs() < 1e-12);
        let g2 = KernelSpec::gaussian(2);
        assert!((g2.moment(2).unwrap() - 2.0).abs() < 1e-12);
        assert!(e.moment(5).is_err());
    }

    #[test]
    fn tail_mass_values() {
        let e = KernelSpec::epanechnikov(1);
        assert_eq!(e.tail_mass(0.0), 1.0);
        assert_eq!(e.tail_mass(1.0), 0.0);
        // γ(r) = 1/2 − (3/4)(r − r³/3) for r ≤ 1 in d = 1
        let r: f64 = 0.4;
        assert!((e.tail_mass(r) - (1.0 - 1.5 * (r - r.powi(3) / 3.0))).abs() < 1e-13);
        let g = KernelSpec::gaussian(1);
        // P(|Z| > 2) for a standard normal
        let exact = 0.045_500_263_896_358_42;
        assert!((g.tail_mass(2.0) - exact).abs() < 1e-13, "{} vs {}", g.tail_mass(2.0), exact);
        assert!(g.tail_mass(2.0) <= 2f64.sqrt() * (-1.0f64).exp());
    }

    #[test]
    fn log_moment_epanechnikov_1d() {
        let e = KernelSpec::epanechnikov(1);
        assert!((e.log_moment() + 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn phi_trivial_values() {
        let e = KernelSpec::epanechnikov(2);
        let z = DMatrix::zeros(1, 2);
        assert_eq!(e.phi_s(Scale::Finite(1.0), &z).unwrap(), 0.0);
        let v = e.phi_s(Scale::Finite(2.0), &z).unwrap();
        assert!((v + 2.0 * 2f64.ln()).abs() < 1e-14);
        assert!(matches!(e.phi_s(Scale::Infinite, &z), Err(Error::Divergence(_))));
    }

    #[test]
    fn phi1_closed_form_matches_quadrature() {
        let e = KernelSpec::epanechnikov(1);
        for a in [1e-3, 0.1, 0.29, 0.31, 1.0, 3.0, 50.0, 1e4] {
            let oracle = integrate_with(
                |z: f64| 0.75 * (1.0 - z * z) * (a * a * z * z).ln_1p(),
                -1.0,
                1.0,
                &[0.0, 1.0 / a, -1.0 / a],
                Tol::new(1e-300, 1e-14),
            )
            .value;
            let v = e.phi1(a);
            assert!((v - oracle).abs() <= 1e-12 * oracle.abs().max(1e-300), "a={a}: {v} vs {oracle}");
        }
    }

    #[test]
    fn theta_closed_form_and_limits() {
        let e = KernelSpec::epanechnikov(1);
        assert_eq!(e.theta(0.0).unwrap(), 0.0);
        assert!((e.theta(1.0).unwrap() - (5.0 - 1.5 * PI)).abs() < 1e-14);
        let q = e.theta_quadrature(1.0).unwrap();
        assert!((q - (5.0 - 1.5 * PI)).abs() < 1e-12);
        let v = 1e6;
        assert!((e.theta(v).unwrap() / v - 2.0).abs() < 1e-3);
        assert!((e.theta_prime(1e4).unwrap() - 2.0).abs() < 1e-3);
        assert!(e.theta(-1.0).is_err());
    }

    #[test]
    fn theta_prime_matches_finite_difference() {
        for fam in [KernelFamily::Epanechnikov, KernelFamily::Gaussian] {
            let k = KernelSpec::new(fam, 1).unwrap();
            for v in [0.3, 1.0, 2.5] {
                let h = 1e-5;
                let fd = (k.theta(v + h).unwrap() - k.theta(v - h).unwrap()) / (2.0 * h);
                assert!((fd - k.theta_prime(v).unwrap()).abs() < 1e-6, "{fam} v={v}");
            }
        }
    }

    #[test]
    fn theta_is_v2_phi1_prime() {
        let k = KernelSpec::gaussian(1);
        for v in [0.5, 2.0] {
            let h = 1e-5;
            let d = (k.phi1(v + h) - k.phi1(v - h)) / (2.0 * h);
            assert!((v * v * d - k.theta(v).unwrap()).abs() < 1e-7);
        }
    }

    #[test]
    fn sphere_average_closed_forms() {
        // avg over S² of log(w1² + w2²) = 2 log 2 − 2
        let v = sphere_log_average(&[1.0, 1.0, 0.0]);
        assert!((v - (2.0 * 2f64.ln() - 2.0)).abs() < 1e-12);
        // avg over S² of log w3² = −2
        let v = sphere_log_average(&[1.0, 0.0, 0.0]);
        assert!((v + 2.0).abs() < 1e-12);
        assert!(sphere_log_average(&[1.0, 1.0, 1.0]).abs() < 1e-14);
        // circle: avg log cos²θ = −2 log 2
        assert!((sphere_log_average(&[1.0, 0.0]) + 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn phi_finite_2d_against_brute_force() {
        let k = KernelSpec::epanechnikov(2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.2, 2.0]);
        let v = k.phi_s(Scale::Finite(1.5), &a).unwrap();
        // polar brute force: GL in r, trapezoid in θ
        let gl = crate::quad::GaussLegendre::new(60);
        let nth = 400;
        let mut acc = 0.0;
        for i in 0..nth {
            let th = 2.0 * PI * i as f64 / nth as f64;
            let w = [th.cos(), th.sin()];
            let aw0 = a[(0, 0)] * w[0] + a[(0, 1)] * w[1];
            let aw1 = a[(1, 0)] * w[0] + a[(1, 1)] * w[1];
            let q = aw0 * aw0 + aw1 * aw1;
            acc += gl.integrate(|r| k.profile(r) * r * (1.0 / 2.25 + r * r * q).ln(), 0.0, 1.0);
        }
        let brute = acc * 2.0 * PI / nth as f64;
        assert!((v - brute).abs() < 1e-10, "{v} vs {brute}");
    }

    #[test]
    fn phi_infinite_matches_large_s_limit() {
        let k = KernelSpec::epanechnikov(3);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.3, 0.0, 1.0, -0.4]);
        let inf = k.phi_s(Scale::Infinite, &a).unwrap();
        let big = k.phi_s(Scale::Finite(1e5), &a).unwrap();
        assert!((inf - big).abs() < 1e-6, "{inf} vs {big}");
    }
}
