//! Pair interactions of piecewise-constant densities on regular grids.
//!
//! For a histogram with cells of widths `δ_i`, the double integral
//! `∬ ρ(y) ρ(y') K(y − y') dy dy'` equals `Σ_k G(k) W(k)` where `G` is the
//! autocorrelation of the bin masses and `W(k)` is the average of `K` over a
//! pair of cells at lag `k`. Both supported kernels are Laplace transforms of
//! Gaussians, `K(y) = ∫_0^∞ w(t) e^{-t|y|²} dt`, so `W(k)` reduces to a
//! one-dimensional integral of products of the per-axis factors
//! `f(τ; k) = ∫_{-1}^{1} (1 − |u|) e^{-τ (k + u)²} du`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::Histogram;
use crate::error::{Error, Result};
use crate::quad::{integrate_with, GaussLegendre, Tol};

/// Translation-invariant pair kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairKernel {
    /// `(1 + |y|²/h²)⁻¹`
    Lorentz { h: f64 },
    /// `|y|⁻²`
    Riesz,
}

impl PairKernel {
    pub fn eval(&self, r2: f64) -> f64 {
        match *self {
            PairKernel::Lorentz { h } => h * h / (h * h + r2),
            PairKernel::Riesz => 1.0 / r2,
        }
    }

    // (1/12) Σ_i δ_i² ∂_ii K at y
    fn laplacian_correction(&self, y: &[f64], widths: &[f64]) -> f64 {
        let r2: f64 = y.iter().map(|v| v * v).sum();
        let (a, c2) = match *self {
            PairKernel::Lorentz { h } => (h * h + r2, h * h),
            PairKernel::Riesz => (r2, 1.0),
        };
        let mut s = 0.0;
        for (yi, di) in y.iter().zip(widths) {
            s += di * di * c2 * (-2.0 / (a * a) + 8.0 * yi * yi / (a * a * a));
        }
        s / 12.0
    }
}

/// Per-axis factor `f(τ; k)`; even in `k`.
pub fn lag_factor(tau: f64, k: u64) -> f64 {
    let kf = k as f64;
    if tau == 0.0 {
        return 1.0;
    }
    if tau >= 50.0 {
        return match k {
            0 => (PI / tau).sqrt() - 1.0 / tau,
            1 => 0.5 / tau,
            _ => 0.0,
        };
    }
    if tau * (kf + 1.0) * (kf + 1.0) <= 4.0 {
        let gl = gl16();
        return gl
            .mapped(0.0, 1.0)
            .map(|(u, w)| w * (1.0 - u) * ((-tau * (kf + u).powi(2)).exp() + (-tau * (kf - u).powi(2)).exp()))
            .sum();
    }
    // Factor out the largest exponential so the panel integrals are O(1).
    let v0 = if k == 0 { 0.0 } else { kf - 1.0 };
    let scale = (-tau * v0 * v0).exp();
    let g = |v: f64| {
        let tent = 1.0 - (v - kf).abs();
        tent * (-tau * (v * v - v0 * v0)).exp()
    };
    let tol = Tol::new(1e-15, 1e-13);
    let width = (5.0 / tau.sqrt()).min(1.0);
    if k == 0 {
        let b: Vec<f64> = [width].into_iter().filter(|&b| b < 1.0).collect();
        2.0 * integrate_with(g, 0.0, 1.0, &b, tol).value
    } else {
        let b: Vec<f64> = [v0 + width, kf].into_iter().filter(|&b| b > v0 && b < kf + 1.0).collect();
        scale * integrate_with(g, v0, kf + 1.0, &b, tol).value
    }
}

fn gl16() -> &'static GaussLegendre {
    use std::sync::OnceLock;
    static GL: OnceLock<GaussLegendre> = OnceLock::new();
    GL.get_or_init(|| GaussLegendre::new(16))
}

/// Exact cell-pair average of the kernel at integer lag `k` for cells of the given widths.
pub fn lag_weight(kernel: PairKernel, widths: &[f64], k: &[u64]) -> f64 {
    let m = widths.len();
    let prod = |t: f64| -> f64 {
        let mut p = 1.0;
        for i in 0..m {
            p *= lag_factor(t * widths[i] * widths[i], k[i]);
            if p == 0.0 {
                break;
            }
        }
        p
    };
    let dmin2 = widths.iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    let reach: f64 = widths.iter().zip(k).map(|(d, &ki)| d * d * ((ki as f64) + 1.0).powi(2)).sum();
    let t_lo = 1e-16 / reach;
    let (weight, t_hi): (Box<dyn Fn(f64) -> f64>, f64) = match kernel {
        PairKernel::Lorentz { h } => {
            let c = h * h;
            (Box::new(move |t: f64| c * (-t * c).exp()), (50.0 / dmin2).max(60.0 / c))
        }
        PairKernel::Riesz => (Box::new(|_| 1.0), 50.0 / dmin2),
    };
    let mut breaks: Vec<f64> = widths
        .iter()
        .zip(k)
        .map(|(d, &ki)| (1.0 / (d * d * ((ki as f64).powi(2) + 1.0))).ln())
        .collect();
    if let PairKernel::Lorentz { h } = kernel {
        breaks.push(-2.0 * h.ln());
    }
    let (lo, hi) = (t_lo.ln(), t_hi.ln());
    breaks.retain(|&b| b > lo && b < hi);
    breaks.sort_by(f64::total_cmp);
    let body = integrate_with(
        |s| {
            let t = s.exp();
            t * weight(t) * prod(t)
        },
        lo,
        hi,
        &breaks,
        Tol::new(1e-300, 1e-11),
    )
    .value;
    let head = weight(0.0) * t_lo;
    let tail = match kernel {
        PairKernel::Riesz => riesz_tail(widths, k, t_hi),
        PairKernel::Lorentz { .. } => 0.0,
    };
    head + body + tail
}

// ∫_T^∞ Π_i f(t δ_i²; k_i) dt using the large-τ forms of the factors.
fn riesz_tail(widths: &[f64], k: &[u64], t: f64) -> f64 {
    // polynomial in t^{-1/2}: coefficient index = power
    let mut poly = vec![1.0];
    for (d, &ki) in widths.iter().zip(k) {
        let factor = match ki {
            0 => vec![0.0, PI.sqrt() / d, -1.0 / (d * d)],
            1 => vec![0.0, 0.0, 0.5 / (d * d)],
            _ => return 0.0,
        };
        let mut next = vec![0.0; poly.len() + factor.len() - 1];
        for (i, a) in poly.iter().enumerate() {
            for (j, b) in factor.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        poly = next;
    }
    poly.iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(p, c)| {
            let e = p as f64 / 2.0;
            c * t.powf(1.0 - e) / (e - 1.0)
        })
        .sum()
}

/// Far-field approximation of `lag_weight`: `K(y_k) + (1/12) Σ δ_i² ∂_ii K(y_k)`.
pub fn lag_weight_far(kernel: PairKernel, widths: &[f64], k: &[u64]) -> f64 {
    let y: Vec<f64> = widths.iter().zip(k).map(|(d, &ki)| d * ki as f64).collect();
    let r2: f64 = y.iter().map(|v| v * v).sum();
    kernel.eval(r2) + kernel.laplacian_correction(&y, widths)
}

/// Autocorrelation `G(k) = Σ_c m_c m_{c+k}` for nonnegative lags per axis,
/// indexed like the histogram (lags folded by symmetry `G(k) = G(−k)` per axis are not merged).
fn autocorrelation(masses: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let dims: Vec<usize> = shape.iter().map(|&s| (2 * s).next_power_of_two().max(1)).collect();
    let total: usize = dims.iter().product();
    let mut buf = vec![Complex::new(0.0, 0.0); total];
    let m = shape.len();
    let mut idx = vec![0usize; m];
    for &v in masses {
        let mut off = 0;
        for a in 0..m {
            off = off * dims[a] + idx[a];
        }
        buf[off] = Complex::new(v, 0.0);
        for a in (0..m).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    fft_nd(&mut buf, &dims, &mut planner, false);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    fft_nd(&mut buf, &dims, &mut planner, true);
    let scale = 1.0 / total as f64;
    (buf.iter().map(|z| z.re * scale).collect(), dims)
}

fn fft_nd(buf: &mut [Complex<f64>], dims: &[usize], planner: &mut FftPlanner<f64>, inverse: bool) {
    let m = dims.len();
    let total = buf.len();
    for axis in 0..m {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let stride: usize = dims[axis + 1..].iter().product();
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for start in 0..total {
            // first element of a line along `axis`
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (j, slot) in line.iter_mut().enumerate() {
                *slot = buf[start + j * stride];
            }
            fft.process(&mut line);
            for (j, v) in line.iter().enumerate() {
                buf[start + j * stride] = *v;
            }
        }
    }
}

/// Options for `pair_integral`.
#[derive(Debug, Clone, Copy)]
pub struct PairOptions {
    /// Lags with `|y_k| ≥ far_radius · max δ` use the far-field formula.
    pub far_radius: f64,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions { far_radius: 16.0 }
    }
}

/// `∬ ρ(y) ρ(y') K(y − y') dy dy'` for a histogram density.
pub fn pair_integral(hist: &Histogram, kernel: PairKernel, opts: PairOptions) -> Result<f64> {
    let m = hist.dim();
    if !(1..=3).contains(&m) {
        return Err(Error::Dimension(format!("pair integrals need m ∈ {{1,2,3}}, got {m}")));
    }
    if kernel == PairKernel::Riesz && m < 3 {
        return Err(Error::Dimension("the |y|⁻² kernel is not integrable for m < 3".into()));
    }
    let masses = hist.masses();
    let (g, dims) = autocorrelation(&masses, &hist.shape);
    let dmax = hist.width.iter().copied().fold(0.0, f64::max);
    let far2 = (opts.far_radius * dmax).powi(2);
    let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut lag = vec![0usize; m];
    let total: usize = dims.iter().product();
    let mut terms: Vec<(Vec<u64>, f64)> = Vec::new();
    for off in 0..total {
        let mut rem = off;
        for a in (0..m).rev() {
            lag[a] = rem % dims[a];
            rem /= dims[a];
        }
        let mut key = Vec::with_capacity(m);
        let mut valid = true;
        for a in 0..m {
            let l = lag[a];
            let s = hist.shape[a];
            let k = if l < s {
                l
            } else if dims[a] - l < s {
                dims[a] - l
            } else {
                valid = false;
                0
            };
            key.push(k as u64);
        }
        if !valid || g[off].abs() < 1e-300 {
            continue;
        }
        terms.push((key, g[off]));
    }
    let mut total_sum = 0.0;
    for (key, gv) in terms {
        let w = match cache.get(&key) {
            Some(&w) => w,
            None => {
                let r2: f64 = key.iter().zip(&hist.width).map(|(&k, d)| (k as f64 * d).powi(2)).sum();
                let w = if r2 >= far2 {
                    lag_weight_far(kernel, &hist.width, &key)
                } else {
                    lag_weight(kernel, &hist.width, &key)
                };
                cache.insert(key, w);
                w
            }
        };
        total_sum += gv.max(0.0) * w;
    }
    Ok(total_sum)
}

/// Exact `∬ (1 + (y − y')²/h²)⁻¹ dy dy'` over `[a, b] × [c, d]`.
pub fn lorentz_rectangle(h: f64, a: f64, b: f64, c: f64, d: f64) -> f64 {
    let f = |u: f64| u * u.atan() - 0.5 * (u * u).ln_1p();
    let g = |t: f64| h * h * f(t / h);
    g(b - c) - g(b - d) - g(a - c) + g(a - d)
}

/// `∬ ρ(y) ρ(y') |y − y'|⁻² dy dy'` for a radial density in `R³` via
/// `(1/4π) ∫ |ρ̂(ω)|² / |ω| dω = ∫_0^∞ |ρ̂(ω)|² ω dω`.
pub fn riesz_fourier_radial<F: Fn(f64) -> f64 + Sync>(rho: F, radius: f64, omega_max: f64) -> f64 {
    let tol = Tol::new(1e-14, 1e-10);
    let rho_hat = |w: f64| {
        let inner = |r: f64| {
            let x = w * r;
            let sinc = if x.abs() < 1e-8 { 1.0 - x * x / 6.0 } else { x.sin() / x };
            rho(r) * r * r * sinc
        };
        let pieces = ((w * radius / PI).ceil() as usize).clamp(1, 4000);
        let breaks: Vec<f64> = (1..pieces).map(|i| radius * i as f64 / pieces as f64).collect();
        4.0 * PI * integrate_with(inner, 0.0, radius, &breaks, tol).value
    };
    let pieces = ((omega_max * radius / PI).ceil() as usize).clamp(1, 100_000);
    let breaks: Vec<f64> = (1..pieces).map(|i| omega_max * i as f64 / pieces as f64).collect();
    integrate_with(
        |w| {
            let r = rho_hat(w);
            r * r * w
        },
        0.0,
        omega_max,
        &breaks,
        Tol {
            abs: 1e-14,
            rel: 1e-9,
            max_intervals: 200_000,
        },
    )
    .value
}

/// `∬ ρ(y) ρ(y') |y − y'|⁻² dy dy'` for a radial density in `R³` by the
/// angular reduction `16π² ∬ ρ(r) ρ(r') r r' log|(r + r')/(r − r')| / 2 dr dr'`.
pub fn riesz_radial_direct<F: Fn(f64) -> f64>(rho: F, radius: f64) -> f64 {
    let tol = Tol::new(1e-14, 1e-11);
    let outer = |r: f64| {
        if r == 0.0 {
            return 0.0;
        }
        let inner = |s: f64| {
            if s == r {
                return 0.0;
            }
            rho(s) * s * ((r + s) / (r - s)).abs().ln()
        };
        let b: Vec<f64> = [r].into_iter().filter(|&b| b > 0.0 && b < radius).collect();
        rho(r) * r * integrate_with(inner, 0.0, radius, &b, tol).value
    };
    8.0 * PI * PI * integrate_with(outer, 0.0, radius, &[], tol).value
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factor_oracle(tau: f64, k: u64) -> f64 {
        let kf = k as f64;
        integrate_with(
            |u| (1.0 - u.abs()) * (-tau * (kf + u).powi(2)).exp(),
            -1.0,
            1.0,
            &[0.0, -kf, (-kf + 0.01).min(1.0)],
            Tol::new(1e-300, 1e-14),
        )
        .value
    }

    #[test]
    fn lag_factor_matches_direct_quadrature() {
        for &k in &[0u64, 1, 2, 3, 7, 15] {
            for &tau in &[1e-6, 0.01, 0.3, 1.0, 3.0, 4.5, 10.0, 40.0, 49.0, 60.0, 1e3] {
                let a = lag_factor(tau, k);
                let b = factor_oracle(tau, k);
                let scale = b.abs().max(1e-300);
                assert!((a - b).abs() <= 1e-9 * scale || (a - b).abs() < 1e-22, "k={k} tau={tau}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lorentz_weight_matches_rectangle_formula_in_one_dimension() {
        let h = 0.03;
        let d = 0.1;
        for k in 0..6u64 {
            let w = lag_weight(PairKernel::Lorentz { h }, &[d], &[k]);
            let kf = k as f64;
            let exact = lorentz_rectangle(h, kf * d, (kf + 1.0) * d, 0.0, d) / (d * d);
            assert!((w - exact).abs() < 1e-10 * exact, "k={k}: {w} vs {exact}");
        }
    }

    #[test]
    fn far_field_is_accurate_at_moderate_lags() {
        let widths = [0.05, 0.05, 0.05];
        let k = [12u64, 5, 3];
        let exact = lag_weight(PairKernel::Riesz, &widths, &k);
        let far = lag_weight_far(PairKernel::Riesz, &widths, &k);
        assert!(((exact - far) / exact).abs() < 1e-5);
        let h = 0.02;
        let exact = lag_weight(PairKernel::Lorentz { h }, &widths[..2], &k[..2]);
        let far = lag_weight_far(PairKernel::Lorentz { h }, &widths[..2], &k[..2]);
        assert!(((exact - far) / exact).abs() < 1e-5);
    }

    #[test]
    fn uniform_square_pair_integral_matches_direct_sum() {
        // identity map on [0,1]^1 as a histogram: compare with the exact formula
        let h = 0.05;
        let n = 20;
        let hist = Histogram {
            lo: vec![0.0],
            width: vec![1.0 / n as f64],
            shape: vec![n],
            values: vec![1.0; n],
        };
        let v = pair_integral(&hist, PairKernel::Lorentz { h }, PairOptions::default()).unwrap();
        let exact = lorentz_rectangle(h, 0.0, 1.0, 0.0, 1.0);
        assert!((v - exact).abs() < 1e-9, "{v} vs {exact}");
    }

    #[test]
    fn uniform_ball_riesz_paths_agree() {
        let rho = |r: f64| if r <= 1.0 { 3.0 / (4.0 * PI) } else { 0.0 };
        let direct = riesz_radial_direct(rho, 1.0);
        assert!((direct - 2.25).abs() < 1e-8, "{direct}");
    }

    #[test]
    fn smooth_radial_density_fourier_matches_direct() {
        // ρ ∝ (1 − r²)² on the unit ball; normalizing constant 105/(32π)
        let c = 105.0 / (32.0 * PI);
        let rho = move |r: f64| if r < 1.0 { c * (1.0 - r * r).powi(2) } else { 0.0 };
        let direct = riesz_radial_direct(rho, 1.0);
        let fourier = riesz_fourier_radial(rho, 1.0, 400.0);
        assert!(((direct - fourier) / direct).abs() < 1e-3, "{direct} vs {fourier}");
    }
}
