//! Discrete energies, analytic gradients and plain gradient descent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::PiecewiseLinearMap;
use crate::error::{Error, Result};
use crate::graph::{build_q, ordered_pair_sum, sq_dist, AffinityGraph, EmbeddingAffinity};
use crate::kernels::RepulsionKernel;

/// `Σ p_ij log(p_ij / q_ij)` over the support of `P`.
pub fn kl_divergence(p: &AffinityGraph, q: &EmbeddingAffinity) -> Result<f64> {
    if p.n != q.n {
        return Err(Error::Dimension(format!("P has {} points, Q has {}", p.n, q.n)));
    }
    let mut s = 0.0;
    for i in 0..p.n {
        for (j, pij) in p.symmetric.row(i) {
            if pij <= 0.0 {
                continue;
            }
            let qij = q.q(i, j);
            if qij <= 0.0 {
                return Err(Error::InfiniteEnergy(format!("q_{i}{j} = 0 where p > 0")));
            }
            s += pij * (pij / qij).ln();
        }
    }
    Ok(s)
}

/// Decomposed energies for an embedding `Y` of data with affinities `P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub kl: f64,
    /// `Σ p_ij log ψ_ij⁻¹`
    pub attraction: f64,
    /// `log Z`
    pub repulsion: f64,
    /// `Σ p_ij log p_ij`
    pub constant: f64,
    pub a_n: f64,
    pub r_n: f64,
    pub h: f64,
    /// `KL(P ‖ Q(Y/h)) − A_n − R_n`; equals `Σ p log p + log n(n − 1)` when degrees exclude the self term.
    pub offset: f64,
}

fn entropy_term(p: &AffinityGraph) -> f64 {
    let mut s = 0.0;
    for i in 0..p.n {
        for (_, v) in p.symmetric.row(i) {
            if v > 0.0 {
                s += v * v.ln();
            }
        }
    }
    s
}

/// KL rewrite `KL = Σ p log p + Σ p log ψ⁻¹ + log Z` for the given ψ.
pub fn kl_terms(p: &AffinityGraph, y: &[f64], m: usize, psi: RepulsionKernel) -> Result<(f64, f64, f64, f64)> {
    let q = build_q(y, m, psi)?;
    let kl = kl_divergence(p, &q)?;
    let constant = entropy_term(p);
    let mut attraction = 0.0;
    for i in 0..p.n {
        for (j, v) in p.symmetric.row(i) {
            attraction += v * psi.neg_log_sq(sq_dist(y, m, i, j));
        }
    }
    Ok((kl, constant, attraction, q.z.ln()))
}

/// `A_n = (1/n) Σ_i d_i⁻¹ Σ_j η_{h_i}(|x_i − x_j|) log(1 + h⁻²|T_i − T_j|²)`
pub fn discrete_attraction(p: &AffinityGraph, t: &[f64], m: usize, h: f64) -> f64 {
    let ih2 = 1.0 / (h * h);
    let mut a = 0.0;
    for i in 0..p.n {
        let mut row = 0.0;
        for (j, w) in p.weights.row(i) {
            row += w * (ih2 * sq_dist(t, m, i, j)).ln_1p();
        }
        a += row / p.degrees[i];
    }
    a / p.n as f64
}

/// `R_n = log((1/n(n − 1)) Σ_{i≠j} (1 + h⁻²|T_i − T_j|²)⁻¹)`
pub fn discrete_repulsion(t: &[f64], m: usize, h: f64) -> f64 {
    let n = t.len() / m;
    let ih2 = 1.0 / (h * h);
    let z = ordered_pair_sum(n, |i, j| 1.0 / (1.0 + ih2 * sq_dist(t, m, i, j)));
    (z / (n as f64 * (n as f64 - 1.0))).ln()
}

/// `A_n`, `R_n` for the map values `T = Y` at bandwidth `h`, plus the KL terms of `Y/h`.
pub fn rescaled_energy(p: &AffinityGraph, t: &[f64], m: usize, h: f64) -> Result<EnergyReport> {
    let n = p.n;
    if t.len() != n * m {
        return Err(Error::Dimension("embedding size does not match P".into()));
    }
    if p.degrees.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Precondition("all degrees must be positive".into()));
    }
    let a_n = discrete_attraction(p, t, m, h);
    let r_n = discrete_repulsion(t, m, h);
    let scaled: Vec<f64> = t.iter().map(|v| v / h).collect();
    let (kl, constant, attraction, repulsion) = kl_terms(p, &scaled, m, RepulsionKernel::StudentT)?;
    Ok(EnergyReport {
        kl,
        attraction,
        repulsion,
        constant,
        a_n,
        r_n,
        h,
        offset: kl - a_n - r_n,
    })
}

/// Which embedding kernel the descent uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Tsne,
    Sne,
}

impl Mode {
    pub fn psi(self) -> RepulsionKernel {
        match self {
            Mode::Tsne => RepulsionKernel::StudentT,
            Mode::Sne => RepulsionKernel::Gaussian,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsne" | "t-sne" => Ok(Mode::Tsne),
            "sne" => Ok(Mode::Sne),
            _ => Err(Error::Parameter(format!("unknown mode '{s}'"))),
        }
    }
}

fn sparse_row_p(p: &AffinityGraph, i: usize) -> Vec<(usize, f64)> {
    p.symmetric.row(i).collect()
}

/// `∇_{y_i} KL = 4 Σ_j (p_ij − q_ij) ψ_ij (y_i − y_j)` with Student-t ψ.
pub fn tsne_gradient(p: &AffinityGraph, y: &[f64], m: usize) -> Result<Vec<f64>> {
    gradient(p, y, m, Mode::Tsne)
}

/// `∇_{y_i} KL = 4 Σ_j (p_ij − q_ij)(y_i − y_j)` with Gaussian ψ.
pub fn sne_gradient(p: &AffinityGraph, y: &[f64], m: usize) -> Result<Vec<f64>> {
    gradient(p, y, m, Mode::Sne)
}

pub fn gradient(p: &AffinityGraph, y: &[f64], m: usize, mode: Mode) -> Result<Vec<f64>> {
    let n = p.n;
    if y.len() != n * m || n < 2 {
        return Err(Error::Dimension("embedding size does not match P".into()));
    }
    let psi = mode.psi();
    // per row: (Σ_j ψ_ij, Σ_j ψ_ij w_ij (y_i − y_j), Σ_j p_ij w_ij (y_i − y_j))
    let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * m..(i + 1) * m];
            let mut zi = 0.0;
            let mut rep = vec![0.0; m];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let ps = psi.eval_sq(sq_dist(y, m, i, j));
                zi += ps;
                let c = match mode {
                    Mode::Tsne => ps * ps,
                    Mode::Sne => ps,
                };
                for a in 0..m {
                    rep[a] += c * (yi[a] - y[j * m + a]);
                }
            }
            let mut att = vec![0.0; m];
            for (j, pij) in sparse_row_p(p, i) {
                let w = match mode {
                    Mode::Tsne => psi.eval_sq(sq_dist(y, m, i, j)),
                    Mode::Sne => 1.0,
                };
                for a in 0..m {
                    att[a] += pij * w * (yi[a] - y[j * m + a]);
                }
            }
            (zi, rep, att)
        })
        .collect();
    let z: f64 = rows.iter().map(|r| r.0).sum();
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|(_, rep, att)| att.iter().zip(&rep).map(|(a, r)| 4.0 * (a - r / z)).collect())
        .collect();
    Ok(rows.concat())
}

/// One entry of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub kl: f64,
    pub a_n: f64,
    pub r_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub y: Vec<f64>,
    pub m: usize,
    pub step: usize,
    pub trace: Vec<TraceRow>,
    pub dt: f64,
    pub seed: u64,
    pub diverged: bool,
}

impl EmbeddingState {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.kl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentOptions {
    pub steps: usize,
    pub dt: f64,
    pub mode: Mode,
    /// Record the loss every `record_every` steps (and always at the end).
    pub record_every: usize,
}

/// Divergence threshold on `|Y|`.
pub const DIVERGENCE_BOUND: f64 = 1e12;

fn trace_row(p: &AffinityGraph, y: &[f64], m: usize, mode: Mode, step: usize) -> Result<TraceRow> {
    let (kl, _, _, _) = kl_terms(p, y, m, mode.psi())?;
    let e = rescaled_energy(p, y, m, 1.0)?;
    Ok(TraceRow {
        step,
        kl,
        a_n: e.a_n,
        r_n: e.r_n,
    })
}

/// Plain gradient descent `Y ← Y − dt ∇KL`.
pub fn descend(p: &AffinityGraph, y0: &[f64], m: usize, seed: u64, opts: DescentOptions) -> Result<EmbeddingState> {
    if !(opts.dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be positive, got {}", opts.dt)));
    }
    let every = opts.record_every.max(1);
    let mut y = y0.to_vec();
    let mut trace = vec![trace_row(p, &y, m, opts.mode, 0)?];
    let mut diverged = false;
    let mut step = 0;
    while step < opts.steps {
        let g = gradient(p, &y, m, opts.mode)?;
        let next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - opts.dt * b).collect();
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            diverged = true;
            break;
        }
        y = next;
        step += 1;
        if step % every == 0 || step == opts.steps {
            trace.push(trace_row(p, &y, m, opts.mode, step)?);
        }
    }
    if diverged && trace.last().map(|r| r.step) != Some(step) {
        trace.push(trace_row(p, &y, m, opts.mode, step)?);
    }
    Ok(EmbeddingState {
        y,
        m,
        step,
        trace,
        dt: opts.dt,
        seed,
        diverged,
    })
}

/// Initialization of the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// i.i.d. `N(0, 1) · 10⁻²`
    Random,
    /// `y_i = x_i / h` (requires `m = d`)
    Identity,
    /// `y_i = T*(x_i) / h` from the 1D continuum solver
    Continuum,
}

impl std::str::FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "identity" => Ok(Init::Identity),
            "continuum" => Ok(Init::Continuum),
            _ => Err(Error::Parameter(format!("unknown init '{s}'"))),
        }
    }
}

/// Standard deviation of the random initialization.
pub const RANDOM_INIT_SCALE: f64 = 1e-2;

pub fn initialize(points: &[f64], d: usize, m: usize, init: Init, h: f64, seed: u64, continuum: Option<&PiecewiseLinearMap>) -> Result<Vec<f64>> {
    let n = points.len() / d;
    match init {
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, RANDOM_INIT_SCALE).expect("valid normal");
            Ok((0..n * m).map(|_| normal.sample(&mut rng)).collect())
        }
        Init::Identity => {
            if d != m {
                return Err(Error::Dimension("identity initialization needs m = d".into()));
            }
            Ok(points.iter().map(|x| x / h).collect())
        }
        Init::Continuum => {
            let map = continuum.ok_or_else(|| Error::Precondition("continuum initialization needs T*".into()))?;
            if d != 1 || m != 1 {
                return Err(Error::Dimension("continuum initialization needs d = m = 1".into()));
            }
            Ok(points.iter().map(|&x| map.eval(x) / h).collect())
        }
    }
}

/// `h (Y − min Y)` for `m = 1`, `h (Y − mean Y)` otherwise.
pub fn postprocess(y: &[f64], m: usize, h: f64) -> Vec<f64> {
    let n = y.len() / m;
    if m == 1 {
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        return y.iter().map(|v| h * (v - lo)).collect();
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for a in 0..m {
            mean[a] += y[i * m + a] / n as f64;
        }
    }
    y.iter().enumerate().map(|(k, v)| h * (v - mean[k % m])).collect()
}

/// Discrete map `T_n`: sort by `x` and interpolate the postprocessed embedding.
pub fn discrete_map(x: &[f64], t: &[f64]) -> Result<PiecewiseLinearMap> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    PiecewiseLinearMap::new(idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| t[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BandwidthField, DensitySpec};
    use crate::graph::{build_affinities, GraphOptions};
    use crate::kernels::KernelSpec;

    fn instance(n: usize, seed: u64) -> (AffinityGraph, Vec<f64>) {
        let d = DensitySpec::unit_interval();
        let cloud = d.sample(n, seed).unwrap();
        let p = build_affinities(
            &cloud,
            &KernelSpec::gaussian(1),
            &BandwidthField::constant(1.0),
            &d,
            0.3,
            GraphOptions::default(),
        )
        .unwrap();
        let y = initialize(&cloud.points, 1, 2, Init::Random, 1.0, seed + 1, None).unwrap();
        (p, y.iter().map(|v| v * 100.0).collect())
    }

    #[test]
    fn kl_is_zero_when_q_equals_p() {
        // two points: P = Q = 1/2
        let p = AffinityGraph::from_dense_p(&[0.0, 0.5, 0.5, 0.0], 2).unwrap();
        let q = build_q(&[0.0, 3.0], 1, RepulsionKernel::StudentT).unwrap();
        assert!(kl_divergence(&p, &q).unwrap().abs() < 1e-15);
        let g = tsne_gradient(&p, &[0.0, 3.0], 1).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kl_matches_hand_computation() {
        let pm = [0.0, 0.2, 0.1, 0.2, 0.0, 0.2, 0.1, 0.2, 0.0];
        let p = AffinityGraph::from_dense_p(&pm, 3).unwrap();
        let y = [0.0, 1.0, 3.0];
        let q = build_q(&y, 1, RepulsionKernel::StudentT).unwrap();
        let psi = |a: f64, b: f64| 1.0 / (1.0 + (a - b) * (a - b));
        let z = 2.0 * (psi(0.0, 1.0) + psi(0.0, 3.0) + psi(1.0, 3.0));
        let mut expect = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let qq = psi(y[i], y[j]) / z;
                    expect += pm[i * 3 + j] * (pm[i * 3 + j] / qq).ln();
                }
            }
        }
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn rescaled_energy_examples() {
        let (p, _) = instance(6, 1);
        let same = vec![0.4; 6];
        let e = rescaled_energy(&p, &same, 1, 0.1).unwrap();
        assert_eq!(e.a_n, 0.0);
        assert!(e.r_n.abs() < 1e-15);
        let (p, y) = instance(12, 2);
        let e1 = rescaled_energy(&p, &y, 2, 0.5).unwrap();
        let shifted: Vec<f64> = y.iter().map(|v| v + 7.0).collect();
        let e2 = rescaled_energy(&p, &shifted, 2, 0.5).unwrap();
        assert!((e1.a_n - e2.a_n).abs() < 1e-12 && (e1.r_n - e2.r_n).abs() < 1e-12);
    }

    #[test]
    fn two_point_rescaled_energy() {
        let d = DensitySpec::unit_interval();
        let cloud = crate::data::PointCloud::from_points(1, vec![0.4, 0.5]).unwrap();
        let k = KernelSpec::epanechnikov(1);
        let p = build_affinities(&cloud, &k, &BandwidthField::constant(1.0), &d, 0.2, GraphOptions::default()).unwrap();
        let h = 0.2;
        let t = [0.0, 0.3];
        let e = rescaled_energy(&p, &t, 1, h).unwrap();
        let w = k.scaled(0.1, h);
        let deg = w + k.scaled(0.0, h);
        let a = (w / deg) * (1.0 + 0.09 / (h * h)).ln();
        let r = (1.0 / (1.0 + 0.09 / (h * h))).ln();
        assert!((e.a_n - a).abs() < 1e-14 && (e.r_n - r).abs() < 1e-14);
    }

    #[test]
    fn gradients_sum_to_zero() {
        for mode in [Mode::Tsne, Mode::Sne] {
            let (p, y) = instance(15, 4);
            let g = gradient(&p, &y, 2, mode).unwrap();
            for a in 0..2 {
                let s: f64 = (0..15).map(|i| g[i * 2 + a]).sum();
                assert!(s.abs() < 1e-14, "{mode:?} {s}");
            }
        }
    }

    #[test]
    fn descent_basics() {
        let (p, y) = instance(10, 5);
        let opts = DescentOptions {
            steps: 0,
            dt: 1.0,
            mode: Mode::Tsne,
            record_every: 1,
        };
        let s = descend(&p, &y, 2, 0, opts).unwrap();
        assert_eq!(s.y, y);
        assert!(descend(&p, &y, 2, 0, DescentOptions { dt: 0.0, ..opts }).is_err());
        let s = descend(&p, &y, 2, 0, DescentOptions { steps: 50, ..opts }).unwrap();
        assert!(s.trace.last().unwrap().kl < s.trace[0].kl);
        let s = descend(&p, &y, 2, 0, DescentOptions { steps: 50, dt: 1e15, ..opts }).unwrap();
        assert!(s.diverged && s.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn postprocess_examples() {
        assert_eq!(postprocess(&[0.0, 1.0, 2.0], 1, 0.5), vec![0.0, 0.5, 1.0]);
        assert_eq!(postprocess(&[2.0, 3.0], 1, 2.0), vec![0.0, 2.0]);
        let map = discrete_map(&[0.3, 0.1, 0.2], &[3.0, 1.0, 2.0]).unwrap();
        assert!(map.is_strictly_increasing());
    }

    fn kl_of(p: &AffinityGraph, y: &[f64], m: usize, mode: Mode) -> f64 {
        kl_divergence(p, &build_q(y, m, mode.psi()).unwrap()).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [Mode::Tsne, Mode::Sne] {
            for seed in 0..4 {
                let (p, y) = instance(5, 10 + seed);
                let y: Vec<f64> = y.iter().map(|v| v * 0.05).collect();
                let g = gradient(&p, &y, 2, mode).unwrap();
                let step = 1e-6;
                for k in 0..y.len() {
                    let (mut a, mut b) = (y.clone(), y.clone());
                    a[k] += step;
                    b[k] -= step;
                    let fd = (kl_of(&p, &a, 2, mode) - kl_of(&p, &b, 2, mode)) / (2.0 * step);
                    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    assert!((fd - g[k]).abs() <= 1e-5 * scale, "{mode:?} {k}: {fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn kl_rewrite_and_rescaling_offset() {
        for n in [3, 10, 100] {
            let d = DensitySpec::unit_interval();
            let cloud = d.sample(n, n as u64).unwrap();
            let opts = GraphOptions { include_self_in_degree: false };
            let p = build_affinities(&cloud, &KernelSpec::gaussian(1), &BandwidthField::constant(1.0), &d, 0.5, opts).unwrap();
            let y = initialize(&cloud.points, 1, 1, Init::Random, 1.0, 3, None).unwrap();
            let y: Vec<f64> = y.iter().map(|v| v * 300.0).collect();
            let (kl, c, a, r) = kl_terms(&p, &y, 1, RepulsionKernel::StudentT).unwrap();
            assert!((kl - (c + a + r)).abs() < 1e-10);
            let h = 0.3;
            let t: Vec<f64> = y.iter().map(|v| v * h).collect();
            let e = rescaled_energy(&p, &t, 1, h).unwrap();
            let expect = c + ((n * (n - 1)) as f64).ln();
            assert!((e.offset - expect).abs() < 1e-10, "{n}: {} vs {expect}", e.offset);
        }
    }
}
