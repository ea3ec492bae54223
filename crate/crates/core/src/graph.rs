//! Affinity matrices `P` (data graph) and `Q` (embedding).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BandwidthField, DensitySpec, PointCloud};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, RepulsionKernel};

/// Compressed sparse rows with ascending column indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|e| e.1).sum()
    }

    pub fn total(&self) -> f64 {
        (0..self.n).map(|i| self.row_sum(i)).sum()
    }

    fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                rows[j].push((i, v));
            }
        }
        CsrMatrix::from_rows(self.n, rows)
    }

    /// `(A + Aᵀ) · scale`, assuming both have the same sparsity pattern up to transposition.
    fn symmetrize(&self, scale: f64) -> Self {
        let t = self.transpose();
        let mut rows = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut r: Vec<(usize, f64)> = Vec::new();
            let (mut a, mut b) = (self.row(i).peekable(), t.row(i).peekable());
            loop {
                match (a.peek().copied(), b.peek().copied()) {
                    (Some((ca, va)), Some((cb, vb))) => {
                        if ca == cb {
                            r.push((ca, (va + vb) * scale));
                            a.next();
                            b.next();
                        } else if ca < cb {
                            r.push((ca, va * scale));
                            a.next();
                        } else {
                            r.push((cb, vb * scale));
                            b.next();
                        }
                    }
                    (Some((ca, va)), None) => {
                        r.push((ca, va * scale));
                        a.next();
                    }
                    (None, Some((cb, vb))) => {
                        r.push((cb, vb * scale));
                        b.next();
                    }
                    (None, None) => break,
                }
            }
            rows.push(r);
        }
        CsrMatrix::from_rows(self.n, rows)
    }
}

/// Data-side affinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityGraph {
    pub n: usize,
    /// `η_{h_i}(|x_i − x_j|)` for `j ≠ i`.
    pub weights: CsrMatrix,
    /// `p_{j|i}`
    pub conditional: CsrMatrix,
    /// `p_ij = (p_{i|j} + p_{j|i}) / 2n`
    pub symmetric: CsrMatrix,
    /// `d_i = Σ_j η_{h_i}(|x_i − x_j|)`
    pub degrees: Vec<f64>,
    /// `h_i = σ(x_i) h`
    pub bandwidths: Vec<f64>,
    pub h: f64,
    pub include_self_in_degree: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphOptions {
    pub include_self_in_degree: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { include_self_in_degree: true }
    }
}

/// Relative cutoff below which Gaussian weights are dropped.
pub const GAUSSIAN_DROP: f64 = 1e-16;

pub fn build_affinities(
    cloud: &PointCloud,
    kernel: &KernelSpec,
    sigma: &BandwidthField,
    density: &DensitySpec,
    h: f64,
    opts: GraphOptions,
) -> Result<AffinityGraph> {
    let n = cloud.n();
    if n < 2 {
        return Err(Error::Parameter("need at least two points".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!("h must be positive, got {h}")));
    }
    if kernel.dim != cloud.d {
        return Err(Error::Dimension(format!("kernel dimension {} vs data dimension {}", kernel.dim, cloud.d)));
    }
    let bandwidths: Vec<f64> = (0..n).map(|i| sigma.eval(cloud.point(i), density) * h).collect();
    let eta0 = kernel.profile(0.0);
    let reach = kernel.support_radius();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = cloud.point(i);
            let hi = bandwidths[i];
            let mut row = Vec::new();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let r2: f64 = xi.iter().zip(cloud.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                let r = r2.sqrt() / hi;
                if let Some(rr) = reach {
                    if r >= rr {
                        continue;
                    }
                }
                let p = kernel.profile(r);
                if p <= GAUSSIAN_DROP * eta0 {
                    continue;
                }
                row.push((j, p / hi.powi(kernel.dim as i32)));
            }
            row
        })
        .collect();
    let weights = CsrMatrix::from_rows(n, rows);
    let mut cond = weights.clone();
    let mut degrees = Vec::with_capacity(n);
    for i in 0..n {
        let s = weights.row_sum(i);
        if !(s > 0.0) {
            return Err(Error::IsolatedVertex(i));
        }
        for k in cond.row_ptr[i]..cond.row_ptr[i + 1] {
            cond.vals[k] /= s;
        }
        let self_term = if opts.include_self_in_degree {
            eta0 / bandwidths[i].powi(kernel.dim as i32)
        } else {
            0.0
        };
        degrees.push(s + self_term);
    }
    let symmetric = cond.symmetrize(1.0 / (2.0 * n as f64));
    Ok(AffinityGraph {
        n,
        weights,
        conditional: cond,
        symmetric,
        degrees,
        bandwidths,
        h,
        include_self_in_degree: opts.include_self_in_degree,
    })
}

impl AffinityGraph {
    /// Build from an explicit symmetric probability matrix (dense, row-major).
    pub fn from_dense_p(p: &[f64], n: usize) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::Dimension("P must be n × n".into()));
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && p[i * n + j] > 0.0).map(|j| (j, p[i * n + j])).collect())
            .collect();
        let symmetric = CsrMatrix::from_rows(n, rows);
        let degrees = (0..n).map(|i| symmetric.row_sum(i)).collect();
        Ok(AffinityGraph {
            n,
            weights: symmetric.clone(),
            conditional: symmetric.clone(),
            symmetric,
            degrees,
            bandwidths: vec![1.0; n],
            h: 1.0,
            include_self_in_degree: false,
        })
    }

    /// `(i, j, p_ij)` rows for export.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.symmetric.nnz());
        for i in 0..self.n {
            for (j, v) in self.symmetric.row(i) {
                out.push((i, j, v));
            }
        }
        out
    }
}

/// Embedding-side affinities, stored implicitly through `Y` and `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingAffinity {
    pub n: usize,
    pub m: usize,
    pub y: Vec<f64>,
    pub psi: RepulsionKernel,
    /// `Z = Σ_{k≠l} ψ(|y_k − y_l|)`
    pub z: f64,
}

pub(crate) fn sq_dist(y: &[f64], m: usize, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for a in 0..m {
        let d = y[i * m + a] - y[j * m + a];
        s += d * d;
    }
    s
}

/// Per-row sums of `f(i, j)` over `j ≠ i`, reduced in index order.
pub(crate) fn ordered_pair_sum<F: Fn(usize, usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += f(i, j);
                }
            }
            s
        })
        .collect();
    rows.iter().sum()
}

pub fn build_q(y: &[f64], m: usize, psi: RepulsionKernel) -> Result<EmbeddingAffinity> {
    if m == 0 || !y.len().is_multiple_of(m) {
        return Err(Error::Dimension("embedding length is not a multiple of m".into()));
    }
    let n = y.len() / m;
    if n < 2 {
        return Err(Error::Parameter("need at least two points".into()));
    }
    let z = ordered_pair_sum(n, |i, j| psi.eval_sq(sq_dist(y, m, i, j)));
    Ok(EmbeddingAffinity { n, m, y: y.to_vec(), psi, z })
}

impl EmbeddingAffinity {
    #[inline]
    pub fn psi_ij(&self, i: usize, j: usize) -> f64 {
        self.psi.eval_sq(sq_dist(&self.y, self.m, i, j))
    }

    pub fn q(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.psi_ij(i, j) / self.z
        }
    }

    pub fn total(&self) -> f64 {
        ordered_pair_sum(self.n, |i, j| self.q(i, j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> PointCloud {
        PointCloud::from_points(1, points.to_vec()).unwrap()
    }

    fn graph(points: &[f64], h: f64) -> Result<AffinityGraph> {
        build_affinities(
            &line(points),
            &KernelSpec::epanechnikov(1),
            &BandwidthField::constant(1.0),
            &DensitySpec::unit_interval(),
            h,
            GraphOptions::default(),
        )
    }

    #[test]
    fn two_points() {
        let g = graph(&[0.2, 0.3], 0.5).unwrap();
        assert_eq!(g.conditional.get(0, 1), 1.0);
        assert_eq!(g.conditional.get(1, 0), 1.0);
        assert_eq!(g.symmetric.get(0, 1), 0.5);
        assert_eq!(g.symmetric.total(), 1.0);
    }

    #[test]
    fn three_equally_spaced_points() {
        // spacing 0.1, h = 0.15: each point sees only its immediate neighbours
        let g = graph(&[0.1, 0.2, 0.3], 0.15).unwrap();
        assert_eq!(g.conditional.get(0, 1), 1.0);
        assert_eq!(g.conditional.get(0, 2), 0.0);
        assert!((g.conditional.get(1, 0) - 0.5).abs() < 1e-15);
        assert!((g.conditional.get(1, 2) - 0.5).abs() < 1e-15);
        // wider bandwidth: weights follow η(r/h) = ¾(1 − r²/h²)
        let g = graph(&[0.1, 0.2, 0.3], 0.4).unwrap();
        let w1 = 1.0 - (0.1f64 / 0.4).powi(2);
        let w2 = 1.0 - (0.2f64 / 0.4).powi(2);
        assert!((g.conditional.get(0, 1) - w1 / (w1 + w2)).abs() < 1e-14);
    }

    #[test]
    fn isolated_vertex_is_reported() {
        assert_eq!(graph(&[0.1, 0.2, 0.9], 0.2).unwrap_err(), Error::IsolatedVertex(2));
    }

    #[test]
    fn rows_sum_to_one_and_total_mass() {
        let cloud = DensitySpec::unit_interval().sample(100, 3).unwrap();
        let g = build_affinities(
            &cloud,
            &KernelSpec::gaussian(1),
            &BandwidthField::constant(1.0),
            &DensitySpec::unit_interval(),
            0.1,
            GraphOptions::default(),
        )
        .unwrap();
        for i in 0..100 {
            assert!((g.conditional.row_sum(i) - 1.0).abs() < 1e-12);
            assert_eq!(g.symmetric.get(i, i), 0.0);
        }
        assert!((g.symmetric.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn q_examples() {
        let q = build_q(&[0.0, 1.0], 1, RepulsionKernel::StudentT).unwrap();
        assert_eq!(q.q(0, 1), 0.5);
        let s3 = 3f64.sqrt() / 2.0;
        let tri = [0.0, 0.0, 1.0, 0.0, 0.5, s3];
        let q = build_q(&tri, 2, RepulsionKernel::StudentT).unwrap();
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((q.q(i, j) - 1.0 / 6.0).abs() < 1e-15);
        }
    }
}
