//! Dense binary CRF over embedding patches.
//!
//! Each patch `i` carries an embedding `x_i`. Label costs are affine in the
//! embedding, `u_i(y) = W_y · x_i + b_y`, and every pair of patches pays
//! `w · k(x_i, x_j)` when their labels differ, with the Gaussian similarity
//! `k = exp(-|x_i - x_j|^2 / (2 θ^2))`.
//!
//! With two labels a mean-field row is a single number `q_i = Q_i(1)`, and the
//! sequential coordinate update reads
//!
//! ```text
//! q_i <- σ(u_i(0) - u_i(1) + w Σ_{j≠i} K_ij (2 q_j - 1))
//! ```
//!
//! The consistency score is the mean of `q` after `T` sweeps, clamped away from
//! 0 and 1. [`ScoreTape`] replays the sweeps backwards to differentiate the
//! score with respect to the CRF parameters and the embedding grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::netspec::{INIT_STD, SCORE_EPS};
use crate::par;
use crate::tensor::{EmbeddingGrid, Shape, Tensor};

/// Largest graph [`Potentials::gibbs_exact`] will enumerate.
pub const EXACT_MAX_PATCHES: usize = 14;

pub const DEFAULT_MAX_PATCHES: usize = 512;

pub const INIT_PAIRWISE_WEIGHT: f64 = 0.01;

fn sigmoid(v: f64) -> f64 {
    crate::netspec::ops::sigmoid(v)
}

/// Learnable CRF parameters stored flat as
/// `[W_0 (C), W_1 (C), b_0, b_1, w, ln θ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    channels: usize,
    data: Vec<f64>,
}

impl CrfParams {
    pub fn count(channels: usize) -> usize {
        2 * channels + 4
    }

    /// Gaussian unary weights, zero bias, small coupling, `θ = sqrt(C)`.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut data: Vec<f64> = (0..2 * channels).map(|_| normal.sample(rng)).collect();
        data.extend([0.0, 0.0, INIT_PAIRWISE_WEIGHT, 0.5 * (channels as f64).ln()]);
        CrfParams { channels, data }
    }

    pub fn from_vec(channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::count(channels) {
            return Err(Error::Parameter(format!(
                "CRF parameter vector has {} entries, expected {}",
                data.len(),
                Self::count(channels)
            )));
        }
        Ok(CrfParams { channels, data })
    }

    /// Explicit construction from the unary map, coupling and bandwidth.
    pub fn from_parts(w0: &[f64], w1: &[f64], bias: [f64; 2], weight: f64, bandwidth: f64) -> Result<Self> {
        if w0.len() != w1.len() || w0.is_empty() {
            return Err(Error::Parameter("unary rows must be non-empty and equal length".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Parameter(format!("bandwidth {bandwidth} must be positive")));
        }
        let mut data = w0.to_vec();
        data.extend_from_slice(w1);
        data.extend([bias[0], bias[1], weight, bandwidth.ln()]);
        let p = CrfParams {
            channels: w0.len(),
            data,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn unary_rows(&self) -> (&[f64], &[f64]) {
        let c = self.channels;
        (&self.data[..c], &self.data[c..2 * c])
    }

    pub fn bias(&self) -> [f64; 2] {
        [self.data[2 * self.channels], self.data[2 * self.channels + 1]]
    }

    pub fn weight(&self) -> f64 {
        self.data[2 * self.channels + 2]
    }

    pub fn bandwidth(&self) -> f64 {
        self.data[2 * self.channels + 3].exp()
    }

    /// Projects the pairwise weight back onto `w >= 0`.
    pub fn clamp_weight(&mut self) {
        let i = 2 * self.channels + 2;
        self.data[i] = self.data[i].max(0.0);
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite CRF parameter".into()));
        }
        if self.weight() < 0.0 {
            return Err(Error::Parameter(format!(
                "pairwise weight {} must be non-negative",
                self.weight()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    pub params: CrfParams,
    /// Mean-field sweeps `T`.
    pub iterations: usize,
    pub max_patches: usize,
}

impl CrfModel {
    pub fn new(params: CrfParams, iterations: usize, max_patches: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Parameter("mean-field iterations must be at least 1".into()));
        }
        if max_patches < 2 {
            return Err(Error::Parameter("max_patches must be at least 2".into()));
        }
        params.validate()?;
        Ok(CrfModel {
            params,
            iterations,
            max_patches,
        })
    }

    /// Unary costs and kernel matrix of a patch graph.
    pub fn potentials(&self, g: &PatchGraph) -> Result<Potentials> {
        self.params.validate()?;
        if g.dim != self.params.channels {
            return Err(Error::Graph(format!(
                "patch embeddings have {} channels, CRF expects {}",
                g.dim, self.params.channels
            )));
        }
        let (w0, w1) = self.params.unary_rows();
        let [b0, b1] = self.params.bias();
        let unary = (0..g.n)
            .map(|i| {
                let x = g.embedding(i);
                [dot(w0, x) + b0, dot(w1, x) + b1]
            })
            .collect();
        Ok(Potentials {
            unary,
            kernel: kernel_matrix(g, self.params.bandwidth()),
            weight: self.params.weight(),
        })
    }

    pub fn energy(&self, g: &PatchGraph, y: &[u8]) -> Result<f64> {
        self.potentials(g)?.energy(y)
    }

    pub fn gibbs_exact(&self, g: &PatchGraph) -> Result<(f64, MarginalField)> {
        self.potentials(g)?.gibbs_exact()
    }

    pub fn meanfield_infer(&self, g: &PatchGraph) -> Result<MarginalField> {
        Ok(self.potentials(g)?.meanfield(self.iterations))
    }

    /// Clamped mean of `Q_i(1)` over the patches of `g`.
    pub fn score_graph(&self, g: &PatchGraph) -> Result<f64> {
        let q = self.meanfield_infer(g)?;
        Ok(clamp(q.mean_consistent()))
    }

    /// The consistency score of an embedding grid.
    pub fn score(&self, a: &EmbeddingGrid) -> Result<f64> {
        self.score_graph(&PatchGraph::from_grid(a, self.max_patches)?)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn score_forward(&self, a: &EmbeddingGrid) -> Result<ScoreTape> {
        let graph = PatchGraph::from_grid(a, self.max_patches)?;
        let pot = self.potentials(&graph)?;
        let n = graph.n;
        let delta: Vec<f64> = pot.unary.iter().map(|u| u[0] - u[1]).collect();
        let mut q: Vec<f64> = delta.iter().map(|&d| sigmoid(d)).collect();
        let mut history = Vec::with_capacity(n * self.iterations);
        for _ in 0..self.iterations {
            for i in 0..n {
                history.push(q[i]);
                let s = pot.field(&q, i);
                q[i] = sigmoid(delta[i] + pot.weight * s);
            }
        }
        let raw = q.iter().sum::<f64>() / n as f64;
        Ok(ScoreTape {
            score: clamp(raw),
            raw,
            graph,
            pot,
            delta,
            q,
            history,
            iterations: self.iterations,
            params: self.params.clone(),
        })
    }
}

fn clamp(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_matrix(g: &PatchGraph, theta: f64) -> Vec<f64> {
    let n = g.n;
    let inv = 1.0 / (2.0 * theta * theta);
    let rows = par::map_range(n, |i| {
        let xi = g.embedding(i);
        (0..n)
            .map(|j| {
                if i == j {
                    1.0
                } else {
                    (-sq_dist(xi, g.embedding(j)) * inv).exp()
                }
            })
            .collect::<Vec<_>>()
    });
    rows.concat()
}

/// Patch embeddings flattened from an embedding grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    n: usize,
    dim: usize,
    x: Vec<f64>,
    coords: Vec<[usize; 3]>,
    pooling: usize,
    source: Shape,
}

impl PatchGraph {
    /// One patch per grid position, average-pooled by the smallest power of
    /// two that leaves at most `max_patches` patches.
    pub fn from_grid(a: &EmbeddingGrid, max_patches: usize) -> Result<Self> {
        if !a.is_finite() {
            return Err(Error::Numeric("embedding grid contains non-finite values".into()));
        }
        let s = a.shape();
        let mut p = 1usize;
        let pooled = |p: usize| [s.d.div_ceil(p), s.h.div_ceil(p), s.w.div_ceil(p)];
        while pooled(p).iter().product::<usize>() > max_patches {
            p *= 2;
        }
        let [pd, ph, pw] = pooled(p);
        let n = pd * ph * pw;
        if n < 2 {
            return Err(Error::Geometry(format!(
                "embedding {s} yields {n} patch(es); at least 2 are required"
            )));
        }
        let mut coords = Vec::with_capacity(n);
        for d in 0..pd {
            for h in 0..ph {
                for w in 0..pw {
                    coords.push([d, h, w]);
                }
            }
        }
        let rows = par::map_range(n, |i| {
            let [d, h, w] = coords[i];
            let mut v = vec![0.0; s.c];
            let mut count = 0usize;
            for dd in d * p..((d + 1) * p).min(s.d) {
                for hh in h * p..((h + 1) * p).min(s.h) {
                    for ww in w * p..((w + 1) * p).min(s.w) {
                        for (c, vc) in v.iter_mut().enumerate() {
                            *vc += a.data()[a.index(c, dd, hh, ww)];
                        }
                        count += 1;
                    }
                }
            }
            v.iter_mut().for_each(|e| *e /= count as f64);
            v
        });
        Ok(PatchGraph {
            n,
            dim: s.c,
            x: rows.concat(),
            coords,
            pooling: p,
            source: s,
        })
    }

    /// A graph from explicit patch embeddings (`n` rows of length `dim`).
    pub fn from_embeddings(n: usize, dim: usize, x: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Geometry("a patch graph needs at least 2 patches".into()));
        }
        if x.len() != n * dim || dim == 0 {
            return Err(Error::Graph(format!("{} values do not form {n} x {dim}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite patch embedding".into()));
        }
        Ok(PatchGraph {
            n,
            dim,
            x,
            coords: (0..n).map(|i| [0, 0, i]).collect(),
            pooling: 1,
            source: Shape::new(dim, 1, 1, n),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn pooling(&self) -> usize {
        self.pooling
    }

    /// Reorders patches so that new patch `k` is old patch `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n];
        if perm.len() != self.n || perm.iter().any(|&p| p >= self.n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Parameter("not a permutation of the patches".into()));
        }
        Ok(PatchGraph {
            x: perm.iter().flat_map(|&p| self.embedding(p).to_vec()).collect(),
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
            ..self.clone()
        })
    }

    fn pool_backward(&self, gx: &[f64]) -> Tensor {
        let s = self.source;
        let p = self.pooling;
        let [_, ph, pw] = [s.d.div_ceil(p), s.h.div_ceil(p), s.w.div_ceil(p)];
        let mut out = Tensor::zeros(s);
        let hw = s.h * s.w;
        par::for_each_chunk(out.data_mut(), s.spatial(), |c, plane| {
            for d in 0..s.d {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let (bd, bh, bw) = (d / p, h / p, w / p);
                        let i = (bd * ph + bh) * pw + bw;
                        let count = (((bd + 1) * p).min(s.d) - bd * p)
                            * (((bh + 1) * p).min(s.h) - bh * p)
                            * (((bw + 1) * p).min(s.w) - bw * p);
                        plane[d * hw + h * s.w + w] = gx[i * s.c + c] / count as f64;
                    }
                }
            }
        });
        out
    }
}

/// Unary costs, kernel matrix and coupling of one CRF instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    /// `unary[i] = [u_i(0), u_i(1)]`.
    pub unary: Vec<[f64; 2]>,
    /// Row-major `N x N` similarity matrix.
    pub kernel: Vec<f64>,
    pub weight: f64,
}

impl Potentials {
    pub fn new(unary: Vec<[f64; 2]>, kernel: Vec<f64>, weight: f64) -> Result<Self> {
        let n = unary.len();
        if n < 2 || kernel.len() != n * n {
            return Err(Error::Graph(format!(
                "{n} patches need an {n} x {n} kernel, got {} entries",
                kernel.len()
            )));
        }
        if weight < 0.0 {
            return Err(Error::Parameter(format!("pairwise weight {weight} must be non-negative")));
        }
        Ok(Potentials {
            unary,
            kernel,
            weight,
        })
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    fn k(&self, i: usize, j: usize) -> f64 {
        self.kernel[i * self.len() + j]
    }

    /// `Σ_{j≠i} K_ij (2 q_j - 1)`.
    fn field(&self, q: &[f64], i: usize) -> f64 {
        let row = &self.kernel[i * q.len()..(i + 1) * q.len()];
        let mut s = 0.0;
        for (j, (&k, &qj)) in row.iter().zip(q).enumerate() {
            if j != i {
                s += k * (2.0 * qj - 1.0);
            }
        }
        s
    }

    pub fn energy(&self, y: &[u8]) -> Result<f64> {
        let n = self.len();
        if y.len() != n {
            return Err(Error::Parameter(format!("{} labels for {n} patches", y.len())));
        }
        if let Some(bad) = y.iter().find(|&&l| l > 1) {
            return Err(Error::Parameter(format!("label {bad} is not in {{0, 1}}")));
        }
        let mut e: f64 = y.iter().zip(&self.unary).map(|(&l, u)| u[l as usize]).sum();
        for i in 0..n {
            for j in i + 1..n {
                if y[i] != y[j] {
                    e += self.weight * self.k(i, j);
                }
            }
        }
        Ok(e)
    }

    /// Partition function and exact marginals by enumerating all labelings.
    pub fn gibbs_exact(&self) -> Result<(f64, MarginalField)> {
        let n = self.len();
        if n > EXACT_MAX_PATCHES {
            return Err(Error::Capacity(format!(
                "exact enumeration supports at most {EXACT_MAX_PATCHES} patches, got {n}"
            )));
        }
        let neg: Vec<f64> = (0..1u32 << n)
            .map(|mask| {
                let y: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                -self.energy(&y).expect("valid labels")
            })
            .collect();
        let m = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = neg.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut q = vec![0.0; n];
        for (mask, wgt) in weights.iter().enumerate() {
            for (i, qi) in q.iter_mut().enumerate() {
                if (mask >> i) & 1 == 1 {
                    *qi += wgt;
                }
            }
        }
        q.iter_mut().for_each(|v| *v /= total);
        Ok(((m + total.ln()).exp(), MarginalField::from_consistent(q)))
    }

    /// `T` ascending sweeps of sequential mean-field updates from the
    /// decoupled initialisation `q_i = σ(u_i(0) - u_i(1))`.
    pub fn meanfield(&self, iterations: usize) -> MarginalField {
        let mut q = self.meanfield_init();
        for _ in 0..iterations {
            self.sweep(&mut q);
        }
        MarginalField::from_consistent(q)
    }

    pub fn meanfield_init(&self) -> Vec<f64> {
        self.unary.iter().map(|u| sigmoid(u[0] - u[1])).collect()
    }

    /// One ascending sweep over all patches, in place.
    pub fn sweep(&self, q: &mut [f64]) {
        for i in 0..q.len() {
            let s = self.field(q, i);
            let u = self.unary[i];
            q[i] = sigmoid(u[0] - u[1] + self.weight * s);
        }
    }

    /// Variational free energy `E_Q[E] - H(Q)` of a factorised distribution.
    pub fn free_energy(&self, q: &[f64]) -> f64 {
        let n = self.len();
        let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
        let mut f = 0.0;
        for i in 0..n {
            let u = self.unary[i];
            f += q[i] * u[1] + (1.0 - q[i]) * u[0];
            f += xlogx(q[i]) + xlogx(1.0 - q[i]);
            for j in i + 1..n {
                let disagree = q[i] * (1.0 - q[j]) + (1.0 - q[i]) * q[j];
                f += self.weight * self.k(i, j) * disagree;
            }
        }
        f
    }
}

/// Per-patch label distributions; row `i` is `[Q_i(0), Q_i(1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    rows: Vec<[f64; 2]>,
}

impl MarginalField {
    pub fn from_consistent(q: Vec<f64>) -> Self {
        MarginalField {
            rows: q.into_iter().map(|p| [1.0 - p, p]).collect(),
        }
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn consistent(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[1]).collect()
    }

    pub fn mean_consistent(&self) -> f64 {
        self.rows.iter().map(|r| r[1]).sum::<f64>() / self.rows.len() as f64
    }
}

/// Gradients of the score with respect to the CRF parameters and the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad {
    pub params: Vec<f64>,
    pub embedding: Tensor,
}

/// Recorded forward pass of [`CrfModel::score_forward`].
#[derive(Debug, Clone)]
pub struct ScoreTape {
    pub score: f64,
    raw: f64,
    graph: PatchGraph,
    pot: Potentials,
    delta: Vec<f64>,
    q: Vec<f64>,
    history: Vec<f64>,
    iterations: usize,
    params: CrfParams,
}

impl ScoreTape {
    /// Back-propagates `g_score = d loss / d score`.
    pub fn backward(&self, g_score: f64) -> ScoreGrad {
        let n = self.graph.n;
        let c = self.graph.dim;
        let w = self.pot.weight;
        let in_range = (SCORE_EPS..=1.0 - SCORE_EPS).contains(&self.raw);
        let mut gq = vec![if in_range { g_score / n as f64 } else { 0.0 }; n];
        let mut q = self.q.clone();
        let mut g_delta = vec![0.0; n];
        let mut g_k = vec![0.0; n * n];
        let mut g_w = 0.0;

        for step in (0..self.iterations * n).rev() {
            let i = step % n;
            let qi = q[i];
            let ga = gq[i] * qi * (1.0 - qi);
            gq[i] = 0.0;
            if ga != 0.0 {
                g_delta[i] += ga;
                let mut s = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let m = 2.0 * q[j] - 1.0;
                    s += self.pot.k(i, j) * m;
                    g_k[i * n + j] += ga * w * m;
                    gq[j] += 2.0 * ga * w * self.pot.k(i, j);
                }
                g_w += ga * s;
            }
            q[i] = self.history[step];
        }
        for i in 0..n {
            let q0 = sigmoid(self.delta[i]);
            g_delta[i] += gq[i] * q0 * (1.0 - q0);
        }

        let theta = self.params.bandwidth();
        let inv_t2 = 1.0 / (theta * theta);
        let (w0, w1) = self.params.unary_rows();
        let graph = &self.graph;
        let pot = &self.pot;
        let sym = |i: usize, j: usize| g_k[i * n + j] + g_k[j * n + i];

        let rows = par::map_range(n, |i| {
            let xi = graph.embedding(i);
            let mut gx: Vec<f64> = w0.iter().zip(w1).map(|(a, b)| g_delta[i] * (a - b)).collect();
            let mut g_logt = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = graph.embedding(j);
                let gk = sym(i, j) * pot.k(i, j);
                if gk == 0.0 {
                    continue;
                }
                for (g, (a, b)) in gx.iter_mut().zip(xi.iter().zip(xj)) {
                    *g -= gk * (a - b) * inv_t2;
                }
                if j > i {
                    g_logt += gk * sq_dist(xi, xj) * inv_t2;
                }
            }
            (gx, g_logt)
        });

        let mut gp = vec![0.0; CrfParams::count(c)];
        let mut gx_all = Vec::with_capacity(n * c);
        for (i, (gx, g_logt)) in rows.into_iter().enumerate() {
            let xi = graph.embedding(i);
            for k in 0..c {
                gp[k] += g_delta[i] * xi[k];
                gp[c + k] -= g_delta[i] * xi[k];
            }
            gp[2 * c] += g_delta[i];
            gp[2 * c + 1] -= g_delta[i];
            gp[2 * c + 3] += g_logt;
            gx_all.extend(gx);
        }
        gp[2 * c + 2] = g_w;
        ScoreGrad {
            params: gp,
            embedding: graph.pool_backward(&gx_all),
        }
    }
}
