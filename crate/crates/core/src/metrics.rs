//! FID and MMD between volume sets, on features from a fixed random 3D
//! convolutional encoder.
//!
//! Scores are only comparable between sets embedded by the same extractor,
//! which is identified by a fingerprint of its seed and graph.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{fnv1a, Init, LayerSpec, NetGraph, NetRole};
use crate::par;
use crate::tensor::{Shape, Tensor};
use crate::volume::Volume3D;

pub const DEFAULT_FEATURES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    graph: NetGraph,
    params: Vec<f64>,
}

impl FeatureExtractor {
    /// Four stride-2 convolutions with leaky ReLU, then global average pooling.
    pub fn new(seed: u64, features: usize) -> Result<Self> {
        if features == 0 {
            return Err(Error::Parameter("feature dimension must be positive".into()));
        }
        let widths = [1, 16, 32, 64, features];
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(LayerSpec::conv(w[0], w[1], 3, 2, 1));
            layers.push(LayerSpec::LeakyRelu);
        }
        layers.push(LayerSpec::GlobalAvgPool);
        let graph = NetGraph::new(NetRole::Features, Shape::new(1, 16, 16, 16), layers)?;
        let params = graph.init_params(Init::He, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(FeatureExtractor { seed, graph, params })
    }

    pub fn features(&self) -> usize {
        self.graph.output_shape(self.graph.input).expect("valid graph").c
    }

    pub fn fingerprint(&self) -> u64 {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(self.graph.describe().as_bytes());
        fnv1a(&bytes)
    }

    pub fn embed(&self, v: &Volume3D) -> Result<Vec<f64>> {
        if v.shape().iter().any(|&n| n < 16) {
            return Err(Error::Geometry(format!(
                "volume {:?} is smaller than the extractor's 16^3 minimum",
                v.shape()
            )));
        }
        Ok(self.graph.forward_eval(&self.params, &Tensor::from_volume(v))?.into_data())
    }
}

/// `M x F` feature matrix with the fingerprint of the extractor that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    pub fingerprint: u64,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, fingerprint: u64) -> Result<Self> {
        if data.len() != rows * dim || dim == 0 {
            return Err(Error::Parameter(format!("{} values do not form {rows} x {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        Ok(FeatureSet {
            rows,
            dim,
            data,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }
}

/// Embeds every volume, in input order.
pub fn extract_features(volumes: &[Volume3D], extractor: &FeatureExtractor) -> Result<FeatureSet> {
    if let Some(first) = volumes.first() {
        if volumes.iter().any(|v| v.shape() != first.shape()) {
            return Err(Error::Geometry("feature extraction needs uniformly shaped volumes".into()));
        }
    }
    let rows = par::map_range(volumes.len(), |i| extractor.embed(&volumes[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(volumes.len(), extractor.features(), rows.concat(), extractor.fingerprint())
}

fn check_pair(a: &FeatureSet, b: &FeatureSet, min_rows: usize) -> Result<()> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Fingerprint(format!(
            "feature sets come from different extractors ({:016x} vs {:016x})",
            a.fingerprint, b.fingerprint
        )));
    }
    if a.dim != b.dim {
        return Err(Error::Parameter(format!("feature dims differ: {} vs {}", a.dim, b.dim)));
    }
    if a.rows < min_rows || b.rows < min_rows {
        return Err(Error::Parameter(format!(
            "need at least {min_rows} rows per set, got {} and {}",
            a.rows, b.rows
        )));
    }
    Ok(())
}

fn moments(f: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let m = f.matrix();
    let mean = DVector::from_iterator(f.dim, m.column_iter().map(|c| c.mean()));
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (f.rows as f64 - 1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits, with unbiased covariances.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let s = psd_sqrt(&cov_a);
    let inner = &s * &cov_b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows; 1 if that is 0.
pub fn median_bandwidth(a: &FeatureSet, b: &FeatureSet) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows).map(|i| a.row(i)).chain((0..b.rows).map(|i| b.row(i))).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Biased squared MMD with a Gaussian kernel of bandwidth `sigma`.
pub fn mmd_with_bandwidth(a: &FeatureSet, b: &FeatureSet, sigma: f64) -> Result<f64> {
    check_pair(a, b, 1)?;
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("bandwidth {sigma} must be positive")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |x: &FeatureSet, y: &FeatureSet| {
        let rows = par::map_range(x.rows, |i| {
            (0..y.rows).map(|j| (-sq_dist(x.row(i), y.row(j)) * inv).exp()).sum::<f64>()
        });
        rows.iter().sum::<f64>() / (x.rows * y.rows) as f64
    };
    let v = mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b);
    Ok(v.max(0.0))
}

/// Biased squared MMD with the median-heuristic bandwidth.
pub fn mmd(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 1)?;
    mmd_with_bandwidth(a, b, median_bandwidth(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub real_count: usize,
    pub fake_count: usize,
    pub extractor_fingerprint: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomSpec};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_set(rng: &mut ChaCha8Rng, rows: usize, dim: usize, shift: f64) -> FeatureSet {
        let data = (0..rows * dim)
            .map(|_| shift + Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        FeatureSet::new(rows, dim, data, 7).unwrap()
    }

    #[test]
    fn extractor_is_deterministic_and_finite() {
        let ex = FeatureExtractor::new(3, DEFAULT_FEATURES).unwrap();
        let v = make_phantom(&PhantomSpec::desk(32, 1)).unwrap();
        let f = extract_features(&[v.clone(), v], &ex).unwrap();
        assert_eq!(f.dim(), 256);
        assert_eq!(f.row(0), f.row(1));
        assert!(f.row(0).iter().all(|x| x.is_finite()));
        let other = FeatureExtractor::new(4, DEFAULT_FEATURES).unwrap();
        assert_ne!(ex.fingerprint(), other.fingerprint());
        let small = Volume3D::filled([8, 8, 8], 0.0).unwrap();
        assert!(ex.embed(&small).is_err());
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gaussian_set(&mut rng, 5, 3, 0.0);
        let mut b = a.clone();
        b.fingerprint = 8;
        assert!(matches!(fid(&a, &b), Err(Error::Fingerprint(_))));
        assert!(matches!(mmd(&a, &b), Err(Error::Fingerprint(_))));
        let one = FeatureSet::new(1, 3, vec![0.0; 3], 7).unwrap();
        assert!(fid(&one, &a).is_err());
    }

    #[test]
    fn identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian_set(&mut rng, 40, 16, 0.0);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        assert!(mmd(&a, &a).unwrap() <= 1e-9);
        let b = gaussian_set(&mut rng, 30, 16, 0.5);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-8);
    }

    #[test]
    fn singleton_mmd_by_hand() {
        let a = FeatureSet::new(1, 2, vec![0.0, 0.0], 0).unwrap();
        let b = FeatureSet::new(1, 2, vec![3.0, 4.0], 0).unwrap();
        let expected = 2.0 - 2.0 * (-25.0f64 / (2.0 * 4.0)).exp();
        assert!((mmd_with_bandwidth(&a, &b, 2.0).unwrap() - expected).abs() < 1e-15);
        assert_eq!(median_bandwidth(&a, &b), 5.0);
        assert!((mmd(&a, &b).unwrap() - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn fid_shrinks_along_mean_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian_set(&mut rng, 200, 4, 0.0);
        let b = gaussian_set(&mut rng, 200, 4, 0.0);
        let mut prev = f64::INFINITY;
        for t in [3.0, 2.0, 1.0, 0.5, 0.0] {
            let shifted = FeatureSet::new(b.rows, b.dim, b.data.iter().map(|v| v + t).collect(), 7).unwrap();
            let f = fid(&a, &shifted).unwrap();
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn mmd_separates_far_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = gaussian_set(&mut rng, 30, 4, 0.0);
        let near = gaussian_set(&mut rng, 30, 4, 0.1);
        let far = gaussian_set(&mut rng, 30, 4, 10.0);
        assert!(mmd(&a, &far).unwrap() > mmd(&a, &near).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn row_order_does_not_matter(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_set(&mut rng, 12, 3, 0.0);
            let shift = rng.random_range(0.0..2.0);
            let b = gaussian_set(&mut rng, 10, 3, shift);
            let mut order: Vec<usize> = (0..b.rows).collect();
            order.shuffle(&mut rng);
            let pb = FeatureSet::new(b.rows, b.dim, order.iter().flat_map(|&i| b.row(i).to_vec()).collect(), 7).unwrap();
            prop_assert!((fid(&a, &b).unwrap() - fid(&a, &pb).unwrap()).abs() < 1e-9);
            prop_assert!((mmd(&a, &b).unwrap() - mmd(&a, &pb).unwrap()).abs() < 1e-12);
            prop_assert!(mmd(&a, &b).unwrap() >= 0.0);
        }
    }
}
