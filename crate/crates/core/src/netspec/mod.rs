//! Network graphs for `G1`, `G2`, the half-encoder `E` and the discriminator
//! `D`: declarative layer stacks, forward/backward evaluation, exact parameter
//! accounting and the checkpoint format.

pub mod checkpoint;
pub mod graph;
pub mod layer;
pub mod model;
pub mod ops;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use graph::{checksum, fnv1a, Init, NetGraph, NetRole, ParamSlot, Trace};
pub use layer::LayerSpec;
pub use model::{clamp_score, ModelConfig, Networks, INIT_STD, SCORE_EPS};

/// Latent prior: `z ~ N(0, I)` of dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentSpec {
    pub dim: usize,
}

impl LatentSpec {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..self.dim).map(|_| StandardNormal.sample(rng)).collect()
    }
}
