//! CRF-guided, memory-efficient GAN for 3D volume synthesis.
//!
//! The generator is split in two stages: `G1` maps a latent vector to a
//! low-resolution embedding grid, `G2` decodes a depth slab of that grid to a
//! full-resolution voxel slab. Training only ever decodes a random slab, while
//! inference decodes the whole embedding at once. A fully-connected binary CRF
//! over embedding patches scores global consistency alongside the patch
//! discriminator, and a half-encoder mirrors `G2` for a reconstruction path.
//!
//! Module map:
//! - [`volume`]: voxel grids, raw+sidecar I/O, phantoms
//! - [`subvolume`]: slab selection shared by voxel and embedding grids
//! - [`netspec`]: layer graphs, forward/backward kernels, parameter accounting, checkpoints
//! - [`crf`]: exact Gibbs oracle, sequential mean-field, differentiable score
//! - [`losses`]: adversarial, CRF-averaged and reconstruction objectives
//! - [`trainer`]: alternating optimisation loop
//! - [`inference`]: full-volume and stitched generation, seam consistency
//! - [`metrics`]: FID and MMD on random-feature embeddings
//! - [`bench`]: parameter, activation-memory and speed reports

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod cli;
pub mod crf;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod netspec;
pub mod par;
pub mod subvolume;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{EmbeddingGrid, Shape, Tensor};
pub use volume::Volume3D;
