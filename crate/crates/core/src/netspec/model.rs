//! Default CRF-GAN networks built from a [`ModelConfig`].
//!
//! - `G1`: latent → linear → `(g1_channels, b, b, b)` → upsample+conv blocks → `(C_e, d, d, d)`.
//! - `G2`: per scale doubling one upsample+conv block, then a full-resolution
//!   conv to one channel and `tanh`. Pixel norm only, so every output voxel
//!   depends on a bounded depth window of its input.
//! - `E`: mirror of `G2` with stride-2 convolutions.
//! - `D`: four stride-2 conv blocks, linear to a scalar, sigmoid.

use serde::{Deserialize, Serialize};

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::subvolume::GridGeometry;
use crate::tensor::{EmbeddingGrid, Shape, Tensor};
use crate::volume::Volume3D;

use super::graph::{NetGraph, NetRole, Trace};
use super::layer::LayerSpec;

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before any logarithm.
pub const SCORE_EPS: f64 = 1e-6;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Cubic volume edge length `D = H = W`.
    pub resolution: usize,
    /// Voxel-to-embedding scale `s`; a power of two.
    pub scale: usize,
    /// Slab depth `c` in embedding planes.
    pub sub_extent: usize,
    pub embed_channels: usize,
    pub latent_dim: usize,
    pub g1_channels: usize,
    pub g2_channels: usize,
    pub disc_channels: usize,
    pub crf_iterations: usize,
    pub crf_max_patches: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::at_resolution(64)
    }
}

impl ModelConfig {
    /// Default architecture at the given resolution with `c = d / 4`.
    pub fn at_resolution(resolution: usize) -> Self {
        ModelConfig {
            resolution,
            scale: 4,
            sub_extent: (resolution / 16).max(1),
            embed_channels: 64,
            latent_dim: 128,
            g1_channels: 64,
            g2_channels: 32,
            disc_channels: 16,
            crf_iterations: 5,
            crf_max_patches: 512,
        }
    }

    /// Small widths for CPU-only desk runs.
    pub fn desk(resolution: usize) -> Self {
        ModelConfig {
            embed_channels: 16,
            latent_dim: 32,
            g1_channels: 32,
            g2_channels: 8,
            disc_channels: 8,
            ..ModelConfig::at_resolution(resolution)
        }
    }

    pub fn embed_size(&self) -> usize {
        self.resolution / self.scale
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new([self.resolution; 3], self.scale, self.sub_extent)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_power_of_two() || self.scale < 2 {
            return Err(Error::Parameter(format!(
                "scale {} must be a power of two >= 2",
                self.scale
            )));
        }
        let g = self.geometry()?;
        if g.embed()[0] % self.sub_extent != 0 {
            return Err(Error::Parameter(format!(
                "sub-extent {} must divide embedding depth {}",
                self.sub_extent,
                g.embed()[0]
            )));
        }
        let (base, blocks) = g1_base(self.embed_size());
        if base << blocks != self.embed_size() {
            return Err(Error::Parameter(format!(
                "embedding size {} is not reachable by doubling from a base of at most 4",
                self.embed_size()
            )));
        }
        for (name, v) in [
            ("embed_channels", self.embed_channels),
            ("latent_dim", self.latent_dim),
            ("g1_channels", self.g1_channels),
            ("g2_channels", self.g2_channels),
            ("disc_channels", self.disc_channels),
            ("crf_iterations", self.crf_iterations),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.crf_max_patches < 2 {
            return Err(Error::Parameter("crf_max_patches must be at least 2".into()));
        }
        Ok(())
    }

    fn g2_widths(&self) -> Vec<usize> {
        let blocks = self.scale.trailing_zeros() as usize;
        (0..blocks).map(|i| (self.g2_channels >> i).max(4)).collect()
    }
}

/// Base grid edge and number of doubling blocks used by `G1`.
fn g1_base(d: usize) -> (usize, usize) {
    let mut base = d;
    let mut blocks = 0;
    while base > 4 {
        base /= 2;
        blocks += 1;
    }
    (base, blocks)
}

fn g1_graph(cfg: &ModelConfig) -> Result<NetGraph> {
    let (base, blocks) = g1_base(cfg.embed_size());
    let ch = cfg.g1_channels;
    let mut layers = vec![
        LayerSpec::Linear {
            in_features: cfg.latent_dim,
            out: Shape::new(ch, base, base, base),
        },
        LayerSpec::InstanceNorm { channels: ch },
        LayerSpec::LeakyRelu,
    ];
    for _ in 0..blocks {
        layers.extend([
            LayerSpec::Upsample { factor: 2 },
            LayerSpec::conv(ch, ch, 3, 1, 1),
            LayerSpec::InstanceNorm { channels: ch },
            LayerSpec::LeakyRelu,
        ]);
    }
    layers.push(LayerSpec::conv(ch, cfg.embed_channels, 3, 1, 1));
    NetGraph::new(NetRole::G1, Shape::vector(cfg.latent_dim), layers)
}

fn g2_graph(cfg: &ModelConfig) -> Result<NetGraph> {
    let e = cfg.embed_size();
    let mut layers = Vec::new();
    let mut prev = cfg.embed_channels;
    for w in cfg.g2_widths() {
        layers.extend([
            LayerSpec::Upsample { factor: 2 },
            LayerSpec::conv(prev, w, 3, 1, 1),
            LayerSpec::PixelNorm,
            LayerSpec::LeakyRelu,
        ]);
        prev = w;
    }
    layers.extend([LayerSpec::conv(prev, 1, 3, 1, 1), LayerSpec::Tanh]);
    NetGraph::new(
        NetRole::G2,
        Shape::new(cfg.embed_channels, cfg.sub_extent, e, e),
        layers,
    )
}

fn encoder_graph(cfg: &ModelConfig) -> Result<NetGraph> {
    let widths = cfg.g2_widths();
    let r = cfg.resolution;
    let first = *widths.last().expect("at least one block");
    let mut layers = vec![LayerSpec::conv(1, first, 3, 1, 1), LayerSpec::LeakyRelu];
    let mut prev = first;
    let targets: Vec<usize> = widths
        .iter()
        .rev()
        .skip(1)
        .cloned()
        .chain(std::iter::once(cfg.embed_channels))
        .collect();
    let n = targets.len();
    for (i, t) in targets.into_iter().enumerate() {
        layers.push(LayerSpec::conv(prev, t, 3, 2, 1));
        if i + 1 < n {
            layers.extend([LayerSpec::InstanceNorm { channels: t }, LayerSpec::LeakyRelu]);
        }
        prev = t;
    }
    NetGraph::new(
        NetRole::E,
        Shape::new(1, cfg.sub_extent * cfg.scale, r, r),
        layers,
    )
}

/// Four stride-2 conv blocks, linear to one logit, sigmoid. Blocks whose
/// output is a single voxel carry no instance norm.
pub fn discriminator_graph(role: NetRole, input: Shape, base: usize) -> Result<NetGraph> {
    let first = LayerSpec::conv(1, base, 3, 2, 1);
    let mut feat = first.output_shape(input)?;
    let mut layers = vec![first, LayerSpec::LeakyRelu];
    let mut ch = base;
    for _ in 1..4 {
        let conv = LayerSpec::conv(ch, ch * 2, 3, 2, 1);
        feat = conv.output_shape(feat)?;
        layers.push(conv);
        if feat.spatial() > 1 {
            layers.push(LayerSpec::InstanceNorm { channels: ch * 2 });
        }
        layers.push(LayerSpec::LeakyRelu);
        ch *= 2;
    }
    layers.extend([
        LayerSpec::Linear {
            in_features: feat.numel(),
            out: Shape::vector(1),
        },
        LayerSpec::Sigmoid,
    ]);
    NetGraph::new(role, input, layers)
}

/// The networks of one CRF-GAN configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub config: ModelConfig,
    pub g1: NetGraph,
    pub g2: NetGraph,
    pub encoder: NetGraph,
    pub disc: NetGraph,
}

impl Networks {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let r = config.resolution;
        Ok(Networks {
            config: config.clone(),
            g1: g1_graph(config)?,
            g2: g2_graph(config)?,
            encoder: encoder_graph(config)?,
            disc: discriminator_graph(
                NetRole::D,
                Shape::new(1, config.sub_extent * config.scale, r, r),
                config.disc_channels,
            )?,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        self.config.geometry().expect("validated at construction")
    }

    pub fn embed_shape(&self) -> Shape {
        let e = self.config.embed_size();
        Shape::new(self.config.embed_channels, e, e, e)
    }

    /// Low-resolution generator head + discriminator emulating the extra GAN
    /// branch of a two-GAN hierarchical baseline. Parameter counting only.
    pub fn surrogate_branch(&self) -> Result<(NetGraph, NetGraph)> {
        let e = self.config.embed_size();
        let mut layers = Vec::new();
        let mut prev = self.config.embed_channels;
        for w in self.config.g2_widths() {
            layers.extend([
                LayerSpec::conv(prev, w, 3, 1, 1),
                LayerSpec::PixelNorm,
                LayerSpec::LeakyRelu,
            ]);
            prev = w;
        }
        layers.extend([LayerSpec::conv(prev, 1, 3, 1, 1), LayerSpec::Tanh]);
        let head = NetGraph::new(NetRole::LowResG, self.embed_shape(), layers)?;
        let disc = discriminator_graph(
            NetRole::LowResD,
            Shape::new(1, e, e, e),
            self.config.disc_channels,
        )?;
        Ok((head, disc))
    }

    /// Learnable parameters of every player, CRF included.
    pub fn total_params(&self) -> usize {
        self.g1.count_params()
            + self.g2.count_params()
            + self.encoder.count_params()
            + self.disc.count_params()
            + CrfParams::count(self.config.embed_channels)
    }

    /// Depth reach of `G2` in output voxels; stitched and full generations
    /// can only differ within this distance of a slab seam.
    pub fn g2_receptive_radius(&self) -> usize {
        self.g2.depth_receptive_radius()
    }

    fn check_latent(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Graph(format!(
                "latent has {} entries, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        Tensor::from_vec(Shape::vector(z.len()), z.to_vec())
    }

    fn check_embedding_slab(&self, a: &EmbeddingGrid) -> Result<()> {
        let s = a.shape();
        let e = self.config.embed_size();
        if s.c != self.config.embed_channels || s.h != e || s.w != e || s.d == 0 || s.d > e {
            return Err(Error::Graph(format!(
                "G2 input {s} incompatible with embedding ({}, 1..={e}, {e}, {e})",
                self.config.embed_channels
            )));
        }
        Ok(())
    }

    fn check_voxel_slab(&self, x: &Tensor, exact_depth: Option<usize>) -> Result<()> {
        let s = x.shape();
        let r = self.config.resolution;
        let depth_ok = match exact_depth {
            Some(d) => s.d == d,
            None => s.d > 0 && s.d.is_multiple_of(self.config.scale) && s.d <= r,
        };
        if s.c != 1 || s.h != r || s.w != r || !depth_ok {
            return Err(Error::Graph(format!(
                "voxel slab {s} incompatible with resolution {r}"
            )));
        }
        Ok(())
    }

    pub fn g1_forward(&self, params: &[f64], z: &[f64]) -> Result<EmbeddingGrid> {
        let z = self.check_latent(z)?;
        self.g1.forward_eval(params, &z)
    }

    pub fn g1_forward_traced(&self, params: &[f64], z: &[f64]) -> Result<(EmbeddingGrid, Trace)> {
        let z = self.check_latent(z)?;
        self.g1.forward(params, &z)
    }

    /// Decodes an embedding slab of any depth extent to a voxel slab `s` times deeper.
    pub fn g2_forward(&self, params: &[f64], a_sub: &EmbeddingGrid) -> Result<Tensor> {
        self.check_embedding_slab(a_sub)?;
        self.g2.forward_eval(params, a_sub)
    }

    pub fn g2_forward_traced(&self, params: &[f64], a_sub: &EmbeddingGrid) -> Result<(Tensor, Trace)> {
        self.check_embedding_slab(a_sub)?;
        self.g2.forward(params, a_sub)
    }

    pub fn encoder_forward(&self, params: &[f64], x_sub: &Tensor) -> Result<EmbeddingGrid> {
        self.check_voxel_slab(x_sub, None)?;
        self.encoder.forward_eval(params, x_sub)
    }

    pub fn encoder_forward_traced(&self, params: &[f64], x_sub: &Tensor) -> Result<(EmbeddingGrid, Trace)> {
        self.check_voxel_slab(x_sub, None)?;
        self.encoder.forward(params, x_sub)
    }

    /// Encodes a whole volume slab by slab and concatenates the embeddings.
    pub fn encode_full(&self, params: &[f64], x: &Volume3D) -> Result<EmbeddingGrid> {
        self.encode_full_tensor(params, &Tensor::from_volume(x))
    }

    /// [`Networks::encode_full`] on a single-channel tensor.
    pub fn encode_full_tensor(&self, params: &[f64], t: &Tensor) -> Result<EmbeddingGrid> {
        let geom = self.geometry();
        self.check_voxel_slab(t, Some(self.config.resolution))?;
        let parts = geom
            .tiling()?
            .iter()
            .map(|sel| {
                let w = sel.voxel_window();
                self.encoder.forward_eval(params, &t.depth_slab(w.start, w.len())?)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_depth(&parts)
    }

    /// Score in `[SCORE_EPS, 1 - SCORE_EPS]`.
    pub fn discriminator_forward(&self, params: &[f64], x_sub: &Tensor) -> Result<f64> {
        self.check_voxel_slab(x_sub, Some(self.config.sub_extent * self.config.scale))?;
        let y = self.disc.forward_eval(params, x_sub)?;
        Ok(clamp_score(y.data()[0]))
    }

    /// Score plus trace; the clamp's derivative is handled by [`Networks::discriminator_backward`].
    pub fn discriminator_forward_traced(&self, params: &[f64], x_sub: &Tensor) -> Result<(f64, Trace, f64)> {
        self.check_voxel_slab(x_sub, Some(self.config.sub_extent * self.config.scale))?;
        let (y, trace) = self.disc.forward(params, x_sub)?;
        let raw = y.data()[0];
        Ok((clamp_score(raw), trace, raw))
    }

    /// Back-propagates `d loss / d score` through the clamp and `D`.
    pub fn discriminator_backward(
        &self,
        params: &[f64],
        trace: &Trace,
        raw: f64,
        g_score: f64,
        grads: &mut [f64],
    ) -> Result<Tensor> {
        let g = if (SCORE_EPS..=1.0 - SCORE_EPS).contains(&raw) {
            g_score
        } else {
            0.0
        };
        self.disc
            .backward(params, trace, Tensor::from_vec(Shape::vector(1), vec![g])?, grads)
    }
}

pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}
