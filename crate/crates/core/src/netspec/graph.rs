use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::layer::LayerSpec;
use super::ops::{self, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetRole {
    G1,
    G2,
    E,
    D,
    CrfHead,
    /// Low-resolution generator head of the two-GAN baseline surrogate.
    LowResG,
    /// Low-resolution discriminator of the two-GAN baseline surrogate.
    LowResD,
    /// Fixed random feature extractor used by the metrics.
    Features,
}

impl fmt::Display for NetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NetRole::G1 => "G1",
            NetRole::G2 => "G2",
            NetRole::E => "E",
            NetRole::D => "D",
            NetRole::CrfHead => "CRF-head",
            NetRole::LowResG => "lowres-G",
            NetRole::LowResD => "lowres-D",
            NetRole::Features => "features",
        };
        f.write_str(s)
    }
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian weights with the given std, zero biases.
    Gaussian(f64),
    /// Gaussian weights with std `sqrt(2 / fan_in)`, zero biases.
    He,
}

/// Declarative layer stack with a nominal input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetGraph {
    pub role: NetRole,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

/// Layer inputs recorded by [`NetGraph::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
}

impl Trace {
    /// Number of f64 elements held by the trace.
    pub fn retained_elements(&self) -> usize {
        self.inputs.iter().map(|t| t.numel()).sum()
    }
}

/// Descriptor of one named parameter tensor inside a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl NetGraph {
    pub fn new(role: NetRole, input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        let g = NetGraph { role, input, layers };
        g.output_shape(input)?;
        Ok(g)
    }

    /// Exact sum of the per-layer closed forms.
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    /// Shapes after each layer for the given input, starting with the input.
    pub fn shape_trace(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut out = vec![input];
        for l in &self.layers {
            let next = l.output_shape(*out.last().expect("non-empty"))?;
            out.push(next);
        }
        Ok(out)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = at;
                at += l.param_count();
                o
            })
            .collect()
    }

    /// Named tensors in buffer order: `<layer>.weight`, `<layer>.bias`.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (i, (l, off)) in self.layers.iter().zip(self.offsets()).enumerate() {
            let wc = l.weight_count();
            if wc == 0 {
                continue;
            }
            let bias = l.param_count() - wc;
            slots.push(ParamSlot {
                name: format!("{}.{}.weight", self.role, i),
                dims: l.weight_dims(),
                offset: off,
                len: wc,
            });
            slots.push(ParamSlot {
                name: format!("{}.{}.bias", self.role, i),
                dims: vec![bias],
                offset: off + wc,
                len: bias,
            });
        }
        slots
    }

    pub fn init_params<R: Rng + ?Sized>(&self, init: Init, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.count_params()];
        for (l, off) in self.layers.iter().zip(self.offsets()) {
            let wc = l.weight_count();
            if wc == 0 {
                continue;
            }
            let std = match init {
                Init::Gaussian(s) => s,
                Init::He => {
                    let fan_in = match *l {
                        LayerSpec::Conv3d {
                            in_channels, kernel, ..
                        } => in_channels * kernel.pow(3),
                        LayerSpec::Linear { in_features, .. } => in_features,
                        _ => 1,
                    };
                    (2.0 / fan_in as f64).sqrt()
                }
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[off..off + wc] {
                *p = normal.sample(rng);
            }
        }
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.count_params() {
            return Err(Error::Graph(format!(
                "{} expects {} parameters, got {}",
                self.role,
                self.count_params(),
                params.len()
            )));
        }
        Ok(())
    }

    fn apply(&self, layer: &LayerSpec, p: &[f64], x: &Tensor) -> Result<Tensor> {
        let os = layer.output_shape(x.shape())?;
        Ok(match *layer {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeom {
                    cin: in_channels,
                    cout: out_channels,
                    kernel,
                    stride,
                    padding,
                };
                let wc = layer.weight_count();
                ops::conv3d_forward(x, &p[..wc], &p[wc..], &g, os)
            }
            LayerSpec::Upsample { factor } => ops::upsample_forward(x, factor),
            LayerSpec::InstanceNorm { .. } => ops::instance_norm_forward(x),
            LayerSpec::PixelNorm => ops::pixel_norm_forward(x),
            LayerSpec::LeakyRelu => map(x, ops::leaky_relu),
            LayerSpec::Tanh => map(x, f64::tanh),
            LayerSpec::Sigmoid => map(x, ops::sigmoid),
            LayerSpec::Linear { .. } => {
                let wc = layer.weight_count();
                ops::linear_forward(x, &p[..wc], &p[wc..], os)
            }
            LayerSpec::GlobalAvgPool => ops::global_avg_pool_forward(x),
        })
    }

    /// Forward pass without recording anything for backward.
    pub fn forward_eval(&self, params: &[f64], x: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let mut cur = x.clone();
        for (l, off) in self.layers.iter().zip(self.offsets()) {
            cur = self.apply(l, &params[off..off + l.param_count()], &cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_params(params)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (l, off) in self.layers.iter().zip(self.offsets()) {
            let next = self.apply(l, &params[off..off + l.param_count()], &cur)?;
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Ok((cur, Trace { inputs }))
    }

    /// Back-propagates `gy`, accumulating parameter gradients into `grads`
    /// (same layout as the parameters). Returns the gradient w.r.t. the input.
    pub fn backward(&self, params: &[f64], trace: &Trace, gy: Tensor, grads: &mut [f64]) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_params(grads)?;
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::Graph("trace does not belong to this graph".into()));
        }
        let offsets = self.offsets();
        let mut g = gy;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            let off = offsets[i];
            let np = l.param_count();
            let p = &params[off..off + np];
            let gp = &mut grads[off..off + np];
            g = match *l {
                LayerSpec::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let geom = ConvGeom {
                        cin: in_channels,
                        cout: out_channels,
                        kernel,
                        stride,
                        padding,
                    };
                    let wc = l.weight_count();
                    let (gw, gb) = gp.split_at_mut(wc);
                    ops::conv3d_backward_params(x, &g, &geom, gw, gb);
                    ops::conv3d_backward_input(&g, &p[..wc], &geom, x.shape())
                }
                LayerSpec::Upsample { factor } => ops::upsample_backward(&g, factor, x.shape()),
                LayerSpec::InstanceNorm { .. } => ops::instance_norm_backward(x, &g),
                LayerSpec::PixelNorm => ops::pixel_norm_backward(x, &g),
                LayerSpec::LeakyRelu => zip_map(x, &g, |xv, gv| gv * ops::leaky_relu_grad(xv)),
                LayerSpec::Tanh => zip_map(x, &g, |xv, gv| {
                    let t = xv.tanh();
                    gv * (1.0 - t * t)
                }),
                LayerSpec::Sigmoid => zip_map(x, &g, |xv, gv| {
                    let s = ops::sigmoid(xv);
                    gv * s * (1.0 - s)
                }),
                LayerSpec::Linear { .. } => {
                    let wc = l.weight_count();
                    let (gw, gb) = gp.split_at_mut(wc);
                    ops::linear_backward(x, &g, &p[..wc], gw, gb)
                }
                LayerSpec::GlobalAvgPool => ops::global_avg_pool_backward(&g, x.shape()),
            };
        }
        Ok(g)
    }

    /// Depth reach, in output voxels, of a change at the input: the sum of
    /// `(kernel - 1) / 2 * cumulative_scale` over stride-1 convolutions, where
    /// the cumulative scale is the product of upsampling factors that follow.
    pub fn depth_receptive_radius(&self) -> usize {
        let mut scale = 1;
        let mut rho = 0;
        for l in self.layers.iter().rev() {
            match *l {
                LayerSpec::Conv3d { kernel, stride, .. } => {
                    debug_assert_eq!(stride, 1, "radius defined for stride-1 decoders");
                    rho += (kernel - 1) / 2 * scale;
                }
                LayerSpec::Upsample { factor } => scale *= factor,
                _ => {}
            }
        }
        rho
    }

    /// Canonical one-line-per-layer description.
    pub fn describe(&self) -> String {
        let mut s = format!("{} input={}\n", self.role, self.input);
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(&format!("{i}: {l:?}\n"));
        }
        s
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.describe().as_bytes())
    }
}

fn map(x: &Tensor, f: fn(f64) -> f64) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = f(*v));
    y
}

fn zip_map(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = g.clone();
    out.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(gv, xv)| *gv = f(*xv, *gv));
    out
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Order-sensitive checksum of a parameter buffer.
pub fn checksum(params: &[f64]) -> u64 {
    params
        .iter()
        .fold(0xcbf29ce484222325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_graph() -> NetGraph {
        NetGraph::new(
            NetRole::D,
            Shape::new(2, 4, 4, 4),
            vec![
                LayerSpec::conv(2, 3, 3, 1, 1),
                LayerSpec::InstanceNorm { channels: 3 },
                LayerSpec::LeakyRelu,
                LayerSpec::Upsample { factor: 2 },
                LayerSpec::conv(3, 2, 3, 2, 1),
                LayerSpec::PixelNorm,
                LayerSpec::Tanh,
                LayerSpec::Linear {
                    in_features: 2 * 64,
                    out: Shape::vector(3),
                },
                LayerSpec::Sigmoid,
            ],
        )
        .unwrap()
    }

    #[test]
    fn empty_graph_has_no_params() {
        let g = NetGraph::new(NetRole::CrfHead, Shape::vector(4), vec![]).unwrap();
        assert_eq!(g.count_params(), 0);
        let x = Tensor::from_vec(Shape::vector(4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.forward_eval(&[], &x).unwrap(), x);
    }

    #[test]
    fn slots_cover_buffer() {
        let g = small_graph();
        let slots = g.param_slots();
        let total: usize = slots.iter().map(|s| s.len).sum();
        assert_eq!(total, g.count_params());
        for s in &slots {
            assert_eq!(s.dims.iter().product::<usize>(), s.len);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = small_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = g.init_params(Init::Gaussian(0.3), &mut rng);
        let mut params = params;
        // nonzero biases so every path is exercised
        for p in params.iter_mut() {
            if *p == 0.0 {
                *p = 0.05;
            }
        }
        let x = Tensor::from_vec(
            g.input,
            (0..g.input.numel()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect(),
        )
        .unwrap();
        let weights = [0.3, -0.7, 1.1];
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let y = g.forward_eval(p, x).unwrap();
            y.data().iter().zip(weights).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = g.forward(&params, &x).unwrap();
        let gy = Tensor::from_vec(Shape::vector(3), weights.to_vec()).unwrap();
        let mut grads = vec![0.0; params.len()];
        let gx = g.backward(&params, &trace, gy, &mut grads).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &x);
            p[i] -= 2.0 * h;
            let dn = loss(&p, &x);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / (fd.abs().max(grads[i].abs()).max(1e-4));
            max_rel = max_rel.max(rel);
        }
        for i in (0..x.numel()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let up = loss(&params, &xp);
            xp.data_mut()[i] -= 2.0 * h;
            let dn = loss(&params, &xp);
            let fd = (up - dn) / (2.0 * h);
            let an = gx.data()[i];
            let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4));
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn fingerprint_tracks_structure() {
        let a = small_graph();
        let mut b = small_graph();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.layers.pop();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
