//! Dense single-sample activation tensors (channels × depth × height × width).

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape { c, d, h, w }
    }

    pub const fn vector(n: usize) -> Self {
        Shape::new(n, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.c * self.d * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn with_depth(&self, d: usize) -> Self {
        Shape { d, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.c, self.d, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// The intermediate representation emitted by `G1` and the half-encoder.
pub type EmbeddingGrid = Tensor;

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Graph(format!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.shape.d + d) * self.shape.h + h) * self.shape.w + w
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies depth planes `[start, start + len)` of every channel.
    pub fn depth_slab(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.d {
            return Err(Error::Geometry(format!(
                "depth window {start}..{} outside extent {}",
                start + len,
                s.d
            )));
        }
        let plane = s.h * s.w;
        let mut data = Vec::with_capacity(s.c * len * plane);
        for c in 0..s.c {
            let base = c * s.d * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + (start + len) * plane]);
        }
        Ok(Tensor {
            shape: s.with_depth(len),
            data,
        })
    }

    /// Adds `slab` into depth planes starting at `start` (adjoint of [`Tensor::depth_slab`]).
    pub fn add_depth_slab(&mut self, start: usize, slab: &Tensor) -> Result<()> {
        let s = self.shape;
        let t = slab.shape;
        if t.c != s.c || t.h != s.h || t.w != s.w || start + t.d > s.d {
            return Err(Error::Geometry(format!(
                "cannot place slab {t} at depth {start} of {s}"
            )));
        }
        let plane = s.h * s.w;
        for c in 0..s.c {
            let dst = &mut self.data[c * s.d * plane + start * plane..][..t.d * plane];
            let src = &slab.data[c * t.d * plane..][..t.d * plane];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// Concatenates tensors along depth; all must agree on channels, height and width.
    pub fn concat_depth(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Geometry("nothing to concatenate".into()))?
            .shape;
        let total: usize = parts.iter().map(|p| p.shape.d).sum();
        let mut out = Tensor::zeros(first.with_depth(total));
        let mut at = 0;
        for p in parts {
            out.add_depth_slab(at, p)?;
            at += p.shape.d;
        }
        Ok(out)
    }

    pub fn from_volume(v: &Volume3D) -> Tensor {
        let [d, h, w] = v.shape();
        Tensor {
            shape: Shape::new(1, d, h, w),
            data: v.voxels().iter().map(|&x| x as f64).collect(),
        }
    }

    /// Converts a single-channel tensor to a volume.
    pub fn to_volume(&self) -> Result<Volume3D> {
        if self.shape.c != 1 {
            return Err(Error::Graph(format!(
                "volume output needs one channel, got {}",
                self.shape
            )));
        }
        Volume3D::new(
            [self.shape.d, self.shape.h, self.shape.w],
            self.data.iter().map(|&x| x as f32).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
