//! Random depth-slab selection shared by the generator, the real-image crop
//! and the half-encoder. Offsets live on the embedding grid and are scaled to
//! voxels, so a decoded embedding slab always lines up with the real crop.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::EmbeddingGrid;
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    full: [usize; 3],
    embed: [usize; 3],
    scale: usize,
    extent: usize,
}

impl GridGeometry {
    /// `extent` is the slab depth in embedding planes.
    pub fn new(full: [usize; 3], scale: usize, extent: usize) -> Result<Self> {
        if scale < 2 {
            return Err(Error::Geometry(format!("scale factor {scale} must be at least 2")));
        }
        if full.iter().any(|&n| n == 0 || n % scale != 0) {
            return Err(Error::Geometry(format!(
                "volume shape {full:?} is not divisible by scale {scale}"
            )));
        }
        let embed = full.map(|n| n / scale);
        if extent == 0 || extent > embed[0] {
            return Err(Error::Geometry(format!(
                "sub-extent {extent} outside 1..={}",
                embed[0]
            )));
        }
        Ok(GridGeometry {
            full,
            embed,
            scale,
            extent,
        })
    }

    pub fn full(&self) -> [usize; 3] {
        self.full
    }

    pub fn embed(&self) -> [usize; 3] {
        self.embed
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    /// Number of valid offsets, `d - c + 1`.
    pub fn offset_count(&self) -> usize {
        self.embed[0] - self.extent + 1
    }

    pub fn selector(&self, offset: usize) -> Result<SubVolumeSelector> {
        if offset >= self.offset_count() {
            return Err(Error::Geometry(format!(
                "offset {offset} outside 0..={}",
                self.offset_count() - 1
            )));
        }
        Ok(SubVolumeSelector {
            offset,
            geometry: *self,
        })
    }

    /// Disjoint selectors at stride `c` covering the embedding depth.
    pub fn tiling(&self) -> Result<Vec<SubVolumeSelector>> {
        if !self.embed[0].is_multiple_of(self.extent) {
            return Err(Error::Geometry(format!(
                "sub-extent {} does not divide embedding depth {}",
                self.extent, self.embed[0]
            )));
        }
        (0..self.embed[0] / self.extent)
            .map(|k| self.selector(k * self.extent))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubVolumeSelector {
    offset: usize,
    geometry: GridGeometry,
}

impl SubVolumeSelector {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn embed_window(&self) -> Range<usize> {
        self.offset..self.offset + self.geometry.extent
    }

    pub fn voxel_window(&self) -> Range<usize> {
        let s = self.geometry.scale;
        self.offset * s..(self.offset + self.geometry.extent) * s
    }
}

/// Draws `r` uniformly from `{0, …, d - c}`.
pub fn sample_offset<R: Rng + ?Sized>(geometry: &GridGeometry, rng: &mut R) -> SubVolumeSelector {
    let offset = rng.random_range(0..geometry.offset_count());
    SubVolumeSelector {
        offset,
        geometry: *geometry,
    }
}

pub fn extract_voxel_subvolume(v: &Volume3D, sel: &SubVolumeSelector) -> Result<Volume3D> {
    if v.shape() != sel.geometry.full {
        return Err(Error::Geometry(format!(
            "volume {:?} does not match geometry {:?}",
            v.shape(),
            sel.geometry.full
        )));
    }
    let win = sel.voxel_window();
    v.depth_slab(win.start, win.len())
}

pub fn extract_embedding_subset(a: &EmbeddingGrid, sel: &SubVolumeSelector) -> Result<EmbeddingGrid> {
    let s = a.shape();
    if [s.d, s.h, s.w] != sel.geometry.embed {
        return Err(Error::Geometry(format!(
            "embedding {s} does not match geometry {:?}",
            sel.geometry.embed
        )));
    }
    let win = sel.embed_window();
    a.depth_slab(win.start, win.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn ramp_volume(n: usize) -> Volume3D {
        Volume3D::new([n; 3], (0..n * n * n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn full_extent_has_single_offset() {
        let g = GridGeometry::new([64; 3], 4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_offset(&g, &mut rng).offset(), 0);
        }
        let v = ramp_volume(64);
        let sel = g.selector(0).unwrap();
        assert_eq!(extract_voxel_subvolume(&v, &sel).unwrap(), v);
        let a = Tensor::from_vec(Shape::new(2, 16, 16, 16), vec![0.5; 2 * 4096]).unwrap();
        assert_eq!(extract_embedding_subset(&a, &sel).unwrap(), a);
    }

    #[test]
    fn invalid_geometry() {
        assert!(GridGeometry::new([64; 3], 4, 17).is_err());
        assert!(GridGeometry::new([64; 3], 4, 0).is_err());
        assert!(GridGeometry::new([64; 3], 1, 4).is_err());
        assert!(GridGeometry::new([62, 64, 64], 4, 4).is_err());
    }

    #[test]
    fn offsets_are_uniform() {
        let g = GridGeometry::new([64; 3], 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = [0usize; 13];
        for _ in 0..100_000 {
            let r = sample_offset(&g, &mut rng).offset();
            counts[r] += 1;
        }
        let expected = 100_000.0 / 13.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new(12.0).unwrap().cdf(stat);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn fixed_seed_fixed_sequence() {
        let g = GridGeometry::new([64; 3], 4, 4).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| sample_offset(&g, &mut rng).offset()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn voxel_window_arithmetic() {
        let g = GridGeometry::new([64; 3], 4, 4).unwrap();
        let sel = g.selector(3).unwrap();
        assert_eq!(sel.voxel_window(), 12..28);
        let v = ramp_volume(64);
        let slab = extract_voxel_subvolume(&v, &sel).unwrap();
        assert_eq!(slab.shape(), [16, 64, 64]);
        assert_eq!(slab.get(0, 5, 7), v.get(12, 5, 7));
        assert_eq!(slab.get(15, 63, 0), v.get(27, 63, 0));
    }

    #[test]
    fn embedding_window_arithmetic() {
        let g = GridGeometry::new([64; 3], 4, 4).unwrap();
        let sel = g.selector(5).unwrap();
        assert_eq!(sel.embed_window(), 5..9);
        let s = Shape::new(1, 16, 2, 2);
        let a = Tensor::from_vec(s, (0..s.numel()).map(|i| i as f64).collect()).unwrap();
        let g2 = GridGeometry::new([64, 8, 8], 4, 4).unwrap();
        let sub = extract_embedding_subset(&a, &g2.selector(5).unwrap()).unwrap();
        assert_eq!(sub.shape().d, 4);
        assert_eq!(sub.data()[0], a.data()[a.index(0, 5, 0, 0)]);
        assert_eq!(*sub.data().last().unwrap(), a.data()[a.index(0, 8, 1, 1)]);
    }

    #[test]
    fn disjoint_slabs_tile_the_volume() {
        let g = GridGeometry::new([32; 3], 4, 2).unwrap();
        let v = ramp_volume(32);
        let slabs: Vec<_> = g
            .tiling()
            .unwrap()
            .iter()
            .map(|s| extract_voxel_subvolume(&v, s).unwrap())
            .collect();
        assert_eq!(slabs.len(), 4);
        assert_eq!(Volume3D::concat_depth(&slabs).unwrap(), v);
        assert!(GridGeometry::new([32; 3], 4, 3).unwrap().tiling().is_err());
    }

    #[test]
    fn voxel_window_is_scaled_embedding_window() {
        let g = GridGeometry::new([64; 3], 4, 4).unwrap();
        for r in 0..g.offset_count() {
            let sel = g.selector(r).unwrap();
            let e = sel.embed_window();
            let v = sel.voxel_window();
            assert_eq!(v.start, e.start * 4);
            assert_eq!(v.end, e.end * 4);
            assert!(v.end <= 64);
        }
        assert!(g.selector(13).is_err());
    }
}
