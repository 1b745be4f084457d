//! Full-volume and slab-stitched generation, and the seam report comparing them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::TrainState;
use crate::volume::Volume3D;
use crate::tensor::Tensor;

/// `G2(G1(z))` on the whole embedding grid.
pub fn generate_full(state: &TrainState, z: &[f64]) -> Result<Volume3D> {
    let nets = &state.nets;
    let a = nets.g1_forward(&state.params.g1, z)?;
    nets.g2_forward(&state.params.g2, &a)?.to_volume()
}

/// `G1(z)` once, then `G2` on each disjoint slab, concatenated along depth.
pub fn generate_stitched(state: &TrainState, z: &[f64]) -> Result<Volume3D> {
    let nets = &state.nets;
    let tiles = nets.geometry().tiling()?;
    let a = nets.g1_forward(&state.params.g1, z)?;
    let parts = tiles
        .iter()
        .map(|sel| {
            let w = sel.embed_window();
            nets.g2_forward(&state.params.g2, &a.depth_slab(w.start, w.len())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_depth(&parts)?.to_volume()
}

/// `G2(E(x))` over the whole volume.
pub fn reconstruct(state: &TrainState, x: &Volume3D) -> Result<Volume3D> {
    let nets = &state.nets;
    let a = nets.encode_full(&state.params.encoder, x)?;
    nets.g2_forward(&state.params.g2, &a)?.to_volume()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub rho: usize,
    pub slab_depth: usize,
    /// Depth indices `b` of internal seams (between voxel planes `b - 1` and `b`).
    pub seams: Vec<usize>,
    pub interior_voxels: usize,
    pub boundary_voxels: usize,
    /// Max |full - stitched| over voxels at least `rho` planes from every seam.
    pub interior_max_abs_diff: f64,
    /// Max |full - stitched| over voxels closer than `rho` to a seam.
    pub boundary_max_abs_diff: f64,
    /// Mean |v[d+1] - v[d]| over boundary-band voxels of the full generation.
    pub boundary_gradient_full: f64,
    pub boundary_gradient_stitched: f64,
}

impl ConsistencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Planes between depth `d` and the nearest seam; `usize::MAX` without seams.
pub fn seam_distance(d: usize, seams: &[usize]) -> usize {
    seams
        .iter()
        .map(|&b| if d >= b { d - b } else { b - 1 - d })
        .min()
        .unwrap_or(usize::MAX)
}

/// Compares a full generation with a stitched one made of `slab_depth`-voxel slabs.
pub fn consistency_report(
    full: &Volume3D,
    stitched: &Volume3D,
    rho: usize,
    slab_depth: usize,
) -> Result<ConsistencyReport> {
    if full.shape() != stitched.shape() {
        return Err(Error::Geometry(format!(
            "full {:?} and stitched {:?} differ in shape",
            full.shape(),
            stitched.shape()
        )));
    }
    let [d, h, w] = full.shape();
    if slab_depth == 0 || d % slab_depth != 0 {
        return Err(Error::Geometry(format!("slab depth {slab_depth} does not tile depth {d}")));
    }
    let seams: Vec<usize> = (1..d / slab_depth).map(|k| k * slab_depth).collect();
    let plane = h * w;
    let (fv, sv) = (full.voxels(), stitched.voxels());
    let mut r = ConsistencyReport {
        rho,
        slab_depth,
        seams: seams.clone(),
        interior_voxels: 0,
        boundary_voxels: 0,
        interior_max_abs_diff: 0.0,
        boundary_max_abs_diff: 0.0,
        boundary_gradient_full: 0.0,
        boundary_gradient_stitched: 0.0,
    };
    let mut grad_count = 0usize;
    for z in 0..d {
        let interior = seam_distance(z, &seams) >= rho;
        let base = z * plane;
        let mut diff: f64 = 0.0;
        for i in base..base + plane {
            diff = diff.max((fv[i] as f64 - sv[i] as f64).abs());
        }
        if interior {
            r.interior_voxels += plane;
            r.interior_max_abs_diff = r.interior_max_abs_diff.max(diff);
        } else {
            r.boundary_voxels += plane;
            r.boundary_max_abs_diff = r.boundary_max_abs_diff.max(diff);
            if z + 1 < d {
                for i in base..base + plane {
                    r.boundary_gradient_full += (fv[i + plane] as f64 - fv[i] as f64).abs();
                    r.boundary_gradient_stitched += (sv[i + plane] as f64 - sv[i] as f64).abs();
                }
                grad_count += plane;
            }
        }
    }
    if grad_count > 0 {
        r.boundary_gradient_full /= grad_count as f64;
        r.boundary_gradient_stitched /= grad_count as f64;
    }
    Ok(r)
}

/// Generates both ways from `z` and reports on the configured slab tiling.
pub fn stitching_report(state: &TrainState, z: &[f64]) -> Result<ConsistencyReport> {
    let full = generate_full(state, z)?;
    let stitched = generate_stitched(state, z)?;
    let cfg = &state.config.model;
    consistency_report(&full, &stitched, state.nets.g2_receptive_radius(), cfg.sub_extent * cfg.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::ModelConfig;
    use crate::trainer::TrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(model: ModelConfig) -> TrainState {
        TrainState::new(&TrainConfig {
            model,
            ..TrainConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn full_generation_contract() {
        let s = state(ModelConfig::desk(32));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = s.latent().sample(&mut rng);
        let v = generate_full(&s, &z).unwrap();
        assert_eq!(v.shape(), [32; 3]);
        assert!(v.voxels().iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));
        assert_eq!(v, generate_full(&s, &z).unwrap());
        assert!(generate_full(&s, &z[1..]).is_err());
    }

    #[test]
    fn single_slab_is_bit_identical() {
        let s = state(ModelConfig {
            sub_extent: 8,
            ..ModelConfig::desk(32)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = s.latent().sample(&mut rng);
        assert_eq!(generate_full(&s, &z).unwrap(), generate_stitched(&s, &z).unwrap());
    }

    #[test]
    fn stitched_interior_matches_full() {
        let s = state(ModelConfig::desk(32));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let z = s.latent().sample(&mut rng);
            let r = stitching_report(&s, &z).unwrap();
            assert_eq!(r.seams, vec![8, 16, 24]);
            assert!(r.interior_voxels > 0);
            assert!(r.interior_max_abs_diff <= 1e-5);
            assert!(r.boundary_max_abs_diff >= r.interior_max_abs_diff);
        }
    }

    #[test]
    fn identical_inputs_report_zero() {
        let v = Volume3D::new([8, 2, 2], (0..32).map(|i| i as f32).collect()).unwrap();
        let r = consistency_report(&v, &v, 1, 4).unwrap();
        assert_eq!(r.interior_max_abs_diff, 0.0);
        assert_eq!(r.boundary_max_abs_diff, 0.0);
        assert_eq!(r.boundary_gradient_full, r.boundary_gradient_stitched);
        assert_eq!(r.boundary_voxels, 8);
        let other = Volume3D::filled([4, 2, 2], 0.0).unwrap();
        assert!(consistency_report(&v, &other, 1, 4).is_err());
    }

    #[test]
    fn reconstruction_keeps_shape() {
        let s = state(ModelConfig::desk(32));
        let x = crate::volume::make_phantom(&crate::volume::PhantomSpec::desk(32, 4)).unwrap();
        let y = reconstruct(&s, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.voxels().iter().all(|v| (-1.0..=1.0).contains(v)));
        let small = Volume3D::filled([16, 16, 16], 0.0).unwrap();
        assert!(reconstruct(&s, &small).is_err());
    }

    #[test]
    fn seam_distances() {
        let seams = [8, 16];
        assert_eq!(seam_distance(7, &seams), 0);
        assert_eq!(seam_distance(8, &seams), 0);
        assert_eq!(seam_distance(3, &seams), 4);
        assert_eq!(seam_distance(12, &seams), 3);
        assert_eq!(seam_distance(5, &[]), usize::MAX);
    }
}
