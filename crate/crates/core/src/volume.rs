//! Single-channel voxel grids, the raw + sidecar file format, intensity
//! normalisation and the procedural ellipsoid phantoms used as training data.
//!
//! On disk a volume is two files: `<name>.raw` holding contiguous IEEE-754
//! little-endian `f32` voxels in row-major order (width fastest), and
//! `<name>.meta.json` describing it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: &str = "float32";
pub const BYTE_ORDER: &str = "little-endian";
pub const LAYOUT: &str = "row-major";
pub const INTENSITY_RANGE: [f32; 2] = [-1.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    voxels: Vec<f32>,
}

impl Volume3D {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!("volume shape {shape:?} has a zero axis")));
        }
        let n = shape.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::Integrity(format!(
                "shape {shape:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume3D { shape, voxels })
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Result<Self> {
        Volume3D::new(shape, vec![value; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn offset(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.offset(d, h, w)]
    }

    /// Copies depth planes `[start, start + len)`.
    pub fn depth_slab(&self, start: usize, len: usize) -> Result<Volume3D> {
        if len == 0 || start + len > self.shape[0] {
            return Err(Error::Geometry(format!(
                "depth window {start}..{} outside extent {}",
                start + len,
                self.shape[0]
            )));
        }
        let plane = self.shape[1] * self.shape[2];
        Volume3D::new(
            [len, self.shape[1], self.shape[2]],
            self.voxels[start * plane..(start + len) * plane].to_vec(),
        )
    }

    pub fn concat_depth(parts: &[Volume3D]) -> Result<Volume3D> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Geometry("nothing to concatenate".into()))?;
        let [_, h, w] = first.shape;
        let mut depth = 0;
        let mut voxels = Vec::new();
        for p in parts {
            if p.shape[1] != h || p.shape[2] != w {
                return Err(Error::Geometry(format!(
                    "slab {:?} does not match in-plane size {h}x{w}",
                    p.shape
                )));
            }
            depth += p.shape[0];
            voxels.extend_from_slice(&p.voxels);
        }
        Volume3D::new([depth, h, w], voxels)
    }

    pub fn max_abs_diff(&self, other: &Volume3D) -> f32 {
        self.voxels
            .iter()
            .zip(&other.voxels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    pub intensity_range: [f32; 2],
}

impl VolumeMeta {
    pub fn for_shape(shape: [usize; 3]) -> Self {
        VolumeMeta {
            shape,
            dtype: DTYPE.into(),
            byte_order: BYTE_ORDER.into(),
            layout: LAYOUT.into(),
            intensity_range: INTENSITY_RANGE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dtype != DTYPE || self.byte_order != BYTE_ORDER || self.layout != LAYOUT {
            return Err(Error::Format(format!(
                "unsupported encoding {}/{}/{}",
                self.dtype, self.byte_order, self.layout
            )));
        }
        if self.shape.contains(&0) {
            return Err(Error::Format(format!("invalid shape {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Sidecar path for a raw volume file: `name.raw` → `name.meta.json`.
pub fn meta_path(raw: &Path) -> PathBuf {
    raw.with_extension("meta.json")
}

pub fn save_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = serde_json::to_string_pretty(&VolumeMeta::for_shape(v.shape))
        .map_err(|e| Error::Format(e.to_string()))?;
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format(format!("missing sidecar {}", mp.display())),
        _ => Error::io(&mp, e),
    })?;
    let meta: VolumeMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?;
    meta.validate()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, metadata shape {:?} needs {}",
            path.display(),
            bytes.len(),
            meta.shape,
            n * 4
        )));
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume3D::new(meta.shape, voxels)
}

/// Lists `*.raw` files in a directory, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "raw") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<Volume3D>> {
    list_volumes(dir)?.iter().map(|p| load_volume(p)).collect()
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`, clamping values outside.
pub fn normalize_intensity(raw: &[f32], shape: [usize; 3], lo: f32, hi: f32) -> Result<Volume3D> {
    if !(lo < hi) {
        return Err(Error::Parameter(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    let scale = 2.0 / (hi as f64 - lo as f64);
    let voxels = raw
        .iter()
        .map(|&x| ((x as f64 - lo as f64) * scale - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Volume3D::new(shape, voxels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub ellipsoids: usize,
    /// Semi-axis range as a fraction of each axis extent.
    pub radius_range: (f64, f64),
    pub intensity_levels: Vec<f32>,
    pub background: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Three ellipsoids of mixed brightness on a dark background.
    pub fn desk(size: usize, seed: u64) -> Self {
        PhantomSpec {
            shape: [size; 3],
            ellipsoids: 3,
            radius_range: (0.12, 0.3),
            intensity_levels: vec![0.0, 0.5, 1.0],
            background: -1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range;
        if self.ellipsoids == 0 {
            return Err(Error::Parameter("need at least one ellipsoid".into()));
        }
        if !(0.0..=hi).contains(&lo) || !hi.is_finite() {
            return Err(Error::Parameter(format!("invalid radius range ({lo}, {hi})")));
        }
        if hi > 1.0 {
            return Err(Error::Parameter(format!(
                "radius fraction {hi} exceeds the volume extent"
            )));
        }
        if self.intensity_levels.is_empty()
            || self
                .intensity_levels
                .iter()
                .chain(std::iter::once(&self.background))
                .any(|v| !(-1.0..=1.0).contains(v))
        {
            return Err(Error::Parameter("intensities must lie in [-1, 1]".into()));
        }
        if self.shape.contains(&0) {
            return Err(Error::Parameter("phantom shape has a zero axis".into()));
        }
        Ok(())
    }
}

/// One axis-aligned ellipsoid in voxel-centre coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub intensity: f32,
}

/// Draws the ellipsoid parameters for a phantom. Centres are uniform over the volume.
pub fn phantom_layout(spec: &PhantomSpec) -> Result<Vec<Ellipsoid>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.radius_range;
    let mut out = Vec::with_capacity(spec.ellipsoids);
    for _ in 0..spec.ellipsoids {
        let mut center = [0.0; 3];
        let mut semi_axes = [0.0; 3];
        for k in 0..3 {
            let n = spec.shape[k] as f64;
            center[k] = rng.random::<f64>() * n;
            let frac = if hi > lo { rng.random_range(lo..hi) } else { lo };
            semi_axes[k] = frac * n;
        }
        let intensity = spec.intensity_levels[rng.random_range(0..spec.intensity_levels.len())];
        out.push(Ellipsoid {
            center,
            semi_axes,
            intensity,
        });
    }
    Ok(out)
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume3D> {
    let layout = phantom_layout(spec)?;
    let mut v = Volume3D::filled(spec.shape, spec.background)?;
    for e in &layout {
        paint_ellipsoid(&mut v, e);
    }
    Ok(v)
}

// Coverage ramps linearly from 1 to 0 across one voxel around the surface.
fn paint_ellipsoid(v: &mut Volume3D, e: &Ellipsoid) {
    let min_axis = e.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_axis < 1e-9 {
        return;
    }
    let shape = v.shape;
    let range = |k: usize| {
        let lo = (e.center[k] - e.semi_axes[k] - 1.0).floor().max(0.0) as usize;
        let hi = ((e.center[k] + e.semi_axes[k] + 1.0).ceil() as usize).min(shape[k]);
        lo..hi
    };
    for d in range(0) {
        for h in range(1) {
            for w in range(2) {
                let p = [d as f64 + 0.5, h as f64 + 0.5, w as f64 + 0.5];
                let q: f64 = (0..3)
                    .map(|k| ((p[k] - e.center[k]) / e.semi_axes[k]).powi(2))
                    .sum();
                let dist = (q.sqrt() - 1.0) * min_axis;
                let alpha = (0.5 - dist).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    let o = v.offset(d, h, w);
                    v.voxels[o] = v.voxels[o] * (1.0 - alpha) + e.intensity * alpha;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn zero_volume_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.raw");
        let v = Volume3D::filled([8, 8, 8], 0.0).unwrap();
        save_volume(&v, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 2048);
        let back = load_volume(&p).unwrap();
        assert!(back.voxels().iter().all(|&x| x == 0.0));

        let big = Volume3D::filled([64, 64, 64], 0.0).unwrap();
        let p64 = dir.path().join("z64.raw");
        save_volume(&big, &p64).unwrap();
        assert_eq!(load_volume(&p64).unwrap(), big);
    }

    #[test]
    fn single_voxel_lands_at_row_major_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.raw");
        let mut v = Volume3D::filled([3, 4, 5], 0.0).unwrap();
        let off = v.offset(2, 1, 3);
        assert_eq!(off, (2 * 4 + 1) * 5 + 3);
        v.voxels_mut()[off] = 1.0;
        save_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[off * 4..off * 4 + 4], &1.0f32.to_le_bytes());
        assert!(bytes[..off * 4].iter().all(|&b| b == 0));
    }

    #[test]
    fn truncated_raw_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.raw");
        save_volume(&Volume3D::filled([64, 64, 64], 0.0).unwrap(), &p).unwrap();
        fs::write(&p, vec![0u8; 64 * 64 * 63 * 4]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_or_corrupt_sidecar_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        fs::write(&p, vec![0u8; 32]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
        fs::write(meta_path(&p), "{ not json").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
        let mut meta = VolumeMeta::for_shape([2, 2, 2]);
        meta.byte_order = "big-endian".into();
        fs::write(meta_path(&p), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
    }

    #[test]
    fn sidecar_keys_are_exact() {
        let text = serde_json::to_string(&VolumeMeta::for_shape([2, 3, 4])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["byte_order", "dtype", "intensity_range", "layout", "shape"]);
        assert_eq!(v["dtype"], "float32");
        assert_eq!(v["byte_order"], "little-endian");
        assert_eq!(v["layout"], "row-major");
    }

    #[test]
    fn random_volumes_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let shape = [
                rng.random_range(1..9),
                rng.random_range(1..9),
                rng.random_range(1..9),
            ];
            let n = shape.iter().product();
            let voxels: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>())).collect();
            let v = Volume3D::new(shape, voxels).unwrap();
            let p = dir.path().join(format!("r{i}.raw"));
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.shape(), v.shape());
            let a: Vec<u32> = v.voxels().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.voxels().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn normalize_endpoints_midpoint_clamp() {
        let v = normalize_intensity(&[10.0, 30.0, 20.0, 35.0, -100.0], [1, 1, 5], 10.0, 30.0).unwrap();
        assert_eq!(v.voxels(), &[-1.0, 1.0, 0.0, 1.0, -1.0]);
        assert!(normalize_intensity(&[0.0], [1, 1, 1], 1.0, 1.0).is_err());
        assert!(normalize_intensity(&[0.0], [1, 1, 1], 2.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_on_unit_range(xs in proptest::collection::vec(-1.0f32..=1.0, 1..64)) {
            let n = xs.len();
            let once = normalize_intensity(&xs, [1, 1, n], -1.0, 1.0).unwrap();
            let twice = normalize_intensity(once.voxels(), [1, 1, n], -1.0, 1.0).unwrap();
            prop_assert_eq!(once.voxels(), twice.voxels());
            for (a, b) in xs.iter().zip(once.voxels()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_radius_phantom_is_background() {
        let mut spec = PhantomSpec::desk(16, 3);
        spec.radius_range = (0.0, 0.0);
        let v = make_phantom(&spec).unwrap();
        assert!(v.voxels().iter().all(|&x| x == spec.background));
    }

    #[test]
    fn phantom_is_deterministic_and_in_range() {
        let spec = PhantomSpec::desk(24, 99);
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.voxels().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(a.voxels().iter().any(|&x| x > -1.0));
        let c = make_phantom(&PhantomSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_radius_rejected() {
        let mut spec = PhantomSpec::desk(16, 0);
        spec.radius_range = (0.2, 1.5);
        assert!(matches!(make_phantom(&spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn phantom_centres_are_uniform() {
        const BINS: usize = 8;
        let mut counts = [[0usize; BINS]; 3];
        let mut total = 0;
        for seed in 0..1000 {
            let spec = PhantomSpec::desk(32, seed);
            for e in phantom_layout(&spec).unwrap() {
                for k in 0..3 {
                    counts[k][(e.center[k] / 32.0 * BINS as f64) as usize] += 1;
                }
                total += 1;
            }
        }
        let expected = total as f64 / BINS as f64;
        let chi = ChiSquared::new((BINS - 1) as f64).unwrap();
        for axis in counts {
            let stat: f64 = axis
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            let p = 1.0 - chi.cdf(stat);
            assert!(p > 0.01, "chi-square p = {p}");
        }
    }
}
