//! Parameter counts, analytic activation memory and measured training speed.
//!
//! # Memory model
//!
//! Every tensor element costs [`BYTES_PER_ELEMENT`] bytes. A graph evaluated on
//! an input of a given shape contributes
//!
//! ```text
//! activations = batch * BYTES_PER_ELEMENT * Σ_layers numel(output) * (1 forward + 1 retained)
//! ```
//!
//! and a CRF score on `N` patches with `T` sweeps contributes `N^2 + N T`
//! elements the same way. One training iteration has three phases
//! (D+CRF, G, E); the estimate takes the largest phase and adds parameter
//! bytes plus two optimiser moments per parameter. In sub-volume mode `G2`,
//! `D` and `E` see one slab of `c` embedding planes; in full-volume mode they
//! see the whole depth.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::netspec::{ModelConfig, NetGraph, Networks};
use crate::tensor::Shape;
use crate::trainer::{dataset_tensors, TrainConfig, TrainState};
use crate::volume::{make_phantom, PhantomSpec};

pub const BYTES_PER_ELEMENT: u64 = 4;
pub const WARMUP_STEPS: usize = 5;
pub const TABLE_RESOLUTIONS: [usize; 3] = [64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub resolution: usize,
    pub g1: usize,
    pub g2: usize,
    pub encoder: usize,
    pub disc: usize,
    pub crf: usize,
    pub total: usize,
    pub surrogate: Option<usize>,
}

impl ParamReport {
    pub fn total_with_surrogate(&self) -> usize {
        self.total + self.surrogate.unwrap_or(0)
    }

    /// `1 - total / (total + surrogate)`.
    pub fn reduction(&self) -> Option<f64> {
        self.surrogate
            .map(|s| s as f64 / (self.total + s) as f64)
    }

    pub fn crf_fraction(&self) -> f64 {
        self.crf as f64 / self.total as f64
    }
}

pub fn param_report(config: &ModelConfig, include_surrogate: bool) -> Result<ParamReport> {
    let nets = Networks::new(config)?;
    let surrogate = if include_surrogate {
        let (head, disc) = nets.surrogate_branch()?;
        Some(head.count_params() + disc.count_params())
    } else {
        None
    };
    Ok(ParamReport {
        resolution: config.resolution,
        g1: nets.g1.count_params(),
        g2: nets.g2.count_params(),
        encoder: nets.encoder.count_params(),
        disc: nets.disc.count_params(),
        crf: CrfParams::count(config.embed_channels),
        total: nets.total_params(),
        surrogate,
    })
}

/// `base` widths at each resolution, with `c = d / 4`.
pub fn at_resolution(base: &ModelConfig, resolution: usize) -> ModelConfig {
    ModelConfig {
        resolution,
        sub_extent: (resolution / base.scale / 4).max(1),
        ..base.clone()
    }
}

pub fn param_table(base: &ModelConfig, resolutions: &[usize]) -> Result<Vec<ParamReport>> {
    resolutions
        .iter()
        .map(|&r| param_report(&at_resolution(base, r), true))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MemoryMode {
    SubVolume,
    FullVolume,
}

impl std::fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoryMode::SubVolume => "sub-volume",
            MemoryMode::FullVolume => "full-volume",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryEstimate {
    pub mode: MemoryMode,
    pub batch: usize,
    /// Per-phase activation bytes: D+CRF, G, E.
    pub phase_bytes: [u64; 3],
    pub activation_bytes: u64,
    pub param_bytes: u64,
    pub moment_bytes: u64,
}

impl MemoryEstimate {
    pub fn total_bytes(&self) -> u64 {
        self.activation_bytes + self.param_bytes + self.moment_bytes
    }
}

/// Output elements of every layer of `g` on `input`.
pub fn graph_activation_elements(g: &NetGraph, input: Shape) -> Result<u64> {
    Ok(g.shape_trace(input)?[1..].iter().map(|s| s.numel() as u64).sum())
}

fn crf_elements(cfg: &ModelConfig) -> u64 {
    let e = cfg.embed_size();
    let mut p = 1;
    while e.div_ceil(p).pow(3) > cfg.crf_max_patches {
        p *= 2;
    }
    let n = e.div_ceil(p).pow(3) as u64;
    n * n + n * cfg.crf_iterations as u64
}

/// Combines per-phase element counts with the parameter footprint.
pub fn memory_from_phases(mode: MemoryMode, batch: usize, phase_elements: [u64; 3], params: u64) -> MemoryEstimate {
    let scale = 2 * BYTES_PER_ELEMENT * batch as u64;
    let phase_bytes = phase_elements.map(|e| e * scale);
    MemoryEstimate {
        mode,
        batch,
        phase_bytes,
        activation_bytes: *phase_bytes.iter().max().expect("three phases"),
        param_bytes: params * BYTES_PER_ELEMENT,
        moment_bytes: 2 * params * BYTES_PER_ELEMENT,
    }
}

pub fn estimate_activation_memory(config: &TrainConfig, mode: MemoryMode) -> Result<MemoryEstimate> {
    let m = &config.model;
    let e = m.embed_size();
    let extent = match mode {
        MemoryMode::SubVolume => m.sub_extent,
        MemoryMode::FullVolume => e,
    };
    let m = &ModelConfig {
        sub_extent: extent,
        ..m.clone()
    };
    let nets = Networks::new(m)?;
    let r = m.resolution;
    let emb = Shape::new(m.embed_channels, extent, e, e);
    let vox = Shape::new(1, extent * m.scale, r, r);
    let g1 = graph_activation_elements(&nets.g1, nets.g1.input)?;
    let g2 = graph_activation_elements(&nets.g2, emb)?;
    let enc = graph_activation_elements(&nets.encoder, vox)?;
    let disc = graph_activation_elements(&nets.disc, vox)?;
    let crf = crf_elements(m);
    let phases = [
        2 * disc + g1 + g2 + enc + 2 * crf,
        g1 + g2 + disc + crf,
        enc + g2,
    ];
    Ok(memory_from_phases(mode, config.batch_size, phases, nets.total_params() as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub backend: &'static str,
    pub workers: usize,
    pub os: &'static str,
    pub arch: &'static str,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            backend: crate::par::BACKEND,
            workers: crate::par::workers(),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        }
    }
}

impl std::fmt::Display for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} x{} on {}/{}", self.backend, self.workers, self.os, self.arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedReport {
    pub resolution: usize,
    pub batch: usize,
    pub steps: usize,
    pub median_step_seconds: f64,
    pub iters_per_sec: f64,
    pub environment: Environment,
}

/// Times `steps` training iterations on phantoms after [`WARMUP_STEPS`] warm-up steps.
pub fn measure_speed(config: &TrainConfig, steps: usize) -> Result<SpeedReport> {
    if steps < 10 {
        return Err(Error::Parameter(format!("speed measurement needs at least 10 steps, got {steps}")));
    }
    let r = config.model.resolution;
    let volumes = (0..config.batch_size.max(2))
        .map(|i| make_phantom(&PhantomSpec::desk(r, config.seed.wrapping_add(i as u64))))
        .collect::<Result<Vec<_>>>()?;
    let data = dataset_tensors(&volumes, r)?;
    let mut state = TrainState::new(config)?;
    for _ in 0..WARMUP_STEPS {
        state.train_step(&data)?;
    }
    let mut times = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = Instant::now();
        state.train_step(&data)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if steps % 2 == 1 {
        times[steps / 2]
    } else {
        0.5 * (times[steps / 2 - 1] + times[steps / 2])
    };
    Ok(SpeedReport {
        resolution: r,
        batch: config.batch_size,
        steps,
        median_step_seconds: median,
        iters_per_sec: 1.0 / median,
        environment: Environment::current(),
    })
}

/// Aligned text table: left-aligned first column, right-aligned others.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(headers.to_vec());
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn render_csv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub const PARAM_HEADERS: [&str; 10] = [
    "resolution",
    "G1",
    "G2",
    "E",
    "D",
    "CRF",
    "total",
    "surrogate",
    "total+surrogate",
    "reduction",
];

pub fn param_rows(reports: &[ParamReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                format!("{0}^3", r.resolution),
                r.g1.to_string(),
                r.g2.to_string(),
                r.encoder.to_string(),
                r.disc.to_string(),
                r.crf.to_string(),
                r.total.to_string(),
                r.surrogate.map_or("-".into(), |s| s.to_string()),
                r.total_with_surrogate().to_string(),
                r.reduction().map_or("-".into(), |v| format!("{:.1}%", 100.0 * v)),
            ]
        })
        .collect()
}

pub const MEMORY_HEADERS: [&str; 7] = ["mode", "batch", "d_phase_mb", "g_phase_mb", "e_phase_mb", "params_moments_mb", "total_mb"];

fn mb(b: u64) -> String {
    format!("{:.2}", b as f64 / (1024.0 * 1024.0))
}

pub fn memory_rows(estimates: &[MemoryEstimate]) -> Vec<Vec<String>> {
    estimates
        .iter()
        .map(|m| {
            vec![
                m.mode.to_string(),
                m.batch.to_string(),
                mb(m.phase_bytes[0]),
                mb(m.phase_bytes[1]),
                mb(m.phase_bytes[2]),
                mb(m.param_bytes + m.moment_bytes),
                mb(m.total_bytes()),
            ]
        })
        .collect()
}

pub const SPEED_HEADERS: [&str; 5] = ["resolution", "batch", "steps", "iter_per_sec", "environment"];

pub fn speed_rows(reports: &[SpeedReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|s| {
            vec![
                format!("{0}^3", s.resolution),
                s.batch.to_string(),
                s.steps.to_string(),
                format!("{:.3}", s.iters_per_sec),
                s.environment.to_string(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::NetRole;

    #[test]
    fn report_matches_graph_counts() {
        let cfg = ModelConfig::default();
        let nets = Networks::new(&cfg).unwrap();
        let r = param_report(&cfg, false).unwrap();
        assert_eq!(r.g1, nets.g1.count_params());
        assert_eq!(r.disc, nets.disc.count_params());
        assert_eq!(r.total, r.g1 + r.g2 + r.encoder + r.disc + r.crf);
        assert!(r.surrogate.is_none() && r.reduction().is_none());
    }

    #[test]
    fn totals_grow_with_resolution() {
        let table = param_table(&ModelConfig::default(), &TABLE_RESOLUTIONS).unwrap();
        for w in table.windows(2) {
            assert!(w[1].total > w[0].total);
        }
        for r in &table {
            assert!(r.crf_fraction() < 0.05);
            assert!(r.reduction().unwrap() >= 0.15, "{:?}", r);
        }
    }

    #[test]
    fn activation_memory_is_linear_in_batch() {
        let base = TrainConfig::default();
        let one = estimate_activation_memory(&TrainConfig { batch_size: 1, ..base.clone() }, MemoryMode::SubVolume).unwrap();
        let two = estimate_activation_memory(&TrainConfig { batch_size: 2, ..base.clone() }, MemoryMode::SubVolume).unwrap();
        let six = estimate_activation_memory(&TrainConfig { batch_size: 6, ..base }, MemoryMode::SubVolume).unwrap();
        assert_eq!(two.activation_bytes, 2 * one.activation_bytes);
        assert_eq!(six.activation_bytes, 6 * one.activation_bytes);
        assert_eq!(one.param_bytes, two.param_bytes);
    }

    #[test]
    fn sub_volume_mode_is_cheaper() {
        let cfg = TrainConfig::default();
        let sub = estimate_activation_memory(&cfg, MemoryMode::SubVolume).unwrap();
        let full = estimate_activation_memory(&cfg, MemoryMode::FullVolume).unwrap();
        assert!(sub.activation_bytes as f64 <= 0.5 * full.activation_bytes as f64);
        let whole = TrainConfig {
            model: ModelConfig {
                sub_extent: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(
            estimate_activation_memory(&whole, MemoryMode::SubVolume).unwrap(),
            MemoryEstimate {
                mode: MemoryMode::SubVolume,
                ..estimate_activation_memory(&whole, MemoryMode::FullVolume).unwrap()
            }
        );
    }

    #[test]
    fn empty_graph_costs_only_parameters() {
        let g = NetGraph::new(NetRole::G2, Shape::new(1, 4, 4, 4), vec![]).unwrap();
        let e = graph_activation_elements(&g, g.input).unwrap();
        assert_eq!(e, 0);
        let m = memory_from_phases(MemoryMode::SubVolume, 2, [e; 3], 100);
        assert_eq!(m.activation_bytes, 0);
        assert_eq!(m.total_bytes(), 100 * 4 * 3);
    }

    #[test]
    fn speed_rejects_short_runs() {
        assert!(measure_speed(&TrainConfig::default(), 9).is_err());
    }

    #[test]
    fn tables_render() {
        let rows = vec![vec!["a".to_string(), "1".to_string()], vec!["bbb".to_string(), "22".to_string()]];
        let t = render_table(&["name", "n"], &rows);
        assert_eq!(t, "name   n\n----  --\na      1\nbbb   22\n");
        assert_eq!(render_csv(&["name", "n"], &rows), "name,n\na,1\nbbb,22\n");
    }
}
