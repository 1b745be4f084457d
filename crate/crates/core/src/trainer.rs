//! Alternating optimisation of all players.
//!
//! One [`TrainState::train_step`] runs three phases, each with its own
//! optimiser step:
//!
//! 1. `D` and the CRF ascend the averaged adversarial objective on a real slab
//!    `X_r`, a fake slab `G2(G1(z)_r)`, `CRF(E(X))` and `CRF(G1(z))`;
//! 2. `G1` and `G2` descend the non-saturating generator objective on a fresh `z`;
//! 3. `E` (and optionally `G2`) descend `|X_r - G2(E(X_r))|_1`.
//!
//! Randomness (slab offset, batch indices, latents) comes from a single
//! ChaCha8 stream stored in the state, so a run is a pure function of its seed
//! and a resumed checkpoint continues bit-identically.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{CrfModel, CrfParams};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle};
use crate::netspec::checkpoint::{Checkpoint, NamedTensor};
use crate::netspec::{fnv1a, Init, LatentSpec, ModelConfig, NetGraph, Networks, INIT_STD};
use crate::subvolume::{extract_embedding_subset, sample_offset};
use crate::tensor::Tensor;
use crate::volume::{save_volume, Volume3D};

pub const METRICS_HEADER: &str = "iter,loss_d_crf,loss_g,loss_recon,d_real,d_fake,crf_real,crf_fake";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_e: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: u64,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Sample-volume dump cadence; 0 disables dumps.
    pub sample_every: u64,
    pub seed: u64,
    /// Whether the reconstruction phase also updates `G2`.
    pub recon_updates_g2: bool,
    pub adv_weight: f64,
    pub recon_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 2,
            lr_g: 1e-4,
            lr_e: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 1000,
            checkpoint_every: 500,
            log_every: 1,
            sample_every: 0,
            seed: 0,
            recon_updates_g2: true,
            adv_weight: 1.0,
            recon_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_e", self.lr_e), ("lr_d", self.lr_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Parameter("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Parameter buffers of every player.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub encoder: Vec<f64>,
    pub disc: Vec<f64>,
    pub crf: CrfParams,
}

#[derive(Debug, Clone, PartialEq)]
struct Optimizers {
    g1: Adam,
    g2: Adam,
    g2_recon: Adam,
    encoder: Adam,
    disc: Adam,
    crf: Adam,
}

impl Optimizers {
    fn new(p: &Params) -> Self {
        Optimizers {
            g1: Adam::new(p.g1.len()),
            g2: Adam::new(p.g2.len()),
            g2_recon: Adam::new(p.g2.len()),
            encoder: Adam::new(p.encoder.len()),
            disc: Adam::new(p.disc.len()),
            crf: Adam::new(p.crf.data().len()),
        }
    }

    fn named(&self) -> [(&'static str, &Adam); 6] {
        [
            ("G1", &self.g1),
            ("G2", &self.g2),
            ("G2-recon", &self.g2_recon),
            ("E", &self.encoder),
            ("D", &self.disc),
            ("CRF", &self.crf),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Adam); 6] {
        [
            ("G1", &mut self.g1),
            ("G2", &mut self.g2),
            ("G2-recon", &mut self.g2_recon),
            ("E", &mut self.encoder),
            ("D", &mut self.disc),
            ("CRF", &mut self.crf),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: Networks,
    pub params: Params,
    opt: Optimizers,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Format(format!("odd-length hex string {s:?}")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Format(format!("bad hex: {e}"))))
        .collect()
}

fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

/// Fingerprint of the network graphs and CRF size of a model configuration.
pub fn model_fingerprint(nets: &Networks) -> u64 {
    let mut s = String::new();
    for g in [&nets.g1, &nets.g2, &nets.encoder, &nets.disc] {
        s.push_str(&g.describe());
    }
    s.push_str(&format!("CRF-head params={}\n", CrfParams::count(nets.config.embed_channels)));
    s.push_str(&format!(
        "crf iterations={} max_patches={}\n",
        nets.config.crf_iterations, nets.config.crf_max_patches
    ));
    fnv1a(s.as_bytes())
}

impl TrainState {
    /// Fresh Gaussian initialisation seeded by `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::new(&config.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = Init::Gaussian(INIT_STD);
        let params = Params {
            g1: nets.g1.init_params(init, &mut rng),
            g2: nets.g2.init_params(init, &mut rng),
            encoder: nets.encoder.init_params(init, &mut rng),
            disc: nets.disc.init_params(init, &mut rng),
            crf: CrfParams::init(config.model.embed_channels, &mut rng),
        };
        Ok(TrainState {
            config: config.clone(),
            opt: Optimizers::new(&params),
            nets,
            params,
            iteration: 0,
            rng,
        })
    }

    pub fn crf_model(&self) -> Result<CrfModel> {
        CrfModel::new(
            self.params.crf.clone(),
            self.config.model.crf_iterations,
            self.config.model.crf_max_patches,
        )
    }

    pub fn latent(&self) -> LatentSpec {
        LatentSpec {
            dim: self.config.model.latent_dim,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        model_fingerprint(&self.nets)
    }

    fn graph_buffers(&self) -> [(&NetGraph, &Vec<f64>); 4] {
        [
            (&self.nets.g1, &self.params.g1),
            (&self.nets.g2, &self.params.g2),
            (&self.nets.encoder, &self.params.encoder),
            (&self.nets.disc, &self.params.disc),
        ]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (graph, buf) in self.graph_buffers() {
            for slot in graph.param_slots() {
                tensors.push(NamedTensor {
                    name: slot.name,
                    dims: slot.dims,
                    data: buf[slot.offset..slot.offset + slot.len].to_vec(),
                });
            }
        }
        tensors.push(NamedTensor {
            name: "CRF.params".into(),
            dims: vec![self.params.crf.data().len()],
            data: self.params.crf.data().to_vec(),
        });
        for (name, adam) in self.opt.named() {
            for (suffix, v) in [("m", &adam.m), ("v", &adam.v)] {
                tensors.push(NamedTensor {
                    name: format!("adam.{name}.{suffix}"),
                    dims: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
        let mut meta = vec![
            ("iteration".to_string(), self.iteration.to_string()),
            ("rng_seed".to_string(), hex(&self.rng.get_seed())),
            ("rng_stream".to_string(), self.rng.get_stream().to_string()),
            ("rng_word_pos".to_string(), self.rng.get_word_pos().to_string()),
        ];
        for (name, adam) in self.opt.named() {
            meta.push((format!("adam_t.{name}"), adam.t.to_string()));
        }
        meta.push((
            "config".to_string(),
            serde_json::to_string(&self.config).expect("config serialises"),
        ));
        Checkpoint {
            fingerprint: self.fingerprint(),
            meta,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks meta entry {k}")))
        };
        let config: TrainConfig =
            serde_json::from_str(meta("config")?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut state = TrainState::new(&config)?;
        if ck.fingerprint != state.fingerprint() {
            return Err(Error::Fingerprint(format!(
                "checkpoint {:016x} does not match graphs {:016x}",
                ck.fingerprint,
                state.fingerprint()
            )));
        }
        let nets = state.nets.clone();
        for (graph, buf) in [
            (&nets.g1, &mut state.params.g1),
            (&nets.g2, &mut state.params.g2),
            (&nets.encoder, &mut state.params.encoder),
            (&nets.disc, &mut state.params.disc),
        ] {
            for slot in graph.param_slots() {
                let t = ck.tensor(&slot.name)?;
                if t.dims != slot.dims {
                    return Err(Error::Integrity(format!("{} has dims {:?}", slot.name, t.dims)));
                }
                buf[slot.offset..slot.offset + slot.len].copy_from_slice(&t.data);
            }
        }
        state.params.crf = CrfParams::from_vec(config.model.embed_channels, ck.tensor("CRF.params")?.data.clone())?;
        for (name, adam) in state.opt.named_mut() {
            for (suffix, v) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let t = ck.tensor(&format!("adam.{name}.{suffix}"))?;
                if t.data.len() != v.len() {
                    return Err(Error::Integrity(format!("adam.{name}.{suffix} has wrong length")));
                }
                v.copy_from_slice(&t.data);
            }
            adam.t = parse(meta(&format!("adam_t.{name}"))?)?;
        }
        state.iteration = parse(meta("iteration")?)?;
        let seed: [u8; 32] = unhex(meta("rng_seed")?)?
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse(meta("rng_stream")?)?);
        rng.set_word_pos(parse(meta("rng_word_pos")?)?);
        state.rng = rng;
        Ok(state)
    }

    /// One D+CRF / G / E alternation on `data` (single-channel full volumes).
    pub fn train_step(&mut self, data: &[Tensor]) -> Result<LossBundle> {
        if data.is_empty() {
            return Err(Error::Parameter("dataset is empty".into()));
        }
        let r = self.config.model.resolution;
        if let Some(bad) = data.iter().find(|t| t.shape() != crate::Shape::new(1, r, r, r)) {
            return Err(Error::Geometry(format!("training volume {} is not 1x{r}x{r}x{r}", bad.shape())));
        }
        let cfg = self.config.clone();
        let b = cfg.batch_size;
        let bf = b as f64;
        let latent = self.latent();
        let nets = &self.nets;
        let geom = nets.geometry();
        let rng = &mut self.rng;

        let sel = sample_offset(&geom, rng);
        let win = sel.voxel_window();
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let zs: Vec<Vec<f64>> = (0..b).map(|_| latent.sample(rng)).collect();
        let real: Vec<Tensor> = idx
            .iter()
            .map(|&i| data[i].depth_slab(win.start, win.len()))
            .collect::<Result<_>>()?;

        // Phase 1: discriminator and CRF.
        let p = &mut self.params;
        let crf = CrfModel::new(p.crf.clone(), cfg.model.crf_iterations, cfg.model.crf_max_patches)?;
        let mut gd = zeros(p.disc.len());
        let mut gc = zeros(p.crf.data().len());
        let mut sums = [0.0; 5];
        let mut real_scores = Vec::with_capacity(b);
        for k in 0..b {
            let (dr, tr_r, raw_r) = nets.discriminator_forward_traced(&p.disc, &real[k])?;
            let a = nets.g1_forward(&p.g1, &zs[k])?;
            let fake = nets.g2_forward(&p.g2, &extract_embedding_subset(&a, &sel)?)?;
            let (df, tr_f, raw_f) = nets.discriminator_forward_traced(&p.disc, &fake)?;
            let tape_r = crf.score_forward(&nets.encode_full_tensor(&p.encoder, &data[idx[k]])?)?;
            let tape_f = crf.score_forward(&a)?;
            let (cr, cf) = (tape_r.score, tape_f.score);
            let loss = losses::crfgan_loss(dr, df, cr, cf)?;
            let g = losses::crfgan_loss_grad(dr, df, cr, cf)?;
            let w = cfg.adv_weight / bf;
            nets.discriminator_backward(&p.disc, &tr_r, raw_r, w * g.d_real, &mut gd)?;
            nets.discriminator_backward(&p.disc, &tr_f, raw_f, w * g.d_fake, &mut gd)?;
            for (acc, v) in gc.iter_mut().zip(tape_r.backward(w * g.d_real).params) {
                *acc += v;
            }
            for (acc, v) in gc.iter_mut().zip(tape_f.backward(w * g.d_fake).params) {
                *acc += v;
            }
            for (s, v) in sums.iter_mut().zip([loss.loss_d, dr, df, cr, cf]) {
                *s += v / bf;
            }
            real_scores.push((dr, cr));
        }
        self.opt.disc.step(&mut p.disc, &gd, cfg.lr_d, &cfg);
        self.opt.crf.step(p.crf.data_mut(), &gc, cfg.lr_d, &cfg);
        p.crf.clamp_weight();

        // Phase 2: generators on a fresh latent batch.
        let zs: Vec<Vec<f64>> = (0..b).map(|_| latent.sample(rng)).collect();
        let crf = CrfModel::new(p.crf.clone(), cfg.model.crf_iterations, cfg.model.crf_max_patches)?;
        let mut gg1 = zeros(p.g1.len());
        let mut gg2 = zeros(p.g2.len());
        let mut loss_g = 0.0;
        for (k, z) in zs.iter().enumerate() {
            let (a, tr1) = nets.g1_forward_traced(&p.g1, z)?;
            let a_r = extract_embedding_subset(&a, &sel)?;
            let (fake, tr2) = nets.g2_forward_traced(&p.g2, &a_r)?;
            let (df, trd, raw) = nets.discriminator_forward_traced(&p.disc, &fake)?;
            let tape = crf.score_forward(&a)?;
            let (dr, cr) = real_scores[k];
            loss_g += losses::crfgan_loss(dr, df, cr, tape.score)?.loss_g / bf;
            let g = cfg.adv_weight / bf * losses::crfgan_loss_grad(dr, df, cr, tape.score)?.g_fake;
            let mut scratch = zeros(p.disc.len());
            let g_fake = nets.discriminator_backward(&p.disc, &trd, raw, g, &mut scratch)?;
            let g_ar = nets.g2.backward(&p.g2, &tr2, g_fake, &mut gg2)?;
            let mut g_a = tape.backward(g).embedding;
            g_a.add_depth_slab(sel.embed_window().start, &g_ar)?;
            nets.g1.backward(&p.g1, &tr1, g_a, &mut gg1)?;
        }
        self.opt.g1.step(&mut p.g1, &gg1, cfg.lr_g, &cfg);
        self.opt.g2.step(&mut p.g2, &gg2, cfg.lr_g, &cfg);

        // Phase 3: half-encoder reconstruction.
        let mut ge = zeros(p.encoder.len());
        let mut gg2 = zeros(p.g2.len());
        let mut recon = 0.0;
        for x in &real {
            let (a_hat, tre) = nets.encoder_forward_traced(&p.encoder, x)?;
            let (x_hat, tr2) = nets.g2_forward_traced(&p.g2, &a_hat)?;
            recon += losses::reconstruct_loss(x, &x_hat)? / bf;
            let mut g = losses::reconstruct_loss_grad(x, &x_hat)?;
            let w = cfg.recon_weight / bf;
            g.data_mut().iter_mut().for_each(|v| *v *= w);
            let g_a = nets.g2.backward(&p.g2, &tr2, g, &mut gg2)?;
            nets.encoder.backward(&p.encoder, &tre, g_a, &mut ge)?;
        }
        self.opt.encoder.step(&mut p.encoder, &ge, cfg.lr_e, &cfg);
        if cfg.recon_updates_g2 {
            self.opt.g2_recon.step(&mut p.g2, &gg2, cfg.lr_g, &cfg);
        }

        self.iteration += 1;
        let bundle = LossBundle {
            d_and_crf_loss: sums[0],
            g_loss: loss_g,
            recon_loss: recon,
            d_real: sums[1],
            d_fake: sums[2],
            crf_real: sums[3],
            crf_fake: sums[4],
        };
        let all_params_finite = [&p.g1, &p.g2, &p.encoder, &p.disc]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && p.crf.data().iter().all(|x| x.is_finite());
        if !bundle.is_finite() || !all_params_finite {
            return Err(Error::Numeric(format!(
                "non-finite training state at iteration {}: {}",
                self.iteration,
                csv_row(self.iteration, &bundle)
            )));
        }
        Ok(bundle)
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| Error::Format(format!("cannot parse {s:?}: {e}")))
}

/// One metrics line; floats use the shortest round-trip representation.
pub fn csv_row(iter: u64, l: &LossBundle) -> String {
    format!(
        "{iter},{},{},{},{},{},{},{}",
        l.d_and_crf_loss, l.g_loss, l.recon_loss, l.d_real, l.d_fake, l.crf_real, l.crf_fake
    )
}

/// Converts volumes to the single-channel tensors used by [`TrainState::train_step`].
pub fn dataset_tensors(volumes: &[Volume3D], resolution: usize) -> Result<Vec<Tensor>> {
    if volumes.is_empty() {
        return Err(Error::Parameter("dataset is empty".into()));
    }
    volumes
        .iter()
        .map(|v| {
            if v.shape() != [resolution; 3] {
                return Err(Error::Geometry(format!(
                    "dataset volume {:?} does not match resolution {resolution}",
                    v.shape()
                )));
            }
            Ok(Tensor::from_volume(v))
        })
        .collect()
}

/// Files written by [`train`] inside its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub samples: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        RunPaths {
            checkpoint: out_dir.join("checkpoint.bin"),
            metrics: out_dir.join("metrics.csv"),
            samples: out_dir.join("samples"),
        }
    }
}

/// Seed of the fixed latent used for sample dumps.
const SAMPLE_SEED_SALT: u64 = 0x5a4d_91e5_0f1c_e2d7;

fn dump_sample(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ SAMPLE_SEED_SALT);
    let z = state.latent().sample(&mut rng);
    let v = crate::inference::generate_full(state, &z)?;
    save_volume(&v, &dir.join(format!("iter_{:07}.raw", state.iteration)))
}

/// Runs `config.iterations` total iterations, starting from `resume` if given.
/// The metrics CSV is appended to; a checkpoint is always written at the end.
pub fn train(
    config: &TrainConfig,
    data: &[Volume3D],
    out_dir: &Path,
    resume: Option<TrainState>,
    mut on_step: impl FnMut(u64, &LossBundle),
) -> Result<TrainState> {
    config.validate()?;
    let tensors = dataset_tensors(data, config.model.resolution)?;
    let mut state = match resume {
        Some(mut s) => {
            if s.config.model != config.model {
                return Err(Error::Parameter(
                    "resumed checkpoint was trained with a different model configuration".into(),
                ));
            }
            s.config = config.clone();
            s
        }
        None => TrainState::new(config)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = RunPaths::new(out_dir);
    let fresh = !paths.metrics.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.metrics)
        .map_err(|e| Error::io(&paths.metrics, e))?;
    if fresh {
        writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io(&paths.metrics, e))?;
    }
    while state.iteration < config.iterations {
        let bundle = state.train_step(&tensors)?;
        let it = state.iteration;
        on_step(it, &bundle);
        if config.log_every > 0 && it % config.log_every == 0 {
            writeln!(log, "{}", csv_row(it, &bundle)).map_err(|e| Error::io(&paths.metrics, e))?;
        }
        if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
            state.save(&paths.checkpoint)?;
        }
        if config.sample_every > 0 && it % config.sample_every == 0 {
            dump_sample(&state, &paths.samples)?;
        }
    }
    log.flush().map_err(|e| Error::io(&paths.metrics, e))?;
    state.save(&paths.checkpoint)?;
    Ok(state)
}
