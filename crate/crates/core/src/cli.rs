//! Command-line front end. [`run`] parses arguments, dispatches to a
//! subcommand and maps the outcome to an exit code: 0 on success, 1 on usage
//! errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, MemoryMode};
use crate::error::{Error, Result};
use crate::inference::{consistency_report, generate_full, generate_stitched, reconstruct};
use crate::metrics::{extract_features, fid, mmd, EvalReport, FeatureExtractor, DEFAULT_FEATURES};
use crate::trainer::{csv_row, train, TrainConfig, TrainState};
use crate::volume::{load_dir, load_volume, make_phantom, save_volume, PhantomSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "crfgan", version, about = "CRF-guided sub-volume 3D GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricChoice {
    Fid,
    Mmd,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchWhat {
    Params,
    Memory,
    Speed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom volumes.
    Phantom {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on a directory of volumes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Sample volumes from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Generate slab by slab and write a consistency report against full generation.
        #[arg(long)]
        stitched: bool,
    },
    /// Encode a volume and decode it again.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two directories of volumes.
    Eval {
        #[arg(long)]
        real_dir: PathBuf,
        #[arg(long)]
        fake_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricChoice::Both)]
        metric: MetricChoice,
        /// Seed of the feature extractor weights.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FEATURES)]
        features: usize,
    },
    /// Parameter, memory or speed tables.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        what: BenchWhat,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::Format(format!("writing output: {e}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Phantom {
            count,
            size,
            seed,
            out_dir,
        } => {
            create_dir(&out_dir)?;
            for i in 0..count {
                let v = make_phantom(&PhantomSpec::desk(size, seed.wrapping_add(i as u64)))?;
                save_volume(&v, &out_dir.join(format!("phantom_{i:05}.raw")))?;
            }
            emit(out, &format!("wrote {count} phantoms of {size}^3 to {}\n", out_dir.display()))
        }
        Command::Train {
            config,
            data_dir,
            out_dir,
            resume,
            iterations,
            seed,
            batch_size,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            cfg.validate()?;
            let data = load_dir(&data_dir)?;
            let resume = resume.as_deref().map(TrainState::load).transpose()?;
            let log_every = cfg.log_every;
            let mut sink = Ok(());
            let state = train(&cfg, &data, &out_dir, resume, |it, bundle| {
                if sink.is_ok() && log_every > 0 && it % log_every == 0 {
                    sink = emit(out, &format!("{}\n", csv_row(it, bundle)));
                }
            })?;
            sink?;
            emit(
                out,
                &format!(
                    "trained to iteration {}; checkpoint in {}\n",
                    state.iteration,
                    out_dir.join("checkpoint.bin").display()
                ),
            )
        }
        Command::Generate {
            checkpoint,
            count,
            seed,
            out_dir,
            stitched,
        } => {
            let state = TrainState::load(&checkpoint)?;
            create_dir(&out_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let latent = state.latent();
            let rho = state.nets.g2_receptive_radius();
            let slab = state.config.model.sub_extent * state.config.model.scale;
            let mut reports = Vec::new();
            for i in 0..count {
                let z = latent.sample(&mut rng);
                let full = generate_full(&state, &z)?;
                let v = if stitched {
                    let s = generate_stitched(&state, &z)?;
                    reports.push(consistency_report(&full, &s, rho, slab)?);
                    s
                } else {
                    full
                };
                save_volume(&v, &out_dir.join(format!("sample_{i:05}.raw")))?;
            }
            emit(out, &format!("wrote {count} volumes to {}\n", out_dir.display()))?;
            if stitched {
                let path = out_dir.join("consistency.json");
                let text = serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))?;
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                let worst = reports.iter().map(|r| r.interior_max_abs_diff).fold(0.0, f64::max);
                emit(out, &format!("interior max abs diff {worst:.3e}\nconsistency report: {}\n", path.display()))?;
            }
            Ok(())
        }
        Command::Reconstruct { checkpoint, input, out: path } => {
            let state = TrainState::load(&checkpoint)?;
            let x = load_volume(&input)?;
            let y = reconstruct(&state, &x)?;
            save_volume(&y, &path)?;
            let l1 = x
                .voxels()
                .iter()
                .zip(y.voxels())
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum::<f64>()
                / x.len() as f64;
            emit(out, &format!("reconstruction L1 {l1:.6}; wrote {}\n", path.display()))
        }
        Command::Eval {
            real_dir,
            fake_dir,
            metric,
            seed,
            features,
        } => {
            let extractor = FeatureExtractor::new(seed, features)?;
            let real = extract_features(&load_dir(&real_dir)?, &extractor)?;
            let fake = extract_features(&load_dir(&fake_dir)?, &extractor)?;
            let mut reports = Vec::new();
            let mut push = |name: &str, value: f64| {
                reports.push(EvalReport {
                    metric: name.to_string(),
                    value,
                    real_count: real.len(),
                    fake_count: fake.len(),
                    extractor_fingerprint: format!("{:016x}", extractor.fingerprint()),
                })
            };
            if matches!(metric, MetricChoice::Fid | MetricChoice::Both) {
                push("fid", fid(&real, &fake)?);
            }
            if matches!(metric, MetricChoice::Mmd | MetricChoice::Both) {
                push("mmd", mmd(&real, &fake)?);
            }
            for r in &reports {
                emit(
                    out,
                    &format!(
                        "metric: {}\nvalue: {:.9e}\nreal_count: {}\nfake_count: {}\nextractor_fingerprint: {}\n\n",
                        r.metric, r.value, r.real_count, r.fake_count, r.extractor_fingerprint
                    ),
                )?;
            }
            Ok(())
        }
        Command::Bench {
            config,
            what,
            steps,
            format,
        } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            let (headers, rows): (&[&str], Vec<Vec<String>>) = match what {
                BenchWhat::Params => (
                    &bench::PARAM_HEADERS,
                    bench::param_rows(&bench::param_table(&cfg.model, &bench::TABLE_RESOLUTIONS)?),
                ),
                BenchWhat::Memory => {
                    let est = [MemoryMode::SubVolume, MemoryMode::FullVolume]
                        .into_iter()
                        .map(|m| bench::estimate_activation_memory(&cfg, m))
                        .collect::<Result<Vec<_>>>()?;
                    (&bench::MEMORY_HEADERS, bench::memory_rows(&est))
                }
                BenchWhat::Speed => (
                    &bench::SPEED_HEADERS,
                    bench::speed_rows(&[bench::measure_speed(&cfg, steps)?]),
                ),
            };
            let text = match format {
                TableFormat::Text => bench::render_table(headers, &rows),
                TableFormat::Csv => bench::render_csv(headers, &rows),
            };
            emit(out, &text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("crfgan").chain(args.iter().copied());
        let code = run(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, out, err) = run_capture(&["phantom", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(out.is_empty() && !err.is_empty());
        assert_eq!(run_capture(&[]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bench", "--what", "nothing"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_and_version_exit_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("phantom") && out.contains("reconstruct"));
        assert_eq!(run_capture(&["--version"]).0, EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let (code, _, err) = run_capture(&["eval", "--real-dir", "/nonexistent/a", "--fake-dir", "/nonexistent/b"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn bench_params_table() {
        let (code, out, _) = run_capture(&["bench", "--what", "params", "--format", "csv"]);
        assert_eq!(code, EXIT_OK);
        let lines: Vec<_> = out.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("resolution,G1"));
    }
}
