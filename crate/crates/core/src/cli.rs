//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::density::{density_for_cloud, BeamProfile};
use crate::error::Error;
use crate::io;
use crate::model::{Ablation, Model};
use crate::report::{density_match, feature_similarity};
use crate::sensor::{ProjectionParams, SensorConfig};
use crate::sim::{make_dataset, make_scenes, raycast_scan, LabeledCloud, CLASS_NAMES};
use crate::stats::ReservoirState;
use crate::train::{evaluate, train_with_progress, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ddfe", version, about = "Beam-density features for LiDAR scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SensorArg {
    /// Sensor config file or preset name (waymo, semantickitti, nuscenes,
    /// pandaset, semanticposs).
    #[arg(long)]
    sensor: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-cast random scenes and write `.bin` + `.label` pairs.
    Simulate {
        #[command(flatten)]
        sensor: SensorArg,
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Range noise std, meters.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-point beam density of one scan.
    Density {
        #[command(flatten)]
        sensor: SensorArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write CSV instead of little-endian f32.
        #[arg(long)]
        csv: bool,
    },
    /// Fit soft-clip parameters over every scan in a directory.
    Stats {
        #[command(flatten)]
        sensor: SensorArg,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam sampling and scene mixing on one labeled scan.
    Augment {
        #[command(flatten)]
        sensor: SensorArg,
        #[arg(long)]
        input: PathBuf,
        /// Partner scan for mixing.
        #[arg(long)]
        mix: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability of each augmentation.
        #[arg(long, default_value_t = 0.5)]
        prob: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of labeled scans.
    Train {
        #[command(flatten)]
        sensor: SensorArg,
        #[arg(long)]
        data: PathBuf,
        /// `key=value` training config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        voxel: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        no_clip: bool,
        #[arg(long)]
        no_attn: bool,
        #[arg(long)]
        no_density: bool,
        /// Re-augment every sample each epoch.
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU and mIoU of a checkpoint.
    Evaluate {
        #[command(flatten)]
        sensor: SensorArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Density against distance for several sensors.
    ReportDensityMatch {
        #[arg(long, num_args = 1.., required = true)]
        sensors: Vec<String>,
        #[arg(long, num_args = 1.., required = true)]
        distances: Vec<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// L2 distances between range-binned mean voxel features of two sensors;
    /// scans are read from DATA/<sensor name>/.
    ReportFeatureSimilarity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 2, required = true)]
        sensors: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn resolve_sensor(flag: &str, value: &str) -> CliResult<SensorConfig> {
    let path = Path::new(value);
    if path.is_file() {
        return Ok(io::read_sensor_config(path)?);
    }
    SensorConfig::preset_by_name(value).ok_or_else(|| {
        Failure::Data(Error::InvalidArgument(format!(
            "{flag}: no preset or config file named {value:?}"
        )))
    })
}

fn ensure_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| Failure::Data(Error::io(path, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure::Data(Error::io(path, e)))
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("DDFE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("DDFE_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool may already exist when called from tests
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs the CLI on `args` (including the program name), writing normal
/// output to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command, out));
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Data(Error::io("<stdout>", e)))
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Simulate {
            sensor,
            scenes,
            seed,
            noise,
            out: dir,
        } => {
            let config = resolve_sensor("--sensor", &sensor.sensor)?;
            if scenes == 0 {
                return Err(Failure::Usage("--scenes must be at least 1".into()));
            }
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Failure::Usage(format!("--noise must be >= 0, got {noise}")));
            }
            ensure_dir(&dir)?;
            let clouds = if noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                make_scenes(scenes, seed)
                    .into_iter()
                    .map(|mut s| {
                        s.noise_sigma = noise;
                        raycast_scan(&s, &config, &mut rng)
                    })
                    .collect::<crate::Result<Vec<_>>>()?
            } else {
                make_dataset(scenes, &config, seed)?
            };
            for (i, c) in clouds.iter().enumerate() {
                io::write_labeled(&dir, &format!("{i:06}"), c)?;
            }
            let total: usize = clouds.iter().map(LabeledCloud::len).sum();
            emit(
                out,
                &format!("wrote {scenes} scans ({total} points) to {}\n", dir.display()),
            )
        }
        Command::Density {
            sensor,
            input,
            out: path,
            csv,
        } => {
            let config = resolve_sensor("--sensor", &sensor.sensor)?;
            let cloud = io::read_scan(&input)?;
            let profile = BeamProfile::new(&config, &ProjectionParams::default())?;
            let emb = density_for_cloud(&profile, &cloud)?;
            io::write_density(&emb, &path, csv)?;
            emit(out, &format!("{} points -> {}\n", emb.len(), path.display()))
        }
        Command::Stats {
            sensor,
            inputs,
            seed,
            out: path,
        } => {
            let config = resolve_sensor("--sensor", &sensor.sensor)?;
            let profile = BeamProfile::new(&config, &ProjectionParams::default())?;
            let scans = io::list_scans(&inputs)?;
            if scans.is_empty() {
                return Err(Failure::Data(Error::InvalidArgument(format!(
                    "--inputs: no .bin scans in {}",
                    inputs.display()
                ))));
            }
            let mut state = ReservoirState::new(seed);
            for scan in &scans {
                let cloud = io::read_scan(scan)?;
                let emb = density_for_cloud(&profile, &cloud)
                    .map_err(|e| Error::InvalidArgument(format!("{}: {e}", scan.display())))?;
                state.update(&emb)?;
            }
            let clip = state.fit_clip()?;
            io::write_clip(&clip, &path)?;
            emit(out, &io::format_clip(&clip))
        }
        Command::Augment {
            sensor,
            input,
            mix,
            seed,
            prob,
            out: dir,
        } => {
            let config = resolve_sensor("--sensor", &sensor.sensor)?;
            let cfg = AugmentConfig {
                apply_prob: prob,
                ..AugmentConfig::default()
            };
            cfg.validate().map_err(|e| Failure::Usage(format!("--prob: {e}")))?;
            let sample = io::read_labeled(&input)?;
            let pool = [io::read_labeled(&mix)?];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (cloud, record) = augment_pipeline(&sample, &config, &cfg, &pool, &mut rng)?;
            ensure_dir(&dir)?;
            io::write_labeled(&dir, "augmented", &cloud)?;
            let keep = record.keep.map_or("none".to_string(), |k| format!("{} beams", k.len()));
            emit(
                out,
                &format!(
                    "beam sampling: {keep}; mixed: {}; {} -> {} points\n",
                    record.mix_partner.is_some(),
                    sample.len(),
                    cloud.len()
                ),
            )
        }
        Command::Train {
            sensor,
            data,
            config,
            epochs,
            batch,
            voxel,
            seed,
            lr,
            no_clip,
            no_attn,
            no_density,
            augment,
            out: path,
        } => {
            let sensor = resolve_sensor("--sensor", &sensor.sensor)?;
            let mut cfg = match &config {
                Some(p) => TrainConfig::read(p)?,
                None => TrainConfig::default(),
            };
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch {
                cfg.batch = v;
            }
            if let Some(v) = voxel {
                cfg.voxel_size = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = lr {
                cfg.schedule.initial = v;
            }
            cfg.ablation = Ablation {
                clip: !no_clip,
                attention: !no_attn,
                density: !no_density,
            };
            if augment {
                cfg.augment = Some(AugmentConfig::default());
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let dataset = io::read_labeled_dir(&data)?;
            let (model, report) = train_with_progress(&dataset, &sensor, &cfg, |epoch, loss| {
                let _ = writeln!(out, "epoch {epoch} loss {loss:.6}");
            })?;
            model.save(&path)?;
            emit(
                out,
                &format!(
                    "final_loss {:?} ({})\nsaved {}\n",
                    report.final_loss(),
                    cfg.ablation.label(),
                    path.display()
                ),
            )
        }
        Command::Evaluate {
            sensor,
            data,
            model,
            report,
        } => {
            let sensor = resolve_sensor("--sensor", &sensor.sensor)?;
            let model = Model::load(&model)?;
            let dataset = io::read_labeled_dir(&data)?;
            let conf = evaluate(&model, &dataset, &sensor)?;
            let text = conf.format_report(&CLASS_NAMES);
            if let Some(p) = &report {
                write_text(p, &text)?;
            }
            emit(out, &text)
        }
        Command::ReportDensityMatch {
            sensors,
            distances,
            csv,
        } => {
            let configs = sensors
                .iter()
                .map(|s| resolve_sensor("--sensors", s))
                .collect::<CliResult<Vec<_>>>()?;
            let table = density_match(&configs, &distances).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(p) = &csv {
                write_text(p, &table.to_csv())?;
            }
            emit(out, &table.to_text())
        }
        Command::ReportFeatureSimilarity {
            model,
            sensors,
            data,
            csv,
        } => {
            let model = Model::load(&model)?;
            let a = resolve_sensor("--sensors", &sensors[0])?;
            let b = resolve_sensor("--sensors", &sensors[1])?;
            let clouds_a = io::read_labeled_dir(&data.join(&a.name))?;
            let clouds_b = io::read_labeled_dir(&data.join(&b.name))?;
            let fs = feature_similarity(&model, &a, &clouds_a, &b, &clouds_b)?;
            if let Some(p) = &csv {
                write_text(p, &fs.to_csv())?;
            }
            emit(out, &fs.to_text())
        }
    }
}
