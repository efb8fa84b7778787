//! The `tempgan` command-line tool: dataset synthesis, training, sampling,
//! evaluation, segmentation, and montage export.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness
//! is controlled by `--seed`; `TEMPGAN_DETERMINISTIC=1` additionally forces
//! single-threaded execution.

mod montage;

pub use montage::export_montage;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::latent::{evenly_spaced_alphas, shift_latent, LatentCode};
use crate::rng::Rng;
use crate::synth::{write_dataset, SynthConfig, SynthKind};
use crate::volume_io::{read_volume, scan_manifests, write_volume, DatasetSplit, Dims, Volume};

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split('x').collect();
    let parse = |p: &str| p.parse::<usize>().map_err(|_| format!("bad dim {p:?}"));
    match parts.as_slice() {
        [n] => Ok(Dims::cubic(parse(n)?)),
        [x, y, z] => Ok(Dims::new(parse(x)?, parse(y)?, parse(z)?)),
        _ => Err(format!("expected N or NxNxN, got {s:?}")),
    }
}

#[derive(Parser)]
#[command(
    name = "tempgan",
    version,
    about = "Volumetric GAN with a trained temporal direction in its latent space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth transformations.
    SynthData {
        /// shift | motion | regression
        #[arg(long)]
        kind: SynthKind,
        /// Volume dims, N (cubic) or XxYxZ.
        #[arg(long, value_parser = parse_dims, default_value = "32")]
        dims: Dims,
        #[arg(long)]
        patients: usize,
        /// Time steps per sequence (>= 3).
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Kind-specific magnitude range; defaults depend on kind and dims.
        #[arg(long, allow_hyphen_values = true)]
        mag_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        mag_max: Option<f64>,
        /// Regression only: fraction of patients without a tumor.
        #[arg(long, default_value_t = 0.2)]
        tumor_free_fraction: f64,
        /// Also write regression tumor masks as step_NNN.mask.tvol.
        #[arg(long, default_value_t = false)]
        write_masks: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per a config file (key = value lines).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one latent walk and export volumes plus a montage.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
        alpha_min: f64,
        #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
        alpha_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slice-wise Fréchet distance between real and generated volumes.
    Fid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Number of generated volumes (fresh z, one random alpha each).
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Which patient-split side supplies the real sample:
        /// test | train | all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 9)]
        split_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output TSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean foreground centroid per shift magnitude.
    Centroid {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        draws: usize,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
        alpha_min: f64,
        #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
        alpha_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unsupervised change segmentation between two volumes.
    Segment {
        /// First volume (.tvol); alternative to --ckpt.
        #[arg(long, conflicts_with = "ckpt", requires = "volume_b")]
        volume_a: Option<PathBuf>,
        /// Second volume (.tvol).
        #[arg(long, requires = "volume_a")]
        volume_b: Option<PathBuf>,
        /// Generate the pair from a checkpoint instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        alpha_a: f64,
        #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
        alpha_b: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ground-truth changed-region mask (.tvol) for a Dice report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Output mask path (.tvol, 0/1 voxels).
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a montage PGM from .tvol files.
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Volumes in time order.
        #[arg(required = true)]
        volumes: Vec<PathBuf>,
    },
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::SynthData {
            kind,
            dims,
            patients,
            steps,
            seed,
            mag_min,
            mag_max,
            tumor_free_fraction,
            write_masks,
            out,
        } => {
            let default_mag = SynthConfig::default_magnitude(kind, dims);
            let config = SynthConfig {
                kind,
                dims,
                num_patients: patients,
                steps_per_sequence: steps,
                magnitude_range: (
                    mag_min.unwrap_or(default_mag.0),
                    mag_max.unwrap_or(default_mag.1),
                ),
                seed,
                tumor_free_fraction,
            };
            let summary = write_dataset(&config, &out, write_masks)?;
            println!(
                "wrote {} volumes for {} patients to {}",
                summary.volumes_written,
                summary.patients,
                out.display()
            );
            Ok(())
        }
        Command::Train { config, resume } => {
            let cfg = crate::training::load_config(&config)?;
            let state = match resume {
                Some(ckpt) => crate::training::resume(&cfg, &ckpt)?,
                None => crate::training::train(&cfg)?,
            };
            println!(
                "trained to iteration {} ({} -> {})",
                state.iteration,
                cfg.dataset.display(),
                cfg.out_dir.display()
            );
            Ok(())
        }
        Command::Sample {
            ckpt,
            steps,
            alpha_min,
            alpha_max,
            seed,
            out,
        } => {
            let mut model = crate::training::load_generator_for_eval(&ckpt)?;
            let mut rng = Rng::new(seed);
            let z = LatentCode::<f32>::sample(&mut rng, model.net_config.latent_size);
            let alphas = evenly_spaced_alphas(steps, alpha_min, alpha_max);
            let codes: Result<Vec<_>, _> = alphas
                .alphas()
                .iter()
                .map(|&a| shift_latent(&z, &model.direction, a))
                .collect();
            let volumes = crate::evaluation::generate_batch(&mut model.generator, &codes?)?;
            std::fs::create_dir_all(&out)?;
            for (i, v) in volumes.iter().enumerate() {
                write_volume(v, &out.join(format!("step_{i:03}.tvol")))?;
            }
            export_montage(&volumes, &out.join("montage.pgm"))?;
            println!(
                "wrote {} volumes and montage.pgm to {}",
                volumes.len(),
                out.display()
            );
            Ok(())
        }
        Command::Fid {
            ckpt,
            dataset,
            count,
            split,
            test_fraction,
            split_seed,
            seed,
            out,
        } => {
            let mut model = crate::training::load_generator_for_eval(&ckpt)?;
            let manifests = scan_manifests(&dataset)?;
            let picked = match split.as_str() {
                "all" => manifests,
                "test" | "train" => {
                    let s = DatasetSplit::by_patient(manifests, test_fraction, split_seed);
                    if split == "test" {
                        s.test_manifests
                    } else {
                        s.train_manifests
                    }
                }
                other => return Err(format!("bad --split {other:?} (test|train|all)").into()),
            };
            if picked.is_empty() {
                return Err("selected split holds no patients".into());
            }
            let mut real = Vec::new();
            for m in &picked {
                real.extend(m.load_volumes()?);
            }
            let mut rng = Rng::new(seed);
            let generated = crate::evaluation::sample_random_step_volumes(
                &mut model.generator,
                &model.direction,
                count,
                &mut rng,
            )?;
            let extractor = crate::evaluation::SliceFeatureExtractor::new();
            let report = crate::evaluation::fid_report(&real, &generated, &extractor)?;
            let mut text = String::from("# axis\tscore\tn_real_slices\tn_fake_slices\n");
            for row in &report.rows {
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    row.axis.name(),
                    row.score,
                    row.n_real_slices,
                    row.n_fake_slices
                ));
            }
            emit(out, &text)
        }
        Command::Centroid {
            ckpt,
            draws,
            steps,
            alpha_min,
            alpha_max,
            seed,
            out,
        } => {
            let mut model = crate::training::load_generator_for_eval(&ckpt)?;
            let mut rng = Rng::new(seed);
            let zs: Vec<LatentCode<f32>> = (0..draws)
                .map(|_| LatentCode::sample(&mut rng, model.net_config.latent_size))
                .collect();
            let alphas = evenly_spaced_alphas(steps, alpha_min, alpha_max);
            let rows = crate::evaluation::centroid_shift_curve(
                &mut model.generator,
                &model.direction,
                &zs,
                &alphas,
            )?;
            let mut text = String::from("# alpha\tcentroid_x\tcentroid_y\tcentroid_z\tmissing\tdraws\n");
            for row in &rows {
                let c = row.mean.unwrap_or([f64::NAN; 3]);
                text.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    row.alpha, c[0], c[1], c[2], row.missing, row.draws
                ));
            }
            emit(out, &text)
        }
        Command::Segment {
            volume_a,
            volume_b,
            ckpt,
            alpha_a,
            alpha_b,
            seed,
            truth,
            out,
        } => {
            let (a, b): (Volume, Volume) = match (volume_a, ckpt) {
                (Some(pa), None) => {
                    let pb = volume_b.expect("clap enforces volume_b");
                    (read_volume(&pa)?, read_volume(&pb)?)
                }
                (None, Some(ckpt)) => {
                    let mut model = crate::training::load_generator_for_eval(&ckpt)?;
                    let mut rng = Rng::new(seed);
                    let z = LatentCode::<f32>::sample(&mut rng, model.net_config.latent_size);
                    let ca = shift_latent(&z, &model.direction, alpha_a)?;
                    let cb = shift_latent(&z, &model.direction, alpha_b)?;
                    let mut vols =
                        crate::evaluation::generate_batch(&mut model.generator, &[ca, cb])?;
                    let b = vols.pop().expect("two volumes");
                    let a = vols.pop().expect("two volumes");
                    (a, b)
                }
                _ => {
                    return Err("provide either --volume-a/--volume-b or --ckpt".into());
                }
            };
            let mask = crate::segmentation::segment_change(&a, &b)?;
            write_volume(&mask.to_volume(), &out)?;
            println!(
                "changed voxels: {} of {} -> {}",
                mask.count(),
                mask.dims.count(),
                out.display()
            );
            if let Some(truth_path) = truth {
                let truth_mask =
                    crate::segmentation::BinaryMask::from_volume(&read_volume(&truth_path)?);
                let d = crate::segmentation::dice(&mask, &truth_mask);
                println!("dice: {d}");
            }
            Ok(())
        }
        Command::Export { out, volumes } => {
            let vols: Result<Vec<Volume>, _> =
                volumes.iter().map(|p| read_volume(p)).collect();
            export_montage(&vols?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn emit(out: Option<PathBuf>, text: &str) -> CliResult {
    match out {
        Some(path) => {
            std::fs::write(&path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

impl clap::builder::ValueParserFactory for SynthKind {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<SynthKind>())
    }
}
