use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ctmr_core::config::Settings;
use ctmr_core::metrics::{EmbeddingExtractor, EvalOptions};
use ctmr_core::networks::{Direction, Discriminator, Generator};
use ctmr_core::phantom::{self, PhantomSpec};
use ctmr_core::pipeline::UnpairedLoader;
use ctmr_core::report::{self, GridSpec};
use ctmr_core::trainer::{self, Checkpoint};
use ctmr_core::volume::{self, Modality, VolumeRecord};
use ctmr_core::Error;

/// Unpaired CT/MR translation: data, training and evaluation.
#[derive(Parser)]
#[command(name = "ctmr", version)]
struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the network architecture for the active settings and exit.
    #[arg(long)]
    dump_arch: bool,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset.
    Phantom {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        structures: usize,
    },
    /// Write one epoch of preprocessed training samples as PNGs.
    Preprocess {
        #[command(flatten)]
        data: DataDirs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
    /// Train both generator/discriminator pairs.
    Train {
        #[command(flatten)]
        data: DataDirs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate one volume with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// ct2mr or mr2ct
        #[arg(long)]
        direction: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare models on held-out volumes.
    Evaluate {
        /// NAME=CHECKPOINT, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[command(flatten)]
        data: DataDirs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fixed_random_projection")]
        extractor: String,
        #[arg(long, default_value_t = ctmr_core::metrics::DEFAULT_MI_BINS)]
        bins: usize,
    },
    /// Real / translated / recovered image grid.
    Grid {
        /// NAME=CHECKPOINT, repeatable; each adds two columns.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Directory of source-modality volumes.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "ct2mr")]
        direction: String,
        #[arg(long, default_value_t = 3)]
        rows: usize,
        #[arg(long, default_value_t = 256)]
        cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot loss logs and write their aligned values.
    Plot {
        /// NAME=LOSSES_CSV, repeatable.
        #[arg(long = "log", required = true)]
        logs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataDirs {
    #[arg(long)]
    ct: PathBuf,
    #[arg(long)]
    mr: PathBuf,
}

fn settings(cli: &Cli) -> ctmr_core::Result<Settings> {
    let s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let s = match cli.seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    };
    s.validate()?;
    Ok(s)
}

/// Settings for using a checkpoint: the config file when given, else the checkpoint's own.
fn settings_for(cli: &Cli, ckpt: &Checkpoint) -> ctmr_core::Result<Settings> {
    if cli.config.is_some() {
        let s = settings(cli)?;
        trainer::check_compatible(&ckpt.settings, &s)?;
        Ok(s)
    } else {
        Ok(ckpt.settings.clone())
    }
}

fn named(items: &[String]) -> ctmr_core::Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
            _ => Err(Error::Validation(format!("expected NAME=PATH, got {s:?}"))),
        })
        .collect()
}

fn load_dir(dir: &Path, modality: Modality) -> ctmr_core::Result<Vec<VolumeRecord>> {
    let paths = volume::list_volumes(dir)?;
    if paths.is_empty() {
        return Err(Error::Validation(format!("{} contains no volume files", dir.display())));
    }
    paths.iter().map(|p| volume::load_volume(p, modality)).collect()
}

fn dump_arch(s: &Settings) {
    let size = s.preprocess.crop_dim;
    let g = Generator::build(s.generator, 0).expect("validated");
    let d = Discriminator::build(s.discriminator, 0).expect("validated");
    for (title, layers, total) in [
        ("generator", g.summary(size, size), g.num_params()),
        ("discriminator", d.summary(size, size), d.num_params()),
    ] {
        println!("{title} ({size}x{size} input)");
        println!("{:<14} {:<34} {:>16} {:>12}", "layer", "kind", "output", "params");
        for l in layers {
            let shape = format!("{}x{}x{}", l.out_shape[0], l.out_shape[1], l.out_shape[2]);
            println!("{:<14} {:<34} {:>16} {:>12}", l.name, l.kind, shape, l.params);
        }
        println!("{:<14} {:<34} {:>16} {:>12}\n", "total", "", "", total);
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.dump_arch {
        dump_arch(&settings(cli)?);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Validation("no subcommand given (see --help)".into()).into());
    };
    match command {
        Command::Phantom {
            n,
            out,
            noise,
            size,
            structures,
        } => {
            let mut spec = PhantomSpec {
                image_size: *size,
                n_structures: *structures,
                seed: cli.seed.unwrap_or(0),
                ..PhantomSpec::default()
            };
            if let Some(s) = noise {
                spec.noise_sigma = *s;
            }
            let entries = phantom::export_phantom_dataset(&spec, *n, out)?;
            log::info!("wrote {} phantom pairs to {}", entries.len(), out.display());
        }
        Command::Preprocess { data, out, epoch } => {
            let s = settings(cli)?;
            let loader = UnpairedLoader::from_dirs(&data.ct, &data.mr, s.preprocess.clone())?;
            let mut rows = vec!["position,modality,source_id,slice_index,flip,angle_deg,crop_row,crop_col,file".to_string()];
            for m in ["ct", "mr"] {
                let d = out.join(m);
                std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
            }
            for (pos, pair) in loader.epoch(*epoch).enumerate() {
                let (ct, mr) = pair?;
                for sample in [ct, mr] {
                    let tag = sample.modality.tag().to_lowercase();
                    let file = format!("{tag}/{pos:05}_{}_{}.png", sample.source_id, sample.slice_index);
                    let (h, w) = sample.pixels.dim();
                    let px: Vec<u8> = sample.pixels.iter().map(|v| (((v + 1.0) * 0.5) * 255.0).round() as u8).collect();
                    let img = image::GrayImage::from_raw(w as u32, h as u32, px).expect("sizes match");
                    report::write_png_gray(&img, &out.join(&file))?;
                    rows.push(format!(
                        "{pos},{},{},{},{},{},{},{},{file}",
                        sample.modality,
                        sample.source_id,
                        sample.slice_index,
                        sample.augmentation.flip,
                        sample.augmentation.angle_deg,
                        sample.crop_offset.0,
                        sample.crop_offset.1
                    ));
                }
            }
            let index = out.join("samples.csv");
            std::fs::write(&index, rows.join("\n") + "\n").with_context(|| format!("writing {}", index.display()))?;
            log::info!("wrote {} samples to {}", rows.len() - 1, out.display());
        }
        Command::Train { data, out, resume } => {
            let s = settings(cli)?;
            let resume = resume.as_deref().map(trainer::load_checkpoint).transpose()?;
            let loader = UnpairedLoader::from_dirs(&data.ct, &data.mr, s.preprocess.clone())?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let cfg_path = out.join("config.toml");
            std::fs::write(&cfg_path, s.to_toml()).with_context(|| format!("writing {}", cfg_path.display()))?;
            let outcome = trainer::fit(&s, &loader, out, resume)?;
            log::info!(
                "finished at step {}; checkpoint {}",
                outcome.checkpoint.state.step,
                out.join(trainer::FINAL_CHECKPOINT).display()
            );
        }
        Command::Translate {
            checkpoint,
            input,
            direction,
            out,
        } => {
            let direction = Direction::parse(direction)?;
            let ckpt = trainer::load_checkpoint(checkpoint)?;
            let s = settings_for(cli, &ckpt)?;
            let v = match volume::load_volume(input, direction.source()) {
                Err(Error::Validation(msg)) if msg.contains("expected") => {
                    log::warn!("{msg}; translating anyway");
                    volume::load_volume(input, direction.target())?
                }
                other => other?,
            };
            let translated = report::translate_volume(&ckpt.state.bundle, &v, direction, &s.preprocess)?;
            volume::save_volume(&translated, out)?;
            let sidecar = report::write_provenance(out, checkpoint, direction, input)?;
            log::info!("wrote {} and {}", out.display(), sidecar.display());
        }
        Command::Evaluate {
            models,
            data,
            out,
            extractor,
            bins,
        } => {
            let models = named(models)?;
            let first = trainer::load_checkpoint(&models[0].1)
                .with_context(|| format!("loading model {}", models[0].0))?;
            let s = settings_for(cli, &first)?;
            let ex = EmbeddingExtractor::by_name(extractor, s.train.seed)?;
            let opts = EvalOptions {
                mi_bins: *bins,
                fid_pair_seed: s.train.seed,
                ssim_constants: s.ssim_constants,
            };
            let ct = load_dir(&data.ct, Modality::Ct)?;
            let mr = load_dir(&data.mr, Modality::Mr)?;
            let (rows, failures) = report::evaluate_checkpoints(&models, &ct, &mr, &s.preprocess, &ex, &opts)?;
            if !rows.is_empty() {
                let files = report::write_report(&rows, out)?;
                print!("{}", report::comparison_table(&rows));
                log::info!("wrote {}", files.metrics_csv.display());
            }
            if let Some((name, e)) = failures.into_iter().next() {
                return Err(anyhow::Error::new(e).context(format!("model {name} failed")));
            }
        }
        Command::Grid {
            models,
            input,
            direction,
            rows,
            cell,
            out,
        } => {
            let direction = Direction::parse(direction)?;
            let named = named(models)?;
            let mut bundles = Vec::new();
            let mut first_settings = None;
            for (i, (name, path)) in named.iter().enumerate() {
                let ckpt = trainer::load_checkpoint(path).with_context(|| {
                    format!("model {name} (grid columns {} and {}) could not be loaded", 2 * i + 2, 2 * i + 3)
                })?;
                first_settings.get_or_insert_with(|| ckpt.settings.clone());
                bundles.push((name.clone(), ckpt.state.bundle));
            }
            let s = match &cli.config {
                Some(_) => settings(cli)?,
                None => first_settings.expect("at least one model"),
            };
            let volumes = load_dir(input, direction.source())?;
            let slices = ctmr_core::metrics::eval_slices(&volumes, direction.source(), &s.preprocess)?;
            let picks: Vec<_> = report::uniform_selection(slices.len(), *rows)
                .into_iter()
                .map(|i| slices[i].clone())
                .collect();
            let spec = GridSpec::standard(picks.len(), bundles.len(), *cell);
            let img = report::render_grid(&spec, &bundles, &picks, direction)?;
            report::write_png_gray(&img, out)?;
            log::info!("wrote {}x{} grid to {}", img.width(), img.height(), out.display());
        }
        Command::Plot { logs, out } => {
            let (csv, curves) = report::plot_losses(&named(logs)?, out)?;
            log::info!("plotted {} models to {} and {}", curves.len(), out.display(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .is_some_and(Error::is_validation);
            ExitCode::from(if validation { 2 } else { 3 })
        }
    }
}
