//! Batch harness around the `umix` library: train and evaluate on
//! synthetic shape scenes, run the finite-difference gradient checks,
//! print the closed-form parameter/FLOP table, run the four-arm decoder
//! ablation, and dump generated datasets as portable pixmaps.
//!
//! Exit codes: 0 on success, 1 for configuration and usage problems,
//! 2 for numerical failures (non-finite parameters or a failed gradient
//! check).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use umix::ablate::{render_table, run_ablation};
use umix::analysis::count_model;
use umix::checkpoint::{model_from_checkpoint, Checkpoint};
use umix::data::{generate_dataset, DataSpec, SyntheticDataset};
use umix::eval::evaluate;
use umix::gradcheck;
use umix::model::ModelConfig;
use umix::train::{param_hash, train, LrSchedule, TrainOptions, TrainState};
use umix::{Error, Result};

#[derive(Parser)]
#[command(
    name = "umix",
    version,
    about = "Mix-attention U-shaped segmentation decoder: training, evaluation and analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a generated dataset; writes checkpoint.umix and metrics.txt.
    Train {
        /// Model configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Training seed: parameter init and epoch shuffling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        /// Seed for the generated dataset (independent of --seed).
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
        /// Dataset size; the last 20% becomes the validation split.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Pixel-noise sigma for the generated dataset.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Learning-rate schedule: "fixed" or "poly" (linear decay to zero).
        #[arg(long, default_value = "fixed")]
        schedule: String,
        /// Stop early once the monitored mIoU reaches this value.
        #[arg(long)]
        target_miou: Option<f64>,
        /// Resume from an existing checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a freshly generated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed for the evaluation dataset.
        #[arg(long, default_value_t = 1)]
        dataset_seed: u64,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Model configuration for the full-model group (its cost scales
        /// with parameter count — use a small one).
        #[arg(long)]
        config: PathBuf,
        /// Relative-error tolerance for the op and stage groups; the
        /// full-model group accepts 100x this.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Seed for parameters and probe tensors.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the closed-form parameter and FLOP table.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured input resolution, as HxW (e.g. 512x512).
        #[arg(long)]
        input: Option<String>,
    },
    /// Train all four attention/propagation arms under identical budgets.
    Ablate {
        /// Base configuration; each arm overrides only the decoder wiring.
        #[arg(long)]
        config: PathBuf,
        /// Training seeds, comma-separated; every arm runs each seed.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Generate a dataset and write it as PPM images + PGM label masks.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Pixel-noise sigma.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; everything else is a usage
            // problem and must exit 1 (2 is reserved for numerical errors).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            out,
            seed,
            epochs,
            lr,
            dataset_seed,
            samples,
            noise,
            schedule,
            target_miou,
            resume,
        } => cmd_train(
            &config,
            &out,
            seed,
            TrainOptions {
                epochs,
                lr,
                schedule: parse_schedule(&schedule)?,
                target_miou,
            },
            dataset_seed,
            samples,
            noise,
            resume.as_deref(),
        ),
        Cmd::Eval { checkpoint, dataset_seed, samples, noise } => {
            cmd_eval(&checkpoint, dataset_seed, samples, noise)
        }
        Cmd::Gradcheck { config, tol, seed } => cmd_gradcheck(&config, tol, seed),
        Cmd::Flops { config, input } => cmd_flops(&config, input.as_deref()),
        Cmd::Ablate { config, seeds, dataset_seed, samples, epochs, lr, noise } => {
            cmd_ablate(&config, &seeds, dataset_seed, samples, epochs, lr, noise)
        }
        Cmd::GenData { seed, n, size, classes, noise, out } => {
            let (img_h, img_w) = parse_size(&size)?;
            cmd_gen_data(&DataSpec { seed, n, img_h, img_w, num_classes: classes, noise }, &out)
        }
    }
}

/// Write to stdout, exiting quietly when the reader has gone away — piping
/// into `head` must not panic the process.
fn emit(text: impl std::fmt::Display) {
    use std::io::Write;
    let mut out = std::io::stdout();
    if write!(out, "{text}").and_then(|()| out.flush()).is_err() {
        std::process::exit(0);
    }
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config = ModelConfig::parse(&text)?;
    config.validate()?;
    Ok(config)
}

fn parse_schedule(s: &str) -> Result<LrSchedule> {
    match s {
        "fixed" => Ok(LrSchedule::Fixed),
        "poly" => Ok(LrSchedule::Poly),
        other => Err(Error::Usage(format!(
            "unknown schedule '{other}' (expected 'fixed' or 'poly')"
        ))),
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("size must be HxW (e.g. 64x64), got '{s}'"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn make_dataset(
    config: &ModelConfig,
    dataset_seed: u64,
    samples: usize,
    noise: f64,
) -> Result<SyntheticDataset> {
    generate_dataset(&DataSpec {
        seed: dataset_seed,
        n: samples,
        img_h: config.img_h,
        img_w: config.img_w,
        num_classes: config.num_classes,
        noise,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed: u64,
    options: TrainOptions,
    dataset_seed: u64,
    samples: usize,
    noise: f64,
    resume_from: Option<&Path>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let dataset = make_dataset(&config, dataset_seed, samples, noise)?;
    let outcome = match resume_from {
        None => train(&config, seed, &dataset, &options)?,
        Some(path) => {
            let state = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
            if state.model.config != config {
                return Err(Error::Usage(format!(
                    "checkpoint {} was trained under a different configuration",
                    path.display()
                )));
            }
            umix::train::resume(state, &dataset, &options)?
        }
    };
    fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.umix");
    outcome.state.to_checkpoint().save(&ckpt_path)?;
    let metrics = outcome.render_metrics(&dataset.spec, &options);
    fs::write(out.join("metrics.txt"), &metrics)?;
    emit(&metrics);
    emit(format_args!("checkpoint={}\n", ckpt_path.display()));
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset_seed: u64, samples: usize, noise: f64) -> Result<()> {
    let (model, _extra) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let dataset = make_dataset(&model.config, dataset_seed, samples, noise)?;
    let report = evaluate(&model, &dataset.spec, &dataset.samples)?;
    emit(format_args!("checkpoint={}\n", checkpoint.display()));
    emit(format_args!("params={}\n", model.num_params()));
    emit(format_args!("param_hash={:#018x}\n", param_hash(&model)));
    emit(format_args!("dataset_seed={dataset_seed} samples={samples} noise={noise}\n"));
    emit(report.render());
    Ok(())
}

fn cmd_gradcheck(config_path: &Path, tol: f64, seed: u64) -> Result<()> {
    let config = load_config(config_path)?;
    let groups = gradcheck::run(&config, seed, tol)?;
    for g in &groups {
        emit(g.render());
    }
    gradcheck::verdict(&groups)?;
    emit("gradcheck=ok\n");
    Ok(())
}

fn cmd_flops(config_path: &Path, input: Option<&str>) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(size) = input {
        let (h, w) = parse_size(size)?;
        config.img_h = h;
        config.img_w = w;
        config.validate()?;
    }
    emit(format_args!("input={}x{}\n", config.img_h, config.img_w));
    emit(count_model(&config)?.render());
    Ok(())
}

fn cmd_ablate(
    config_path: &Path,
    seeds: &[u64],
    dataset_seed: u64,
    samples: usize,
    epochs: usize,
    lr: f64,
    noise: f64,
) -> Result<()> {
    let config = load_config(config_path)?;
    let dataset = make_dataset(&config, dataset_seed, samples, noise)?;
    let options = TrainOptions::new(epochs, lr);
    emit(format_args!(
        "dataset_seed={dataset_seed} samples={samples} epochs={epochs} lr={lr} noise={noise} \
         seeds={seeds:?}\n"
    ));
    let results = run_ablation(&config, &dataset, seeds, &options)?;
    emit(render_table(&results));
    Ok(())
}

fn cmd_gen_data(spec: &DataSpec, out: &Path) -> Result<()> {
    if spec.num_classes > 256 {
        return Err(Error::Usage(format!(
            "at most 256 classes fit an 8-bit label mask, got {}",
            spec.num_classes
        )));
    }
    let dataset = generate_dataset(spec)?;
    fs::create_dir_all(out)?;
    let mut manifest = format!(
        "seed={} n={} size={}x{} classes={} noise={}\n",
        spec.seed, spec.n, spec.img_h, spec.img_w, spec.num_classes, spec.noise
    );
    for (i, sample) in dataset.samples.iter().enumerate() {
        let image_name = format!("image_{i:04}.ppm");
        let labels_name = format!("labels_{i:04}.pgm");
        write_ppm(&out.join(&image_name), spec.img_h, spec.img_w, sample.image.data())?;
        write_pgm(&out.join(&labels_name), spec.img_h, spec.img_w, &sample.labels)?;
        manifest.push_str(&format!("{i:04} {image_name} {labels_name}\n"));
    }
    let histogram = dataset
        .class_histogram()
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    manifest.push_str(&format!("class_histogram={histogram}\n"));
    fs::write(out.join("manifest.txt"), &manifest)?;
    emit(format_args!("wrote {} samples to {}\n", dataset.samples.len(), out.display()));
    Ok(())
}

/// 8-bit binary PPM (P6). Channel values are clamped to [0, 1] before
/// quantization; the underlying data keeps its unclamped noise.
fn write_ppm(path: &Path, h: usize, w: usize, rgb: &[f64]) -> Result<()> {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// 8-bit binary PGM (P5) of raw class ids.
fn write_pgm(path: &Path, h: usize, w: usize, labels: &[u32]) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(labels.iter().map(|&c| c as u8));
    fs::write(path, bytes)?;
    Ok(())
}
