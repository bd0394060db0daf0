use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asymgan_core::backends::{Backend, BackendKind};
use asymgan_core::config::{digest_lines, Config};
use asymgan_core::data::{load_domain_folder, load_image, preprocess_with, save_png, Augment, Domain, Split};
use asymgan_core::generator::REFERENCE_TOTAL_PARAMETERS;
use asymgan_core::metrics::{evaluate_folder, Pairing};
use asymgan_core::nn::Module;
use asymgan_core::trainer::{
    load_checkpoint, read_checkpoint_manifest, sweep_configs, train, LoadOptions, TrainOptions,
    TrainState,
};
use asymgan_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "asymgan", version, about = "Asymmetric unpaired image-to-image translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    /// X→Y with the dense-fusion generator.
    X2y,
    /// Y→X with the residual generator.
    Y2x,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; dotted `--section.key=value` overrides win.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint with a different config digest or version.
        #[arg(long)]
        allow_mismatch: bool,
        /// Replace every perceptual backend with its built-in stub.
        #[arg(long)]
        stub_backends: bool,
    },
    /// Translate every image of a folder with a trained generator.
    Translate {
        checkpoint: PathBuf,
        input_dir: PathBuf,
        output_dir: PathBuf,
        #[arg(long, value_enum)]
        direction: Direction,
        /// Config the checkpoint must have been trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// FID, KID, PSNR and SSIM between two folders.
    Evaluate {
        generated_dir: PathBuf,
        reference_dir: PathBuf,
        /// Pair generated images with these sources instead of the references.
        #[arg(long)]
        sources: Option<PathBuf>,
        #[arg(long, default_value = "vgg16_relu3_3")]
        feature_backend: String,
        #[arg(long)]
        feature_weights: Option<PathBuf>,
        /// Report directory (default: `metrics` inside the generated folder).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One training run per value of a config key.
    Sweep {
        config: PathBuf,
        key: String,
        #[arg(required = true, num_args = 1..)]
        values: Vec<String>,
        #[arg(long)]
        stub_backends: bool,
    },
    /// Parameter counts, topology and manifest of a checkpoint or config.
    Inspect {
        checkpoint: Option<PathBuf>,
        /// Inspect the networks a config would build (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli, overrides: Vec<String>) -> Result<()> {
    let takes_overrides = matches!(cli.command, Command::Train { .. } | Command::Sweep { .. });
    if !overrides.is_empty() && !takes_overrides {
        return Err(Error::Config {
            location: "command line".into(),
            key: overrides[0].clone(),
            msg: "overrides are only accepted by train and sweep".into(),
        });
    }
    match cli.command {
        Command::Train {
            config,
            resume,
            allow_mismatch,
            stub_backends,
        } => cmd_train(&config, &overrides, resume, allow_mismatch, stub_backends),
        Command::Translate {
            checkpoint,
            input_dir,
            output_dir,
            direction,
            config,
            allow_mismatch,
        } => cmd_translate(
            &checkpoint,
            &input_dir,
            &output_dir,
            direction,
            config.as_deref(),
            allow_mismatch,
        ),
        Command::Evaluate {
            generated_dir,
            reference_dir,
            sources,
            feature_backend,
            feature_weights,
            out,
        } => cmd_evaluate(
            &generated_dir,
            &reference_dir,
            sources,
            &feature_backend,
            feature_weights.as_deref(),
            out,
        ),
        Command::Sweep {
            config,
            key,
            values,
            stub_backends,
        } => cmd_sweep(&config, &overrides, &key, &values, stub_backends),
        Command::Inspect {
            checkpoint,
            config,
            out,
        } => cmd_inspect(checkpoint.as_deref(), config.as_deref(), out),
    }
}

fn resolve_config(path: &Path, overrides: &[String], stub_backends: bool) -> Result<Config> {
    let cfg = Config::load(path, overrides)?;
    Ok(if stub_backends {
        cfg.with_stub_backends()
    } else {
        cfg
    })
}

fn cmd_train(
    config: &Path,
    overrides: &[String],
    resume: Option<PathBuf>,
    allow_mismatch: bool,
    stub_backends: bool,
) -> Result<()> {
    let cfg = resolve_config(config, overrides, stub_backends)?;
    let summary = train(
        &cfg,
        &TrainOptions {
            resume,
            load: LoadOptions { allow_mismatch },
        },
    )?;
    RunManifest::new("train", cfg.digest()).write(&summary.run_dir)?;
    println!(
        "trained {} epochs; run directory {}",
        summary.epochs_completed,
        summary.run_dir.display()
    );
    Ok(())
}

fn cmd_translate(
    checkpoint: &Path,
    input_dir: &Path,
    output_dir: &Path,
    direction: Direction,
    config: Option<&Path>,
    allow_mismatch: bool,
) -> Result<()> {
    let expected = config.map(|p| Config::load(p, &[])).transpose()?;
    let ck = load_checkpoint(checkpoint, expected.as_ref(), LoadOptions { allow_mismatch })?;
    let (net, domain) = match direction {
        Direction::X2y => (&ck.state.g, Domain::X),
        Direction::Y2x => (&ck.state.f, Domain::Y),
    };
    let inputs = load_domain_folder(input_dir, domain, Split::Test)?;
    let pre = &ck.config.data.preprocess;
    let center = Augment::center(pre);
    fs::create_dir_all(output_dir)?;
    for path in &inputs.image_paths {
        let x = preprocess_with(&load_image(path)?, pre, center)?;
        let y = net.generate(&x)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        save_png(&y.sample(0), &output_dir.join(format!("{stem}.png")))?;
    }
    let dir_name = match direction {
        Direction::X2y => "x2y",
        Direction::Y2x => "y2x",
    };
    let digest = digest_lines(&[
        ("checkpoint_config".into(), ck.manifest.config_digest.clone()),
        ("checkpoint_epoch".into(), ck.manifest.epoch.to_string()),
        ("direction".into(), dir_name.into()),
    ]);
    RunManifest::new("translate", digest).write(output_dir)?;
    println!("translated {} images into {}", inputs.len(), output_dir.display());
    Ok(())
}

fn cmd_evaluate(
    generated: &Path,
    reference: &Path,
    sources: Option<PathBuf>,
    backend: &str,
    weights: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let kind: BackendKind = backend.parse().map_err(|msg| Error::Config {
        location: "command line".into(),
        key: "--feature-backend".into(),
        msg,
    })?;
    for dir in [Some(generated), Some(reference), sources.as_deref()].into_iter().flatten() {
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!("folder {} does not exist", dir.display())));
        }
    }
    let backend = Backend::load(kind, weights)?;
    let pairing = match sources {
        Some(s) => Pairing::Unpaired { sources: s },
        None => Pairing::Paired,
    };
    let report = evaluate_folder(generated, reference, &backend, &pairing)?;
    let out = out.unwrap_or_else(|| generated.join("metrics"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("metrics.txt"), report.to_text())?;
    let digest = digest_lines(&[
        ("generated".into(), generated.display().to_string()),
        ("reference".into(), reference.display().to_string()),
        ("pairing".into(), pairing.name().into()),
        ("backend".into(), report.backend_id.clone()),
    ]);
    RunManifest::new("evaluate", digest).write(&out)?;
    print!("{report}");
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    overrides: &[String],
    key: &str,
    values: &[String],
    stub_backends: bool,
) -> Result<()> {
    let base = resolve_config(config, overrides, stub_backends)?;
    let runs = sweep_configs(&base, key, values)?;
    let mut table = String::from("key,value,run_dir,epochs,total,dual,feature,semantic,d_x,d_y\n");
    for (cfg, value) in runs.iter().zip(values) {
        log::info!("sweep {key}={value}");
        let s = train(cfg, &TrainOptions::default())?;
        RunManifest::new("train", cfg.digest()).write(&s.run_dir)?;
        let last = s.rows.last().map(|r| r.mean).unwrap_or_default();
        writeln!(
            table,
            "{key},{value},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            s.run_dir.display(),
            s.epochs_completed,
            last.total,
            last.dual,
            last.feature,
            last.semantic,
            last.d_x,
            last.d_y
        )
        .expect("writing to a String");
    }
    let dir = base.run_root.join(format!("{}_sweep", base.run_name));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("summary.csv"), &table)?;
    let mut entries = base.entries();
    entries.push(("sweep.key".into(), key.into()));
    entries.push(("sweep.values".into(), values.join(",")));
    RunManifest::new("sweep", digest_lines(&entries)).write(&dir)?;
    print!("{table}");
    Ok(())
}

fn fmt_millions(n: usize) -> String {
    format!("{:.2} M", n as f64 / 1e6)
}

fn cmd_inspect(checkpoint: Option<&Path>, config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let (state, cfg, manifest_text, default_out) = match checkpoint {
        Some(dir) => {
            read_checkpoint_manifest(dir)?;
            let ck = load_checkpoint(dir, None, LoadOptions::default())?;
            let text = serde_json::to_string_pretty(&serde_json::json!({
                "artifact_version": ck.manifest.artifact_version,
                "epoch": ck.manifest.epoch,
                "iteration": ck.manifest.iteration,
                "config_digest": ck.manifest.config_digest,
                "seed": ck.manifest.seed,
            }))?;
            (ck.state, ck.config, Some(text), dir.to_path_buf())
        }
        None => {
            let cfg = match config {
                Some(p) => Config::load(p, &[])?,
                None => Config::from_text("")?,
            };
            let out = cfg.run_root.join("inspect");
            (TrainState::new(&cfg)?, cfg, None, out)
        }
    };
    let nets: [(&str, &dyn Module, String); 4] = [
        ("G", &state.g, state.g.topology_id()),
        ("F", &state.f, state.f.topology_id()),
        ("D_X", &state.d_x, state.d_x.topology_id()),
        ("D_Y", &state.d_y, state.d_y.topology_id()),
    ];
    let mut total = 0;
    for (name, net, topo) in &nets {
        let n = net.parameter_count();
        total += n;
        println!("{name:<4} {n:>12}  ({})  {topo}", fmt_millions(n));
    }
    let reference = REFERENCE_TOTAL_PARAMETERS;
    println!(
        "total {total:>11}  ({})  reference {} ({:+.1}%)",
        fmt_millions(total),
        fmt_millions(reference),
        (total as f64 / reference as f64 - 1.0) * 100.0
    );
    if let Some(text) = manifest_text {
        println!("manifest {text}");
    }
    RunManifest::new("inspect", cfg.digest()).write(&out.unwrap_or(default_out))?;
    Ok(())
}
