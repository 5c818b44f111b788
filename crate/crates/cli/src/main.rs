//! `gvae`: train, encode, decode, and evaluate continuously variable-rate
//! learned image codecs.
//!
//! Exit codes: 0 success, 1 other errors, 2 usage, 3 bad image, 4 bad
//! checkpoint, 5 rate knob out of range, 6 bad or mismatched bitstream,
//! 7 training failure, 8 selftest failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gvae::coder::Bitstream;
use gvae::eval::{q_grid, rd_sweep, to_csv, to_json, SweepOptions};
use gvae::gain::RateSelector;
use gvae::image::Image;
use gvae::model::{CodecConfig, Model, Overhead, Variant};
use gvae::quant::{Quantizer, QuantizerMode};
use gvae::selftest::{self, Fault};
use gvae::training::{load_image_dir, train, TrainConfig, TrainError, TrainLog};
use gvae::Error;

#[derive(Parser, Debug)]
#[command(name = "gvae", version, about = "Continuously variable-rate learned image codec")]
struct Cli {
    /// Seed for training, dithering, and selftest randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QuantArg {
    Round,
    Universal,
}

impl From<QuantArg> for QuantizerMode {
    fn from(q: QuantArg) -> Self {
        match q {
            QuantArg::Round => QuantizerMode::Round,
            QuantArg::Universal => QuantizerMode::Universal,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Cvr,
    Hcvr,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    CorruptTable,
}

#[derive(clap::Args, Debug)]
struct RateArgs {
    /// Global rate knob in [0, n-1]; larger q means lower rate.
    #[arg(long, conflicts_with_all = ["s", "l"])]
    q: Option<f64>,
    /// Gain-vector index (with --l).
    #[arg(long)]
    s: Option<usize>,
    /// Interpolation coefficient towards vector s+1.
    #[arg(long, requires = "s")]
    l: Option<f64>,
    /// Allow rates outside the trained range.
    #[arg(long)]
    extrapolate: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint plus CSV logs.
    Train {
        /// TOML training configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; logs go next to it as <out>.steps.csv and <out>.eval.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        /// Directory of training images (PPM, or PNG with the png feature).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Compress an image into a bitstream.
    Encode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        rate: RateArgs,
        #[arg(long, value_enum, default_value = "round")]
        quantizer: QuantArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from a bitstream.
    Decode {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode and decode images over a grid of q and report RD points.
    RdSweep {
        /// Image files or directories.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Spacing of the q grid.
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, value_enum, default_value = "round")]
        quantizer: QuantArg,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameters and FLOPs added by the gain units.
    Overhead {
        /// Read the architecture and measured base counts from a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cvr")]
        variant: VariantArg,
        #[arg(long, default_value_t = 192)]
        channels: usize,
        #[arg(long, default_value_t = 6)]
        vectors: usize,
        #[arg(long, default_value_t = 128)]
        hyper_channels: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Base-model parameter count for percentages.
        #[arg(long)]
        base_params: Option<usize>,
        /// Base-model FLOPs for percentages.
        #[arg(long)]
        base_flops: Option<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run the embedded invariant suite.
    Selftest {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, e: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: e.to_string(),
    }
}

fn bad_image(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| fail(3, format!("{}: {e}", path.display()))
}

fn load_model(path: &Path) -> CliResult<Model> {
    Model::load(path).map_err(|e| fail(4, format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| fail(1, format!("{}: {e}", path.display())))
}

fn selector(rate: &RateArgs, vectors: usize) -> CliResult<RateSelector> {
    let out_of_range = |e: Error| fail(5, e);
    match (rate.q, rate.s) {
        (Some(q), _) => RateSelector::from_q(q, vectors, rate.extrapolate).map_err(out_of_range),
        (None, Some(s)) => {
            let l = rate.l.unwrap_or(0.0);
            let sel = RateSelector::new(s, l, rate.extrapolate).map_err(out_of_range)?;
            let top = vectors - 1;
            if vectors == 1 && s == 0 && l == 0.0 {
                Ok(sel)
            } else if s < top {
                Ok(sel)
            } else if s == top && l == 0.0 {
                // The last stored vector is the right end of the last interval.
                Ok(RateSelector { s: top - 1, l: 1.0 })
            } else if rate.extrapolate {
                RateSelector::from_q(s as f64 + l, vectors, true).map_err(out_of_range)
            } else {
                Err(fail(5, format!("s={s}, l={l} is outside the {vectors} trained rates")))
            }
        }
        (None, None) => Err(fail(2, "give --q or --s/--l")),
    }
}

fn collect_images(paths: &[PathBuf]) -> CliResult<Vec<Image>> {
    let mut images = Vec::new();
    for p in paths {
        if p.is_dir() {
            images.extend(load_image_dir(p).map_err(bad_image(p))?);
        } else {
            images.push(Image::load(p).map_err(bad_image(p))?);
        }
    }
    if images.is_empty() {
        return Err(fail(3, "no images found"));
    }
    Ok(images)
}

fn write_logs(out: &Path, log: &TrainLog) -> CliResult<()> {
    let with = |suffix: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    write(&with(".steps.csv"), log.steps_csv().as_bytes())?;
    write(&with(".eval.csv"), log.evals_csv().as_bytes())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            epochs,
            steps_per_epoch,
            dataset,
            variant,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p).map_err(|e| fail(7, format!("{}: {e}", p.display())))?,
                None => TrainConfig::default(),
            };
            cfg.seed = cli.seed;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.steps_per_epoch = steps_per_epoch.unwrap_or(cfg.steps_per_epoch);
            cfg.dataset = dataset.or(cfg.dataset);
            if let Some(v) = variant {
                cfg.variant = match v {
                    VariantArg::Cvr => Variant::Cvr,
                    VariantArg::Hcvr => Variant::Hcvr,
                };
            }
            cfg.validate().map_err(|e| fail(7, e))?;
            match train(&cfg, None) {
                Ok(t) => {
                    t.model.save(&out).map_err(|e| fail(1, e))?;
                    write_logs(&out, &t.log)?;
                    for r in t.log.final_eval() {
                        println!("s={} bpp={:.4} mse={:.3}", r.s, r.bpp, r.distortion);
                    }
                    Ok(())
                }
                Err(TrainError::Diverged { step, model, log }) => {
                    model.save(&out).map_err(|e| fail(1, e))?;
                    write_logs(&out, &log)?;
                    Err(fail(
                        7,
                        format!("loss became non-finite at step {step}; last good checkpoint written to {}", out.display()),
                    ))
                }
                Err(TrainError::Setup(e)) => Err(fail(7, e)),
            }
        }
        Command::Encode {
            input,
            checkpoint,
            rate,
            quantizer,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let image = Image::load(&input).map_err(bad_image(&input))?;
            let sel = selector(&rate, model.vectors())?;
            let enc = model
                .encode_image(&image, sel, Quantizer::new(quantizer.into(), cli.seed))
                .map_err(|e| fail(5, e))?;
            let bytes = enc.bitstream.pack().map_err(|e| fail(1, e))?;
            write(&out, &bytes)?;
            let h = &enc.bitstream.header;
            println!("bpp={:.6} s={} l={} bytes={}", enc.bpp, h.selector.s, h.selector.l, bytes.len());
            Ok(())
        }
        Command::Decode { input, checkpoint, out } => {
            let model = load_model(&checkpoint)?;
            let bytes = std::fs::read(&input).map_err(|e| fail(6, format!("{}: {e}", input.display())))?;
            let stream = Bitstream::unpack(&bytes).map_err(|e| fail(6, e))?;
            let dec = model.decode(&stream).map_err(|e| fail(6, e))?;
            dec.image.save(&out).map_err(|e| fail(1, e))?;
            Ok(())
        }
        Command::RdSweep {
            images,
            checkpoint,
            step,
            quantizer,
            jobs,
            format,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let images = collect_images(&images)?;
            let qs = q_grid(model.vectors(), step).map_err(|e| fail(5, e))?;
            let opts = SweepOptions {
                quantizer: Quantizer::new(quantizer.into(), cli.seed),
                jobs: jobs.max(1),
                extrapolate: false,
            };
            let points = rd_sweep(&model, &images, &qs, opts).map_err(|e| fail(1, e))?;
            let text = match format {
                Format::Csv => to_csv(&points),
                Format::Json => to_json(&points) + "\n",
            };
            match out {
                Some(p) => write(&p, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Overhead {
            checkpoint,
            variant,
            channels,
            vectors,
            hyper_channels,
            height,
            width,
            base_params,
            base_flops,
            format,
        } => {
            let (config, measured) = match &checkpoint {
                Some(p) => {
                    let m = load_model(p)?;
                    let counts = (m.base_param_count(), m.base_flops(height, width));
                    (m.config().clone(), Some(counts))
                }
                None => {
                    let v = match variant {
                        VariantArg::Cvr => Variant::Cvr,
                        VariantArg::Hcvr => Variant::Hcvr,
                    };
                    let lagrange = (0..vectors.max(1)).map(|i| 1.0 / (i + 1) as f64).collect();
                    let cfg = CodecConfig {
                        channels,
                        hyper_channels,
                        lagrange,
                        ..CodecConfig::toy(v)
                    };
                    (cfg, None)
                }
            };
            let o = Overhead::of(
                &config,
                height,
                width,
                base_params.or(measured.map(|m| m.0)),
                base_flops.or(measured.map(|m| m.1)),
            );
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&o).expect("serializable")),
                Format::Csv => {
                    let pct = |v: Option<f64>| v.map(|p| format!("{p}")).unwrap_or_default();
                    println!("params,flops,params_percent,flops_percent");
                    println!("{},{},{},{}", o.params, o.flops, pct(o.params_percent), pct(o.flops_percent));
                }
            }
            Ok(())
        }
        Command::Selftest { inject_fault } => {
            let fault = inject_fault.map(|FaultArg::CorruptTable| Fault::CorruptTable);
            let report = selftest::run(cli.seed, fault);
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|c| c.name).collect();
                Err(fail(8, format!("failed checks: {}", names.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GVAE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
