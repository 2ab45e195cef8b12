use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ckn::aggregation::{DEFAULT_CODEBOOK_SIZE, DEFAULT_KMEANS_ITERATIONS};
use ckn::config::PipelineConfig;
use ckn::encoder::CknModel;
use ckn::pca::PcaMode;
use ckn::pipeline::{self, Sampling, Transform};
use ckn::synth::SyntheticBenchSpec;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ckn", version, about = "Convolutional kernel network patch descriptors and retrieval")]
struct Cli {
    /// Worker threads for encoding and evaluation (0 = all cores).
    #[arg(long, global = true, env = "CKN_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model layer by layer on a patch manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode patches, or local patches of whole images with --images.
    Encode(EncodeArgs),
    /// Fit a k-means vocabulary on descriptors.
    Vocab {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CODEBOOK_SIZE)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_KMEANS_ITERATIONS)]
        iterations: usize,
        /// Fit on a random subset of at most this many descriptors.
        #[arg(long)]
        max_samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate per-image descriptors into VLAD vectors.
    Vlad {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        counts: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit or apply a PCA projection.
    #[command(subcommand)]
    Pca(PcaCommand),
    /// Evaluate retrieval or descriptor robustness.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print brute-force reference checks as JSON.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Write a synthetic benchmark of jittered textured patches.
    Synth(SynthArgs),
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat manifest entries as whole images and sample local patches.
    #[arg(long)]
    images: bool,
    /// Per-image descriptor counts (default: <out>.counts).
    #[arg(long, requires = "images")]
    counts: Option<PathBuf>,
    #[arg(long, default_value_t = 16, requires = "images")]
    stride: usize,
    #[arg(long, value_delimiter = ',', default_value = "1", requires = "images")]
    scales: Vec<f64>,
    /// Directory of `<image stem>.kp` keypoint files used instead of the dense grid.
    #[arg(long, requires = "images")]
    keypoints: Option<PathBuf>,
    /// Reduce local descriptors with this PCA model before writing.
    #[arg(long, requires = "images")]
    pca: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PcaCommand {
    Fit {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        #[arg(long, default_value = "semi")]
        mode: PcaMode,
        /// Accepted for uniformity; the fit is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rescale every projected vector to unit norm.
        #[arg(long)]
        renormalize: bool,
    },
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// JSON-lines report with one object per query and a summary.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    Patches(RetrievalArgs),
    Images(RetrievalArgs),
    Ukb {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// CSV of mean descriptor distance against transformation magnitude.
    Robustness {
        #[arg(long)]
        model: PathBuf,
        /// Manifest of base images, such as the bases.tsv written by synth.
        #[arg(long)]
        bases: PathBuf,
        #[arg(long, default_value = "translation")]
        transform: Transform,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        magnitudes: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Monte Carlo estimate of the Gaussian kernel on random unit vectors.
    Mc {
        #[arg(long, default_value_t = 27)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact single-layer match kernel of two random maps, both orders.
    MatchKernel {
        #[arg(long, default_value_t = 6)]
        side: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        subpatch: usize,
        #[arg(long, default_value_t = 0.75)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// First model layer on random maps against the exact kernel.
    Encoder {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 6)]
        side: usize,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    bases: usize,
    #[arg(long, default_value_t = 10)]
    copies: usize,
    /// Pixels per axis.
    #[arg(long, default_value_t = 2.0)]
    max_shift: f64,
    /// Degrees.
    #[arg(long, default_value_t = 5.0)]
    max_rotation: f64,
    #[arg(long, default_value_t = 0.0)]
    max_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    max_brightness: f64,
    #[arg(long, default_value_t = 96)]
    base_side: usize,
    #[arg(long, default_value_t = 51)]
    patch_side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> ckn::Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| ckn::CknError::InvalidArgument(format!("--{name} is required (or set it in the config)")))
}

fn print_report(report: &ckn::eval::EvalReport) {
    println!("mAP={:.6}", report.map());
    if report.summary.skipped > 0 {
        eprintln!("warning: {} queries had no relevant items and were skipped", report.summary.skipped);
    }
}

fn run(cli: Cli) -> ckn::Result<()> {
    match cli.command {
        Command::Train {
            config,
            manifest,
            out,
            seed,
        } => {
            let mut cfg = match &config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.train_seed = seed;
                cfg.sgd.seed = seed;
            }
            let out = required(out, &cfg.model_path, "out")?;
            let reports = pipeline::train(&cfg, &manifest, &out)?;
            for (k, r) in reports.iter().enumerate() {
                match r {
                    Some(r) => println!(
                        "layer {}: validation {:.6} -> {:.6} (learning rate {}, {} backtracks)",
                        k + 1,
                        r.initial_validation,
                        r.final_validation,
                        r.learning_rate,
                        r.backtracks
                    ),
                    None => println!("layer {}: analytic", k + 1),
                }
            }
        }
        Command::Encode(a) => {
            if a.images {
                let counts = a.counts.unwrap_or_else(|| {
                    let mut p = a.out.clone().into_os_string();
                    p.push(".counts");
                    p.into()
                });
                let sampling = Sampling {
                    stride: a.stride,
                    scales: a.scales,
                    keypoints: a.keypoints,
                };
                let c = pipeline::encode_images(&a.model, &a.manifest, &a.out, &counts, &sampling, a.pca.as_deref())?;
                println!("encoded {} descriptors from {} images", c.iter().sum::<usize>(), c.len());
            } else {
                let (n, d) = pipeline::encode_patches(&a.model, &a.manifest, &a.out)?;
                println!("encoded {n} patches, dim {d}");
            }
        }
        Command::Vocab {
            descriptors,
            out,
            k,
            iterations,
            max_samples,
            seed,
        } => {
            let fit = pipeline::vocab(&descriptors, &out, k, iterations, seed, max_samples)?;
            println!("k={} inertia={:.6}", fit.codebook.k(), fit.inertia.last().copied().unwrap_or(0.0));
        }
        Command::Vlad {
            descriptors,
            counts,
            codebook,
            out,
        } => {
            for i in pipeline::vlad(&descriptors, &counts, &codebook, &out)? {
                eprintln!("warning: image {i} has no descriptors; its VLAD vector is zero");
            }
        }
        Command::Pca(PcaCommand::Fit {
            descriptors,
            out,
            dim,
            mode,
            seed: _,
        }) => {
            let m = pipeline::pca_fit(&descriptors, &out, dim, mode)?;
            println!("pca {} {} -> {}", m.mode.name(), m.input_dim(), m.output_dim());
        }
        Command::Pca(PcaCommand::Apply {
            model,
            descriptors,
            out,
            renormalize,
        }) => {
            let (n, d) = pipeline::pca_apply(&model, &descriptors, &out, renormalize)?;
            println!("projected {n} vectors to dim {d}");
        }
        Command::Eval(EvalCommand::Patches(a)) => {
            print_report(&pipeline::eval_retrieval(&a.descriptors, &a.manifest, a.report.as_deref(), "patches")?)
        }
        Command::Eval(EvalCommand::Images(a)) => {
            print_report(&pipeline::eval_retrieval(&a.descriptors, &a.manifest, a.report.as_deref(), "images")?)
        }
        Command::Eval(EvalCommand::Ukb { descriptors, manifest }) => {
            println!("recall4={:.6}", pipeline::eval_ukb(&descriptors, &manifest)?);
        }
        Command::Eval(EvalCommand::Robustness {
            model,
            bases,
            transform,
            magnitudes,
            out,
            seed,
        }) => {
            let model = CknModel::load(&model)?;
            let images = pipeline::load_images(&bases)?;
            let points = pipeline::robustness_curve(&model, &images, transform, &magnitudes, seed)?;
            let write = |w: &mut dyn Write, path: &Path| {
                pipeline::write_robustness_csv(&points, transform, w).map_err(|e| ckn::CknError::Io {
                    path: path.to_path_buf(),
                    source: e,
                })
            };
            match out {
                Some(path) => {
                    let mut f = std::fs::File::create(&path).map_err(|e| ckn::CknError::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    write(&mut f, &path)?;
                }
                None => write(&mut std::io::stdout().lock(), Path::new("<stdout>"))?,
            }
        }
        Command::Oracle(OracleCommand::Mc {
            dim,
            alpha,
            samples,
            seed,
        }) => println!("{}", pipeline::oracle_mc(dim, alpha, samples, seed)?.to_json()),
        Command::Oracle(OracleCommand::MatchKernel {
            side,
            channels,
            subpatch,
            alpha,
            beta,
            seed,
        }) => println!(
            "{}",
            pipeline::oracle_match_kernel(side, channels, subpatch, alpha, beta, seed)?.to_json()
        ),
        Command::Oracle(OracleCommand::Encoder {
            model,
            side,
            pairs,
            seed,
        }) => {
            let model = CknModel::load(&model)?;
            println!("{}", pipeline::oracle_encoder(&model, side, pairs, seed)?.to_json());
        }
        Command::Synth(a) => {
            let spec = SyntheticBenchSpec {
                bases: a.bases,
                copies: a.copies,
                max_shift: a.max_shift,
                max_rotation: a.max_rotation.to_radians(),
                max_scale: a.max_scale,
                max_brightness: a.max_brightness,
                base_side: a.base_side,
                patch_side: a.patch_side,
                seed: a.seed,
            };
            let entries = pipeline::synth(&spec, &a.out)?;
            println!("wrote {} patches in {} classes to {}", entries.len(), a.bases, a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
