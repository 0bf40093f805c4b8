//! Command-line frontend: synthesize paired data, train the pipeline, run
//! it on images, score it, and inspect trained models.
//!
//! Exit codes: 0 success, 1 usage error, 2 IO error, 3 data or model
//! integrity error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dehaze_core::dataset::{
    evaluate, generate_clear_image, load_manifest, make_synthetic_set, write_manifest, DepthModel,
    PairSet, ScoreReport, Split, SynthConfig,
};
use dehaze_core::dcp::{dehaze_dcp, DcpParams};
use dehaze_core::error::Error;
use dehaze_core::image::{load_image, resize, save_image, ImageBuffer};
use dehaze_core::model_file::{load_model, save_model};
use dehaze_core::trees::GbtParams;
use dehaze_core::ushape::{
    infer, report_parameters, train_pipeline_split, FeatureMode, OmegaMode, TrainConfig,
    TrainReport, UShapeModel,
};

#[derive(Parser)]
#[command(name = "dehaze", version, about = "Green-learning single-image dehazing")]
struct Cli {
    /// Seed for every stochastic stage; identical seeds give identical outputs
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key=value config file; command-line flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Chattier progress output
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize hazy counterparts for clear images and write a manifest
    Synth(SynthArgs),
    /// Train the full pipeline from a manifest
    Train(TrainArgs),
    /// Dehaze one image or a directory of images with a trained model
    Dehaze(DehazeArgs),
    /// Score a trained model on a manifest split
    Eval(EvalArgs),
    /// Print a trained model's parameter breakdown
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clear PNG/JPEG images
    #[arg(long, conflicts_with = "generate")]
    input: Option<PathBuf>,
    /// Generate this many procedural clear images instead of reading a directory
    #[arg(long)]
    generate: Option<usize>,
    /// Side length for generated clear images
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    beta_min: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
    #[arg(long)]
    airlight_min: Option<f64>,
    #[arg(long)]
    airlight_max: Option<f64>,
    /// Constant scene depth instead of the default vertical ramp
    #[arg(long)]
    constant_depth: Option<f64>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the trained model
    #[arg(long)]
    output: PathBuf,
    /// Working resolution of the pipeline
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    pixel_subsample: Option<f64>,
    #[arg(long)]
    rft_keep: Option<usize>,
    #[arg(long)]
    rft_bins: Option<usize>,
    #[arg(long)]
    lnt_bins: Option<usize>,
    /// "learned" fits the omega forest, "fixed" uses --omega-value
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    omega_value: Option<f64>,
    /// Also train a raw-features-only variant and print the comparison
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct DehazeArgs {
    #[arg(long)]
    model: PathBuf,
    /// An image file or a directory of images
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Run only the preliminary DCP stage
    #[arg(long)]
    dcp_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which split to score: train, val, or test
    #[arg(long)]
    split: Option<String>,
    /// Optional machine-readable TSV report
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidParameter(_) => 1,
        Error::Io { .. } | Error::Codec { .. } => 2,
        _ => 3,
    }
}

/// Config-file overlay: flags override file entries, file entries override
/// defaults.
struct Overlay {
    map: HashMap<String, String>,
}

impl Overlay {
    fn load(path: Option<&Path>) -> Result<Self, Error> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::InvalidParameter(format!("config line without '=': {line}"))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self { map })
    }

    fn resolve<T: FromStr + Clone>(&self, flag: &Option<T>, key: &str, default: T) -> Result<T, Error> {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        match self.map.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                Error::InvalidParameter(format!("config key '{key}' has unparsable value '{raw}'"))
            }),
            None => Ok(default),
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let overlay = Overlay::load(cli.config.as_deref())?;
    let seed = overlay.resolve(&cli.seed, "seed", 0u64)?;
    let threads = overlay.resolve(&cli.threads, "threads", 0usize)?;
    if threads > 0 {
        // ignore failures from double initialization in tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let verbose = cli.verbose;
    match cli.command {
        Command::Synth(args) => cmd_synth(args, &overlay, seed, verbose),
        Command::Train(args) => cmd_train(args, &overlay, seed, verbose),
        Command::Dehaze(args) => cmd_dehaze(args, verbose),
        Command::Eval(args) => cmd_eval(args, &overlay),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                Some(ref ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_synth(args: SynthArgs, overlay: &Overlay, seed: u64, verbose: bool) -> Result<(), Error> {
    let out_dir = &args.output;
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.clone(),
        source,
    })?;

    let size = overlay.resolve(&args.size, "size", 256usize)?;
    let generate = overlay.resolve(&args.generate, "generate", 0usize)?;
    let clears: Vec<(PathBuf, ImageBuffer)> = if generate > 0 {
        (0..generate)
            .map(|i| {
                let img = generate_clear_image(seed.wrapping_add(i as u64), size, size);
                let path = out_dir.join(format!("clear_{i:04}.png"));
                save_image(&img, &path)?;
                Ok((path, img))
            })
            .collect::<Result<_, Error>>()?
    } else {
        let dir = args.input.as_deref().ok_or_else(|| {
            Error::InvalidParameter("either --input or --generate is required".into())
        })?;
        let files = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no images found in {}",
                dir.display()
            )));
        }
        files
            .into_iter()
            .map(|path| {
                let img = load_image(&path)?;
                Ok((path, img))
            })
            .collect::<Result<_, Error>>()?
    };

    let cfg = SynthConfig {
        beta_range: (
            overlay.resolve(&args.beta_min, "beta-min", 0.6)?,
            overlay.resolve(&args.beta_max, "beta-max", 1.8)?,
        ),
        airlight_range: (
            overlay.resolve(&args.airlight_min, "airlight-min", 0.7)?,
            overlay.resolve(&args.airlight_max, "airlight-max", 1.0)?,
        ),
        depth: match args.constant_depth {
            Some(d) => DepthModel::Constant(d),
            None => DepthModel::Ramp { near: 0.2, far: 1.0 },
        },
        train_fraction: overlay.resolve(&args.train_frac, "train-frac", 0.7)?,
        val_fraction: overlay.resolve(&args.val_frac, "val-frac", 0.15)?,
        seed,
    };
    let set = make_synthetic_set(&clears, out_dir, &cfg)?;
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&set, &manifest)?;
    if verbose {
        for p in &set.pairs {
            eprintln!("{} -> {} ({})", p.clear.display(), p.hazy.display(), p.split);
        }
    }
    println!(
        "wrote {} pairs ({} train / {} val / {} test) to {}",
        set.pairs.len(),
        set.split_len(Split::Train),
        set.split_len(Split::Val),
        set.split_len(Split::Test),
        manifest.display()
    );
    Ok(())
}

fn load_split_pairs(set: &PairSet, split: Split) -> Result<Vec<(ImageBuffer, ImageBuffer)>, Error> {
    set.split(split)
        .map(|p| Ok((load_image(&p.hazy)?, load_image(&p.clear)?)))
        .collect()
}

fn print_mse_table(title: &str, report: &TrainReport) {
    println!("{title}");
    println!("  {:<12} {:>10} {:>10} {:>10} {:>12} {:>10} {:>10}", "level", "train R", "train G", "train B", "val R", "val G", "val B");
    for level in &report.levels {
        let scale = 255.0 * 255.0;
        println!(
            "  {:<12} {:>10.2} {:>10.2} {:>10.2} {:>12.2} {:>10.2} {:>10.2}",
            format!("{0}x{0}", level.resolution),
            level.train_mse[0] * scale,
            level.train_mse[1] * scale,
            level.train_mse[2] * scale,
            level.val_mse[0] * scale,
            level.val_mse[1] * scale,
            level.val_mse[2] * scale,
        );
    }
}

fn cmd_train(args: TrainArgs, overlay: &Overlay, seed: u64, verbose: bool) -> Result<(), Error> {
    let set = load_manifest(&args.manifest)?;
    let train_pairs = load_split_pairs(&set, Split::Train)?;
    let mut val_pairs = load_split_pairs(&set, Split::Val)?;
    let mut train_pairs = train_pairs;
    if val_pairs.is_empty() {
        // no explicit validation split: hold out the tail of the train split
        let n_val = (train_pairs.len() / 5).max(1);
        if n_val >= train_pairs.len() {
            return Err(Error::InsufficientData(
                "not enough training pairs to hold out validation data".into(),
            ));
        }
        val_pairs = train_pairs.split_off(train_pairs.len() - n_val);
    }
    if verbose {
        eprintln!(
            "training on {} pairs, validating on {}",
            train_pairs.len(),
            val_pairs.len()
        );
    }

    let omega_mode = match overlay
        .resolve(&args.omega, "omega", "learned".to_string())?
        .as_str()
    {
        "learned" => OmegaMode::Learned,
        "fixed" => OmegaMode::Fixed,
        other => {
            return Err(Error::InvalidParameter(format!(
                "--omega must be 'learned' or 'fixed', got '{other}'"
            )))
        }
    };
    let gbt_defaults = GbtParams::default();
    let cfg = TrainConfig {
        input_size: overlay.resolve(&args.size, "size", 256usize)?,
        levels: overlay.resolve(&args.levels, "levels", 3usize)?,
        pixel_subsample: overlay.resolve(&args.pixel_subsample, "pixel-subsample", 0.25)?,
        rft_keep: overlay.resolve(&args.rft_keep, "rft-keep", 1000usize)?,
        rft_bins: overlay.resolve(&args.rft_bins, "rft-bins", 31usize)?,
        lnt_bins: overlay.resolve(&args.lnt_bins, "lnt-bins", 8usize)?,
        gbt: GbtParams {
            rounds: overlay.resolve(&args.rounds, "rounds", gbt_defaults.rounds)?,
            eta: overlay.resolve(&args.eta, "eta", gbt_defaults.eta)?,
            lambda: overlay.resolve(&args.lambda, "lambda", gbt_defaults.lambda)?,
            gamma: overlay.resolve(&args.gamma, "gamma", gbt_defaults.gamma)?,
            max_depth: overlay.resolve(&args.max_depth, "max-depth", gbt_defaults.max_depth)?,
            min_child_weight: 1.0,
        },
        seed,
        dcp_params: DcpParams {
            omega: overlay.resolve(&args.omega_value, "omega-value", 0.95)?,
            ..DcpParams::default()
        },
        omega_mode,
        feature_mode: FeatureMode::RawPlusLnt,
        val_fraction: 0.2,
        hops: None,
    };

    let (model, report) = train_pipeline_split(&train_pairs, &val_pairs, &cfg)?;
    print_mse_table("per-level MSE (8-bit scale):", &report);

    if args.ablation {
        // regressor validation MSE at the finest level under each feature
        // incorporation, measured on identical rows
        let finest = report
            .levels
            .last()
            .ok_or_else(|| Error::Integrity("training produced no levels".into()))?;
        let scale = 255.0 * 255.0;
        let fmt_row = |label: &str, values: [f64; 3]| {
            let cell = |v: f64| {
                if v.is_nan() {
                    format!("{:>8}", "-")
                } else {
                    format!("{:>8.2}", v * scale)
                }
            };
            println!(
                "  {:<16} {} {} {}",
                label,
                cell(values[0]),
                cell(values[1]),
                cell(values[2])
            );
        };
        println!("feature ablation, validation MSE (8-bit scale):");
        println!("  {:<16} {:>8} {:>8} {:>8}", "features", "R", "G", "B");
        fmt_row("raw", finest.gate_raw_mse);
        fmt_row("L1+L2", finest.gate_lnt_mse);
        fmt_row("raw+L1+L2", finest.gate_blend_mse);
    }

    save_model(&model, &args.output)?;
    println!("model written to {}", args.output.display());
    Ok(())
}

fn cmd_dehaze(args: DehazeArgs, verbose: bool) -> Result<(), Error> {
    let model = load_model(&args.model)?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let files = list_images(&args.input)?;
        if files.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no images found in {}",
                args.input.display()
            )));
        }
        files
    } else {
        vec![args.input.clone()]
    };
    std::fs::create_dir_all(&args.output).map_err(|source| Error::Io {
        path: args.output.clone(),
        source,
    })?;
    for path in &inputs {
        let img = load_image(path)?;
        let restored = if args.dcp_only {
            dcp_only_restore(&img, &model)?
        } else {
            infer(&img, &model)?
        };
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let out_path = args.output.join(format!("{stem}_dehazed.png"));
        save_image(&restored, &out_path)?;
        if verbose {
            eprintln!("{} -> {}", path.display(), out_path.display());
        }
    }
    println!("dehazed {} image(s) into {}", inputs.len(), args.output.display());
    Ok(())
}

/// The preliminary stage alone, at the model's working resolution.
fn dcp_only_restore(img: &ImageBuffer, model: &UShapeModel) -> Result<ImageBuffer, Error> {
    let side = model.input_size;
    let small = resize(img, side, side)?;
    let out = dehaze_dcp(&small, &model.dcp_params, model.omega_model.as_ref())?;
    resize(&out, img.height(), img.width())
}

fn format_report(report: &ScoreReport) -> String {
    let mut out = String::new();
    out.push_str("# image\tpsnr_model\tssim_model\tpsnr_dcp\tssim_dcp\tpsnr_hazy\tssim_hazy\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            row.hazy_path.display(),
            row.model.0,
            row.model.1,
            row.dcp_only.0,
            row.dcp_only.1,
            row.hazy.0,
            row.hazy.1
        ));
    }
    out.push_str(&format!(
        "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
        report.mean_model.0,
        report.mean_model.1,
        report.mean_dcp.0,
        report.mean_dcp.1,
        report.mean_hazy.0,
        report.mean_hazy.1
    ));
    out
}

fn cmd_eval(args: EvalArgs, overlay: &Overlay) -> Result<(), Error> {
    let model = load_model(&args.model)?;
    let set = load_manifest(&args.manifest)?;
    let split: Split = overlay
        .resolve(&args.split, "split", "test".to_string())?
        .parse()?;
    let report = evaluate(&model, &set, split)?;
    println!("split '{split}' over {} image(s):", report.rows.len());
    println!("  {:<12} {:>8} {:>8}", "variant", "PSNR", "SSIM");
    println!("  {:<12} {:>8.3} {:>8.4}", "model", report.mean_model.0, report.mean_model.1);
    println!("  {:<12} {:>8.3} {:>8.4}", "dcp-only", report.mean_dcp.0, report.mean_dcp.1);
    println!("  {:<12} {:>8.3} {:>8.4}", "hazy", report.mean_hazy.0, report.mean_hazy.1);
    if let Some(path) = &args.report {
        std::fs::write(path, format_report(&report)).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Error> {
    let model = load_model(&args.model)?;
    let report = report_parameters(&model);
    println!("model format version {}", model.version);
    println!("input size {0}x{0}, {1} level(s)", model.input_size, model.levels.len());
    println!(
        "  {:<10} {:>10} {:>8} {:>10} {:>10} {:>12}",
        "level", "saab", "rft", "lnt", "trees", "total"
    );
    for level in &report.per_level {
        println!(
            "  {:<10} {:>10} {:>8} {:>10} {:>10} {:>12}",
            format!("{0}x{0}", level.resolution),
            level.saab,
            level.rft,
            level.lnt,
            level.trees,
            level.total()
        );
    }
    println!("  omega forest: {}", report.omega_forest);
    println!("  dcp scalars:  {}", report.dcp);
    println!("  total parameters: {}", report.total());
    Ok(())
}
