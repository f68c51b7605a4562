//! `gaaf` — the pipeline driver.
//!
//! Subcommands run the stages in order: `synth` (optional phantom data),
//! `preprocess`, `train`, `test`, then `infer`/`eval`; `gradcheck` runs
//! the differentiation verification suite. Exit codes are fixed for
//! scripting: 0 success, 1 usage error, 2 data error, 3 numerical failure
//! (divergence, missing peak, failed gradient check).

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use gaaf_core::config::{ConfigError, RunConfig};
use gaaf_core::gvol::read_gvol;
use gaaf_core::heatmap::GeometryError;
use gaaf_core::infer::{
    euclidean_distance_mm, locate, locate_and_crop, read_distances_csv, summarize,
    write_results_csv, write_summary_json, ExtractionMethod, InferError,
};
use gaaf_core::model::Checkpoint;
use gaaf_core::synth::synth_generate;
use gaaf_core::train::{
    load_samples, make_folds, preprocess_dataset, test_folds, train_all_folds,
    write_test_csv, write_test_report, FoldSplit, TrainError,
};
use gaaf_core::verify::run_gradcheck_suite;
use gaaf_core::volume::{mask_center_of_mass, Dims, FrameTag};

/// Failures after argument parsing, split by exit class.
#[derive(Debug)]
enum AppError {
    /// Missing/unreadable/inconsistent inputs -> exit 2.
    Data(String),
    /// Divergence, no-peak, failed gradient checks -> exit 3.
    Numerical(String),
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Data(msg) | AppError::Numerical(msg) => f.write_str(msg),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Diverged { .. } => AppError::Numerical(e.to_string()),
            TrainError::Geometry(GeometryError::NoPeak) => AppError::Numerical(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<InferError> for AppError {
    fn from(e: InferError) -> Self {
        match &e {
            InferError::Geometry(GeometryError::NoPeak) => AppError::Numerical(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

fn data_err(e: impl fmt::Display) -> AppError {
    AppError::Data(e.to_string())
}

#[derive(Parser)]
#[command(name = "gaaf", version, about = "Volumetric anatomy localisation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides shared across subcommands; precedence is built-in
/// default < config file < flag.
#[derive(Args, Default)]
struct CommonOpts {
    /// JSON config file (single flat object; unknown keys are errors).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for data generation, folds, init, and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Heatmap point extraction: argmax | fit.
    #[arg(long, value_parser = parse_method)]
    method: Option<ExtractionMethod>,
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Attention-gated skip connections: on | off.
    #[arg(long, value_parser = parse_on_off)]
    attention: Option<bool>,
    /// Crop size around the located point, as ZxYxX (e.g. 64x128x128).
    #[arg(long, value_parser = parse_dims)]
    crop: Option<Dims>,
}

fn parse_method(s: &str) -> Result<ExtractionMethod, String> {
    s.parse()
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on|off, got {other:?}")),
    }
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected ZxYxX, got {s:?}"));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(parts.iter()) {
        *d = p
            .parse::<usize>()
            .map_err(|e| format!("bad dimension {p:?}: {e}"))?;
        if *d == 0 {
            return Err("dimensions must be >= 1".into());
        }
    }
    Ok(dims)
}

fn load_config(common: &CommonOpts) -> Result<RunConfig, AppError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &CommonOpts) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(method) = common.method {
        cfg.method = method;
    }
    if let Some(folds) = common.folds {
        cfg.folds = folds;
    }
    if let Some(attention) = common.attention {
        cfg.attention = attention;
    }
    if let Some(crop) = common.crop {
        cfg.crop = Some(crop);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic ellipsoid phantoms with known centers.
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory for image/mask pairs and the manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of phantoms (overrides the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Normalise, resample, and extract gold centers from raw pairs.
    Preprocess {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory of <id>_img.gvol / <id>_mask.gvol pairs.
        #[arg(long, value_name = "DIR")]
        raw: PathBuf,
        /// Output directory for downsampled samples + manifest.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one model per cross-validation fold.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Preprocessed dataset directory (holds manifest.json).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for checkpoints, split, and history.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Train folds on separate threads (per-fold results unchanged).
        #[arg(long)]
        parallel: bool,
        /// Number of epochs (overrides the config).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score each fold's checkpoint on its validation set.
    Test {
        #[command(flatten)]
        common: CommonOpts,
        /// Preprocessed dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Training output directory (fold checkpoints + split.json).
        #[arg(long, value_name = "DIR")]
        models: PathBuf,
        /// Output directory for results.csv and report.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Locate the target in unseen volumes (optionally crop around it).
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        /// A .gvol volume or a directory of <id>_img.gvol files.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Trained checkpoint file.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Output directory for results.csv, crops, and sidecars.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Summarise a results CSV (dist_mm column) into summary statistics.
    Eval {
        /// Results CSV from `test` or `infer`.
        #[arg(long, value_name = "FILE")]
        results: PathBuf,
        /// Output directory for summary.json (also printed).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Verify every backward rule against central finite differences.
    Gradcheck {
        /// Seed for the randomised check inputs.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> std::process::ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return std::process::ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(AppError::Data(msg)) => {
            eprintln!("error: {msg}");
            std::process::ExitCode::from(2)
        }
        Err(AppError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            std::process::ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Synth { common, out, count } => cmd_synth(&common, &out, count),
        Command::Preprocess { common, raw, out } => cmd_preprocess(&common, &raw, &out),
        Command::Train {
            common,
            data,
            out,
            parallel,
            epochs,
        } => cmd_train(&common, &data, &out, parallel, epochs),
        Command::Test {
            common,
            data,
            models,
            out,
        } => cmd_test(&common, &data, &models, &out),
        Command::Infer {
            common,
            input,
            model,
            out,
        } => cmd_infer(&common, &input, &model, &out),
        Command::Eval { results, out } => cmd_eval(&results, out.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn require_dir(path: &Path) -> Result<(), AppError> {
    if !path.is_dir() {
        return Err(AppError::Data(format!(
            "input directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_synth(common: &CommonOpts, out: &Path, count: Option<usize>) -> Result<(), AppError> {
    let cfg = load_config(common)?;
    let mut spec = cfg.phantom_spec();
    if let Some(count) = count {
        spec.n_samples = count;
    }
    let manifest = synth_generate(&spec, out).map_err(data_err)?;
    println!(
        "synth: wrote {} phantom pairs ({}x{}x{}) to {}",
        manifest.samples.len(),
        spec.full_dims[0],
        spec.full_dims[1],
        spec.full_dims[2],
        out.display()
    );
    Ok(())
}

fn cmd_preprocess(common: &CommonOpts, raw: &Path, out: &Path) -> Result<(), AppError> {
    let cfg = load_config(common)?;
    require_dir(raw)?;
    let manifest = preprocess_dataset(raw, out, &cfg.preprocess_options())?;
    println!(
        "preprocess: {} samples to {:?}, {} skipped",
        manifest.samples.len(),
        manifest.target_dims,
        manifest.skipped.len()
    );
    for s in &manifest.skipped {
        println!("  skipped {}: {}", s.id, s.reason);
    }
    Ok(())
}

const SPLIT_FILE: &str = "split.json";
const HISTORY_FILE: &str = "history.json";

fn checkpoint_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}.gckp"))
}

fn cmd_train(
    common: &CommonOpts,
    data: &Path,
    out: &Path,
    parallel: bool,
    epochs: Option<usize>,
) -> Result<(), AppError> {
    let cfg = load_config(common)?;
    require_dir(data)?;
    let (manifest, samples) = load_samples(data)?;

    // The manifest is authoritative for the grid and target width the
    // samples were built with.
    let mut model_cfg = cfg.locator_config();
    model_cfg.in_dims = manifest.target_dims;
    let mut train_cfg = cfg.train_config();
    train_cfg.sigma_vox = manifest.sigma_vox;
    if let Some(epochs) = epochs {
        train_cfg.epochs = epochs;
    }

    let ids: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
    let split = make_folds(&ids, train_cfg.folds, train_cfg.seed)?;
    std::fs::create_dir_all(out).map_err(data_err)?;
    let results = train_all_folds(
        &samples,
        &split,
        &model_cfg,
        &train_cfg,
        parallel || cfg.parallel_folds,
    )?;

    write_json(&split, &out.join(SPLIT_FILE))?;
    let histories: Vec<_> = results.iter().map(|(_, h)| h.clone()).collect();
    write_json(&histories, &out.join(HISTORY_FILE))?;
    for (fold, (ckpt, hist)) in results.iter().enumerate() {
        ckpt.write(&checkpoint_path(out, fold)).map_err(data_err)?;
        println!(
            "train: fold {fold} best epoch {} val loss {:.6e}",
            hist.best_epoch, hist.best_val_loss
        );
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), AppError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(data_err)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(data_err)
}

fn cmd_test(common: &CommonOpts, data: &Path, models: &Path, out: &Path) -> Result<(), AppError> {
    let cfg = load_config(common)?;
    require_dir(data)?;
    require_dir(models)?;
    let (_, samples) = load_samples(data)?;
    let split: FoldSplit = read_json(&models.join(SPLIT_FILE))?;
    let mut checkpoints = Vec::with_capacity(split.k());
    for fold in 0..split.k() {
        let path = checkpoint_path(models, fold);
        if !path.exists() {
            return Err(AppError::Data(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
        checkpoints.push(Checkpoint::read(&path).map_err(data_err)?);
    }
    let report = test_folds(&samples, &split, &checkpoints, cfg.method, cfg.tau)?;

    std::fs::create_dir_all(out).map_err(data_err)?;
    write_test_csv(&report, &out.join("results.csv"))?;
    write_test_report(&report, &out.join("report.json"))?;
    println!("test: method {} over {} folds", report.method, report.folds.len());
    for fs in &report.folds {
        println!(
            "  fold {}: n={} median {:.3} mm (mean {:.3}, std {:.3}, iqr {:.3})",
            fs.fold, fs.n, fs.median_mm, fs.mean_mm, fs.std_mm, fs.iqr_mm
        );
    }
    println!(
        "  pooled median {:.3} mm; fold ranking (best first): {:?}",
        report.pooled.median_mm, report.ranking
    );
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| AppError::Data(format!("cannot parse {}: {e}", path.display())))
}

fn cmd_infer(common: &CommonOpts, input: &Path, model: &Path, out: &Path) -> Result<(), AppError> {
    let cfg = load_config(common)?;
    let model = Checkpoint::read(model)
        .map_err(data_err)?
        .into_model()
        .map_err(data_err)?;

    // A single volume file or every *_img.gvol in a directory.
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if input.is_file() {
        let name = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let id = name
            .strip_suffix("_img.gvol")
            .or_else(|| name.strip_suffix(".gvol"))
            .unwrap_or(&name)
            .to_string();
        inputs.push((id, input.to_path_buf()));
    } else {
        require_dir(input)?;
        for entry in std::fs::read_dir(input).map_err(data_err)? {
            let entry = entry.map_err(data_err)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix("_img.gvol") {
                inputs.push((id.to_string(), entry.path()));
            }
        }
        inputs.sort();
        if inputs.is_empty() {
            return Err(AppError::Data(format!(
                "no *_img.gvol files in {}",
                input.display()
            )));
        }
    }

    std::fs::create_dir_all(out).map_err(data_err)?;
    let window = (cfg.window[0], cfg.window[1]);
    let mut rows = Vec::with_capacity(inputs.len());
    for (id, path) in &inputs {
        let volume = read_gvol(path)
            .map_err(data_err)?
            .into_image()
            .ok_or_else(|| AppError::Data(format!("{} is a mask, not an image", path.display())))?;

        let result = if let Some(crop_dims) = cfg.crop {
            let (crop, result, sidecar) = locate_and_crop(
                &model,
                id,
                &volume,
                window,
                cfg.method,
                cfg.tau,
                crop_dims,
                cfg.crop_pad_value as f32,
            )?;
            gaaf_core::gvol::write_gvol_image(&crop, &out.join(format!("{id}_crop.gvol")))
                .map_err(data_err)?;
            write_json(&sidecar, &out.join(format!("{id}_crop.json")))?;
            result
        } else {
            locate(&model, id, &volume, window, cfg.method, cfg.tau)?
        };

        // Score against the gold mask when one sits next to the image.
        let mask_path = path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("{id}_mask.gvol"));
        let dist = if mask_path.exists() {
            let mask = read_gvol(&mask_path)
                .map_err(data_err)?
                .into_mask()
                .ok_or_else(|| AppError::Data(format!("{} is not a mask", mask_path.display())))?;
            let gold = mask_center_of_mass(&mask, FrameTag::FullRes).map_err(data_err)?;
            Some(euclidean_distance_mm(&result.point_full, &gold, volume.spacing_mm)?)
        } else {
            None
        };
        println!(
            "infer: {id} -> ({:.2}, {:.2}, {:.2}) vox{}{}",
            result.point_full.coords[0],
            result.point_full.coords[1],
            result.point_full.coords[2],
            dist.map(|d| format!(", {d:.3} mm from gold")).unwrap_or_default(),
            if result.clamped { " [clamped]" } else { "" },
        );
        rows.push((result, dist));
    }
    write_results_csv(&rows, &out.join("results.csv"))?;
    Ok(())
}

fn cmd_eval(results: &Path, out: Option<&Path>) -> Result<(), AppError> {
    let distances = read_distances_csv(results)?;
    let summary = summarize(&distances)?;
    println!(
        "eval: n={} median {:.3} mm, mean {:.3} mm, std {:.3} mm, iqr {:.3} mm",
        summary.n, summary.median_mm, summary.mean_mm, summary.std_mm, summary.iqr_mm
    );
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(data_err)?;
        write_summary_json(&summary, &out.join("summary.json"))?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), AppError> {
    let entries = run_gradcheck_suite(seed);
    let mut failures = 0;
    for e in &entries {
        println!(
            "gradcheck: {:24} max rel err {:.3e}  {}{}",
            e.name,
            e.max_rel_err,
            if e.passed { "PASS" } else { "FAIL" },
            e.detail
                .as_deref()
                .map(|d| format!("  ({d})"))
                .unwrap_or_default()
        );
        if !e.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(AppError::Numerical(format!(
            "{failures} gradient check(s) failed"
        )));
    }
    Ok(())
}
