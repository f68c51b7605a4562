//! Dataset preparation, cross-validation, augmentation, and training.
//!
//! Preprocessing pairs `<id>_img.gvol` / `<id>_mask.gvol` files, windows
//! and resamples each image to the working grid, and records the mask's
//! center of mass in both frames. Training runs k-fold cross-validation
//! with on-the-fly shift/flip augmentation; the heatmap target is always
//! regenerated analytically at the transformed center, never resampled.
//! Everything is a deterministic function of the seed: two runs produce
//! bit-identical histories, checkpoints, and reports.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{weighted_l2_l1_loss, Adam, AdamConfig, GraphError, Mode};
use crate::gvol::{read_gvol, write_gvol_image, GvolError};
use crate::heatmap::{
    flip_lr, flip_lr_point, generate_heatmap, to_downsampled, to_full_res, GeometryError, Heatmap,
    HeatmapSpec,
};
use crate::infer::{
    euclidean_distance_mm, extract_point, summarize, EvalSummary, ExtractionMethod, InferError,
};
use crate::model::{
    batch_to_heatmaps, build_locator, volumes_to_batch, Checkpoint, CheckpointError,
    LocatorConfig, ModelError,
};
use crate::volume::{
    mask_center_of_mass, normalize_hu, resample_trilinear, Dims, FrameTag, Point3, Spacing,
    Volume, VolumeError,
};

#[derive(Debug)]
pub enum TrainError {
    Io(io::Error),
    Gvol(GvolError),
    Volume(VolumeError),
    Geometry(GeometryError),
    Graph(GraphError),
    Model(ModelError),
    Checkpoint(CheckpointError),
    Infer(InferError),
    /// An `_img` file without its `_mask`, or the reverse.
    MissingPair { id: String, missing: String },
    /// Image and mask grids disagree.
    BadPair { id: String, detail: String },
    BadManifest(String),
    TooFewSamples { n: usize, folds: usize },
    /// One checkpoint per fold is required for testing.
    MissingCheckpoint { expected: usize, got: usize },
    /// Non-finite loss; training aborted.
    Diverged { fold: usize, epoch: usize, loss: f64 },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Io(e) => write!(f, "i/o error: {e}"),
            TrainError::Gvol(e) => write!(f, "{e}"),
            TrainError::Volume(e) => write!(f, "{e}"),
            TrainError::Geometry(e) => write!(f, "{e}"),
            TrainError::Graph(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Infer(e) => write!(f, "{e}"),
            TrainError::MissingPair { id, missing } => {
                write!(f, "sample {id}: missing {missing}")
            }
            TrainError::BadPair { id, detail } => write!(f, "sample {id}: {detail}"),
            TrainError::BadManifest(msg) => write!(f, "bad manifest: {msg}"),
            TrainError::TooFewSamples { n, folds } => {
                write!(f, "{n} samples cannot fill {folds} folds")
            }
            TrainError::MissingCheckpoint { expected, got } => {
                write!(f, "need {expected} checkpoints (one per fold), got {got}")
            }
            TrainError::Diverged { fold, epoch, loss } => {
                write!(f, "fold {fold} diverged at epoch {epoch}: loss = {loss}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

macro_rules! from_err {
    ($($variant:ident($ty:ty)),+ $(,)?) => {
        $(impl From<$ty> for TrainError {
            fn from(e: $ty) -> Self { TrainError::$variant(e) }
        })+
    };
}

from_err!(
    Io(io::Error),
    Gvol(GvolError),
    Volume(VolumeError),
    Geometry(GeometryError),
    Graph(GraphError),
    Model(ModelError),
    Checkpoint(CheckpointError),
    Infer(InferError),
);

/// Split one base seed into independent streams (splitmix64).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub target_dims: Dims,
    /// Intensity window (lo, hi) mapped to [0, 1].
    pub window: [f64; 2],
    /// Target Gaussian width, stored for the training stage.
    pub sigma_vox: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            target_dims: [64, 128, 128],
            window: [-1000.0, 1000.0],
            sigma_vox: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    /// Downsampled, normalised volume, relative to the manifest dir.
    pub file: String,
    pub full_dims: Dims,
    pub full_spacing_mm: Spacing,
    /// Mask center of mass in the full-resolution frame.
    pub center_full: [f64; 3],
    /// The same point rescaled into the downsampled frame.
    pub center_ds: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessManifest {
    pub target_dims: Dims,
    pub window: [f64; 2],
    pub sigma_vox: f64,
    pub samples: Vec<SampleMeta>,
    pub skipped: Vec<SkippedSample>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Scan `raw_dir` for image/mask pairs, normalise and resample each image
/// to the working grid, and compute the gold center in both frames.
/// Defective samples (empty mask, center too close to the edge to survive
/// rescaling) are skipped and logged; a missing pair member is an error.
pub fn preprocess_dataset(
    raw_dir: &Path,
    out_dir: &Path,
    opts: &PreprocessOptions,
) -> Result<PreprocessManifest, TrainError> {
    let mut img_ids = Vec::new();
    let mut mask_ids = Vec::new();
    for entry in std::fs::read_dir(raw_dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_img.gvol") {
            img_ids.push(id.to_string());
        } else if let Some(id) = name.strip_suffix("_mask.gvol") {
            mask_ids.push(id.to_string());
        }
    }
    img_ids.sort();
    mask_ids.sort();
    for id in &mask_ids {
        if !img_ids.contains(id) {
            return Err(TrainError::MissingPair {
                id: id.clone(),
                missing: format!("{id}_img.gvol"),
            });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for id in &img_ids {
        let mask_path = raw_dir.join(format!("{id}_mask.gvol"));
        if !mask_path.exists() {
            return Err(TrainError::MissingPair {
                id: id.clone(),
                missing: format!("{id}_mask.gvol"),
            });
        }
        let image = read_gvol(&raw_dir.join(format!("{id}_img.gvol")))?
            .into_image()
            .ok_or_else(|| TrainError::BadPair {
                id: id.clone(),
                detail: "image file holds a u8 mask payload".into(),
            })?;
        let mask = read_gvol(&mask_path)?
            .into_mask()
            .ok_or_else(|| TrainError::BadPair {
                id: id.clone(),
                detail: "mask file holds an f32 image payload".into(),
            })?;
        if mask.dims != image.dims {
            return Err(TrainError::BadPair {
                id: id.clone(),
                detail: format!("mask dims {:?} != image dims {:?}", mask.dims, image.dims),
            });
        }

        let center_full = match mask_center_of_mass(&mask, FrameTag::FullRes) {
            Ok(p) => p,
            Err(VolumeError::EmptyMask) => {
                skipped.push(SkippedSample {
                    id: id.clone(),
                    reason: "empty mask".into(),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let center_ds = to_downsampled(&center_full, image.dims, opts.target_dims)?;
        if !center_ds.inside(opts.target_dims) {
            skipped.push(SkippedSample {
                id: id.clone(),
                reason: "center outside the downsampled grid".into(),
            });
            continue;
        }

        let normalized = normalize_hu(&image, opts.window[0], opts.window[1])?;
        let ds = resample_trilinear(&normalized, opts.target_dims)?;
        let file = format!("{id}_ds.gvol");
        write_gvol_image(&ds, &out_dir.join(&file))?;
        samples.push(SampleMeta {
            id: id.clone(),
            file,
            full_dims: image.dims,
            full_spacing_mm: image.spacing_mm,
            center_full: center_full.coords,
            center_ds: center_ds.coords,
        });
    }

    let manifest = PreprocessManifest {
        target_dims: opts.target_dims,
        window: opts.window,
        sigma_vox: opts.sigma_vox,
        samples,
        skipped,
    };
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn write_manifest(manifest: &PreprocessManifest, path: &Path) -> Result<(), TrainError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, manifest).expect("manifest serialization cannot fail");
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<PreprocessManifest, TrainError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| TrainError::BadManifest(e.to_string()))
}

/// One preprocessed training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Downsampled, normalised input volume.
    pub input: Volume,
    /// Gold center in the downsampled frame.
    pub center_ds: Point3,
    pub source_id: String,
    pub full_dims: Dims,
    pub full_spacing_mm: Spacing,
}

impl TrainingSample {
    /// The gold location rescaled back to the full-resolution frame.
    pub fn gold_full(&self) -> Point3 {
        to_full_res(&self.center_ds, self.input.dims, self.full_dims)
            .expect("sample frames are consistent")
    }
}

/// Load every sample a manifest describes.
pub fn load_samples(data_dir: &Path) -> Result<(PreprocessManifest, Vec<TrainingSample>), TrainError> {
    let manifest = read_manifest(&data_dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for meta in &manifest.samples {
        let input = read_gvol(&data_dir.join(&meta.file))?
            .into_image()
            .ok_or_else(|| TrainError::BadManifest(format!("{} is not an image", meta.file)))?;
        if input.dims != manifest.target_dims {
            return Err(TrainError::BadManifest(format!(
                "{}: dims {:?} != manifest target {:?}",
                meta.id, input.dims, manifest.target_dims
            )));
        }
        samples.push(TrainingSample {
            input,
            center_ds: Point3::downsampled(meta.center_ds, manifest.target_dims),
            source_id: meta.id.clone(),
            full_dims: meta.full_dims,
            full_spacing_mm: meta.full_spacing_mm,
        });
    }
    Ok((manifest, samples))
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    /// Validation ids per fold; disjoint and covering every sample.
    pub validation: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.validation.len()
    }

    pub fn val_ids(&self, fold: usize) -> &[String] {
        &self.validation[fold]
    }

    /// Training ids for a fold: everything outside its validation set, in
    /// the shuffled assignment order.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.validation
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle followed by round-robin assignment; fold sizes differ by
/// at most one.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit, TrainError> {
    if k < 2 || ids.len() < k {
        return Err(TrainError::TooFewSamples {
            n: ids.len(),
            folds: k,
        });
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut validation = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        validation[i % k].push(id);
    }
    Ok(FoldSplit { validation })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 loss weight.
    pub w2: f64,
    /// L1 loss weight.
    pub w1: f64,
    pub sigma_vox: f64,
    /// Maximum |shift| per axis, in downsampled voxels.
    pub shift_max_vox: i64,
    pub flip_prob: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 2,
            lr: 1e-3,
            w2: 1.0,
            w1: 0.1,
            sigma_vox: 3.0,
            shift_max_vox: 5,
            flip_prob: 0.5,
            folds: 5,
            seed: 0,
        }
    }
}

/// Shift the volume contents by `delta` (out-of-bounds filled with
/// `pad`), so the point that was at `p` is now at `p + delta`.
fn shift_volume(vol: &Volume, delta: [i64; 3], pad: f32) -> Volume {
    if delta == [0, 0, 0] {
        return vol.clone();
    }
    let [nz, ny, nx] = vol.dims;
    let mut data = Vec::with_capacity(vol.len());
    for z in 0..nz as i64 {
        let sz = z - delta[0];
        for y in 0..ny as i64 {
            let sy = y - delta[1];
            for x in 0..nx as i64 {
                let sx = x - delta[2];
                let inside = sz >= 0
                    && sy >= 0
                    && sx >= 0
                    && (sz as usize) < nz
                    && (sy as usize) < ny
                    && (sx as usize) < nx;
                data.push(if inside {
                    vol.at(sz as usize, sy as usize, sx as usize)
                } else {
                    pad
                });
            }
        }
    }
    Volume {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        data,
    }
}

/// One augmented (input, target) pair: a random integer shift (clamped so
/// the center stays inside the grid, padding with the volume minimum) and
/// a left-right flip; the target heatmap is regenerated analytically at
/// the transformed center.
pub fn augment_sample<R: Rng>(
    sample: &TrainingSample,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Volume, Heatmap, Point3), TrainError> {
    let dims = sample.input.dims;
    let c = sample.center_ds.coords;
    let mut delta = [0i64; 3];
    for a in 0..3 {
        let raw = rng.random_range(-cfg.shift_max_vox..=cfg.shift_max_vox);
        let lo = (-c[a]).ceil() as i64;
        let hi = ((dims[a] - 1) as f64 - c[a]).floor() as i64;
        delta[a] = raw.clamp(lo, hi);
    }
    let flip = rng.random::<f64>() < cfg.flip_prob;

    let pad = sample.input.data.iter().copied().fold(f32::INFINITY, f32::min);
    let mut input = shift_volume(&sample.input, delta, pad);
    let mut center = Point3::downsampled(
        [
            c[0] + delta[0] as f64,
            c[1] + delta[1] as f64,
            c[2] + delta[2] as f64,
        ],
        dims,
    );
    if flip {
        input = flip_lr(&input);
        center = flip_lr_point(&center, dims)?;
    }
    let target = generate_heatmap(dims, &center, &HeatmapSpec::new(cfg.sigma_vox)?)?;
    Ok((input, target, center))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldHistory {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: Vec<EpochStats>,
}

fn index_by_id(samples: &[TrainingSample]) -> HashMap<&str, &TrainingSample> {
    samples.iter().map(|s| (s.source_id.as_str(), s)).collect()
}

/// Mean loss over a set of samples, evaluated without augmentation and
/// with dropout in eval mode.
fn validation_loss(
    model: &crate::model::LocatorModel<f32>,
    samples: &[&TrainingSample],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let spec = HeatmapSpec::new(cfg.sigma_vox)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let inputs: Vec<&Volume> = chunk.iter().map(|s| &s.input).collect();
        let targets: Vec<Heatmap> = chunk
            .iter()
            .map(|s| generate_heatmap(s.input.dims, &s.center_ds, &spec))
            .collect::<Result<_, _>>()?;
        let target_refs: Vec<&Volume> = targets.iter().collect();
        let input_t = volumes_to_batch::<f32>(&inputs);
        let target_t = volumes_to_batch::<f32>(&target_refs);
        let pred = model.forward_eval(&input_t)?;
        let loss = weighted_l2_l1_loss(&pred, &target_t, cfg.w2, cfg.w1)?;
        total += loss.item() as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Train one fold: mini-batch loop with augmentation, per-epoch validation
/// on the held-out fold, and best-validation-loss checkpoint retention.
pub fn train_fold(
    samples: &[TrainingSample],
    split: &FoldSplit,
    fold: usize,
    model_cfg: &LocatorConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, FoldHistory), TrainError> {
    let by_id = index_by_id(samples);
    let lookup = |id: &String| -> Result<&TrainingSample, TrainError> {
        by_id
            .get(id.as_str())
            .copied()
            .ok_or_else(|| TrainError::BadManifest(format!("fold split references unknown id {id}")))
    };
    let train_ids = split.train_ids(fold);
    let val_samples: Vec<&TrainingSample> = split
        .val_ids(fold)
        .iter()
        .map(lookup)
        .collect::<Result<_, _>>()?;
    if train_ids.is_empty() || val_samples.is_empty() {
        return Err(TrainError::TooFewSamples {
            n: samples.len(),
            folds: split.k(),
        });
    }

    let model = build_locator::<f32>(model_cfg, derive_seed(cfg.seed, fold as u64 * 2 + 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, fold as u64 * 2 + 2));
    let params = model.param_tensors();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &params,
    );

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut order = train_ids.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for id in chunk {
                let (input, target, _) = augment_sample(lookup(id)?, cfg, &mut rng)?;
                inputs.push(input);
                targets.push(target);
            }
            let input_refs: Vec<&Volume> = inputs.iter().collect();
            let target_refs: Vec<&Volume> = targets.iter().collect();
            let input_t = volumes_to_batch::<f32>(&input_refs);
            let target_t = volumes_to_batch::<f32>(&target_refs);

            let pred = model.forward(&input_t, Mode::Train, &mut rng)?;
            let loss = weighted_l2_l1_loss(&pred, &target_t, cfg.w2, cfg.w1)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged {
                    fold,
                    epoch,
                    loss: loss_val,
                });
            }
            model.zero_grad();
            loss.backward()?;
            opt.step(&params);
            train_loss_sum += loss_val * chunk.len() as f64;
        }
        let train_loss = train_loss_sum / train_ids.len() as f64;
        let val_loss = validation_loss(&model, &val_samples, cfg)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                fold,
                epoch,
                loss: val_loss,
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, Checkpoint::from_model(&model)));
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }

    let (best_epoch, best_val_loss, checkpoint) = best.expect("at least one epoch ran");
    Ok((
        checkpoint,
        FoldHistory {
            fold,
            best_epoch,
            best_val_loss,
            epochs: history,
        },
    ))
}

/// Train every fold, optionally in parallel (fold results are independent
/// and per-fold seeded, so the outputs are identical either way).
pub fn train_all_folds(
    samples: &[TrainingSample],
    split: &FoldSplit,
    model_cfg: &LocatorConfig,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<Vec<(Checkpoint, FoldHistory)>, TrainError> {
    let k = split.k();
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..k)
                .map(|fold| scope.spawn(move || train_fold(samples, split, fold, model_cfg, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect()
        })
    } else {
        (0..k)
            .map(|fold| train_fold(samples, split, fold, model_cfg, cfg))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Per-fold testing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub fold: usize,
    pub method: ExtractionMethod,
    /// Signed per-axis error (pred - gold) in millimetres.
    pub dz_mm: f64,
    pub dy_mm: f64,
    pub dx_mm: f64,
    pub dist_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n: usize,
    pub median_mm: f64,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub iqr_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub method: ExtractionMethod,
    pub tau: f64,
    pub folds: Vec<FoldSummary>,
    /// Fold indices sorted by median distance, best first; use this to
    /// select the fold for inference.
    pub ranking: Vec<usize>,
    pub pooled: EvalSummary,
    pub samples: Vec<SampleResult>,
}

fn fold_summary(fold: usize, distances: &[f64]) -> Result<FoldSummary, TrainError> {
    let s = summarize(distances)?;
    Ok(FoldSummary {
        fold,
        n: s.n,
        median_mm: s.median_mm,
        mean_mm: s.mean_mm,
        std_mm: s.std_mm,
        iqr_mm: s.iqr_mm,
    })
}

/// Localisation error of each validation sample under an arbitrary
/// heatmap predictor. `predict` maps a sample to the model's (or a
/// stub's) downsampled heatmap.
pub fn test_folds_with_predictor(
    samples: &[TrainingSample],
    split: &FoldSplit,
    mut predict: impl FnMut(usize, &TrainingSample) -> Result<Heatmap, TrainError>,
    method: ExtractionMethod,
    tau: f64,
) -> Result<TestReport, TrainError> {
    let by_id = index_by_id(samples);
    let mut rows = Vec::new();
    let mut fold_summaries = Vec::with_capacity(split.k());
    let mut pooled = Vec::new();
    for fold in 0..split.k() {
        let mut dists = Vec::new();
        for id in split.val_ids(fold) {
            let sample = by_id.get(id.as_str()).copied().ok_or_else(|| {
                TrainError::BadManifest(format!("fold split references unknown id {id}"))
            })?;
            let heatmap = predict(fold, sample)?;
            let point_ds = extract_point(&heatmap, method, tau)?;
            let pred_full = to_full_res(&point_ds, sample.input.dims, sample.full_dims)?;
            let gold_full = sample.gold_full();
            let dist_mm =
                euclidean_distance_mm(&pred_full, &gold_full, sample.full_spacing_mm)?;
            let d_mm: [f64; 3] = std::array::from_fn(|a| {
                (pred_full.coords[a] - gold_full.coords[a]) * sample.full_spacing_mm[a]
            });
            dists.push(dist_mm);
            pooled.push(dist_mm);
            rows.push(SampleResult {
                id: id.clone(),
                fold,
                method,
                dz_mm: d_mm[0],
                dy_mm: d_mm[1],
                dx_mm: d_mm[2],
                dist_mm,
            });
        }
        fold_summaries.push(fold_summary(fold, &dists)?);
    }

    let mut ranking: Vec<usize> = (0..split.k()).collect();
    ranking.sort_by(|&a, &b| {
        fold_summaries[a]
            .median_mm
            .partial_cmp(&fold_summaries[b].median_mm)
            .expect("finite medians")
            .then(a.cmp(&b))
    });

    Ok(TestReport {
        method,
        tau,
        folds: fold_summaries,
        ranking,
        pooled: summarize(&pooled)?,
        samples: rows,
    })
}

/// Score each fold's checkpoint on its own validation set.
pub fn test_folds(
    samples: &[TrainingSample],
    split: &FoldSplit,
    checkpoints: &[Checkpoint],
    method: ExtractionMethod,
    tau: f64,
) -> Result<TestReport, TrainError> {
    if checkpoints.len() != split.k() {
        return Err(TrainError::MissingCheckpoint {
            expected: split.k(),
            got: checkpoints.len(),
        });
    }
    let models: Vec<_> = checkpoints
        .iter()
        .map(|c| c.into_model())
        .collect::<Result<_, _>>()?;
    test_folds_with_predictor(
        samples,
        split,
        |fold, sample| {
            let batch = volumes_to_batch::<f32>(&[&sample.input]);
            let pred = models[fold].forward_eval(&batch)?;
            Ok(batch_to_heatmaps(&pred, sample.input.spacing_mm)
                .pop()
                .expect("batch of one"))
        },
        method,
        tau,
    )
}

/// Per-sample rows as CSV: `id,fold,method,dz,dy,dx,dist_mm`.
pub fn write_test_csv(report: &TestReport, path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "fold", "method", "dz", "dy", "dx", "dist_mm"])
        .map_err(|e| TrainError::BadManifest(e.to_string()))?;
    for r in &report.samples {
        w.write_record([
            r.id.as_str(),
            &r.fold.to_string(),
            r.method.as_str(),
            &r.dz_mm.to_string(),
            &r.dy_mm.to_string(),
            &r.dx_mm.to_string(),
            &r.dist_mm.to_string(),
        ])
        .map_err(|e| TrainError::BadManifest(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_test_report(report: &TestReport, path: &Path) -> Result<(), TrainError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, report).expect("report serialization cannot fail");
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
