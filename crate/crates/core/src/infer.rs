//! Inference on unseen volumes and the evaluation metrics.
//!
//! `locate` runs the full single-volume pipeline: window the intensities,
//! resample to the model's grid, predict a heatmap, extract a point, and
//! rescale it into the full-resolution frame. Physical coordinates use a
//! shared origin at the center of voxel (0,0,0), so `mm = index * spacing`
//! per axis; only differences matter for the reported distances.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::heatmap::{
    argmax_location, gaussian_fit_location, to_full_res, GeometryError, Heatmap,
};
use crate::model::{LocatorModel, ModelError};
use crate::volume::{
    crop_subvolume, normalize_hu, resample_trilinear, Dims, FrameTag, Point3, Spacing, Volume,
    VolumeError,
};

/// How a point is pulled out of a predicted heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    /// Integer coordinates of the maximum value.
    Argmax,
    /// Expectation of a moment-matched Gaussian fit.
    Fit,
}

impl ExtractionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExtractionMethod::Argmax => "argmax",
            ExtractionMethod::Fit => "fit",
        }
    }
}

impl FromStr for ExtractionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(ExtractionMethod::Argmax),
            "fit" | "gaussian_fit" => Ok(ExtractionMethod::Fit),
            other => Err(format!("unknown extraction method {other:?}")),
        }
    }
}

impl fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub enum InferError {
    Volume(VolumeError),
    Geometry(GeometryError),
    Model(ModelError),
    /// Distance requires both points in the full-resolution frame.
    FrameMismatch { pred: FrameTag, gold: FrameTag },
    EmptyDistances,
    Io(std::io::Error),
    BadCsv(String),
}

impl fmt::Display for InferError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferError::Volume(e) => write!(f, "{e}"),
            InferError::Geometry(e) => write!(f, "{e}"),
            InferError::Model(e) => write!(f, "{e}"),
            InferError::FrameMismatch { pred, gold } => {
                write!(f, "distance requires FullRes points, got {pred:?} vs {gold:?}")
            }
            InferError::EmptyDistances => write!(f, "cannot summarise an empty distance list"),
            InferError::Io(e) => write!(f, "i/o error: {e}"),
            InferError::BadCsv(msg) => write!(f, "bad results csv: {msg}"),
        }
    }
}

impl std::error::Error for InferError {}

impl From<VolumeError> for InferError {
    fn from(e: VolumeError) -> Self {
        InferError::Volume(e)
    }
}

impl From<GeometryError> for InferError {
    fn from(e: GeometryError) -> Self {
        InferError::Geometry(e)
    }
}

impl From<ModelError> for InferError {
    fn from(e: ModelError) -> Self {
        InferError::Model(e)
    }
}

impl From<std::io::Error> for InferError {
    fn from(e: std::io::Error) -> Self {
        InferError::Io(e)
    }
}

/// A localisation answer in the full-resolution frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalisationResult {
    pub source_id: String,
    pub point_full: Point3,
    /// (z, y, x) physical coordinates, `index * spacing` per axis.
    pub point_mm: [f64; 3],
    pub method: ExtractionMethod,
    pub peak_value: f32,
    /// True if the extracted point had to be clamped into the grid.
    pub clamped: bool,
}

/// Extract a point from a heatmap by the chosen method.
pub fn extract_point(
    h: &Heatmap,
    method: ExtractionMethod,
    tau: f64,
) -> Result<Point3, GeometryError> {
    match method {
        ExtractionMethod::Argmax => Ok(argmax_location(h)),
        ExtractionMethod::Fit => gaussian_fit_location(h, tau),
    }
}

/// Run the trained model on one full-resolution volume.
pub fn locate(
    model: &LocatorModel<f32>,
    source_id: &str,
    full_volume: &Volume,
    window: (f64, f64),
    method: ExtractionMethod,
    tau: f64,
) -> Result<LocalisationResult, InferError> {
    let target_dims = model.config().in_dims;
    let normalized = normalize_hu(full_volume, window.0, window.1)?;
    let ds = resample_trilinear(&normalized, target_dims)?;
    let batch = crate::model::volumes_to_batch::<f32>(&[&ds]);
    let pred = model.forward_eval(&batch)?;
    let heatmap = crate::model::batch_to_heatmaps(&pred, ds.spacing_mm)
        .pop()
        .expect("batch of one");
    result_from_heatmap(source_id, &heatmap, full_volume, method, tau)
}

/// Rescale an extracted downsampled point into a clamped full-resolution
/// result with physical coordinates.
pub fn result_from_heatmap(
    source_id: &str,
    heatmap: &Heatmap,
    full_volume: &Volume,
    method: ExtractionMethod,
    tau: f64,
) -> Result<LocalisationResult, InferError> {
    let peak_value = heatmap.data.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let point_ds = extract_point(heatmap, method, tau)?;
    let raw = to_full_res(&point_ds, heatmap.dims, full_volume.dims)?;
    let mut clamped = false;
    let coords: [f64; 3] = std::array::from_fn(|a| {
        let max = (full_volume.dims[a] - 1) as f64;
        if raw.coords[a] < 0.0 || raw.coords[a] > max {
            clamped = true;
            raw.coords[a].clamp(0.0, max)
        } else {
            raw.coords[a]
        }
    });
    let point_full = Point3::full_res(coords);
    let point_mm = std::array::from_fn(|a| coords[a] * full_volume.spacing_mm[a]);
    Ok(LocalisationResult {
        source_id: source_id.to_string(),
        point_full,
        point_mm,
        method,
        peak_value,
        clamped,
    })
}

/// Sidecar metadata written next to each crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSidecar {
    pub id: String,
    pub center_full: [f64; 3],
    pub crop_dims: Dims,
    pub method: ExtractionMethod,
}

/// Locate, then cut a `crop_dims` sub-volume around the found point.
#[allow(clippy::too_many_arguments)]
pub fn locate_and_crop(
    model: &LocatorModel<f32>,
    source_id: &str,
    full_volume: &Volume,
    window: (f64, f64),
    method: ExtractionMethod,
    tau: f64,
    crop_dims: Dims,
    pad_value: f32,
) -> Result<(Volume, LocalisationResult, CropSidecar), InferError> {
    let result = locate(model, source_id, full_volume, window, method, tau)?;
    let crop = crop_subvolume(full_volume, &result.point_full, crop_dims, pad_value)?;
    let sidecar = CropSidecar {
        id: result.source_id.clone(),
        center_full: result.point_full.coords,
        crop_dims,
        method,
    };
    Ok((crop, result, sidecar))
}

/// 3D Euclidean distance in millimetres between two full-resolution points.
pub fn euclidean_distance_mm(
    pred: &Point3,
    gold: &Point3,
    spacing_mm: Spacing,
) -> Result<f64, InferError> {
    if pred.frame != FrameTag::FullRes || gold.frame != FrameTag::FullRes {
        return Err(InferError::FrameMismatch {
            pred: pred.frame,
            gold: gold.frame,
        });
    }
    let sum: f64 = (0..3)
        .map(|a| {
            let d = (pred.coords[a] - gold.coords[a]) * spacing_mm[a];
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}

/// Pooled statistics of a distance list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub median_mm: f64,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub iqr_mm: f64,
    pub distances: Vec<f64>,
}

/// Quantile by linear interpolation between closest ranks of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Median (mean of the middle two for even n), mean, population standard
/// deviation, and interquartile range.
pub fn summarize(distances: &[f64]) -> Result<EvalSummary, InferError> {
    if distances.is_empty() {
        return Err(InferError::EmptyDistances);
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = sorted.len();
    let median_mm = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mean_mm = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|d| (d - mean_mm) * (d - mean_mm)).sum::<f64>() / n as f64;
    let iqr_mm = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    Ok(EvalSummary {
        n,
        median_mm,
        mean_mm,
        std_mm: var.sqrt(),
        iqr_mm,
        distances: distances.to_vec(),
    })
}

/// Local maxima of a heatmap: voxels strictly greater than every in-bounds
/// neighbour of their 26-neighbourhood. Returns values, descending.
pub fn local_maxima(h: &Heatmap) -> Vec<f32> {
    let [nz, ny, nx] = h.dims;
    let mut peaks = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            'voxel: for x in 0..nx {
                let v = h.at(z, y, x);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dz == 0 && dy == 0 && dx == 0 {
                                continue;
                            }
                            let (sz, sy, sx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if sz < 0
                                || sy < 0
                                || sx < 0
                                || sz >= nz as i64
                                || sy >= ny as i64
                                || sx >= nx as i64
                            {
                                continue;
                            }
                            if h.at(sz as usize, sy as usize, sx as usize) >= v {
                                continue 'voxel;
                            }
                        }
                    }
                }
                peaks.push(v);
            }
        }
    }
    peaks.sort_by(|a, b| b.partial_cmp(a).expect("finite heatmap"));
    peaks
}

/// Whether the strongest local maximum dominates the second strongest by
/// at least `factor`. A heatmap with a single local maximum is dominant.
pub fn has_dominant_peak(h: &Heatmap, factor: f32) -> bool {
    let peaks = local_maxima(h);
    match peaks.as_slice() {
        [] => false,
        [_] => true,
        [first, second, ..] => *first >= factor * second.max(0.0) && *first > 0.0,
    }
}

/// Write per-sample inference rows: `id,method,z,y,x,dist_mm`.
/// `dist_mm` is empty when no gold location was available.
pub fn write_results_csv(
    rows: &[(LocalisationResult, Option<f64>)],
    path: &Path,
) -> Result<(), InferError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["id", "method", "z", "y", "x", "dist_mm"])
        .map_err(|e| InferError::BadCsv(e.to_string()))?;
    for (r, dist) in rows {
        w.write_record([
            r.source_id.as_str(),
            r.method.as_str(),
            &r.point_full.coords[0].to_string(),
            &r.point_full.coords[1].to_string(),
            &r.point_full.coords[2].to_string(),
            &dist.map(|d| d.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| InferError::BadCsv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Pull the `dist_mm` column out of any results CSV (empty cells skipped).
pub fn read_distances_csv(path: &Path) -> Result<Vec<f64>, InferError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| InferError::BadCsv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| InferError::BadCsv(e.to_string()))?;
    let col = headers
        .iter()
        .position(|h| h == "dist_mm")
        .ok_or_else(|| InferError::BadCsv("missing dist_mm column".into()))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| InferError::BadCsv(e.to_string()))?;
        let cell = record
            .get(col)
            .ok_or_else(|| InferError::BadCsv("short row".into()))?;
        if cell.is_empty() {
            continue;
        }
        out.push(
            cell.parse::<f64>()
                .map_err(|e| InferError::BadCsv(format!("bad dist_mm {cell:?}: {e}")))?,
        );
    }
    Ok(out)
}

pub fn write_summary_json(summary: &EvalSummary, path: &Path) -> Result<(), InferError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, summary).map_err(|e| InferError::BadCsv(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(())
}
