//! Gaussian heatmap targets and coordinate extraction.
//!
//! Targets are unit-peak isotropic Gaussians evaluated analytically at
//! integer voxel positions; they are regenerated from the (possibly
//! augmented) center rather than resampled, so they stay exact. Extraction
//! offers the naive argmax and a thresholded weighted first moment, which
//! equals the expectation of a moment-matched Gaussian fit.

use std::fmt;

use crate::volume::{Dims, FrameTag, Point3, Volume};

/// Heatmaps are ordinary volumes; network outputs may be negative or
/// exceed 1, generated targets lie in (0, 1].
pub type Heatmap = Volume;

/// Shape of the generated target Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeatmapSpec {
    /// Isotropic standard deviation in downsampled voxel units.
    pub sigma_vox: f64,
}

impl HeatmapSpec {
    pub fn new(sigma_vox: f64) -> Result<Self, GeometryError> {
        if sigma_vox.is_nan() || sigma_vox <= 0.0 || !sigma_vox.is_finite() {
            return Err(GeometryError::BadSigma(sigma_vox));
        }
        Ok(HeatmapSpec { sigma_vox })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    BadSigma(f64),
    /// Gaussian center outside the target grid.
    CenterOutsideGrid { center: [f64; 3], dims: Dims },
    /// Heatmap has no positive values after clamping negatives to zero.
    NoPeak,
    /// Threshold fraction outside [0, 1).
    BadThreshold(f64),
    /// Point frame inconsistent with the dims an operation was given.
    FrameMismatch { expected: Dims, point: FrameTag },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::BadSigma(s) => write!(f, "sigma must be positive, got {s}"),
            GeometryError::CenterOutsideGrid { center, dims } => {
                write!(f, "center {center:?} outside grid {dims:?}")
            }
            GeometryError::NoPeak => write!(f, "heatmap has no positive peak"),
            GeometryError::BadThreshold(t) => {
                write!(f, "threshold must lie in [0, 1), got {t}")
            }
            GeometryError::FrameMismatch { expected, point } => write!(
                f,
                "point frame {point:?} does not match grid dims {expected:?}"
            ),
        }
    }
}

impl std::error::Error for GeometryError {}

/// Evaluate `exp(-|v - c|^2 / (2 sigma^2))` at every voxel of a grid.
///
/// The kernel is separable, so per-axis factors are precomputed; the peak
/// is exactly 1 when the center sits on a voxel.
pub fn generate_heatmap(
    dims: Dims,
    center: &Point3,
    spec: &HeatmapSpec,
) -> Result<Heatmap, GeometryError> {
    if center.frame != FrameTag::Downsampled(dims) {
        return Err(GeometryError::FrameMismatch {
            expected: dims,
            point: center.frame,
        });
    }
    if !center.inside(dims) {
        return Err(GeometryError::CenterOutsideGrid {
            center: center.coords,
            dims,
        });
    }
    let inv_two_sigma2 = 1.0 / (2.0 * spec.sigma_vox * spec.sigma_vox);
    let factor = |dim: usize, c: f64| -> Vec<f64> {
        (0..dim)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d * inv_two_sigma2).exp()
            })
            .collect()
    };
    let fz = factor(dims[0], center.coords[0]);
    let fy = factor(dims[1], center.coords[1]);
    let fx = factor(dims[2], center.coords[2]);

    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for &ez in &fz {
        for &ey in &fy {
            let ezy = ez * ey;
            for &ex in &fx {
                data.push((ezy * ex) as f32);
            }
        }
    }
    Ok(Volume::new(dims, [1.0, 1.0, 1.0], data).expect("generated grid is valid"))
}

/// Integer coordinates of the maximum element; ties go to the smallest
/// linear index. The result is tagged with the heatmap's grid.
pub fn argmax_location(h: &Heatmap) -> Point3 {
    let mut best = 0usize;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in h.data.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    let [z, y, x] = h.unravel(best);
    Point3::downsampled([z as f64, y as f64, x as f64], h.dims)
}

/// Expectation of a moment-matched Gaussian fit: clamp negatives to zero,
/// keep voxels with value >= tau * max, return the value-weighted centroid.
pub fn gaussian_fit_location(h: &Heatmap, tau: f64) -> Result<Point3, GeometryError> {
    if !(0.0..1.0).contains(&tau) {
        return Err(GeometryError::BadThreshold(tau));
    }
    let max = h.data.iter().fold(0.0f32, |m, &v| m.max(v));
    if max <= 0.0 {
        return Err(GeometryError::NoPeak);
    }
    let thr = tau * max as f64;
    let [_, ny, nx] = h.dims;
    let mut wsum = 0.0f64;
    let mut acc = [0.0f64; 3];
    for (idx, &v) in h.data.iter().enumerate() {
        let w = v.max(0.0) as f64;
        if w >= thr && w > 0.0 {
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            acc[0] += w * z as f64;
            acc[1] += w * y as f64;
            acc[2] += w * x as f64;
            wsum += w;
        }
    }
    Ok(Point3::downsampled(
        [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum],
        h.dims,
    ))
}

/// Map a coordinate between two grids under the voxel-center convention:
/// `x_to = (x_from + 0.5) * (to / from) - 0.5` per axis.
pub fn rescale_point(
    p: &Point3,
    from_dims: Dims,
    to_dims: Dims,
    to_frame: FrameTag,
) -> Result<Point3, GeometryError> {
    if !p.matches_dims(from_dims) {
        return Err(GeometryError::FrameMismatch {
            expected: from_dims,
            point: p.frame,
        });
    }
    let coords = std::array::from_fn(|a| {
        (p.coords[a] + 0.5) * (to_dims[a] as f64 / from_dims[a] as f64) - 0.5
    });
    Ok(Point3::new(coords, to_frame))
}

/// Rescale a full-resolution point into a downsampled grid.
pub fn to_downsampled(
    p: &Point3,
    full_dims: Dims,
    ds_dims: Dims,
) -> Result<Point3, GeometryError> {
    rescale_point(p, full_dims, ds_dims, FrameTag::Downsampled(ds_dims))
}

/// Rescale a downsampled point back into the full-resolution grid.
pub fn to_full_res(p: &Point3, ds_dims: Dims, full_dims: Dims) -> Result<Point3, GeometryError> {
    rescale_point(p, ds_dims, full_dims, FrameTag::FullRes)
}

/// Mirror a volume along the x (last) axis.
pub fn flip_lr(vol: &Volume) -> Volume {
    let [nz, ny, nx] = vol.dims;
    let mut data = Vec::with_capacity(vol.len());
    for z in 0..nz {
        for y in 0..ny {
            let row = (z * ny + y) * nx;
            for x in 0..nx {
                data.push(vol.data[row + (nx - 1 - x)]);
            }
        }
    }
    Volume {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        data,
    }
}

/// Mirror a point along the x axis of a grid: x -> (X - 1) - x.
pub fn flip_lr_point(p: &Point3, dims: Dims) -> Result<Point3, GeometryError> {
    if !p.matches_dims(dims) {
        return Err(GeometryError::FrameMismatch {
            expected: dims,
            point: p.frame,
        });
    }
    Ok(Point3::new(
        [
            p.coords[0],
            p.coords[1],
            (dims[2] - 1) as f64 - p.coords[2],
        ],
        p.frame,
    ))
}
