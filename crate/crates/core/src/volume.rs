//! Volumetric grids and coordinate-frame geometry.
//!
//! A [`Volume`] is a dense 3D scalar grid with physical voxel spacing. The
//! axis order is fixed as (z, y, x) with x the fastest-varying axis in
//! memory and x the patient left-right direction, so a left-right flip is
//! always a mirror of the last axis.
//!
//! Continuous coordinates carry an explicit [`FrameTag`] so that points in
//! the full-resolution grid and points in a downsampled grid can never be
//! mixed silently. All resampling and point rescaling uses the voxel-center
//! convention `p_in = (p_out + 0.5) * (in_dim / out_dim) - 0.5`, which makes
//! identity resampling exact and frame rescaling invertible.

use std::fmt;

/// Grid dimensions as (z, y, x) voxel counts.
pub type Dims = [usize; 3];

/// Physical voxel spacing as (z, y, x) millimetres per voxel.
pub type Spacing = [f64; 3];

/// The coordinate frame a continuous point lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FrameTag {
    /// Voxel-index space of the original full-resolution grid.
    FullRes,
    /// Voxel-index space of a downsampled grid with the given dims.
    Downsampled(Dims),
}

/// A continuous 3D location in voxel-index units, tagged with its frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point3 {
    /// (z, y, x) coordinates in voxel-index units.
    pub coords: [f64; 3],
    pub frame: FrameTag,
}

impl Point3 {
    pub fn new(coords: [f64; 3], frame: FrameTag) -> Self {
        Point3 { coords, frame }
    }

    pub fn full_res(coords: [f64; 3]) -> Self {
        Point3::new(coords, FrameTag::FullRes)
    }

    pub fn downsampled(coords: [f64; 3], dims: Dims) -> Self {
        Point3::new(coords, FrameTag::Downsampled(dims))
    }

    /// Whether this point may index a volume with the given dims.
    ///
    /// `Downsampled` points must match the dims exactly; `FullRes` carries
    /// no dims and is accepted against any grid the caller designates as
    /// the full-resolution one.
    pub fn matches_dims(&self, dims: Dims) -> bool {
        match self.frame {
            FrameTag::FullRes => true,
            FrameTag::Downsampled(d) => d == dims,
        }
    }

    /// True if every coordinate lies within the voxel-center range
    /// `[0, dim - 1]` of the given grid.
    pub fn inside(&self, dims: Dims) -> bool {
        self.coords
            .iter()
            .zip(dims.iter())
            .all(|(&c, &d)| c >= 0.0 && c <= (d - 1) as f64)
    }
}

/// A dense 3D scalar grid: CT intensities, heatmaps, or any derived field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub data: Vec<f32>,
}

/// A binary structure mask on the same grid layout as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeError {
    /// dims/spacing/data fail the basic grid invariants.
    InvalidGrid(String),
    /// A mask payload contained a value other than 0 or 1.
    NonBinaryMask { index: usize, value: u8 },
    /// Intensity window with lo >= hi.
    BadWindow { lo: f64, hi: f64 },
    /// Center of mass requested for a mask with no foreground voxels.
    EmptyMask,
    /// A point's frame does not match the grid it was used with.
    FrameMismatch { expected: Dims, point: FrameTag },
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            VolumeError::NonBinaryMask { index, value } => {
                write!(f, "mask voxel {index} has non-binary value {value}")
            }
            VolumeError::BadWindow { lo, hi } => {
                write!(f, "intensity window requires lo < hi, got [{lo}, {hi}]")
            }
            VolumeError::EmptyMask => write!(f, "mask has no foreground voxels"),
            VolumeError::FrameMismatch { expected, point } => write!(
                f,
                "point frame {point:?} does not match grid dims {expected:?}"
            ),
        }
    }
}

impl std::error::Error for VolumeError {}

fn check_grid(dims: Dims, spacing: Spacing, len: usize) -> Result<(), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidGrid(format!(
            "all dims must be >= 1, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| s.is_nan() || s <= 0.0 || !s.is_finite()) {
        return Err(VolumeError::InvalidGrid(format!(
            "all spacing components must be positive, got {spacing:?}"
        )));
    }
    let expect = dims[0] * dims[1] * dims[2];
    if len != expect {
        return Err(VolumeError::InvalidGrid(format!(
            "data length {len} does not match dims {dims:?} (expected {expect})"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: Dims, spacing_mm: Spacing, data: Vec<f32>) -> Result<Self, VolumeError> {
        check_grid(dims, spacing_mm, data.len())?;
        Ok(Volume {
            dims,
            spacing_mm,
            data,
        })
    }

    /// A volume filled with a constant value.
    pub fn filled(dims: Dims, spacing_mm: Spacing, value: f32) -> Result<Self, VolumeError> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing_mm, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Linear index of voxel (z, y, x); x-fastest layout.
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// (z, y, x) voxel coordinates of a linear index.
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let z = idx / (self.dims[2] * self.dims[1]);
        [z, y, x]
    }
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing_mm: Spacing, data: Vec<u8>) -> Result<Self, VolumeError> {
        check_grid(dims, spacing_mm, data.len())?;
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(VolumeError::NonBinaryMask { index, value });
        }
        Ok(MaskVolume {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }
}

/// Per-axis interpolation support: source indices of the two bracketing
/// voxel centers and the fractional weight of the upper one.
struct AxisLerp {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_lerp(in_dim: usize, out_dim: usize) -> AxisLerp {
    let ratio = in_dim as f64 / out_dim as f64;
    let max = (in_dim - 1) as f64;
    let mut lo = Vec::with_capacity(out_dim);
    let mut hi = Vec::with_capacity(out_dim);
    let mut frac = Vec::with_capacity(out_dim);
    for i in 0..out_dim {
        // Voxel-center convention with clamp-to-edge.
        let c = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
        let f = c.floor();
        let l = f as usize;
        lo.push(l);
        hi.push((l + 1).min(in_dim - 1));
        frac.push(c - f);
    }
    AxisLerp { lo, hi, frac }
}

/// Resample a volume to `target_dims` by trilinear interpolation.
///
/// Output spacing is the input spacing scaled by `in_dim / out_dim` per
/// axis, so the physical extent of the grid is preserved.
pub fn resample_trilinear(vol: &Volume, target_dims: Dims) -> Result<Volume, VolumeError> {
    if target_dims.contains(&0) {
        return Err(VolumeError::InvalidGrid(format!(
            "target dims must be >= 1, got {target_dims:?}"
        )));
    }
    let [iz, iy, ix] = vol.dims;
    let [oz, oy, ox] = target_dims;
    let az = axis_lerp(iz, oz);
    let ay = axis_lerp(iy, oy);
    let ax = axis_lerp(ix, ox);

    let mut out = Vec::with_capacity(oz * oy * ox);
    for z in 0..oz {
        let (z0, z1, fz) = (az.lo[z], az.hi[z], az.frac[z]);
        for y in 0..oy {
            let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
            let base00 = (z0 * iy + y0) * ix;
            let base01 = (z0 * iy + y1) * ix;
            let base10 = (z1 * iy + y0) * ix;
            let base11 = (z1 * iy + y1) * ix;
            for x in 0..ox {
                let (x0, x1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
                let c000 = vol.data[base00 + x0] as f64;
                let c001 = vol.data[base00 + x1] as f64;
                let c010 = vol.data[base01 + x0] as f64;
                let c011 = vol.data[base01 + x1] as f64;
                let c100 = vol.data[base10 + x0] as f64;
                let c101 = vol.data[base10 + x1] as f64;
                let c110 = vol.data[base11 + x0] as f64;
                let c111 = vol.data[base11 + x1] as f64;
                let c00 = c000 + (c001 - c000) * fx;
                let c01 = c010 + (c011 - c010) * fx;
                let c10 = c100 + (c101 - c100) * fx;
                let c11 = c110 + (c111 - c110) * fx;
                let c0 = c00 + (c01 - c00) * fy;
                let c1 = c10 + (c11 - c10) * fy;
                out.push((c0 + (c1 - c0) * fz) as f32);
            }
        }
    }

    let spacing = [
        vol.spacing_mm[0] * iz as f64 / oz as f64,
        vol.spacing_mm[1] * iy as f64 / oy as f64,
        vol.spacing_mm[2] * ix as f64 / ox as f64,
    ];
    Volume::new(target_dims, spacing, out)
}

/// Clamp intensities to `[lo, hi]` and map the window affinely onto `[0, 1]`.
pub fn normalize_hu(vol: &Volume, lo: f64, hi: f64) -> Result<Volume, VolumeError> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(VolumeError::BadWindow { lo, hi });
    }
    let span = hi - lo;
    let data = vol
        .data
        .iter()
        .map(|&v| (((v as f64).clamp(lo, hi) - lo) / span) as f32)
        .collect();
    Volume::new(vol.dims, vol.spacing_mm, data)
}

/// Unweighted mean voxel index of the mask's foreground.
pub fn mask_center_of_mass(mask: &MaskVolume, frame: FrameTag) -> Result<Point3, VolumeError> {
    let [_, ny, nx] = [mask.dims[0], mask.dims[1], mask.dims[2]];
    let mut sum = [0.0f64; 3];
    let mut count = 0u64;
    for (idx, &v) in mask.data.iter().enumerate() {
        if v != 0 {
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            sum[0] += z as f64;
            sum[1] += y as f64;
            sum[2] += x as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(VolumeError::EmptyMask);
    }
    let n = count as f64;
    Ok(Point3::new([sum[0] / n, sum[1] / n, sum[2] / n], frame))
}

/// Extract a `crop_dims` sub-volume centred on `center` (rounded to the
/// nearest voxel), padding out-of-bounds voxels with `pad_value`.
pub fn crop_subvolume(
    vol: &Volume,
    center: &Point3,
    crop_dims: Dims,
    pad_value: f32,
) -> Result<Volume, VolumeError> {
    if !center.matches_dims(vol.dims) {
        return Err(VolumeError::FrameMismatch {
            expected: vol.dims,
            point: center.frame,
        });
    }
    if crop_dims.contains(&0) {
        return Err(VolumeError::InvalidGrid(format!(
            "crop dims must be >= 1, got {crop_dims:?}"
        )));
    }
    let base: [isize; 3] = std::array::from_fn(|a| {
        center.coords[a].round() as isize - (crop_dims[a] / 2) as isize
    });
    let [cz, cy, cx] = crop_dims;
    let mut out = Vec::with_capacity(cz * cy * cx);
    for i in 0..cz {
        let z = base[0] + i as isize;
        for j in 0..cy {
            let y = base[1] + j as isize;
            for k in 0..cx {
                let x = base[2] + k as isize;
                let inside = z >= 0
                    && (z as usize) < vol.dims[0]
                    && y >= 0
                    && (y as usize) < vol.dims[1]
                    && x >= 0
                    && (x as usize) < vol.dims[2];
                out.push(if inside {
                    vol.at(z as usize, y as usize, x as usize)
                } else {
                    pad_value
                });
            }
        }
    }
    Volume::new(crop_dims, vol.spacing_mm, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: Dims) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|_| rng.random_range(-1000.0..1000.0)).collect();
        Volume::new(dims, [1.0, 1.0, 1.0], data).unwrap()
    }

    /// Direct per-voxel trilinear evaluation, independent of the
    /// precomputed-axis implementation.
    fn resample_oracle(vol: &Volume, target: Dims) -> Vec<f32> {
        let [iz, iy, ix] = vol.dims;
        let mut out = Vec::new();
        for z in 0..target[0] {
            for y in 0..target[1] {
                for x in 0..target[2] {
                    let pos = [z, y, x];
                    let src = [iz, iy, ix];
                    let mut c = [0.0f64; 3];
                    for a in 0..3 {
                        let ratio = src[a] as f64 / target[a] as f64;
                        c[a] = ((pos[a] as f64 + 0.5) * ratio - 0.5)
                            .clamp(0.0, (src[a] - 1) as f64);
                    }
                    let mut acc = 0.0f64;
                    for dz in 0..2usize {
                        for dy in 0..2usize {
                            for dx in 0..2usize {
                                let corner = [dz, dy, dx];
                                let mut w = 1.0f64;
                                let mut idx = [0usize; 3];
                                for a in 0..3 {
                                    let f = c[a].floor();
                                    let lo = f as usize;
                                    let hi = (lo + 1).min(src[a] - 1);
                                    let frac = c[a] - f;
                                    if corner[a] == 0 {
                                        w *= 1.0 - frac;
                                        idx[a] = lo;
                                    } else {
                                        w *= frac;
                                        idx[a] = hi;
                                    }
                                }
                                acc += w
                                    * vol.data[(idx[0] * iy + idx[1]) * ix + idx[2]] as f64;
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn volume_rejects_bad_grids() {
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        let err = MaskVolume::new([1, 1, 3], [1.0; 3], vec![0, 1, 2]).unwrap_err();
        assert_eq!(err, VolumeError::NonBinaryMask { index: 2, value: 2 });
    }

    #[test]
    fn resample_preserves_constants() {
        let vol = Volume::filled([4, 6, 8], [1.0; 3], 7.0).unwrap();
        for target in [[2, 3, 4], [4, 6, 8], [7, 5, 3]] {
            let out = resample_trilinear(&vol, target).unwrap();
            assert!(out.data.iter().all(|&v| (v - 7.0).abs() < 1e-6));
        }
    }

    #[test]
    fn resample_identity_when_dims_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vol = random_volume(&mut rng, [5, 6, 7]);
        let out = resample_trilinear(&vol, vol.dims).unwrap();
        for (a, b) in vol.data.iter().zip(out.data.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(out.spacing_mm, vol.spacing_mm);
    }

    #[test]
    fn resample_linear_ramp_downsample() {
        // f(x) = x along the last axis; downsampling 8 -> 4 must match the
        // closed-form interpolation at p_in = (p_out + 0.5) * 2 - 0.5.
        let data: Vec<f32> = (0..8).map(|x| x as f32).collect();
        let vol = Volume::new([1, 1, 8], [1.0; 3], data).unwrap();
        let out = resample_trilinear(&vol, [1, 1, 4]).unwrap();
        for (i, &v) in out.data.iter().enumerate() {
            let expect = ((i as f64 + 0.5) * 2.0 - 0.5).clamp(0.0, 7.0) as f32;
            assert!((v - expect).abs() < 1e-6, "voxel {i}: {v} vs {expect}");
        }
        assert_eq!(out.spacing_mm, [1.0, 1.0, 2.0]);
    }

    #[test]
    fn resample_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (from, to) in [
            ([8usize, 8, 8], [4usize, 4, 4]),
            ([6, 10, 8], [3, 7, 11]),
            ([4, 4, 4], [9, 9, 9]),
        ] {
            let vol = random_volume(&mut rng, from);
            let got = resample_trilinear(&vol, to).unwrap();
            let expect = resample_oracle(&vol, to);
            for (g, e) in got.data.iter().zip(expect.iter()) {
                assert!((g - e).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn resample_bounded_by_input_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let vol = random_volume(&mut rng, [6, 6, 6]);
        let (lo, hi) = vol
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let out = resample_trilinear(&vol, [5, 9, 4]).unwrap();
        for &v in &out.data {
            assert!(v >= lo - 1e-3 && v <= hi + 1e-3);
        }
    }

    #[test]
    fn normalize_windows_and_clamps() {
        let vol = Volume::new(
            [1, 1, 4],
            [1.0; 3],
            vec![-1000.0, 0.0, 1000.0, 4000.0],
        )
        .unwrap();
        let out = normalize_hu(&vol, -1000.0, 1000.0).unwrap();
        assert_eq!(out.data, vec![0.0, 0.5, 1.0, 1.0]);
        assert!(normalize_hu(&vol, 5.0, 5.0).is_err());
    }

    #[test]
    fn center_of_mass_basics() {
        let mut data = vec![0u8; 6 * 7 * 8];
        data[(3 * 7 + 4) * 8 + 5] = 1;
        let mask = MaskVolume::new([6, 7, 8], [1.0; 3], data).unwrap();
        let p = mask_center_of_mass(&mask, FrameTag::FullRes).unwrap();
        assert_eq!(p.coords, [3.0, 4.0, 5.0]);

        let mut data = vec![0u8; 3 * 1 * 1];
        data[0] = 1;
        data[2] = 1;
        let mask = MaskVolume::new([3, 1, 1], [1.0; 3], data).unwrap();
        let p = mask_center_of_mass(&mask, FrameTag::FullRes).unwrap();
        assert_eq!(p.coords, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn center_of_mass_matches_sum_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dims = [5usize, 9, 7];
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.1))).collect();
        if data.iter().all(|&v| v == 0) {
            return;
        }
        let mask = MaskVolume::new(dims, [1.0; 3], data.clone()).unwrap();
        let p = mask_center_of_mass(&mask, FrameTag::FullRes).unwrap();

        // Brute force over all voxels.
        let (mut sz, mut sy, mut sx, mut cnt) = (0.0, 0.0, 0.0, 0.0);
        let mut bbox_min = [usize::MAX; 3];
        let mut bbox_max = [0usize; 3];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    if data[(z * dims[1] + y) * dims[2] + x] != 0 {
                        sz += z as f64;
                        sy += y as f64;
                        sx += x as f64;
                        cnt += 1.0;
                        for (a, v) in [z, y, x].into_iter().enumerate() {
                            bbox_min[a] = bbox_min[a].min(v);
                            bbox_max[a] = bbox_max[a].max(v);
                        }
                    }
                }
            }
        }
        assert!((p.coords[0] - sz / cnt).abs() < 1e-12);
        assert!((p.coords[1] - sy / cnt).abs() < 1e-12);
        assert!((p.coords[2] - sx / cnt).abs() < 1e-12);
        for a in 0..3 {
            assert!(p.coords[a] >= bbox_min[a] as f64 && p.coords[a] <= bbox_max[a] as f64);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mask = MaskVolume::new([2, 2, 2], [1.0; 3], vec![0; 8]).unwrap();
        assert_eq!(
            mask_center_of_mass(&mask, FrameTag::FullRes).unwrap_err(),
            VolumeError::EmptyMask
        );
    }

    #[test]
    fn crop_whole_volume_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for dims in [[4usize, 6, 8], [5, 7, 3]] {
            let vol = random_volume(&mut rng, dims);
            let center = Point3::full_res([
                (dims[0] as f64 - 1.0) / 2.0,
                (dims[1] as f64 - 1.0) / 2.0,
                (dims[2] as f64 - 1.0) / 2.0,
            ]);
            let out = crop_subvolume(&vol, &center, dims, -1024.0).unwrap();
            assert_eq!(out.data, vol.data);
        }
    }

    #[test]
    fn crop_at_corner_pads() {
        let vol = Volume::filled([4, 4, 4], [1.0; 3], 5.0).unwrap();
        let out = crop_subvolume(&vol, &Point3::full_res([0.0; 3]), [3, 3, 3], -1024.0).unwrap();
        // Oracle: count positions whose source index falls outside the grid.
        let mut padded = 0;
        for i in -1i64..2 {
            for j in -1i64..2 {
                for k in -1i64..2 {
                    if i < 0 || j < 0 || k < 0 {
                        padded += 1;
                    }
                }
            }
        }
        assert_eq!(padded, 19);
        assert_eq!(
            out.data.iter().filter(|&&v| v == -1024.0).count(),
            padded
        );
        assert_eq!(out.data.iter().filter(|&&v| v == 5.0).count(), 27 - padded);
    }

    #[test]
    fn crop_single_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let vol = random_volume(&mut rng, [4, 5, 6]);
        let out = crop_subvolume(&vol, &Point3::full_res([2.0, 3.0, 4.0]), [1, 1, 1], 0.0).unwrap();
        assert_eq!(out.data, vec![vol.at(2, 3, 4)]);
    }

    #[test]
    fn crop_rejects_frame_mismatch() {
        let vol = Volume::filled([4, 4, 4], [1.0; 3], 0.0).unwrap();
        let p = Point3::downsampled([1.0; 3], [2, 2, 2]);
        assert!(matches!(
            crop_subvolume(&vol, &p, [1, 1, 1], 0.0),
            Err(VolumeError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn crop_always_returns_requested_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vol = random_volume(&mut rng, [4, 4, 4]);
        for _ in 0..50 {
            let center = Point3::full_res([
                rng.random_range(-3.0..7.0),
                rng.random_range(-3.0..7.0),
                rng.random_range(-3.0..7.0),
            ]);
            let dims = [
                rng.random_range(1..6),
                rng.random_range(1..6),
                rng.random_range(1..6),
            ];
            let out = crop_subvolume(&vol, &center, dims, f32::MIN).unwrap();
            assert_eq!(out.len(), dims[0] * dims[1] * dims[2]);
        }
    }
}
