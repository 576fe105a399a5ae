//! 3D scalar grids shared by every stage: intensities, heatmaps and masks.
//!
//! Voxels are stored x-fastest: `index = x + width * (y + height * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of slices in a classifier input stack.
pub const MINI_DEPTH: usize = 7;
/// Slices on each side of the center slice.
pub const MINI_HALF: usize = MINI_DEPTH / 2;

/// Grid dimensions `(width, height, depth)` in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Self {
            width,
            height,
            depth,
        }
    }

    pub const fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn slice_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.width * (y + self.height * z)
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.width;
        let rest = index / self.width;
        (x, rest % self.height, rest / self.height)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// A dense 3D grid of finite `f32` values with voxel spacing metadata.
///
/// Masks use the same type with every value in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: Dims,
    spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: Dims) -> Result<Self> {
        Self::with_spacing(data, dims, [1.0; 3])
    }

    pub fn with_spacing(data: Vec<f32>, dims: Dims, spacing: [f32; 3]) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims} ({} voxels)",
                data.len(),
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (x, y, z) = dims.coords(i);
            return Err(Error::DataIntegrity(format!(
                "non-finite value {} at voxel ({x}, {y}, {z})",
                data[i]
            )));
        }
        Ok(Self {
            data,
            dims,
            spacing,
        })
    }

    /// Builds a mask, rejecting any value outside `{0, 1}`.
    pub fn new_mask(data: Vec<f32>, dims: Dims) -> Result<Self> {
        let vol = Self::new(data, dims)?;
        vol.ensure_binary()?;
        Ok(vol)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            data: vec![0.0; dims.len()],
            dims,
            spacing: [1.0; 3],
        }
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        assert!(value.is_finite());
        Self {
            data: vec![value; dims.len()],
            dims,
            spacing: [1.0; 3],
        }
    }

    /// Mask built from a per-voxel predicate over linear indices.
    pub fn mask_from_fn(dims: Dims, mut f: impl FnMut(usize) -> bool) -> Self {
        let data = (0..dims.len()).map(|i| if f(i) { 1.0 } else { 0.0 }).collect();
        Self {
            data,
            dims,
            spacing: [1.0; 3],
        }
    }

    /// Crate-internal constructor for outputs that are finite by construction.
    pub(crate) fn from_parts_unchecked(data: Vec<f32>, dims: Dims, spacing: [f32; 3]) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            data,
            dims,
            spacing,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) {
        self.spacing = spacing;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Contiguous x-row at `(y, z)`.
    #[inline]
    pub fn row(&self, y: usize, z: usize) -> &[f32] {
        let start = self.dims.index(0, y, z);
        &self.data[start..start + self.dims.width]
    }

    /// Contiguous plane at depth `z`.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(i) => {
                let (x, y, z) = self.dims.coords(i);
                Err(Error::DataIntegrity(format!(
                    "mask value {} at voxel ({x}, {y}, {z}) is not 0 or 1",
                    self.data[i]
                )))
            }
        }
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn ensure_same_dims(&self, other: &Volume, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: {} vs {}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Voxelwise map; the closure must keep values finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Volume> {
        Volume::with_spacing(self.data.iter().map(|&v| f(v)).collect(), self.dims, self.spacing)
    }

    /// Voxelwise logical OR of two masks.
    pub fn union(&self, other: &Volume) -> Result<Volume> {
        self.ensure_same_dims(other, "mask union")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| if a != 0.0 || b != 0.0 { 1.0 } else { 0.0 })
            .collect();
        Ok(Volume::from_parts_unchecked(data, self.dims, self.spacing))
    }

    /// Number of voxels nonzero in both grids.
    pub fn overlap(&self, other: &Volume) -> Result<usize> {
        self.ensure_same_dims(other, "mask overlap")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0.0 && b != 0.0)
            .count())
    }
}

/// A 7-slice stack cut from a study around `center_slice`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniVolume {
    volume: Volume,
    center_slice: usize,
}

impl MiniVolume {
    pub fn new(volume: Volume, center_slice: usize) -> Result<Self> {
        if volume.dims().depth != MINI_DEPTH {
            return Err(Error::Shape(format!(
                "mini-volume depth must be {MINI_DEPTH}, got {}",
                volume.dims().depth
            )));
        }
        Ok(Self {
            volume,
            center_slice,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn into_volume(self) -> Volume {
        self.volume
    }

    pub fn center_slice(&self) -> usize {
        self.center_slice
    }

    pub fn dims(&self) -> Dims {
        self.volume.dims()
    }
}

/// Maps Hounsfield units to `[0, 1]` through a linear window.
pub fn hu_window(vol: &Volume, center: f32, width: f32) -> Result<Volume> {
    if !(width > 0.0) || !width.is_finite() || !center.is_finite() {
        return Err(Error::Precondition(format!(
            "window needs finite center and width > 0 (center {center}, width {width})"
        )));
    }
    let low = center - width / 2.0;
    let data = vol
        .data()
        .iter()
        .map(|&hu| ((hu - low) / width).clamp(0.0, 1.0))
        .collect();
    Ok(Volume::from_parts_unchecked(data, vol.dims(), vol.spacing()))
}

/// Default CTPA-style window (center 100, width 400).
pub fn hu_window_default(vol: &Volume) -> Result<Volume> {
    hu_window(vol, 100.0, 400.0)
}

/// Study slice indices covered by the mini-volume centered at `center`,
/// replicating the first/last slice past the study boundaries.
pub fn minivolume_slices(center: usize, study_depth: usize) -> [usize; MINI_DEPTH] {
    let mut out = [0usize; MINI_DEPTH];
    for (k, slot) in out.iter_mut().enumerate() {
        let z = center as isize + k as isize - MINI_HALF as isize;
        *slot = z.clamp(0, study_depth as isize - 1) as usize;
    }
    out
}

pub fn extract_minivolume(study: &Volume, center_slice: usize) -> Result<MiniVolume> {
    let dims = study.dims();
    if center_slice >= dims.depth {
        return Err(Error::Index(format!(
            "center slice {center_slice} outside study depth {}",
            dims.depth
        )));
    }
    let slices = minivolume_slices(center_slice, dims.depth);
    let mut data = Vec::with_capacity(dims.slice_len() * MINI_DEPTH);
    for &z in &slices {
        data.extend_from_slice(study.slice(z));
    }
    let mini_dims = Dims::new(dims.width, dims.height, MINI_DEPTH);
    MiniVolume::new(
        Volume::from_parts_unchecked(data, mini_dims, study.spacing()),
        center_slice,
    )
}

/// Zeroes every voxel where `seg` is set: `vol * (1 - seg)`.
pub fn apply_mask(vol: &Volume, seg: &Volume) -> Result<Volume> {
    vol.ensure_same_dims(seg, "apply_mask")?;
    let data = vol
        .data()
        .iter()
        .zip(seg.data())
        .map(|(&v, &m)| v * (1.0 - m))
        .collect();
    Ok(Volume::from_parts_unchecked(data, vol.dims(), vol.spacing()))
}

/// Centered in-plane crop to at most `w` x `h`; all slices kept.
pub fn center_crop(vol: &Volume, w: usize, h: usize) -> Volume {
    let d = vol.dims();
    let (w, h) = (w.min(d.width), h.min(d.height));
    if (w, h) == (d.width, d.height) {
        return vol.clone();
    }
    let (x0, y0) = ((d.width - w) / 2, (d.height - h) / 2);
    let mut out = Vec::with_capacity(w * h * d.depth);
    for z in 0..d.depth {
        for y in y0..y0 + h {
            out.extend_from_slice(&vol.row(y, z)[x0..x0 + w]);
        }
    }
    Volume::from_parts_unchecked(out, Dims::new(w, h, d.depth), vol.spacing())
}

/// Separable Gaussian blur with edge clamping. `sigma` in voxels, per axis.
pub fn gaussian_blur(vol: &Volume, sigma: [f32; 3]) -> Volume {
    let dims = vol.dims();
    let mut cur = vol.data().to_vec();
    let extents = [dims.width, dims.height, dims.depth];
    let strides = [1, dims.width, dims.slice_len()];
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 || extents[axis] <= 1 {
            continue;
        }
        let radius = (3.0 * s).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius)
            .map(|d| (-(d * d) as f32 / (2.0 * s * s)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        let n = extents[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0f32; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % extents[axis]) as isize;
            let base = i as isize - pos * stride as isize;
            let mut acc = 0.0f32;
            for (k, &w) in kernel.iter().enumerate() {
                let p = (pos + k as isize - radius).clamp(0, n - 1);
                acc += w * cur[(base + p * stride as isize) as usize];
            }
            *out = acc / norm;
        }
        cur = next;
    }
    Volume::from_parts_unchecked(cur, dims, vol.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> Volume {
        Volume::new((0..dims.len()).map(|i| i as f32).collect(), dims).unwrap()
    }

    #[test]
    fn center_crop_keeps_the_middle() {
        let d = Dims::new(6, 4, 2);
        let v = Volume::new((0..d.len()).map(|i| i as f32).collect(), d).unwrap();
        let c = center_crop(&v, 2, 2);
        assert_eq!(c.dims(), Dims::new(2, 2, 2));
        assert_eq!(c.data(), &[8.0, 9.0, 14.0, 15.0, 32.0, 33.0, 38.0, 39.0]);
        assert_eq!(center_crop(&v, 10, 10), v);
    }

    #[test]
    fn window_examples() {
        let dims = Dims::new(4, 1, 1);
        let v = Volume::new(vec![100.0, -100.0, 300.0, 200.0], dims).unwrap();
        let w = hu_window_default(&v).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0, 1.0, 0.75]);
    }

    #[test]
    fn window_rejects_bad_width_and_nonfinite_input() {
        let v = Volume::zeros(Dims::new(1, 1, 1));
        assert!(matches!(hu_window(&v, 0.0, 0.0), Err(Error::Precondition(_))));
        assert!(matches!(
            Volume::new(vec![f32::NAN], Dims::new(1, 1, 1)),
            Err(Error::DataIntegrity(_))
        ));
        assert!(matches!(
            Volume::new(vec![f32::INFINITY, 0.0], Dims::new(2, 1, 1)),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn minivolume_interior_and_edges() {
        let dims = Dims::new(2, 2, 40);
        let study = Volume::new(
            (0..dims.len()).map(|i| (i / dims.slice_len()) as f32).collect(),
            dims,
        )
        .unwrap();
        let slice_ids = |c: usize| -> Vec<f32> {
            let m = extract_minivolume(&study, c).unwrap();
            (0..MINI_DEPTH).map(|z| m.volume().get(0, 0, z)).collect()
        };
        assert_eq!(slice_ids(20), vec![17., 18., 19., 20., 21., 22., 23.]);
        assert_eq!(slice_ids(0), vec![0., 0., 0., 0., 1., 2., 3.]);
        assert_eq!(slice_ids(39), vec![36., 37., 38., 39., 39., 39., 39.]);
        assert!(matches!(extract_minivolume(&study, 40), Err(Error::Index(_))));
    }

    #[test]
    fn mask_examples() {
        let dims = Dims::new(3, 2, 2);
        let v = ramp(dims);
        let none = Volume::zeros(dims);
        let all = Volume::filled(dims, 1.0);
        assert_eq!(apply_mask(&v, &none).unwrap(), v);
        assert_eq!(apply_mask(&v, &all).unwrap().count_nonzero(), 0);
        let wrong = Volume::zeros(Dims::new(2, 3, 2));
        assert!(matches!(apply_mask(&v, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_constructor_rejects_non_binary() {
        let dims = Dims::new(2, 1, 1);
        assert!(Volume::new_mask(vec![0.0, 1.0], dims).is_ok());
        assert!(matches!(
            Volume::new_mask(vec![0.0, 2.0], dims),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn blur_preserves_constants() {
        let v = Volume::filled(Dims::new(5, 4, 3), 0.3);
        let b = gaussian_blur(&v, [1.5, 1.5, 1.0]);
        for &x in b.data() {
            assert!((x - 0.3).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn window_is_monotone_and_saturates(a in -2000.0f32..2000.0, b in -2000.0f32..2000.0,
                                            c in -200.0f32..200.0, w in 1.0f32..1000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v = Volume::new(vec![lo, hi, c - w / 2.0, c + w / 2.0], Dims::new(4, 1, 1)).unwrap();
            let out = hu_window(&v, c, w).unwrap();
            prop_assert!(out.data()[0] <= out.data()[1]);
            prop_assert!(out.data()[2].abs() < 1e-6);
            prop_assert!((out.data()[3] - 1.0).abs() < 1e-5);
        }

        #[test]
        fn minivolume_always_seven_deep(depth in 1usize..20, c in 0usize..20) {
            let study = Volume::zeros(Dims::new(2, 2, depth));
            let center = c % depth;
            let m = extract_minivolume(&study, center).unwrap();
            prop_assert_eq!(m.dims().depth, MINI_DEPTH);
            prop_assert_eq!(m.center_slice(), center);
        }

        #[test]
        fn mask_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 24),
                              vals in proptest::collection::vec(-5.0f32..5.0, 24)) {
            let dims = Dims::new(2, 3, 4);
            let v = Volume::new(vals, dims).unwrap();
            let s = Volume::mask_from_fn(dims, |i| bits[i]);
            let once = apply_mask(&v, &s).unwrap();
            let twice = apply_mask(&once, &s).unwrap();
            prop_assert_eq!(&once, &twice);
            for (i, &x) in once.data().iter().enumerate() {
                if bits[i] { prop_assert_eq!(x, 0.0); }
                if v.data()[i] == 0.0 { prop_assert_eq!(x, 0.0); }
            }
        }
    }
}
