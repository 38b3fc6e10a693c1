//! Tri-plane slicing and conversion to backbone-ready 3-channel images.

mod cache;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClassLabel, MriVolume};

pub use cache::{PatchCache, PatchCacheEntry, MANIFEST_FILE};

/// Per-channel ImageNet statistics the pretrained backbones expect.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_SIDE: usize = 224;
pub const MIN_SIDE: usize = 8;

/// Anatomical plane. A volume indexed (X, Y, Z) is sliced along Z for
/// axial, Y for coronal and X for sagittal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis normal to the plane.
    pub fn normal_axis(self) -> usize {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Axial => 2,
        }
    }

    fn key(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Plane::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| format!("unknown plane {s:?}"))
    }
}

/// Where a patch came from. Ordered by (subject, plane, slice).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchMeta {
    pub subject_id: String,
    pub plane: Plane,
    pub slice_index: usize,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanePatch {
    pub pixels: Array2<f32>,
    pub meta: PatchMeta,
}

/// Every slice of `vol` along `plane`, in ascending slice order.
pub fn extract_plane_slices(vol: &MriVolume, plane: Plane) -> Vec<PlanePatch> {
    let axis = Axis(plane.normal_axis());
    vol.voxels
        .axis_iter(axis)
        .enumerate()
        .map(|(slice_index, view)| PlanePatch {
            pixels: view.to_owned(),
            meta: PatchMeta {
                subject_id: vol.subject_id.clone(),
                plane,
                slice_index,
                label: vol.label,
            },
        })
        .collect()
}

/// The `window` slices centred on the middle of `slices`, or all of them
/// when the window is at least as long as the list.
pub fn select_patches(slices: Vec<PlanePatch>, window: usize) -> Result<Vec<PlanePatch>> {
    if slices.is_empty() || window == 0 {
        return Err(Error::EmptyInput);
    }
    if window >= slices.len() {
        return Ok(slices);
    }
    let start = (slices.len() - window) / 2;
    Ok(slices.into_iter().skip(start).take(window).collect())
}

/// Min-max scale to [0, 1]. A constant image maps to zeros.
pub fn min_max_normalize(pixels: &Array2<f32>) -> Result<Array2<f32>> {
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("patch pixels".into()));
    }
    let (lo, hi) = pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(Array2::zeros(pixels.raw_dim()));
    }
    Ok(pixels.mapv(|v| (v - lo) / range))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
        let top = src[[y0, x0]] * (1.0 - dx) + src[[y0, x1]] * dx;
        let bottom = src[[y1, x0]] * (1.0 - dx) + src[[y1, x1]] * dx;
        top * (1.0 - dy) + bottom * dy
    })
}

/// Normalise, resize to `side`×`side` and replicate to 3 channels, without
/// the ImageNet standardisation step.
pub fn to_unit_rgb(pixels: &Array2<f32>, side: usize) -> Result<Array3<f32>> {
    if side < MIN_SIDE {
        return Err(Error::ShapeMismatch(format!("network input side {side} is below {MIN_SIDE}")));
    }
    let unit = resize_bilinear(&min_max_normalize(pixels)?, side, side);
    let mut out = Array3::zeros((3, side, side));
    for c in 0..3 {
        out.slice_mut(s![c, .., ..]).assign(&unit);
    }
    Ok(out)
}

/// Full conversion to a (3, side, side) ImageNet-standardised tensor.
pub fn to_network_input(patch: &PlanePatch, side: usize) -> Result<Array3<f32>> {
    let mut img = to_unit_rgb(&patch.pixels, side)?;
    for (c, mut channel) in img.outer_iter_mut().enumerate() {
        channel.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
    }
    Ok(img)
}

/// Slice, window and convert one volume across all three planes. Output is
/// ordered by plane then slice index.
pub fn preprocess_volume(vol: &MriVolume, window: usize, side: usize) -> Result<Vec<(PatchMeta, Array3<f32>)>> {
    let mut out = Vec::new();
    for plane in Plane::ALL {
        for patch in select_patches(extract_plane_slices(vol, plane), window)? {
            let input = to_network_input(&patch, side)?;
            out.push((patch.meta, input));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ramp(x: usize, y: usize, z: usize) -> MriVolume {
        let v = Array3::from_shape_fn((x, y, z), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        MriVolume::new(v, "S1", ClassLabel::Mild).unwrap()
    }

    #[test]
    fn slice_shapes() {
        let vol = ramp(4, 5, 6);
        let axial = extract_plane_slices(&vol, Plane::Axial);
        assert_eq!(axial.len(), 6);
        assert!(axial.iter().all(|p| p.pixels.dim() == (4, 5)));
        let sagittal = extract_plane_slices(&vol, Plane::Sagittal);
        assert_eq!(sagittal.len(), 4);
        assert!(sagittal.iter().all(|p| p.pixels.dim() == (5, 6)));
        let coronal = extract_plane_slices(&vol, Plane::Coronal);
        assert_eq!(coronal.len(), 5);
        assert!(coronal.iter().all(|p| p.pixels.dim() == (4, 6)));
        assert_eq!(coronal[3].pixels[[2, 1]], 231.0);
        assert!(axial.iter().enumerate().all(|(i, p)| p.meta.slice_index == i
            && p.meta.subject_id == "S1"
            && p.meta.label == ClassLabel::Mild
            && p.meta.plane == Plane::Axial));
    }

    #[test]
    fn constant_volume_gives_constant_patches() {
        let vol = MriVolume::new(Array3::from_elem((3, 4, 5), 7.5), "C", ClassLabel::Nondemented).unwrap();
        for plane in Plane::ALL {
            for p in extract_plane_slices(&vol, plane) {
                assert!(p.pixels.iter().all(|&v| v == 7.5));
            }
        }
    }

    fn indices(v: &[PlanePatch]) -> Vec<usize> {
        v.iter().map(|p| p.meta.slice_index).collect()
    }

    #[test]
    fn centre_window() {
        let vol = ramp(2, 2, 6);
        let six = extract_plane_slices(&vol, Plane::Axial);
        assert_eq!(indices(&select_patches(six.clone(), 2).unwrap()), vec![2, 3]);
        let five = extract_plane_slices(&ramp(2, 2, 5), Plane::Axial);
        assert_eq!(indices(&select_patches(five, 1).unwrap()), vec![2]);
        let three = extract_plane_slices(&ramp(2, 2, 3), Plane::Axial);
        assert_eq!(indices(&select_patches(three, 10).unwrap()), vec![0, 1, 2]);
        assert!(matches!(select_patches(Vec::new(), 3), Err(Error::EmptyInput)));
    }

    #[test]
    fn constant_patch_normalises_to_zero() {
        let img = to_unit_rgb(&Array2::from_elem((9, 9), 3.0), 16).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_size_resize_is_identity_and_channels_replicate() {
        let pixels = Array2::from_shape_fn((8, 8), |(i, j)| ((i + j) % 2) as f32);
        let img = to_unit_rgb(&pixels, 8).unwrap();
        for c in 0..3 {
            assert_eq!(img.slice(s![c, .., ..]), pixels);
        }
    }

    #[test]
    fn min_max_endpoints_survive() {
        let n = min_max_normalize(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(n, array![[0.0, 1.0], [1.0, 0.0]]);
        let n = min_max_normalize(&array![[-4.0, 6.0], [1.0, -4.0]]).unwrap();
        assert_eq!(n, array![[0.0, 1.0], [0.5, 0.0]]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            min_max_normalize(&array![[0.0, f32::NAN]]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(to_unit_rgb(&array![[0.0, 1.0]], 4).is_err());
    }

    #[test]
    fn standardisation_uses_imagenet_stats() {
        let pixels = Array2::from_shape_fn((8, 8), |(i, _)| i as f32);
        let patch = PlanePatch {
            pixels,
            meta: PatchMeta { subject_id: "S".into(), plane: Plane::Axial, slice_index: 0, label: ClassLabel::Mild },
        };
        let x = to_network_input(&patch, 8).unwrap();
        assert_eq!(x.dim(), (3, 8, 8));
        for c in 0..3 {
            let expected = (1.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!((x[[c, 7, 0]] - expected).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn slice_counts_sum_to_extents(x in 1usize..7, y in 1usize..7, z in 1usize..7) {
            let vol = ramp(x, y, z);
            let total: usize = Plane::ALL.iter().map(|&p| extract_plane_slices(&vol, p).len()).sum();
            prop_assert_eq!(total, x + y + z);
        }

        #[test]
        fn axial_restack_is_lossless(x in 1usize..6, y in 1usize..6, z in 1usize..6) {
            let vol = ramp(x, y, z);
            let slices = extract_plane_slices(&vol, Plane::Axial);
            let views: Vec<_> = slices.iter().map(|p| p.pixels.view()).collect();
            let restacked = ndarray::stack(Axis(2), &views).unwrap();
            prop_assert_eq!(restacked, vol.voxels);
        }

        #[test]
        fn unit_image_in_range(h in 1usize..12, w in 1usize..12, side in 8usize..20, seed in any::<u32>()) {
            let pixels = Array2::from_shape_fn((h, w), |(i, j)| (((i * 13 + j * 7) as u32 ^ seed) % 97) as f32 - 40.0);
            let img = to_unit_rgb(&pixels, side).unwrap();
            prop_assert!(img.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }

        #[test]
        fn window_is_contiguous(n in 1usize..40, k in 1usize..50) {
            let vol = ramp(1, 1, n);
            let picked = select_patches(extract_plane_slices(&vol, Plane::Axial), k).unwrap();
            let idx = indices(&picked);
            prop_assert_eq!(idx.len(), k.min(n));
            prop_assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }
}
