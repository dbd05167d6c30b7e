//! Slice extraction: HU windowing, mask-centred square crops, resampling to the
//! fixed model resolution, and uniform slice sampling along z.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

/// Side length of every model input plane.
pub const SLICE_SIZE: usize = 256;
pub const HU_MIN: f32 = -200.0;
pub const HU_MAX: f32 = 200.0;
/// Crop side as a multiple of the larger bounding-box side.
pub const CROP_MARGIN: f64 = 1.5;

/// Two-channel model input. Channel 0 is the windowed image in `[0, 1]`,
/// channel 1 the binary mask; both `SLICE_SIZE x SLICE_SIZE`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub pixels: Vec<f32>,
    pub class_id: u8,
    pub z_index: usize,
    pub volume_id: String,
}

impl SlicePair {
    pub const PLANE: usize = SLICE_SIZE * SLICE_SIZE;

    pub fn image(&self) -> &[f32] {
        &self.pixels[..Self::PLANE]
    }

    pub fn mask(&self) -> &[f32] {
        &self.pixels[Self::PLANE..]
    }
}

/// Linear window `[HU_MIN, HU_MAX] -> [0, 1]`.
#[inline]
pub fn normalize_hu(hu: f32) -> f32 {
    if hu.is_nan() {
        return 0.0;
    }
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

/// Builds the model input for slice `z` of `image`, cropped around the
/// foreground of `class_id` in `mask`.
///
/// Returns [`Error::EmptySlice`] when the class has no voxels on that slice.
pub fn preprocess_pair(image: &Volume, mask: &Mask, z: usize, class_id: u8) -> Result<SlicePair> {
    if image.shape != mask.shape {
        return Err(Error::ShapeMismatch(image.shape, mask.shape));
    }
    let [nz, ny, nx] = image.shape;
    if z >= nz {
        return Err(Error::InvalidArgument(format!("slice {z} outside volume depth {nz}")));
    }
    let binary = mask.binary_for(class_id);
    let plane = binary.slice(z);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..ny {
        for x in 0..nx {
            if plane[y * nx + x] != 0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::EmptySlice { z, class_id });
    }

    let cy = (y0 + y1) as f64 / 2.0;
    let cx = (x0 + x1) as f64 / 2.0;
    let side = ((y1 - y0 + 1).max(x1 - x0 + 1)) as f64 * CROP_MARGIN;
    let step = side / SLICE_SIZE as f64;
    let top = cy - side / 2.0;
    let left = cx - side / 2.0;

    let img: Vec<f32> = image.slice(z).iter().map(|&v| normalize_hu(v)).collect();
    let mut pixels = vec![0f32; 2 * SlicePair::PLANE];
    let (img_out, mask_out) = pixels.split_at_mut(SlicePair::PLANE);
    let inside = |s: f64, n: usize| s >= -0.5 && s < n as f64 - 0.5;

    for u in 0..SLICE_SIZE {
        let sy = top + (u as f64 + 0.5) * step;
        if !inside(sy, ny) {
            continue;
        }
        let yf = sy.clamp(0.0, (ny - 1) as f64);
        let ya = yf.floor() as usize;
        let yb = (ya + 1).min(ny - 1);
        let wy = (yf - ya as f64) as f32;
        let yn = (sy.round().max(0.0) as usize).min(ny - 1);
        for v in 0..SLICE_SIZE {
            let sx = left + (v as f64 + 0.5) * step;
            if !inside(sx, nx) {
                continue;
            }
            let xf = sx.clamp(0.0, (nx - 1) as f64);
            let xa = xf.floor() as usize;
            let xb = (xa + 1).min(nx - 1);
            let wx = (xf - xa as f64) as f32;
            let top_row = img[ya * nx + xa] * (1.0 - wx) + img[ya * nx + xb] * wx;
            let bottom_row = img[yb * nx + xa] * (1.0 - wx) + img[yb * nx + xb] * wx;
            img_out[u * SLICE_SIZE + v] = (top_row * (1.0 - wy) + bottom_row * wy).clamp(0.0, 1.0);
            let xn = (sx.round().max(0.0) as usize).min(nx - 1);
            mask_out[u * SLICE_SIZE + v] = (plane[yn * nx + xn] != 0) as u8 as f32;
        }
    }

    Ok(SlicePair { pixels, class_id, z_index: z, volume_id: image.id.clone() })
}

/// Picks up to `k` slice indices spread uniformly (inclusive endpoints,
/// round-half-away) over the non-empty slices of `class_id`.
///
/// For a contiguous mask this is `round(linspace(z_first, z_last, k))`.
/// With `k == 1` the midpoint is returned.
pub fn sample_slices(mask: &Mask, class_id: u8, k: usize) -> Result<Vec<usize>> {
    let binary = mask.binary_for(class_id);
    let occupied: Vec<usize> = (0..binary.shape[0]).filter(|&z| binary.slice_occupied(z)).collect();
    if occupied.is_empty() {
        return Err(Error::EmptyMask(class_id));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if occupied.len() <= k {
        return Ok(occupied);
    }
    let last = (occupied.len() - 1) as f64;
    let mut picked: Vec<usize> = if k == 1 {
        let mid = (occupied[0] + occupied[occupied.len() - 1]) as f64 / 2.0;
        // nearest occupied slice to the midpoint
        let z = occupied
            .iter()
            .copied()
            .min_by(|a, b| (*a as f64 - mid).abs().total_cmp(&(*b as f64 - mid).abs()).then(b.cmp(a)))
            .unwrap();
        vec![z]
    } else {
        (0..k)
            .map(|i| {
                let pos = (last * i as f64 / (k - 1) as f64).round() as usize;
                occupied[pos]
            })
            .collect()
    };
    picked.dedup();
    Ok(picked)
}
