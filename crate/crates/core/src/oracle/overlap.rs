//! Ground-truth overlap measures between binary masks.

use crate::error::{Error, Result};
use crate::volume::{Mask, Spacing};

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(a.shape, b.shape));
    }
    Ok(())
}

/// Dice similarity `2|A∩B| / (|A| + |B|)`; nonzero voxels are foreground.
///
/// Two empty masks agree vacuously (1.0); exactly one empty mask scores 0.0.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        na += x as u64;
        nb += y as u64;
        both += (x && y) as u64;
    }
    Ok(dice_from_counts(na, nb, both))
}

#[inline]
pub fn dice_from_counts(na: u64, nb: u64, both: u64) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Dice restricted to one z-slice of two same-shaped masks.
pub fn slice_dsc(a: &Mask, b: &Mask, z: usize) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.slice(z).iter().zip(b.slice(z)) {
        let (x, y) = (x != 0, y != 0);
        na += x as u64;
        nb += y as u64;
        both += (x && y) as u64;
    }
    Ok(dice_from_counts(na, nb, both))
}

/// Foreground voxels with at least one face neighbour outside the mask
/// (the volume border counts as outside). Returned as `(z, y, x)`.
pub fn boundary_voxels(m: &Mask) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = m.shape;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(z, y, x) == 0 {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
                let open = edge
                    || m.get(z - 1, y, x) == 0
                    || m.get(z + 1, y, x) == 0
                    || m.get(z, y - 1, x) == 0
                    || m.get(z, y + 1, x) == 0
                    || m.get(z, y, x - 1) == 0
                    || m.get(z, y, x + 1) == 0;
                if open {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Normalized surface distance: the fraction of both boundaries lying within
/// `tolerance` millimetres of the other boundary.
pub fn nsd(a: &Mask, b: &Mask, spacing: Spacing, tolerance: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be non-negative, got {tolerance}")));
    }
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tol2 = tolerance * tolerance;
    let within = |p: &[usize; 3], other: &[[usize; 3]]| {
        other.iter().any(|q| {
            let d: f64 = (0..3)
                .map(|k| {
                    let diff = (p[k] as f64 - q[k] as f64) * spacing[k];
                    diff * diff
                })
                .sum();
            d <= tol2
        })
    };
    let hits_a = ba.iter().filter(|p| within(p, &bb)).count();
    let hits_b = bb.iter().filter(|p| within(p, &ba)).count();
    Ok((hits_a + hits_b) as f64 / (ba.len() + bb.len()) as f64)
}
