//! Synthetic mask degradations that emulate segmentation error modes
//! (reduced, expanded, shifted, missing and merged masks).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::morphology::{dilate, drop_smallest_components, erode, translate};
use super::overlap::boundary_voxels;
use crate::error::{Error, Result};
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Erode,
    Dilate,
    DropComponent,
    Translate,
    MergeNeighbor,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Erode,
        DegradationKind::Dilate,
        DegradationKind::DropComponent,
        DegradationKind::Translate,
        DegradationKind::MergeNeighbor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Erode => "erode",
            DegradationKind::Dilate => "dilate",
            DegradationKind::DropComponent => "drop_component",
            DegradationKind::Translate => "translate",
            DegradationKind::MergeNeighbor => "merge_neighbor",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown degradation kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Iterations, voxels or component count depending on `kind`.
    pub magnitude: u32,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, magnitude: u32) -> Self {
        Self { kind, magnitude, seed: 0 }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Applies `spec` to a binary mask. Deterministic in `(mask, spec)`;
/// magnitude 0 is the identity for every kind.
pub fn degrade(mask: &Mask, spec: &DegradationSpec) -> Mask {
    degrade_with_neighbors(mask, spec, &[])
}

/// Like [`degrade`], but `merge_neighbor` draws its blob from the given
/// neighbouring structures (the part of a seed-chosen neighbour within
/// `magnitude` dilation steps of the mask) when any of them is close enough.
/// Without usable neighbours a synthetic ball is merged instead.
pub fn degrade_with_neighbors(mask: &Mask, spec: &DegradationSpec, neighbors: &[&Mask]) -> Mask {
    let mut out = match spec.kind {
        _ if spec.magnitude == 0 => binary(mask),
        DegradationKind::Erode => erode(mask, spec.magnitude),
        DegradationKind::Dilate => dilate(mask, spec.magnitude),
        DegradationKind::DropComponent => drop_smallest_components(mask, spec.magnitude as usize),
        DegradationKind::Translate => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let axis = rng.gen_range(0..3);
            let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
            translate(mask, axis, sign * spec.magnitude as isize)
        }
        DegradationKind::MergeNeighbor => merge_neighbor(mask, spec, neighbors),
    };
    out.id = format!("{}~{}{}", mask.id, spec.kind, spec.magnitude);
    out.class_id = mask.class_id;
    out
}

fn binary(mask: &Mask) -> Mask {
    Mask { data: mask.data.iter().map(|&v| (v != 0) as u8).collect(), ..mask.clone() }
}

fn merge_neighbor(mask: &Mask, spec: &DegradationSpec, neighbors: &[&Mask]) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = binary(mask);
    if !neighbors.is_empty() {
        let reach = dilate(mask, spec.magnitude);
        let candidates: Vec<Vec<usize>> = neighbors
            .iter()
            .map(|n| {
                n.data
                    .iter()
                    .zip(&reach.data)
                    .enumerate()
                    .filter(|(_, (&a, &b))| a != 0 && b != 0)
                    .map(|(i, _)| i)
                    .collect()
            })
            .filter(|v: &Vec<usize>| !v.is_empty())
            .collect();
        if !candidates.is_empty() {
            let pick = &candidates[rng.gen_range(0..candidates.len())];
            for &i in pick {
                out.data[i] = 1;
            }
            return out;
        }
    }

    let boundary = boundary_voxels(mask);
    if boundary.is_empty() {
        return out;
    }
    let anchor = boundary[rng.gen_range(0..boundary.len())];
    let axis = rng.gen_range(0..3);
    let sign: isize = if rng.gen_bool(0.5) { 1 } else { -1 };
    let r = spec.magnitude as isize;
    let mut centre = [anchor[0] as isize, anchor[1] as isize, anchor[2] as isize];
    centre[axis] += sign * r;
    let [nz, ny, nx] = mask.shape;
    for z in (centre[0] - r).max(0)..=(centre[0] + r).min(nz as isize - 1) {
        for y in (centre[1] - r).max(0)..=(centre[1] + r).min(ny as isize - 1) {
            for x in (centre[2] - r).max(0)..=(centre[2] + r).min(nx as isize - 1) {
                let d2 = (z - centre[0]).pow(2) + (y - centre[1]).pow(2) + (x - centre[2]).pow(2);
                if d2 <= r * r {
                    out.set(z as usize, y as usize, x as usize, 1);
                }
            }
        }
    }
    out
}
