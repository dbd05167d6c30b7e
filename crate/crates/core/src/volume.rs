//! Volumetric data model: intensity volumes, label masks, class vocabulary and
//! subject metadata.
//!
//! All grids are stored row-major with shape `(z, y, x)`; `x` varies fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape = [usize; 3];
pub type Spacing = [f64; 3];

#[inline]
pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub(crate) fn index(shape: Shape, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// 3D scalar image (Hounsfield units for CT).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub shape: Shape,
    pub spacing: Spacing,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, shape: Shape, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        validate_grid(shape, data.len())?;
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { id: id.into(), shape, spacing, data })
    }

    pub fn filled(id: impl Into<String>, shape: Shape, spacing: Spacing, value: f32) -> Self {
        Self { id: id.into(), shape, spacing, data: vec![value; voxel_count(shape)] }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[index(self.shape, z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[z * plane..(z + 1) * plane]
    }
}

/// Label grid. Either multi-class (`class_id == None`, values are class ids,
/// 0 = background) or binary for a single class (`class_id == Some(k)`,
/// values in {0, 1}).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub id: String,
    pub shape: Shape,
    pub class_id: Option<u8>,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(id: impl Into<String>, shape: Shape, class_id: Option<u8>, data: Vec<u8>) -> Result<Self> {
        validate_grid(shape, data.len())?;
        if class_id.is_some() && data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("binary mask contains values other than 0/1".into()));
        }
        Ok(Self { id: id.into(), shape, class_id, data })
    }

    pub fn empty(id: impl Into<String>, shape: Shape, class_id: Option<u8>) -> Self {
        Self { id: id.into(), shape, class_id, data: vec![0; voxel_count(shape)] }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[index(self.shape, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: u8) {
        let i = index(self.shape, z, y, x);
        self.data[i] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Binary view of one class. For a binary mask of the same class this is a
    /// copy; for a multi-class mask it selects voxels equal to `class_id`.
    pub fn binary_for(&self, class_id: u8) -> Mask {
        let data = match self.class_id {
            Some(k) if k == class_id => self.data.iter().map(|&v| (v != 0) as u8).collect(),
            Some(_) => vec![0; self.data.len()],
            None => self.data.iter().map(|&v| (v == class_id) as u8).collect(),
        };
        Mask { id: format!("{}#{class_id}", self.id), shape: self.shape, class_id: Some(class_id), data }
    }

    /// Explodes a multi-class mask into one binary mask per class present.
    pub fn explode(&self) -> Vec<Mask> {
        let mut present = [false; 256];
        for &v in &self.data {
            present[v as usize] = true;
        }
        (1..=255u8).filter(|&k| present[k as usize]).map(|k| self.binary_for(k)).collect()
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    /// Whether slice `z` holds any foreground voxel.
    pub fn slice_occupied(&self, z: usize) -> bool {
        self.slice(z).iter().any(|&v| v != 0)
    }

    /// Inclusive z-range of non-empty slices, `None` for an empty mask.
    pub fn z_extent(&self) -> Option<(usize, usize)> {
        let occupied: Vec<usize> = (0..self.shape[0]).filter(|&z| self.slice_occupied(z)).collect();
        Some((*occupied.first()?, *occupied.last()?))
    }
}

fn validate_grid(shape: Shape, len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("shape must be positive, got {shape:?}")));
    }
    if voxel_count(shape) != len {
        return Err(Error::PayloadMismatch { expected: voxel_count(shape), actual: len });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
}

/// Ordered class list; ids run 1..=n.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

impl ClassVocabulary {
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries: Vec<ClassEntry> = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| ClassEntry { id: (i + 1) as u8, name: n.into() })
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() || entries.len() > 255 {
            return Err(Error::InvalidArgument(format!("vocabulary size must be 1..=255, got {}", entries.len())));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i + 1 {
                return Err(Error::InvalidArgument(format!("class ids must be contiguous from 1, got {} at {i}", e.id)));
            }
            if e.name.trim().is_empty() || !names.insert(e.name.clone()) {
                return Err(Error::InvalidArgument(format!("class names must be unique and non-empty: {:?}", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.entries.get((id as usize).checked_sub(1)?).map(|e| e.name.as_str())
    }

    pub fn contains(&self, id: u8) -> bool {
        id >= 1 && (id as usize) <= self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub volume_id: String,
    pub sex: Sex,
    /// Years; `None` when unknown.
    pub age: Option<f64>,
}

impl SubjectMeta {
    pub fn validate(&self) -> Result<()> {
        match self.age {
            Some(a) if !(a >= 0.0) => Err(Error::InvalidArgument(format!("negative age for {}", self.volume_id))),
            _ => Ok(()),
        }
    }
}
