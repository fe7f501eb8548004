//! Probability-map fusion: padding to a reference lattice, averaging, argmax.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Geometry, Label, LabelMask, LabelSet, ProbabilityMap, VolumeError, VoxelGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("crop does not fit on axis {axis}: offset {offset} + size {size} > target {target}")]
    CropOutOfBounds { axis: usize, offset: usize, size: usize, target: usize },
    #[error("nothing to average")]
    NoMaps,
    #[error("map {index} has {found} classes, expected {expected}")]
    ClassCountMismatch { index: usize, expected: usize, found: usize },
    #[error("map {index} has crop offset {found:?}, expected {expected:?}")]
    OffsetMismatch { index: usize, expected: [usize; 3], found: [usize; 3] },
    #[error("class mapping has {mapping} entries for a {classes}-class map")]
    MappingMismatch { mapping: usize, classes: usize },
    #[error("invalid class mapping: {0}")]
    InvalidMapping(String),
    #[error("spec lists {members} members but {inputs} maps were supplied")]
    InputCountMismatch { members: usize, inputs: usize },
    #[error("member {index} ({member}): {source}")]
    Member { index: usize, member: String, source: Box<EnsembleError> },
}

/// Places a cropped map into `target`, filling the surroundings with one-hot background.
pub fn align_probability_map(map: &ProbabilityMap, target: &Geometry) -> Result<ProbabilityMap, EnsembleError> {
    let offset = map.crop_offset();
    let src = map.geometry();
    for axis in 0..3 {
        if offset[axis] + src.dims[axis] > target.dims[axis] {
            return Err(EnsembleError::CropOutOfBounds {
                axis,
                offset: offset[axis],
                size: src.dims[axis],
                target: target.dims[axis],
            });
        }
    }
    let n = target.voxel_count();
    let mut planes: Vec<Vec<f64>> = (0..map.class_count())
        .map(|c| vec![if c == 0 { 1.0 } else { 0.0 }; n])
        .collect();
    let [sx, sy, sz] = src.dims;
    for (class, plane) in planes.iter_mut().enumerate() {
        let input = map.plane(class);
        for z in 0..sz {
            for y in 0..sy {
                let from = src.index(0, y, z);
                let to = target.index(offset[0], offset[1] + y, offset[2] + z);
                plane[to..to + sx].copy_from_slice(&input[from..from + sx]);
            }
        }
    }
    Ok(ProbabilityMap::new(target.clone(), planes, [0; 3], map.is_normalized())?)
}

/// Per-voxel, per-class arithmetic mean, summed in input order.
pub fn average_probability_maps(maps: &[ProbabilityMap]) -> Result<ProbabilityMap, EnsembleError> {
    let first = maps.first().ok_or(EnsembleError::NoMaps)?;
    for (index, m) in maps.iter().enumerate().skip(1) {
        first.geometry().ensure_compatible(m.geometry())?;
        if m.class_count() != first.class_count() {
            return Err(EnsembleError::ClassCountMismatch {
                index,
                expected: first.class_count(),
                found: m.class_count(),
            });
        }
        if m.crop_offset() != first.crop_offset() {
            return Err(EnsembleError::OffsetMismatch { index, expected: first.crop_offset(), found: m.crop_offset() });
        }
    }
    let count = maps.len() as f64;
    let n = first.geometry().voxel_count();
    let planes: Vec<Vec<f64>> = (0..first.class_count())
        .map(|class| {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut sum = 0.0f64;
                    for m in maps {
                        sum += m.plane(class)[i];
                    }
                    // keep rounding drift inside [0, 1]
                    (sum / count).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let normalized = maps.iter().all(ProbabilityMap::is_normalized);
    Ok(ProbabilityMap::new(first.geometry().clone(), planes, first.crop_offset(), normalized)?)
}

/// Class index to mask label; class 0 is always background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMapping(Vec<Label>);

impl ClassMapping {
    /// `labels[i]` is the label for class `i + 1`.
    pub fn new(labels: Vec<Label>) -> Result<Self, EnsembleError> {
        if labels.is_empty() {
            return Err(EnsembleError::InvalidMapping("no foreground classes".into()));
        }
        if labels.contains(&0) {
            return Err(EnsembleError::InvalidMapping("foreground classes must map to nonzero labels".into()));
        }
        let mut v = vec![0];
        v.extend(labels);
        Ok(Self(v))
    }

    /// Identity over `classes` classes: class `c` becomes label `c`.
    pub fn identity(classes: usize) -> Self {
        Self((0..classes).map(|c| c as Label).collect())
    }

    pub fn class_count(&self) -> usize {
        self.0.len()
    }

    pub fn label_of(&self, class: usize) -> Label {
        self.0[class]
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(self.0[1..].iter().copied()).expect("foreground labels are nonzero")
    }
}

impl Default for ClassMapping {
    /// Background, GTVp, GTVn.
    fn default() -> Self {
        Self::identity(3)
    }
}

/// Index of the largest probability; ties go to the lowest class index.
pub fn argmax_class(probabilities: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (c, p) in probabilities.into_iter().enumerate() {
        if p > best_value {
            best = c;
            best_value = p;
        }
    }
    best
}

pub fn argmax_segmentation(map: &ProbabilityMap, mapping: &ClassMapping) -> Result<LabelMask, EnsembleError> {
    if mapping.class_count() != map.class_count() {
        return Err(EnsembleError::MappingMismatch { mapping: mapping.class_count(), classes: map.class_count() });
    }
    let n = map.geometry().voxel_count();
    let values: Vec<Label> = (0..n)
        .into_par_iter()
        .map(|i| mapping.label_of(argmax_class(map.planes().iter().map(|p| p[i]))))
        .collect();
    Ok(LabelMask::new(VoxelGrid::new(map.geometry().clone(), values)?, mapping.label_set())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    #[default]
    Average,
}

/// One probability-map source: which model family produced it and from which fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub family: String,
    pub fold: Option<u32>,
    pub source: String,
}

impl fmt::Display for EnsembleMember {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fold {
            Some(fold) => write!(f, "{}@{} ({})", self.family, fold, self.source),
            None => write!(f, "{} ({})", self.family, self.source),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    pub mode: EnsembleMode,
    pub target: Geometry,
    pub mapping: ClassMapping,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub mask: LabelMask,
    pub averaged: ProbabilityMap,
    /// Families in the order they were averaged, with member counts.
    pub families: Vec<(String, usize)>,
}

/// Aligns members, averages within each family, averages the family means, then takes argmax.
///
/// `inputs[i]` is the map for `spec.members[i]`. Families are ordered by first appearance.
pub fn run_ensemble(spec: &EnsembleSpec, inputs: &[ProbabilityMap]) -> Result<EnsembleOutput, EnsembleError> {
    if spec.members.is_empty() {
        return Err(EnsembleError::NoMaps);
    }
    if spec.members.len() != inputs.len() {
        return Err(EnsembleError::InputCountMismatch { members: spec.members.len(), inputs: inputs.len() });
    }
    let wrap = |index: usize, source: EnsembleError| EnsembleError::Member {
        index,
        member: spec.members[index].to_string(),
        source: Box::new(source),
    };
    let classes = inputs[0].class_count();
    for (index, m) in inputs.iter().enumerate() {
        if m.class_count() != classes {
            return Err(wrap(index, EnsembleError::ClassCountMismatch { index, expected: classes, found: m.class_count() }));
        }
    }
    let aligned = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| align_probability_map(m, &spec.target).map_err(|e| wrap(i, e)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut families: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, member) in spec.members.iter().enumerate() {
        match families.iter_mut().find(|(name, _)| *name == member.family) {
            Some((_, idx)) => idx.push(i),
            None => families.push((member.family.clone(), vec![i])),
        }
    }
    let family_means = families
        .iter()
        .map(|(_, idx)| {
            let group: Vec<ProbabilityMap> = idx.iter().map(|&i| aligned[i].clone()).collect();
            average_probability_maps(&group).map_err(|e| wrap(idx[0], e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let averaged = if family_means.len() == 1 {
        family_means.into_iter().next().expect("one family")
    } else {
        average_probability_maps(&family_means)?
    };
    let mask = argmax_segmentation(&averaged, &spec.mapping)?;
    Ok(EnsembleOutput {
        mask,
        averaged,
        families: families.into_iter().map(|(name, idx)| (name, idx.len())).collect(),
    })
}
