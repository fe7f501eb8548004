//! Voxel lattice data model and exact integer set operations.
//!
//! Values are stored flattened with the first axis varying fastest:
//! the voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`. NIfTI stores
//! its payload in the same order, so no transposition happens on I/O.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer class label carried by a mask voxel. `0` is background.
pub type Label = u8;

/// Primary gross tumor volume.
pub const GTVP: Label = 1;
/// Metastatic lymph node gross tumor volume.
pub const GTVN: Label = 2;

/// Tolerance for spacing, origin (mm) and direction cosines when comparing grids.
pub const GEOMETRY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("value count {actual} does not match lattice size {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label {label} is not declared (declared: {declared})")]
    UnknownLabel { label: Label, declared: LabelSet },
    #[error("label 0 is background and cannot be declared")]
    BackgroundLabel,
    #[error("voxel {index} holds value {value}, which is neither 0 nor a declared label")]
    UndeclaredValue { value: Label, index: usize },
    #[error("geometry mismatch: {a} vs {b}")]
    GeometryMismatch { a: Box<Geometry>, b: Box<Geometry> },
    #[error("probability map needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {class} at voxel {index} has probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { class: usize, index: usize, value: f64 },
    #[error("voxel {index} class probabilities sum to {sum}, map is flagged normalized")]
    NotNormalized { index: usize, sum: f64 },
}

/// Physical placement of a voxel lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Voxel size in mm along each lattice axis.
    pub spacing: [f64; 3],
    /// World position (mm) of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
    /// `direction[row][col]`; column `c` is the unit world vector of lattice axis `c`.
    pub direction: [[f64; 3]; 3],
}

pub const IDENTITY_DIRECTION: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Geometry {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: [[f64; 3]; 3],
    ) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::InvalidGeometry(format!("dims {dims:?} must all be >= 1")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing {spacing:?} must be positive and finite"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!("origin {origin:?} is not finite")));
        }
        for col in 0..3 {
            let norm = (0..3).map(|r| direction[r][col].powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > GEOMETRY_TOLERANCE {
                return Err(VolumeError::InvalidGeometry(format!(
                    "direction column {col} has norm {norm}"
                )));
            }
        }
        Ok(Self { dims, spacing, origin, direction })
    }

    /// Unit-spaced, axis-aligned lattice at the world origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, [1.0; 3], [0.0; 3], IDENTITY_DIRECTION)
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// 4x4 voxel-to-world affine.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = self.direction[r][c] * self.spacing[c];
            }
            m[r][3] = self.origin[r];
        }
        m[3][3] = 1.0;
        m
    }

    /// World position of a (possibly fractional) lattice coordinate.
    pub fn world_of(&self, voxel: [f64; 3]) -> [f64; 3] {
        let mut out = self.origin;
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..3 {
                *o += self.direction[r][c] * self.spacing[c] * voxel[c];
            }
        }
        out
    }

    pub fn is_compatible(&self, other: &Geometry) -> bool {
        geometry_compatible(self, other)
    }

    pub fn ensure_compatible(&self, other: &Geometry) -> Result<(), VolumeError> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(VolumeError::GeometryMismatch { a: Box::new(self.clone()), b: Box::new(other.clone()) })
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dims {:?}, spacing {:?}, origin {:?}, direction {:?}",
            self.dims, self.spacing, self.origin, self.direction
        )
    }
}

/// Dims equal exactly; spacing, origin and direction agree within [`GEOMETRY_TOLERANCE`].
pub fn geometry_compatible(a: &Geometry, b: &Geometry) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= GEOMETRY_TOLERANCE;
    a.dims == b.dims
        && a.spacing.iter().zip(&b.spacing).all(|(x, y)| close(*x, *y))
        && a.origin.iter().zip(&b.origin).all(|(x, y)| close(*x, *y))
        && a.direction.iter().flatten().zip(b.direction.iter().flatten()).all(|(x, y)| close(*x, *y))
}

/// Scalar values over a lattice, first axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    geometry: Geometry,
    values: Vec<T>,
}

impl<T> VoxelGrid<T> {
    pub fn new(geometry: Geometry, values: Vec<T>) -> Result<Self, VolumeError> {
        let expected = geometry.voxel_count();
        if values.len() != expected {
            return Err(VolumeError::LengthMismatch { expected, actual: values.len() });
        }
        Ok(Self { geometry, values })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self
    where
        T: Clone,
    {
        let values = vec![value; geometry.voxel_count()];
        Self { geometry, values }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.values[self.geometry.index(x, y, z)]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> VoxelGrid<U> {
        VoxelGrid { geometry: self.geometry.clone(), values: self.values.iter().map(f).collect() }
    }

    pub fn into_parts(self) -> (Geometry, Vec<T>) {
        (self.geometry, self.values)
    }
}

/// Ordered set of nonzero class labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Label>", into = "Vec<Label>")]
pub struct LabelSet(BTreeSet<Label>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = Label>) -> Result<Self, VolumeError> {
        let set: BTreeSet<Label> = labels.into_iter().collect();
        if set.contains(&0) {
            return Err(VolumeError::BackgroundLabel);
        }
        Ok(Self(set))
    }

    /// `{1, 2}`: GTVp and GTVn.
    pub fn gtv() -> Self {
        Self([GTVP, GTVN].into_iter().collect())
    }

    pub fn contains(&self, label: Label) -> bool {
        self.0.contains(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Accepts a voxel value: background or a declared label.
    pub fn admits(&self, value: Label) -> bool {
        value == 0 || self.0.contains(&value)
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::gtv()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

impl FromStr for LabelSet {
    type Err = String;

    /// Parses a comma-separated list such as `"1,2"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let labels = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<Label>().map_err(|e| format!("bad label {p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if labels.is_empty() {
            return Err("label list is empty".into());
        }
        LabelSet::new(labels).map_err(|e| e.to_string())
    }
}

impl TryFrom<Vec<Label>> for LabelSet {
    type Error = VolumeError;
    fn try_from(v: Vec<Label>) -> Result<Self, Self::Error> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<Label> {
    fn from(s: LabelSet) -> Self {
        s.0.into_iter().collect()
    }
}

/// Integer-labelled grid whose voxels are background or a declared label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    grid: VoxelGrid<Label>,
    labels: LabelSet,
}

impl LabelMask {
    pub fn new(grid: VoxelGrid<Label>, labels: LabelSet) -> Result<Self, VolumeError> {
        if let Some((index, &value)) = grid.values().iter().enumerate().find(|(_, v)| !labels.admits(**v)) {
            return Err(VolumeError::UndeclaredValue { value, index });
        }
        Ok(Self { grid, labels })
    }

    pub fn from_values(geometry: Geometry, values: Vec<Label>, labels: LabelSet) -> Result<Self, VolumeError> {
        Self::new(VoxelGrid::new(geometry, values)?, labels)
    }

    pub fn empty(geometry: Geometry, labels: LabelSet) -> Self {
        Self { grid: VoxelGrid::filled(geometry, 0), labels }
    }

    pub fn grid(&self) -> &VoxelGrid<Label> {
        &self.grid
    }

    pub fn geometry(&self) -> &Geometry {
        self.grid.geometry()
    }

    pub fn values(&self) -> &[Label] {
        self.grid.values()
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    fn require(&self, label: Label) -> Result<(), VolumeError> {
        if self.labels.contains(label) {
            Ok(())
        } else {
            Err(VolumeError::UnknownLabel { label, declared: self.labels.clone() })
        }
    }

    /// Number of voxels equal to `label`.
    pub fn label_volume(&self, label: Label) -> Result<u64, VolumeError> {
        self.require(label)?;
        Ok(self.values().iter().filter(|&&v| v == label).count() as u64)
    }

    /// One-vs-rest mask: 1 where this mask equals `label`, else 0.
    pub fn binarize(&self, label: Label) -> Result<LabelMask, VolumeError> {
        self.require(label)?;
        Ok(LabelMask {
            grid: self.grid.map(|&v| u8::from(v == label)),
            labels: LabelSet([1].into_iter().collect()),
        })
    }
}

/// Number of voxels where both masks equal `label`.
pub fn intersect_count(a: &LabelMask, b: &LabelMask, label: Label) -> Result<u64, VolumeError> {
    a.geometry().ensure_compatible(b.geometry())?;
    a.require(label)?;
    b.require(label)?;
    Ok(a.values().iter().zip(b.values()).filter(|(&x, &y)| x == label && y == label).count() as u64)
}

/// Exact overlap counts for one label of one (reference, candidate) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverlapCounts {
    /// `|A|`
    pub reference: u64,
    /// `|B|`
    pub candidate: u64,
    /// `|A ∩ B|`
    pub intersection: u64,
}

/// All three counts in a single pass.
pub fn overlap_counts(reference: &LabelMask, candidate: &LabelMask, label: Label) -> Result<OverlapCounts, VolumeError> {
    reference.geometry().ensure_compatible(candidate.geometry())?;
    reference.require(label)?;
    candidate.require(label)?;
    let mut counts = OverlapCounts::default();
    for (&a, &b) in reference.values().iter().zip(candidate.values()) {
        let in_a = a == label;
        let in_b = b == label;
        counts.reference += u64::from(in_a);
        counts.candidate += u64::from(in_b);
        counts.intersection += u64::from(in_a && in_b);
    }
    Ok(counts)
}

/// Per-class probability planes over one lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    geometry: Geometry,
    planes: Vec<Vec<f64>>,
    crop_offset: [usize; 3],
    normalized: bool,
}

/// Allowed deviation of a normalized voxel's class sum from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-3;

impl ProbabilityMap {
    /// Builds a map; when `normalized` is set every voxel's class sum must be 1 within
    /// [`NORMALIZATION_TOLERANCE`].
    pub fn new(
        geometry: Geometry,
        planes: Vec<Vec<f64>>,
        crop_offset: [usize; 3],
        normalized: bool,
    ) -> Result<Self, VolumeError> {
        if planes.len() < 2 {
            return Err(VolumeError::TooFewClasses(planes.len()));
        }
        let n = geometry.voxel_count();
        for (class, plane) in planes.iter().enumerate() {
            if plane.len() != n {
                return Err(VolumeError::LengthMismatch { expected: n, actual: plane.len() });
            }
            if let Some((index, &value)) = plane.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
                return Err(VolumeError::ProbabilityOutOfRange { class, index, value });
            }
        }
        let map = Self { geometry, planes, crop_offset, normalized };
        if normalized {
            if let Some((index, sum)) = map.first_unnormalized_voxel() {
                return Err(VolumeError::NotNormalized { index, sum });
            }
        }
        Ok(map)
    }

    /// Like [`ProbabilityMap::new`] but sets the normalized flag when every voxel sums to 1.
    pub fn detect_normalized(
        geometry: Geometry,
        planes: Vec<Vec<f64>>,
        crop_offset: [usize; 3],
    ) -> Result<Self, VolumeError> {
        let mut map = Self::new(geometry, planes, crop_offset, false)?;
        map.normalized = map.first_unnormalized_voxel().is_none();
        Ok(map)
    }

    /// Map whose voxels are one-hot on the class given by `classes`.
    pub fn one_hot(geometry: Geometry, classes: &[usize], class_count: usize) -> Result<Self, VolumeError> {
        if classes.len() != geometry.voxel_count() {
            return Err(VolumeError::LengthMismatch { expected: geometry.voxel_count(), actual: classes.len() });
        }
        let mut planes = vec![vec![0.0; classes.len()]; class_count];
        for (i, &c) in classes.iter().enumerate() {
            if c >= class_count {
                return Err(VolumeError::ProbabilityOutOfRange { class: c, index: i, value: 1.0 });
            }
            planes[c][i] = 1.0;
        }
        Self::new(geometry, planes, [0; 3], true)
    }

    fn first_unnormalized_voxel(&self) -> Option<(usize, f64)> {
        (0..self.geometry.voxel_count()).find_map(|i| {
            let sum: f64 = self.planes.iter().map(|p| p[i]).sum();
            ((sum - 1.0).abs() > NORMALIZATION_TOLERANCE).then_some((i, sum))
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn class_count(&self) -> usize {
        self.planes.len()
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        &self.planes[class]
    }

    pub fn crop_offset(&self) -> [usize; 3] {
        self.crop_offset
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn with_crop_offset(mut self, offset: [usize; 3]) -> Self {
        self.crop_offset = offset;
        self
    }

    pub fn into_planes(self) -> Vec<Vec<f64>> {
        self.planes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> LabelMask {
        let geometry = Geometry::with_dims(dims).unwrap();
        let values = (0..geometry.voxel_count()).map(|_| rng.gen_range(0..3u8)).collect();
        LabelMask::from_values(geometry, values, LabelSet::gtv()).unwrap()
    }

    // Brute-force triple-loop scan, independent of the flattened iteration above.
    fn scan_count(mask: &LabelMask, label: Label) -> u64 {
        let [nx, ny, nz] = mask.geometry().dims;
        let mut n = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if *mask.grid().get(x, y, z) == label {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    fn scan_intersection(a: &LabelMask, b: &LabelMask, label: Label) -> u64 {
        let [nx, ny, nz] = a.geometry().dims;
        let mut n = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if *a.grid().get(x, y, z) == label && *b.grid().get(x, y, z) == label {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn label_volume_basic_cases() {
        let g = Geometry::with_dims([4, 4, 4]).unwrap();
        let empty = LabelMask::empty(g.clone(), LabelSet::gtv());
        assert_eq!(empty.label_volume(1).unwrap(), 0);

        let mut values = vec![0; 64];
        values[g.index(1, 2, 3)] = 1;
        let one = LabelMask::from_values(g, values, LabelSet::gtv()).unwrap();
        assert_eq!(one.label_volume(1).unwrap(), 1);
        assert_eq!(one.label_volume(2).unwrap(), 0);
    }

    #[test]
    fn label_volume_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_mask(&mut rng, [8, 8, 8]);
            assert_eq!(m.label_volume(2).unwrap(), scan_count(&m, 2));
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let m = LabelMask::empty(Geometry::with_dims([2, 2, 2]).unwrap(), LabelSet::gtv());
        assert!(matches!(m.label_volume(3), Err(VolumeError::UnknownLabel { label: 3, .. })));
        assert!(matches!(m.binarize(5), Err(VolumeError::UnknownLabel { label: 5, .. })));
    }

    #[test]
    fn mask_rejects_undeclared_values() {
        let g = Geometry::with_dims([2, 1, 1]).unwrap();
        let err = LabelMask::from_values(g, vec![0, 3], LabelSet::gtv()).unwrap_err();
        assert_eq!(err, VolumeError::UndeclaredValue { value: 3, index: 1 });
    }

    #[test]
    fn intersect_count_cases() {
        let g = Geometry::with_dims([4, 4, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_mask(&mut rng, [4, 4, 4]);
        assert_eq!(intersect_count(&a, &a, 1).unwrap(), a.label_volume(1).unwrap());

        let mut va = vec![0; 64];
        let mut vb = vec![0; 64];
        va[0] = 1;
        vb[1] = 1;
        let a = LabelMask::from_values(g.clone(), va, LabelSet::gtv()).unwrap();
        let b = LabelMask::from_values(g, vb, LabelSet::gtv()).unwrap();
        assert_eq!(intersect_count(&a, &b, 1).unwrap(), 0);
    }

    #[test]
    fn intersect_count_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_mask(&mut rng, [8, 8, 8]);
            let b = random_mask(&mut rng, [8, 8, 8]);
            for label in [1, 2] {
                let expected = scan_intersection(&a, &b, label);
                assert_eq!(intersect_count(&a, &b, label).unwrap(), expected);
                assert_eq!(intersect_count(&b, &a, label).unwrap(), expected);
                let c = overlap_counts(&a, &b, label).unwrap();
                assert_eq!(c.intersection, expected);
                assert_eq!(c.reference, scan_count(&a, label));
                assert_eq!(c.candidate, scan_count(&b, label));
            }
        }
    }

    #[test]
    fn intersect_count_geometry_mismatch_carries_both() {
        let a = LabelMask::empty(Geometry::with_dims([4, 4, 4]).unwrap(), LabelSet::gtv());
        let b = LabelMask::empty(Geometry::with_dims([4, 4, 5]).unwrap(), LabelSet::gtv());
        match intersect_count(&a, &b, 1) {
            Err(VolumeError::GeometryMismatch { a: ga, b: gb }) => {
                assert_eq!(ga.dims, [4, 4, 4]);
                assert_eq!(gb.dims, [4, 4, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geometry_compatibility() {
        let g = Geometry::with_dims([64, 64, 32]).unwrap();
        assert!(geometry_compatible(&g, &g.clone()));
        assert!(!geometry_compatible(&g, &Geometry::with_dims([64, 64, 33]).unwrap()));
        let mut shifted = g.clone();
        shifted.origin[0] += 5e-5;
        assert!(geometry_compatible(&g, &shifted));
        shifted.origin[0] += 1e-3;
        assert!(!geometry_compatible(&g, &shifted));
    }

    #[test]
    fn geometry_validation() {
        assert!(Geometry::with_dims([0, 1, 1]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3], IDENTITY_DIRECTION).is_err());
        let skew = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Geometry::new([1, 1, 1], [1.0; 3], [0.0; 3], skew).is_err());
    }

    #[test]
    fn axis_order_is_first_axis_fastest() {
        let g = Geometry::with_dims([3, 4, 5]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
        assert_eq!(g.coords(g.index(2, 3, 4)), [2, 3, 4]);
    }

    #[test]
    fn binarize_cases() {
        let g = Geometry::with_dims([2, 2, 2]).unwrap();
        let twos = LabelMask::from_values(g.clone(), vec![2; 8], LabelSet::gtv()).unwrap();
        assert!(twos.binarize(2).unwrap().values().iter().all(|&v| v == 1));
        assert!(twos.binarize(1).unwrap().values().iter().all(|&v| v == 0));
        assert_eq!(twos.binarize(2).unwrap().geometry(), &g);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, [8, 8, 8]);
        let b = m.binarize(1).unwrap();
        for (src, dst) in m.values().iter().zip(b.values()) {
            assert_eq!(*dst, u8::from(*src == 1));
        }
    }

    #[test]
    fn label_set_parsing() {
        assert_eq!("1,2".parse::<LabelSet>().unwrap(), LabelSet::gtv());
        assert_eq!(" 2 , 1 ".parse::<LabelSet>().unwrap(), LabelSet::gtv());
        assert!("0,1".parse::<LabelSet>().is_err());
        assert!("".parse::<LabelSet>().is_err());
        assert!("x".parse::<LabelSet>().is_err());
    }

    #[test]
    fn probability_map_invariants() {
        let g = Geometry::with_dims([2, 1, 1]).unwrap();
        assert!(ProbabilityMap::new(g.clone(), vec![vec![0.5, 1.0]], [0; 3], false).is_err());
        assert!(ProbabilityMap::new(g.clone(), vec![vec![1.5, 0.0], vec![0.0, 1.0]], [0; 3], false).is_err());
        assert!(ProbabilityMap::new(g.clone(), vec![vec![0.5, 0.2], vec![0.5, 0.2]], [0; 3], true).is_err());
        let m = ProbabilityMap::detect_normalized(g.clone(), vec![vec![0.5, 0.2], vec![0.5, 0.2]], [0; 3]).unwrap();
        assert!(!m.is_normalized());
        let m = ProbabilityMap::detect_normalized(g, vec![vec![0.5, 0.2], vec![0.5, 0.8]], [0; 3]).unwrap();
        assert!(m.is_normalized());
    }

    proptest! {
        #[test]
        fn intersection_bounded_by_volumes(seed in any::<u64>(), label in 1u8..=2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, [5, 4, 3]);
            let b = random_mask(&mut rng, [5, 4, 3]);
            let i = intersect_count(&a, &b, label).unwrap();
            prop_assert!(i <= a.label_volume(label).unwrap().min(b.label_volume(label).unwrap()));
            prop_assert_eq!(intersect_count(&a, &a, label).unwrap(), a.label_volume(label).unwrap());
        }
    }
}
