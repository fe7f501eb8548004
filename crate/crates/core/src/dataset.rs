//! Training layouts built from a challenge-style directory tree.
//!
//! A challenge tree has one folder per patient:
//!
//! ```text
//! <root>/<id>/preRT/<id>_preRT_T2.nii.gz
//! <root>/<id>/preRT/<id>_preRT_mask.nii.gz
//! <root>/<id>/midRT/<id>_midRT_T2.nii.gz
//! <root>/<id>/midRT/<id>_midRT_mask.nii.gz
//! <root>/<id>/midRT/<id>_preRT_T2_registered.nii.gz
//! <root>/<id>/midRT/<id>_preRT_mask_registered.nii.gz
//! ```
//!
//! Every file name is a [`NamePattern`] and can be overridden.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::{self, NiftiError, WriteNifti};
use crate::volume::{Label, LabelMask, LabelSet, GTVN, GTVP};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("invalid name pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: &'static str },
    #[error("unknown layout {0:?}")]
    UnknownLayout(String),
    #[error("case id is empty")]
    EmptyCaseId,
    #[error("duplicate case id {0:?}")]
    DuplicateCaseId(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("case {case_id}: missing {field}")]
    MissingFile { case_id: String, field: CaseField },
    #[error("case {case_id}: {path} does not share the mid-RT grid")]
    GeometryMismatch { case_id: String, path: PathBuf },
    #[error("layout {0} pools samples per time point; use the Task 1 pool builder")]
    PooledLayout(LayoutId),
    #[error("cannot split {cases} cases into {k} folds")]
    InvalidFoldCount { k: usize, cases: usize },
    #[error("external case {case_id}: {path} contains label 2 at voxel {index}")]
    ExternalSecondLabel { case_id: String, path: PathBuf, index: usize },
    #[error("cannot merge a {external}-channel external pool into a {primary}-channel manifest")]
    ChannelCountMismatch { primary: usize, external: usize },
}

impl DatasetError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

type Result<T> = std::result::Result<T, DatasetError>;

/// A relative file name with exactly one `{id}` placeholder, e.g. `midRT/{id}_midRT_T2.nii.gz`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamePattern {
    prefix: String,
    suffix: String,
}

const ID_PLACEHOLDER: &str = "{id}";

impl NamePattern {
    pub fn render(&self, id: &str) -> String {
        format!("{}{id}{}", self.prefix, self.suffix)
    }

    /// Case id carried by a file name; the id is everything the placeholder covers.
    pub fn match_file_name<'a>(&self, name: &'a str) -> Option<&'a str> {
        let file_prefix = self.file_prefix();
        let id = name.strip_prefix(file_prefix)?.strip_suffix(self.suffix.as_str())?;
        (!id.is_empty()).then_some(id)
    }

    fn file_prefix(&self) -> &str {
        self.prefix.rsplit_once('/').map_or(self.prefix.as_str(), |(_, f)| f)
    }

    fn dir_part(&self) -> Option<&str> {
        self.prefix.rsplit_once('/').map(|(d, _)| d)
    }

    /// All `(id, path)` pairs under `root` that match, sorted by id.
    pub fn scan(&self, root: &Path) -> Result<Vec<(String, PathBuf)>> {
        let dir = match self.dir_part() {
            Some(d) => root.join(d),
            None => root.to_path_buf(),
        };
        let mut found = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| DatasetError::io(&dir, e))? {
            let entry = entry.map_err(|e| DatasetError::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = self.match_file_name(&name) {
                if entry.path().is_file() {
                    found.push((id.to_string(), entry.path()));
                }
            }
        }
        found.sort();
        Ok(found)
    }
}

impl FromStr for NamePattern {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = |reason| DatasetError::InvalidPattern { pattern: s.to_string(), reason };
        let (prefix, suffix) = s.split_once(ID_PLACEHOLDER).ok_or_else(|| invalid("missing {id}"))?;
        if suffix.contains(ID_PLACEHOLDER) {
            return Err(invalid("{id} appears more than once"));
        }
        if suffix.contains('/') {
            return Err(invalid("{id} must be in the file name, not a directory"));
        }
        if s.starts_with('/') || s.split('/').any(|part| part == "..") {
            return Err(invalid("pattern must stay inside its root"));
        }
        Ok(Self { prefix: prefix.to_string(), suffix: suffix.to_string() })
    }
}

impl fmt::Display for NamePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{ID_PLACEHOLDER}{}", self.prefix, self.suffix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseField {
    PreRtImage,
    PreRtMask,
    MidRtImage,
    MidRtMask,
    RegPreRtImage,
    RegPreRtMask,
}

impl CaseField {
    pub const ALL: [CaseField; 6] = [
        Self::PreRtImage,
        Self::PreRtMask,
        Self::MidRtImage,
        Self::MidRtMask,
        Self::RegPreRtImage,
        Self::RegPreRtMask,
    ];

    /// Mid-RT files may be absent (test cases).
    pub fn is_optional(self) -> bool {
        matches!(self, Self::MidRtImage | Self::MidRtMask)
    }

    /// Files that live on the mid-RT lattice.
    pub fn on_mid_grid(self) -> bool {
        matches!(self, Self::MidRtImage | Self::MidRtMask | Self::RegPreRtImage | Self::RegPreRtMask)
    }

    pub fn is_mask(self) -> bool {
        matches!(self, Self::PreRtMask | Self::MidRtMask | Self::RegPreRtMask)
    }
}

impl fmt::Display for CaseField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PreRtImage => "pre-RT image",
            Self::PreRtMask => "pre-RT mask",
            Self::MidRtImage => "mid-RT image",
            Self::MidRtMask => "mid-RT mask",
            Self::RegPreRtImage => "registered pre-RT image",
            Self::RegPreRtMask => "registered pre-RT mask",
        })
    }
}

/// Per-case file naming, relative to the case folder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseNaming {
    patterns: BTreeMap<CaseField, NamePattern>,
}

impl Default for CaseNaming {
    fn default() -> Self {
        let defaults = [
            (CaseField::PreRtImage, "preRT/{id}_preRT_T2.nii.gz"),
            (CaseField::PreRtMask, "preRT/{id}_preRT_mask.nii.gz"),
            (CaseField::MidRtImage, "midRT/{id}_midRT_T2.nii.gz"),
            (CaseField::MidRtMask, "midRT/{id}_midRT_mask.nii.gz"),
            (CaseField::RegPreRtImage, "midRT/{id}_preRT_T2_registered.nii.gz"),
            (CaseField::RegPreRtMask, "midRT/{id}_preRT_mask_registered.nii.gz"),
        ];
        Self {
            patterns: defaults.into_iter().map(|(f, p)| (f, p.parse().expect("default pattern"))).collect(),
        }
    }
}

impl CaseNaming {
    pub fn with(mut self, field: CaseField, pattern: NamePattern) -> Self {
        self.patterns.insert(field, pattern);
        self
    }

    pub fn pattern(&self, field: CaseField) -> &NamePattern {
        &self.patterns[&field]
    }
}

/// One patient's files; absent files are `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeCase {
    pub case_id: String,
    pub pre_rt_image: Option<PathBuf>,
    pub pre_rt_mask: Option<PathBuf>,
    pub mid_rt_image: Option<PathBuf>,
    pub mid_rt_mask: Option<PathBuf>,
    pub reg_pre_rt_image: Option<PathBuf>,
    pub reg_pre_rt_mask: Option<PathBuf>,
}

impl ChallengeCase {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            pre_rt_image: None,
            pre_rt_mask: None,
            mid_rt_image: None,
            mid_rt_mask: None,
            reg_pre_rt_image: None,
            reg_pre_rt_mask: None,
        }
    }

    pub fn get(&self, field: CaseField) -> Option<&Path> {
        match field {
            CaseField::PreRtImage => self.pre_rt_image.as_deref(),
            CaseField::PreRtMask => self.pre_rt_mask.as_deref(),
            CaseField::MidRtImage => self.mid_rt_image.as_deref(),
            CaseField::MidRtMask => self.mid_rt_mask.as_deref(),
            CaseField::RegPreRtImage => self.reg_pre_rt_image.as_deref(),
            CaseField::RegPreRtMask => self.reg_pre_rt_mask.as_deref(),
        }
    }

    pub fn set(&mut self, field: CaseField, path: Option<PathBuf>) {
        let slot = match field {
            CaseField::PreRtImage => &mut self.pre_rt_image,
            CaseField::PreRtMask => &mut self.pre_rt_mask,
            CaseField::MidRtImage => &mut self.mid_rt_image,
            CaseField::MidRtMask => &mut self.mid_rt_mask,
            CaseField::RegPreRtImage => &mut self.reg_pre_rt_image,
            CaseField::RegPreRtMask => &mut self.reg_pre_rt_mask,
        };
        *slot = path;
    }

    pub fn require(&self, field: CaseField) -> Result<&Path> {
        self.get(field).ok_or_else(|| DatasetError::MissingFile { case_id: self.case_id.clone(), field })
    }

    pub fn missing(&self) -> Vec<CaseField> {
        CaseField::ALL.into_iter().filter(|f| self.get(*f).is_none()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }
}

/// Non-empty, unique case ids.
pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(DatasetError::EmptyCaseId);
        }
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateCaseId(id.to_string()));
        }
    }
    Ok(())
}

/// One case per subdirectory of `root`, ordered by case id. Missing files stay `None`.
pub fn scan_cohort(root: &Path, naming: &CaseNaming) -> Result<Vec<ChallengeCase>> {
    let mut cases = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| DatasetError::io(root, e))? {
        let entry = entry.map_err(|e| DatasetError::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let case_id = entry.file_name().to_string_lossy().into_owned();
        let mut case = ChallengeCase::new(case_id.clone());
        for field in CaseField::ALL {
            let path = entry.path().join(naming.pattern(field).render(&case_id));
            case.set(field, path.is_file().then_some(path));
        }
        cases.push(case);
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    ensure_unique_ids(cases.iter().map(|c| c.case_id.as_str()))?;
    Ok(cases)
}

/// Training layouts: the Task 2 multi-channel datasets and the Task 1 pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutId {
    #[serde(rename = "504")]
    D504,
    #[serde(rename = "505")]
    D505,
    #[serde(rename = "506")]
    D506,
    #[serde(rename = "507")]
    D507,
    #[serde(rename = "516")]
    D516,
    #[serde(rename = "task1_pretrain")]
    Task1Pretrain,
    #[serde(rename = "task1_finetune")]
    Task1Finetune,
    #[serde(rename = "brats_pretrain")]
    BratsPretrain,
}

impl LayoutId {
    pub const ALL: [LayoutId; 8] = [
        Self::D504,
        Self::D505,
        Self::D506,
        Self::D507,
        Self::D516,
        Self::Task1Pretrain,
        Self::Task1Finetune,
        Self::BratsPretrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::D504 => "504",
            Self::D505 => "505",
            Self::D506 => "506",
            Self::D507 => "507",
            Self::D516 => "516",
            Self::Task1Pretrain => "task1_pretrain",
            Self::Task1Finetune => "task1_finetune",
            Self::BratsPretrain => "brats_pretrain",
        }
    }

    /// Whether samples are single time points rather than stacked channels.
    pub fn is_pooled(self) -> bool {
        matches!(self, Self::Task1Pretrain | Self::Task1Finetune | Self::BratsPretrain)
    }

    /// Channel order for the stacked layouts.
    pub fn channels(self, encoding: MaskEncoding) -> Vec<ChannelKind> {
        let mask = |v: &mut Vec<ChannelKind>| match encoding {
            MaskEncoding::Raw => v.push(ChannelKind::RegPreRtMask),
            MaskEncoding::OneHot => {
                v.push(ChannelKind::RegPreRtMaskOneHot(GTVP));
                v.push(ChannelKind::RegPreRtMaskOneHot(GTVN));
            }
        };
        let mut v = vec![];
        match self {
            Self::D504 => v.push(ChannelKind::MidRt),
            Self::D505 => v.extend([ChannelKind::MidRt, ChannelKind::RegPreRt]),
            Self::D506 | Self::D516 => {
                v.extend([ChannelKind::MidRt, ChannelKind::RegPreRt]);
                mask(&mut v);
            }
            Self::D507 => {
                v.push(ChannelKind::MidRt);
                mask(&mut v);
            }
            Self::Task1Pretrain | Self::Task1Finetune | Self::BratsPretrain => v.push(ChannelKind::T2),
        }
        v
    }
}

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutId {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| DatasetError::UnknownLayout(s.to_string()))
    }
}

/// How registered pre-RT mask channels are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskEncoding {
    /// One channel with raw labels 0/1/2.
    #[default]
    Raw,
    /// One binary channel per label.
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    MidRt,
    RegPreRt,
    RegPreRtMask,
    RegPreRtMaskOneHot(Label),
    /// Single T2 input of a pooled sample.
    T2,
}

impl ChannelKind {
    pub fn name(self) -> String {
        match self {
            Self::MidRt => "midRT".into(),
            Self::RegPreRt => "regPreRT".into(),
            Self::RegPreRtMask => "regPreRTmask".into(),
            Self::RegPreRtMaskOneHot(l) => format!("regPreRTmask_label{l}"),
            Self::T2 => "T2".into(),
        }
    }

    fn field(self) -> Option<CaseField> {
        match self {
            Self::MidRt => Some(CaseField::MidRtImage),
            Self::RegPreRt => Some(CaseField::RegPreRtImage),
            Self::RegPreRtMask | Self::RegPreRtMaskOneHot(_) => Some(CaseField::RegPreRtMask),
            Self::T2 => None,
        }
    }
}

/// Where one channel of a sample comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSource {
    pub name: String,
    pub path: PathBuf,
    /// Set when the channel is the binary plane of one label of a mask file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub one_hot_label: Option<Label>,
}

impl ChannelSource {
    fn new(kind: ChannelKind, path: &Path) -> Self {
        let one_hot_label = match kind {
            ChannelKind::RegPreRtMaskOneHot(l) => Some(l),
            _ => None,
        };
        Self { name: kind.name(), path: path.to_path_buf(), one_hot_label }
    }
}

/// One training sample: ordered channels plus the target mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub sample_id: String,
    /// Patient the sample came from; folds are assigned per patient.
    pub case_id: String,
    pub channels: Vec<ChannelSource>,
    pub label: PathBuf,
}

/// Builds the channel stack of one case for a stacked layout. Target is the mid-RT mask.
pub fn assemble_case(case: &ChallengeCase, layout: LayoutId, encoding: MaskEncoding) -> Result<ManifestSample> {
    if layout.is_pooled() {
        return Err(DatasetError::PooledLayout(layout));
    }
    let target = case.require(CaseField::MidRtMask)?;
    let kinds = layout.channels(encoding);
    let mut channels = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let field = kind.field().expect("stacked layouts use case files");
        channels.push(ChannelSource::new(kind, case.require(field)?));
    }
    let (_, reference) = nifti::read_header(target)?;
    let mut checked = BTreeSet::new();
    for ch in &channels {
        if checked.insert(ch.path.clone()) {
            let (_, g) = nifti::read_header(&ch.path)?;
            if !g.is_compatible(&reference) {
                return Err(DatasetError::GeometryMismatch { case_id: case.case_id.clone(), path: ch.path.clone() });
            }
        }
    }
    Ok(ManifestSample {
        sample_id: case.case_id.clone(),
        case_id: case.case_id.clone(),
        channels,
        label: target.to_path_buf(),
    })
}

/// Loads masks for filtering, merging and baselines.
pub trait MaskSource: Sync {
    fn load_mask(&self, path: &Path, allowed: &LabelSet) -> std::result::Result<LabelMask, NiftiError>;
}

/// Reads masks from NIfTI files.
#[derive(Debug, Clone, Copy, Default)]
pub struct NiftiFiles;

impl MaskSource for NiftiFiles {
    fn load_mask(&self, path: &Path, allowed: &LabelSet) -> std::result::Result<LabelMask, NiftiError> {
        nifti::read_mask(path, allowed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalReason {
    pub gtvp_empty: bool,
    pub gtvn_empty: bool,
}

impl fmt::Display for RemovalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.gtvp_empty, self.gtvn_empty) {
            (true, true) => f.write_str("no GTVp and no GTVn voxels"),
            (true, false) => f.write_str("no GTVp voxels"),
            _ => f.write_str("no GTVn voxels"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<ChallengeCase>,
    pub removed: Vec<(ChallengeCase, RemovalReason)>,
}

/// Drops cases whose chosen mask has no GTVp or no GTVn voxels.
pub fn filter_nonzero_gt(cases: Vec<ChallengeCase>, field: CaseField, source: &impl MaskSource) -> Result<FilterOutcome> {
    let mut out = FilterOutcome::default();
    let labels = LabelSet::gtv();
    for case in cases {
        let mask = source.load_mask(case.require(field)?, &labels)?;
        let reason = RemovalReason {
            gtvp_empty: mask.label_volume(GTVP).expect("declared") == 0,
            gtvn_empty: mask.label_volume(GTVN).expect("declared") == 0,
        };
        if reason.gtvp_empty || reason.gtvn_empty {
            out.removed.push((case, reason));
        } else {
            out.kept.push(case);
        }
    }
    Ok(out)
}

/// Layout, channel declaration, samples and per-patient folds, serialized as `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub layout: LayoutId,
    #[serde(with = "indexed_names")]
    pub channel_names: Vec<String>,
    #[serde(with = "label_names")]
    pub labels: BTreeMap<Label, String>,
    #[serde(rename = "numTraining")]
    pub num_training: usize,
    pub file_ending: String,
    pub training: Vec<ManifestSample>,
    #[serde(default)]
    pub folds: BTreeMap<String, usize>,
}

fn gtv_label_names() -> BTreeMap<Label, String> {
    [(GTVP, "GTVp".to_string()), (GTVN, "GTVn".to_string())].into_iter().collect()
}

impl DatasetManifest {
    pub fn new(layout: LayoutId, channel_names: Vec<String>, training: Vec<ManifestSample>) -> Result<Self> {
        ensure_unique_ids(training.iter().map(|s| s.sample_id.as_str()))
            .map_err(|e| match e {
                DatasetError::DuplicateCaseId(id) => DatasetError::DuplicateSampleId(id),
                other => other,
            })?;
        Ok(Self {
            name: format!("Dataset{layout}"),
            layout,
            channel_names,
            labels: gtv_label_names(),
            num_training: training.len(),
            file_ending: ".nii.gz".into(),
            training,
            folds: BTreeMap::new(),
        })
    }

    /// Manifest for a stacked layout.
    pub fn stacked(layout: LayoutId, encoding: MaskEncoding, samples: Vec<ManifestSample>) -> Result<Self> {
        let names = layout.channels(encoding).into_iter().map(ChannelKind::name).collect();
        Self::new(layout, names, samples)
    }

    /// Distinct patients in sample order.
    pub fn case_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.training.iter().filter(|s| seen.insert(s.case_id.clone())).map(|s| s.case_id.clone()).collect()
    }

    /// Assigns folds per patient, so every sample of a patient shares one fold.
    pub fn assign_folds(&mut self, k: usize, seed: u64) -> Result<()> {
        self.folds = split_folds(&self.case_ids(), k, seed)?;
        Ok(())
    }

    pub fn fold_of_sample(&self, sample: &ManifestSample) -> Option<usize> {
        self.folds.get(&sample.case_id).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

mod indexed_names {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(names: &[String], s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<String, &String> = names.iter().enumerate().map(|(i, n)| (i.to_string(), n)).collect();
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        let map = BTreeMap::<String, String>::deserialize(d)?;
        let mut indexed = map
            .into_iter()
            .map(|(k, v)| k.parse::<usize>().map(|i| (i, v)).map_err(serde::de::Error::custom))
            .collect::<Result<Vec<_>, _>>()?;
        indexed.sort();
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}

mod label_names {
    use crate::volume::Label;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(labels: &BTreeMap<Label, String>, s: S) -> Result<S::Ok, S::Error> {
        let mut map: BTreeMap<&str, Label> = labels.iter().map(|(l, n)| (n.as_str(), *l)).collect();
        map.insert("background", 0);
        map.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Label, String>, D::Error> {
        let map = BTreeMap::<String, Label>::deserialize(d)?;
        Ok(map.into_iter().filter(|(_, l)| *l != 0).map(|(n, l)| (l, n)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task1Stage {
    /// Mid-RT and registered pre-RT image/mask pairs as independent samples.
    Pretrain,
    /// Original pre-RT image/mask pairs.
    Finetune,
}

/// Single-channel Task 1 pool.
pub fn assemble_task1_pool(cases: &[ChallengeCase], stage: Task1Stage) -> Result<DatasetManifest> {
    ensure_unique_ids(cases.iter().map(|c| c.case_id.as_str()))?;
    let sample = |case: &ChallengeCase, tag: &str, image: CaseField, mask: CaseField| -> Result<ManifestSample> {
        Ok(ManifestSample {
            sample_id: format!("{}_{tag}", case.case_id),
            case_id: case.case_id.clone(),
            channels: vec![ChannelSource::new(ChannelKind::T2, case.require(image)?)],
            label: case.require(mask)?.to_path_buf(),
        })
    };
    let mut samples = Vec::new();
    for case in cases {
        match stage {
            Task1Stage::Pretrain => {
                samples.push(sample(case, "midRT", CaseField::MidRtImage, CaseField::MidRtMask)?);
                samples.push(sample(case, "regPreRT", CaseField::RegPreRtImage, CaseField::RegPreRtMask)?);
            }
            Task1Stage::Finetune => samples.push(sample(case, "preRT", CaseField::PreRtImage, CaseField::PreRtMask)?),
        }
    }
    let layout = match stage {
        Task1Stage::Pretrain => LayoutId::Task1Pretrain,
        Task1Stage::Finetune => LayoutId::Task1Finetune,
    };
    DatasetManifest::new(layout, vec![ChannelKind::T2.name()], samples)
}

/// An external single-label sample (image plus binary tumor mask).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalCase {
    pub case_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Pairs images and masks of an external cohort by id; ids present on one side only are returned separately.
pub fn scan_external(
    root: &Path,
    image: &NamePattern,
    mask: &NamePattern,
) -> Result<(Vec<ExternalCase>, Vec<String>)> {
    let images: BTreeMap<String, PathBuf> = image.scan(root)?.into_iter().collect();
    let masks: BTreeMap<String, PathBuf> = mask.scan(root)?.into_iter().collect();
    let ids: BTreeSet<&String> = images.keys().chain(masks.keys()).collect();
    let mut cases = Vec::new();
    let mut unpaired = Vec::new();
    for id in ids {
        match (images.get(id), masks.get(id)) {
            (Some(i), Some(m)) => cases.push(ExternalCase { case_id: id.clone(), image: i.clone(), mask: m.clone() }),
            _ => unpaired.push(id.clone()),
        }
    }
    Ok((cases, unpaired))
}

/// Adds a single-label external cohort to a single-channel pool.
///
/// The merged manifest keeps the two-label declaration; external masks only
/// ever contribute label 1 voxels.
pub fn merge_external_pool(
    primary: &DatasetManifest,
    external: &[ExternalCase],
    source: &impl MaskSource,
) -> Result<DatasetManifest> {
    if external.is_empty() {
        return Ok(primary.clone());
    }
    if primary.channel_names.len() != 1 {
        return Err(DatasetError::ChannelCountMismatch { primary: primary.channel_names.len(), external: 1 });
    }
    let mut training = primary.training.clone();
    for ext in external {
        let mask = source.load_mask(&ext.mask, &LabelSet::gtv())?;
        if let Some(index) = mask.values().iter().position(|&v| v == GTVN) {
            return Err(DatasetError::ExternalSecondLabel { case_id: ext.case_id.clone(), path: ext.mask.clone(), index });
        }
        training.push(ManifestSample {
            sample_id: format!("ext_{}", ext.case_id),
            case_id: format!("ext_{}", ext.case_id),
            channels: vec![ChannelSource::new(ChannelKind::T2, &ext.image)],
            label: ext.mask.clone(),
        });
    }
    let mut merged = DatasetManifest::new(LayoutId::BratsPretrain, primary.channel_names.clone(), training)?;
    merged.labels = gtv_label_names();
    Ok(merged)
}

/// Seeded shuffle, then round-robin into `k` folds. Ids are sorted and deduplicated first,
/// so the result depends only on the id set, `k` and `seed`.
pub fn split_folds(case_ids: &[String], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    let mut ids: Vec<&String> = case_ids.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || k > ids.len() {
        return Err(DatasetError::InvalidFoldCount { k, cases: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Ok(ids.into_iter().enumerate().map(|(i, id)| (id.clone(), i % k)).collect())
}

/// Train/validation sample ids per fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Expands a per-patient assignment into per-fold sample lists.
pub fn fold_splits(samples: &[(String, String)], assignment: &BTreeMap<String, usize>, k: usize) -> Vec<FoldSplit> {
    (0..k)
        .map(|fold| {
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (sample_id, case_id) in samples {
                match assignment.get(case_id) {
                    Some(&f) if f == fold => val.push(sample_id.clone()),
                    Some(_) => train.push(sample_id.clone()),
                    None => {}
                }
            }
            FoldSplit { train, val }
        })
        .collect()
}

/// Uses the registered pre-RT mask as the mid-RT prediction.
pub fn propagate_baseline(case: &ChallengeCase, source: &impl MaskSource) -> Result<LabelMask> {
    let path = case.require(CaseField::RegPreRtMask)?;
    Ok(source.load_mask(path, &LabelSet::gtv())?)
}

/// Copies (or derives) every channel and label into `out` using the
/// `imagesTr/<sample>_<cccc>.nii.gz` and `labelsTr/<sample>.nii.gz` convention,
/// then writes `dataset.json` atomically. Returns the manifest with relative paths.
pub fn write_dataset(manifest: &DatasetManifest, out: &Path) -> Result<DatasetManifest> {
    let images = out.join("imagesTr");
    let labels = out.join("labelsTr");
    for dir in [&images, &labels] {
        fs::create_dir_all(dir).map_err(|e| DatasetError::io(dir, e))?;
    }
    let mut written = manifest.clone();
    for sample in &mut written.training {
        for (i, ch) in sample.channels.iter_mut().enumerate() {
            let rel = PathBuf::from("imagesTr").join(format!("{}_{i:04}{}", sample.sample_id, manifest.file_ending));
            let dest = out.join(&rel);
            match ch.one_hot_label {
                Some(label) => {
                    let mask = nifti::read_mask(&ch.path, &LabelSet::gtv())?;
                    mask.binarize(label).map_err(|source| NiftiError::Volume { path: ch.path.clone(), source })?.write_nifti(&dest)?;
                }
                None => copy_file(&ch.path, &dest)?,
            }
            ch.path = rel;
        }
        let rel = PathBuf::from("labelsTr").join(format!("{}{}", sample.sample_id, manifest.file_ending));
        copy_file(&sample.label, &out.join(&rel))?;
        sample.label = rel;
    }
    write_atomic(&out.join("dataset.json"), written.to_json().as_bytes())?;
    Ok(written)
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(drop).map_err(|e| DatasetError::io(from, e))
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| DatasetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DatasetError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MissingFile,
    UnreadableFile,
    UnknownLabel,
    GeometryMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub case_id: String,
    pub kind: IssueKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cases: usize,
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Read-only structural check: missing files, undeclared mask labels, mid-RT grid agreement.
pub fn validate_cohort(cases: &[ChallengeCase]) -> ValidationReport {
    let mut report = ValidationReport { cases: cases.len(), ..Default::default() };
    let labels = LabelSet::gtv();
    for case in cases {
        let issue = |kind, path: Option<&Path>, message: String| Issue {
            case_id: case.case_id.clone(),
            kind,
            path: path.map(Path::to_path_buf),
            message,
        };
        for field in case.missing() {
            let i = issue(IssueKind::MissingFile, None, format!("missing {field}"));
            if field.is_optional() {
                report.warnings.push(i);
            } else {
                report.errors.push(i);
            }
        }
        let mut mid_grid = None;
        for field in CaseField::ALL {
            let Some(path) = case.get(field) else { continue };
            let geometry = if field.is_mask() {
                match nifti::read_mask(path, &labels) {
                    Ok(m) => m.geometry().clone(),
                    Err(e @ NiftiError::LabelNotAllowed { .. }) | Err(e @ NiftiError::NonIntegralLabel { .. }) => {
                        report.errors.push(issue(IssueKind::UnknownLabel, Some(path), e.to_string()));
                        continue;
                    }
                    Err(e) => {
                        report.errors.push(issue(IssueKind::UnreadableFile, Some(path), e.to_string()));
                        continue;
                    }
                }
            } else {
                match nifti::read_header(path) {
                    Ok((_, g)) => g,
                    Err(e) => {
                        report.errors.push(issue(IssueKind::UnreadableFile, Some(path), e.to_string()));
                        continue;
                    }
                }
            };
            if field.on_mid_grid() {
                match &mid_grid {
                    None => mid_grid = Some((field, geometry)),
                    Some((first, g)) if !g.is_compatible(&geometry) => report.errors.push(issue(
                        IssueKind::GeometryMismatch,
                        Some(path),
                        format!("{field} grid ({geometry}) differs from {first} grid ({g})"),
                    )),
                    Some(_) => {}
                }
            }
        }
    }
    report
}
