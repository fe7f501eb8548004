//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Reads either byte order; always writes little-endian with a 352-byte
//! data offset (header plus an empty extension flag). Probability maps put
//! the class axis in `dim[4]` and keep their crop placement in a JSON
//! sidecar named `<stem>.offset.json` next to the image.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Geometry, Label, LabelMask, LabelSet, ProbabilityMap, VolumeError, VoxelGrid};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Maximum distance from an integer for a float-stored mask voxel.
pub const LABEL_CAST_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: corrupt header: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("{path}: unsupported datatype code {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("{path}: expected {expected} data bytes after offset, found {actual}")]
    DataLength { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: expected {expected}, header has dim {dim:?}")]
    Dimensionality { path: PathBuf, expected: &'static str, dim: [i16; 8] },
    #[error("{path}: voxel {index} has non-integral mask value {value}")]
    NonIntegralLabel { path: PathBuf, index: usize, value: f64 },
    #[error("{path}: voxel {index} has label {value}, allowed {allowed}")]
    LabelNotAllowed { path: PathBuf, index: usize, value: f64, allowed: LabelSet },
    #[error("voxel {index} value {value} is not representable as {datatype:?}")]
    NotRepresentable { index: usize, value: f64, datatype: Datatype },
    #[error("{path}: offset sidecar: {source}")]
    Sidecar { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Volume { path: PathBuf, source: VolumeError },
}

impl NiftiError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

type Result<T> = std::result::Result<T, NiftiError>;

/// Supported on-disk voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub const ALL: [Datatype; 5] = [Self::Uint8, Self::Int16, Self::Int32, Self::Float32, Self::Float64];

    pub fn code(self) -> i16 {
        match self {
            Self::Uint8 => 2,
            Self::Int16 => 4,
            Self::Int32 => 8,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }

    fn representable(self, v: f64) -> bool {
        match self {
            Self::Uint8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            Self::Int16 => v.fract() == 0.0 && (i16::MIN as f64..=i16::MAX as f64).contains(&v),
            Self::Int32 => v.fract() == 0.0 && (i32::MIN as f64..=i32::MAX as f64).contains(&v),
            Self::Float32 => v.is_nan() || (v as f32) as f64 == v,
            Self::Float64 => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrderKind {
    Little,
    Big,
}

/// Parsed header fields this toolkit uses.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderSummary {
    pub datatype: Datatype,
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub byte_order: ByteOrderKind,
}

impl NiftiHeaderSummary {
    /// Number of 3D volumes stacked along `dim[4]` (1 for plain volumes).
    pub fn volumes(&self) -> usize {
        if self.dim[0] >= 4 { self.dim[4].max(1) as usize } else { 1 }
    }

    fn lattice(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    /// Geometry from sform when `sform_code > 0`, else qform, else pixdim only.
    pub fn geometry(&self) -> std::result::Result<Geometry, VolumeError> {
        let dims = self.lattice();
        if self.sform_code > 0 {
            let mut spacing = [0.0; 3];
            let mut direction = [[0.0; 3]; 3];
            for c in 0..3 {
                let col: Vec<f64> = (0..3).map(|r| self.srow[r][c] as f64).collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                spacing[c] = norm;
                for r in 0..3 {
                    direction[r][c] = if norm > 0.0 { col[r] / norm } else { 0.0 };
                }
            }
            let origin = [self.srow[0][3] as f64, self.srow[1][3] as f64, self.srow[2][3] as f64];
            Geometry::new(dims, spacing, origin, direction)
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(f64::from);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let mut r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            for row in r.iter_mut() {
                row[2] *= qfac;
            }
            let spacing = [self.pixdim[1], self.pixdim[2], self.pixdim[3]].map(|s| f64::from(s).abs());
            Geometry::new(dims, spacing, self.qoffset.map(f64::from), r)
        } else {
            let spacing = [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
                .map(|s| if s > 0.0 { f64::from(s) } else { 1.0 });
            Geometry::new(dims, spacing, [0.0; 3], crate::volume::IDENTITY_DIRECTION)
        }
    }
}

/// Decoded file: header plus raw (scaled) voxel values, volume after volume.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub header: NiftiHeaderSummary,
    pub geometry: Geometry,
    pub data: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| NiftiError::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| NiftiError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header<B: ByteOrder>(path: &Path, bytes: &[u8], byte_order: ByteOrderKind) -> Result<NiftiHeaderSummary> {
    let corrupt = |reason: String| NiftiError::CorruptHeader { path: path.to_path_buf(), reason };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(corrupt(format!("magic {:?} is not single-file NIfTI-1", String::from_utf8_lossy(magic))));
    }
    let i16_at = |off: usize| B::read_i16(&bytes[off..off + 2]);
    let f32_at = |off: usize| B::read_f32(&bytes[off..off + 4]);

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = i16_at(40 + 2 * i);
    }
    if !(1..=7).contains(&dim[0]) || dim[1..=dim[0] as usize].iter().any(|&d| d < 1) {
        return Err(corrupt(format!("invalid dim {dim:?}")));
    }
    let code = i16_at(70);
    let datatype = Datatype::from_code(code)
        .ok_or(NiftiError::UnsupportedDatatype { path: path.to_path_buf(), code })?;
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(76 + 4 * i);
    }
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(corrupt(format!("vox_offset {vox_offset} is before the end of the header")));
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(280 + 16 * r + 4 * c);
        }
    }
    Ok(NiftiHeaderSummary {
        datatype,
        dim,
        pixdim,
        vox_offset,
        scl_slope: f32_at(112),
        scl_inter: f32_at(116),
        qform_code: i16_at(252),
        sform_code: i16_at(254),
        quatern: [f32_at(256), f32_at(260), f32_at(264)],
        qoffset: [f32_at(268), f32_at(272), f32_at(276)],
        srow,
        byte_order,
    })
}

fn decode_header(path: &Path, bytes: &[u8]) -> Result<NiftiHeaderSummary> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("file holds {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        });
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_header::<LittleEndian>(path, bytes, ByteOrderKind::Little)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_header::<BigEndian>(path, bytes, ByteOrderKind::Big)
    } else {
        Err(NiftiError::CorruptHeader { path: path.to_path_buf(), reason: "sizeof_hdr is not 348".into() })
    }
}

fn decode_values<B: ByteOrder>(payload: &[u8], datatype: Datatype, count: usize) -> Vec<f64> {
    let mut cur = Cursor::new(payload);
    let mut out = Vec::with_capacity(count);
    // payload length is checked by the caller, so reads cannot fail
    for _ in 0..count {
        let v = match datatype {
            Datatype::Uint8 => f64::from(cur.read_u8().unwrap()),
            Datatype::Int16 => f64::from(cur.read_i16::<B>().unwrap()),
            Datatype::Int32 => f64::from(cur.read_i32::<B>().unwrap()),
            Datatype::Float32 => f64::from(cur.read_f32::<B>().unwrap()),
            Datatype::Float64 => cur.read_f64::<B>().unwrap(),
        };
        out.push(v);
    }
    out
}

/// Reads header and all voxel data, applying `scl_slope`/`scl_inter` when the slope is set.
pub fn read_image(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let header = decode_header(path, &bytes)?;
    let geometry = header.geometry().map_err(|source| NiftiError::Volume { path: path.to_path_buf(), source })?;
    let count = geometry.voxel_count() * header.volumes();
    let offset = header.vox_offset as usize;
    let expected = count * header.datatype.bytes();
    let actual = bytes.len().saturating_sub(offset);
    if actual < expected {
        return Err(NiftiError::DataLength { path: path.to_path_buf(), expected, actual });
    }
    let payload = &bytes[offset..offset + expected];
    let mut data = match header.byte_order {
        ByteOrderKind::Little => decode_values::<LittleEndian>(payload, header.datatype, count),
        ByteOrderKind::Big => decode_values::<BigEndian>(payload, header.datatype, count),
    };
    if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        let (slope, inter) = (f64::from(header.scl_slope), f64::from(header.scl_inter));
        if slope != 1.0 || inter != 0.0 {
            data.iter_mut().for_each(|v| *v = *v * slope + inter);
        }
    }
    Ok(NiftiImage { header, geometry, data })
}

/// Reads only the header and derived geometry.
pub fn read_header(path: impl AsRef<Path>) -> Result<(NiftiHeaderSummary, Geometry)> {
    let path = path.as_ref();
    let mut raw = Vec::with_capacity(HEADER_SIZE);
    let file = File::open(path).map_err(|e| NiftiError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic).map_err(|e| NiftiError::io(path, e))?;
    let chained = Cursor::new(magic).chain(reader);
    if magic == GZIP_MAGIC {
        GzDecoder::new(chained).take(HEADER_SIZE as u64).read_to_end(&mut raw)
    } else {
        chained.take(HEADER_SIZE as u64).read_to_end(&mut raw)
    }
    .map_err(|e| NiftiError::io(path, e))?;
    let header = decode_header(path, &raw)?;
    let geometry = header.geometry().map_err(|source| NiftiError::Volume { path: path.to_path_buf(), source })?;
    Ok((header, geometry))
}

fn require_3d(path: &Path, image: &NiftiImage) -> Result<()> {
    if image.header.volumes() != 1 || image.header.dim[0] > 4 {
        return Err(NiftiError::Dimensionality {
            path: path.to_path_buf(),
            expected: "a 3D volume",
            dim: image.header.dim,
        });
    }
    Ok(())
}

/// Reads a 3D scalar volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VoxelGrid<f64>> {
    let path = path.as_ref();
    let image = read_image(path)?;
    require_3d(path, &image)?;
    VoxelGrid::new(image.geometry, image.data).map_err(|source| NiftiError::Volume { path: path.to_path_buf(), source })
}

/// Reads a label mask, accepting float storage within [`LABEL_CAST_TOLERANCE`] of an integer.
pub fn read_mask(path: impl AsRef<Path>, allowed: &LabelSet) -> Result<LabelMask> {
    let path = path.as_ref();
    let image = read_image(path)?;
    require_3d(path, &image)?;
    let mut labels = Vec::with_capacity(image.data.len());
    for (index, &value) in image.data.iter().enumerate() {
        let rounded = value.round();
        if !((value - rounded).abs() <= LABEL_CAST_TOLERANCE) {
            return Err(NiftiError::NonIntegralLabel { path: path.to_path_buf(), index, value });
        }
        if rounded < 0.0 || rounded > f64::from(Label::MAX) || !allowed.admits(rounded as Label) {
            return Err(NiftiError::LabelNotAllowed {
                path: path.to_path_buf(),
                index,
                value: rounded,
                allowed: allowed.clone(),
            });
        }
        labels.push(rounded as Label);
    }
    LabelMask::from_values(image.geometry, labels, allowed.clone())
        .map_err(|source| NiftiError::Volume { path: path.to_path_buf(), source })
}

/// Crop placement persisted next to a probability map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetSidecar {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

/// `<dir>/<stem>.offset.json` where the stem drops `.nii` or `.nii.gz`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.offset.json"))
}

/// Reads a 4D probability map (`dim[4]` classes) and its offset sidecar when present.
pub fn read_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let image = read_image(path)?;
    let classes = image.header.volumes();
    if image.header.dim[0] != 4 || classes < 2 {
        return Err(NiftiError::Dimensionality {
            path: path.to_path_buf(),
            expected: "a 4D map with at least 2 classes in dim[4]",
            dim: image.header.dim,
        });
    }
    let n = image.geometry.voxel_count();
    let planes: Vec<Vec<f64>> = image.data.chunks(n).map(<[f64]>::to_vec).collect();
    let side = sidecar_path(path);
    let offset = match std::fs::read(&side) {
        Ok(bytes) => {
            let s: OffsetSidecar =
                serde_json::from_slice(&bytes).map_err(|source| NiftiError::Sidecar { path: side.clone(), source })?;
            [s.x, s.y, s.z]
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => [0; 3],
        Err(e) => return Err(NiftiError::io(&side, e)),
    };
    ProbabilityMap::detect_normalized(image.geometry, planes, offset)
        .map_err(|source| NiftiError::Volume { path: path.to_path_buf(), source })
}

fn quaternion_of(direction: &[[f64; 3]; 3]) -> Option<([f64; 3], f64)> {
    let mut r = *direction;
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let qfac = if det < 0.0 { -1.0 } else { 1.0 };
    for row in r.iter_mut() {
        row[2] *= qfac;
    }
    // only proper rotations have a quaternion form
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > 1e-4 {
                return None;
            }
        }
    }
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d);
    if trace > -0.5 {
        let a_ = 0.5 * (1.0 + trace).sqrt();
        a = a_;
        b = 0.25 * (r[2][1] - r[1][2]) / a_;
        c = 0.25 * (r[0][2] - r[2][0]) / a_;
        d = 0.25 * (r[1][0] - r[0][1]) / a_;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r[0][1] + r[1][0]) / b;
            d = 0.25 * (r[0][2] + r[2][0]) / b;
            a = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r[0][1] + r[1][0]) / c;
            d = 0.25 * (r[1][2] + r[2][1]) / c;
            a = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r[0][2] + r[2][0]) / d;
            c = 0.25 * (r[1][2] + r[2][1]) / d;
            a = 0.25 * (r[1][0] - r[0][1]) / d;
        }
    }
    let sign = if a < 0.0 { -1.0 } else { 1.0 };
    Some(([sign * b, sign * c, sign * d], qfac))
}

fn build_header(geometry: &Geometry, datatype: Datatype, volumes: usize) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| LittleEndian::write_i16(&mut h[off..off + 2], v);
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| LittleEndian::write_f32(&mut h[off..off + 4], v);

    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim: i16 = if volumes > 1 { 4 } else { 3 };
    let mut dim = [ndim, 1, 1, 1, 1, 1, 1, 1];
    for (axis, &d) in geometry.dims.iter().enumerate() {
        dim[axis + 1] = d as i16;
    }
    dim[4] = volumes as i16;
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.bytes() * 8) as i16);

    let quaternion = quaternion_of(&geometry.direction);
    let qfac = quaternion.map_or(1.0, |(_, q)| q);
    let pixdim = [qfac, geometry.spacing[0], geometry.spacing[1], geometry.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: mm
    h[123] = 2;

    if let Some((bcd, _)) = quaternion {
        put_i16(&mut h, 252, 1);
        for (i, q) in bcd.iter().enumerate() {
            put_f32(&mut h, 256 + 4 * i, *q as f32);
        }
        for (i, o) in geometry.origin.iter().enumerate() {
            put_f32(&mut h, 268 + 4 * i, *o as f32);
        }
    }
    put_i16(&mut h, 254, 1);
    let affine = geometry.affine();
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut h, 280 + 16 * r + 4 * c, affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn encode_values(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>, datatype: Datatype) -> Result<()> {
    for (index, v) in values.enumerate() {
        if !datatype.representable(v) {
            return Err(NiftiError::NotRepresentable { index, value: v, datatype });
        }
        // Vec<u8> writes are infallible
        match datatype {
            Datatype::Uint8 => buf.write_u8(v as u8),
            Datatype::Int16 => buf.write_i16::<LittleEndian>(v as i16),
            Datatype::Int32 => buf.write_i32::<LittleEndian>(v as i32),
            Datatype::Float32 => buf.write_f32::<LittleEndian>(v as f32),
            Datatype::Float64 => buf.write_f64::<LittleEndian>(v),
        }
        .expect("in-memory write");
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| NiftiError::io(path, e))?;
    let gz = path.to_string_lossy().ends_with(".gz");
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    result.map_err(|e| NiftiError::io(path, e))
}

fn write_raw(
    path: &Path,
    geometry: &Geometry,
    datatype: Datatype,
    volumes: usize,
    values: impl Iterator<Item = f64>,
) -> Result<()> {
    let mut bytes = build_header(geometry, datatype, volumes);
    bytes.reserve(geometry.voxel_count() * volumes * datatype.bytes());
    encode_values(&mut bytes, values, datatype)?;
    write_file(path, &bytes)
}

/// Writes a scalar grid with an explicit on-disk datatype; values must be exactly representable.
pub fn write_grid_as(grid: &VoxelGrid<f64>, datatype: Datatype, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), grid.geometry(), datatype, 1, grid.values().iter().copied())
}

/// Writes a probability map as float32 with classes along `dim[4]`, plus its offset sidecar.
pub fn write_probability_map(map: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let values = map.planes().iter().flat_map(|p| p.iter().map(|&v| f64::from(v as f32)));
    write_raw(path, map.geometry(), Datatype::Float32, map.class_count(), values)?;
    let [x, y, z] = map.crop_offset();
    let side = sidecar_path(path);
    let json = serde_json::to_vec(&OffsetSidecar { x, y, z }).expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| NiftiError::io(&side, e))
}

/// Anything that can be stored as a NIfTI file with its default encoding.
pub trait WriteNifti {
    fn write_nifti(&self, path: &Path) -> Result<()>;
}

impl WriteNifti for VoxelGrid<f64> {
    /// Float64, so every value survives.
    fn write_nifti(&self, path: &Path) -> Result<()> {
        write_grid_as(self, Datatype::Float64, path)
    }
}

impl WriteNifti for LabelMask {
    /// Always uint8.
    fn write_nifti(&self, path: &Path) -> Result<()> {
        write_raw(path, self.geometry(), Datatype::Uint8, 1, self.values().iter().map(|&v| f64::from(v)))
    }
}

impl WriteNifti for ProbabilityMap {
    fn write_nifti(&self, path: &Path) -> Result<()> {
        write_probability_map(self, path)
    }
}

/// Writes a grid, mask or probability map; gzip when the path ends in `.gz`.
pub fn write_volume<T: WriteNifti + ?Sized>(item: &T, path: impl AsRef<Path>) -> Result<()> {
    item.write_nifti(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IDENTITY_DIRECTION;

    fn oblique_geometry() -> Geometry {
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let dir = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Geometry::new([3, 4, 2], [0.5, 0.75, 2.0], [-10.5, 20.25, 3.0], dir).unwrap()
    }

    // Minimal header built field by field from the published layout, independent of build_header.
    fn handcrafted_header<B: ByteOrder>(datatype: i16, bitpix: i16, dims: [i16; 3]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        B::write_i32(&mut h[0..4], 348);
        B::write_i16(&mut h[40..42], 3);
        B::write_i16(&mut h[42..44], dims[0]);
        B::write_i16(&mut h[44..46], dims[1]);
        B::write_i16(&mut h[46..48], dims[2]);
        B::write_i16(&mut h[70..72], datatype);
        B::write_i16(&mut h[72..74], bitpix);
        for i in 0..4 {
            B::write_f32(&mut h[76 + 4 * i..80 + 4 * i], 1.0);
        }
        B::write_f32(&mut h[108..112], 352.0);
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn handcrafted_float32_file_reads_in_axis_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.nii");
        let mut bytes = handcrafted_header::<LittleEndian>(16, 32, [2, 2, 2]);
        let payload = [0.5f32, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5];
        for v in payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let grid = read_volume(&path).unwrap();
        assert_eq!(grid.values(), &[0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5]);
        // x fastest: (1,0,0) is the second value, (0,0,1) the fifth
        assert_eq!(*grid.get(1, 0, 0), 1.5);
        assert_eq!(*grid.get(0, 1, 0), 2.5);
        assert_eq!(*grid.get(0, 0, 1), 4.5);
        assert_eq!(grid.geometry().spacing, [1.0; 3]);
        assert_eq!(grid.geometry().direction, IDENTITY_DIRECTION);
    }

    #[test]
    fn big_endian_int16_file_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("be.nii");
        let mut bytes = handcrafted_header::<BigEndian>(4, 16, [2, 1, 1]);
        bytes.extend_from_slice(&(-300i16).to_be_bytes());
        bytes.extend_from_slice(&(7i16).to_be_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let image = read_image(&path).unwrap();
        assert_eq!(image.header.byte_order, ByteOrderKind::Big);
        assert_eq!(image.data, vec![-300.0, 7.0]);
    }

    #[test]
    fn scaling_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        let mut bytes = handcrafted_header::<LittleEndian>(2, 8, [2, 1, 1]);
        LittleEndian::write_f32(&mut bytes[112..116], 0.5);
        LittleEndian::write_f32(&mut bytes[116..120], -1.0);
        bytes.extend_from_slice(&[4, 10]);
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(read_volume(&path).unwrap().values(), &[1.0, 4.0]);
    }

    #[test]
    fn header_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();

        let path = dir.path().join("dtype.nii");
        let mut bytes = handcrafted_header::<LittleEndian>(128, 24, [1, 1, 1]);
        bytes.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(NiftiError::UnsupportedDatatype { code: 128, .. })));

        let path = dir.path().join("magic.nii");
        let mut bytes = handcrafted_header::<LittleEndian>(2, 8, [1, 1, 1]);
        bytes[344..348].copy_from_slice(b"ni1\0");
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(NiftiError::CorruptHeader { .. })));

        let path = dir.path().join("short.nii");
        let mut bytes = handcrafted_header::<LittleEndian>(16, 32, [2, 2, 2]);
        bytes.extend_from_slice(&[0; 8]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(NiftiError::DataLength { expected: 32, actual: 8, .. })
        ));

        let path = dir.path().join("tiny.nii");
        std::fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(read_volume(&path), Err(NiftiError::CorruptHeader { .. })));
    }

    #[test]
    fn qform_used_when_sform_absent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.nii");
        let mut bytes = handcrafted_header::<LittleEndian>(2, 8, [1, 1, 1]);
        // 180 degree rotation about z: quaternion (0, 0, 0, 1)
        LittleEndian::write_i16(&mut bytes[252..254], 1);
        LittleEndian::write_f32(&mut bytes[264..268], 1.0);
        LittleEndian::write_f32(&mut bytes[268..272], 5.0);
        LittleEndian::write_f32(&mut bytes[80..84], 2.0);
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let g = read_volume(&path).unwrap().geometry().clone();
        assert_eq!(g.origin, [5.0, 0.0, 0.0]);
        assert_eq!(g.spacing, [2.0, 1.0, 1.0]);
        assert_eq!(g.direction, [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn written_qform_agrees_with_sform() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.nii");
        let g = oblique_geometry();
        let grid = VoxelGrid::filled(g.clone(), 0.0);
        write_volume(&grid, &path).unwrap();
        let (mut header, from_sform) = read_header(&path).unwrap();
        header.sform_code = 0;
        let from_qform = header.geometry().unwrap();
        assert!(from_sform.is_compatible(&g));
        assert!(from_qform.is_compatible(&g), "{from_qform} vs {g}");
    }

    #[test]
    fn mask_reading_rules() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::with_dims([3, 1, 1]).unwrap();

        let path = dir.path().join("ok.nii.gz");
        write_grid_as(&VoxelGrid::new(g.clone(), vec![0.0, 1.0, 2.0]).unwrap(), Datatype::Uint8, &path).unwrap();
        let m = read_mask(&path, &LabelSet::gtv()).unwrap();
        assert_eq!(m.values(), &[0, 1, 2]);
        assert_eq!(m.labels(), &LabelSet::gtv());

        let path = dir.path().join("float.nii");
        let v = f64::from(1.000_000_1f32);
        write_grid_as(&VoxelGrid::new(g.clone(), vec![0.0, v, 2.0]).unwrap(), Datatype::Float32, &path).unwrap();
        assert_eq!(read_mask(&path, &LabelSet::gtv()).unwrap().values(), &[0, 1, 2]);

        let path = dir.path().join("frac.nii");
        write_grid_as(&VoxelGrid::new(g.clone(), vec![0.0, 0.5, 2.0]).unwrap(), Datatype::Float32, &path).unwrap();
        assert!(matches!(read_mask(&path, &LabelSet::gtv()), Err(NiftiError::NonIntegralLabel { index: 1, .. })));

        let path = dir.path().join("three.nii");
        write_grid_as(&VoxelGrid::new(g, vec![0.0, 3.0, 2.0]).unwrap(), Datatype::Uint8, &path).unwrap();
        match read_mask(&path, &LabelSet::gtv()) {
            Err(NiftiError::LabelNotAllowed { index, value, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(value, 3.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probability_map_roundtrip_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prob.nii.gz");
        let g = Geometry::with_dims([2, 2, 1]).unwrap();
        let planes = vec![vec![0.5, 0.25, 1.0, 0.0], vec![0.25, 0.5, 0.0, 0.0], vec![0.25, 0.25, 0.0, 1.0]];
        let map = ProbabilityMap::new(g, planes, [3, 1, 4], true).unwrap();
        write_volume(&map, &path).unwrap();
        assert!(dir.path().join("prob.offset.json").exists());
        let back = read_probability_map(&path).unwrap();
        assert_eq!(back, map);
        let (header, _) = read_header(&path).unwrap();
        assert_eq!(header.dim[0], 4);
        assert_eq!(header.dim[4], 3);
        assert_eq!(header.datatype, Datatype::Float32);
    }

    #[test]
    fn missing_sidecar_means_zero_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nii");
        let map = ProbabilityMap::one_hot(Geometry::with_dims([2, 1, 1]).unwrap(), &[0, 1], 2).unwrap();
        write_volume(&map.clone().with_crop_offset([1, 2, 3]), &path).unwrap();
        std::fs::remove_file(dir.path().join("p.offset.json")).unwrap();
        assert_eq!(read_probability_map(&path).unwrap().crop_offset(), [0, 0, 0]);
    }

    #[test]
    fn masks_are_uint8_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nii.gz");
        let g = oblique_geometry();
        let values: Vec<u8> = (0..g.voxel_count()).map(|i| (i % 3) as u8).collect();
        let mask = LabelMask::from_values(g, values, LabelSet::gtv()).unwrap();
        write_volume(&mask, &path).unwrap();
        assert_eq!(read_header(&path).unwrap().0.datatype, Datatype::Uint8);
        let back = read_mask(&path, &LabelSet::gtv()).unwrap();
        assert_eq!(back.values(), mask.values());
        assert!(back.geometry().is_compatible(mask.geometry()));
    }

    #[test]
    fn unrepresentable_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::with_dims([1, 1, 1]).unwrap();
        let grid = VoxelGrid::new(g, vec![1.5]).unwrap();
        assert!(matches!(
            write_grid_as(&grid, Datatype::Int16, dir.path().join("x.nii")),
            Err(NiftiError::NotRepresentable { datatype: Datatype::Int16, .. })
        ));
    }

    #[test]
    fn writing_into_missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mask = LabelMask::empty(Geometry::with_dims([1, 1, 1]).unwrap(), LabelSet::gtv());
        let err = write_volume(&mask, dir.path().join("nope/m.nii")).unwrap_err();
        assert!(matches!(err, NiftiError::Io { .. }));
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("/a/b/case_1.nii.gz")), PathBuf::from("/a/b/case_1.offset.json"));
        assert_eq!(sidecar_path(Path::new("x.nii")), PathBuf::from("x.offset.json"));
    }
}
