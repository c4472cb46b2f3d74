//! NIfTI-1 volume IO, brain masks, and labelled atlases.
//!
//! Voxel data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("not a NIfTI-1 header (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("truncated data: need {needed} bytes, have {available}")]
    TruncatedData { needed: usize, available: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("mask has no nonzero voxel")]
    EmptyMask,
    #[error("value {value} at voxel {index} is not representable as {datatype:?}")]
    NotRepresentable { index: usize, value: f32, datatype: Datatype },
    #[error("atlas label {0} has no row in the label table")]
    UnknownLabelInVolume(u32),
    #[error("atlas voxel {index} holds non-label value {value}")]
    NonIntegralLabel { index: usize, value: f32 },
    #[error("malformed label table row {line}: {detail}")]
    MalformedLabelRow { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// 4x4 voxel-to-world transform, row-major.
pub type Affine = [[f64; 4]; 4];

pub fn diagonal_affine(spacing: [f64; 3], origin: [f64; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, origin[0]],
        [0.0, spacing[1], 0.0, origin[1]],
        [0.0, 0.0, spacing[2], origin[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn voxel_to_world(affine: &Affine, voxel: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = affine[r][0] * voxel[0] + affine[r][1] * voxel[1] + affine[r][2] * voxel[2] + affine[r][3];
    }
    out
}

/// Inverse of [`voxel_to_world`]; `None` when the linear part is singular.
pub fn world_to_voxel(affine: &Affine, world: [f64; 3]) -> Option<[f64; 3]> {
    let m = |r: usize, c: usize| affine[r][c];
    let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = [
        [
            m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1),
            m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2),
            m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1),
        ],
        [
            m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2),
            m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0),
            m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2),
        ],
        [
            m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0),
            m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1),
            m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
        ],
    ];
    let d = [world[0] - m(0, 3), world[1] - m(1, 3), world[2] - m(2, 3)];
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = (inv[r][0] * d[0] + inv[r][1] * d[1] + inv[r][2] * d[2]) / det;
    }
    Some(out)
}

/// Grid geometry shared by volumes, masks, and atlases.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::Invalid("affine last row must be (0, 0, 0, 1)".into()));
        }
        Ok(Self { dims, spacing, affine })
    }

    /// Axis-aligned grid with the given spacing and origin.
    pub fn isotropic(dims: [usize; 3], spacing: f64, origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, [spacing; 3], diagonal_affine([spacing; 3], origin))
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn world(&self, index: usize) -> [f64; 3] {
        let c = self.coords(index);
        voxel_to_world(&self.affine, [c[0] as f64, c[1] as f64, c[2] as f64])
    }

    fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(VolumeError::DimMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainVolume {
    pub grid: Grid,
    data: Vec<f32>,
}

impl BrainVolume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(VolumeError::DimMismatch(format!(
                "{} voxels for dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, data: vec![0.0; n] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrainMask {
    pub grid: Grid,
    data: Vec<bool>,
}

impl BrainMask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(VolumeError::DimMismatch(format!(
                "{} voxels for dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(VolumeError::EmptyMask);
        }
        Ok(Self { grid, data })
    }

    /// Voxels with a nonzero value are inside the mask.
    pub fn from_volume(v: &BrainVolume) -> Result<Self> {
        Self::new(v.grid.clone(), v.data.iter().map(|&x| x != 0.0).collect())
    }

    pub fn to_volume(&self) -> BrainVolume {
        BrainVolume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn contains(&self, index: usize) -> bool {
        self.data[index]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Linear indices of in-mask voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i]).collect()
    }
}

pub fn apply_mask(volume: &BrainVolume, mask: &BrainMask) -> Result<BrainVolume> {
    volume.grid.check_same(&mask.grid, "apply_mask")?;
    let data = volume
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok(BrainVolume {
        grid: volume.grid.clone(),
        data,
    })
}

/// On-disk element types accepted by [`read_nifti`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    pub const ALL: [Datatype; 4] = [Datatype::Uint8, Datatype::Int16, Datatype::Float32, Datatype::Float64];

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => return Err(VolumeError::UnsupportedDatatype(other)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }

    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.arr(off))
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn qform_affine(r: &Reader, pixdim: [f64; 3]) -> Affine {
    let (b, c, d) = (r.f32(256) as f64, r.f32(260) as f64, r.f32(264) as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if r.f32(76) < 0.0 { -1.0 } else { 1.0 };
    let rot = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
    let offset = [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = round_f32(rot[i][j] * scale[j]);
        }
        m[i][3] = offset[i];
    }
    m[3][3] = 1.0;
    m
}

/// Parses a single-file (`n+1`) NIfTI-1 image. For the two-file (`ni1`)
/// layout, pass the header followed by the image bytes; the payload is then
/// read from `348 + vox_offset`.
pub fn read_nifti(bytes: &[u8]) -> Result<BrainVolume> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::TruncatedData {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let big_endian = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => false,
        (_, 348) => true,
        _ => false,
    };
    let r = Reader { bytes, big_endian };
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    let single_file = match &magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(VolumeError::BadMagic(magic)),
    };
    let ndim = r.i16(40);
    if !(ndim == 3 || ndim == 4) {
        return Err(VolumeError::DimMismatch(format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = r.i16(42 + 2 * a);
        if v <= 0 {
            return Err(VolumeError::DimMismatch(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    let datatype = Datatype::from_code(r.i16(70))?;
    let mut spacing = [0.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = (r.f32(80 + 4 * a) as f64).abs();
        *s = if v > 0.0 && v.is_finite() { v } else { 1.0 };
    }
    let affine = if r.i16(254) > 0 {
        let mut m = [[0.0; 4]; 4];
        for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                m[row][c] = r.f32(base + 4 * c) as f64;
            }
        }
        m[3][3] = 1.0;
        m
    } else if r.i16(252) > 0 {
        qform_affine(&r, spacing)
    } else {
        diagonal_affine(spacing, [0.0; 3])
    };

    let vox_offset = r.f32(108);
    let start = if single_file {
        (vox_offset.max(HEADER_LEN as f32)) as usize
    } else {
        HEADER_LEN + vox_offset.max(0.0) as usize
    };
    let n: usize = dims.iter().product();
    let needed = start + n * datatype.size();
    if bytes.len() < needed {
        return Err(VolumeError::TruncatedData {
            needed,
            available: bytes.len(),
        });
    }
    let payload = Reader {
        bytes: &bytes[start..needed],
        big_endian,
    };
    let raw: Vec<f64> = match datatype {
        Datatype::Uint8 => payload.bytes.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => (0..n).map(|i| payload.i16(2 * i) as f64).collect(),
        Datatype::Float32 => (0..n).map(|i| payload.f32(4 * i) as f64).collect(),
        Datatype::Float64 => (0..n).map(|i| payload.f64(8 * i)).collect(),
    };
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let data = if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        raw.into_iter().map(|v| (v * slope + inter) as f32).collect()
    } else {
        raw.into_iter().map(|v| v as f32).collect()
    };
    BrainVolume::new(Grid::new(dims, spacing, affine)?, data)
}

/// Serializes as single-file NIfTI-1 with a float32 payload.
pub fn write_nifti(volume: &BrainVolume) -> Vec<u8> {
    write_nifti_as(volume, Datatype::Float32).expect("float32 represents every voxel")
}

/// Serializes with the given on-disk datatype; fails if any voxel would not
/// survive the conversion exactly.
pub fn write_nifti_as(volume: &BrainVolume, datatype: Datatype) -> Result<Vec<u8>> {
    let grid = &volume.grid;
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_LEN as i32).to_le_bytes());
    h[38] = b'r';
    let dim: [i16; 8] = [
        3,
        grid.dims[0] as i16,
        grid.dims[1] as i16,
        grid.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &datatype.code().to_le_bytes());
    put(&mut h, 72, &((datatype.size() * 8) as i16).to_le_bytes());
    let pixdim = [1.0f32, grid.spacing[0] as f32, grid.spacing[1] as f32, grid.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    h[123] = 2; // millimetres
    put(&mut h, 254, &1i16.to_le_bytes());
    for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
        for c in 0..4 {
            put(&mut h, base + 4 * c, &(grid.affine[row][c] as f32).to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");

    h.reserve(volume.data.len() * datatype.size());
    for (index, &v) in volume.data.iter().enumerate() {
        let bad = || VolumeError::NotRepresentable { index, value: v, datatype };
        match datatype {
            Datatype::Uint8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(bad());
                }
                h.push(v as u8);
            }
            Datatype::Int16 => {
                if v.fract() != 0.0 || !(-32768.0..=32767.0).contains(&v) {
                    return Err(bad());
                }
                h.extend_from_slice(&(v as i16).to_le_bytes());
            }
            Datatype::Float32 => h.extend_from_slice(&v.to_le_bytes()),
            Datatype::Float64 => h.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    Ok(h)
}

pub fn load_nifti(path: &Path) -> Result<BrainVolume> {
    read_nifti(&std::fs::read(path)?)
}

pub fn save_nifti(path: &Path, volume: &BrainVolume) -> Result<()> {
    std::fs::write(path, write_nifti(volume))?;
    Ok(())
}

/// Hemisphere and region name of one atlas label.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Region {
    pub hemisphere: String,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasVolume {
    pub grid: Grid,
    labels: Vec<u32>,
    table: BTreeMap<u32, Region>,
}

impl AtlasVolume {
    pub fn new(grid: Grid, labels: Vec<u32>, table: BTreeMap<u32, Region>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(VolumeError::DimMismatch(format!(
                "{} labels for dims {:?}",
                labels.len(),
                grid.dims
            )));
        }
        if let Some(&missing) = labels.iter().find(|&&l| l != 0 && !table.contains_key(&l)) {
            return Err(VolumeError::UnknownLabelInVolume(missing));
        }
        Ok(Self { grid, labels, table })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, index: usize) -> u32 {
        self.labels[index]
    }

    /// Region of a label; `None` for background (0) or unknown labels.
    pub fn lookup(&self, label: u32) -> Option<&Region> {
        self.table.get(&label)
    }

    pub fn region_at(&self, index: usize) -> Option<&Region> {
        self.lookup(self.labels[index])
    }

    pub fn table(&self) -> &BTreeMap<u32, Region> {
        &self.table
    }

    pub fn to_volume(&self) -> BrainVolume {
        BrainVolume {
            grid: self.grid.clone(),
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }
}

/// Parses `label,hemisphere,region` rows. A first row whose label field is
/// not numeric is taken as a header; label 0 is reserved for background.
pub fn parse_label_table(text: &str) -> Result<BTreeMap<u32, Region>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut table = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| VolumeError::MalformedLabelRow {
            line,
            detail: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 3 {
            return Err(VolumeError::MalformedLabelRow {
                line,
                detail: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let label = match record[0].parse::<u32>() {
            Ok(l) => l,
            Err(_) if line == 1 => continue,
            Err(e) => {
                return Err(VolumeError::MalformedLabelRow {
                    line,
                    detail: format!("label {:?}: {e}", &record[0]),
                })
            }
        };
        if label == 0 {
            return Err(VolumeError::MalformedLabelRow {
                line,
                detail: "label 0 is reserved for background".into(),
            });
        }
        let region = Region {
            hemisphere: record[1].to_string(),
            name: record[2].to_string(),
        };
        if table.insert(label, region).is_some() {
            return Err(VolumeError::MalformedLabelRow {
                line,
                detail: format!("duplicate label {label}"),
            });
        }
    }
    Ok(table)
}

pub fn format_label_table(table: &BTreeMap<u32, Region>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "hemisphere", "region"]).expect("in-memory write");
    for (label, r) in table {
        w.write_record([label.to_string().as_str(), &r.hemisphere, &r.name])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn load_atlas(volume_bytes: &[u8], label_table: &str) -> Result<AtlasVolume> {
    let v = read_nifti(volume_bytes)?;
    let table = parse_label_table(label_table)?;
    let labels = v
        .data
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f32 {
                Ok(value as u32)
            } else {
                Err(VolumeError::NonIntegralLabel { index, value })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    AtlasVolume::new(v.grid, labels, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::isotropic(dims, 3.0, [-10.0, 20.0, 5.5]).unwrap()
    }

    #[test]
    fn written_length_is_header_plus_payload() {
        let v = BrainVolume::zeros(grid([4, 5, 6]));
        assert_eq!(write_nifti(&v).len(), 352 + 4 * 4 * 5 * 6);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = write_nifti(&BrainVolume::zeros(grid([2, 2, 2])));
        bytes[344..348].copy_from_slice(b"abcd");
        assert!(matches!(read_nifti(&bytes), Err(VolumeError::BadMagic(m)) if &m == b"abcd"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = write_nifti(&BrainVolume::zeros(grid([2, 2, 2])));
        bytes.pop();
        assert!(matches!(read_nifti(&bytes), Err(VolumeError::TruncatedData { .. })));
        assert!(matches!(read_nifti(&bytes[..100]), Err(VolumeError::TruncatedData { .. })));
    }

    #[test]
    fn dim0_outside_3_4_is_rejected() {
        let mut bytes = write_nifti(&BrainVolume::zeros(grid([2, 2, 2])));
        bytes[40..42].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(read_nifti(&bytes), Err(VolumeError::DimMismatch(_))));
    }

    #[test]
    fn unsupported_datatype_is_rejected() {
        let mut bytes = write_nifti(&BrainVolume::zeros(grid([2, 2, 2])));
        bytes[70..72].copy_from_slice(&8i16.to_le_bytes());
        assert!(matches!(read_nifti(&bytes), Err(VolumeError::UnsupportedDatatype(8))));
    }

    #[test]
    fn scaling_applied_when_slope_nonzero() {
        let mut v = BrainVolume::zeros(grid([2, 1, 1]));
        v.data_mut().copy_from_slice(&[1.0, 3.0]);
        let mut bytes = write_nifti_as(&v, Datatype::Int16).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&0.5f32.to_le_bytes());
        assert_eq!(read_nifti(&bytes).unwrap().data(), &[2.5, 6.5]);
    }

    #[test]
    fn big_endian_header_is_read() {
        // Build a big-endian file by hand: swap every field we write.
        let v = BrainVolume::new(grid([2, 1, 1]), vec![1.5, -2.0]).unwrap();
        let le = write_nifti(&v);
        let mut be = le.clone();
        let swap = |b: &mut Vec<u8>, off: usize, n: usize| b[off..off + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
            swap(&mut be, 76 + 4 * i, 4);
        }
        for off in [70, 72, 252, 254] {
            swap(&mut be, off, 2);
        }
        for off in [108, 112, 116] {
            swap(&mut be, off, 4);
        }
        for i in 0..12 {
            swap(&mut be, 280 + 4 * i, 4);
        }
        swap(&mut be, 352, 4);
        swap(&mut be, 356, 4);
        assert_eq!(read_nifti(&be).unwrap(), read_nifti(&le).unwrap());
    }

    #[test]
    fn qform_fallback_with_identity_quaternion() {
        let v = BrainVolume::zeros(Grid::new([2, 2, 2], [2.0, 3.0, 4.0], diagonal_affine([2.0, 3.0, 4.0], [0.0; 3])).unwrap());
        let mut bytes = write_nifti(&v);
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        bytes[252..254].copy_from_slice(&1i16.to_le_bytes());
        bytes[268..272].copy_from_slice(&7.0f32.to_le_bytes());
        let r = read_nifti(&bytes).unwrap();
        assert_eq!(r.grid.affine, diagonal_affine([2.0, 3.0, 4.0], [7.0, 0.0, 0.0]));
    }

    #[test]
    fn pixdim_fallback_without_sform_or_qform() {
        let v = BrainVolume::zeros(Grid::new([2, 2, 2], [2.0, 3.0, 4.0], diagonal_affine([2.0, 3.0, 4.0], [9.0; 3])).unwrap());
        let mut bytes = write_nifti(&v);
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        let r = read_nifti(&bytes).unwrap();
        assert_eq!(r.grid.affine, diagonal_affine([2.0, 3.0, 4.0], [0.0; 3]));
    }

    #[test]
    fn delta_volume_locates_x_fastest() {
        let g = grid([3, 4, 5]);
        let mut v = BrainVolume::zeros(g.clone());
        let idx = 2 + 3 * (1 + 4 * 3);
        v.data_mut()[idx] = 1.0;
        let r = read_nifti(&write_nifti(&v)).unwrap();
        assert_eq!(r.get(2, 1, 3), 1.0);
        assert_eq!(g.coords(idx), [2, 1, 3]);
        assert_eq!(g.index(2, 1, 3), idx);
    }

    #[test]
    fn world_round_trip() {
        let g = grid([4, 4, 4]);
        let w = g.world(g.index(1, 2, 3));
        assert_eq!(w, [-7.0, 26.0, 14.5]);
        let back = world_to_voxel(&g.affine, w).unwrap();
        assert!(back.iter().zip([1.0, 2.0, 3.0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(
            BrainMask::new(grid([2, 2, 2]), vec![false; 8]),
            Err(VolumeError::EmptyMask)
        ));
    }

    #[test]
    fn label_table_parsing() {
        let t = parse_label_table("label,hemisphere,region\n3,Left,Inferior Parietal\n4, Right ,Fusiform\n").unwrap();
        assert_eq!(
            t[&3],
            Region {
                hemisphere: "Left".into(),
                name: "Inferior Parietal".into()
            }
        );
        assert_eq!(t[&4].hemisphere, "Right");
        assert!(matches!(
            parse_label_table("3,Left\n"),
            Err(VolumeError::MalformedLabelRow { line: 1, .. })
        ));
        assert!(matches!(
            parse_label_table("1,Left,A\nx,Left,B\n"),
            Err(VolumeError::MalformedLabelRow { line: 2, .. })
        ));
        assert_eq!(parse_label_table(&format_label_table(&t)).unwrap(), t);
    }
}
