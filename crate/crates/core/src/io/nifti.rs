//! Uncompressed single-file NIfTI-1 (`.nii`) subset.
//!
//! NIfTI stores the first axis fastest; the toolkit's axis 0 maps to the
//! NIfTI `x` axis (`dim[1]`, `pixdim[1]`), so voxel data is transposed on the
//! way in and out.

use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::grid::{voxel_count, Dims, DisplacementField, LabelMap, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub magic: [u8; 4],
    pub endian: Endian,
}

impl NiftiHeader {
    fn for_grid(dims: Dims, spacing: [f64; 3], datatype: i16, bitpix: i16) -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1],
            datatype,
            bitpix,
            pixdim: [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            magic: *b"n+1\0",
            endian: Endian::Little,
        }
    }

    pub fn dims(&self) -> Dims {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64]
    }

    /// Serializes to the 352-byte little-endian prefix (header plus an empty
    /// extension flag).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; VOX_OFFSET];
        LittleEndian::write_i32(&mut b[0..4], self.sizeof_hdr);
        b[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            LittleEndian::write_i16(&mut b[40 + 2 * i..42 + 2 * i], *d);
        }
        LittleEndian::write_i16(&mut b[70..72], self.datatype);
        LittleEndian::write_i16(&mut b[72..74], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut b[76 + 4 * i..80 + 4 * i], *p);
        }
        LittleEndian::write_f32(&mut b[108..112], self.vox_offset);
        LittleEndian::write_f32(&mut b[112..116], self.scl_slope);
        LittleEndian::write_f32(&mut b[116..120], self.scl_inter);
        b[123] = self.xyzt_units;
        b[344..348].copy_from_slice(&self.magic);
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!("{} bytes, need {HEADER_SIZE}", bytes.len())));
        }
        let endian = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
            Endian::Little
        } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
            Endian::Big
        } else {
            return Err(Error::MalformedHeader("sizeof_hdr is not 348 in either byte order".into()));
        };
        let i16_at = |o: usize| match endian {
            Endian::Little => LittleEndian::read_i16(&bytes[o..o + 2]),
            Endian::Big => BigEndian::read_i16(&bytes[o..o + 2]),
        };
        let f32_at = |o: usize| match endian {
            Endian::Little => LittleEndian::read_f32(&bytes[o..o + 4]),
            Endian::Big => BigEndian::read_f32(&bytes[o..o + 4]),
        };
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        if &magic != b"n+1\0" && &magic != b"ni1\0" {
            return Err(Error::BadMagic(magic));
        }
        Ok(Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: std::array::from_fn(|i| i16_at(40 + 2 * i)),
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim: std::array::from_fn(|i| f32_at(76 + 4 * i)),
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            xyzt_units: bytes[123],
            magic,
            endian,
        })
    }
}

/// A decoded image: header plus voxel values (scaling applied) in toolkit
/// order.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub values: Vec<f64>,
}

impl NiftiImage {
    pub fn dims(&self) -> Dims {
        self.header.dims()
    }

    pub fn to_volume(&self) -> Result<Volume> {
        let spacing = self.header.spacing().map(|s| if s > 0.0 { s } else { 1.0 });
        Volume::new(self.dims(), spacing, self.values.clone())
    }

    /// Integer labels; `num_classes` defaults to `max label + 1`.
    pub fn to_labels(&self, num_classes: Option<usize>) -> Result<LabelMap> {
        let mut labels = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!("label value {v} is not a non-negative integer")));
            }
            labels.push(v as u32);
        }
        let c = num_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize + 1);
        LabelMap::new(self.dims(), c, labels)
    }
}

/// Reorders between NIfTI (axis 0 fastest) and toolkit (axis 0 slowest).
fn nifti_to_toolkit(dims: Dims) -> impl Iterator<Item = usize> {
    // For every toolkit flat index, the NIfTI flat index that holds it.
    let [d0, d1, d2] = dims;
    (0..voxel_count(dims)).map(move |n| {
        let (i, j, k) = (n / (d1 * d2), (n / d2) % d1, n % d2);
        i + d0 * (j + d1 * k)
    })
}

pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    let header = NiftiHeader::parse(bytes)?;
    let ndim = header.dim[0];
    if !(3..=7).contains(&ndim) || header.dim[1..=3].iter().any(|&d| d <= 0) {
        return Err(Error::MalformedHeader(format!("unsupported dim {:?}", header.dim)));
    }
    if header.dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(Error::MalformedHeader("only single 3D volumes are supported".into()));
    }
    let width = match header.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let offset = header.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::MalformedHeader("two-file (.hdr/.img) layout is not supported".into()));
    }
    let dims = header.dims();
    let n = voxel_count(dims);
    let expected = n * width;
    let available = bytes.len().saturating_sub(offset);
    if available < expected {
        return Err(Error::TruncatedPayload { expected, found: available });
    }
    let payload = &bytes[offset..offset + expected];
    let raw: Vec<f64> = match (header.datatype, header.endian) {
        (DT_UINT8, _) => payload.iter().map(|&b| b as f64).collect(),
        (DT_INT16, Endian::Little) => payload.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f64).collect(),
        (DT_INT16, Endian::Big) => payload.chunks_exact(2).map(|c| BigEndian::read_i16(c) as f64).collect(),
        (_, Endian::Little) => payload.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect(),
        (_, Endian::Big) => payload.chunks_exact(4).map(|c| BigEndian::read_f32(c) as f64).collect(),
    };
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    let values = nifti_to_toolkit(dims).map(|src| if slope != 0.0 { slope * raw[src] + inter } else { raw[src] }).collect();
    Ok(NiftiImage { header, values })
}

fn encode(dims: Dims, spacing: [f64; 3], datatype: i16, values: &[f64]) -> Vec<u8> {
    let bitpix = if datatype == DT_UINT8 { 8 } else { 32 };
    let mut out = NiftiHeader::for_grid(dims, spacing, datatype, bitpix).to_bytes();
    let mut payload = vec![0.0; values.len()];
    for (dst, src) in nifti_to_toolkit(dims).enumerate() {
        payload[src] = values[dst];
    }
    if datatype == DT_UINT8 {
        out.extend(payload.iter().map(|&v| v as u8));
    } else {
        for v in payload {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    read_nifti(path)?.to_volume()
}

pub fn read_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    read_nifti(path)?.to_labels(num_classes)
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    encode(v.dims(), v.spacing(), DT_FLOAT32, v.data())
}

pub fn encode_labels(s: &LabelMap) -> Result<Vec<u8>> {
    if s.num_classes() > 256 {
        return Err(Error::InvalidArgument(format!("{} classes do not fit in uint8", s.num_classes())));
    }
    let values: Vec<f64> = s.labels().iter().map(|&l| l as f64).collect();
    Ok(encode(s.dims(), [1.0; 3], DT_UINT8, &values))
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    super::atomic_write(path, &encode_volume(v))
}

pub fn write_labels(s: &LabelMap, path: &Path) -> Result<()> {
    super::atomic_write(path, &encode_labels(s)?)
}

/// `field.nii` → `field.x.nii`, `field.y.nii`, `field.z.nii`.
pub fn field_component_paths(base: &Path) -> [PathBuf; 3] {
    let stem = base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = stem.strip_suffix(".nii").unwrap_or(&stem).to_string();
    ["x", "y", "z"].map(|axis| base.with_file_name(format!("{stem}.{axis}.nii")))
}

pub fn write_field(f: &DisplacementField, base: &Path) -> Result<()> {
    for (axis, path) in field_component_paths(base).iter().enumerate() {
        let v = Volume::from_data(f.dims(), f.component(axis).to_vec())?;
        write_volume(&v, path)?;
    }
    Ok(())
}

pub fn read_field(base: &Path) -> Result<DisplacementField> {
    let mut data = Vec::new();
    let mut dims = None;
    for path in field_component_paths(base) {
        let v = read_volume(&path)?;
        if let Some(d) = dims {
            crate::error::check_dims(d, v.dims())?;
        }
        dims = Some(v.dims());
        data.extend_from_slice(v.data());
    }
    DisplacementField::new(dims.expect("three components"), data)
}
