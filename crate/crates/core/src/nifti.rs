//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Only uncompressed 3D files with datatype 2 (uint8) or 16 (float32) are
//! accepted. Orientation fields (qform/sform) are carried through a
//! read/write round trip untouched but never interpreted.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

/// Size of a NIfTI-1 header in bytes.
pub const HEADER_SIZE: usize = 348;
/// Voxel data offset used when writing: header plus a 4-byte empty extension block.
pub const WRITE_VOX_OFFSET: usize = 352;
/// Single-file magic.
pub const MAGIC: [u8; 4] = *b"n+1\0";

const NIFTI_UNITS_MM: u8 = 2;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN: usize = 256;
    pub const QOFFSET: usize = 268;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a single-file NIfTI-1 image (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0} (only 2 and 16 are supported)")]
    UnsupportedDatatype(i16),
    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),
    #[error("unsupported NIfTI image: {0}")]
    Unsupported(String),
    #[error("truncated voxel data: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("voxel {index} has value {value}, not representable as uint8")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("voxel {index} has non-integer value {value}; mask files must hold integer labels")]
    NotBinaryMask { index: usize, value: f32 },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

impl Endianness {
    pub const fn native() -> Self {
        if cfg!(target_endian = "big") {
            Endianness::Big
        } else {
            Endianness::Little
        }
    }
}

/// How [`NiftiHeader::parse`] should pick the byte order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrderHint {
    /// Probe `sizeof_hdr` under both byte orders.
    Auto,
    Known(Endianness),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i16)]
pub enum DataType {
    UInt8 = 2,
    Float32 = 16,
}

impl DataType {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::UInt8),
            16 => Ok(DataType::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn bitpix(self) -> i16 {
        match self {
            DataType::UInt8 => 8,
            DataType::Float32 => 32,
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        self.bitpix() as usize / 8
    }
}

/// Orientation and geometry fields that are preserved verbatim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    /// `pixdim[0]`, the qform handedness factor.
    pub qfac: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qfac: 1.0,
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: DataType,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub orientation: Orientation,
    pub magic: [u8; 4],
    /// Byte order the header was read in (and voxel data is stored in).
    pub endianness: Endianness,
}

fn detect_order(bytes: &[u8]) -> Result<Endianness> {
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        Ok(Endianness::Little)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        Ok(Endianness::Big)
    } else {
        Err(NiftiError::CorruptHeader(
            "sizeof_hdr is not 348 under either byte order".into(),
        ))
    }
}

impl NiftiHeader {
    /// Header describing a 3D volume of the given geometry, as written by this crate.
    pub fn for_volume(
        extents: [usize; 3],
        spacing: [f32; 3],
        datatype: DataType,
        orientation: Orientation,
    ) -> Result<Self> {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for (axis, &n) in extents.iter().enumerate() {
            dim[axis + 1] = i16::try_from(n)
                .ok()
                .filter(|&d| d >= 1)
                .ok_or_else(|| {
                    NiftiError::InvalidVolume(format!("extent {n} does not fit a NIfTI-1 header"))
                })?;
        }
        let mut pixdim = [0.0f32; 8];
        pixdim[0] = orientation.qfac;
        pixdim[1..4].copy_from_slice(&spacing);
        Ok(NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            dim,
            datatype,
            bitpix: datatype.bitpix(),
            pixdim,
            vox_offset: WRITE_VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            xyzt_units: NIFTI_UNITS_MM,
            descrip: [0; 80],
            orientation,
            magic: MAGIC,
            endianness: Endianness::native(),
        })
    }

    /// Parses and validates a 348-byte header block.
    pub fn parse(bytes: &[u8], hint: ByteOrderHint) -> Result<Self> {
        if bytes.len() != HEADER_SIZE {
            return Err(NiftiError::CorruptHeader(format!(
                "header block is {} bytes, expected {HEADER_SIZE}",
                bytes.len()
            )));
        }
        let endianness = match hint {
            ByteOrderHint::Auto => detect_order(bytes)?,
            ByteOrderHint::Known(e) => e,
        };
        match endianness {
            Endianness::Little => Self::parse_with::<LittleEndian>(bytes, endianness),
            Endianness::Big => Self::parse_with::<BigEndian>(bytes, endianness),
        }
    }

    fn parse_with<B: ByteOrder>(bytes: &[u8], endianness: Endianness) -> Result<Self> {
        let sizeof_hdr = B::read_i32(&bytes[offsets::SIZEOF_HDR..]);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(NiftiError::CorruptHeader(format!(
                "sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}"
            )));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
        if magic != MAGIC {
            return Err(NiftiError::BadMagic(magic));
        }

        let mut dim = [0i16; 8];
        B::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
        let datatype = DataType::from_code(B::read_i16(&bytes[offsets::DATATYPE..]))?;
        let bitpix = B::read_i16(&bytes[offsets::BITPIX..]);
        let mut pixdim = [0f32; 8];
        B::read_f32_into(&bytes[offsets::PIXDIM..offsets::PIXDIM + 32], &mut pixdim);
        let read_f32 = |off: usize| B::read_f32(&bytes[off..]);
        let read_f32s = |off: usize, out: &mut [f32]| {
            B::read_f32_into(&bytes[off..off + 4 * out.len()], out)
        };

        let mut orientation = Orientation {
            qfac: pixdim[0],
            qform_code: B::read_i16(&bytes[offsets::QFORM_CODE..]),
            sform_code: B::read_i16(&bytes[offsets::SFORM_CODE..]),
            ..Orientation::default()
        };
        read_f32s(offsets::QUATERN, &mut orientation.quatern);
        read_f32s(offsets::QOFFSET, &mut orientation.qoffset);
        read_f32s(offsets::SROW_X, &mut orientation.srow_x);
        read_f32s(offsets::SROW_Y, &mut orientation.srow_y);
        read_f32s(offsets::SROW_Z, &mut orientation.srow_z);

        let mut descrip = [0u8; 80];
        descrip.copy_from_slice(&bytes[offsets::DESCRIP..offsets::DESCRIP + 80]);

        let header = NiftiHeader {
            sizeof_hdr,
            dim,
            datatype,
            bitpix,
            pixdim,
            vox_offset: read_f32(offsets::VOX_OFFSET),
            scl_slope: read_f32(offsets::SCL_SLOPE),
            scl_inter: read_f32(offsets::SCL_INTER),
            xyzt_units: bytes[offsets::XYZT_UNITS],
            descrip,
            orientation,
            magic,
            endianness,
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<()> {
        if self.bitpix != self.datatype.bitpix() {
            return Err(NiftiError::CorruptHeader(format!(
                "bitpix {} inconsistent with datatype {}",
                self.bitpix,
                self.datatype.code()
            )));
        }
        let rank = self.dim[0];
        if !(1..=7).contains(&rank) {
            return Err(NiftiError::CorruptHeader(format!("dim[0] = {rank} out of range")));
        }
        if rank < 3 {
            return Err(NiftiError::Unsupported(format!("rank {rank} image, expected 3D")));
        }
        if self.dim[1..4].iter().any(|&d| d < 1) {
            return Err(NiftiError::CorruptHeader(format!(
                "spatial extents {:?} must all be at least 1",
                &self.dim[1..4]
            )));
        }
        if self.dim[4..=rank as usize].iter().any(|&d| d > 1) {
            return Err(NiftiError::Unsupported(format!(
                "non-singleton dimensions beyond 3D: {:?}",
                &self.dim[..=rank as usize]
            )));
        }
        if !(self.vox_offset >= WRITE_VOX_OFFSET as f32) {
            return Err(NiftiError::CorruptHeader(format!(
                "vox_offset {} is below {WRITE_VOX_OFFSET}",
                self.vox_offset
            )));
        }
        Ok(())
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f32; 3] {
        [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    /// Serializes to a 348-byte block in `self.endianness`.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        match self.endianness {
            Endianness::Little => self.to_bytes_with::<LittleEndian>(),
            Endianness::Big => self.to_bytes_with::<BigEndian>(),
        }
    }

    fn to_bytes_with<B: ByteOrder>(&self) -> [u8; HEADER_SIZE] {
        let mut buf = [0u8; HEADER_SIZE];
        B::write_i32(&mut buf[offsets::SIZEOF_HDR..], self.sizeof_hdr);
        B::write_i16_into(&self.dim, &mut buf[offsets::DIM..offsets::DIM + 16]);
        B::write_i16(&mut buf[offsets::DATATYPE..], self.datatype.code());
        B::write_i16(&mut buf[offsets::BITPIX..], self.bitpix);
        let mut pixdim = self.pixdim;
        pixdim[0] = self.orientation.qfac;
        B::write_f32_into(&pixdim, &mut buf[offsets::PIXDIM..offsets::PIXDIM + 32]);
        B::write_f32(&mut buf[offsets::VOX_OFFSET..], self.vox_offset);
        B::write_f32(&mut buf[offsets::SCL_SLOPE..], self.scl_slope);
        B::write_f32(&mut buf[offsets::SCL_INTER..], self.scl_inter);
        buf[offsets::XYZT_UNITS] = self.xyzt_units;
        buf[offsets::DESCRIP..offsets::DESCRIP + 80].copy_from_slice(&self.descrip);
        let o = &self.orientation;
        B::write_i16(&mut buf[offsets::QFORM_CODE..], o.qform_code);
        B::write_i16(&mut buf[offsets::SFORM_CODE..], o.sform_code);
        B::write_f32_into(&o.quatern, &mut buf[offsets::QUATERN..offsets::QUATERN + 12]);
        B::write_f32_into(&o.qoffset, &mut buf[offsets::QOFFSET..offsets::QOFFSET + 12]);
        B::write_f32_into(&o.srow_x, &mut buf[offsets::SROW_X..offsets::SROW_X + 16]);
        B::write_f32_into(&o.srow_y, &mut buf[offsets::SROW_Y..offsets::SROW_Y + 16]);
        B::write_f32_into(&o.srow_z, &mut buf[offsets::SROW_Z..offsets::SROW_Z + 16]);
        buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&self.magic);
        buf
    }

    /// True when `scl_slope`/`scl_inter` change stored values.
    fn has_scaling(&self) -> bool {
        self.scl_slope != 0.0
            && self.scl_slope.is_finite()
            && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }
}

/// A 3D scalar field stored with x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    extents: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
    pub orientation: Orientation,
}

fn check_geometry(extents: [usize; 3], spacing: [f32; 3], len: usize) -> Result<()> {
    if extents.iter().any(|&n| n == 0) {
        return Err(NiftiError::InvalidVolume(format!("zero extent in {extents:?}")));
    }
    let expected: usize = extents.iter().product();
    if len != expected {
        return Err(NiftiError::InvalidVolume(format!(
            "{len} voxels for extents {extents:?} (expected {expected})"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(NiftiError::InvalidVolume(format!("non-positive spacing {spacing:?}")));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        check_geometry(extents, spacing, voxels.len())?;
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(NiftiError::InvalidVolume(format!("voxel {i} is not finite")));
        }
        Ok(Volume3D { extents, spacing, voxels, orientation: Orientation::default() })
    }

    pub fn zeros(extents: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        Self::new(extents, spacing, vec![0.0; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Replaces all voxel values, keeping geometry. Values must stay finite.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        let mut v = Volume3D::new(self.extents, self.spacing, voxels)?;
        v.orientation = self.orientation;
        Ok(v)
    }
}

/// Binary label field: 0 = background, 1 = lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    extents: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<u8>,
    pub orientation: Orientation,
}

impl MaskVolume {
    pub fn new(extents: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        Self::with_spacing(extents, [1.0; 3], labels)
    }

    pub fn with_spacing(extents: [usize; 3], spacing: [f32; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry(extents, spacing, labels.len())?;
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(NiftiError::InvalidVolume(format!(
                "label {} at voxel {i} is not 0 or 1",
                labels[i]
            )));
        }
        Ok(MaskVolume { extents, spacing, labels, orientation: Orientation::default() })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        MaskVolume {
            extents,
            spacing: [1.0; 3],
            labels: vec![0; extents.iter().product()],
            orientation: Orientation::default(),
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn lesion_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Copies geometry (spacing and orientation) from a reference image.
    pub fn with_geometry_of(mut self, reference: &Volume3D) -> Self {
        self.spacing = reference.spacing;
        self.orientation = reference.orientation;
        self
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            extents: self.extents,
            spacing: self.spacing,
            voxels: self.labels.iter().map(|&l| f32::from(l)).collect(),
            orientation: self.orientation,
        }
    }
}

/// Header plus voxel values, scaling already applied.
fn decode(bytes: &[u8]) -> Result<(NiftiHeader, Vec<f32>)> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::CorruptHeader(format!(
            "file is {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let header = NiftiHeader::parse(&bytes[..HEADER_SIZE], ByteOrderHint::Auto)?;
    let offset = header.vox_offset as usize;
    let count = header.voxel_count();
    let needed = count * header.datatype.bytes_per_voxel();
    let available = bytes.len().saturating_sub(offset);
    if available < needed {
        return Err(NiftiError::TruncatedData { expected: needed, actual: available });
    }
    let data = &bytes[offset..offset + needed];
    let mut values = match header.datatype {
        DataType::UInt8 => data.iter().map(|&b| f32::from(b)).collect::<Vec<_>>(),
        DataType::Float32 => {
            let mut out = vec![0f32; count];
            match header.endianness {
                Endianness::Little => LittleEndian::read_f32_into(data, &mut out),
                Endianness::Big => BigEndian::read_f32_into(data, &mut out),
            }
            out
        }
    };
    if header.has_scaling() {
        for v in &mut values {
            *v = *v * header.scl_slope + header.scl_inter;
        }
    }
    Ok((header, values))
}

/// Encodes a volume as a complete `.nii` byte stream in the requested byte order.
pub fn encode_volume(
    volume: &Volume3D,
    datatype: DataType,
    endianness: Endianness,
) -> Result<Vec<u8>> {
    let mut header =
        NiftiHeader::for_volume(volume.extents, volume.spacing, datatype, volume.orientation)?;
    header.endianness = endianness;

    let mut out = Vec::with_capacity(WRITE_VOX_OFFSET + volume.len() * datatype.bytes_per_voxel());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; WRITE_VOX_OFFSET - HEADER_SIZE]);
    match datatype {
        DataType::UInt8 => {
            for (index, &value) in volume.voxels.iter().enumerate() {
                if value.fract() != 0.0 || !(0.0..=255.0).contains(&value) {
                    return Err(NiftiError::ValueOutOfRange { index, value });
                }
                out.push(value as u8);
            }
        }
        DataType::Float32 => {
            let start = out.len();
            out.resize(start + volume.len() * 4, 0);
            match endianness {
                Endianness::Little => {
                    LittleEndian::write_f32_into(&volume.voxels, &mut out[start..])
                }
                Endianness::Big => BigEndian::write_f32_into(&volume.voxels, &mut out[start..]),
            }
        }
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let (header, values) = decode(bytes)?;
    let mut volume = Volume3D::new(header.extents(), header.spacing(), values)?;
    volume.orientation = header.orientation;
    Ok(volume)
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let (header, values) = decode(bytes)?;
    let mut labels = Vec::with_capacity(values.len());
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value.fract() != 0.0 {
            return Err(NiftiError::NotBinaryMask { index, value });
        }
        labels.push(u8::from(value != 0.0));
    }
    let mut mask = MaskVolume::with_spacing(header.extents(), header.spacing(), labels)?;
    mask.orientation = header.orientation;
    Ok(mask)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::CorruptHeader("file shorter than header".into()));
    }
    NiftiHeader::parse(&bytes[..HEADER_SIZE], ByteOrderHint::Auto)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    decode_volume(&fs::read(path)?)
}

/// Writes `volume` in native byte order with voxel data at offset 352.
pub fn write_volume(path: impl AsRef<Path>, volume: &Volume3D, datatype: DataType) -> Result<()> {
    let bytes = encode_volume(volume, datatype, Endianness::native())?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a label file; any nonzero integer voxel becomes label 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    decode_mask(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &MaskVolume) -> Result<()> {
    write_volume(path, &mask.to_volume(), DataType::UInt8)
}
