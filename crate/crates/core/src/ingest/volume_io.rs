//! Minimal Analyze-7.5 and NIfTI-1 reader/writer.
//!
//! Both formats share the 348-byte header layout. NIfTI-1 single files carry
//! the magic `n+1\0` and store voxels after `vox_offset`; header/image pairs
//! keep voxels in a sibling `.img` file. Only the first 3D volume is read,
//! voxels are returned as `f32` in (X, Y, Z) order.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// `.hdr` + `.img` pair without a NIfTI magic.
    Analyze,
    /// `.nii` single file.
    Nifti,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
        if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".hdr") || name.ends_with(".img") {
            Ok(VolumeFormat::Analyze)
        } else {
            Err(Error::UnsupportedFormat(path.display().to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Header {
    endian: Endian,
    dims: [usize; 3],
    extra_volumes: usize,
    datatype: i16,
    vox_offset: usize,
    slope: f32,
    intercept: f32,
}

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    Ok(match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedFormat(format!("voxel datatype code {other}"))),
    })
}

fn parse_header(bytes: &[u8], single_file: bool) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::CorruptHeader(format!("header is {} bytes, need {HEADER_SIZE}", bytes.len())));
    }
    let endian = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::CorruptHeader("sizeof_hdr is not 348 in either byte order".into()));
    };
    let i16_at = |off: usize| match endian {
        Endian::Little => LittleEndian::read_i16(&bytes[off..off + 2]),
        Endian::Big => BigEndian::read_i16(&bytes[off..off + 2]),
    };
    let f32_at = |off: usize| match endian {
        Endian::Little => LittleEndian::read_f32(&bytes[off..off + 4]),
        Endian::Big => BigEndian::read_f32(&bytes[off..off + 4]),
    };

    let magic = &bytes[344..348];
    if single_file && magic != MAGIC_SINGLE {
        return Err(Error::CorruptHeader("single-file volume lacks the n+1 magic".into()));
    }
    let is_nifti = magic == MAGIC_SINGLE || magic == MAGIC_PAIR;

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptHeader(format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut dims = [1usize; 3];
    let mut extra_volumes = 1usize;
    for axis in 1..=ndim as usize {
        let d = i16_at(40 + 2 * axis);
        if d < 1 {
            return Err(Error::CorruptHeader(format!("dim[{axis}] = {d} is not positive")));
        }
        if axis <= 3 {
            dims[axis - 1] = d as usize;
        } else {
            extra_volumes *= d as usize;
        }
    }

    let datatype = i16_at(70);
    bytes_per_voxel(datatype)?;

    let vox_offset = if single_file {
        let off = f32_at(108);
        if !off.is_finite() || off < HEADER_SIZE as f32 {
            return Err(Error::CorruptHeader(format!("vox_offset {off} precedes end of header")));
        }
        off as usize
    } else {
        0
    };

    // NIfTI scl_slope, or the SPM scale factor in the same slot for Analyze.
    let raw_slope = f32_at(112);
    let raw_inter = if is_nifti { f32_at(116) } else { 0.0 };
    let (slope, intercept) = if raw_slope.is_finite() && raw_slope != 0.0 {
        (raw_slope, if raw_inter.is_finite() { raw_inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };

    Ok(Header { endian, dims, extra_volumes, datatype, vox_offset, slope, intercept })
}

fn decode<E: ByteOrder>(datatype: i16, raw: &[u8], n: usize) -> Result<Vec<f32>> {
    let mut cur = Cursor::new(raw);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match datatype {
            DT_UINT8 => cur.read_u8()? as f32,
            DT_INT8 => cur.read_i8()? as f32,
            DT_INT16 => cur.read_i16::<E>()? as f32,
            DT_UINT16 => cur.read_u16::<E>()? as f32,
            DT_INT32 => cur.read_i32::<E>()? as f32,
            DT_UINT32 => cur.read_u32::<E>()? as f32,
            DT_FLOAT32 => cur.read_f32::<E>()?,
            DT_FLOAT64 => cur.read_f64::<E>()? as f32,
            other => return Err(Error::UnsupportedFormat(format!("voxel datatype code {other}"))),
        };
        out.push(v);
    }
    Ok(out)
}

fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("hdr"), path.with_extension("img"))
}

/// Read the first 3D volume of an Analyze-7.5 pair or a NIfTI-1 file.
pub fn read_voxels(path: &Path) -> Result<Array3<f32>> {
    let format = VolumeFormat::from_path(path)?;
    let (header, payload) = match format {
        VolumeFormat::Nifti => {
            let bytes = fs::read(path).map_err(|e| missing_or_io(path, e))?;
            let header = parse_header(&bytes, true)?;
            let payload = bytes.get(header.vox_offset..).unwrap_or_default().to_vec();
            (header, payload)
        }
        VolumeFormat::Analyze => {
            let (hdr, img) = pair_paths(path);
            let bytes = fs::read(&hdr).map_err(|e| missing_or_io(&hdr, e))?;
            let header = parse_header(&bytes, false)?;
            let payload = fs::read(&img).map_err(|e| missing_or_io(&img, e))?;
            (header, payload)
        }
    };

    let [x, y, z] = header.dims;
    let n = x * y * z;
    let bpv = bytes_per_voxel(header.datatype)?;
    let expected = n * header.extra_volumes * bpv;
    if payload.len() < expected {
        return Err(Error::ShapeMismatch(format!(
            "header declares {x}x{y}x{z}x{} voxels ({expected} bytes) but payload has {} bytes",
            header.extra_volumes,
            payload.len()
        )));
    }
    let raw = &payload[..n * bpv];
    let mut values = match header.endian {
        Endian::Little => decode::<LittleEndian>(header.datatype, raw, n)?,
        Endian::Big => decode::<BigEndian>(header.datatype, raw, n)?,
    };
    if header.slope != 1.0 || header.intercept != 0.0 {
        for v in &mut values {
            *v = *v * header.slope + header.intercept;
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(path.display().to_string()));
    }
    // On-disk order has x varying fastest.
    let fortran = Array3::from_shape_vec((x, y, z).f(), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(fortran.as_standard_layout().into_owned())
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

fn header_bytes(dims: (usize, usize, usize), magic: Option<&[u8; 4]>) -> Result<Vec<u8>> {
    let (x, y, z) = dims;
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    LittleEndian::write_i16(&mut h[40..42], 3);
    for (i, d) in [x, y, z, 1, 1, 1, 1].into_iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::ShapeMismatch(format!("axis of {d} voxels exceeds header range")))?;
        LittleEndian::write_i16(&mut h[42 + 2 * i..44 + 2 * i], d);
    }
    LittleEndian::write_i16(&mut h[70..72], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[72..74], 32);
    for i in 0..4 {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], 1.0);
    }
    if let Some(m) = magic {
        if m == MAGIC_SINGLE {
            LittleEndian::write_f32(&mut h[108..112], NIFTI_VOX_OFFSET as f32);
        }
        LittleEndian::write_f32(&mut h[112..116], 1.0);
        h[344..348].copy_from_slice(m);
    }
    Ok(h)
}

fn payload_bytes(voxels: &Array3<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(voxels.len() * 4);
    // x fastest: iterate the reversed-axes view in logical order.
    for v in voxels.t().iter() {
        out.write_f32::<LittleEndian>(*v).expect("write to Vec");
    }
    out
}

/// Write a NIfTI-1 single file (float32, little-endian).
pub fn write_nifti(path: &Path, voxels: &Array3<f32>) -> Result<()> {
    let mut bytes = header_bytes(voxels.dim(), Some(MAGIC_SINGLE))?;
    bytes.extend_from_slice(&[0u8; NIFTI_VOX_OFFSET - HEADER_SIZE]);
    bytes.extend(payload_bytes(voxels));
    fs::write(path, bytes)?;
    Ok(())
}

/// Write an Analyze-7.5 header/image pair next to `path` (float32,
/// little-endian). Returns the header path.
pub fn write_analyze(path: &Path, voxels: &Array3<f32>) -> Result<PathBuf> {
    let (hdr, img) = pair_paths(path);
    fs::write(&hdr, header_bytes(voxels.dim(), None)?)?;
    fs::write(&img, payload_bytes(voxels))?;
    Ok(hdr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(x: usize, y: usize, z: usize) -> Array3<f32> {
        Array3::from_shape_fn((x, y, z), |(i, j, k)| (i * 100 + j * 10 + k) as f32 + 0.25)
    }

    #[test]
    fn nifti_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let v = ramp(4, 5, 6);
        write_nifti(&path, &v).unwrap();
        let back = read_voxels(&path).unwrap();
        assert_eq!(back.dim(), (4, 5, 6));
        assert_eq!(back, v);
    }

    #[test]
    fn analyze_matches_nifti() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(4, 5, 6);
        write_nifti(&dir.path().join("a.nii"), &v).unwrap();
        let hdr = write_analyze(&dir.path().join("a.hdr"), &v).unwrap();
        let from_nifti = read_voxels(&dir.path().join("a.nii")).unwrap();
        let from_analyze = read_voxels(&hdr).unwrap();
        assert_eq!(from_nifti, from_analyze);
        // .img path resolves to the same pair
        assert_eq!(read_voxels(&dir.path().join("a.img")).unwrap(), v);
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        write_nifti(&path, &ramp(4, 5, 6)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_voxels(&path), Err(Error::ShapeMismatch(_))));

        let hdr = write_analyze(&dir.path().join("b.hdr"), &ramp(3, 3, 3)).unwrap();
        let img = hdr.with_extension("img");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..4]).unwrap();
        assert!(matches!(read_voxels(&hdr), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_unknown_extension_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_voxels(&dir.path().join("x.dcm")), Err(Error::UnsupportedFormat(_))));
        let path = dir.path().join("bad.nii");
        fs::write(&path, vec![0u8; 400]).unwrap();
        assert!(matches!(read_voxels(&path), Err(Error::CorruptHeader(_))));
        fs::write(&path, vec![0u8; 20]).unwrap();
        assert!(matches!(read_voxels(&path), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn big_endian_int16_analyze() {
        // OASIS-1 ships big-endian int16 Analyze pairs.
        let dir = tempfile::tempdir().unwrap();
        let mut h = vec![0u8; HEADER_SIZE];
        BigEndian::write_i32(&mut h[0..4], 348);
        BigEndian::write_i16(&mut h[40..42], 4);
        for (i, d) in [2i16, 3, 2, 1].into_iter().enumerate() {
            BigEndian::write_i16(&mut h[42 + 2 * i..44 + 2 * i], d);
        }
        BigEndian::write_i16(&mut h[70..72], DT_INT16);
        let mut img = Vec::new();
        for v in 0..12i16 {
            img.write_i16::<BigEndian>(v - 3).unwrap();
        }
        fs::write(dir.path().join("s.hdr"), &h).unwrap();
        fs::write(dir.path().join("s.img"), &img).unwrap();
        let vol = read_voxels(&dir.path().join("s.hdr")).unwrap();
        assert_eq!(vol.dim(), (2, 3, 2));
        // x fastest on disk
        assert_eq!(vol[[1, 0, 0]], -2.0);
        assert_eq!(vol[[0, 1, 0]], -1.0);
        assert_eq!(vol[[0, 0, 1]], 3.0);
        assert_eq!(vol[[1, 2, 1]], 8.0);
    }

    #[test]
    fn missing_image_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_voxels(&dir.path().join("nope.hdr")), Err(Error::MissingFile(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn both_formats_roundtrip(x in 1usize..6, y in 1usize..6, z in 1usize..6, seed in 0u32..1000) {
            let v = Array3::from_shape_fn((x, y, z), |(i, j, k)| {
                ((i * 31 + j * 17 + k * 7) as f32 * 0.37 + seed as f32).sin() * 1000.0
            });
            let dir = tempfile::tempdir().unwrap();
            write_nifti(&dir.path().join("v.nii"), &v).unwrap();
            let hdr = write_analyze(&dir.path().join("v.hdr"), &v).unwrap();
            proptest::prop_assert_eq!(&read_voxels(&dir.path().join("v.nii")).unwrap(), &v);
            proptest::prop_assert_eq!(&read_voxels(&hdr).unwrap(), &v);
        }
    }
}
