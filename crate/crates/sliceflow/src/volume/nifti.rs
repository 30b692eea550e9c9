//! Minimal NIfTI-1 reader/writer.
//!
//! Scope is deliberately narrow: single-frame .nii / .nii.gz, datatypes
//! uint8 / int16 / float32, fixed 348-byte header. The qform/sform block is
//! carried as opaque bytes and re-emitted unchanged; volumes stay in native
//! axial order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{IntensityUnit, SegVolume, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Header {
    dim: [usize; 3], // (nx, ny, nz)
    pixdim: [f32; 3], // (dx, dy, dz)
    datatype: i16,
    scl_slope: f32,
    scl_inter: f32,
    vox_offset: usize,
    big_endian: bool,
    affine: [u8; 76],
}

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::NiftiHeader(format!(
            "truncated header: {} bytes (need {})",
            bytes.len(),
            HEADER_SIZE
        )));
    }
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" && &magic[..3] != b"ni1" {
        return Err(Error::NiftiMagic(path.to_path_buf()));
    }
    let sizeof_le = LittleEndian::read_i32(&bytes[0..4]);
    let big_endian = sizeof_le != 348;
    if big_endian && BigEndian::read_i32(&bytes[0..4]) != 348 {
        return Err(Error::NiftiHeader(format!(
            "sizeof_hdr is {sizeof_le}, expected 348"
        )));
    }
    let rd_i16 = |off: usize| -> i16 {
        if big_endian {
            BigEndian::read_i16(&bytes[off..off + 2])
        } else {
            LittleEndian::read_i16(&bytes[off..off + 2])
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        if big_endian {
            BigEndian::read_f32(&bytes[off..off + 4])
        } else {
            LittleEndian::read_f32(&bytes[off..off + 4])
        }
    };

    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::NiftiHeader(format!("dim[0] = {ndim} out of range")));
    }
    let mut dim = [1usize; 3];
    for (i, d) in dim.iter_mut().enumerate() {
        if (i as i16) < ndim {
            let v = rd_i16(40 + 2 * (i + 1));
            if v < 1 {
                return Err(Error::NiftiHeader(format!("dim[{}] = {v}", i + 1)));
            }
            *d = v as usize;
        }
    }
    // dims beyond 3 must be singleton (single-frame only)
    for i in 4..=(ndim as usize) {
        let v = rd_i16(40 + 2 * i);
        if v > 1 {
            return Err(Error::NiftiHeader(format!(
                "multi-frame file: dim[{i}] = {v}"
            )));
        }
    }
    let mut pixdim = [0.0f32; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = rd_f32(76 + 4 * (i + 1));
        if !(*p > 0.0) {
            return Err(Error::NiftiHeader(format!(
                "non-positive pixdim[{}] = {}",
                i + 1,
                p
            )));
        }
    }
    let mut affine = [0u8; 76];
    affine.copy_from_slice(&bytes[252..328]);
    Ok(Header {
        dim,
        pixdim,
        datatype: rd_i16(70),
        scl_slope: rd_f32(112),
        scl_inter: rd_f32(116),
        vox_offset: rd_f32(108).max(0.0) as usize,
        big_endian,
        affine,
    })
}

fn decode_voxels(hdr: &Header, body: &[u8]) -> Result<Vec<f32>> {
    let n = hdr.dim[0] * hdr.dim[1] * hdr.dim[2];
    let bpe = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::NiftiDatatype(other)),
    };
    if body.len() < n * bpe {
        return Err(Error::NiftiHeader(format!(
            "data section holds {} bytes, need {}",
            body.len(),
            n * bpe
        )));
    }
    let raw: Vec<f32> = match hdr.datatype {
        DT_UINT8 => body[..n].iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..n)
            .map(|i| {
                let v = if hdr.big_endian {
                    BigEndian::read_i16(&body[2 * i..])
                } else {
                    LittleEndian::read_i16(&body[2 * i..])
                };
                v as f32
            })
            .collect(),
        DT_FLOAT32 => (0..n)
            .map(|i| {
                if hdr.big_endian {
                    BigEndian::read_f32(&body[4 * i..])
                } else {
                    LittleEndian::read_f32(&body[4 * i..])
                }
            })
            .collect(),
        _ => unreachable!(),
    };
    // scl_slope == 0 means "no scaling"
    if hdr.scl_slope != 0.0 && (hdr.scl_slope != 1.0 || hdr.scl_inter != 0.0) {
        Ok(raw
            .into_iter()
            .map(|v| v * hdr.scl_slope + hdr.scl_inter)
            .collect())
    } else {
        Ok(raw)
    }
}

/// Read a NIfTI-1 volume. Data is stored (z, y, x); spacing comes from
/// pixdim[3], pixdim[2], pixdim[1].
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_file_maybe_gz(path)?;
    let hdr = parse_header(&bytes, path)?;
    let offset = hdr.vox_offset.max(VOX_OFFSET).min(bytes.len());
    let data = decode_voxels(&hdr, &bytes[offset..])?;
    let mut vol = Volume::new(
        (hdr.dim[2], hdr.dim[1], hdr.dim[0]),
        (hdr.pixdim[2], hdr.pixdim[1], hdr.pixdim[0]),
        IntensityUnit::Hounsfield,
        data,
    )?;
    vol.affine = Some(hdr.affine);
    Ok(vol)
}

/// Read an image volume plus an aligned label volume.
pub fn read_nifti_pair(image: &Path, labels: &Path) -> Result<(Volume, SegVolume)> {
    let vol = read_nifti(image)?;
    let bytes = read_file_maybe_gz(labels)?;
    let hdr = parse_header(&bytes, labels)?;
    let offset = hdr.vox_offset.max(VOX_OFFSET).min(bytes.len());
    let data = decode_voxels(&hdr, &bytes[offset..])?;
    let lab: Vec<u8> = data
        .iter()
        .map(|&v| {
            let r = v.round();
            if (0.0..=2.0).contains(&r) && (v - r).abs() < 1e-3 {
                Ok(r as u8)
            } else {
                Err(Error::Invalid(format!("non-label voxel value {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let seg = SegVolume::new(
        (hdr.dim[2], hdr.dim[1], hdr.dim[0]),
        (hdr.pixdim[2], hdr.pixdim[1], hdr.pixdim[0]),
        lab,
    )?;
    if seg.shape() != vol.shape() {
        return Err(Error::DimMismatch {
            axis: "label volume shape",
            expected: vol.shape().0,
            got: seg.shape().0,
        });
    }
    Ok((vol, seg))
}

fn write_header<W: Write>(
    w: &mut W,
    dim: (usize, usize, usize),
    spacing: (f32, f32, f32),
    datatype: i16,
    bitpix: i16,
    affine: Option<&[u8; 76]>,
) -> std::io::Result<()> {
    let (nz, ny, nx) = dim;
    let mut hdr = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut hdr[0..4], 348);
    hdr[39] = 1; // dim_info unused; regular byte per convention
    let dims: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..], datatype);
    LittleEndian::write_i16(&mut hdr[72..], bitpix);
    let pixdims: [f32; 8] = [1.0, spacing.2, spacing.1, spacing.0, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdims.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0); // scl_slope
    LittleEndian::write_f32(&mut hdr[116..], 0.0); // scl_inter
    if let Some(a) = affine {
        hdr[252..328].copy_from_slice(a);
    }
    hdr[344..348].copy_from_slice(b"n+1\0");
    w.write_all(&hdr)?;
    w.write_all(&[0u8; 4])?; // extension flag: none
    Ok(())
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        Ok(Box::new(GzEncoder::new(file, Compression::default())))
    } else {
        Ok(Box::new(file))
    }
}

/// Write a volume as float32 NIfTI-1 (.nii, or .nii.gz when the path ends
/// in .gz). Round-trips bit-exactly through [`read_nifti`].
pub fn write_nifti(volume: &Volume, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    write_header(
        &mut w,
        volume.shape(),
        volume.spacing(),
        DT_FLOAT32,
        32,
        volume.affine.as_ref(),
    )
    .map_err(io)?;
    for &v in volume.data() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Write a label volume as uint8 NIfTI-1.
pub fn write_seg_nifti(seg: &SegVolume, path: &Path) -> Result<()> {
    let mut w = open_writer(path)?;
    let io = |e| Error::io(path, e);
    write_header(&mut w, seg.shape(), seg.spacing(), DT_UINT8, 8, None).map_err(io)?;
    w.write_all(seg.labels()).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn volume(shape: (usize, usize, usize)) -> Volume {
        let n = shape.0 * shape.1 * shape.2;
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.731).sin() * 100.0).collect();
        Volume::new(shape, (2.5, 0.9, 0.8), IntensityUnit::Hounsfield, data).unwrap()
    }

    #[test]
    fn float32_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        for shape in [(1, 1, 1), (3, 5, 7), (16, 64, 64)] {
            let v = volume(shape);
            let path = dir.path().join("v.nii");
            write_nifti(&v, &path).unwrap();
            let r = read_nifti(&path).unwrap();
            assert_eq!(r.shape(), v.shape());
            assert_eq!(r.spacing(), v.spacing());
            assert_eq!(r.data(), v.data());
        }
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempdir().unwrap();
        let v = volume((4, 4, 4));
        let path = dir.path().join("v.nii.gz");
        write_nifti(&v, &path).unwrap();
        let r = read_nifti(&path).unwrap();
        assert_eq!(r.data(), v.data());
    }

    #[test]
    fn scl_slope_and_inter_are_applied() {
        // hand-built int16 file: raw value 5, slope 2, inter 10 -> 20.0
        let dir = tempdir().unwrap();
        let path = dir.path().join("scaled.nii");
        let mut bytes = Vec::new();
        write_header(&mut bytes, (1, 1, 1), (1.0, 1.0, 1.0), DT_INT16, 16, None).unwrap();
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], 10.0);
        bytes.extend_from_slice(&5i16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.data(), &[20.0]);
    }

    #[test]
    fn truncated_header_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.nii");
        std::fs::write(&path, vec![0u8; 100]).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::NiftiHeader(_))));
    }

    #[test]
    fn missing_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nomagic.nii");
        let mut bytes = vec![0u8; 400];
        LittleEndian::write_i32(&mut bytes[0..4], 348);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::NiftiMagic(_))));
    }

    #[test]
    fn unsupported_datatype_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f64.nii");
        let mut bytes = Vec::new();
        write_header(&mut bytes, (1, 1, 1), (1.0, 1.0, 1.0), 64, 64, None).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::NiftiDatatype(64))));
    }

    #[test]
    fn non_positive_pixdim_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("badpix.nii");
        let mut bytes = Vec::new();
        write_header(&mut bytes, (1, 1, 1), (1.0, 1.0, 1.0), DT_FLOAT32, 32, None).unwrap();
        LittleEndian::write_f32(&mut bytes[80..84], -1.0); // pixdim[1]
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::NiftiHeader(_))));
    }

    #[test]
    fn affine_block_survives_round_trip() {
        let dir = tempdir().unwrap();
        let mut v = volume((2, 3, 3));
        let mut affine = [0u8; 76];
        for (i, b) in affine.iter_mut().enumerate() {
            *b = i as u8;
        }
        v.affine = Some(affine);
        let path = dir.path().join("aff.nii");
        write_nifti(&v, &path).unwrap();
        let r = read_nifti(&path).unwrap();
        assert_eq!(r.affine, Some(affine));
    }

    #[test]
    fn seg_round_trip() {
        let dir = tempdir().unwrap();
        let labels: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
        let seg = SegVolume::new((3, 3, 3), (2.0, 1.0, 1.0), labels.clone()).unwrap();
        let path = dir.path().join("seg.nii");
        write_seg_nifti(&seg, &path).unwrap();
        let img = read_nifti(&path).unwrap();
        let back: Vec<u8> = img.data().iter().map(|&v| v as u8).collect();
        assert_eq!(back, labels);
    }
}
