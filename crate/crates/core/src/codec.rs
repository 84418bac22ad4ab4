//! File codecs: the raw `.bin` container, the `.defect` mask container and
//! 8-bit PNG import/export.
//!
//! Raw container layout (little-endian): magic `HEVS`, format version `u16`
//! = 1, height `u32`, width `u32`, then H*W samples as `u16` row-major, each
//! in [0, 1023]. Defect masks use the same header with magic `HDEF` and one
//! byte (0/1) per pixel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::image::{DefectMap, RawImage, RgbImage, RAW_MAX};
use crate::pattern::PatternSpec;

const RAW_MAGIC: &[u8; 4] = b"HEVS";
const DEFECT_MAGIC: &[u8; 4] = b"HDEF";
const FORMAT_VERSION: u16 = 1;

fn read_header(rd: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<(usize, usize)> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut got = [0u8; 4];
    rd.read_exact(&mut got)
        .map_err(|e| fmt(format!("missing magic: {e}")))?;
    if &got != magic {
        return Err(fmt(format!("bad magic {got:?}")));
    }
    let version = rd
        .read_u16::<LittleEndian>()
        .map_err(|e| fmt(format!("missing version: {e}")))?;
    if version != FORMAT_VERSION {
        return Err(fmt(format!("unsupported format version {version}")));
    }
    let h = rd
        .read_u32::<LittleEndian>()
        .map_err(|e| fmt(format!("missing height: {e}")))? as usize;
    let w = rd
        .read_u32::<LittleEndian>()
        .map_err(|e| fmt(format!("missing width: {e}")))? as usize;
    Ok((h, w))
}

fn write_header(wr: &mut impl Write, magic: &[u8; 4], h: usize, w: usize) -> std::io::Result<()> {
    wr.write_all(magic)?;
    wr.write_u16::<LittleEndian>(FORMAT_VERSION)?;
    wr.write_u32::<LittleEndian>(h as u32)?;
    wr.write_u32::<LittleEndian>(w as u32)?;
    Ok(())
}

/// Reads a raw mosaic; the pattern is metadata carried by the caller (the
/// container stores samples only).
pub fn read_raw_bin(path: &Path, pattern: PatternSpec) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut rd = BufReader::new(file);
    let (h, w) = read_header(&mut rd, RAW_MAGIC, path)?;
    let expected = h * w;
    let mut values = Array2::<u16>::zeros((h, w));
    for (index, v) in values.iter_mut().enumerate() {
        let sample = rd.read_u16::<LittleEndian>().map_err(|_| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: index,
        })?;
        if sample > RAW_MAX {
            return Err(Error::Range {
                path: path.to_path_buf(),
                value: sample as u32,
                max: RAW_MAX as u32,
                index,
            });
        }
        *v = sample;
    }
    // trailing bytes mean the header lied about the payload length
    let mut probe = [0u8; 1];
    if rd.read(&mut probe).map_err(|e| Error::io("read", e))? != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "trailing bytes after payload".into(),
        });
    }
    RawImage::new(values, pattern)
}

pub fn write_raw_bin(img: &RawImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut wr = BufWriter::new(file);
    let ctx = || format!("write {}", path.display());
    write_header(&mut wr, RAW_MAGIC, img.height(), img.width()).map_err(|e| Error::io(ctx(), e))?;
    for &v in img.values().iter() {
        wr.write_u16::<LittleEndian>(v).map_err(|e| Error::io(ctx(), e))?;
    }
    wr.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_defect(path: &Path, pattern: &PatternSpec) -> Result<DefectMap> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut rd = BufReader::new(file);
    let (h, w) = read_header(&mut rd, DEFECT_MAGIC, path)?;
    let mut bytes = vec![0u8; h * w];
    rd.read_exact(&mut bytes).map_err(|_| Error::Truncated {
        path: path.to_path_buf(),
        expected: h * w,
        found: 0,
    })?;
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("defect byte {b} is not 0/1"),
        });
    }
    let mask = Array2::from_shape_vec((h, w), bytes.iter().map(|&b| b == 1).collect())
        .expect("shape matches byte count");
    DefectMap::new(mask, pattern)
}

pub fn write_defect(map: &DefectMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut wr = BufWriter::new(file);
    let ctx = || format!("write {}", path.display());
    write_header(&mut wr, DEFECT_MAGIC, map.height(), map.width())
        .map_err(|e| Error::io(ctx(), e))?;
    let bytes: Vec<u8> = map.mask().iter().map(|&m| m as u8).collect();
    wr.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    wr.flush().map_err(|e| Error::io(ctx(), e))
}

/// Loads an 8-bit RGB PNG into normalized [0,1] space.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[[ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0;
        }
    }
    RgbImage::new(data)
}

/// Writes an RGB image as 8-bit PNG after round(clamp*255) quantization.
pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let q = img.quantize8();
    let (h, w) = (img.height(), img.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for ch in 0..3 {
            p.0[ch] = q[[ch, y as usize, x as usize]];
        }
    }
    out.save(path)?;
    Ok(())
}

/// Writes a single-channel [0,1] map as 8-bit grayscale PNG.
pub fn write_gray_png(map: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        p.0[0] = (map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::PatternSpec;
    use tempfile::tempdir;

    #[test]
    fn raw_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let pattern = PatternSpec::default_hybridevs();
        let mut raw = RawImage::zeros(4, 4, pattern.clone()).unwrap();
        for ((r, c), v) in raw.values_mut().indexed_iter_mut() {
            *v = (r * 100 + c * 7) as u16;
        }
        write_raw_bin(&raw, &path).unwrap();
        let back = read_raw_bin(&path, pattern).unwrap();
        assert_eq!(raw, back);
    }

    #[test]
    fn raw_bytes_match_hand_encoding() {
        // 4x4 tile with values 0..16: header then LE u16 samples row-major
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let pattern = PatternSpec::default_hybridevs();
        let mut raw = RawImage::zeros(4, 4, pattern).unwrap();
        for (i, v) in raw.values_mut().iter_mut().enumerate() {
            *v = i as u16;
        }
        write_raw_bin(&raw, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"HEVS");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        for i in 0..16u16 {
            expected.extend_from_slice(&i.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn raw_range_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HEVS");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..15 {
            bytes.extend_from_slice(&0u16.to_le_bytes());
        }
        bytes.extend_from_slice(&1024u16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_raw_bin(&path, PatternSpec::default_hybridevs()).unwrap_err();
        assert!(matches!(err, Error::Range { value: 1024, .. }));
    }

    #[test]
    fn raw_truncation_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HEVS");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..10 {
            bytes.extend_from_slice(&0u16.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let err = read_raw_bin(&path, PatternSpec::default_hybridevs()).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 16, found: 10, .. }));
    }

    #[test]
    fn raw_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_raw_bin(&path, PatternSpec::default_hybridevs()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn defect_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.defect");
        let pattern = PatternSpec::default_hybridevs();
        let mut mask = Array2::from_elem((8, 8), false);
        mask[[0, 0]] = true;
        mask[[5, 7]] = true;
        let map = DefectMap::new(mask, &pattern).unwrap();
        write_defect(&map, &path).unwrap();
        let back = read_defect(&path, &pattern).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.png");
        let mut img = RgbImage::zeros(8, 8);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(img.quantize8(), back.quantize8());
    }
}
