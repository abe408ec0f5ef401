//! On-disk image set formats.
//!
//! * A directory of 16-bit binary PGM files, one image per file, ordered by
//!   file name.
//! * A single `IMGSET01` container: magic, then little-endian `u32` count,
//!   height and width, then `count·H·W` little-endian `f32` pixels.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma};

use super::ImageSet;
use crate::error::{invalid, Error, Result};
use crate::Scalar;

pub const IMGSET_MAGIC: &[u8; 8] = b"IMGSET01";
const PGM_EXTENSION: &str = "pgm";

fn is_container_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("imgset"))
}

/// Loads a set from a PGM directory or an `.imgset` container.
pub fn load_set<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageSet<T>> {
    let path = path.as_ref();
    if path.is_dir() {
        load_pgm_dir(path)
    } else {
        load_container(path)
    }
}

/// Saves to an `.imgset` container when the path carries that extension,
/// otherwise to a directory of PGM files (created if needed).
pub fn save_set<T: Scalar>(path: impl AsRef<Path>, set: &ImageSet<T>) -> Result<()> {
    let path = path.as_ref();
    if is_container_path(path) {
        save_container(path, set)
    } else {
        save_pgm_dir(path, set)
    }
}

fn load_container<T: Scalar>(path: &Path) -> Result<ImageSet<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != IMGSET_MAGIC {
        return Err(Error::Format(format!("{} is not an IMGSET01 container", path.display())));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (count, height, width) = (word(8), word(12), word(16));
    if height == 0 || width == 0 {
        return Err(Error::Format("container declares a zero image dimension".into()));
    }
    if count == 0 {
        return Err(invalid(format!("{} holds no images", path.display())));
    }
    let expected = count
        .checked_mul(height * width)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("container dimensions overflow".into()))?;
    if bytes.len() - 20 != expected {
        return Err(Error::Format(format!(
            "container payload is {} bytes, header implies {expected}",
            bytes.len() - 20
        )));
    }
    let pixels = bytes[20..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    ImageSet::new(height, width, pixels)
}

fn save_container<T: Scalar>(path: &Path, set: &ImageSet<T>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::with_capacity(20 + set.pixels().len() * 4);
    buf.extend_from_slice(IMGSET_MAGIC);
    for v in [set.len(), set.height(), set.width()] {
        let v = u32::try_from(v).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in set.pixels() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    file.sync_all()?;
    Ok(())
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(PGM_EXTENSION))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_pgm_dir<T: Scalar>(dir: &Path) -> Result<ImageSet<T>> {
    let files = pgm_files(dir)?;
    if files.is_empty() {
        return Err(invalid(format!("{} contains no .pgm images", dir.display())));
    }
    let mut shape = None;
    let mut pixels = Vec::new();
    for file in &files {
        let bytes = fs::read(file)?;
        let (h, w, px) = decode_pgm16::<T>(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
        match shape {
            None => shape = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::Format(format!(
                    "{} is {h}x{w}, earlier images are {}x{}",
                    file.display(),
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        pixels.extend(px);
    }
    let (h, w) = shape.expect("at least one file");
    ImageSet::new(h, w, pixels)
}

fn save_pgm_dir<T: Scalar>(dir: &Path, set: &ImageSet<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let digits = set.len().max(1).to_string().len().max(5);
    for (i, img) in set.images().enumerate() {
        let bytes = encode_pgm16(img, set.height(), set.width())?;
        fs::write(dir.join(format!("{i:0digits$}.{PGM_EXTENSION}")), bytes)?;
    }
    Ok(())
}

/// Encodes one `[0, 1]` image as a 16-bit binary PGM.
pub fn encode_pgm16<T: Scalar>(pixels: &[T], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::Shape(format!("{} pixels for a {height}x{width} image", pixels.len())));
    }
    let mut quantized = Vec::with_capacity(pixels.len());
    for &v in pixels {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Format(format!("pixel value {v} cannot be stored as 16-bit PGM")));
        }
        quantized.push((v * 65535.0).round() as u16);
    }
    let buffer = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, quantized)
        .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    buffer
        .write_to(&mut out, ImageFormat::Pnm)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a PGM (8- or 16-bit) into `[0, 1]` intensities.
pub fn decode_pgm16<T: Scalar>(bytes: &[u8]) -> Result<(usize, usize, Vec<T>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Format(e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let px = img.into_raw().into_iter().map(|v| T::of(v as f64 / 65535.0)).collect();
    Ok((h as usize, w as usize, px))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom_generate;

    #[test]
    fn pgm_dir_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let set = phantom_generate::<f64>(4, 16, 5).unwrap();
        save_set(dir.path().join("set"), &set).unwrap();
        let back: ImageSet<f64> = load_set(dir.path().join("set")).unwrap();
        assert_eq!(back.len(), 4);
        let worst = set
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 65535.0, "{worst}");
    }

    #[test]
    fn container_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.imgset");
        let set = ImageSet::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        save_set(&path, &set).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"IMGSET01");
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 6 * 4);
        let back: ImageSet<f64> = load_set(&path).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn mixed_sizes_and_empty_dirs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_set::<f64>(dir.path()), Err(Error::InvalidInput(_))));

        let a = ImageSet::new(2, 2, vec![0.5; 4]).unwrap();
        let b = ImageSet::new(3, 3, vec![0.5; 9]).unwrap();
        fs::write(dir.path().join("a.pgm"), encode_pgm16(a.image(0), 2, 2).unwrap()).unwrap();
        fs::write(dir.path().join("b.pgm"), encode_pgm16(b.image(0), 3, 3).unwrap()).unwrap();
        assert!(matches!(load_set::<f64>(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_container_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.imgset");
        let mut bytes = IMGSET_MAGIC.to_vec();
        for v in [2u32, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 12]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_set::<f64>(&path), Err(Error::Format(_))));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_set::<f64>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_range_pixels_cannot_be_written_as_pgm() {
        assert!(encode_pgm16(&[1.5f64], 1, 1).is_err());
    }
}
