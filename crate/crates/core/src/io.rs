//! PNG masks and patches, and a compact binary container for fields and
//! parameter vectors: one JSON header line followed by raw little-endian f32.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Mask, Patch};
use crate::warp::WarpField;

/// Loads a grayscale (or colour, via luma) PNG as a binary mask thresholded at 0.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_predicate(h as usize, w as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0 >= 0.5
    }))
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(mask.get(y as usize, x as usize))])
    });
    img.save(path)?;
    Ok(())
}

pub fn load_patch(path: impl AsRef<Path>) -> Result<Patch> {
    let img = image::open(path)?.into_rgb8();
    Ok(patch_from_rgb(&img))
}

pub fn save_patch(patch: &Patch, path: impl AsRef<Path>) -> Result<()> {
    patch_to_rgb(patch).save(path)?;
    Ok(())
}

pub fn patch_from_rgb(img: &RgbImage) -> Patch {
    let (w, h) = img.dimensions();
    Patch::from_fn(h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn patch_to_rgb(patch: &Patch) -> RgbImage {
    let (h, w) = patch.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let [r, g, b] = patch.pixel(y as usize, x as usize);
        image::Rgb([to_u8(r), to_u8(g), to_u8(b)])
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `header` as one JSON line followed by `data` as f32le.
pub fn write_tensor_file<H: Serialize>(path: impl AsRef<Path>, header: &H, data: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for &v in data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_tensor_file`], checking the payload holds
/// exactly `len(header)` values.
pub fn read_tensor_file<H: DeserializeOwned>(
    path: impl AsRef<Path>,
    len: impl FnOnce(&H) -> usize,
) -> Result<(H, Vec<f64>)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: H = serde_json::from_str(line.trim_end())?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let expected = len(&header);
    if bytes.len() != expected * 4 {
        return Err(Error::MalformedFile(format!(
            "expected {expected} f32 values, found {} bytes",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((header, data))
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    kind: String,
    height: usize,
    width: usize,
}

const FIELD_KIND: &str = "warp_field";

/// Stores `dx` then `dy`, row-major.
pub fn save_field(field: &WarpField, path: impl AsRef<Path>) -> Result<()> {
    let (height, width) = field.dims();
    let header = FieldHeader {
        kind: FIELD_KIND.into(),
        height,
        width,
    };
    let data: Vec<f64> = field.dx().iter().chain(field.dy()).copied().collect();
    write_tensor_file(path, &header, &data)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<WarpField> {
    let (header, data) = read_tensor_file::<FieldHeader>(path, |h| 2 * h.height * h.width)?;
    if header.kind != FIELD_KIND {
        return Err(Error::MalformedFile(format!("not a warp field: {}", header.kind)));
    }
    let n = header.height * header.width;
    WarpField::new(header.height, header.width, data[..n].to_vec(), data[n..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Raster;

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_predicate(7, 5, |y, x| (y + x) % 3 == 0);
        let p = dir.path().join("m.png");
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn patch_png_roundtrip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let z = Patch::from_fn(4, 6, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f64 / 255.0);
        let p = dir.path().join("z.png");
        save_patch(&z, &p).unwrap();
        let back = load_patch(&p).unwrap();
        assert!(z.grid().mean_abs_diff(back.grid()).unwrap() < 1e-12);
    }

    #[test]
    fn field_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let f = WarpField::from_fn(3, 4, |y, x| (y as f64 * 0.5 - 1.0, x as f64 * 0.25));
        let p = dir.path().join("f.bin");
        save_field(&f, &p).unwrap();
        assert_eq!(load_field(&p).unwrap(), f);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_field(&p), Err(Error::MalformedFile(_))));
    }
}
