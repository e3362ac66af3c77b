//! PNG reading and writing.

use std::path::Path;

use image::{DynamicImage, ImageReader};
use thermvis_core::dataset::Spectrum;
use thermvis_core::image::{from_interleaved_u8, luma, replicate_to_rgb, to_interleaved_u8};
use thermvis_core::Image;

use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(Error::io(path))?;
    let reader = reader.with_guessed_format().map_err(Error::io(path))?;
    reader.decode().map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads an 8-bit PNG as a 1-channel (grayscale) or 3-channel image in `[0,1]`.
/// Alpha is dropped; 16-bit data is reduced to 8 bits.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = if img.color().has_color() {
        from_interleaved_u8(&img.to_rgb8().into_raw(), 3, h, w)
    } else {
        from_interleaved_u8(&img.to_luma8().into_raw(), 1, h, w)
    };
    pixels.map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a capture with the channel count its spectrum requires: colour
/// thermal files are reduced to BT.601 luminance, grayscale visible files
/// are replicated to three channels.
pub fn read_capture(path: &Path, spectrum: Spectrum) -> Result<Image> {
    let img = read_png(path)?;
    Ok(match (spectrum, img.channels()) {
        (Spectrum::Thermal, 3) => {
            let (_, h, w) = img.shape();
            let values = luma(&img).into_iter().map(|v| v as f32).collect();
            Image::from_vec(1, h, w, values)?
        }
        (Spectrum::Visible, 1) => replicate_to_rgb(&img)?,
        _ => img,
    })
}

/// Writes a 1- or 3-channel image as an 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.shape();
    let bytes = to_interleaved_u8(img);
    let dynamic = match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageLuma8),
        3 => image::RgbImage::from_raw(w as u32, h as u32, bytes).map(DynamicImage::ImageRgb8),
        _ => None,
    }
    .ok_or_else(|| Error::format(path, format!("cannot encode a {c}-channel image as PNG")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    dynamic
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::from_fn(3, 5, 7, |c, y, x| ((c * 50 + y * 7 + x) % 256) as f32 / 255.0);
        let gray = Image::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32 / 255.0);
        for (name, img) in [("rgb.png", &rgb), ("gray.png", &gray)] {
            let path = dir.path().join(name);
            write_png(&path, img).unwrap();
            assert_eq!(&read_png(&path).unwrap(), img);
        }
    }

    #[test]
    fn capture_channels_follow_spectrum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        write_png(&path, &Image::filled(1, 3, 3, 0.5)).unwrap();
        assert_eq!(read_capture(&path, Spectrum::Visible).unwrap().channels(), 3);
        assert_eq!(read_capture(&path, Spectrum::Thermal).unwrap().channels(), 1);
    }

    #[test]
    fn corrupt_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        let err = read_png(&path).unwrap_err();
        assert!(matches!(err, Error::Ingest { .. }));
        assert!(err.to_string().contains("bad.png"));
    }
}
