//! Images are three- or one-channel [`FeatureMap<f32>`]s with values in
//! `[0, 1]`. 8-bit codecs live in the companion crate; this module only
//! converts between interleaved bytes and planar floats.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::tensor::FeatureMap;

pub type Image = FeatureMap<f32>;

/// Planar `[0,1]` image from interleaved 8-bit samples (`value / 255`).
pub fn from_interleaved_u8(bytes: &[u8], channels: usize, height: usize, width: usize) -> Result<Image> {
    contract!(
        bytes.len() == channels * height * width,
        "expected {} bytes for {channels}x{height}x{width}, got {}",
        channels * height * width,
        bytes.len()
    );
    Ok(Image::from_fn(channels, height, width, |c, y, x| {
        bytes[(y * width + x) * channels + c] as f32 / 255.0
    }))
}

/// Interleaved 8-bit samples, rounding to nearest and clamping to range.
pub fn to_interleaved_u8(image: &Image) -> Vec<u8> {
    let (c, h, w) = image.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.get(ch, y, x).clamp(0.0, 1.0);
                out.push(libm::roundf(v * 255.0) as u8);
            }
        }
    }
    out
}

pub fn check_unit_range(image: &Image) -> Result<()> {
    let bad = image.data().iter().position(|v| !(0.0..=1.0).contains(v));
    contract!(
        bad.is_none(),
        "pixel value {} at flat index {} is outside [0, 1]",
        image.data()[bad.unwrap_or(0)],
        bad.unwrap_or(0)
    );
    Ok(())
}

/// Copies a single-channel image into three identical channels.
pub fn replicate_to_rgb(image: &Image) -> Result<Image> {
    contract!(
        image.channels() == 1,
        "channel replication expects one channel, got {}",
        image.channels()
    );
    let plane = image.plane(0);
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(plane);
    }
    Image::from_vec(3, image.height(), image.width(), data)
}

/// Largest centred square crop.
pub fn center_crop_square(image: &Image) -> Image {
    let (c, h, w) = image.shape();
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    Image::from_fn(c, side, side, |ch, y, x| image.get(ch, y0 + y, x0 + x))
}

/// BT.601 luma `0.299 R + 0.587 G + 0.114 B`; single-channel input is
/// returned as-is.
pub fn luma(image: &Image) -> Vec<f64> {
    match image.channels() {
        1 => image.plane(0).iter().map(|&v| v as f64).collect(),
        _ => image
            .plane(0)
            .iter()
            .zip(image.plane(1))
            .zip(image.plane(2))
            .map(|((&r, &g), &b)| {
                // written around G so that gray pixels map to themselves exactly
                let (r, g, b) = (r as f64, g as f64, b as f64);
                g + 0.299 * (r - g) + 0.114 * (b - g)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(3 * 4 * 5).collect();
        let img = from_interleaved_u8(&bytes, 3, 4, 5).unwrap();
        assert_eq!(to_interleaved_u8(&img), bytes);
    }

    #[test]
    fn crop_takes_centre_of_wide_frame() {
        let img = Image::from_fn(1, 120, 160, |_, _, x| x as f32 / 160.0);
        let sq = center_crop_square(&img);
        assert_eq!(sq.shape(), (1, 120, 120));
        assert_eq!(sq.get(0, 0, 0), 20.0 / 160.0);
    }

    #[test]
    fn luma_of_white_is_one() {
        let img = Image::filled(3, 2, 2, 1.0);
        assert!(luma(&img).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
