//! Deterministic synthetic face-like corpus in the on-disk capture layout,
//! for smoke tests and demos without the real dataset.

use std::path::Path;

use thermvis_core::dataset::Spectrum;
use thermvis_core::rng::SeededRng;
use thermvis_core::Image;

use crate::corpus::capture_path;
use crate::error::Result;
use crate::io::write_png;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub identities: u32,
    pub variations: u32,
    /// Thermal frame size `(height, width)`.
    pub thermal_size: (usize, usize),
    /// Visible frame size `(height, width)`.
    pub visible_size: (usize, usize),
    /// Variation whose visible capture is rendered nearly black.
    pub dark_variation: Option<u32>,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            identities: 10,
            variations: 2,
            thermal_size: (120, 160),
            visible_size: (120, 160),
            dark_variation: None,
            seed: 0,
        }
    }
}

/// Face geometry in unit coordinates (`x` across, `y` down).
#[derive(Debug, Clone, Copy)]
struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_y: f64,
    mouth_y: f64,
    skin: [f64; 3],
    warmth: f64,
    light: f64,
}

fn face(seed: u64, identity: u32, variation: u32) -> Face {
    let mut id = SeededRng::derived(seed, identity as u64);
    let mut var = SeededRng::derived(seed ^ 0x5eed, ((identity as u64) << 8) | variation as u64);
    let tone = id.uniform(0.35, 0.85);
    Face {
        cx: 0.5 + var.uniform(-0.05, 0.05),
        cy: 0.5 + var.uniform(-0.04, 0.04),
        rx: id.uniform(0.22, 0.30),
        ry: id.uniform(0.32, 0.40),
        eye_dx: id.uniform(0.08, 0.12),
        eye_y: id.uniform(-0.12, -0.06),
        mouth_y: id.uniform(0.12, 0.18),
        skin: [tone, tone * 0.8, tone * 0.65],
        warmth: id.uniform(0.7, 0.95),
        light: var.uniform(-0.3, 0.3),
    }
}

fn render(f: &Face, channels: usize, h: usize, w: usize, thermal: bool) -> Image {
    let scale = h.min(w) as f64;
    Image::from_fn(channels, h, w, |c, y, x| {
        // Coordinates in a centred square so faces are not stretched.
        let u = (x as f64 - (w as f64 - scale) / 2.0 + 0.5) / scale;
        let v = (y as f64 - (h as f64 - scale) / 2.0 + 0.5) / scale;
        let (dx, dy) = ((u - f.cx) / f.rx, (v - f.cy) / f.ry);
        let r2 = dx * dx + dy * dy;
        let eye = |side: f64| {
            let ex = (u - f.cx - side * f.eye_dx) / 0.04;
            let ey = (v - f.cy - f.eye_y) / 0.025;
            ex * ex + ey * ey < 1.0
        };
        let mouth = ((u - f.cx) / 0.09).powi(2) + ((v - f.cy - f.mouth_y) / 0.02).powi(2) < 1.0;
        let value = if thermal {
            if r2 < 1.0 {
                let base = f.warmth * (1.0 - 0.25 * r2);
                if eye(-1.0) || eye(1.0) {
                    (base + 0.08).min(1.0)
                } else if mouth {
                    base * 0.9
                } else {
                    base
                }
            } else {
                0.12 + 0.05 * v
            }
        } else if r2 < 1.0 {
            let shade = (1.0 + f.light * dx).clamp(0.3, 1.3);
            if eye(-1.0) || eye(1.0) {
                0.1
            } else if mouth {
                0.55 * f.skin[0] * if c == 0 { 1.0 } else { 0.6 }
            } else {
                f.skin[c] * shade
            }
        } else {
            [0.55, 0.6, 0.7][c] * (0.8 + 0.2 * v)
        };
        value.clamp(0.0, 1.0) as f32
    })
}

/// Thermal (1-channel) and visible (3-channel) renderings of one capture.
pub fn synth_pair(opts: &SynthOptions, identity: u32, variation: u32) -> (Image, Image) {
    let f = face(opts.seed, identity, variation);
    let (th, tw) = opts.thermal_size;
    let (vh, vw) = opts.visible_size;
    let thermal = render(&f, 1, th, tw, true);
    let mut visible = render(&f, 3, vh, vw, false);
    if opts.dark_variation == Some(variation) {
        visible = visible.map(|p| p * 0.02);
    }
    (thermal, visible)
}

/// Writes `identities × variations` capture pairs under `root`.
/// Identities are numbered from 1, variations from 1.
pub fn write_corpus(root: &Path, opts: &SynthOptions) -> Result<()> {
    for id in 1..=opts.identities {
        for var in 1..=opts.variations {
            let (thermal, visible) = synth_pair(opts, id, var);
            write_png(&capture_path(root, id, var, Spectrum::Thermal), &thermal)?;
            write_png(&capture_path(root, id, var, Spectrum::Visible), &visible)?;
        }
    }
    Ok(())
}
