//! No-reference image quality metrics on BT.601 luminance.
//!
//! All metrics accept any grid of at least 16x16 pixels. Boundary handling
//! for the 3x3 Sobel operator replicates edge pixels, which for a radius-one
//! stencil coincides with symmetric extension.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::image::{self, Image};

/// Half-sample symmetric extension of index `i` into `0..n`.
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = i.rem_euclid(2 * n);
    (if i < n { i } else { 2 * n - 1 - i }) as usize
}

/// Largest Sobel gradient magnitude an image with values in `[0,1]` can
/// produce: `sqrt(4^2 + 2^2)`, reached e.g. by a corner with one dark row and
/// column. Both components cannot hit 4 at once because they share pixels.
pub const SOBEL_MAX_MAGNITUDE: f64 = 4.472_135_954_999_579;

/// Normalised Sobel magnitude at or above which a pixel may be an edge.
pub const EDGE_THRESHOLD: f64 = 0.1;
/// CPBD shape parameter of the blur-probability curve.
pub const CPBD_BETA: f64 = 3.6;
/// Probability of blur detection regarded as just noticeable.
pub const CPBD_JNB_PROBABILITY: f64 = 0.63;
/// Block contrast (0..255 scale) separating the two just-noticeable widths.
pub const CPBD_CONTRAST_SPLIT: f64 = 50.0;
pub const CPBD_BLOCK: usize = 64;

/// Superpixel sizes of the nine contrast resolutions.
pub const GCF_FACTORS: [usize; 9] = [1, 2, 4, 8, 16, 25, 50, 100, 200];

#[derive(Debug, Clone, PartialEq)]
pub struct Luminance {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Luminance {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        contract!(values.len() == height * width, "luminance size mismatch");
        contract!(height > 0 && width > 0, "empty luminance grid");
        contract!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            "luminance values must lie in [0, 1]"
        );
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values)
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        image::check_unit_range(img)?;
        let values = image::luma(img).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(img.height(), img.width(), values)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
    #[inline]
    fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.at(y, x)
    }

    /// Mean over a `(2r+1)^2` window with mirrored borders.
    pub fn box_blurred(&self, radius: usize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let r = radius as isize;
        let area = ((2 * r + 1) * (2 * r + 1)) as f64;
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += self.at(mirror_index(y + dy, h as usize), mirror_index(x + dx, w as usize));
                    }
                }
                values.push((acc / area).clamp(0.0, 1.0));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Separable Gaussian blur with a `ceil(3 sigma)` radius and mirrored borders.
    pub fn gaussian_blurred(&self, sigma: f64) -> Self {
        let radius = libm::ceil(3.0 * sigma).max(1.0) as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let pass = |src: &[f64], h: usize, w: usize, horizontal: bool| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (sy, sx) = if horizontal {
                            (y, mirror_index(x as isize + off, w))
                        } else {
                            (mirror_index(y as isize + off, h), x)
                        };
                        acc += kv * src[sy * w + sx];
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        };
        let tmp = pass(&self.values, self.height, self.width, true);
        let values = pass(&tmp, self.height, self.width, false)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Horizontal mirror image.
    pub fn flipped(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            values.extend((0..self.width).rev().map(|x| self.at(y, x)));
        }
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Seven-metric summary of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QualityVector {
    pub sharpness: f64,
    pub blur: f64,
    pub exposure: f64,
    pub gcf: f64,
    pub contrast: f64,
    pub light_symmetry: f64,
    pub brightness: f64,
}

impl QualityVector {
    /// Column order of the aggregate table.
    pub const NAMES: [&'static str; 7] = [
        "Sharpness",
        "Blur",
        "Exposure",
        "GCF",
        "Contrast",
        "LS",
        "Brightness",
    ];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.sharpness,
            self.blur,
            self.exposure,
            self.gcf,
            self.contrast,
            self.light_symmetry,
            self.brightness,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QualityDiagnostics {
    /// The blur metric found no edges and reported 0.
    pub no_edges: bool,
}

pub fn brightness(lum: &Luminance) -> f64 {
    lum.values.iter().sum::<f64>() / lum.values.len() as f64
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Spread between the 99th and 1st luminance percentiles.
pub fn contrast(lum: &Luminance) -> f64 {
    let mut sorted = lum.values.clone();
    sorted.sort_by(f64::total_cmp);
    (percentile(&sorted, 99.0) - percentile(&sorted, 1.0)).clamp(0.0, 1.0)
}

/// Sobel responses `(gx, gy)` with replicated borders.
pub fn sobel(lum: &Luminance) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (lum.height, lum.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let p = |dy: isize, dx: isize| lum.at_clamped(yi + dy, xi + dx);
            gx[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        }
    }
    (gx, gy)
}

/// Mean Sobel gradient magnitude divided by [`SOBEL_MAX_MAGNITUDE`].
pub fn sharpness(lum: &Luminance) -> f64 {
    let (gx, gy) = sobel(lum);
    let total: f64 = gx.iter().zip(&gy).map(|(a, b)| libm::sqrt(a * a + b * b)).sum();
    (total / (gx.len() as f64 * SOBEL_MAX_MAGNITUDE)).clamp(0.0, 1.0)
}

/// Extent of the monotone run through `(y, x)` along one axis, in pixels.
fn edge_width(lum: &Luminance, y: usize, x: usize, horizontal: bool, rising: bool) -> usize {
    let len = if horizontal { lum.width } else { lum.height };
    let pos = if horizontal { x } else { y };
    let get = |i: usize| if horizontal { lum.at(y, i) } else { lum.at(i, x) };
    // walking backwards the profile must keep falling for a rising edge
    let descends = |from: f64, to: f64| if rising { to < from } else { to > from };
    let mut start = pos;
    while start > 0 && descends(get(start), get(start - 1)) {
        start -= 1;
    }
    let mut end = pos;
    while end + 1 < len && descends(get(end + 1), get(end)) {
        end += 1;
    }
    (end - start).max(1)
}

/// Cumulative probability of blur detection: the share of edge pixels
/// whose width is below the just-noticeable blur. Higher means sharper.
pub fn blur_cpbd_detailed(lum: &Luminance) -> (f64, QualityDiagnostics) {
    let (h, w) = (lum.height, lum.width);
    let (gx, gy) = sobel(lum);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| libm::sqrt(a * a + b * b) / SOBEL_MAX_MAGNITUDE)
        .collect();

    let bw = w.div_ceil(CPBD_BLOCK);
    let bh = h.div_ceil(CPBD_BLOCK);
    let mut block_lo = vec![f64::INFINITY; bw * bh];
    let mut block_hi = vec![f64::NEG_INFINITY; bw * bh];
    for y in 0..h {
        for x in 0..w {
            let b = (y / CPBD_BLOCK) * bw + x / CPBD_BLOCK;
            block_lo[b] = block_lo[b].min(lum.at(y, x));
            block_hi[b] = block_hi[b].max(lum.at(y, x));
        }
    }

    let mut edges = 0usize;
    let mut sharp = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m < EDGE_THRESHOLD {
                continue;
            }
            let horizontal = gx[i].abs() >= gy[i].abs();
            // non-maximum suppression along the gradient axis
            let (before, after) = if horizontal {
                (mag[y * w + x.saturating_sub(1)], mag[y * w + (x + 1).min(w - 1)])
            } else {
                (mag[y.saturating_sub(1) * w + x], mag[(y + 1).min(h - 1) * w + x])
            };
            if m < before || m < after {
                continue;
            }
            let rising = if horizontal { gx[i] > 0.0 } else { gy[i] > 0.0 };
            let width = edge_width(lum, y, x, horizontal, rising) as f64;
            let b = (y / CPBD_BLOCK) * bw + x / CPBD_BLOCK;
            let block_contrast = (block_hi[b] - block_lo[b]) * 255.0;
            let jnb = if block_contrast <= CPBD_CONTRAST_SPLIT {
                5.0
            } else {
                3.0
            };
            let p_blur = 1.0 - libm::exp(-libm::pow(width / jnb, CPBD_BETA));
            edges += 1;
            if p_blur <= CPBD_JNB_PROBABILITY {
                sharp += 1;
            }
        }
    }
    if edges == 0 {
        return (0.0, QualityDiagnostics { no_edges: true });
    }
    (sharp as f64 / edges as f64, QualityDiagnostics::default())
}

pub fn blur_cpbd(lum: &Luminance) -> f64 {
    blur_cpbd_detailed(lum).0
}

/// Histogram balance around mid-gray. Each of 256 bins is penalised by
/// twice its distance from 0.5 (zero for the two bins touching 0.5).
pub fn exposure(lum: &Luminance) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in &lum.values {
        hist[((v * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let n = lum.values.len() as f64;
    let half_bin = 0.5 / BINS as f64;
    let penalty: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &count)| {
            let center = (b as f64 + 0.5) / BINS as f64;
            let dist = (libm::fabs(center - 0.5) - half_bin).max(0.0);
            count as f64 / n * 2.0 * dist
        })
        .sum();
    (1.0 - penalty).clamp(0.0, 1.0)
}

/// Perceptual-lightness contrast averaged over nine superpixel resolutions.
pub fn gcf(lum: &Luminance) -> f64 {
    let linear: Vec<f64> = lum.values.iter().map(|&v| libm::pow(v, 2.2)).collect();
    let extent = lum.height.min(lum.width);
    let mut total = 0.0;
    for (level, &factor) in GCF_FACTORS.iter().enumerate() {
        if factor > extent {
            continue;
        }
        let i = (level + 1) as f64 / 9.0;
        let weight = (-0.406385 * i + 0.334573) * i + 0.0877526;
        total += weight * level_contrast(&linear, lum.height, lum.width, factor);
    }
    total
}

/// Mean 4-neighbour lightness difference after averaging linear luminance
/// over `factor x factor` superpixels (partial blocks at the far edges).
fn level_contrast(linear: &[f64], h: usize, w: usize, factor: usize) -> f64 {
    let (sh, sw) = (h.div_ceil(factor), w.div_ceil(factor));
    // offsets from each block's first pixel keep uniform blocks exact
    let mut anchor = vec![0.0; sh * sw];
    let mut sums = vec![0.0; sh * sw];
    let mut counts = vec![0usize; sh * sw];
    for y in 0..h {
        for x in 0..w {
            let s = (y / factor) * sw + x / factor;
            let v = linear[y * w + x];
            if counts[s] == 0 {
                anchor[s] = v;
            }
            sums[s] += v - anchor[s];
            counts[s] += 1;
        }
    }
    let lightness: Vec<f64> = (0..sh * sw)
        .map(|s| 100.0 * libm::sqrt((anchor[s] + sums[s] / counts[s] as f64).max(0.0)))
        .collect();
    let mut acc = 0.0;
    for y in 0..sh {
        for x in 0..sw {
            let l = lightness[y * sw + x];
            let mut diff = 0.0;
            let mut neighbours = 0;
            let mut visit = |ny: usize, nx: usize| {
                diff += libm::fabs(l - lightness[ny * sw + nx]);
                neighbours += 1;
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < sh {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < sw {
                visit(y, x + 1);
            }
            if neighbours > 0 {
                acc += diff / neighbours as f64;
            }
        }
    }
    acc / (sh * sw) as f64
}

/// Half the L1 distance between 64-bin luminance histograms of the left
/// half and the mirrored right half. 0 means symmetric lighting.
pub fn light_symmetry(lum: &Luminance) -> f64 {
    const BINS: usize = 64;
    let half = lum.width / 2;
    if half == 0 {
        return 0.0;
    }
    let mut left = [0usize; BINS];
    let mut right = [0usize; BINS];
    let bin = |v: f64| ((v * BINS as f64) as usize).min(BINS - 1);
    for y in 0..lum.height {
        for x in 0..half {
            left[bin(lum.at(y, x))] += 1;
            right[bin(lum.at(y, lum.width - 1 - x))] += 1;
        }
    }
    let n = (half * lum.height) as f64;
    let l1: f64 = left
        .iter()
        .zip(&right)
        .map(|(&a, &b)| libm::fabs(a as f64 - b as f64) / n)
        .sum();
    (0.5 * l1).clamp(0.0, 1.0)
}

pub fn compute_quality_detailed(img: &Image) -> Result<(QualityVector, QualityDiagnostics)> {
    let lum = Luminance::from_image(img)?;
    let (blur, diagnostics) = blur_cpbd_detailed(&lum);
    Ok((
        QualityVector {
            sharpness: sharpness(&lum),
            blur,
            exposure: exposure(&lum),
            gcf: gcf(&lum),
            contrast: contrast(&lum),
            light_symmetry: light_symmetry(&lum),
            brightness: brightness(&lum),
        },
        diagnostics,
    ))
}

pub fn compute_quality(img: &Image) -> Result<QualityVector> {
    compute_quality_detailed(img).map(|(q, _)| q)
}
