//! Paired thermal/visible captures, preprocessing to network resolution, and
//! identity-disjoint fold planning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::image::{self, Image};
use crate::ops::resize_bilinear;
use crate::rng::SeededRng;

pub const NETWORK_RESOLUTION: usize = 128;
pub const MAX_VARIATION: u32 = 21;
pub const DEFAULT_DARK_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Spectrum {
    Visible,
    Thermal,
}

impl Spectrum {
    pub fn channels(self) -> usize {
        match self {
            Spectrum::Visible => 3,
            Spectrum::Thermal => 1,
        }
    }

    /// Filename tag used by the corpus layout.
    pub fn tag(self) -> &'static str {
        match self {
            Spectrum::Visible => "vis",
            Spectrum::Thermal => "thm",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "vis" => Some(Spectrum::Visible),
            "thm" => Some(Spectrum::Thermal),
            _ => None,
        }
    }
}

/// One raw capture.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRecord {
    identity_id: u32,
    variation_id: u32,
    spectrum: Spectrum,
    pixels: Image,
    source_path: String,
}

impl CaptureRecord {
    pub fn new(
        identity_id: u32,
        variation_id: u32,
        spectrum: Spectrum,
        pixels: Image,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        contract!(
            (1..=MAX_VARIATION).contains(&variation_id),
            "variation id {variation_id} outside [1, {MAX_VARIATION}]"
        );
        contract!(
            pixels.channels() == spectrum.channels(),
            "{spectrum:?} capture must have {} channel(s), got {}",
            spectrum.channels(),
            pixels.channels()
        );
        image::check_unit_range(&pixels)?;
        Ok(Self {
            identity_id,
            variation_id,
            spectrum,
            pixels,
            source_path: source_path.into(),
        })
    }

    pub fn identity_id(&self) -> u32 {
        self.identity_id
    }
    pub fn variation_id(&self) -> u32 {
        self.variation_id
    }
    pub fn key(&self) -> (u32, u32) {
        (self.identity_id, self.variation_id)
    }
    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }
    pub fn pixels(&self) -> &Image {
        &self.pixels
    }
    pub fn source_path(&self) -> &str {
        &self.source_path
    }
}

/// Sorts records into the canonical `(identity, variation, spectrum)` order.
pub fn sort_records(records: &mut [CaptureRecord]) {
    records.sort_by(|a, b| {
        (a.identity_id, a.variation_id, a.spectrum).cmp(&(b.identity_id, b.variation_id, b.spectrum))
    });
}

/// Preprocessed source/target pair at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub thermal: Image,
    pub visible: Image,
    pub identity_id: u32,
    pub variation_id: u32,
}

/// Thermal and visible captures grouped by `(identity, variation)`.
#[derive(Debug, Clone, Copy)]
pub struct CapturePair<'a> {
    pub thermal: &'a CaptureRecord,
    pub visible: &'a CaptureRecord,
}

/// A counterpart that is missing for one `(identity, variation)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Orphan {
    pub identity_id: u32,
    pub variation_id: u32,
    pub present: Spectrum,
    pub source_path: String,
}

/// Thermal and visible capture found for one key.
type Slot<'a> = (Option<&'a CaptureRecord>, Option<&'a CaptureRecord>);

/// Groups records into complete pairs, reporting any record whose
/// counterpart is absent.
pub fn group_pairs(records: &[CaptureRecord]) -> (Vec<CapturePair<'_>>, Vec<Orphan>) {
    let mut slots: BTreeMap<(u32, u32), Slot<'_>> = BTreeMap::new();
    for r in records {
        let slot = slots.entry(r.key()).or_default();
        match r.spectrum {
            Spectrum::Thermal => slot.0 = Some(r),
            Spectrum::Visible => slot.1 = Some(r),
        }
    }
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    for ((identity_id, variation_id), slot) in slots {
        match slot {
            (Some(thermal), Some(visible)) => pairs.push(CapturePair { thermal, visible }),
            (Some(only), None) | (None, Some(only)) => orphans.push(Orphan {
                identity_id,
                variation_id,
                present: only.spectrum,
                source_path: only.source_path.clone(),
            }),
            (None, None) => {}
        }
    }
    (pairs, orphans)
}

/// Like [`group_pairs`] but fails on the first orphan.
pub fn pair_records(records: &[CaptureRecord]) -> Result<Vec<CapturePair<'_>>> {
    let (pairs, orphans) = group_pairs(records);
    if let Some(o) = orphans.first() {
        let missing = match o.present {
            Spectrum::Thermal => Spectrum::Visible,
            Spectrum::Visible => Spectrum::Thermal,
        };
        return Err(Error::Pairing {
            identity: o.identity_id,
            variation: o.variation_id,
            reason: format!("{} counterpart of {} is missing", missing.tag(), o.source_path),
        });
    }
    Ok(pairs)
}

fn to_square(image: &Image, resolution: usize) -> Image {
    let sq = image::center_crop_square(image);
    resize_bilinear(&sq, resolution, resolution)
}

/// Crops both captures to a centred square, resizes them to `resolution` and
/// replicates the thermal channel three times. No alignment is applied.
pub fn preprocess_pair(
    thermal: &CaptureRecord,
    visible: &CaptureRecord,
    resolution: usize,
) -> Result<ImagePair> {
    if thermal.key() != visible.key() {
        return Err(Error::Pairing {
            identity: thermal.identity_id,
            variation: thermal.variation_id,
            reason: format!(
                "paired with identity {} variation {}",
                visible.identity_id, visible.variation_id
            ),
        });
    }
    contract!(
        thermal.spectrum == Spectrum::Thermal && visible.spectrum == Spectrum::Visible,
        "preprocess_pair expects (thermal, visible), got ({:?}, {:?})",
        thermal.spectrum,
        visible.spectrum
    );
    let thermal_img = to_square(&thermal.pixels, resolution).map(|v| v.clamp(0.0, 1.0));
    let visible_img = to_square(&visible.pixels, resolution).map(|v| v.clamp(0.0, 1.0));
    Ok(ImagePair {
        thermal: image::replicate_to_rgb(&thermal_img)?,
        visible: visible_img,
        identity_id: thermal.identity_id,
        variation_id: thermal.variation_id,
    })
}

/// Mean BT.601 luminance below `threshold`.
pub fn is_dark(visible: &CaptureRecord, threshold: f64) -> Result<bool> {
    contract!(
        visible.spectrum == Spectrum::Visible,
        "darkness is only defined for visible captures"
    );
    let lum = image::luma(&visible.pixels);
    let mean = lum.iter().sum::<f64>() / lum.len().max(1) as f64;
    Ok(mean < threshold)
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fold {
    pub train: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Checks disjointness and coverage against `identities`.
    pub fn validate(&self, identities: &BTreeSet<u32>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, fold) in self.folds.iter().enumerate() {
            if fold.train.intersection(&fold.test).next().is_some() {
                return Err(Error::Config(format!("fold {i}: train and test overlap")));
            }
            let union: BTreeSet<u32> = fold.train.union(&fold.test).copied().collect();
            if &union != identities {
                return Err(Error::Config(format!(
                    "fold {i}: train and test do not cover the identity set"
                )));
            }
            for id in &fold.test {
                if !seen.insert(*id) {
                    return Err(Error::Config(format!(
                        "identity {id} is tested in more than one fold"
                    )));
                }
            }
        }
        if &seen != identities {
            return Err(Error::Config("some identities are never tested".into()));
        }
        Ok(())
    }
}

/// Shuffles the identities with `seed` and slices them into `k` contiguous
/// test blocks.
pub fn make_folds(identities: &BTreeSet<u32>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    if !identities.len().is_multiple_of(k) {
        return Err(Error::Config(format!(
            "{} identities cannot be split evenly into {k} folds",
            identities.len()
        )));
    }
    let mut order: Vec<u32> = identities.iter().copied().collect();
    SeededRng::new(seed).shuffle(&mut order);
    let size = order.len() / k;
    let folds = order
        .chunks(size.max(1))
        .take(k)
        .map(|block| {
            let test: BTreeSet<u32> = block.iter().copied().collect();
            let train = identities.difference(&test).copied().collect();
            Fold { train, test }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

/// Preprocessed training pairs for `fold`: train identities only, optionally
/// dropping pairs whose visible capture is dark.
pub fn training_pairs(
    records: &[CaptureRecord],
    fold: &Fold,
    exclude_dark: bool,
    resolution: usize,
    dark_threshold: f64,
) -> Result<Vec<ImagePair>> {
    let (pairs, _) = group_pairs(records);
    let mut out = Vec::new();
    for p in pairs {
        if !fold.train.contains(&p.thermal.identity_id) {
            continue;
        }
        if exclude_dark && is_dark(p.visible, dark_threshold)? {
            continue;
        }
        out.push(preprocess_pair(p.thermal, p.visible, resolution)?);
    }
    Ok(out)
}

/// Preprocessed pairs of the fold's test identities. Dark captures are kept.
pub fn test_pairs(records: &[CaptureRecord], fold: &Fold, resolution: usize) -> Result<Vec<ImagePair>> {
    let (pairs, _) = group_pairs(records);
    pairs
        .into_iter()
        .filter(|p| fold.test.contains(&p.thermal.identity_id))
        .map(|p| preprocess_pair(p.thermal, p.visible, resolution))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record(id: u32, var: u32, spectrum: Spectrum, value: f32, h: usize, w: usize) -> CaptureRecord {
        let img = Image::filled(spectrum.channels(), h, w, value);
        CaptureRecord::new(
            id,
            var,
            spectrum,
            img,
            format!("{id}/{id}_{var}_{}.png", spectrum.tag()),
        )
        .unwrap()
    }

    #[test]
    fn thermal_is_upsampled_and_replicated() {
        let thermal = CaptureRecord::new(
            0,
            1,
            Spectrum::Thermal,
            Image::from_fn(1, 120, 160, |_, y, x| ((x * 7 + y * 3) % 256) as f32 / 255.0),
            "t",
        )
        .unwrap();
        let visible = record(0, 1, Spectrum::Visible, 0.5, 90, 160);
        let pair = preprocess_pair(&thermal, &visible, 128).unwrap();
        assert_eq!(pair.thermal.shape(), (3, 128, 128));
        assert_eq!(pair.visible.shape(), (3, 128, 128));
        assert_eq!(pair.thermal.plane(0), pair.thermal.plane(1));
        assert_eq!(pair.thermal.plane(1), pair.thermal.plane(2));
    }

    #[test]
    fn native_resolution_is_untouched() {
        let img = Image::from_fn(3, 128, 128, |c, y, x| ((c + y * x) % 255) as f32 / 255.0);
        let vis = CaptureRecord::new(4, 2, Spectrum::Visible, img.clone(), "v").unwrap();
        let thm = record(4, 2, Spectrum::Thermal, 0.25, 128, 128);
        let pair = preprocess_pair(&thm, &vis, 128).unwrap();
        assert_eq!(pair.visible, img);
        assert!(pair.thermal.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn constant_input_stays_constant() {
        let thm = record(1, 1, Spectrum::Thermal, 0.3, 120, 160);
        let vis = record(1, 1, Spectrum::Visible, 0.7, 1080, 1920);
        let pair = preprocess_pair(&thm, &vis, 128).unwrap();
        assert!(pair.thermal.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(pair.visible.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let thm = record(1, 1, Spectrum::Thermal, 0.3, 8, 8);
        let vis = record(1, 2, Spectrum::Visible, 0.3, 8, 8);
        assert!(matches!(
            preprocess_pair(&thm, &vis, 8),
            Err(Error::Pairing { .. })
        ));
    }

    #[test]
    fn record_invariants_enforced() {
        assert!(CaptureRecord::new(0, 1, Spectrum::Thermal, Image::zeros(3, 2, 2), "x").is_err());
        assert!(CaptureRecord::new(0, 0, Spectrum::Thermal, Image::zeros(1, 2, 2), "x").is_err());
        assert!(CaptureRecord::new(0, 1, Spectrum::Visible, Image::filled(3, 2, 2, 1.5), "x").is_err());
    }

    #[test]
    fn darkness_threshold() {
        let dark = |v| is_dark(&record(0, 1, Spectrum::Visible, v, 4, 4), 0.05).unwrap();
        assert!(dark(0.0));
        assert!(!dark(1.0));
        assert!(dark(0.049));
        assert!(!dark(0.051));
    }

    #[test]
    fn orphan_is_named() {
        let records = vec![
            record(3, 7, Spectrum::Visible, 0.5, 4, 4),
            record(3, 8, Spectrum::Visible, 0.5, 4, 4),
            record(3, 8, Spectrum::Thermal, 0.5, 4, 4),
        ];
        match pair_records(&records) {
            Err(Error::Pairing {
                identity: 3,
                variation: 7,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fold_errors() {
        let ids: BTreeSet<u32> = (0..50).collect();
        assert!(matches!(make_folds(&ids, 1, 0), Err(Error::Config(_))));
        assert!(matches!(make_folds(&ids, 7, 0), Err(Error::Config(_))));
        let loo = make_folds(&ids, 50, 3).unwrap();
        assert!(loo.folds.iter().all(|f| f.test.len() == 1 && f.train.len() == 49));
        loo.validate(&ids).unwrap();
    }

    #[test]
    fn empty_train_set_yields_nothing() {
        let records = vec![
            record(0, 1, Spectrum::Visible, 0.5, 4, 4),
            record(0, 1, Spectrum::Thermal, 0.5, 4, 4),
        ];
        let fold = Fold {
            train: BTreeSet::new(),
            test: [0].into_iter().collect(),
        };
        assert!(training_pairs(&records, &fold, true, 4, 0.05).unwrap().is_empty());
    }
}
