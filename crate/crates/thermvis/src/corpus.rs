//! On-disk corpus layout: `<root>/<identity>/<identity>_<variation>_<vis|thm>.png`.

use std::path::{Path, PathBuf};

use thermvis_core::dataset::{group_pairs, pair_records, sort_records, CaptureRecord, Orphan, Spectrum};

use crate::error::{Error, Result};
use crate::io::read_capture;

/// Result of walking a corpus without failing on pairing problems.
#[derive(Debug, Default)]
pub struct ScanReport {
    pub records: Vec<CaptureRecord>,
    pub orphans: Vec<Orphan>,
    /// Entries that do not follow the naming convention, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// `(identity, variation, spectrum)` encoded in a capture file name.
pub fn parse_capture_name(file_name: &str) -> Option<(u32, u32, Spectrum)> {
    let stem = file_name.strip_suffix(".png")?;
    let mut parts = stem.split('_');
    let identity = parts.next()?.parse().ok()?;
    let variation = parts.next()?.parse().ok()?;
    let spectrum = Spectrum::from_tag(parts.next()?)?;
    if parts.next().is_some() {
        return None;
    }
    Some((identity, variation, spectrum))
}

pub fn capture_file_name(identity: u32, variation: u32, spectrum: Spectrum) -> String {
    format!("{identity}_{variation}_{}.png", spectrum.tag())
}

pub fn capture_path(root: &Path, identity: u32, variation: u32, spectrum: Spectrum) -> PathBuf {
    root.join(identity.to_string())
        .join(capture_file_name(identity, variation, spectrum))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads every capture under `root`. Unreadable images abort with an
/// ingestion error naming the file; missing counterparts are reported, not
/// fatal.
pub fn scan_dataset(root: &Path) -> Result<ScanReport> {
    let mut report = ScanReport::default();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            report.skipped.push((dir, "not an identity directory".into()));
            continue;
        }
        let dir_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Ok(dir_identity) = dir_name.parse::<u32>() else {
            report
                .skipped
                .push((dir, "directory name is not an identity number".into()));
            continue;
        };
        for path in sorted_entries(&dir)? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let Some((identity, variation, spectrum)) = parse_capture_name(name) else {
                report.skipped.push((
                    path,
                    "name does not match <identity>_<variation>_<vis|thm>.png".into(),
                ));
                continue;
            };
            if identity != dir_identity {
                report.skipped.push((
                    path,
                    format!("identity {identity} stored under directory {dir_identity}"),
                ));
                continue;
            }
            let pixels = read_capture(&path, spectrum)?;
            let record =
                CaptureRecord::new(identity, variation, spectrum, pixels, path.display().to_string())
                    .map_err(|e| Error::Ingest {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
            report.records.push(record);
        }
    }
    sort_records(&mut report.records);
    report.orphans = group_pairs(&report.records).1;
    Ok(report)
}

/// Strict loader: any capture without its counterpart is a pairing error.
pub fn load_dataset(root: &Path) -> Result<Vec<CaptureRecord>> {
    let report = scan_dataset(root)?;
    pair_records(&report.records)?;
    Ok(report.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_png;
    use thermvis_core::Image;

    #[test]
    fn names_round_trip() {
        let name = capture_file_name(12, 7, Spectrum::Thermal);
        assert_eq!(name, "12_7_thm.png");
        assert_eq!(parse_capture_name(&name), Some((12, 7, Spectrum::Thermal)));
        assert_eq!(parse_capture_name("12_7_ir.png"), None);
        assert_eq!(parse_capture_name("12_7_vis.jpg"), None);
        assert_eq!(parse_capture_name("12_7_vis_extra.png"), None);
    }

    #[test]
    fn empty_root_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_root_is_an_io_error() {
        let err = scan_dataset(Path::new("/nonexistent/corpus")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn orphan_is_reported_by_scan_and_rejected_by_load() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_png(
            &capture_path(root, 3, 6, Spectrum::Visible),
            &Image::filled(3, 4, 4, 0.5),
        )
        .unwrap();
        write_png(
            &capture_path(root, 3, 6, Spectrum::Thermal),
            &Image::filled(1, 4, 4, 0.5),
        )
        .unwrap();
        write_png(
            &capture_path(root, 3, 7, Spectrum::Visible),
            &Image::filled(3, 4, 4, 0.5),
        )
        .unwrap();
        std::fs::write(root.join("3").join("notes.txt"), "x").unwrap();
        let report = scan_dataset(root).unwrap();
        assert_eq!(report.records.len(), 3);
        assert_eq!(report.orphans.len(), 1);
        assert_eq!(
            (report.orphans[0].identity_id, report.orphans[0].variation_id),
            (3, 7)
        );
        assert_eq!(report.skipped.len(), 1);
        let err = load_dataset(root).unwrap_err();
        assert!(matches!(
            err,
            Error::Core(thermvis_core::Error::Pairing {
                identity: 3,
                variation: 7,
                ..
            })
        ));
    }
}
