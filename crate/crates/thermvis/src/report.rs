//! Quality scoring of image sets, aggregate tables and triptych composites.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermvis_core::dataset::{group_pairs, preprocess_pair, CaptureRecord};
use thermvis_core::quality::{compute_quality, QualityVector};
use thermvis_core::Image;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::io::read_png;
use crate::pipeline::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImageSet {
    #[serde(rename = "O-VIS")]
    OriginalVisible,
    #[serde(rename = "O-THM")]
    OriginalThermal,
    #[serde(rename = "G-VIS")]
    GeneratedVisible,
}

impl ImageSet {
    pub const ALL: [ImageSet; 3] = [
        ImageSet::OriginalVisible,
        ImageSet::OriginalThermal,
        ImageSet::GeneratedVisible,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ImageSet::OriginalVisible => "O-VIS",
            ImageSet::OriginalThermal => "O-THM",
            ImageSet::GeneratedVisible => "G-VIS",
        }
    }
}

/// One image to score.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub path: PathBuf,
    pub set: ImageSet,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub path: String,
    pub set: ImageSet,
    pub sharpness: f64,
    pub blur: f64,
    pub exposure: f64,
    pub gcf: f64,
    pub contrast: f64,
    pub ls: f64,
    pub brightness: f64,
}

impl QualityRow {
    pub fn new(path: &Path, set: ImageSet, q: &QualityVector) -> Self {
        Self {
            path: path.display().to_string(),
            set,
            sharpness: q.sharpness,
            blur: q.blur,
            exposure: q.exposure,
            gcf: q.gcf,
            contrast: q.contrast,
            ls: q.light_symmetry,
            brightness: q.brightness,
        }
    }

    /// Metric values in table column order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.sharpness,
            self.blur,
            self.exposure,
            self.gcf,
            self.contrast,
            self.ls,
            self.brightness,
        ]
    }
}

/// Mean and sample standard deviation of each metric over one set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: ImageSet,
    pub count: usize,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

impl SetSummary {
    pub fn from_rows<'a>(set: ImageSet, rows: impl IntoIterator<Item = &'a QualityRow>) -> Result<Self> {
        let values: Vec<[f64; 7]> = rows
            .into_iter()
            .filter(|r| r.set == set)
            .map(QualityRow::values)
            .collect();
        if values.is_empty() {
            return Err(Error::Evaluation(format!("image set {} is empty", set.label())));
        }
        let n = values.len() as f64;
        let mut mean = [0.0; 7];
        for v in &values {
            for k in 0..7 {
                mean[k] += v[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; 7];
        if values.len() > 1 {
            for v in &values {
                for k in 0..7 {
                    std[k] += (v[k] - mean[k]).powi(2);
                }
            }
            std.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
        }
        Ok(Self {
            set,
            count: values.len(),
            mean,
            std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub sets: Vec<SetSummary>,
}

impl AggregateReport {
    /// Summaries for O-VIS, O-THM and G-VIS; any empty set is an error.
    pub fn from_rows(rows: &[QualityRow]) -> Result<Self> {
        let sets = ImageSet::ALL
            .iter()
            .map(|&s| SetSummary::from_rows(s, rows))
            .collect::<Result<_>>()?;
        Ok(Self { sets })
    }

    pub fn get(&self, set: ImageSet) -> Option<&SetSummary> {
        self.sets.iter().find(|s| s.set == set)
    }

    /// Aligned text table: one row per set, cells `mean ± std`.
    pub fn render_table(&self) -> String {
        let header: Vec<String> = std::iter::once("Set".to_string())
            .chain(QualityVector::NAMES.iter().map(|s| s.to_string()))
            .chain(std::iter::once("N".to_string()))
            .collect();
        let mut rows = vec![header];
        for s in &self.sets {
            let mut row = vec![s.set.label().to_string()];
            row.extend((0..7).map(|k| format!("{:.3} ± {:.3}", s.mean[k], s.std[k])));
            row.push(s.count.to_string());
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["set".to_string(), "count".to_string()];
        for name in QualityVector::NAMES {
            header.push(format!("{}_mean", name.to_lowercase()));
            header.push(format!("{}_std", name.to_lowercase()));
        }
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.sets {
            let mut rec = vec![s.set.label().to_string(), s.count.to_string()];
            for k in 0..7 {
                rec.push(s.mean[k].to_string());
                rec.push(s.std[k].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Evaluation(e.to_string())
}

pub const ROW_HEADER: [&str; 9] = [
    "path",
    "set",
    "sharpness",
    "blur",
    "exposure",
    "gcf",
    "contrast",
    "ls",
    "brightness",
];

pub fn rows_to_csv(rows: &[QualityRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(ROW_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<QualityRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

/// Scores every item, spreading the work over the available cores. Row
/// order follows item order.
pub fn score(items: &[EvalItem]) -> Result<Vec<QualityRow>> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<QualityRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|it| {
                            let q = compute_quality(&it.image)
                                .map_err(|e| Error::Evaluation(format!("{}: {e}", it.path.display())))?;
                            Ok(QualityRow::new(&it.path, it.set, &q))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(items.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Ground-truth items for every complete pair, preprocessed to `resolution`.
pub fn original_items(records: &[CaptureRecord], resolution: usize) -> Result<Vec<EvalItem>> {
    let (pairs, _) = group_pairs(records);
    let mut items = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let pre = preprocess_pair(p.thermal, p.visible, resolution)?;
        items.push(EvalItem {
            path: PathBuf::from(p.visible.source_path()),
            set: ImageSet::OriginalVisible,
            image: pre.visible,
        });
        items.push(EvalItem {
            path: PathBuf::from(p.thermal.source_path()),
            set: ImageSet::OriginalThermal,
            image: pre.thermal,
        });
    }
    Ok(items)
}

/// Generated items listed by the fold manifests, pooled across folds.
pub fn generated_items(manifests: &[RunManifest]) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for m in manifests {
        for g in &m.generated {
            let image = read_png(&g.path).map_err(|e| Error::Evaluation(e.to_string()))?;
            items.push(EvalItem {
                path: g.path.clone(),
                set: ImageSet::GeneratedVisible,
                image,
            });
        }
    }
    Ok(items)
}

/// Writes `quality.csv`, `aggregate.csv` and `aggregate.txt` into `dir`.
pub fn write_reports(dir: &Path, rows: &[QualityRow], report: &AggregateReport) -> Result<()> {
    write_atomic(&dir.join("quality.csv"), &rows_to_csv(rows)?)?;
    write_atomic(&dir.join("aggregate.csv"), &report.to_csv()?)?;
    write_atomic(&dir.join("aggregate.txt"), report.render_table().as_bytes())
}

/// Horizontal composite O-THM | G-VIS | O-VIS. Single-channel panels are
/// replicated to RGB.
pub fn triptych(thermal: &Image, generated: &Image, visible: &Image) -> Result<Image> {
    let panels = [thermal, generated, visible];
    let (h, w) = (thermal.height(), thermal.width());
    if let Some(p) = panels.iter().find(|p| p.height() != h || p.width() != w) {
        return Err(Error::Evaluation(format!(
            "triptych panels must share a size, got {h}x{w} and {}x{}",
            p.height(),
            p.width()
        )));
    }
    let mut out = Image::zeros(3, h, 3 * w);
    for (k, panel) in panels.iter().enumerate() {
        if panel.channels() != 1 && panel.channels() != 3 {
            return Err(Error::Evaluation(format!(
                "panel {k} has {} channels",
                panel.channels()
            )));
        }
        for c in 0..3 {
            let src = panel.plane(if panel.channels() == 1 { 0 } else { c });
            for y in 0..h {
                out.plane_mut(c)[y * 3 * w + k * w..y * 3 * w + (k + 1) * w]
                    .copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(set: ImageSet, v: f64) -> QualityRow {
        QualityRow {
            path: format!("{v}.png"),
            set,
            sharpness: v,
            blur: v / 2.0,
            exposure: 1.0 - v,
            gcf: 3.0 * v,
            contrast: v,
            ls: v * v,
            brightness: v,
        }
    }

    #[test]
    fn identical_rows_have_zero_std() {
        let rows: Vec<_> = ImageSet::ALL
            .iter()
            .flat_map(|&s| (0..4).map(move |_| row(s, 0.3)))
            .collect();
        let report = AggregateReport::from_rows(&rows).unwrap();
        for s in &report.sets {
            assert_eq!(s.count, 4);
            assert!(s.std.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_set_is_an_error() {
        let rows = vec![
            row(ImageSet::OriginalVisible, 0.1),
            row(ImageSet::OriginalThermal, 0.2),
        ];
        assert!(matches!(
            AggregateReport::from_rows(&rows),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn table_has_expected_rows_and_columns() {
        let rows: Vec<_> = ImageSet::ALL.iter().map(|&s| row(s, 0.5)).collect();
        let table = AggregateReport::from_rows(&rows).unwrap().render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(
            header,
            [
                "Set",
                "Sharpness",
                "Blur",
                "Exposure",
                "GCF",
                "Contrast",
                "LS",
                "Brightness",
                "N"
            ]
        );
        assert!(lines[1].starts_with("O-VIS"));
        assert!(lines[2].starts_with("O-THM"));
        assert!(lines[3].starts_with("G-VIS"));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            row(ImageSet::GeneratedVisible, 0.25),
            row(ImageSet::OriginalThermal, 0.75),
        ];
        let bytes = rows_to_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("path,set,sharpness,blur,exposure,gcf,contrast,ls,brightness\n"));
        assert!(text.contains(",G-VIS,"));
        assert_eq!(rows_from_csv(&bytes).unwrap(), rows);
    }

    #[test]
    fn triptych_layout() {
        let t = Image::filled(1, 4, 5, 0.25);
        let g = Image::filled(3, 4, 5, 0.5);
        let v = Image::from_fn(3, 4, 5, |c, y, x| (c + y + x) as f32 / 20.0);
        let out = triptych(&t, &g, &v).unwrap();
        assert_eq!(out.shape(), (3, 4, 15));
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(out.get(c, y, x), 0.25);
                    assert_eq!(out.get(c, y, x + 5), 0.5);
                    assert_eq!(out.get(c, y, x + 10), v.get(c, y, x));
                }
            }
        }
        assert!(triptych(&t, &g, &Image::zeros(3, 4, 4)).is_err());
    }
}
