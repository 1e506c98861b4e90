//! Cross-fold aggregates, misclassification galleries, and class
//! distribution comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{encode_png, ClassHistogram, ImageId, ImageSet, NUM_CLASSES};
use crate::pruning::PredictionRecord;
use crate::training::{Metrics, SplitMetrics};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("nothing to summarize")]
    EmptyInput,
    #[error("image id {0} is not in the pool")]
    UnknownId(ImageId),
    #[error("class {class}: {after} images after cleaning but only {before} before")]
    NegativeRemoval {
        class: usize,
        before: usize,
        after: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ReportError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Rounds half away from zero to 4 decimal places.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub average: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: impl Iterator<Item = f64>) -> Stat {
        let (mut sum, mut n) = (0.0, 0usize);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            sum += v;
            n += 1;
            min = min.min(v);
            max = max.max(v);
        }
        Stat {
            average: sum / n as f64,
            min,
            max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub accuracy: Stat,
    pub loss: Stat,
}

pub type CvSummary = SplitMetrics<QuantitySummary>;

pub fn summarize_folds(folds: &[SplitMetrics<Metrics>]) -> Result<CvSummary> {
    if folds.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let of = |pick: fn(&SplitMetrics<Metrics>) -> Metrics| QuantitySummary {
        accuracy: Stat::of(folds.iter().map(|f| pick(f).accuracy)),
        loss: Stat::of(folds.iter().map(|f| pick(f).loss)),
    };
    Ok(SplitMetrics {
        train: of(|f| f.train),
        val: of(|f| f.val),
        test: of(|f| f.test),
    })
}

/// `dataset,quantity,statistic,display,value`; `display` is rounded to
/// 4 decimals, `value` is exact.
pub fn cv_summary_csv(summary: &CvSummary) -> String {
    let mut out = String::from("dataset,quantity,statistic,display,value\n");
    for (dataset, q) in [
        ("train", &summary.train),
        ("val", &summary.val),
        ("test", &summary.test),
    ] {
        for (quantity, s) in [("accuracy", &q.accuracy), ("loss", &q.loss)] {
            for (stat, v) in [("average", s.average), ("min", s.min), ("max", s.max)] {
                let _ = writeln!(out, "{dataset},{quantity},{stat},{:.4},{v}", round4(v));
            }
        }
    }
    out
}

/// `fold,dataset,accuracy,loss` rows for each fold, 1-based.
pub fn fold_metrics_csv(folds: &[SplitMetrics<Metrics>]) -> String {
    let mut out = String::from("fold,dataset,accuracy,loss\n");
    for (i, f) in folds.iter().enumerate() {
        for (name, m) in [("train", f.train), ("val", f.val), ("test", f.test)] {
            let _ = writeln!(out, "{},{name},{},{}", i + 1, m.accuracy, m.loss);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: ImageId,
    pub actual: u8,
    pub predicted: u8,
    pub confidence: f64,
    /// Relative to the gallery directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryRow {
    pub class: u8,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryManifest {
    pub count: usize,
    pub rows: Vec<GalleryRow>,
}

/// Writes `<dir>/<actual>/<id>_<predicted>_<confidence>.png` per record and
/// `<dir>/manifest.json` grouping them by actual class, ids ascending.
pub fn emit_gallery(
    records: &[PredictionRecord],
    pool: &ImageSet,
    dir: &Path,
) -> Result<GalleryManifest> {
    let index = pool.id_index();
    let mut rows: Vec<GalleryRow> = (0..NUM_CLASSES as u8)
        .map(|class| GalleryRow {
            class,
            entries: Vec::new(),
        })
        .collect();
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.id);
    for r in &sorted {
        let &pos = index.get(&r.id).ok_or(ReportError::UnknownId(r.id))?;
        let file = format!("{}/{}_{}_{:.4}.png", r.actual, r.id, r.predicted, r.confidence);
        write(&dir.join(&file), &encode_png(pool.image(pos)))?;
        rows[r.actual as usize].entries.push(GalleryEntry {
            id: r.id,
            actual: r.actual,
            predicted: r.predicted,
            confidence: r.confidence,
            file,
        });
    }
    let manifest = GalleryManifest {
        count: sorted.len(),
        rows,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub class: usize,
    pub before: usize,
    pub after: usize,
    pub removed: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub rows: Vec<DistributionRow>,
    pub total: DistributionRow,
}

pub fn distribution(before: &ClassHistogram, after: &ClassHistogram) -> Result<DistributionReport> {
    let mut rows = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let (b, a) = (before.counts[class], after.counts[class]);
        if a > b {
            return Err(ReportError::NegativeRemoval {
                class,
                before: b,
                after: a,
            });
        }
        rows.push(DistributionRow {
            class,
            before: b,
            after: a,
            removed: b - a,
        });
    }
    let total = DistributionRow {
        class: NUM_CLASSES,
        before: rows.iter().map(|r| r.before).sum(),
        after: rows.iter().map(|r| r.after).sum(),
        removed: rows.iter().map(|r| r.removed).sum(),
    };
    Ok(DistributionReport { rows, total })
}

impl DistributionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,before,after,removed\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.class, r.before, r.after, r.removed);
        }
        let t = self.total;
        let _ = writeln!(out, "total,{},{},{}", t.before, t.after, t.removed);
        out
    }

    /// Grouped bar chart, before and after per class.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 320.0;
        const PAD: f64 = 40.0;
        let peak = self.rows.iter().map(|r| r.before).max().unwrap_or(0).max(1) as f64;
        let slot = (W - 2.0 * PAD) / NUM_CLASSES as f64;
        let bar = slot * 0.38;
        let scale = (H - 2.0 * PAD) / peak;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>",
            y = H - PAD,
            x2 = W - PAD
        );
        for r in &self.rows {
            let x = PAD + slot * r.class as f64 + slot * 0.1;
            for (offset, value, fill) in [(0.0, r.before, "#9aa5b1"), (bar, r.after, "#2f6fb0")] {
                let h = value as f64 * scale;
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"{h:.2}\" fill=\"{fill}\"><title>{value}</title></rect>",
                    x + offset,
                    H - PAD - h
                );
            }
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
                x + bar,
                H - PAD + 16.0,
                r.class
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{PAD}\" y=\"20\" font-size=\"12\">before (grey) / after (blue): {} / {}</text>",
            self.total.before, self.total.after
        );
        svg.push_str("</svg>\n");
        svg
    }
}

/// Writes `distribution.csv` and `distribution.svg` under `dir`.
pub fn emit_distribution_report(
    before: &ClassHistogram,
    after: &ClassHistogram,
    dir: &Path,
) -> Result<DistributionReport> {
    let report = distribution(before, after)?;
    write(&dir.join("distribution.csv"), report.to_csv().as_bytes())?;
    write(&dir.join("distribution.svg"), report.to_svg().as_bytes())?;
    Ok(report)
}
