//! Directory evaluation: per-image region reports and their mean.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::match_stems;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::metrics::RegionReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(flatten)]
    pub report: RegionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Column-wise mean of the per-image rows.
    pub mean: Option<RegionReport>,
    /// Stems missing from at least one directory; they are skipped.
    pub unmatched: Vec<String>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, unmatched: Vec<String>) -> Self {
        let reports: Vec<RegionReport> = rows.iter().map(|r| r.report.clone()).collect();
        Self {
            mean: RegionReport::mean(&reports),
            rows,
            unmatched,
        }
    }

    /// One JSON object per image, then one with id `mean`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in self.all_rows() {
            out.push_str(&serde_json::to_string(&row).expect("plain data"));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for c in RegionReport::COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in self.all_rows() {
            out.push_str(&row.id);
            for v in row.report.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    fn all_rows(&self) -> Vec<EvalRow> {
        let mut rows = self.rows.clone();
        if let Some(mean) = &self.mean {
            rows.push(EvalRow {
                id: "mean".into(),
                report: mean.clone(),
            });
        }
        rows
    }

    pub fn write(&self, jsonl: &Path, csv: &Path) -> Result<()> {
        for (path, text) in [(jsonl, self.to_jsonl()), (csv, self.to_csv())] {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Scores every stem present in all three directories.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mask_dir: &Path) -> Result<EvalReport> {
    let (matched, unmatched) = match_stems(&[pred_dir, gt_dir, mask_dir])?;
    let mut rows = Vec::with_capacity(matched.len());
    for stem in matched {
        let file = format!("{stem}.png");
        let pred = Image::load(pred_dir.join(&file))?;
        let gt = Image::load(gt_dir.join(&file))?;
        let mask = Mask::load(mask_dir.join(&file))?;
        let report = RegionReport::compute(&pred, &gt, &mask)
            .map_err(|e| Error::InvalidParameter(format!("{stem}: {e}")))?;
        rows.push(EvalRow { id: stem, report });
    }
    Ok(EvalReport::from_rows(rows, unmatched))
}
