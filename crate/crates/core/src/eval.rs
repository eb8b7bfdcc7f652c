//! Dice scoring over composite tumor regions and the full / missing-channel
//! evaluation matrix.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{ChannelMask, MultiModalSample, CHANNEL_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{batch_input, decode, encode, ModelParams};
use crate::tensor::{Real, Tensor};

/// Composite evaluation region, a union of canonical classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    WT,
    TC,
    EC,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::EC];

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::EC => "EC",
        }
    }

    pub fn classes(self) -> &'static [u8] {
        match self {
            Region::WT => &[1, 2, 3],
            Region::TC => &[1, 3],
            Region::EC => &[3],
        }
    }

    pub fn contains(self, class: u8) -> bool {
        self.classes().contains(&class)
    }
}

/// Per-pixel argmax over the class axis of `[K][N][H][W]` probabilities, one
/// label map per batch item. Ties go to the lower class index.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Vec<Vec<u8>> {
    let plane = probs.h * probs.w;
    (0..probs.n)
        .map(|n| {
            (0..plane)
                .map(|i| {
                    let mut best = 0usize;
                    let mut best_p = probs.data[n * plane + i];
                    for k in 1..probs.c {
                        let p = probs.data[(k * probs.n + n) * plane + i];
                        if p > best_p {
                            best = k;
                            best_p = p;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Predicted class maps for a batch of samples under `mask`.
pub fn predict_batch<T: Real>(
    params: &ModelParams<T>,
    samples: &[&MultiModalSample],
    mask: &ChannelMask,
) -> Result<Vec<Vec<u8>>> {
    let input = batch_input::<T>(samples)?;
    let enc = encode(params, &input, mask)?;
    let pred = decode(params, &enc, mask)?;
    Ok(argmax_labels(pred.final_probs()))
}

/// Predicted `H×W` class map for one sample under `mask`.
pub fn predict_labels<T: Real>(
    params: &ModelParams<T>,
    sample: &MultiModalSample,
    mask: &ChannelMask,
) -> Result<Vec<u8>> {
    Ok(predict_batch(params, &[sample], mask)?.remove(0))
}

pub fn region_mask(labels: &[u8], region: Region) -> Result<Vec<bool>> {
    labels
        .iter()
        .map(|&l| {
            if l as usize >= NUM_CLASSES {
                Err(Error::format(format!("class index {l} out of range")))
            } else {
                Ok(region.contains(l))
            }
        })
        .collect()
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1, one empty mask scores 0.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "dice of masks with {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// One row of the evaluation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalRow {
    Full,
    Missing(usize),
}

impl EvalRow {
    /// `full` then `missing-<channel>` in channel order.
    pub fn standard(channels: usize) -> Vec<EvalRow> {
        std::iter::once(EvalRow::Full)
            .chain((0..channels).map(EvalRow::Missing))
            .collect()
    }

    pub fn mask(self, channels: usize) -> Result<ChannelMask> {
        match self {
            EvalRow::Full => Ok(ChannelMask::full(channels)),
            EvalRow::Missing(c) => ChannelMask::without(channels, c),
        }
    }

    pub fn name(self) -> String {
        match self {
            EvalRow::Full => "full".into(),
            EvalRow::Missing(c) => format!(
                "missing-{}",
                CHANNEL_NAMES
                    .get(c)
                    .map_or_else(|| c.to_string(), |n| n.to_string())
            ),
        }
    }
}

impl FromStr for EvalRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(EvalRow::Full);
        }
        s.strip_prefix("missing-")
            .and_then(crate::dataio::channel_index)
            .map(EvalRow::Missing)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown mask {s:?}; expected full or missing-{{{}}}",
                    CHANNEL_NAMES.join(",")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceCell {
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub name: String,
    /// In the report's column order.
    pub cells: Vec<DiceCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub columns: Vec<String>,
    pub rows: Vec<DiceRow>,
}

impl DiceReport {
    pub fn row(&self, name: &str) -> Option<&DiceRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn value(&self, row: &str, region: Region) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == region.name())?;
        Some(self.row(row)?.cells.get(col)?.mean)
    }
}

const EVAL_BATCH: usize = 16;

/// Mean slice-level Dice per region for each requested row. Samples are
/// processed in sample-id order, so the result does not depend on the order
/// of `samples`.
pub fn evaluate_rows<T: Real>(
    params: &ModelParams<T>,
    samples: &[MultiModalSample],
    rows: &[EvalRow],
) -> Result<DiceReport> {
    if samples.is_empty() {
        return Err(Error::Eval("test split is empty".into()));
    }
    let c = params.config.channels;
    let masks = rows.iter().map(|r| r.mask(c)).collect::<Result<Vec<_>>>()?;
    let mut ordered: Vec<&MultiModalSample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let mut sums = vec![[0f64; 3]; rows.len()];
    let full = ChannelMask::full(c);
    for chunk in ordered.chunks(EVAL_BATCH) {
        let input = batch_input::<T>(chunk)?;
        // each channel's encoder is independent of the mask, so encode once
        let enc = encode(params, &input, &full)?;
        let gt: Vec<Vec<Vec<bool>>> = chunk
            .iter()
            .map(|s| {
                Region::ALL
                    .iter()
                    .map(|&r| region_mask(&s.labels, r))
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (row, mask) in masks.iter().enumerate() {
            let pred = decode(params, &enc, mask)?;
            for (i, labels) in argmax_labels(pred.final_probs()).iter().enumerate() {
                for (j, &region) in Region::ALL.iter().enumerate() {
                    sums[row][j] += dice(&region_mask(labels, region)?, &gt[i][j])?;
                }
            }
        }
    }

    let count = ordered.len();
    let report = DiceReport {
        columns: Region::ALL.iter().map(|r| r.name().to_string()).collect(),
        rows: rows
            .iter()
            .zip(&sums)
            .map(|(row, s)| DiceRow {
                name: row.name(),
                cells: s
                    .iter()
                    .map(|&sum| DiceCell {
                        mean: sum / count as f64,
                        count,
                    })
                    .collect(),
            })
            .collect(),
    };
    for row in &report.rows {
        if row.cells.iter().any(|c| !c.mean.is_finite()) {
            return Err(Error::Eval(format!("non-finite Dice in row {}", row.name)));
        }
    }
    Ok(report)
}

/// All rows: full input, then each channel missing.
pub fn evaluate_matrix<T: Real>(
    params: &ModelParams<T>,
    samples: &[MultiModalSample],
) -> Result<DiceReport> {
    evaluate_rows(params, samples, &EvalRow::standard(params.config.channels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::config(format!(
                "unknown report format {s:?}; expected text, csv or json"
            ))),
        }
    }
}

pub const REPORT_FOOTER: &str =
    "Dice is the mean over test slices; a slice where both prediction and \
ground truth are empty scores 1, one empty side scores 0.";

/// Text and CSV print values with 3 decimals; JSON keeps full precision so it
/// reads back to an equal report.
pub fn render_report(report: &DiceReport, format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(report)?;
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str("row");
            for c in &report.columns {
                write!(out, ",{c}").unwrap();
            }
            out.push_str(",slices\n");
            for row in &report.rows {
                out.push_str(&row.name);
                for cell in &row.cells {
                    write!(out, ",{:.3}", cell.mean).unwrap();
                }
                writeln!(out, ",{}", row.cells.first().map_or(0, |c| c.count)).unwrap();
            }
        }
        ReportFormat::Text => {
            let width = report
                .rows
                .iter()
                .map(|r| r.name.len())
                .max()
                .unwrap_or(0)
                .max(4);
            write!(out, "{:<width$}", "").unwrap();
            for c in &report.columns {
                write!(out, "  {c:>6}").unwrap();
            }
            out.push_str("  slices\n");
            for row in &report.rows {
                write!(out, "{:<width$}", row.name).unwrap();
                for cell in &row.cells {
                    write!(out, "  {:>6.3}", cell.mean).unwrap();
                }
                writeln!(out, "  {:>6}", row.cells.first().map_or(0, |c| c.count)).unwrap();
            }
            out.push('\n');
            out.push_str(REPORT_FOOTER);
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let probs = Tensor::from_vec(4, 1, 1, 2, vec![0.1, 0.25, 0.2, 0.25, 0.3, 0.25, 0.4, 0.25]);
        assert_eq!(argmax_labels(&probs), vec![vec![3, 0]]);
    }

    #[test]
    fn dice_hand_cases() {
        let p = [true, true, true, true, true, true, false, false, false];
        let g = [true, true, true, false, false, false, true, false, false];
        // |P|=6, |G|=4, overlap 3
        assert_eq!(dice(&p, &g).unwrap(), 0.6);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, false]).unwrap(), 0.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn region_sets() {
        assert!(region_mask(&[0; 5], Region::WT)
            .unwrap()
            .iter()
            .all(|&b| !b));
        for r in Region::ALL {
            assert!(region_mask(&[3; 3], r).unwrap().iter().all(|&b| b));
        }
        assert_eq!(
            region_mask(&[0, 1, 2, 3], Region::TC).unwrap(),
            vec![false, true, false, true]
        );
        assert!(region_mask(&[4], Region::WT).is_err());
    }

    #[test]
    fn row_names_parse_back() {
        for row in EvalRow::standard(4) {
            assert_eq!(row.name().parse::<EvalRow>().unwrap(), row);
        }
        assert!("missing-PD".parse::<EvalRow>().is_err());
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
