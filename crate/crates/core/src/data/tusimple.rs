//! TuSimple label records: one JSON object per line with `lanes` (x lists,
//! `-2` where a lane is absent), `h_samples` (image rows) and `raw_file`.

use serde::{Deserialize, Serialize};

use crate::anchors::{Lane, LaneGrid};
use crate::error::{Error, Result};

/// Marker for an absent point.
pub const ABSENT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuSimpleRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    pub raw_file: String,
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub raw_file: String,
    pub lanes: Vec<Lane>,
}

/// Converts a record onto `grid`. Negative x values mark absent points; each
/// lane's valid range spans its present points, interpolated linearly.
pub fn record_to_lanes(record: &TuSimpleRecord, grid: &LaneGrid, line: Option<usize>) -> Result<Vec<Lane>> {
    let mut lanes = Vec::new();
    for (k, xs) in record.lanes.iter().enumerate() {
        if xs.len() != record.h_samples.len() {
            return Err(Error::parse(
                line,
                format!("lane {k} has {} x values for {} h_samples", xs.len(), record.h_samples.len()),
            ));
        }
        let points: Vec<(f64, f64)> = xs
            .iter()
            .zip(&record.h_samples)
            .filter(|(x, _)| **x >= 0.0)
            .map(|(&x, &y)| (x, y))
            .collect();
        if let Some(lane) = Lane::from_points(&points, grid) {
            lanes.push(lane);
        }
    }
    Ok(lanes)
}

pub fn parse_tusimple_labels(text: &str, grid: &LaneGrid) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TuSimpleRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(Some(i + 1), e.to_string()))?;
        out.push(LabeledImage {
            lanes: record_to_lanes(&record, grid, Some(i + 1))?,
            raw_file: record.raw_file,
        });
    }
    Ok(out)
}

/// Record with `h_samples` at the grid rows, top row first.
pub fn lanes_to_record(raw_file: &str, lanes: &[Lane], grid: &LaneGrid) -> TuSimpleRecord {
    let order: Vec<usize> = (0..grid.n_pts).rev().collect();
    TuSimpleRecord {
        lanes: lanes
            .iter()
            .map(|l| {
                order
                    .iter()
                    .map(|&i| if (l.start..=l.end).contains(&i) { l.xs[i] } else { ABSENT })
                    .collect()
            })
            .collect(),
        h_samples: order.iter().map(|&i| grid.image_y(i)).collect(),
        raw_file: raw_file.to_string(),
    }
}

pub fn write_tusimple_labels(images: &[LabeledImage], grid: &LaneGrid) -> String {
    let mut out = String::new();
    for img in images {
        let record = lanes_to_record(&img.raw_file, &img.lanes, grid);
        out.push_str(&serde_json::to_string(&record).expect("records serialise"));
        out.push('\n');
    }
    out
}
