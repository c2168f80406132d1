//! CULane `.lines.txt` labels: one lane per line as space-separated `x y`
//! pairs, bottom point first.

use crate::anchors::{Lane, LaneGrid};
use crate::error::{Error, Result};

pub fn parse_culane_labels(text: &str, grid: &LaneGrid) -> Result<Vec<Lane>> {
    let mut lanes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() % 2 != 0 {
            return Err(Error::parse(Some(i + 1), format!("odd token count {}", tokens.len())));
        }
        let values = tokens
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::parse(Some(i + 1), e.to_string()))?;
        let points: Vec<(f64, f64)> = values.chunks(2).map(|p| (p[0], p[1])).collect();
        if let Some(lane) = Lane::from_points(&points, grid) {
            lanes.push(lane);
        }
    }
    Ok(lanes)
}

pub fn write_culane_labels(lanes: &[Lane], grid: &LaneGrid) -> String {
    let mut out = String::new();
    for lane in lanes {
        let pairs: Vec<String> = lane.image_points(grid).map(|(x, y)| format!("{x} {y}")).collect();
        out.push_str(&pairs.join(" "));
        out.push('\n');
    }
    out
}
