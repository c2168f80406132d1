//! On-disk dataset layout:
//!
//! ```text
//! <dir>/label.json              TuSimple records, raw_file = images/<id>.ppm
//! <dir>/images/<id>.ppm
//! <dir>/images/<id>.lines.txt   CULane labels of the same lanes
//! <dir>/categories.txt          `<id> <category>` per line
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{parse_tusimple_labels, read_ppm, write_culane_labels, write_ppm, write_tusimple_labels, LabeledImage, Sample};
use crate::anchors::LaneGrid;
use crate::error::{Error, Result};

pub const LABEL_FILE: &str = "label.json";
pub const CATEGORY_FILE: &str = "categories.txt";

pub fn write_dataset(dir: &Path, samples: &[Sample], grid: &LaneGrid) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut labels = Vec::with_capacity(samples.len());
    let mut categories = String::new();
    for s in samples {
        let raw_file = format!("images/{}.ppm", s.source_id);
        write_ppm(fs::File::create(dir.join(&raw_file))?, &s.image)?;
        fs::write(
            dir.join(format!("images/{}.lines.txt", s.source_id)),
            write_culane_labels(&s.lanes, grid),
        )?;
        categories.push_str(&format!("{} {}\n", s.source_id, s.category));
        labels.push(LabeledImage {
            raw_file,
            lanes: s.lanes.clone(),
        });
    }
    fs::write(dir.join(LABEL_FILE), write_tusimple_labels(&labels, grid))?;
    fs::write(dir.join(CATEGORY_FILE), categories)?;
    Ok(())
}

/// Image id of a `raw_file` path: its file name without extension.
pub fn image_id(raw_file: &str) -> String {
    Path::new(raw_file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| raw_file.to_string())
}

/// Ground-truth labels only, in file order.
pub fn read_labels(dir: &Path, grid: &LaneGrid) -> Result<Vec<LabeledImage>> {
    parse_tusimple_labels(&fs::read_to_string(dir.join(LABEL_FILE))?, grid)
}

pub fn read_categories(dir: &Path) -> Result<HashMap<String, String>> {
    let path = dir.join(CATEGORY_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let mut out = HashMap::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, cat) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(Some(i + 1), "expected `<id> <category>`"))?;
        out.insert(id.to_string(), cat.trim().to_string());
    }
    Ok(out)
}

/// Loads images and labels; image sizes must match `grid`.
pub fn read_dataset(dir: &Path, grid: &LaneGrid) -> Result<Vec<Sample>> {
    let categories = read_categories(dir)?;
    read_labels(dir, grid)?
        .into_iter()
        .map(|l| {
            let image = read_ppm(fs::File::open(dir.join(&l.raw_file))?)?;
            if image.shape() != [3, grid.height, grid.width] {
                return Err(Error::ImageMismatch(format!(
                    "`{}` is {:?}, expected [3, {}, {}]",
                    l.raw_file,
                    image.shape(),
                    grid.height,
                    grid.width
                )));
            }
            let id = image_id(&l.raw_file);
            Ok(Sample {
                image,
                lanes: l.lanes,
                category: categories.get(&id).cloned().unwrap_or_else(|| "normal".into()),
                source_id: id,
            })
        })
        .collect()
}
