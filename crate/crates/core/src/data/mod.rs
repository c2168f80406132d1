//! Synthetic scenes and the label formats used for training and scoring.

mod culane;
mod dir;
mod ppm;
mod synthetic;
mod tusimple;

pub use culane::{parse_culane_labels, write_culane_labels};
pub use dir::{image_id, read_categories, read_dataset, read_labels, write_dataset, CATEGORY_FILE, LABEL_FILE};
pub use ppm::{read_ppm, write_ppm};
pub use synthetic::{
    draw_lane, generate_dataset, generate_sample, generate_scene, scene_lanes, stroke_coverage, Augmentation, Sample, Scene,
    SyntheticConfig,
};
pub use tusimple::{
    lanes_to_record, parse_tusimple_labels, record_to_lanes, write_tusimple_labels, LabeledImage, TuSimpleRecord,
    ABSENT,
};
