use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use laneatt::anchors::{filter_anchors, generate_anchors, AnchorSet, LaneGrid};
use laneatt::config::RunConfig;
use laneatt::data::{
    draw_lane, generate_dataset, image_id, parse_culane_labels, parse_tusimple_labels, read_categories,
    read_dataset, read_labels, write_culane_labels, write_dataset, write_ppm, write_tusimple_labels, LabeledImage,
    Sample, LABEL_FILE,
};
use laneatt::eval::{benchmark, culane_score, evenly_spaced_anchors, tusimple_score, BenchConfig, MetricsReport};
use laneatt::model::LaneAtt;
use laneatt::train::{train, EpochStats};
use laneatt::{Error, Result};

/// Anchor-based lane detection on synthetic road scenes.
#[derive(Debug, Parser)]
#[command(name = "laneatt", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for initialisation, shuffling and data generation. Falls back to
    /// the LANEATT_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Tusimple,
    Culane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    /// IoU of thick rasterised lanes.
    Culane,
    /// Per-point accuracy.
    Tusimple,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes with TuSimple and CULane labels.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Index of the first sample.
        #[arg(long, default_value_t = 0)]
        first: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes the checkpoint after every epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset scored after every epoch; defaults to the first 50
        /// training images.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Anchor CSV from `filter-anchors`, used instead of filtering here.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Detect lanes in a dataset and write them as labels.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// A file for TuSimple output, a directory for CULane output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tusimple)]
        format: Format,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare predictions with ground truth and print the metrics.
    Score {
        #[arg(long)]
        pred: PathBuf,
        /// Label file or dataset directory.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tusimple)]
        format: Format,
        /// Defaults to the metric matching `--format`.
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        /// `<id> <category>` lines; defaults to the dataset's categories.txt.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time forward passes and count MACs over anchor counts and input sizes.
    Bench {
        /// Anchor counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [250usize, 500, 1000])]
        anchors: Vec<usize>,
        /// Input sizes as HxW, comma separated; defaults to the configured size.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write PPM overlays: ground truth blue, true positives green, false
    /// positives red.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Tusimple)]
        format: Format,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Keep the anchors most often positive on a dataset and save them as CSV.
    FilterAnchors {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `model.n_anchors`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub const SEED_ENV: &str = "LANEATT_SEED";

fn load_config(args: &ConfigArgs, fallback_file: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let file = args.config.as_deref().or(fallback_file.filter(|p| p.exists()));
    if let Some(path) = file {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.clone(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let seed = match args.seed {
        Some(s) => Some(s),
        None => match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn grid(cfg: &RunConfig) -> LaneGrid {
    cfg.model.lane_grid()
}

fn config_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".cfg");
    PathBuf::from(p)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, first, cfg } => gen_data(&load_config(&cfg, None)?, &out, first, count),
        Command::Train {
            data,
            out,
            epochs,
            val,
            anchors,
            cfg,
        } => {
            let mut cfg = load_config(&cfg, None)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            train_cmd(&cfg, &data, &out, val.as_deref(), anchors.as_deref())
        }
        Command::Infer {
            checkpoint,
            data,
            out,
            format,
            cfg,
        } => infer(&load_config(&cfg, Some(&config_path(&checkpoint)))?, &checkpoint, &data, &out, format),
        Command::Score {
            pred,
            gt,
            format,
            metric,
            categories,
            csv,
            cfg,
        } => {
            let cfg = load_config(&cfg, None)?;
            let report = score(&cfg, &pred, &gt, format, metric, categories.as_deref())?;
            print!("{}", if csv { report.to_csv() } else { report.to_key_values() });
            Ok(())
        }
        Command::Bench {
            anchors,
            sizes,
            reps,
            warmup,
            cfg,
        } => bench(&load_config(&cfg, None)?, &anchors, &sizes, reps, warmup),
        Command::Render {
            data,
            out,
            pred,
            format,
            cfg,
        } => render(&load_config(&cfg, None)?, &data, &out, pred.as_deref(), format),
        Command::FilterAnchors { data, n, out, cfg } => {
            let cfg = load_config(&cfg, None)?;
            let samples = read_labels(&data, &grid(&cfg))?;
            let n = n.or(cfg.n_anchors).ok_or_else(|| Error::config("model.n_anchors", "no anchor count given"))?;
            let set = filtered_anchors(&cfg, &samples, Some(n))?;
            fs::write(&out, set.to_csv())?;
            println!("kept {} anchors -> {}", set.len(), out.display());
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, first: u64, count: usize) -> Result<()> {
    let samples = generate_dataset(&cfg.data, first, count)?;
    write_dataset(out, &samples, &cfg.data.grid())?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn filtered_anchors(cfg: &RunConfig, labels: &[LabeledImage], n: Option<usize>) -> Result<AnchorSet> {
    let full = generate_anchors(&cfg.anchors, grid(cfg))?;
    match n {
        Some(n) => {
            let lanes: Vec<_> = labels.iter().map(|l| l.lanes.clone()).collect();
            filter_anchors(&full, &lanes, n, cfg.train.pos_threshold)
        }
        None => Ok(full),
    }
}

fn labeled(samples: &[Sample]) -> Vec<LabeledImage> {
    samples
        .iter()
        .map(|s| LabeledImage {
            raw_file: s.source_id.clone(),
            lanes: s.lanes.clone(),
        })
        .collect()
}

fn predict(model: &LaneAtt, cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<LabeledImage>> {
    samples
        .iter()
        .map(|s| {
            Ok(LabeledImage {
                raw_file: s.source_id.clone(),
                lanes: model.detect(s.image.clone(), &cfg.nms)?,
            })
        })
        .collect()
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, val: Option<&Path>, anchor_file: Option<&Path>) -> Result<()> {
    let g = grid(cfg);
    let samples = read_dataset(data, &g)?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let anchors = match anchor_file {
        Some(p) => AnchorSet::from_csv(&fs::read_to_string(p)?, g, cfg.anchors.clone())?,
        None => filtered_anchors(cfg, &labeled(&samples), cfg.n_anchors)?,
    };
    let val_samples = match val {
        Some(dir) => read_dataset(dir, &g)?,
        None => samples.iter().take(50).cloned().collect(),
    };
    let val_gt = labeled(&val_samples);
    let culane = cfg.eval.culane(g.height, g.width);

    let mut model = LaneAtt::new(cfg.model.clone(), anchors, cfg.seed)?;
    fs::write(config_path(out), cfg.to_text())?;
    model.save(out)?;
    println!("model: {} anchors, {} parameters", model.n_anchors(), model.param_count());

    let mut failure = None;
    train(&mut model, &samples, &cfg.train, |m: &LaneAtt, s: &EpochStats| {
        let outcome = m.save(out).and_then(|_| {
            let preds = predict(m, cfg, &val_samples)?;
            culane_score(&preds, &val_gt, &culane, None)
        });
        match outcome {
            Ok((report, _)) => {
                println!(
                    "epoch {} loss {:.4} cls {:.4} reg {:.4} f1 {:.4} time {:.1}s",
                    s.epoch, s.loss, s.classification, s.regression, report.f1, s.seconds
                );
                true
            }
            Err(e) => {
                failure = Some(e);
                false
            }
        }
    })?;
    failure.map_or(Ok(()), Err)
}

fn infer(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, format: Format) -> Result<()> {
    let g = grid(cfg);
    let model = LaneAtt::load(cfg.model.clone(), checkpoint)?;
    let labels = read_labels(data, &g)?;
    let mut preds = Vec::with_capacity(labels.len());
    for l in &labels {
        let image = laneatt::data::read_ppm(fs::File::open(data.join(&l.raw_file))?)?;
        preds.push(LabeledImage {
            raw_file: l.raw_file.clone(),
            lanes: model.detect(image, &cfg.nms)?,
        });
    }
    match format {
        Format::Tusimple => fs::write(out, write_tusimple_labels(&preds, &g))?,
        Format::Culane => {
            fs::create_dir_all(out)?;
            for p in &preds {
                fs::write(out.join(format!("{}.lines.txt", image_id(&p.raw_file))), write_culane_labels(&p.lanes, &g))?;
            }
        }
    }
    println!("wrote predictions for {} images to {}", preds.len(), out.display());
    Ok(())
}

/// Label file of a TuSimple path: the file itself or `<dir>/label.json`.
fn tusimple_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(LABEL_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Directory holding the `.lines.txt` files of a CULane path.
fn culane_dir(path: &Path) -> PathBuf {
    let nested = path.join("images");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn read_culane_dir(dir: &Path, ids: &[String], g: &LaneGrid, required: bool) -> Result<Vec<LabeledImage>> {
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.lines.txt"));
            let lanes = if path.exists() {
                parse_culane_labels(&fs::read_to_string(&path)?, g)?
            } else if required {
                return Err(Error::ImageMismatch(format!("missing {}", path.display())));
            } else {
                Vec::new()
            };
            Ok(LabeledImage {
                raw_file: id.clone(),
                lanes,
            })
        })
        .collect()
}

fn score(
    cfg: &RunConfig,
    pred: &Path,
    gt: &Path,
    format: Format,
    metric: Option<Metric>,
    categories: Option<&Path>,
) -> Result<MetricsReport> {
    let g = grid(cfg);
    let (preds, gts) = match format {
        Format::Tusimple => {
            let gts = parse_tusimple_labels(&fs::read_to_string(tusimple_file(gt))?, &g)?;
            let preds = parse_tusimple_labels(&fs::read_to_string(tusimple_file(pred))?, &g)?;
            (preds, gts)
        }
        Format::Culane => {
            let dir = culane_dir(gt);
            let mut ids: Vec<String> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".lines.txt")).map(String::from))
                .collect();
            ids.sort();
            let gts = read_culane_dir(&dir, &ids, &g, true)?;
            let preds = read_culane_dir(&culane_dir(pred), &ids, &g, false)?;
            (preds, gts)
        }
    };
    let tags: HashMap<String, String> = match categories {
        Some(path) => parse_category_file(path)?,
        None if gt.is_dir() => read_categories(gt)?,
        None => HashMap::new(),
    };
    let metric = metric.unwrap_or(match format {
        Format::Tusimple => Metric::Tusimple,
        Format::Culane => Metric::Culane,
    });
    match metric {
        Metric::Tusimple => tusimple_score(&preds, &gts, &cfg.eval.tusimple()),
        Metric::Culane => {
            let cats: Option<Vec<String>> = (!tags.is_empty()).then(|| {
                gts.iter()
                    .map(|l| tags.get(&image_id(&l.raw_file)).cloned().unwrap_or_else(|| "untagged".into()))
                    .collect()
            });
            culane_score(&preds, &gts, &cfg.eval.culane(g.height, g.width), cats.as_deref()).map(|r| r.0)
        }
    }
}

fn parse_category_file(path: &Path) -> Result<HashMap<String, String>> {
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

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("bench.sizes", format!("expected HxW, got `{s}`"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn bench(cfg: &RunConfig, anchors: &[usize], sizes: &[String], reps: usize, warmup: usize) -> Result<()> {
    let sizes = if sizes.is_empty() {
        vec![(cfg.model.backbone.input_height, cfg.model.backbone.input_width)]
    } else {
        sizes.iter().map(|s| parse_size(s)).collect::<Result<_>>()?
    };
    let bench_cfg = BenchConfig {
        warmup,
        repetitions: reps,
        nms: cfg.nms,
    };
    println!("height,width,n_anchors,macs,fps,fps_spread");
    for &(h, w) in &sizes {
        let mut model_cfg = cfg.model.clone();
        model_cfg.backbone.input_height = h;
        model_cfg.backbone.input_width = w;
        model_cfg.validate()?;
        for &n in anchors {
            let model = LaneAtt::new(model_cfg.clone(), evenly_spaced_anchors(&model_cfg, n)?, cfg.seed)?;
            let r = benchmark(&model, &bench_cfg)?;
            println!("{h},{w},{n},{},{:.3},{:.3}", r.macs, r.fps, r.fps_spread);
        }
    }
    Ok(())
}

const BLUE: [f64; 3] = [0.1, 0.3, 1.0];
const GREEN: [f64; 3] = [0.1, 0.9, 0.2];
const RED: [f64; 3] = [1.0, 0.1, 0.1];

fn render(cfg: &RunConfig, data: &Path, out: &Path, pred: Option<&Path>, format: Format) -> Result<()> {
    let g = grid(cfg);
    let samples = read_dataset(data, &g)?;
    let gts = labeled(&samples);
    let ids: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
    let preds = match (pred, format) {
        (None, _) => None,
        (Some(p), Format::Tusimple) => {
            let parsed = parse_tusimple_labels(&fs::read_to_string(tusimple_file(p))?, &g)?;
            let by_id: HashMap<String, LabeledImage> =
                parsed.into_iter().map(|l| (image_id(&l.raw_file), l)).collect();
            Some(
                ids.iter()
                    .map(|id| LabeledImage {
                        raw_file: id.clone(),
                        lanes: by_id.get(id).map(|l| l.lanes.clone()).unwrap_or_default(),
                    })
                    .collect::<Vec<_>>(),
            )
        }
        (Some(p), Format::Culane) => Some(read_culane_dir(&culane_dir(p), &ids, &g, false)?),
    };
    let matches = match &preds {
        Some(p) => Some(culane_score(p, &gts, &cfg.eval.culane(g.height, g.width), None)?.1),
        None => None,
    };
    fs::create_dir_all(out)?;
    for (k, s) in samples.iter().enumerate() {
        let mut image = s.image.clone();
        for lane in &s.lanes {
            draw_lane(&mut image, lane, &g, BLUE, 2.0);
        }
        if let (Some(p), Some(m)) = (&preds, &matches) {
            for (i, lane) in p[k].lanes.iter().enumerate() {
                let tp = m[k].pairs.iter().any(|&(pi, _, _)| pi == i);
                draw_lane(&mut image, lane, &g, if tp { GREEN } else { RED }, 2.0);
            }
        }
        write_ppm(fs::File::create(out.join(format!("{}.ppm", s.source_id)))?, &image)?;
    }
    println!("rendered {} overlays to {}", samples.len(), out.display());
    Ok(())
}
