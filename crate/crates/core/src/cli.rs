//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then a `key = value`
//! config file (`--config`), then explicit flags. Unknown config keys are
//! fatal. Every run directory receives a `config.snapshot` that can be fed
//! back through `--config` to reproduce the run.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
//! Failures print one line to stderr: `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Component, Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    decode_labels, encode_labels, generate_synthetic, load_dataset, write_dataset, LabeledImage, Palette, SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    compare_strategies, export_attention, iou_report, predict_rgb, render_table, report_csv, write_scores,
    ConfusionMatrix,
};
use crate::fusion::StrategyId;
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::trainer::{train, TrainConfig};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "bimsa", version, about = "Multi-scale attention fusion for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Seed for data generation, initialization and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scale-confusable dataset.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Train one strategy; writes metrics.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Dataset split directory (contains seq*/Images and seq*/Labels).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tiled prediction of one image or a directory of images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write raw score dumps (`.scores`).
        #[arg(long)]
        dump_scores: bool,
    },
    /// mIoU of predicted label PNGs (`--pred/--truth`) or of a checkpoint on
    /// a dataset (`--checkpoint/--data`).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "truth")]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate several strategies under one shared config.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation split; defaults to the held-out part of `--data`.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export attention maps and statistics for one image.
    AttnExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    /// single|avg|max|msd-concat|hmsa-score|fhmsa-feature|bimsa
    #[arg(long)]
    strategy: Option<String>,
    /// Inference scales, e.g. `0.5,1,2`.
    #[arg(long)]
    scales: Option<String>,
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: StrategyId,
    pub seed: u64,
    pub palette: Option<PathBuf>,
    pub n_images: usize,
    pub canvas: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            strategy: StrategyId::Bimsa,
            seed: 0,
            palette: None,
            n_images: 200,
            canvas: 256,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s)).collect()
}

fn parse_pair<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    match parse_list::<T>(key, v)?.as_slice() {
        [a] => Ok((*a, *a)),
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(key, "expected one or two values")),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "strategy",
        "seed",
        "palette",
        "n_images",
        "canvas",
        "n_class",
        "d",
        "trunk_width",
        "head_width",
        "aspp_rates",
        "output_stride",
        "train_scales",
        "infer_scales",
        "epochs",
        "batch_size",
        "momentum",
        "weight_decay",
        "lr",
        "poly_power",
        "aux_weight",
        "val_fraction",
        "tile",
        "overlap",
        "crop",
        "scale_range",
        "preset",
        "train_seed",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "strategy" => self.strategy = v.parse().map_err(|_| Error::config(key, format!("unknown strategy `{v}`")))?,
            "seed" => {
                self.seed = parse_num(key, v)?;
                t.seed = self.seed;
            }
            "train_seed" => t.seed = parse_num(key, v)?,
            "palette" => self.palette = Some(PathBuf::from(v)),
            "n_images" => self.n_images = parse_num(key, v)?,
            "canvas" => self.canvas = parse_num(key, v)?,
            "n_class" => m.n_class = parse_num(key, v)?,
            "d" => m.d = parse_num(key, v)?,
            "trunk_width" => m.trunk_width = parse_num(key, v)?,
            "head_width" => m.head_width = parse_num(key, v)?,
            "aspp_rates" => m.aspp_rates = parse_list(key, v)?,
            "output_stride" => m.output_stride = parse_num(key, v)?,
            "train_scales" => m.train_scales = parse_list(key, v)?,
            "infer_scales" => m.infer_scales = parse_list(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "momentum" => t.momentum = parse_num(key, v)?,
            "weight_decay" => t.weight_decay = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "poly_power" => t.poly_power = parse_num(key, v)?,
            "aux_weight" => t.aux_weight = parse_num(key, v)?,
            "val_fraction" => t.val_fraction = parse_num(key, v)?,
            "tile" => t.tile = parse_num(key, v)?,
            "overlap" => t.overlap = parse_num(key, v)?,
            "crop" => t.augment.crop = parse_pair(key, v)?,
            "scale_range" => t.augment.scale_range = parse_pair(key, v)?,
            "preset" => match v {
                "desk" => *t = TrainConfig { seed: t.seed, ..TrainConfig::default() },
                "full" => *t = TrainConfig { seed: t.seed, ..TrainConfig::full_scale() },
                _ => return Err(Error::config(key, "expected `desk` or `full`")),
            },
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a config file. Lines are `key = value`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.n_images == 0 {
            return Err(Error::config("n_images", "must be positive"));
        }
        Ok(())
    }

    /// Resolved settings in config-file syntax (without `preset`, which is
    /// already expanded).
    pub fn snapshot(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("strategy", self.strategy.to_string());
        kv("seed", self.seed.to_string());
        kv("train_seed", t.seed.to_string());
        if let Some(p) = &self.palette {
            kv("palette", p.display().to_string());
        }
        kv("n_images", self.n_images.to_string());
        kv("canvas", self.canvas.to_string());
        kv("n_class", m.n_class.to_string());
        kv("d", m.d.to_string());
        kv("trunk_width", m.trunk_width.to_string());
        kv("head_width", m.head_width.to_string());
        kv("aspp_rates", join(&m.aspp_rates));
        kv("output_stride", m.output_stride.to_string());
        kv("train_scales", join(&m.train_scales));
        kv("infer_scales", join(&m.infer_scales));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("lr", t.lr.to_string());
        kv("poly_power", t.poly_power.to_string());
        kv("aux_weight", t.aux_weight.to_string());
        kv("val_fraction", t.val_fraction.to_string());
        kv("tile", t.tile.to_string());
        kv("overlap", t.overlap.to_string());
        kv("crop", format!("{},{}", t.augment.crop.0, t.augment.crop.1));
        kv("scale_range", format!("{},{}", t.augment.scale_range.0, t.augment.scale_range.1));
        s
    }

    pub fn load_palette(&self) -> Result<Palette> {
        match &self.palette {
            Some(p) => Palette::load(p),
            None => Ok(Palette::uavid()),
        }
    }

    fn resolve(common: &Common, model: Option<&ModelFlags>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &common.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = common.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(f) = model {
            if let Some(s) = &f.strategy {
                cfg.set("strategy", s)?;
            }
            if let Some(s) = &f.scales {
                cfg.set("infer_scales", s)?;
            }
        }
        Ok(cfg)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Tensor(_) => "tensor",
        Error::Io { .. } => "io",
        Error::Image { .. } => "image",
        Error::Config { .. } => "config",
        Error::Contract(_) => "contract",
        Error::UnknownColor { .. } => "unknown-color",
        Error::LabelOutOfRange { .. } => "label-range",
        Error::Orphans(_) => "orphans",
        Error::Checkpoint(_) => "checkpoint",
        Error::UnknownStrategy(_) => "config",
        Error::Diverged { .. } => "diverged",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::UnknownStrategy(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Single-line rendering used on stderr.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", error_kind(e))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| Error::config("out", "--out is required"))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| Error::config(key, format!("--{key} is required")))
}

/// All `.png` files below `root`, sorted, as paths relative to `root`.
fn png_files(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Drops a dataset's `Images`/`Labels` directory level so predictions and
/// ground truth line up by sequence and frame.
fn sample_key(rel: &Path) -> PathBuf {
    rel.components()
        .filter(|c| !matches!(c, Component::Normal(n) if *n == "Images" || *n == "Labels"))
        .collect()
}

fn under(rel: &Path, part: &str) -> bool {
    rel.components().any(|c| matches!(c, Component::Normal(n) if n.to_str() == Some(part)))
}

fn read_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8())
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_data(path: &Option<PathBuf>, palette: &Palette) -> Result<Vec<LabeledImage>> {
    let dir = required(path, "data")?;
    load_dataset(&dir, palette)
}

fn checked_model(cfg: &RunConfig, palette: &Palette) -> Result<()> {
    cfg.validate()?;
    if palette.n_class() != cfg.model.n_class {
        return Err(Error::config(
            "n_class",
            format!("palette has {} classes, config has {}", palette.n_class(), cfg.model.n_class),
        ));
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthGen { common, n_images } => {
            let mut cfg = RunConfig::resolve(&common, None)?;
            if let Some(n) = n_images {
                cfg.set("n_images", &n.to_string())?;
            }
            cfg.validate()?;
            let out = out_dir(&common)?;
            let palette = cfg.load_palette()?;
            let mut spec = SynthSpec::scale_confusable(cfg.seed, cfg.n_images);
            spec.canvas = (cfg.canvas, cfg.canvas);
            let samples = generate_synthetic(&spec)?;
            write_dataset(&out.join("train"), &samples, &palette)?;
            // Held-out set from a derived stream, a quarter of the size.
            let mut test = SynthSpec::scale_confusable(cfg.seed ^ 0x7e57_7e57, cfg.n_images.div_ceil(4));
            test.canvas = spec.canvas;
            write_dataset(&out.join("test"), &generate_synthetic(&test)?, &palette)?;
            write(&out.join("palette.txt"), &palette.to_text())?;
            write(&out.join("config.snapshot"), &cfg.snapshot())?;
            println!("wrote {} train / {} test images to {}", samples.len(), test.n_images, out.display());
        }
        Command::Train { common, model, data, epochs } => {
            let mut cfg = RunConfig::resolve(&common, Some(&model))?;
            if let Some(e) = epochs {
                cfg.set("epochs", &e.to_string())?;
            }
            let palette = cfg.load_palette()?;
            checked_model(&cfg, &palette)?;
            let out = out_dir(&common)?;
            write(&out.join("config.snapshot"), &cfg.snapshot())?;
            let samples = load_data(&data, &palette)?;
            let net = Model::new(&cfg.model, cfg.strategy, cfg.train.seed)?;
            let report = train(&net, &samples, &cfg.train, Some(&out))?;
            save_checkpoint(&net, &out.join("ckpt-last"))?;
            println!(
                "best mIoU {:.4} at epoch {} ({})",
                report.best_miou,
                report.best_epoch,
                out.join("metrics.csv").display()
            );
        }
        Command::Predict {
            common,
            checkpoint,
            input,
            dump_scores,
        } => {
            let cfg = RunConfig::resolve(&common, None)?;
            cfg.validate()?;
            let out = out_dir(&common)?;
            let palette = cfg.load_palette()?;
            let net = load_checkpoint(&checkpoint, None)?;
            let files: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
                png_files(&input)?
                    .into_iter()
                    .filter(|rel| !under(rel, "Labels"))
                    .map(|rel| (input.join(&rel), sample_key(&rel)))
                    .collect()
            } else {
                let name = input.file_name().map(PathBuf::from).unwrap_or_else(|| "pred.png".into());
                vec![(input.clone(), name)]
            };
            for (src, rel) in &files {
                let img = read_rgb(src)?;
                let p = predict_rgb(&net, &img, cfg.train.tile, cfg.train.overlap)?;
                let dst = out.join(rel).with_extension("png");
                save_png(&encode_labels(&p.labels, &palette)?, &dst)?;
                if dump_scores {
                    write_scores(&dst.with_extension("scores"), &p)?;
                }
            }
            println!("predicted {} images into {}", files.len(), out.display());
        }
        Command::Evaluate {
            common,
            pred,
            truth,
            checkpoint,
            data,
        } => {
            let cfg = RunConfig::resolve(&common, None)?;
            cfg.validate()?;
            let palette = cfg.load_palette()?;
            let (name, report) = if let Some(pred) = pred {
                let truth = required(&truth, "truth")?;
                let mut cm = ConfusionMatrix::new(palette.n_class());
                let mut truth_files = png_files(&truth)?;
                truth_files.retain(|rel| !under(rel, "Images"));
                if truth_files.is_empty() {
                    return Err(Error::config("truth", "no label images found"));
                }
                for rel in truth_files {
                    let key = sample_key(&rel);
                    let candidates = [pred.join(&rel), pred.join(&key)];
                    let p = candidates
                        .iter()
                        .find(|c| c.is_file())
                        .ok_or_else(|| Error::Orphans(vec![key.display().to_string()]))?;
                    let t_path = truth.join(&rel);
                    let t = decode_labels(&read_rgb(&t_path)?, &palette, &t_path)?;
                    let pl = decode_labels(&read_rgb(p)?, &palette, p)?;
                    cm.accumulate(&pl, &t)?;
                }
                ("prediction".to_string(), iou_report(&cm, &palette.names()))
            } else {
                let ckpt = checkpoint.ok_or_else(|| Error::config("checkpoint", "need --pred/--truth or --checkpoint/--data"))?;
                let net = load_checkpoint(&ckpt, None)?;
                let samples = load_data(&data, &palette)?;
                let refs: Vec<&LabeledImage> = samples.iter().collect();
                let mut r = crate::eval::evaluate(&net, &refs, cfg.train.tile, cfg.train.overlap)?;
                r.class_names = palette.names();
                (net.strategy().to_string(), r)
            };
            let rows = [(name, &report)];
            print!("{}", render_table(&rows));
            println!("miou={:.6}", report.miou);
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write(&dir.join("report.csv"), &report_csv(&rows))?;
            }
        }
        Command::Compare {
            common,
            model,
            strategies,
            data,
            test,
            epochs,
        } => {
            let mut cfg = RunConfig::resolve(&common, Some(&model))?;
            if let Some(e) = epochs {
                cfg.set("epochs", &e.to_string())?;
            }
            let palette = cfg.load_palette()?;
            checked_model(&cfg, &palette)?;
            let ids = strategies
                .iter()
                .map(|s| s.parse::<StrategyId>().map_err(|_| Error::config("strategies", format!("unknown strategy `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let out = out_dir(&common)?;
            write(&out.join("config.snapshot"), &cfg.snapshot())?;
            let samples = load_data(&data, &palette)?;
            let test_samples = test.as_deref().map(|t| load_dataset(t, &palette)).transpose()?;
            let mut cmp = compare_strategies(&samples, test_samples.as_deref(), &ids, &cfg.model, &cfg.train, Some(&out))?;
            for r in &mut cmp.rows {
                r.report.class_names = palette.names();
            }
            write(&out.join("comparison.csv"), &cmp.csv())?;
            write(&out.join("comparison.txt"), &cmp.table())?;
            print!("{}", cmp.table());
        }
        Command::AttnExport { common, checkpoint, input } => {
            let cfg = RunConfig::resolve(&common, None)?;
            cfg.validate()?;
            let out = out_dir(&common)?;
            let net = load_checkpoint(&checkpoint, None)?;
            let dump = export_attention(&net, &read_rgb(&input)?, Some(&out))?;
            for (p, s, m) in dump.scale_means() {
                println!("{} scale {s}: mean {m:.4}", crate::eval::pathway_name(p));
            }
            println!("wrote {} maps to {}", dump.maps.len(), out.display());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
