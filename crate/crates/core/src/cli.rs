//! Batch command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::container::Container;
use crate::data::{load_font, load_image, synth_fonts, Manifest, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::imgcore::{read_png, resize, write_png, ColorSpace, RasterImage, DEFAULT_THRESHOLD};
use crate::losses::{GanLoss, SkeGrad};
use crate::metrics::{evaluate, Extractor, MetricReport};
use crate::models::ModelSpec;
use crate::sgce::{expand, to_model_input};
use crate::skeleton::ske;
use crate::tensor::gradcheck::{op_suite, TOLERANCE};
use crate::trainer::{
    diversity_diagnostic, generate, load_checkpoint, resume, save_checkpoint, train, Direction, TrainConfig,
    TrainOutputs, TrainState, UnpairedData,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CHECKPOINT: &str = "final.sgce";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EXPANDED_TENSOR: &str = "input";

/// Desk-scale architecture used when no size flags are given.
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_BASE_WIDTH: usize = 8;
pub const DEFAULT_RESIDUAL_BLOCKS: usize = 2;

#[derive(Parser, Debug)]
#[command(name = "sgce", version, about = "Skeleton-guided glyph translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the skeleton of a glyph as a 1-channel PNG (black foreground).
    Skeletonize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Write the 4-channel model input of a glyph to a tensor container.
    Expand {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Generate the two-font synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train on a dataset directory holding a manifest.
    Train(TrainArgs),
    /// Translate one font's images with a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Font whose images are translated.
        #[arg(long)]
        font: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "x2y")]
        direction: String,
        /// Output directory; files keep their source names.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score translations of a test split against same-named target glyphs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "A")]
        font_x: String,
        #[arg(long, default_value = "B")]
        font_y: String,
        #[arg(long, default_value = "x2y")]
        direction: String,
        #[arg(long, default_value = "flatten-gray-16")]
        extractor: String,
        /// Task label in the report; defaults to `<source>-><target>`.
        #[arg(long)]
        task: Option<String>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mode-collapse diagnostic on a split's translations.
    Diversity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "A")]
        font_x: String,
        #[arg(long, default_value = "B")]
        font_y: String,
        #[arg(long, default_value = "x2y")]
        direction: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient checks of every op and both networks.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Random configurations per op.
        #[arg(long, default_value_t = 5)]
        configs: usize,
        /// Random configurations per network.
        #[arg(long, default_value_t = 2)]
        composite_configs: usize,
        /// Sampled coordinates per network tensor.
        #[arg(long, default_value_t = 3)]
        coords: usize,
    },
    /// Tile rows of images into one comparison PNG.
    Grid {
        /// Each line lists tab-separated PNG paths relative to this file.
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile side in pixels; defaults to the first image's width.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 2)]
        pad: usize,
    },
}

/// Training flags; each overrides the same key in `--config`.
#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Tab-separated `key<TAB>value` lines using the flag names below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    font_x: Option<String>,
    #[arg(long)]
    font_y: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    lambda_ske: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    residual_blocks: Option<usize>,
    #[arg(long)]
    paper_scale: Option<bool>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sgce_enabled: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    gan_loss: Option<String>,
    #[arg(long)]
    ske_grad: Option<String>,
}

const CONFIG_KEYS: [&str; 19] = [
    "font-x",
    "font-y",
    "epochs",
    "batch-size",
    "learning-rate",
    "beta1",
    "beta2",
    "lambda-cyc",
    "lambda-ske",
    "image-size",
    "base-width",
    "residual-blocks",
    "paper-scale",
    "threshold",
    "sgce-enabled",
    "checkpoint-every",
    "max-steps",
    "gan-loss",
    "ske-grad",
];

/// Failures of the command line itself rather than of the data.
#[derive(Debug)]
struct Usage(String);

#[derive(Debug)]
enum Failure {
    Usage(Usage),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_value<T: FromStr>(key: &str, raw: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Usage(format!("invalid value '{raw}' for '{key}': {e}")).into())
}

fn read_config_file(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('\t') else {
            return Err(Usage(format!("{}:{}: expected key<TAB>value", path.display(), i + 1)).into());
        };
        if !CONFIG_KEYS.contains(&key) {
            return Err(Usage(format!(
                "{}:{}: unknown key '{key}' (valid: {})",
                path.display(),
                i + 1,
                CONFIG_KEYS.join(", ")
            ))
            .into());
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Usage(format!("{}:{}: duplicate key '{key}'", path.display(), i + 1)).into());
        }
    }
    Ok(map)
}

/// Flag value, else config-file value, else `None`.
fn pick<T: FromStr>(flag: Option<T>, file: &HashMap<String, String>, key: &str) -> CliResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key).map(|raw| parse_value(key, raw)).transpose(),
    }
}

struct TrainPlan {
    cfg: TrainConfig,
    font_x: String,
    font_y: String,
}

fn train_plan(a: &TrainArgs) -> CliResult<TrainPlan> {
    let file = match &a.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let paper_scale = pick(a.paper_scale, &file, "paper-scale")?.unwrap_or(false);
    let spec = if paper_scale {
        ModelSpec {
            base_width: pick(a.base_width, &file, "base-width")?.unwrap_or(ModelSpec::paper().base_width),
            ..ModelSpec::paper()
        }
    } else {
        ModelSpec::desk(
            pick(a.image_size, &file, "image-size")?.unwrap_or(DEFAULT_IMAGE_SIZE),
            pick(a.base_width, &file, "base-width")?.unwrap_or(DEFAULT_BASE_WIDTH),
            pick(a.residual_blocks, &file, "residual-blocks")?.unwrap_or(DEFAULT_RESIDUAL_BLOCKS),
        )
    };
    let mut cfg = if paper_scale {
        TrainConfig {
            spec,
            ..TrainConfig::paper(a.seed)
        }
    } else {
        TrainConfig::desk(spec, a.seed)
    };
    if let Some(v) = pick(a.epochs, &file, "epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = pick(a.batch_size, &file, "batch-size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = pick(a.learning_rate, &file, "learning-rate")? {
        cfg.adam.learning_rate = v;
    }
    if let Some(v) = pick(a.beta1, &file, "beta1")? {
        cfg.adam.beta1 = v;
    }
    if let Some(v) = pick(a.beta2, &file, "beta2")? {
        cfg.adam.beta2 = v;
    }
    if let Some(v) = pick(a.lambda_cyc, &file, "lambda-cyc")? {
        cfg.weights.cyc = v;
    }
    if let Some(v) = pick(a.lambda_ske, &file, "lambda-ske")? {
        cfg.weights.ske = v;
    }
    if let Some(v) = pick(a.threshold, &file, "threshold")? {
        cfg.threshold = v;
    }
    if let Some(v) = pick(a.sgce_enabled, &file, "sgce-enabled")? {
        cfg.sgce_enabled = v;
    }
    if let Some(v) = pick(a.checkpoint_every, &file, "checkpoint-every")? {
        cfg.checkpoint_every = v;
    }
    cfg.max_steps = pick(a.max_steps, &file, "max-steps")?;
    if let Some(v) = pick::<String>(a.gan_loss.clone(), &file, "gan-loss")? {
        cfg.gan_loss = parse_value::<GanLoss>("gan-loss", &v)?;
    }
    if let Some(v) = pick::<String>(a.ske_grad.clone(), &file, "ske-grad")? {
        cfg.ske_grad = parse_value::<SkeGrad>("ske-grad", &v)?;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(TrainPlan {
        cfg,
        font_x: pick(a.font_x.clone(), &file, "font-x")?.unwrap_or_else(|| "A".into()),
        font_y: pick(a.font_y.clone(), &file, "font-y")?.unwrap_or_else(|| "B".into()),
    })
}

fn read_manifest(data: &Path) -> Result<Manifest> {
    Manifest::read(&data.join(MANIFEST_FILE))
}

fn require_font(manifest: &Manifest, font: &str) -> CliResult<()> {
    if manifest.entries.iter().any(|e| e.font == font) {
        Ok(())
    } else {
        Err(Error::DataEmpty(format!("font '{font}' is not in the manifest")).into())
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let TrainPlan { cfg, font_x, font_y } = train_plan(a)?;
    let manifest = read_manifest(&a.data)?;
    require_font(&manifest, &font_x)?;
    require_font(&manifest, &font_y)?;
    let size = cfg.spec.image_size;
    let data = UnpairedData {
        x: load_font(&a.data, &manifest, &font_x, Split::Train, size)?,
        y: load_font(&a.data, &manifest, &font_y, Split::Train, size)?,
    };
    fs::create_dir_all(&a.out)?;
    let outputs = TrainOutputs {
        log: Some(a.out.join(LOG_FILE)),
        checkpoint_dir: (cfg.checkpoint_every > 0).then(|| a.out.join(CHECKPOINT_DIR)),
    };
    let state: TrainState<f32> = match &a.resume {
        Some(path) => {
            let mut state: TrainState<f32> = load_checkpoint(path)?;
            if state.cfg.seed != a.seed {
                return Err(Usage(format!(
                    "--seed {} differs from the checkpoint's seed {}",
                    a.seed, state.cfg.seed
                ))
                .into());
            }
            state.cfg.epochs = cfg.epochs.max(state.cfg.epochs);
            state.cfg.max_steps = cfg.max_steps;
            resume(state, &data, &outputs)?
        }
        None => train(cfg, &data, &outputs)?,
    };
    let final_path = a.out.join(FINAL_CHECKPOINT);
    save_checkpoint(&state, &final_path)?;
    writeln!(out, "trained {} steps; checkpoint {}", state.step, final_path.display())?;
    Ok(())
}

/// Images of `font` in `split` with their file names.
fn font_images(data: &Path, manifest: &Manifest, font: &str, split: Split, size: usize) -> Result<Vec<(String, RasterImage)>> {
    manifest
        .select(font, split)
        .into_iter()
        .map(|e| {
            let name = e.path.rsplit('/').next().unwrap_or(&e.path).to_string();
            Ok((name, load_image(&data.join(&e.path), size)?))
        })
        .collect()
}

/// Source and target font names for a direction.
fn endpoints<'a>(direction: Direction, font_x: &'a str, font_y: &'a str) -> (&'a str, &'a str) {
    match direction {
        Direction::XToY => (font_x, font_y),
        Direction::YToX => (font_y, font_x),
    }
}

fn parse_flag<T: FromStr<Err = Error>>(flag: &str, raw: &str) -> CliResult<T> {
    raw.parse().map_err(|e: Error| Usage(format!("--{flag}: {e}")).into())
}

/// Translates the source font's test split and pairs each output with the
/// target-font glyph of the same file name.
fn translated_pairs(
    state: &TrainState<f32>,
    data: &Path,
    source: &str,
    target: &str,
    direction: Direction,
) -> CliResult<(Vec<RasterImage>, Vec<RasterImage>)> {
    let manifest = read_manifest(data)?;
    require_font(&manifest, source)?;
    require_font(&manifest, target)?;
    let size = state.cfg.spec.image_size;
    let sources = font_images(data, &manifest, source, Split::Test, size)?;
    let mut targets: HashMap<String, String> = HashMap::new();
    for e in manifest.entries.iter().filter(|e| e.font == target) {
        let name = e.path.rsplit('/').next().unwrap_or(&e.path).to_string();
        targets.insert(name, e.path.clone());
    }
    let mut inputs = vec![];
    let mut reference = vec![];
    for (name, img) in sources {
        if let Some(path) = targets.get(&name) {
            inputs.push(img);
            reference.push(load_image(&data.join(path), size)?);
        }
    }
    if inputs.is_empty() {
        return Err(Error::DataEmpty(format!(
            "no test glyph of '{source}' has a same-named glyph in '{target}'"
        ))
        .into());
    }
    Ok((generate(state, &inputs, direction)?, reference))
}

fn run_command(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Skeletonize { input, out: dest, threshold } => {
            let grid = ske(&read_png(&input)?, threshold)?;
            write_png(&dest, &grid.to_image())?;
            writeln!(out, "skeleton: {} foreground pixels", grid.count_ones())?;
        }
        Command::Expand { input, out: dest, threshold } => {
            let e = expand(&read_png(&input)?, threshold)?;
            let mut c = Container::new();
            c.push_tensor(EXPANDED_TENSOR, &to_model_input::<f32>(&e))?;
            c.save(&dest)?;
            writeln!(out, "expanded {}x{} to 4 channels", e.width(), e.height())?;
        }
        Command::Synth { out: dest, n, size, seed } => {
            let m = synth_fonts(&dest, n, size, seed)?;
            writeln!(out, "wrote {} glyphs and {}", m.entries.len(), MANIFEST_FILE)?;
        }
        Command::Train(a) => cmd_train(&a, out)?,
        Command::Generate {
            checkpoint,
            data,
            font,
            split,
            direction,
            out: dest,
        } => {
            let direction: Direction = parse_flag("direction", &direction)?;
            let split: Split = parse_flag("split", &split)?;
            let state: TrainState<f32> = load_checkpoint(&checkpoint)?;
            let manifest = read_manifest(&data)?;
            require_font(&manifest, &font)?;
            let items = font_images(&data, &manifest, &font, split, state.cfg.spec.image_size)?;
            let images: Vec<RasterImage> = items.iter().map(|(_, img)| img.clone()).collect();
            let outputs = generate(&state, &images, direction)?;
            fs::create_dir_all(&dest)?;
            for ((name, _), img) in items.iter().zip(&outputs) {
                write_png(&dest.join(name), img)?;
            }
            writeln!(out, "generated {} images", outputs.len())?;
        }
        Command::Eval {
            checkpoint,
            data,
            font_x,
            font_y,
            direction,
            extractor,
            task,
            out: dest,
        } => {
            let direction: Direction = parse_flag("direction", &direction)?;
            let extractor: Extractor = parse_flag("extractor", &extractor)?;
            let (source, target) = endpoints(direction, &font_x, &font_y);
            let state: TrainState<f32> = load_checkpoint(&checkpoint)?;
            let (generated, reference) = translated_pairs(&state, &data, source, target, direction)?;
            let task = task.unwrap_or_else(|| format!("{source}->{target}"));
            let report = evaluate(&task, &generated, &reference, &extractor)?;
            let csv = format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row());
            match dest {
                Some(path) => fs::write(path, csv)?,
                None => out.write_all(csv.as_bytes())?,
            }
        }
        Command::Diversity {
            checkpoint,
            data,
            font_x,
            font_y,
            direction,
            split,
        } => {
            let direction: Direction = parse_flag("direction", &direction)?;
            let split: Split = parse_flag("split", &split)?;
            let (source, target) = endpoints(direction, &font_x, &font_y);
            let state: TrainState<f32> = load_checkpoint(&checkpoint)?;
            let manifest = read_manifest(&data)?;
            require_font(&manifest, source)?;
            require_font(&manifest, target)?;
            let size = state.cfg.spec.image_size;
            let inputs: Vec<RasterImage> = font_images(&data, &manifest, source, split, size)?
                .into_iter()
                .map(|(_, img)| img)
                .collect();
            let real = load_font(&data, &manifest, target, split, size)?;
            let r = diversity_diagnostic(&generate(&state, &inputs, direction)?, &real)?;
            writeln!(out, "score\t{}", r.score)?;
            writeln!(out, "ratio\t{}", r.ratio)?;
            writeln!(out, "mean_generated\t{}", r.mean_generated)?;
            writeln!(out, "mean_real\t{}", r.mean_real)?;
            for c in &r.clusters {
                let ids: Vec<String> = c.iter().map(|i| i.to_string()).collect();
                writeln!(out, "cluster\t{}", ids.join(","))?;
            }
        }
        Command::Gradcheck {
            seed,
            configs,
            composite_configs,
            coords,
        } => {
            let mut checks = op_suite(seed, configs)?;
            checks.extend(crate::models::composite_checks(seed, composite_configs, coords)?);
            let mut failed = vec![];
            for c in &checks {
                let status = if c.passed() { "ok" } else { "FAIL" };
                writeln!(
                    out,
                    "{}\t{:.3e}\tconfigs={}\tredrawn={}\t{status}",
                    c.name, c.max_rel_error, c.configs, c.redrawn
                )?;
                if !c.passed() {
                    failed.push(c.name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::NumericalFailure(format!(
                    "relative error at or above {TOLERANCE:e} in: {}",
                    failed.join(", ")
                ))
                .into());
            }
        }
        Command::Grid {
            rows,
            out: dest,
            size,
            pad,
        } => {
            let img = grid_image(&rows, size, pad)?;
            write_png(&dest, &img)?;
            writeln!(out, "grid {}x{}", img.width(), img.height())?;
        }
    }
    Ok(())
}

/// White canvas with one row of tiles per non-empty line of `rows`.
fn grid_image(rows: &Path, size: Option<usize>, pad: usize) -> Result<RasterImage> {
    let text = fs::read_to_string(rows).map_err(|e| Error::UnreadableFile {
        path: rows.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = rows.parent().unwrap_or(Path::new("."));
    let mut tiles: Vec<Vec<RasterImage>> = vec![];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        tiles.push(
            line.split('\t')
                .map(|p| read_png(&base.join(p)))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let first = tiles
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::DataEmpty(format!("{} lists no images", rows.display())))?;
    let side = size.unwrap_or(first.width());
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * side + (cols + 1) * pad;
    let height = tiles.len() * side + (tiles.len() + 1) * pad;
    let mut canvas = vec![1.0; width * height * 3];
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let t = resize(tile, side, side)?;
            let (x0, y0) = (pad + c * (side + pad), pad + r * (side + pad));
            for y in 0..side {
                for x in 0..side {
                    for ch in 0..3 {
                        let v = if t.channels() == 1 { t.get(x, y, 0) } else { t.get(x, y, ch) };
                        canvas[((y0 + y) * width + x0 + x) * 3 + ch] = v;
                    }
                }
            }
        }
    }
    RasterImage::new(width, height, ColorSpace::Rgb, canvas)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, Error::InvalidThreshold(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(rendered.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(rendered.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match run_command(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(Usage(msg))) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = vec![];
        let mut err = vec![];
        let code = run(std::iter::once("sgce").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn missing_flag_is_usage_error() {
        let (code, _, err) = run_capture(&["synth", "--out", "x", "--n", "3"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--size"), "{err}");
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("gradcheck"));
    }

    #[test]
    fn unreadable_input_is_data_error() {
        let (code, _, err) = run_capture(&["skeletonize", "--in", "/nonexistent.png", "--out", "/tmp/x.png"]);
        assert_eq!(code, EXIT_DATA, "{err}");
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.tsv");
        fs::write(&path, "epochs\t3\nbatch-size\t2\nsgce-enabled\tfalse\n").unwrap();
        let args = TrainArgs {
            seed: 1,
            config: Some(path),
            batch_size: Some(5),
            ..Default::default()
        };
        let plan = train_plan(&args).unwrap();
        assert_eq!(plan.cfg.epochs, 3);
        assert_eq!(plan.cfg.batch_size, 5);
        assert!(!plan.cfg.sgce_enabled);
        assert_eq!(plan.cfg.adam.learning_rate, 2e-4);
        assert_eq!(plan.font_x, "A");
    }

    #[test]
    fn bad_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.tsv");
        fs::write(&path, "epoch\t3\n").unwrap();
        let args = TrainArgs {
            seed: 1,
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(train_plan(&args), Err(Failure::Usage(_))));
    }

    #[test]
    fn grid_tiles_rows() {
        let dir = tempfile::tempdir().unwrap();
        let black = RasterImage::filled(4, 4, ColorSpace::Gray, 0.0).unwrap();
        write_png(&dir.path().join("a.png"), &black).unwrap();
        fs::write(dir.path().join("rows.tsv"), "a.png\ta.png\na.png\n").unwrap();
        let g = grid_image(&dir.path().join("rows.tsv"), None, 1).unwrap();
        assert_eq!((g.width(), g.height()), (11, 11));
        assert_eq!(g.get(1, 1, 0), 0.0);
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert_eq!(g.get(6, 6, 0), 1.0);
    }
}
