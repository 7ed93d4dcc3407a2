//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error (usage on stderr), 2 runtime
//! failure reported as one `ERROR:<module>:<message>` line on stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use crate::checkpoint::load_checkpoint;
use crate::dataset::{load_dataset_with_canvas, CommandProvider, DatasetIndex, ProviderRegistry, DEFAULT_CANVAS};
use crate::error::{Error, Result};
use crate::eval::{comparison_grid, evaluate_output, CommandScorer, EvalRow, GridEntry, ScorerRegistry};
use crate::generator::Generator;
use crate::inference::{annotate, crop_valid, prepare_input, proportional_spec, AnnotationSource};
use crate::raster::{BinaryMask, ImageTensor, Rect};
use crate::seam::{seam_retarget_with, AxisOrder};
use crate::trainer::{init_train_state, run_training, training_pair, SampleCache, TrainConfig, CONFIG_KEYS};

/// Default checkpoint directory for `train` and `retarget`.
pub const CKPT_DIR_ENV: &str = "RETARGET_CKPT_DIR";

fn parse_bbox(s: &str) -> std::result::Result<Rect, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("expected LEFT,TOP,WIDTH,HEIGHT: {e}"))?;
    match parts[..] {
        [l, t, w, h] if w > 0 && h > 0 => Ok(Rect::new(l, t, w, h)),
        _ => Err("expected LEFT,TOP,WIDTH,HEIGHT with positive width and height".into()),
    }
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected NAME=VALUE, got '{s}'")),
    }
}

fn seed_arg() -> Arg {
    Arg::new("seed").long("seed").value_name("N").value_parser(value_parser!(u64)).default_value("0").help("random seed")
}

fn size_arg(name: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PIXELS").value_parser(value_parser!(usize)).required(true)
}

fn annotator_arg() -> Arg {
    Arg::new("annotator")
        .long("annotator")
        .value_name("ID=PROGRAM")
        .value_parser(parse_pair)
        .action(ArgAction::Append)
        .help("register an external annotation provider run as `PROGRAM <image> <mask.png>`")
}

fn train_command() -> Command {
    let defaults = TrainConfig::default();
    let mut cmd = Command::new("train")
        .about("Train the generator and discriminator on a dataset")
        .arg(Arg::new("config").long("config").value_name("FILE").help("config file of `key = value` lines"))
        .arg(Arg::new("resume").long("resume").value_name("CKPT").help("continue from a training checkpoint"))
        .arg(
            Arg::new("max-steps")
                .long("max-steps")
                .value_name("N")
                .value_parser(value_parser!(u64))
                .help("stop after this many total steps"),
        )
        .arg(annotator_arg());
    for key in CONFIG_KEYS {
        let mut default = defaults.get(key.key).unwrap_or_default();
        if key.key == "checkpoint_dir" {
            default = format!("${CKPT_DIR_ENV} or {default}");
        }
        cmd = cmd.arg(
            Arg::new(key.key)
                .long(key.key.replace('_', "-"))
                .value_name("VALUE")
                .help(format!("{} [default: {default}]", key.help)),
        );
    }
    cmd
}

fn command() -> Command {
    Command::new("retarget")
        .about("Content-aware image retargeting")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("prepare-data")
                .about("Index a dataset and optionally write synthesized training pairs")
                .arg(Arg::new("data").long("data").value_name("DIR").required(true).help("dataset root"))
                .arg(Arg::new("provider").long("provider").default_value(ProviderRegistry::FILES).help("annotation provider"))
                .arg(annotator_arg())
                .arg(Arg::new("config").long("config").value_name("FILE").help("training config for augmentation settings"))
                .arg(
                    Arg::new("canvas")
                        .long("canvas")
                        .value_parser(value_parser!(usize))
                        .default_value(DEFAULT_CANVAS.to_string())
                        .help("canvas side"),
                )
                .arg(
                    Arg::new("dump")
                        .long("dump")
                        .value_name("N")
                        .value_parser(value_parser!(usize))
                        .default_value("0")
                        .help("write the first N synthesized pairs"),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("pairs").help("directory for --dump"))
                .arg(seed_arg()),
        )
        .subcommand(train_command())
        .subcommand(
            Command::new("retarget")
                .about("Retarget an image with a trained generator")
                .arg(Arg::new("in").long("in").value_name("IMAGE").required(true))
                .arg(Arg::new("out").long("out").value_name("PNG").required(true))
                .arg(size_arg("width"))
                .arg(size_arg("height"))
                .arg(
                    Arg::new("ckpt")
                        .long("ckpt")
                        .value_name("FILE")
                        .help(format!("checkpoint [default: ${CKPT_DIR_ENV}/final.ckpt]")),
                )
                .arg(
                    Arg::new("canvas")
                        .long("canvas")
                        .value_parser(value_parser!(usize))
                        .help("canvas side [default: the training canvas, else 512]"),
                )
                .args(["object-left", "object-top", "object-width", "object-height"].map(|n| {
                    Arg::new(n)
                        .long(n)
                        .value_name("PIXELS")
                        .value_parser(value_parser!(usize))
                        .help("object placement on the output [default: proportional to the input]")
                }))
                .arg(
                    Arg::new("bbox")
                        .long("bbox")
                        .value_name("L,T,W,H")
                        .value_parser(parse_bbox)
                        .conflicts_with("mask-file")
                        .help("object box in the input image"),
                )
                .arg(Arg::new("mask-file").long("mask-file").value_name("PNG").help("object segmentation of the input image"))
                .arg(
                    Arg::new("annotator")
                        .long("annotator")
                        .value_name("PROGRAM")
                        .help("external annotation provider run as `PROGRAM <image> <mask.png>`"),
                )
                .arg(Arg::new("dump-masks").long("dump-masks").value_name("DIR").help("also write the conditioning mask"))
                .arg(seed_arg().help("random seed (inference is deterministic)")),
        )
        .subcommand(
            Command::new("seam-carve")
                .about("Resize with seam carving")
                .arg(Arg::new("in").long("in").value_name("IMAGE").required(true))
                .arg(Arg::new("out").long("out").value_name("PNG").required(true))
                .arg(size_arg("width"))
                .arg(size_arg("height"))
                .arg(
                    Arg::new("order")
                        .long("order")
                        .value_parser(["width-first", "height-first"])
                        .default_value("width-first")
                        .help("axis resized first"),
                )
                .arg(seed_arg().help("random seed (seam carving is deterministic)")),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Write a results table for retargeted images or for synthesized pairs")
                .arg(
                    Arg::new("outputs")
                        .value_name("METHOD=IMAGE")
                        .value_parser(parse_pair)
                        .action(ArgAction::Append)
                        .help("retargeted images to score"),
                )
                .arg(Arg::new("reference").long("reference").value_name("IMAGE").help("ground truth for PSNR/SSIM"))
                .arg(Arg::new("image").long("image").value_name("NAME").help("image name in the table"))
                .arg(Arg::new("data").long("data").value_name("DIR").help("evaluate on synthesized pairs from this dataset"))
                .arg(Arg::new("ckpt").long("ckpt").value_name("FILE").help("generator checkpoint for --data"))
                .arg(
                    Arg::new("pairs")
                        .long("pairs")
                        .value_name("N")
                        .value_parser(value_parser!(usize))
                        .default_value("8")
                        .help("number of synthesized pairs for --data"),
                )
                .arg(Arg::new("provider").long("provider").default_value(ProviderRegistry::FILES).help("annotation provider"))
                .arg(annotator_arg())
                .arg(Arg::new("scorer").long("scorer").default_value("sharpness").help("no-reference scorer"))
                .arg(
                    Arg::new("scorer-cmd")
                        .long("scorer-cmd")
                        .value_name("ID[@VERSION]=PROGRAM")
                        .value_parser(parse_pair)
                        .action(ArgAction::Append)
                        .help("register an external scorer run as `PROGRAM <image.png>`"),
                )
                .arg(Arg::new("out").long("out").value_name("TSV").help("table path [default: stdout]"))
                .arg(seed_arg()),
        )
        .subcommand(
            Command::new("grid")
                .about("Write a labelled side-by-side comparison image")
                .arg(Arg::new("out").long("out").value_name("PNG").required(true))
                .arg(
                    Arg::new("entries")
                        .value_name("LABEL=IMAGE")
                        .value_parser(parse_pair)
                        .action(ArgAction::Append)
                        .required(true),
                )
                .arg(Arg::new("scorer").long("scorer").help("print this no-reference score under each image"))
                .arg(seed_arg().help("random seed (grids are deterministic)")),
        )
}

/// Runs the CLI with process stdout/stderr and returns the exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_cli_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    match dispatch(&matches, out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            let _ = writeln!(err, "ERROR:{}:{msg}", e.module());
            2
        }
    }
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    match m.subcommand() {
        Some(("prepare-data", sub)) => prepare_data(sub, out),
        Some(("train", sub)) => train(sub, out),
        Some(("retarget", sub)) => retarget(sub),
        Some(("seam-carve", sub)) => seam_carve(sub, out),
        Some(("evaluate", sub)) => evaluate(sub, out),
        Some(("grid", sub)) => grid(sub),
        _ => unreachable!("subcommand is required"),
    }
}

fn string<'a>(m: &'a ArgMatches, id: &str) -> Option<&'a String> {
    m.get_one::<String>(id)
}

fn registry(m: &ArgMatches) -> ProviderRegistry {
    let mut reg = ProviderRegistry::new();
    for (id, program) in m.get_many::<(String, String)>("annotator").into_iter().flatten() {
        reg.register(Arc::new(CommandProvider::new(id.clone(), program.clone(), Vec::new())));
    }
    reg
}

fn config_from(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Ok(dir) = std::env::var(CKPT_DIR_ENV) {
        cfg.checkpoint_dir = dir;
    }
    if let Some(path) = string(m, "config") {
        let text = fs::read_to_string(path).map_err(Error::io("cli", path))?;
        cfg.apply_text(&text)?;
    }
    Ok(cfg)
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(Error::io("cli", "<stdout>"))
}

fn prepare_data(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config_from(m)?;
    cfg.dataset_root = string(m, "data").expect("required").clone();
    cfg.provider = string(m, "provider").expect("defaulted").clone();
    cfg.canvas = *m.get_one::<usize>("canvas").expect("defaulted");
    cfg.seed = *m.get_one::<u64>("seed").expect("defaulted");
    let index = load_dataset_with_canvas(Path::new(&cfg.dataset_root), &cfg.provider, &registry(m), cfg.canvas)?;
    write_line(out, &format!("samples\t{}\nskipped\t{}", index.len(), index.skipped))?;
    let dump = (*m.get_one::<usize>("dump").expect("defaulted")).min(index.len());
    if dump == 0 {
        return Ok(());
    }
    let dir = PathBuf::from(string(m, "out").expect("defaulted"));
    fs::create_dir_all(&dir).map_err(Error::io("cli", &dir))?;
    let mut cache = SampleCache::new(0);
    for i in 0..dump {
        let pair = training_pair(&index, &mut cache, i, 0, &cfg)?;
        let name = index.entries[i].id.replace(['/', '\\'], "_");
        pair.model_input.select_channels(0, 3).crop(pair.input_valid)?.save(&dir.join(format!("{name}-input.png")))?;
        pair.model_input.select_channels(3, 3).crop(pair.gt_valid)?.save(&dir.join(format!("{name}-mask.png")))?;
        pair.ground_truth.crop(pair.gt_valid)?.save(&dir.join(format!("{name}-gt.png")))?;
    }
    write_line(out, &format!("dumped\t{dump}\t{}", dir.display()))
}

fn train(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let mut cfg = config_from(m)?;
    for key in CONFIG_KEYS {
        if let Some(v) = string(m, key.key) {
            cfg.set(key.key, v)?;
        }
    }
    let index = load_dataset_with_canvas(Path::new(&cfg.dataset_root), &cfg.provider, &registry(m), cfg.canvas)?;
    let state = match string(m, "resume") {
        Some(path) => load_checkpoint(Path::new(path))?.into_train_state()?,
        None => init_train_state(cfg)?,
    };
    let (path, _) = run_training(&index, state, m.get_one::<u64>("max-steps").copied())?;
    write_line(out, &path.display().to_string())
}

fn default_checkpoint(m: &ArgMatches) -> Result<PathBuf> {
    if let Some(p) = string(m, "ckpt") {
        return Ok(PathBuf::from(p));
    }
    std::env::var(CKPT_DIR_ENV)
        .map(|dir| Path::new(&dir).join("final.ckpt"))
        .map_err(|_| Error::Config(format!("no --ckpt given and {CKPT_DIR_ENV} is not set")))
}

fn load_generator(path: &Path) -> Result<(Generator, Option<usize>)> {
    let ckpt = load_checkpoint(path)?;
    let canvas = ckpt.train.as_ref().map(|t| t.canvas);
    Ok((ckpt.generator, canvas))
}

fn retarget(m: &ArgMatches) -> Result<()> {
    let input = PathBuf::from(string(m, "in").expect("required"));
    let image = ImageTensor::load(&input)?;
    let (generator, trained_canvas) = load_generator(&default_checkpoint(m)?)?;
    let canvas = m.get_one::<usize>("canvas").copied().or(trained_canvas).unwrap_or(DEFAULT_CANVAS);

    let provider;
    let source = if let Some(&bbox) = m.get_one::<Rect>("bbox") {
        AnnotationSource::Bbox(bbox)
    } else if let Some(mask) = string(m, "mask-file") {
        AnnotationSource::Mask(BinaryMask::load(Path::new(mask))?)
    } else if let Some(program) = string(m, "annotator") {
        provider = CommandProvider::new("annotator", program, Vec::new());
        AnnotationSource::Provider(&provider)
    } else {
        return Err(Error::Inference(format!(
            "no object annotation for {}; pass --bbox LEFT,TOP,WIDTH,HEIGHT, --mask-file or --annotator",
            input.display()
        )));
    };
    let ann = annotate(&image, &input, source)?;

    let (w, h) = (*m.get_one::<usize>("width").expect("required"), *m.get_one::<usize>("height").expect("required"));
    let mut spec = proportional_spec(image.dims(), ann.bbox, w, h)?;
    let r = &mut spec.object_rect;
    for (flag, field) in [("object-left", &mut r.left), ("object-top", &mut r.top), ("object-width", &mut r.width), ("object-height", &mut r.height)] {
        if let Some(&v) = m.get_one::<usize>(flag) {
            *field = v;
        }
    }
    let prepared = prepare_input(&image, &ann, &spec, canvas)?;
    if let Some(dir) = string(m, "dump-masks") {
        let dir = Path::new(dir);
        fs::create_dir_all(dir).map_err(Error::io("cli", dir))?;
        crop_valid(&prepared.mask, spec.valid())?.save(&dir.join("mask.png"))?;
    }
    let padded = generator.generate(&prepared.model_input)?;
    crop_valid(&padded, spec.valid())?.save(Path::new(string(m, "out").expect("required")))
}

fn seam_carve(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let image = ImageTensor::load(Path::new(string(m, "in").expect("required")))?;
    let order: AxisOrder = string(m, "order").expect("defaulted").parse()?;
    let (w, h) = (*m.get_one::<usize>("width").expect("required"), *m.get_one::<usize>("height").expect("required"));
    let result = seam_retarget_with(&image, w, h, order)?;
    result.image.save(Path::new(string(m, "out").expect("required")))?;
    write_line(
        out,
        &format!(
            "seams_removed\t{}\nseams_inserted\t{}\nremoved_energy\t{:.6}",
            result.seams_removed, result.seams_inserted, result.removed_energy
        ),
    )
}

fn scorers(m: &ArgMatches) -> ScorerRegistry {
    let mut reg = ScorerRegistry::new();
    for (id, program) in m.get_many::<(String, String)>("scorer-cmd").into_iter().flatten() {
        let (id, version) = id.split_once('@').unwrap_or((id, "0"));
        reg.register(Arc::new(CommandScorer::new(id, version, program.clone(), Vec::new())));
    }
    reg
}

fn stem(path: &str) -> String {
    Path::new(path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

fn evaluate(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let reg = scorers(m);
    let scorer = string(m, "scorer").expect("defaulted");
    let rows = match string(m, "data") {
        Some(data) => evaluate_synthetic(m, Path::new(data), &reg, scorer)?,
        None => {
            let outputs: Vec<&(String, String)> = m.get_many("outputs").into_iter().flatten().collect();
            if outputs.is_empty() {
                return Err(Error::Evaluation("nothing to evaluate: pass METHOD=IMAGE entries or --data".into()));
            }
            let reference = string(m, "reference").map(|p| ImageTensor::load(Path::new(p))).transpose()?;
            let name = string(m, "image").cloned().or_else(|| string(m, "reference").map(|p| stem(p)));
            let mut rows = Vec::new();
            for (method, path) in outputs {
                let img = ImageTensor::load(Path::new(path))?;
                let name = name.clone().unwrap_or_else(|| stem(path));
                rows.push(evaluate_output(&name, method, &img, reference.as_ref(), &reg, scorer)?);
            }
            rows
        }
    };
    let mut table = String::from(EvalRow::TSV_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&r.tsv());
        table.push('\n');
    }
    match string(m, "out") {
        Some(path) => fs::write(path, table).map_err(Error::io("cli", path)),
        None => out.write_all(table.as_bytes()).map_err(Error::io("cli", "<stdout>")),
    }
}

/// Generator, seam carving and plain resizing on synthesized pairs, where
/// the original image is the ground truth.
fn evaluate_synthetic(m: &ArgMatches, data: &Path, reg: &ScorerRegistry, scorer: &str) -> Result<Vec<EvalRow>> {
    let ckpt = string(m, "ckpt").ok_or_else(|| Error::Config("--data needs --ckpt".into()))?;
    let (generator, trained_canvas) = load_generator(Path::new(ckpt))?;
    let mut cfg = TrainConfig { canvas: trained_canvas.unwrap_or(DEFAULT_CANVAS), ..TrainConfig::default() };
    cfg.seed = *m.get_one::<u64>("seed").expect("defaulted");
    let provider = string(m, "provider").expect("defaulted");
    let index: DatasetIndex = load_dataset_with_canvas(data, provider, &registry(m), cfg.canvas)?;
    let mut cache = SampleCache::new(0);
    let mut rows = Vec::new();
    for i in 0..(*m.get_one::<usize>("pairs").expect("defaulted")).min(index.len()) {
        let pair = training_pair(&index, &mut cache, i, 0, &cfg)?;
        let gt = pair.ground_truth.crop(pair.gt_valid)?;
        let (h, w) = gt.dims();
        let distorted = pair.model_input.select_channels(0, 3).crop(pair.input_valid)?;
        let ours = crop_valid(&generator.generate(&pair.model_input)?, pair.gt_valid)?;
        let seam = seam_retarget_with(&distorted, w.max(2), h.max(2), AxisOrder::WidthFirst)?.image;
        let seam = if seam.dims() == gt.dims() { seam } else { seam.resize_bilinear(h, w) };
        let name = &index.entries[i].id;
        for (method, img) in [("ours", ours), ("seam-carving", seam), ("resize", distorted.resize_bilinear(h, w))] {
            rows.push(evaluate_output(name, method, &img, Some(&gt), reg, scorer)?);
        }
    }
    Ok(rows)
}

fn grid(m: &ArgMatches) -> Result<()> {
    let reg = ScorerRegistry::new();
    let mut entries = Vec::new();
    for (label, path) in m.get_many::<(String, String)>("entries").into_iter().flatten() {
        let img = ImageTensor::load(Path::new(path))?;
        let mut entry = GridEntry::new(label.clone(), img);
        if let Some(s) = string(m, "scorer") {
            let score = reg.score_no_reference(&entry.image, s)?.value;
            entry = entry.with_score(score);
        }
        entries.push(entry);
    }
    comparison_grid(&entries, Path::new(string(m, "out").expect("required")))
}
