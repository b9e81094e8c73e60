//! The `pix2pix` command line: `synth`, `train`, `generate`, `eval` and
//! `selfcheck`.
//!
//! `synth` and `train` accept every config key as a `--key value` flag (see
//! [`config`]); flags override the file given with `--config`.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Arg, ArgAction, ArgGroup, ArgMatches, Command};

use crate::error::{Error, Result};
use crate::imgio::{encode_png, encode_png_pixels, join_combined, load_combined, load_rgb, make_triptych, PairOrder};
use crate::ndtensor::Tensor4;
use crate::netgen::{generate, GeneratorSpec};
use crate::pipeline::{list_images, normalize, resize, DataSource, Dataset, JitterSpec, Preprocess, ResizeMethod};
use crate::trainer::{evaluate, evaluate_with, fit, Checkpoint, EvalReport, FitOptions, StepReport};
use config::{read_config, unknown_key, Settings, Source, KEYS};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "PIX2PIX_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.cfg";
const SELFCHECK_SEED: u64 = 2024;

fn flag(name: &'static str) -> String {
    name.replace('_', "-")
}

fn with_keys(mut cmd: Command) -> Command {
    let defaults = Settings::default();
    for k in KEYS {
        let default = defaults.get(k.name).unwrap_or_default();
        let help = format!("{} [default: {default}] ({})", k.help, k.provenance);
        let mut arg = Arg::new(k.name)
            .long(flag(k.name))
            .value_name("VALUE")
            .help(help)
            .help_heading("Config keys");
        if flag(k.name) != k.name {
            arg = arg.alias(k.name);
        }
        cmd = cmd.arg(arg);
    }
    cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("flat `key = value` config file; flags override it"),
    )
}

pub fn command() -> Command {
    let path = || clap::value_parser!(PathBuf);
    Command::new("pix2pix")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Paired map→aerial translation with a conditional GAN")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_keys(Command::new("synth").about("write a procedural paired dataset (9:1 train/val split)")).arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .required(true)
                    .value_parser(path())
                    .help("dataset root; tiles go to DIR/train and DIR/val"),
            ),
        )
        .subcommand(
            with_keys(Command::new("train").about("train a generator/discriminator pair into a fresh run directory"))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("CHECKPOINT")
                        .value_parser(path())
                        .help("continue from this checkpoint, into a new run directory"),
                )
                .arg(
                    Arg::new("run_dir")
                        .long("run-dir")
                        .value_name("DIR")
                        .value_parser(path())
                        .help("exact run directory; must not exist"),
                )
                .arg(
                    Arg::new("run_root")
                        .long("run-root")
                        .value_name("DIR")
                        .value_parser(path())
                        .help(format!(
                            "parent of timestamped run directories [env: {RUN_ROOT_ENV}] [default: {DEFAULT_RUN_ROOT}]"
                        )),
                ),
        )
        .subcommand(
            Command::new("generate")
                .about("translate maps with a trained generator")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .required(true)
                        .value_parser(path()),
                )
                .arg(
                    Arg::new("input")
                        .long("input")
                        .value_name("PATH")
                        .required(true)
                        .value_parser(path())
                        .help("an image or a directory of images"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .required(true)
                        .value_parser(path()),
                )
                .arg(
                    Arg::new("triptych")
                        .long("triptych")
                        .action(ArgAction::SetTrue)
                        .help("write input | truth | generated panels when the truth is known"),
                )
                .arg(
                    Arg::new("single")
                        .long("single")
                        .action(ArgAction::SetTrue)
                        .help("inputs are bare maps rather than combined pairs"),
                )
                .arg(
                    Arg::new("resize_policy")
                        .long("resize-policy")
                        .value_parser(["reject", "fit"])
                        .default_value("reject")
                        .help("what to do with inputs whose size differs from the generator's"),
                )
                .arg(pair_order_arg())
                .arg(resize_method_arg()),
        )
        .subcommand(
            Command::new("eval")
                .about("score a generator on a paired dataset (mean L1 and PSNR)")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .value_parser(path()),
                )
                .arg(
                    Arg::new("baseline")
                        .long("baseline")
                        .value_parser(["identity"])
                        .help("score a fixed predictor instead of a checkpoint"),
                )
                .group(ArgGroup::new("model").args(["checkpoint", "baseline"]).required(true))
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("DIR")
                        .required(true)
                        .value_parser(path()),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_name("NAME")
                        .default_value("")
                        .help("subdirectory of --data to score (default: --data itself)"),
                )
                .arg(
                    Arg::new("size")
                        .long("size")
                        .value_name("PX")
                        .value_parser(clap::value_parser!(usize))
                        .help("scoring resolution for --baseline (default: native size)"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("FILE")
                        .default_value("eval.json")
                        .value_parser(path()),
                )
                .arg(pair_order_arg())
                .arg(resize_method_arg()),
        )
        .subcommand(Command::new("selfcheck").about("gradient checks and 256×256 shape traces"))
}

fn pair_order_arg() -> Arg {
    Arg::new("pair_order")
        .long("pair-order")
        .value_parser(["map-left", "map-right"])
        .default_value("map-left")
}

fn resize_method_arg() -> Arg {
    Arg::new("resize_method")
        .long("resize-method")
        .value_parser(["nearest", "bilinear"])
        .default_value("nearest")
}

/// Rejects `--flag`s that are neither subcommand options nor config keys,
/// suggesting the nearest config key.
fn check_flags(cmd: &Command, args: &[String]) -> Result<()> {
    let Some(sub_name) = args.get(1) else { return Ok(()) };
    let Some(sub) = cmd.find_subcommand(sub_name) else {
        return Ok(());
    };
    if !["synth", "train"].contains(&sub_name.as_str()) {
        return Ok(());
    }
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long())
        .map(|l| l.replace('-', "_"))
        .chain(["help".to_string()])
        .collect();
    for a in &args[2..] {
        if let Some(name) = a.strip_prefix("--") {
            let name = name.split('=').next().unwrap_or("").replace('-', "_");
            if !name.is_empty() && !known.contains(&name) {
                return Err(unknown_key(&name));
            }
        }
    }
    Ok(())
}

fn settings(m: &ArgMatches) -> Result<Settings> {
    let mut pairs = match m.get_one::<PathBuf>("config") {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            pairs.push((k.name.to_string(), v.clone()));
        }
    }
    Settings::resolve(&pairs)
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Runs the CLI on `args` (including the program name), writing reports to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn main_with(args: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cmd = command();
    if let Err(e) = check_flags(&cmd, &args) {
        let _ = writeln!(err, "error: {e}");
        return 2;
    }
    let m = match cmd.try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let text = e.render().ansi().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return e.exit_code();
        }
    };
    let result = match m.subcommand() {
        Some(("synth", m)) => cmd_synth(m, out),
        Some(("train", m)) => cmd_train(m, out, err),
        Some(("generate", m)) => cmd_generate(m, out, err),
        Some(("eval", m)) => cmd_eval(m, out),
        Some(("selfcheck", _)) => crate::selfcheck::run(SELFCHECK_SEED, out).map(|ok| if ok { 0 } else { 1 }),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!("\n  caused by: {s}"));
                source = s.source();
            }
            let _ = writeln!(err, "{msg}");
            1
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let s = settings(m)?;
    let root = m.get_one::<PathBuf>("out").expect("required");
    let spec = s.synth_spec();
    let (train, val) = spec.split();
    let counts = (train.len(), val.len());
    for (split, range) in [("train", train), ("val", val)] {
        let dir = root.join(split);
        create_dir(&dir)?;
        for pair in spec.tiles(range)? {
            let combined = join_combined(&pair, s.pair_order)?;
            encode_png_pixels(&combined, dir.join(format!("{}.png", pair.source_id)))?;
        }
    }
    writeln!(
        out,
        "wrote {} train + {} val pairs under {}",
        counts.0,
        counts.1,
        root.display()
    )
    .map_err(out_err)?;
    Ok(0)
}

/// A new directory under `root` named for the current local time, with a
/// numeric suffix if that name is taken.
pub fn fresh_run_dir(root: &Path) -> Result<PathBuf> {
    create_dir(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

/// The `# `-prefixed header and resolved keys of a run manifest. Passing the
/// file back through `--config` replays the run.
pub fn manifest_text(s: &Settings, fingerprint: &str, resumed_from: Option<&Path>) -> String {
    let mut text = format!(
        "# pix2pix run manifest; replay with `pix2pix train --config <this file>`\n\
         # version = {}\n# started = {}\n# dataset_fingerprint = {fingerprint}\n",
        env!("CARGO_PKG_VERSION"),
        chrono::Local::now().to_rfc3339(),
    );
    if let Some(p) = resumed_from {
        text.push_str(&format!("# resumed_from = {}\n", p.display()));
    }
    text + &s.render()
}

/// Training set and optional sample/validation set described by `s`. A
/// synthetic source is split 9:1 exactly as `synth` writes it to disk.
pub fn open_datasets(s: &Settings) -> Result<(Dataset, Option<Dataset>)> {
    match s.source {
        Source::Synth => {
            let spec = s.synth_spec();
            let (train, val) = spec.split();
            let val = if val.is_empty() {
                None
            } else {
                Some(Dataset::open(DataSource::Pairs(spec.tiles(val)?))?)
            };
            Ok((Dataset::open(DataSource::Pairs(spec.tiles(train)?))?, val))
        }
        Source::Dir => {
            let dir = |split: &str| DataSource::Directory {
                root: s.data_dir.clone(),
                split: split.to_string(),
                order: s.pair_order,
            };
            let train = Dataset::open(dir(&s.train_split))?;
            let val_dir = s.data_dir.join(&s.val_split);
            let val = if !s.val_split.is_empty() && val_dir.is_dir() && !list_images(&val_dir)?.is_empty() {
                Some(Dataset::open(dir(&s.val_split))?)
            } else {
                None
            };
            Ok((train, val))
        }
    }
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let s = settings(m)?;
    s.train.validate()?;
    let (train, val) = open_datasets(&s)?;
    let resume_path = m.get_one::<PathBuf>("resume");
    let resume = resume_path.map(Checkpoint::load).transpose()?;

    let run_dir = match m.get_one::<PathBuf>("run_dir") {
        Some(dir) => {
            if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
            dir.clone()
        }
        None => {
            let root = m
                .get_one::<PathBuf>("run_root")
                .cloned()
                .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT));
            fresh_run_dir(&root)?
        }
    };
    let manifest = run_dir.join(MANIFEST_FILE);
    fs::write(
        &manifest,
        manifest_text(&s, &train.fingerprint()?, resume_path.map(|p| p.as_path())),
    )
    .map_err(|e| Error::io(&manifest, e))?;
    writeln!(out, "run directory: {}", run_dir.display()).map_err(out_err)?;

    let total = s.train.steps;
    let every = s.log_every;
    let started = Instant::now();
    let mut log = |step: u64, r: &StepReport| {
        if every > 0 && (step.is_multiple_of(every) || step == total) {
            let _ = writeln!(
                err,
                "step {step}/{total}  disc {:.4}  gen {:.4} (gan {:.4}, l1 {:.4})  {:.1}s",
                r.disc_loss,
                r.gen_total,
                r.gen_gan,
                r.gen_l1,
                started.elapsed().as_secs_f64()
            );
        }
    };
    let summary = fit(
        &s.train,
        &train,
        &run_dir,
        FitOptions {
            validation: val.as_ref(),
            resume,
            on_step: Some(&mut log),
        },
    )?;
    writeln!(out, "final checkpoint: {}", summary.final_checkpoint.display()).map_err(out_err)?;
    Ok(0)
}

fn load_generator(path: &Path) -> Result<(Checkpoint, GeneratorSpec)> {
    let ckpt = Checkpoint::load(path)?;
    let spec = GeneratorSpec::from_store(&ckpt.models.generator, &GeneratorSpec::default())?;
    Ok((ckpt, spec))
}

fn inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let files = list_images(path)?;
        if files.is_empty() {
            return Err(Error::EmptyDataset(format!("no png/jpg images in {}", path.display())));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn conform(t: &Tensor4, size: usize, fit: bool, method: ResizeMethod, path: &Path) -> Result<Tensor4> {
    let s = t.shape();
    if s.h == size && s.w == size {
        return Ok(t.clone());
    }
    if !fit {
        return Err(Error::InvalidArgument(format!(
            "{}: map is {}×{} but the generator takes {size}×{size}; resize it first or pass --resize-policy fit",
            path.display(),
            s.w,
            s.h
        )));
    }
    resize(t, size, size, method)
}

fn cmd_generate(m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let (ckpt, spec) = load_generator(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let files = inputs(m.get_one::<PathBuf>("input").expect("required"))?;
    let out_dir = m.get_one::<PathBuf>("out").expect("required");
    let triptych = m.get_flag("triptych");
    let single = m.get_flag("single");
    let fit = m.get_one::<String>("resize_policy").map(String::as_str) == Some("fit");
    let order: PairOrder = m
        .get_one::<String>("pair_order")
        .expect("default")
        .parse()
        .map_err(Error::InvalidArgument)?;
    let method: ResizeMethod = m
        .get_one::<String>("resize_method")
        .expect("default")
        .parse()
        .map_err(Error::InvalidArgument)?;
    if triptych && single {
        writeln!(
            err,
            "note: bare maps carry no ground truth; writing generated images only"
        )
        .map_err(out_err)?;
    }
    create_dir(out_dir)?;
    let size = spec.input_size();
    for path in &files {
        let (map, truth) = if single {
            (load_rgb(path)?, None)
        } else {
            let pair = load_combined(path, order)?;
            (pair.input_map, Some(pair.target_truth))
        };
        let x = normalize(&conform(&map, size, fit, method, path)?);
        let g = generate(&ckpt.models.generator, &spec, &x)?;
        let panel = match (&truth, triptych) {
            (Some(t), true) => make_triptych(&x, &normalize(&conform(t, size, fit, method, path)?), &g)?,
            _ => g,
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let target = out_dir.join(format!("{stem}.png"));
        if fs::canonicalize(&target).ok() == fs::canonicalize(path).ok() && target.exists() {
            return Err(Error::InvalidArgument(format!(
                "refusing to overwrite input {}",
                path.display()
            )));
        }
        encode_png(&panel, &target)?;
    }
    writeln!(out, "wrote {} images to {}", files.len(), out_dir.display()).map_err(out_err)?;
    Ok(0)
}

fn cmd_eval(m: &ArgMatches, out: &mut dyn Write) -> Result<i32> {
    let order: PairOrder = m
        .get_one::<String>("pair_order")
        .expect("default")
        .parse()
        .map_err(Error::InvalidArgument)?;
    let method: ResizeMethod = m
        .get_one::<String>("resize_method")
        .expect("default")
        .parse()
        .map_err(Error::InvalidArgument)?;
    let dataset = Dataset::open(DataSource::Directory {
        root: m.get_one::<PathBuf>("data").expect("required").clone(),
        split: m.get_one::<String>("split").expect("default").clone(),
        order,
    })?;
    let pre = |size: usize| {
        Preprocess::eval(JitterSpec {
            method,
            ..JitterSpec::scaled(size)
        })
    };
    let report: EvalReport = match m.get_one::<PathBuf>("checkpoint") {
        Some(path) => {
            let (ckpt, spec) = load_generator(path)?;
            evaluate(&ckpt.models.generator, &spec, &dataset, &pre(spec.input_size()))?
        }
        None => {
            let size = match m.get_one::<usize>("size") {
                Some(&s) => s,
                None => dataset.raw(0)?.shape().h,
            };
            evaluate_with(&dataset, &pre(size), |x| Ok(x.clone()))?
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("plain struct serializes");
    let path = m.get_one::<PathBuf>("out").expect("default");
    fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    writeln!(
        out,
        "mean_l1 {:.6}  psnr_db {:.3}  pairs {}  ({})",
        report.mean_l1,
        report.psnr_db,
        report.pairs,
        path.display()
    )
    .map_err(out_err)?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = main_with(args.iter().map(|s| s.to_string()).collect(), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn help_lists_every_key_with_default_and_provenance() {
        let (code, out, _) = run(&["pix2pix", "train", "--help"]);
        assert_eq!(code, 0);
        for k in KEYS {
            assert!(out.contains(&format!("--{}", flag(k.name))), "{}", k.name);
        }
        assert!(out.contains("[default: 0.0002] (published)"), "{out}");
        assert!(out.contains("[default: 286] (published)"));
    }

    #[test]
    fn unknown_flag_names_nearest_key() {
        let (code, _, err) = run(&["pix2pix", "train", "--lamda-l1", "5"]);
        assert_ne!(code, 0);
        assert!(err.contains("did you mean `lambda_l1`"), "{err}");
        assert!(err.contains("valid keys:"));
    }

    #[test]
    fn manifest_replays_to_the_same_settings() {
        let s = Settings::resolve(&[("preset".into(), "desk".into()), ("steps".into(), "9".into())]).unwrap();
        let text = manifest_text(&s, "abc", None);
        assert!(text.lines().take(4).all(|l| l.starts_with('#')));
        assert_eq!(Settings::resolve(&config::parse_config(&text).unwrap()).unwrap(), s);
    }
}
