use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use huegan::colorspace::RgbImage;
use huegan::pipeline::{self, checkpoint, Colorizer, Split, TrainConfig};
use huegan::selftest;

/// Keys `evaluate` may override; the rest are fixed by the checkpoint.
const EVAL_KEYS: [&str; 6] = [
    "seed",
    "test_fraction",
    "eval_seed",
    "colorfulness",
    "delta_mode",
    "single_threaded",
];

/// A caller mistake: bad flags, config or data. Exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn config_args(cmd: Command, keys: &[String]) -> Command {
    let booleans = TrainConfig::boolean_fields();
    keys.iter().fold(cmd, |cmd, key| {
        let dashed = key.replace('_', "-");
        let mut arg = Arg::new(key.clone())
            .long(key.clone())
            .value_name("VALUE")
            .help_heading("Config overrides")
            .help(format!("Override `{key}`"));
        if booleans.contains(key) {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        if dashed != *key {
            arg = arg.visible_alias(dashed);
        }
        cmd.arg(arg)
    })
}

fn cli() -> Command {
    let fields = TrainConfig::field_names();
    let eval_fields: Vec<String> = EVAL_KEYS.iter().map(|s| s.to_string()).collect();
    let train = Command::new("train")
        .about("Train a generator/critic pair on a folder of color images")
        .arg(
            Arg::new("data")
                .required(true)
                .value_name("DATA_DIR")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("out")
                .required(true)
                .value_name("OUT_DIR")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("TOML file with config keys"),
        )
        .arg(
            Arg::new("profile")
                .long("profile")
                .value_name("NAME")
                .value_parser(TrainConfig::PROFILES)
                .help("Base settings [default: desk]"),
        )
        .arg(
            Arg::new("resume")
                .long("resume")
                .action(ArgAction::SetTrue)
                .help("Continue the run saved in OUT_DIR"),
        )
        .arg(
            Arg::new("log_every")
                .long("log-every")
                .value_name("N")
                .default_value("50")
                .value_parser(clap::value_parser!(u64).range(1..))
                .help("Print losses every N steps"),
        );
    let colorize = Command::new("colorize")
        .about("Colorize one image with a trained checkpoint")
        .arg(
            Arg::new("checkpoint")
                .required(true)
                .value_name("CHECKPOINT")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("input")
                .required(true)
                .value_name("INPUT")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("output")
                .required(true)
                .value_name("OUTPUT_PNG")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .default_value("0")
                .value_parser(clap::value_parser!(u64))
                .help("Noise seed; different seeds give different colorizations"),
        );
    let evaluate = Command::new("evaluate")
        .about("Score a checkpoint on the test split: PSNR, SSIM, colorfulness")
        .arg(
            Arg::new("checkpoint")
                .required(true)
                .value_name("CHECKPOINT")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("data")
                .required(true)
                .value_name("DATA_DIR")
                .value_parser(clap::value_parser!(PathBuf)),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .value_parser(clap::value_parser!(PathBuf))
                .help(
                    "Where metrics.csv and summary.json go [default: eval/ next to the checkpoint]",
                ),
        )
        .arg(
            Arg::new("all")
                .long("all")
                .action(ArgAction::SetTrue)
                .help("Score every image in DATA_DIR, not just the test split"),
        );
    let selftest = Command::new("selftest")
        .about("Run the fast invariant suite")
        .arg(
            Arg::new("inject_fault")
                .long("inject-fault")
                .value_name("FAULT")
                .value_parser(["conv-backward"])
                .hide(true),
        );
    Command::new("huegan")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Lab-space GAN image colorization")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(train, &fields))
        .subcommand(colorize)
        .subcommand(config_args(evaluate, &eval_fields))
        .subcommand(selftest)
}

fn overrides(m: &ArgMatches, keys: &[String], cfg: &mut TrainConfig) -> Result<()> {
    for key in keys {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)
                .map_err(|e| Usage(format!("--{key}: {e}")))?;
        }
    }
    Ok(())
}

/// Wraps library errors, tagging caller mistakes as usage errors.
fn lib<T>(r: huegan::Result<T>) -> Result<T> {
    r.map_err(|e| {
        if e.is_usage() {
            anyhow!(Usage(e.to_string()))
        } else {
            anyhow!(e)
        }
    })
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let data: &PathBuf = m.get_one("data").expect("required");
    let out: &PathBuf = m.get_one("out").expect("required");
    let log_every: u64 = *m.get_one("log_every").expect("defaulted");
    let start = Instant::now();
    let mut progress = move |r: &pipeline::LogRow| {
        if r.step.is_multiple_of(log_every) || r.step == 1 {
            eprintln!(
                "step {:>6}  total {:.4}  Lg {:.4}  Lp {:.4}  L1 {:.4}  Lc {:.4}  d_loss {:.4}  [{:.0}s]",
                r.step,
                r.total,
                r.lg,
                r.lp,
                r.l1,
                r.lc,
                r.d_loss,
                start.elapsed().as_secs_f64()
            );
        }
    };
    let state = if m.get_flag("resume") {
        let fields = TrainConfig::field_names();
        let given: Vec<&String> = fields
            .iter()
            .filter(|k| m.get_one::<String>(k).is_some())
            .collect();
        match given.as_slice() {
            [] => {}
            [k] if *k == "steps" => {}
            _ => bail!(Usage("--resume only accepts a --steps override".into())),
        }
        let steps = match m.get_one::<String>("steps") {
            Some(s) => Some(
                s.parse::<u64>()
                    .map_err(|e| Usage(format!("--steps: {e}")))?,
            ),
            None => None,
        };
        lib(pipeline::resume(data, out, steps, &mut progress))?
    } else {
        let mut cfg = lib(TrainConfig::load(
            m.get_one::<PathBuf>("config").map(PathBuf::as_path),
            m.get_one::<String>("profile").map(String::as_str),
        ))?;
        overrides(m, &TrainConfig::field_names(), &mut cfg)?;
        lib(pipeline::train(&cfg, data, out, &mut progress))?
    };
    println!(
        "trained {} steps; checkpoint in {}",
        state.step,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn cmd_colorize(m: &ArgMatches) -> Result<()> {
    let ck: &PathBuf = m.get_one("checkpoint").expect("required");
    let input: &PathBuf = m.get_one("input").expect("required");
    let output: &PathBuf = m.get_one("output").expect("required");
    let seed: u64 = *m.get_one("seed").expect("defaulted");
    let colorizer =
        lib(Colorizer::load(ck)).with_context(|| format!("loading {}", ck.display()))?;
    let img = lib(RgbImage::read(input))?;
    let out = lib(colorizer.colorize(&img, seed))?;
    lib(out.write_png(output))?;
    println!(
        "wrote {} ({}x{})",
        output.display(),
        out.width(),
        out.height()
    );
    Ok(())
}

fn default_eval_dir(ck: &Path) -> PathBuf {
    let resolved = checkpoint::resolve(ck);
    resolved.parent().unwrap_or(Path::new(".")).join("eval")
}

fn cmd_evaluate(m: &ArgMatches) -> Result<()> {
    let ck: &PathBuf = m.get_one("checkpoint").expect("required");
    let data: &PathBuf = m.get_one("data").expect("required");
    let mut colorizer =
        lib(Colorizer::load(ck)).with_context(|| format!("loading {}", ck.display()))?;
    let keys: Vec<String> = EVAL_KEYS.iter().map(|s| s.to_string()).collect();
    overrides(m, &keys, &mut colorizer.config)?;
    let split = if m.get_flag("all") {
        Split::All
    } else {
        Split::Test
    };
    let cfg = &colorizer.config;
    let ds = lib(pipeline::load_dataset(
        data,
        split,
        cfg.seed,
        cfg.test_fraction,
    ))?;
    let report = lib(pipeline::evaluate(&colorizer, &ds))?;
    let out = m
        .get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| default_eval_dir(ck));
    lib(report.write(&out))?;
    let s = &report.summary;
    println!("images              {}", report.rows.len());
    println!("psnr_db             {:.3}", s.psnr_db);
    println!("ssim                {:.4}", s.ssim);
    println!("colorfulness_pred   {:.3}", s.colorfulness_pred);
    println!("colorfulness_gt     {:.3}", s.colorfulness_gt);
    println!("delta_colorfulness  {:.3}", s.delta_colorfulness);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_selftest(m: &ArgMatches) -> Result<()> {
    if m.get_one::<String>("inject_fault").is_some() {
        huegan::tensor::fault::set_corrupt_conv_backward(true);
    }
    let outcomes = selftest::run(&mut |o| {
        let secs = o.elapsed.as_secs_f64();
        match &o.result {
            Ok(msg) => println!("PASS  {:<22} {secs:>6.2}s  {msg}", o.name),
            Err(msg) => println!("FAIL  {:<22} {secs:>6.2}s  {msg}", o.name),
        }
    });
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("{passed}/{} suites passed", outcomes.len());
    if let Some(bad) = outcomes.iter().find(|o| !o.passed()) {
        bail!("{}: {}", bad.name, bad.result.as_ref().unwrap_err());
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("colorize", m)) => cmd_colorize(m),
        Some(("evaluate", m)) => cmd_evaluate(m),
        Some(("selftest", m)) => cmd_selftest(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Usage>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
