//! Command-line driver: dataset generation, training, prediction,
//! evaluation, trajectory extraction and debug rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use g4d::cli;
use g4d::config::{load_config, RunConfig};
use g4d::{Error, Result};

const USAGE: &str = "\
g4d <subcommand> [flags]

Subcommands:
  gen-data      --out DIR [--config FILE] [--episodes N] [--seed N]
  train         --data DIR --out DIR [--config FILE] [--resume CKPT] [--seed N]
  predict       --ckpt FILE --data DIR --episode N --views N,M --t0 N --out DIR [--seed N]
  export-gt     --data DIR --episode N --views N,M --t0 N --out DIR [--horizon N]
  eval          --pred DIR --gt DIR --report FILE
  extract-traj  --pred DIR --gripper-spec FILE --hint FILE --out FILE
  render        --data DIR --episode N --view N --out DIR

Any --section.key VALUE pair overrides that config key (e.g. --loss.lambda 0).
G4D_SEED is used when neither --seed nor the config provides one.

Exit codes: 0 ok, 2 usage/config, 3 I/O or file format, 4 non-finite loss,
5 missing checkpoint, 6 missing frame, 7 tracking lost.";

struct Args {
    flags: Vec<(String, String)>,
}

impl Args {
    fn take(&mut self, name: &str) -> Option<String> {
        let idx = self.flags.iter().position(|(k, _)| k == name)?;
        Some(self.flags.remove(idx).1)
    }

    fn require(&mut self, name: &str) -> Result<String> {
        self.take(name)
            .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, name: &str) -> Result<Option<T>> {
        match self.take(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("--{name}: cannot parse '{v}'"))),
        }
    }

    fn require_parsed<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let v = self.require(name)?;
        v.parse()
            .map_err(|_| Error::Config(format!("--{name}: cannot parse '{v}'")))
    }

    /// Remaining dotted flags become config overrides; anything else is a
    /// usage error.
    fn into_overrides(self) -> Result<Vec<(String, String)>> {
        let mut overrides = Vec::new();
        for (k, v) in self.flags {
            if k.contains('.') {
                overrides.push((k, v));
            } else {
                return Err(Error::Config(format!("unknown flag --{k}")));
            }
        }
        Ok(overrides)
    }
}

fn parse_args(argv: &[String]) -> Result<(String, Args)> {
    let sub = argv
        .first()
        .ok_or_else(|| Error::Config("missing subcommand".into()))?
        .clone();
    let mut flags = Vec::new();
    let mut i = 1;
    while i < argv.len() {
        let arg = &argv[i];
        let Some(name) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("expected flag, got '{arg}'")));
        };
        let value = argv
            .get(i + 1)
            .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?
            .clone();
        flags.push((name.to_string(), value));
        i += 2;
    }
    Ok((sub, Args { flags }))
}

fn parse_views(raw: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("--views expects N,M, got '{raw}'")));
    }
    let n = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad view index '{}'", parts[0])))?;
    let m = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad view index '{}'", parts[1])))?;
    Ok((n, m))
}

fn config_from(args: &mut Args) -> Result<(RunConfig, Option<u64>)> {
    let config_path = args.take("config").map(PathBuf::from);
    let seed_flag: Option<u64> = args.take_parsed("seed")?;
    let mut rest = Args { flags: Vec::new() };
    std::mem::swap(&mut rest.flags, &mut args.flags);
    let overrides = rest.into_overrides()?;
    let cfg = load_config(config_path.as_deref(), &overrides)?;
    Ok((cfg, seed_flag))
}

fn run(argv: &[String]) -> Result<()> {
    let (sub, mut args) = parse_args(argv)?;
    match sub.as_str() {
        "gen-data" => {
            let out = PathBuf::from(args.require("out")?);
            let episodes: Option<usize> = args.take_parsed("episodes")?;
            let (cfg, seed_flag) = config_from(&mut args)?;
            let seed = cfg.resolve_seed(seed_flag);
            cli::gen_data(&cfg, &out, episodes, seed)
        }
        "train" => {
            let data = PathBuf::from(args.require("data")?);
            let out = PathBuf::from(args.require("out")?);
            let resume = args.take("resume").map(PathBuf::from);
            let (cfg, seed_flag) = config_from(&mut args)?;
            let seed = cfg.resolve_seed(seed_flag);
            cli::train_cmd(&cfg, &data, &out, resume.as_deref(), seed).map(|_| ())
        }
        "predict" => {
            let ckpt = PathBuf::from(args.require("ckpt")?);
            let data = PathBuf::from(args.require("data")?);
            let episode: usize = args.require_parsed("episode")?;
            let views = parse_views(&args.require("views")?)?;
            let t0: usize = args.require_parsed("t0")?;
            let out = PathBuf::from(args.require("out")?);
            let (cfg, seed_flag) = config_from(&mut args)?;
            let seed = cfg.resolve_seed(seed_flag);
            cli::predict(&ckpt, &data, episode, views, t0, &out, seed).map(|_| ())
        }
        "export-gt" => {
            let data = PathBuf::from(args.require("data")?);
            let episode: usize = args.require_parsed("episode")?;
            let views = parse_views(&args.require("views")?)?;
            let t0: usize = args.require_parsed("t0")?;
            let out = PathBuf::from(args.require("out")?);
            let horizon: Option<usize> = args.take_parsed("horizon")?;
            let (cfg, _) = config_from(&mut args)?;
            let horizon = horizon.unwrap_or(cfg.model.horizon);
            cli::export_gt(&data, episode, views, t0, horizon, &out).map(|_| ())
        }
        "eval" => {
            let pred = PathBuf::from(args.require("pred")?);
            let gt = PathBuf::from(args.require("gt")?);
            let report = PathBuf::from(args.require("report")?);
            args.into_overrides()?;
            cli::eval(&pred, &gt, &report).map(|_| ())
        }
        "extract-traj" => {
            let pred = PathBuf::from(args.require("pred")?);
            let spec = PathBuf::from(args.require("gripper-spec")?);
            let hint = PathBuf::from(args.require("hint")?);
            let out = PathBuf::from(args.require("out")?);
            args.into_overrides()?;
            cli::extract_traj(&pred, &spec, &hint, &out).map(|_| ())
        }
        "render" => {
            let data = PathBuf::from(args.require("data")?);
            let episode: usize = args.require_parsed("episode")?;
            let view: usize = args.require_parsed("view")?;
            let out = PathBuf::from(args.require("out")?);
            args.into_overrides()?;
            cli::render(&data, episode, view, &out)
        }
        other => Err(Error::Config(format!("unknown subcommand '{other}'"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = cli::exit_code(&err);
            eprintln!("error: {err}");
            if code == 2 {
                eprintln!("\n{USAGE}");
            }
            ExitCode::from(code as u8)
        }
    }
}
