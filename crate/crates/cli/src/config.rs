//! Command-line flags layered over environment variables and a TOML file.
//!
//! Precedence, lowest first: config file (`--config` / `SDN_CONFIG`),
//! `SDN_*` environment variables, command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use sdn_core::dataset::Scale;
use sdn_nn::Mechanism;

#[derive(Debug, Parser)]
#[command(name = "sdn", version, about = "Assembly-state change detection: data, training, evaluation")]
pub struct Cli {
    /// TOML file with default settings.
    #[arg(long, global = true, env = "SDN_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Part catalog TOML (built-in desk catalog when absent).
    #[arg(long, global = true, env = "SDN_CATALOG", value_name = "PATH")]
    pub catalog: Option<PathBuf>,
    /// Dataset root; checkpoints and reports default to subdirectories.
    #[arg(long, global = true, env = "SDN_OUT", value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "SDN_SEED", value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "SDN_JOBS", value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the standard dataset splits.
    Gen(GenArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and write the report.
    Eval(EvalArgs),
    /// Render attention weights for one anchor query.
    Attn(AttnArgs),
    /// Finite-difference checks of every differentiable op.
    Gradcheck,
    /// Brute-force oracle suites.
    Oracle,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, env = "SDN_SCALE")]
    pub scale: Option<ScaleArg>,
    /// Orientation budget for the training-distribution splits.
    #[arg(long, env = "SDN_MAX_NQD", value_name = "F")]
    pub max_nqd: Option<f64>,
    #[arg(long, env = "SDN_DIFF_MIN", value_name = "N")]
    pub diff_min: Option<usize>,
    #[arg(long, env = "SDN_DIFF_MAX", value_name = "N")]
    pub diff_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "SDN_MECHANISM")]
    pub mechanism: Option<MechanismArg>,
    /// Output path of the best checkpoint.
    #[arg(long, env = "SDN_CHECKPOINT", value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Training split name.
    #[arg(long, env = "SDN_SPLIT", value_name = "NAME")]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Selects the default checkpoint path when `--checkpoint` is absent.
    #[arg(long, env = "SDN_MECHANISM")]
    pub mechanism: Option<MechanismArg>,
    #[arg(long, env = "SDN_CHECKPOINT", value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "SDN_SPLIT", value_name = "NAME")]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long, env = "SDN_MECHANISM")]
    pub mechanism: Option<MechanismArg>,
    #[arg(long, env = "SDN_CHECKPOINT", value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "SDN_SPLIT", value_name = "NAME")]
    pub split: Option<String>,
    /// Anchor pixel to query.
    #[arg(long, env = "SDN_QUERY", value_name = "X,Y")]
    pub query: Option<Query>,
    /// Attention level, 0 = finest.
    #[arg(long, env = "SDN_LEVEL", value_parser = clap::value_parser!(u8).range(0..=2))]
    pub level: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Tiny,
    Small,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::Tiny => Scale::Tiny,
            ScaleArg::Small => Scale::Small,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Gca,
    Lca,
    #[value(name = "gca_msa")]
    GcaMsa,
    Concat,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Mechanism {
        match m {
            MechanismArg::Gca => Mechanism::Gca,
            MechanismArg::Lca => Mechanism::Lca,
            MechanismArg::GcaMsa => Mechanism::GcaMsa,
            MechanismArg::Concat => Mechanism::ConcatOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub x: usize,
    pub y: usize,
}

impl FromStr for Query {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
        let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad coordinate {v:?}: {e}"));
        Ok(Query { x: p(x)?, y: p(y)? })
    }
}

/// Settings accepted in the config file. Keys without a flag can also be
/// set through `SDN_<KEY>` in upper case.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub catalog: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub scale: Option<String>,
    pub max_nqd: Option<f64>,
    pub diff_min: Option<usize>,
    pub diff_max: Option<usize>,
    pub mechanism: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<String>,
    pub query: Option<String>,
    pub level: Option<u8>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub peak_lr: Option<f64>,
    pub windows: Option<Vec<usize>>,
    pub augment: Option<bool>,
    pub val_split: Option<String>,
    pub report: Option<PathBuf>,
    pub panels: Option<usize>,
    pub pair: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Overrides flagless keys from `SDN_*` variables.
    fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: Option<String>) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            v.map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{key}={s:?}: {e}"))).transpose()
        }
        macro_rules! layer {
            ($field:ident, $key:literal) => {
                if let Some(v) = parse($key, env($key))? {
                    self.$field = Some(v);
                }
            };
        }
        layer!(epochs, "SDN_EPOCHS");
        layer!(batch_size, "SDN_BATCH_SIZE");
        layer!(warmup_epochs, "SDN_WARMUP_EPOCHS");
        layer!(peak_lr, "SDN_PEAK_LR");
        layer!(augment, "SDN_AUGMENT");
        layer!(val_split, "SDN_VAL_SPLIT");
        layer!(report, "SDN_REPORT");
        layer!(panels, "SDN_PANELS");
        layer!(pair, "SDN_PAIR");
        if let Some(w) = env("SDN_WINDOWS") {
            let ws = w.split(',').map(|v| v.trim().parse::<usize>()).collect::<Result<Vec<_>, _>>();
            self.windows = Some(ws.map_err(|e| anyhow::anyhow!("SDN_WINDOWS={w:?}: {e}"))?);
        }
        Ok(())
    }
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub catalog: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub scale: Scale,
    pub max_nqd: Option<f64>,
    pub diff_min: Option<usize>,
    pub diff_max: Option<usize>,
    pub mechanism: Mechanism,
    pub checkpoint: PathBuf,
    pub split: Option<String>,
    pub query: Option<Query>,
    pub level: u8,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub peak_lr: Option<f64>,
    pub windows: Option<Vec<usize>>,
    pub augment: bool,
    pub val_split: String,
    pub report: Option<PathBuf>,
    pub panels: usize,
    pub pair: Option<u64>,
}

fn parse_mechanism(s: &str) -> Result<Mechanism> {
    match MechanismArg::from_str(s, true) {
        Ok(m) => Ok(m.into()),
        Err(_) => bail!("unknown mechanism {s:?} (expected gca, lca, gca_msa or concat)"),
    }
}

impl RunConfig {
    /// Merges parsed flags (which already include their `SDN_*` variables)
    /// over the config file and flagless environment keys.
    pub fn resolve(cli: &Cli, env: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let mut file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        file.apply_env(env)?;
        let (mut mechanism, mut checkpoint, mut split, mut query, mut level) = (None, None, None, None, None);
        let (mut scale, mut max_nqd, mut diff_min, mut diff_max) = (None, None, None, None);
        match &cli.command {
            Command::Gen(a) => {
                scale = a.scale.map(Scale::from);
                (max_nqd, diff_min, diff_max) = (a.max_nqd, a.diff_min, a.diff_max);
            }
            Command::Train(a) => {
                mechanism = a.mechanism.map(Mechanism::from);
                (checkpoint, split) = (a.checkpoint.clone(), a.split.clone());
            }
            Command::Eval(a) => {
                mechanism = a.mechanism.map(Mechanism::from);
                (checkpoint, split) = (a.checkpoint.clone(), a.split.clone());
            }
            Command::Attn(a) => {
                mechanism = a.mechanism.map(Mechanism::from);
                (checkpoint, split, query, level) = (a.checkpoint.clone(), a.split.clone(), a.query, a.level);
            }
            Command::Gradcheck | Command::Oracle => {}
        }
        let scale = match scale {
            Some(s) => s,
            None => file.scale.as_deref().map(Scale::from_str).transpose().map_err(anyhow::Error::msg)?.unwrap_or(Scale::Tiny),
        };
        let mechanism = match mechanism {
            Some(m) => m,
            None => file.mechanism.as_deref().map(parse_mechanism).transpose()?.unwrap_or(Mechanism::Gca),
        };
        let query = match query {
            Some(q) => Some(q),
            None => file.query.as_deref().map(Query::from_str).transpose().map_err(anyhow::Error::msg)?,
        };
        let level = level.or(file.level).unwrap_or(0);
        if level > 2 {
            bail!("level must be 0, 1 or 2, got {level}");
        }
        let out = cli.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("data"));
        let checkpoint = checkpoint
            .or(file.checkpoint)
            .unwrap_or_else(|| out.join("checkpoints").join(format!("{}.ckpt", mechanism.as_str())));
        Ok(RunConfig {
            catalog: cli.catalog.clone().or(file.catalog),
            seed: cli.seed.or(file.seed).unwrap_or(0),
            jobs: cli.jobs.or(file.jobs),
            scale,
            max_nqd: max_nqd.or(file.max_nqd),
            diff_min: diff_min.or(file.diff_min),
            diff_max: diff_max.or(file.diff_max),
            mechanism,
            checkpoint,
            split: split.or(file.split),
            query,
            level,
            epochs: file.epochs,
            batch_size: file.batch_size,
            warmup_epochs: file.warmup_epochs,
            peak_lr: file.peak_lr,
            windows: file.windows,
            augment: file.augment.unwrap_or(true),
            val_split: file.val_split.unwrap_or_else(|| "val".into()),
            report: file.report,
            panels: file.panels.unwrap_or(8),
            pair: file.pair,
            out,
        })
    }
}
