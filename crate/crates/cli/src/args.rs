//! Command-line flags and their mapping onto config keys.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rslab_core::{Error, Result};

use crate::{Command, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "rslab", version, about = "Position-enhanced attention decoder lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render a synthetic text-image dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Query similarity matrices and position regression.
    Dissect(DissectArgs),
    /// Train and score one model per grid value.
    Ablate(AblateArgs),
    /// Replay a run from its run.json.
    Rerun {
        run_file: PathBuf,
        /// Write outputs here instead of the recorded directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON object of dotted config keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// contextless or lexicon.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Label length range `min..max` (contextless).
    #[arg(long)]
    pub len: Option<String>,
    #[arg(long)]
    pub charset: Option<String>,
    /// Word list, one per line (lexicon; default: built-in list).
    #[arg(long)]
    pub words: Option<PathBuf>,
    #[arg(long)]
    pub jitter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub position_mode: Option<String>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Model alphabet: `standard`, explicit characters, or (default) the
    /// training set's charset.
    #[arg(long)]
    pub vocab: Option<String>,
    /// Record wall-clock seconds in metrics.csv (breaks byte-identical reruns).
    #[arg(long)]
    pub log_wall_time: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation dataset directory (default: split off `data.val_fraction`).
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub case_sensitive: bool,
}

#[derive(Debug, Args)]
pub struct DissectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sequence length to analyse; repeatable.
    #[arg(long = "l")]
    pub lengths: Vec<usize>,
    /// Training fraction of the regression split.
    #[arg(long)]
    pub split: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// `axis=v1,v2,...` with axis one of variant, fusion, position.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Test set with linguistic context.
    #[arg(long)]
    pub data_context: Option<PathBuf>,
    /// Contextless test set.
    #[arg(long)]
    pub data_random: Option<PathBuf>,
}

/// Flag overrides in application order.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn value(&mut self, key: &str, v: Option<Value>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v));
        }
    }

    fn path(&mut self, key: &str, p: &Option<PathBuf>) {
        self.value(key, p.as_ref().map(|p| json!(p.to_string_lossy())));
    }

    fn text(&mut self, key: &str, s: &Option<String>) {
        self.value(key, s.as_ref().map(|s| json!(s)));
    }

    fn model(&mut self, m: &ModelArgs) {
        self.text("model.variant", &m.variant);
        self.text("position.mode", &m.position_mode);
        self.text("fusion.mode", &m.fusion);
        self.value("model.d_model", m.d_model.map(|v| json!(v)));
        self.value("position.t_max", m.t_max.map(|v| json!(v)));
        self.value("train.epochs", m.epochs.map(|v| json!(v)));
        self.value("train.batch_size", m.batch_size.map(|v| json!(v)));
        self.value("train.base_lr", m.lr.map(|v| json!(v)));
        self.text("vocab.charset", &m.vocab);
        if m.log_wall_time {
            self.value("train.log_wall_time", Some(json!(true)));
        }
    }
}

fn parse_len(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--len `{s}` is not of the form min..max"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Resolves defaults, `--config`, then flags into a [`RunConfig`].
fn resolve(command: Command, common: &Common, overrides: Overrides) -> Result<RunConfig> {
    let mut rc = RunConfig::new(command);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        rc.merge_json(&text)?;
    }
    if let Some(out) = &common.out {
        rc.out = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        rc.set("seed", json!(seed))?;
    }
    for (k, v) in overrides.0 {
        rc.set(&k, v)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set `{kv}` is not KEY=VALUE")))?;
        rc.set_raw(k.trim(), v)?;
    }
    Ok(rc)
}

/// What the parsed command line asks for.
pub enum Invocation {
    Run(RunConfig),
    Rerun { run_file: PathBuf, out: Option<PathBuf> },
}

pub fn invocation(cli: Cli) -> Result<Invocation> {
    let mut o = Overrides::default();
    let rc = match cli.command {
        Cmd::Rerun { run_file, out } => return Ok(Invocation::Rerun { run_file, out }),
        Cmd::Synth(a) => {
            o.text("synth.kind", &a.kind);
            o.value("synth.n", a.n.map(|v| json!(v)));
            if let Some(len) = &a.len {
                let (lo, hi) = parse_len(len)?;
                o.value("synth.len_min", Some(json!(lo)));
                o.value("synth.len_max", Some(json!(hi)));
            }
            o.text("synth.charset", &a.charset);
            o.path("synth.words", &a.words);
            o.value("render.jitter", a.jitter.map(|v| json!(v)));
            resolve(Command::Synth, &a.common, o)?
        }
        Cmd::Train(a) => {
            o.model(&a.model);
            o.path("data.train", &a.data);
            o.path("data.val", &a.val);
            resolve(Command::Train, &a.common, o)?
        }
        Cmd::Eval(a) => {
            o.path("eval.checkpoint", &a.checkpoint);
            o.path("data.test", &a.data);
            if a.case_sensitive {
                o.value("eval.case_sensitive", Some(json!(true)));
            }
            resolve(Command::Eval, &a.common, o)?
        }
        Cmd::Dissect(a) => {
            o.path("dissect.checkpoint", &a.checkpoint);
            o.path("data.test", &a.data);
            if !a.lengths.is_empty() {
                o.value("dissect.lengths", Some(json!(a.lengths)));
            }
            o.value("dissect.split", a.split.map(|v| json!(v)));
            resolve(Command::Dissect, &a.common, o)?
        }
        Cmd::Ablate(a) => {
            o.model(&a.model);
            o.text("ablate.grid", &a.grid);
            o.path("data.train", &a.data);
            o.path("data.val", &a.val);
            o.path("data.context", &a.data_context);
            o.path("data.random", &a.data_random);
            resolve(Command::Ablate, &a.common, o)?
        }
    };
    Ok(Invocation::Run(rc))
}
