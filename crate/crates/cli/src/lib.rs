//! The `rslab` pipeline: synthesize data, train, evaluate, dissect the
//! decoder and sweep ablations.
//!
//! Every command resolves its settings into one flat JSON object of dotted
//! keys (defaults, then `--config`, then flags) and writes it to
//! `<out>/run.json` before doing any work. `rslab rerun <run.json>` replays
//! a run exactly.

pub mod args;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use rslab_core::config::FlatConfig;
use rslab_core::datasynth::{
    load_dataset, write_dataset, Corpus, DatasetManifest, GenConfig, RenderConfig, Sample, ALNUM, BUILTIN_WORDS,
};
use rslab_core::dissect::{collect_queries, export_heatmap, position_regression, similarity_matrix};
use rslab_core::model::{checkpoint, Model};
use rslab_core::rng::{derive_seed, SplitMix64};
use rslab_core::trainer::{evaluate, train};
use rslab_core::vocab::Vocab;
use rslab_core::{Error, Result};

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::StepOverflow { .. } => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::InsufficientData(_) | Error::UndefinedRSquared(_) => 4,
        Error::Numeric { .. } => 5,
        Error::Dimension(_) | Error::Contract(_) => 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Dissect,
    Ablate,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Dissect => "dissect",
            Command::Ablate => "ablate",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "synth" => Command::Synth,
            "train" => Command::Train,
            "eval" => Command::Eval,
            "dissect" => Command::Dissect,
            "ablate" => Command::Ablate,
            other => return Err(Error::Config(format!("unknown command `{other}`"))),
        })
    }

    /// Command-specific keys and their defaults; everything else lives in
    /// [`FlatConfig`].
    fn defaults(self) -> BTreeMap<String, Value> {
        let r = RenderConfig::default();
        let pairs: Vec<(&str, Value)> = match self {
            Command::Synth => vec![
                ("synth.kind", json!("contextless")),
                ("synth.n", json!(1000)),
                ("synth.len_min", json!(3)),
                ("synth.len_max", json!(8)),
                ("synth.charset", json!(ALNUM)),
                ("synth.words", Value::Null),
                ("render.height", json!(r.height)),
                ("render.scale", json!(r.scale)),
                ("render.gap", json!(r.gap)),
                ("render.margin", json!(r.margin)),
                ("render.jitter", json!(r.jitter)),
                ("render.min_width", json!(r.min_width)),
                ("render.max_width", json!(r.max_width)),
            ],
            Command::Train => vec![
                ("data.train", Value::Null),
                ("data.val", Value::Null),
                ("vocab.charset", Value::Null),
            ],
            Command::Eval => vec![("eval.checkpoint", Value::Null), ("data.test", Value::Null)],
            Command::Dissect => vec![
                ("dissect.checkpoint", Value::Null),
                ("data.test", Value::Null),
                ("dissect.lengths", json!([5, 11])),
                ("dissect.split", json!(0.9)),
            ],
            Command::Ablate => vec![
                ("ablate.grid", Value::Null),
                ("data.train", Value::Null),
                ("data.val", Value::Null),
                ("data.context", Value::Null),
                ("data.random", Value::Null),
                ("vocab.charset", Value::Null),
            ],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Fully resolved settings of one command invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub out: Option<PathBuf>,
    pub flat: FlatConfig,
    pub keys: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            out: None,
            flat: FlatConfig::default(),
            keys: command.defaults(),
        }
    }

    /// Sets a command key or a model/training key.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match key {
            "command" => match value.as_str().map(Command::parse) {
                Some(Ok(c)) if c == self.command => Ok(()),
                _ => Err(Error::Config(format!("config is for command {value}, not `{}`", self.command.as_str()))),
            },
            "out" => {
                self.out = match value {
                    Value::Null => None,
                    Value::String(s) => Some(PathBuf::from(s)),
                    other => return Err(Error::Config(format!("`out` must be a path, got {other}"))),
                };
                Ok(())
            }
            k if self.keys.contains_key(k) => {
                self.keys.insert(k.to_string(), value);
                Ok(())
            }
            k => self.flat.set(k, value),
        }
    }

    /// Sets a key from flag text: JSON if it parses, else a string.
    pub fn set_raw(&mut self, key: &str, raw: &str) -> Result<()> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key, value)
    }

    pub fn merge_json(&mut self, text: &str) -> Result<()> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object of dotted keys".into()));
        };
        for (k, v) in map {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Parses a `run.json`, which names its own command.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("run file is not valid JSON: {e}")))?;
        let command = v
            .get("command")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("run file lacks a `command`".into()))?;
        let mut rc = Self::new(Command::parse(command)?);
        rc.merge_json(text)?;
        Ok(rc)
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        map.insert("command".into(), json!(self.command.as_str()));
        map.insert("out".into(), self.out.as_ref().map_or(Value::Null, |p| json!(p.to_string_lossy())));
        for (k, v) in &self.keys {
            map.insert(k.clone(), v.clone());
        }
        for k in self.flat.keys() {
            map.insert(k.to_string(), self.flat.get(k).cloned().unwrap_or(Value::Null));
        }
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("JSON values serialize");
        s.push('\n');
        s
    }

    fn key<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.keys.get(key).cloned().unwrap_or(Value::Null);
        serde_json::from_value(v).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.key::<Option<String>>(key)?.map(PathBuf::from))
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?.ok_or_else(|| Error::Config(format!("`{key}` is required")))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("an output directory (--out) is required".into()))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `run.json` and executes the command.
pub fn execute(rc: &RunConfig) -> Result<()> {
    let out = rc.out_dir()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("run.json"), &rc.to_json())?;
    match rc.command {
        Command::Synth => cmd_synth(rc, out),
        Command::Train => cmd_train(rc, out),
        Command::Eval => cmd_eval(rc, out),
        Command::Dissect => cmd_dissect(rc, out),
        Command::Ablate => cmd_ablate(rc, out),
    }
}

/// Replays a `run.json`, optionally into another directory.
pub fn rerun(run_file: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(run_file).map_err(|e| Error::io(run_file, e))?;
    let mut rc = RunConfig::from_json(&text)?;
    if out.is_some() {
        rc.out = out;
    }
    execute(&rc)
}

pub fn gen_config(rc: &RunConfig) -> Result<GenConfig> {
    let corpus = match rc.key::<String>("synth.kind")?.as_str() {
        "contextless" => Corpus::Contextless {
            len_min: rc.key("synth.len_min")?,
            len_max: rc.key("synth.len_max")?,
            charset: rc.key("synth.charset")?,
        },
        "lexicon" => {
            let words = match rc.path("synth.words")? {
                Some(p) => fs::read_to_string(&p)
                    .map_err(|e| Error::io(&p, e))?
                    .lines()
                    .map(str::trim)
                    .filter(|w| !w.is_empty())
                    .map(String::from)
                    .collect(),
                None => BUILTIN_WORDS.iter().map(|w| w.to_string()).collect(),
            };
            Corpus::Lexicon { words }
        }
        other => return Err(Error::Config(format!("unknown synth.kind `{other}` (expected contextless, lexicon)"))),
    };
    let gen = GenConfig {
        corpus,
        n: rc.key("synth.n")?,
        seed: rc.flat.seed()?,
        render: RenderConfig {
            height: rc.key("render.height")?,
            scale: rc.key("render.scale")?,
            gap: rc.key("render.gap")?,
            margin: rc.key("render.margin")?,
            jitter: rc.key("render.jitter")?,
            min_width: rc.key("render.min_width")?,
            max_width: rc.key("render.max_width")?,
        },
        t_max: rc.flat.get("position.t_max").and_then(Value::as_u64).unwrap_or(36) as usize,
    };
    gen.validate()?;
    Ok(gen)
}

fn cmd_synth(rc: &RunConfig, out: &Path) -> Result<()> {
    let gen = gen_config(rc)?;
    let samples = gen.generate()?;
    write_dataset(out, &samples, &gen)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let (manifest, samples) = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!("dataset {} is empty", dir.display())));
    }
    Ok((manifest, samples))
}

/// Training and validation sets: `data.val` if given, otherwise a seeded
/// `data.val_fraction` split of `data.train`.
fn train_val(rc: &RunConfig) -> Result<(DatasetManifest, Vec<Sample>, Vec<Sample>)> {
    let (manifest, samples) = load(&rc.required_path("data.train")?)?;
    if let Some(dir) = rc.path("data.val")? {
        let (_, val) = load(&dir)?;
        return Ok((manifest, samples, val));
    }
    let n_val = (samples.len() as f64 * rc.flat.val_fraction()?).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    SplitMix64::new(derive_seed(rc.flat.seed()?, "data.val_split")).shuffle(&mut order);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    if train_idx.is_empty() {
        return Err(Error::InsufficientData("validation split leaves no training samples".into()));
    }
    Ok((manifest, pick(&train_idx), pick(&val_idx)))
}

fn vocab_for(rc: &RunConfig, manifest: &DatasetManifest) -> Result<Vocab> {
    match rc.key::<Option<String>>("vocab.charset")?.as_deref() {
        None => Vocab::from_chars(&manifest.charset),
        Some("standard") => Ok(Vocab::standard()),
        Some(chars) => Vocab::from_chars(chars),
    }
}

/// Trains one model into `dir`; returns the final model.
fn train_into(flat: &FlatConfig, vocab: Vocab, train_set: &[Sample], val: &[Sample], dir: &Path) -> Result<Model> {
    let model_cfg = flat.model_config()?;
    let tc = flat.train_config()?;
    let mut model = Model::build(model_cfg, vocab, flat.seed()?)?;
    let outcome = train(&mut model, train_set, val, &tc, Some(dir))?;
    let last = outcome.rows.last().expect("at least one epoch");
    let summary = json!({
        "parameters": model.param_count(),
        "epochs": outcome.rows.len(),
        "best_epoch": outcome.best_epoch,
        "final_loss": last.loss,
        "final_train_acc": last.train_acc,
        "final_val_acc": last.val_acc,
    });
    write(&dir.join("summary.json"), &format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))?;
    Ok(model)
}

fn cmd_train(rc: &RunConfig, out: &Path) -> Result<()> {
    let (manifest, train_set, val) = train_val(rc)?;
    let vocab = vocab_for(rc, &manifest)?;
    train_into(&rc.flat, vocab, &train_set, &val, out)?;
    println!("trained; outputs in {}", out.display());
    Ok(())
}

fn cmd_eval(rc: &RunConfig, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load(&rc.required_path("eval.checkpoint")?)?;
    let (_, samples) = load(&rc.required_path("data.test")?)?;
    let case_sensitive = rc.flat.case_sensitive()?;
    let r = evaluate(&model, &samples, case_sensitive)?;
    r.write_tsv(&out.join("predictions.tsv"))?;
    let report = json!({
        "accuracy": r.accuracy(),
        "correct": r.correct,
        "total": r.total,
        "case_sensitive": case_sensitive,
    });
    write(&out.join("eval.json"), &format!("{}\n", serde_json::to_string_pretty(&report).unwrap()))?;
    println!("accuracy {:.4} ({}/{})", r.accuracy(), r.correct, r.total);
    Ok(())
}

fn cmd_dissect(rc: &RunConfig, out: &Path) -> Result<()> {
    let (model, _) = checkpoint::load(&rc.required_path("dissect.checkpoint")?)?;
    let (_, samples) = load(&rc.required_path("data.test")?)?;
    let lengths: Vec<usize> = rc.key("dissect.lengths")?;
    if lengths.is_empty() {
        return Err(Error::Config("dissect needs at least one length".into()));
    }
    let split: f64 = rc.key("dissect.split")?;
    let split_seed = derive_seed(rc.flat.seed()?, "dissect.split");
    let bank = collect_queries(&model, &samples, Some(&lengths))?;
    let mut summary = Map::new();
    for &l in &lengths {
        let s = similarity_matrix(&bank, l)?;
        export_heatmap(&s, &out.join(format!("s_{l}.csv")))?;
        let (report, _) = position_regression(&bank, l, split, split_seed)?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write(&out.join(format!("regression_{l}.json")), &format!("{text}\n"))?;
        println!(
            "l={l}: {} sequences, diag {:.4}, off-diag {:.4}, R² train {:.4} test {:.4}",
            s.count,
            s.diagonal_mean(),
            s.off_diagonal_mean(),
            report.r2_train,
            report.r2_test
        );
        summary.insert(
            l.to_string(),
            json!({
                "sequences": s.count,
                "diagonal_mean": s.diagonal_mean(),
                "off_diagonal_mean": s.off_diagonal_mean(),
                "band_ratios": s.band_ratios(),
                "band_trend": s.band_trend(),
                "zero_vectors": s.zero_vectors,
                "r2_train": report.r2_train,
                "r2_test": report.r2_test,
            }),
        );
    }
    let text = serde_json::to_string_pretty(&Value::Object(summary)).unwrap();
    write(&out.join("dissect.json"), &format!("{text}\n"))
}

/// Grid axis and its flat config key.
fn grid_axis(axis: &str) -> Result<&'static str> {
    Ok(match axis {
        "variant" => "model.variant",
        "fusion" => "fusion.mode",
        "position" => "position.mode",
        other => {
            return Err(Error::Config(format!(
                "unknown grid axis `{other}` (expected variant, fusion, position)"
            )))
        }
    })
}

/// Parses `axis=v1,v2,...`.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>)> {
    let (axis, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid `{spec}` is not of the form axis=v1,v2")))?;
    grid_axis(axis)?;
    let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid `{spec}` lists no values")));
    }
    Ok((axis.to_string(), values))
}

pub const ABLATE_HEADER: &str = "axis\tvalue\tdataset\tcorrect\ttotal\taccuracy";

fn cmd_ablate(rc: &RunConfig, out: &Path) -> Result<()> {
    let spec: Option<String> = rc.key("ablate.grid")?;
    let (axis, values) = parse_grid(spec.as_deref().unwrap_or(""))?;
    let key = grid_axis(&axis)?;
    // validate every setting before spending time on training
    let settings = values
        .iter()
        .map(|v| {
            let mut flat = rc.flat.clone();
            flat.set(key, json!(v))?;
            flat.model_config()?;
            Ok((v.clone(), flat))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tests = Vec::new();
    for (name, k) in [("context", "data.context"), ("random", "data.random")] {
        if let Some(dir) = rc.path(k)? {
            tests.push((name, load(&dir)?.1));
        }
    }
    if tests.is_empty() {
        return Err(Error::Config("ablate needs --data-context and/or --data-random".into()));
    }
    let (manifest, train_set, val) = train_val(rc)?;
    let vocab = vocab_for(rc, &manifest)?;
    let case_sensitive = rc.flat.case_sensitive()?;
    let mut table = format!("{ABLATE_HEADER}\n");
    for (value, flat) in &settings {
        let dir = out.join(format!("{axis}={value}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let model = train_into(flat, vocab.clone(), &train_set, &val, &dir)?;
        for (name, samples) in &tests {
            let r = evaluate(&model, samples, case_sensitive)?;
            let _ = writeln!(table, "{axis}\t{value}\t{name}\t{}\t{}\t{:.6}", r.correct, r.total, r.accuracy());
            println!("{axis}={value} {name}: {:.4}", r.accuracy());
        }
        write(&out.join("ablate.tsv"), &table)?;
    }
    Ok(())
}
