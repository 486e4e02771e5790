//! Synthetic text images: black glyph strings on a white background.
//!
//! Two corpora are supported. Contextless strings draw every character
//! uniformly and independently, like random-string benchmarks. Lexicon
//! strings sample whole words from a word list, so adjacent characters are
//! predictable. Every sample is derived from `hash(seed, index)`, so any
//! index range can be generated on its own and matches the full run.

pub mod font;
pub mod pgm;
mod words;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel;
use crate::rng::{derive_seed, index_seed, SplitMix64};
use font::{glyph, GLYPH_H, GLYPH_W};

pub use words::BUILTIN_WORDS;

pub const FONT_NAME: &str = "builtin-5x7";

/// Layout of rendered strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    /// Nearest-neighbor magnification of the 5×7 font.
    pub scale: usize,
    /// Blank columns between glyph cells.
    pub gap: usize,
    /// Blank columns before the first glyph.
    pub margin: usize,
    /// Maximum per-glyph offset in pixels, applied independently along
    /// both axes.
    pub jitter: usize,
    pub min_width: usize,
    pub max_width: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 16,
            scale: 2,
            gap: 2,
            margin: 2,
            jitter: 1,
            min_width: 16,
            max_width: 64,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.min_width == 0 || self.min_width > self.max_width {
            return Err(Error::Config("render: scale ≥ 1 and 0 < min_width ≤ max_width required".into()));
        }
        if self.height < GLYPH_H * self.scale + 2 * self.jitter {
            return Err(Error::Config(format!(
                "render: height {} cannot hold {}-pixel glyphs with jitter {}",
                self.height,
                GLYPH_H * self.scale,
                self.jitter
            )));
        }
        if self.jitter > self.margin.max(self.gap) {
            return Err(Error::Config("render: jitter must not exceed margin or gap".into()));
        }
        Ok(())
    }

    /// Horizontal advance per character.
    pub fn pitch(&self) -> usize {
        GLYPH_W * self.scale + self.gap
    }

    /// Unclamped canvas width for `n` characters.
    pub fn natural_width(&self, n: usize) -> usize {
        self.margin + n * self.pitch()
    }

    /// Final width for `n` characters: the natural width clamped to the
    /// configured bounds.
    pub fn width(&self, n: usize) -> usize {
        self.natural_width(n).clamp(self.min_width, self.max_width)
    }
}

/// Renders `text` as a `[1, height, width]` image. White is 1, ink is 0.
/// Strings wider than `max_width` are squeezed horizontally by
/// nearest-neighbor sampling; narrower than `min_width` are padded right.
pub fn render_string(text: &str, cfg: &RenderConfig, rng: &mut SplitMix64) -> Result<Tensor> {
    cfg.validate()?;
    let chars: Vec<char> = text.chars().collect();
    let glyphs = chars
        .iter()
        .map(|&c| glyph(c).ok_or_else(|| Error::Input(format!("no glyph for {c:?} in the built-in font"))))
        .collect::<Result<Vec<_>>>()?;
    let (h, natural) = (cfg.height, cfg.natural_width(chars.len()));
    let mut canvas = vec![1.0; h * natural];
    let base_top = (h - GLYPH_H * cfg.scale) / 2;
    let j = cfg.jitter as i64;
    for (k, rows) in glyphs.iter().enumerate() {
        let (dx, dy) = if j > 0 {
            (rng.below(2 * j as u64 + 1) as i64 - j, rng.below(2 * j as u64 + 1) as i64 - j)
        } else {
            (0, 0)
        };
        let left = (cfg.margin + k * cfg.pitch()) as i64 + dx;
        let top = base_top as i64 + dy;
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - c) & 1 == 0 {
                    continue;
                }
                for sy in 0..cfg.scale {
                    for sx in 0..cfg.scale {
                        let y = top + (r * cfg.scale + sy) as i64;
                        let x = left + (c * cfg.scale + sx) as i64;
                        if (0..h as i64).contains(&y) && (0..natural as i64).contains(&x) {
                            canvas[y as usize * natural + x as usize] = 0.0;
                        }
                    }
                }
            }
        }
    }
    let w = cfg.width(chars.len());
    let mut out = vec![1.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let src = if natural > w { (2 * x + 1) * natural / (2 * w) } else { x };
            if src < natural {
                out[y * w + x] = canvas[y * natural + src];
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// One labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: String,
    /// Generation metadata; absent for samples loaded from disk.
    pub meta: Option<SampleMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub scale: usize,
    pub jitter: usize,
}

/// What to draw labels from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corpus {
    /// Uniform i.i.d. characters with a uniform length in `len_min..=len_max`.
    Contextless {
        len_min: usize,
        len_max: usize,
        charset: String,
    },
    /// Words drawn uniformly with replacement.
    Lexicon { words: Vec<String> },
}

/// A complete, reproducible generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub corpus: Corpus,
    pub n: usize,
    pub seed: u64,
    pub render: RenderConfig,
    /// Decoder step limit; labels must leave room for EOS.
    pub t_max: usize,
}

pub const ALNUM: &str = "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

impl GenConfig {
    pub fn contextless(n: usize, len: (usize, usize), charset: &str, seed: u64) -> Self {
        Self {
            corpus: Corpus::Contextless {
                len_min: len.0,
                len_max: len.1,
                charset: charset.to_string(),
            },
            n,
            seed,
            render: RenderConfig::default(),
            t_max: 36,
        }
    }

    pub fn lexicon(n: usize, words: &[&str], seed: u64) -> Self {
        Self {
            corpus: Corpus::Lexicon {
                words: words.iter().map(|w| w.to_string()).collect(),
            },
            n,
            seed,
            render: RenderConfig::default(),
            t_max: 36,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.n == 0 {
            return Err(Error::Config("n must be ≥ 1".into()));
        }
        let max_len = self.t_max.saturating_sub(1);
        let check_chars = |s: &str| match s.chars().find(|&c| glyph(c).is_none()) {
            Some(c) => Err(Error::Input(format!("character {c:?} has no glyph"))),
            None => Ok(()),
        };
        match &self.corpus {
            Corpus::Contextless {
                len_min,
                len_max,
                charset,
            } => {
                if *len_min < 1 || len_min > len_max || *len_max > max_len {
                    return Err(Error::Config(format!(
                        "length range {len_min}..{len_max} must lie within 1..{max_len}"
                    )));
                }
                let mut seen: Vec<char> = charset.chars().collect();
                seen.sort_unstable();
                seen.dedup();
                if seen.is_empty() || seen.len() != charset.chars().count() {
                    return Err(Error::Config("charset must be non-empty without repeats".into()));
                }
                check_chars(charset)
            }
            Corpus::Lexicon { words } => {
                if words.is_empty() {
                    return Err(Error::Input("word list is empty".into()));
                }
                for w in words {
                    if w.is_empty() || w.chars().count() > max_len {
                        return Err(Error::Input(format!("word {w:?} must have 1..={max_len} characters")));
                    }
                    check_chars(w)?;
                }
                Ok(())
            }
        }
    }

    /// Characters labels can contain, in first-seen order.
    pub fn charset(&self) -> String {
        match &self.corpus {
            Corpus::Contextless { charset, .. } => charset.clone(),
            Corpus::Lexicon { words } => {
                let mut out = String::new();
                for c in words.iter().flat_map(|w| w.chars()) {
                    if !out.contains(c) {
                        out.push(c);
                    }
                }
                out
            }
        }
    }

    fn sample_seed(&self, index: usize) -> u64 {
        index_seed(derive_seed(self.seed, "synth.sample"), index as u64)
    }

    fn draw_label(&self, rng: &mut SplitMix64) -> String {
        match &self.corpus {
            Corpus::Contextless {
                len_min,
                len_max,
                charset,
            } => {
                let chars: Vec<char> = charset.chars().collect();
                let len = rng.range_inclusive(*len_min, *len_max);
                (0..len).map(|_| chars[rng.below(chars.len() as u64) as usize]).collect()
            }
            Corpus::Lexicon { words } => words[rng.below(words.len() as u64) as usize].clone(),
        }
    }

    /// Label of sample `index` without rendering it.
    pub fn label(&self, index: usize) -> String {
        self.draw_label(&mut SplitMix64::new(self.sample_seed(index)))
    }

    /// Sample `index` of this request.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        let seed = self.sample_seed(index);
        let mut rng = SplitMix64::new(seed);
        let label = self.draw_label(&mut rng);
        let image = render_string(&label, &self.render, &mut rng)?;
        Ok(Sample {
            image,
            label,
            meta: Some(SampleMeta {
                seed,
                scale: self.render.scale,
                jitter: self.render.jitter,
            }),
        })
    }

    /// Samples `start..end`; equal to the same slice of [`GenConfig::generate`].
    pub fn generate_range(&self, start: usize, end: usize) -> Result<Vec<Sample>> {
        self.validate()?;
        let end = end.min(self.n);
        let start = start.min(end);
        parallel::map_range(end - start, |i| self.sample(start + i))
            .into_iter()
            .collect()
    }

    pub fn generate(&self) -> Result<Vec<Sample>> {
        self.generate_range(0, self.n)
    }
}

/// `n` contextless samples with lengths in `len` over `charset`.
pub fn gen_contextless(n: usize, len: (usize, usize), charset: &str, seed: u64) -> Result<Vec<Sample>> {
    GenConfig::contextless(n, len, charset, seed).generate()
}

/// `n` samples of words drawn from `words`.
pub fn gen_lexicon(n: usize, words: &[&str], seed: u64) -> Result<Vec<Sample>> {
    GenConfig::lexicon(n, words, seed).generate()
}

/// Bigram entropy in bits over adjacent character pairs within labels.
pub fn bigram_entropy<S: AsRef<str>>(labels: &[S]) -> f64 {
    let mut counts: BTreeMap<(char, char), usize> = BTreeMap::new();
    let mut total = 0usize;
    for label in labels {
        let chars: Vec<char> = label.as_ref().chars().collect();
        for pair in chars.windows(2) {
            *counts.entry((pair[0], pair[1])).or_default() += 1;
            total += 1;
        }
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// On-disk dataset index.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// `(relative image path, label)` rows.
    pub rows: Vec<(String, String)>,
    pub charset: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct GenEcho {
    font: String,
    charset: String,
    #[serde(flatten)]
    config: GenConfig,
}

/// Writes `<dir>/images/*.pgm`, `<dir>/manifest.tsv` and `<dir>/gen.json`.
pub fn write_dataset(dir: &Path, samples: &[Sample], gen: &GenConfig) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut tsv = String::new();
    for (i, s) in samples.iter().enumerate() {
        if s.label.contains(['\t', '\n', '\r']) {
            return Err(Error::Input(format!("label {:?} cannot be stored in a TSV manifest", s.label)));
        }
        let rel = format!("images/{i:06}.pgm");
        pgm::write(&dir.join(&rel), &s.image)?;
        tsv.push_str(&format!("{rel}\t{}\n", s.label));
        rows.push((rel, s.label.clone()));
    }
    let manifest_path = dir.join("manifest.tsv");
    fs::write(&manifest_path, tsv).map_err(|e| Error::io(&manifest_path, e))?;
    let echo = GenEcho {
        font: FONT_NAME.into(),
        charset: gen.charset(),
        config: gen.clone(),
    };
    let gen_path = dir.join("gen.json");
    let text = serde_json::to_string_pretty(&echo).map_err(|e| Error::Format(e.to_string()))? + "\n";
    fs::write(&gen_path, text).map_err(|e| Error::io(&gen_path, e))?;
    Ok(DatasetManifest {
        rows,
        charset: gen.charset(),
        seed: gen.seed,
    })
}

/// Reads a dataset written by [`write_dataset`]. The manifest must list
/// exactly the images present on disk.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let (path, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest.tsv line {}: expected path<TAB>label", n + 1)))?;
        rows.push((path.to_string(), label.to_string()));
    }
    let gen_path = dir.join("gen.json");
    let (charset, seed) = match fs::read_to_string(&gen_path) {
        Ok(t) => {
            let echo: GenEcho = serde_json::from_str(&t).map_err(|e| Error::Format(format!("gen.json: {e}")))?;
            (echo.charset, echo.config.seed)
        }
        Err(e) => return Err(Error::io(&gen_path, e)),
    };
    let images = dir.join("images");
    let on_disk = fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .count();
    if on_disk != rows.len() {
        return Err(Error::Format(format!(
            "manifest lists {} images but {} are on disk",
            rows.len(),
            on_disk
        )));
    }
    let samples = parallel::map_ordered(&rows, |(path, label)| {
        pgm::read(&dir.join(path)).map(|image| Sample {
            image,
            label: label.clone(),
            meta: None,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((DatasetManifest { rows, charset, seed }, samples))
}
