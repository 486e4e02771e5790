use std::collections::BTreeSet;

use rslab_core::datasynth::font::{glyph, GLYPH_H, GLYPH_W};
use rslab_core::datasynth::{
    bigram_entropy, gen_contextless, gen_lexicon, load_dataset, pgm, render_string, write_dataset, GenConfig,
    RenderConfig, ALNUM, BUILTIN_WORDS,
};
use rslab_core::numerics::Tensor;
use rslab_core::rng::SplitMix64;
use rslab_core::vocab::Vocab;
use rslab_core::Error;

fn still() -> RenderConfig {
    RenderConfig {
        jitter: 0,
        ..RenderConfig::default()
    }
}

#[test]
fn font_covers_the_vocabulary_with_distinct_glyphs() {
    let chars = Vocab::standard().chars();
    let mut seen = BTreeSet::new();
    for c in chars.chars() {
        let rows = glyph(c).unwrap_or_else(|| panic!("no glyph for {c:?}"));
        assert!(rows.iter().all(|&r| r < 1 << GLYPH_W));
        assert!(rows.iter().any(|&r| r != 0), "{c:?} is blank");
        assert!(seen.insert(*rows), "{c:?} duplicates another glyph");
    }
    assert_eq!(seen.len(), 90);
}

#[test]
fn empty_text_renders_a_white_canvas() {
    let img = render_string("", &RenderConfig::default(), &mut SplitMix64::new(1)).unwrap();
    assert_eq!(img.shape(), &[1, 16, 16]);
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn rendering_is_deterministic_and_rejects_unknown_glyphs() {
    let cfg = RenderConfig::default();
    let a = render_string("Ab3?", &cfg, &mut SplitMix64::new(9)).unwrap();
    let b = render_string("Ab3?", &cfg, &mut SplitMix64::new(9)).unwrap();
    assert_eq!(a, b);
    for bad in ["é", "a b", "tab\t"] {
        assert!(matches!(render_string(bad, &cfg, &mut SplitMix64::new(0)), Err(Error::Input(_))), "{bad:?}");
    }
}

#[test]
fn single_glyph_ink_stays_inside_its_cell() {
    for jitter in [0usize, 1] {
        let cfg = RenderConfig {
            jitter,
            ..RenderConfig::default()
        };
        for seed in 0..20 {
            let img = render_string("A", &cfg, &mut SplitMix64::new(seed)).unwrap();
            let (h, w) = (img.shape()[1], img.shape()[2]);
            // the cell is margin .. margin + 5·scale, widened by the jitter
            let lo = cfg.margin - jitter;
            let hi = cfg.margin + GLYPH_W * cfg.scale + jitter;
            let top = (h - GLYPH_H * cfg.scale) / 2 - jitter;
            let bottom = top + GLYPH_H * cfg.scale + 2 * jitter;
            let mut mass = 0.0;
            for x in 0..w {
                let ink: f64 = (0..h).map(|y| 1.0 - img.at(&[0, y, x])).sum();
                if !(lo..hi).contains(&x) {
                    assert_eq!(ink, 0.0, "column {x} outside the cell has ink");
                }
                mass += ink;
            }
            for y in (0..top).chain(bottom..h) {
                assert!((0..w).all(|x| img.at(&[0, y, x]) == 1.0), "row {y}");
            }
            // 'A' has 18 lit cells, each scale² pixels
            assert_eq!(mass, (18 * cfg.scale * cfg.scale) as f64);
        }
    }
}

#[test]
fn widths_are_clamped_and_long_strings_squeezed() {
    let cfg = still();
    for n in 1..=12 {
        let text: String = "W".repeat(n);
        let img = render_string(&text, &cfg, &mut SplitMix64::new(0)).unwrap();
        let natural = cfg.margin + n * (GLYPH_W * cfg.scale + cfg.gap);
        assert_eq!(img.shape()[2], natural.clamp(16, 64));
        assert!(img.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn labels_never_leak_beyond_glyphs() {
    // identical labels render identically whatever the sample seed
    let cfg = GenConfig {
        render: still(),
        ..GenConfig::lexicon(50, &["the", "cat"], 4)
    };
    let samples = cfg.generate().unwrap();
    let the: Vec<&Tensor> = samples.iter().filter(|s| s.label == "the").map(|s| &s.image).collect();
    assert!(the.len() > 5);
    assert!(the.windows(2).all(|p| p[0] == p[1]));
}

#[test]
fn contextless_generation_is_deterministic_and_shardable() {
    let a = gen_contextless(500, (5, 12), ALNUM, 7).unwrap();
    assert_eq!(a.len(), 500);
    assert_eq!(a, gen_contextless(500, (5, 12), ALNUM, 7).unwrap());
    assert_ne!(a, gen_contextless(500, (5, 12), ALNUM, 8).unwrap());
    let cfg = GenConfig::contextless(500, (5, 12), ALNUM, 7);
    assert_eq!(cfg.generate_range(123, 180).unwrap(), a[123..180].to_vec());
    for s in &a {
        let n = s.label.chars().count();
        assert!((5..=12).contains(&n));
        assert!(s.label.chars().all(|c| ALNUM.contains(c)));
        assert!((16..=64).contains(&s.image.shape()[2]));
        assert_eq!(cfg.label(0), a[0].label);
    }
}

#[test]
fn contextless_lengths_and_ranges_are_validated() {
    assert!(matches!(gen_contextless(5, (0, 3), ALNUM, 0), Err(Error::Config(_))));
    assert!(matches!(gen_contextless(5, (4, 3), ALNUM, 0), Err(Error::Config(_))));
    assert!(matches!(gen_contextless(5, (1, 36), ALNUM, 0), Err(Error::Config(_))));
    assert!(gen_contextless(5, (1, 35), ALNUM, 0).is_ok());
    assert!(matches!(gen_contextless(5, (1, 3), "aa", 0), Err(Error::Config(_))));
    assert!(matches!(gen_contextless(5, (1, 3), "aé", 0), Err(Error::Input(_))));
    assert!(matches!(gen_contextless(0, (1, 3), "ab", 0), Err(Error::Config(_))));
}

#[test]
fn character_histogram_is_uniform_within_three_sigma() {
    let n = 100_000;
    let cfg = GenConfig::contextless(n, (1, 8), ALNUM, 2024);
    let mut counts = [0usize; 62];
    let mut lengths = [0usize; 9];
    let mut total = 0usize;
    for i in 0..n {
        let label = cfg.label(i);
        lengths[label.chars().count()] += 1;
        for c in label.chars() {
            counts[ALNUM.find(c).unwrap()] += 1;
            total += 1;
        }
    }
    let p = 1.0 / 62.0;
    let (mean, sd) = (total as f64 * p, (total as f64 * p * (1.0 - p)).sqrt());
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "char {i}: {c} vs {mean} ± {sd}");
    }
    let (mean, sd) = (n as f64 / 8.0, (n as f64 * 0.125 * 0.875).sqrt());
    for &c in &lengths[1..] {
        assert!((c as f64 - mean).abs() < 3.0 * sd, "{lengths:?}");
    }
}

#[test]
fn lexicon_corpus_has_lower_bigram_entropy() {
    assert!(gen_lexicon(20, &["the"], 3).unwrap().iter().all(|s| s.label == "the"));
    assert!(matches!(gen_lexicon(20, &[], 3), Err(Error::Input(_))));
    assert_eq!(gen_lexicon(40, BUILTIN_WORDS, 3).unwrap(), gen_lexicon(40, BUILTIN_WORDS, 3).unwrap());

    let n = 3000;
    let lex = GenConfig::lexicon(n, BUILTIN_WORDS, 5);
    let lex_labels: Vec<String> = (0..n).map(|i| lex.label(i)).collect();
    let total_chars: usize = lex_labels.iter().map(|l| l.len()).sum();
    // contextless labels over the same alphabet, up to the same character count
    let rand = GenConfig::contextless(10 * n, (3, 7), &lex.charset(), 5);
    let mut rand_labels = Vec::new();
    let mut rand_chars = 0;
    for i in 0.. {
        if rand_chars >= total_chars {
            break;
        }
        let l = rand.label(i);
        rand_chars += l.len();
        rand_labels.push(l);
    }
    let (h_lex, h_rand) = (bigram_entropy(&lex_labels), bigram_entropy(&rand_labels));
    assert!(h_lex < h_rand, "{h_lex} vs {h_rand}");
}

#[test]
fn bigram_entropy_of_known_distributions() {
    assert_eq!(bigram_entropy(&["aaaa"]), 0.0);
    // two equiprobable bigrams → one bit
    assert!((bigram_entropy(&["ab", "ba"]) - 1.0).abs() < 1e-15);
    assert!((bigram_entropy(&["abcde"]) - 2.0).abs() < 1e-15);
}

#[test]
fn dataset_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::contextless(40, (1, 6), "0123456789!?[]\\'\"", 11);
    let samples = cfg.generate().unwrap();
    let written = write_dataset(dir.path(), &samples, &cfg).unwrap();
    let (manifest, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(manifest.seed, 11);
    assert_eq!(loaded.len(), 40);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.image.shape(), b.image.shape());
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let gen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gen.json")).unwrap()).unwrap();
    assert_eq!(gen["font"], "builtin-5x7");
    assert_eq!(gen["seed"], 11);

    std::fs::remove_file(dir.path().join("images/000003.pgm")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn pgm_codec_round_trips_and_rejects_bad_input() {
    let img = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 128.0 / 255.0, 1.0, 0.0, 3.0 / 255.0]).unwrap();
    let bytes = pgm::encode(&img).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(pgm::decode(&bytes).unwrap(), img);
    let commented = b"P5\n# made by hand\n3 2\n255\n\x00\xff\x80\xff\x00\x03";
    assert_eq!(pgm::decode(commented).unwrap(), img);
    assert!(matches!(pgm::decode(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
    assert!(matches!(pgm::decode(b"P5\n2 2\n255\n\x00"), Err(Error::Format(_))));
    assert!(matches!(pgm::decode(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Format(_))));
    assert!(matches!(pgm::encode(&Tensor::zeros(&[2, 2])), Err(Error::Input(_))));
}
