//! Convolutional feature extractor: a stack of 3×3 conv → ReLU → optional
//! max-pool blocks followed by a 1×1 channel reduction to `d_model`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{chw_to_rows, conv, init_conv};
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Encoder output: `data` is `[height·width, channels]`, row `i·width + j`
/// holding the feature vector at grid position `(i, j)`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub data: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMap {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn to_tensor(&self, tape: &Tape) -> Tensor {
        tape.tensor(self.data)
    }
}

pub fn init_params(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<()> {
    let mut c_in = 1;
    for (i, &c) in cfg.encoder.channels.iter().enumerate() {
        init_conv(params, &format!("encoder.block{i}"), c, c_in, 3, rng)?;
        c_in = c;
    }
    init_conv(params, "encoder.reduce", cfg.d_model, c_in, 1, rng)
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    let mut c_in = 1;
    let mut n = 0;
    for &c in &cfg.encoder.channels {
        n += c * c_in * 9 + c;
        c_in = c;
    }
    n + cfg.d_model * c_in + cfg.d_model
}

/// Feature-map size for an input image; a pure function of the sizes.
pub fn output_dims(cfg: &ModelConfig, height: usize, width: usize) -> Result<(usize, usize)> {
    let (mut h, mut w) = (height, width);
    for p in &cfg.encoder.pool {
        if h < p[0] || w < p[1] {
            return Err(Error::Input(format!(
                "{height}x{width} image is smaller than the encoder's receptive field"
            )));
        }
        h /= p[0];
        w /= p[1];
    }
    Ok((h, w))
}

/// Checks an image against the configured input bounds.
pub fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Input(format!("image must be [1, H, W], got {:?}", image.shape())));
    };
    if c != 1 {
        return Err(Error::Input("image must be single-channel".into()));
    }
    if h != cfg.input.height || w < cfg.input.min_width || w > cfg.input.max_width {
        return Err(Error::Input(format!(
            "image {h}x{w} outside configured bounds: height {}, width {}..={}",
            cfg.input.height, cfg.input.min_width, cfg.input.max_width
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0, 1]".into()));
    }
    output_dims(cfg, h, w).map(|_| ())
}

/// Runs the conv blocks, returning the raw `[C_last, H', W']` map.
pub fn backbone(tape: &mut Tape, params: &ParamSet, cfg: &ModelConfig, image: &Tensor) -> Result<Var> {
    check_image(cfg, image)?;
    let mut x = tape.constant(image);
    for (i, p) in cfg.encoder.pool.iter().enumerate() {
        x = conv(tape, params, &format!("encoder.block{i}"), x, 1)?;
        x = tape.relu(x)?;
        if p != &[1, 1] {
            x = tape.max_pool(x, p[0], p[1])?;
        }
    }
    Ok(x)
}

/// 1×1 convolution from the backbone width down to `d_model` channels.
pub fn reduce_channels(tape: &mut Tape, params: &ParamSet, raw: Var) -> Result<FeatureMap> {
    let y = conv(tape, params, "encoder.reduce", raw, 0)?;
    let [channels, height, width] = *tape.shape(y) else {
        unreachable!("conv2d output is [C, H, W]")
    };
    let data = chw_to_rows(tape, y)?;
    Ok(FeatureMap {
        data,
        height,
        width,
        channels,
    })
}

pub fn encode(tape: &mut Tape, params: &ParamSet, cfg: &ModelConfig, image: &Tensor) -> Result<FeatureMap> {
    let raw = backbone(tape, params, cfg, image)?;
    reduce_channels(tape, params, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig {
            d_model: 8,
            ..ModelConfig::default()
        };
        c.encoder.channels = vec![4, 4, 6, 8];
        c
    }

    fn built(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_params(cfg, &mut p, &mut SplitMix64::new(seed)).unwrap();
        p
    }

    #[test]
    fn shape_arithmetic() {
        let cfg = cfg();
        let p = built(&cfg, 1);
        let mut tape = Tape::new();
        let f = encode(&mut tape, &p, &cfg, &Tensor::full(&[1, 16, 64], 1.0)).unwrap();
        assert_eq!((f.height, f.width, f.channels), (4, 16, 8));
        assert_eq!(tape.shape(f.data), &[64, 8]);
        assert_eq!(output_dims(&cfg, 16, 40).unwrap(), (4, 10));
    }

    #[test]
    fn white_images_give_identical_finite_maps() {
        let cfg = cfg();
        let p = built(&cfg, 2);
        let run = || {
            let mut tape = Tape::new();
            let f = encode(&mut tape, &p, &cfg, &Tensor::full(&[1, 16, 32], 1.0)).unwrap();
            f.to_tensor(&tape)
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_bounds_images() {
        let cfg = cfg();
        let p = built(&cfg, 3);
        let mut tape = Tape::new();
        for img in [
            Tensor::full(&[1, 8, 32], 1.0),
            Tensor::full(&[1, 16, 8], 1.0),
            Tensor::full(&[1, 16, 80], 1.0),
            Tensor::full(&[1, 16, 32], 2.0),
        ] {
            assert!(matches!(encode(&mut tape, &p, &cfg, &img), Err(Error::Input(_))));
        }
        let mut tiny = cfg.clone();
        tiny.input.height = 2;
        tiny.input.min_width = 2;
        assert!(matches!(
            encode(&mut tape, &p, &tiny, &Tensor::full(&[1, 2, 2], 1.0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn translation_by_stride_shifts_one_column() {
        let cfg = cfg();
        let p = built(&cfg, 4);
        let glyph = |offset: usize| {
            let mut img = Tensor::full(&[1, 16, 64], 1.0);
            for i in 4..12 {
                for j in 0..6 {
                    if (i + j) % 3 != 0 {
                        img.data_mut()[i * 64 + 24 + offset + j] = 0.0;
                    }
                }
            }
            img
        };
        let mut tape = Tape::new();
        let a = encode(&mut tape, &p, &cfg, &glyph(0)).unwrap();
        let b = encode(&mut tape, &p, &cfg, &glyph(4)).unwrap();
        let (fa, fb) = (tape.tensor(a.data), tape.tensor(b.data));
        // interior columns, away from the zero padding at the borders
        for i in 0..4 {
            for j in 3..12 {
                for c in 0..8 {
                    let va = fa.at(&[i * 16 + j, c]);
                    let vb = fb.at(&[i * 16 + j + 1, c]);
                    assert!((va - vb).abs() < 1e-12, "({i},{j},{c})");
                }
            }
        }
    }

    #[test]
    fn reduce_identity_zero_and_per_position_matmul() {
        let mut rng = SplitMix64::new(5);
        let raw = Tensor::uniform(&[3, 2, 4], -1.0, 1.0, &mut rng);

        let mut ident = ParamSet::new();
        ident
            .insert("encoder.reduce.weight", Tensor::identity(3).reshape(vec![3, 3, 1, 1]).unwrap())
            .unwrap();
        ident.insert("encoder.reduce.bias", Tensor::zeros(&[3])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&raw);
        let f = reduce_channels(&mut tape, &ident, x).unwrap();
        let out = tape.tensor(f.data);
        for pos in 0..8 {
            for c in 0..3 {
                assert_eq!(out.at(&[pos, c]), raw.data()[c * 8 + pos]);
            }
        }

        let mut zero = ParamSet::new();
        zero.insert("encoder.reduce.weight", Tensor::zeros(&[5, 3, 1, 1])).unwrap();
        zero.insert("encoder.reduce.bias", Tensor::zeros(&[5])).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&raw);
        let f = reduce_channels(&mut tape, &zero, x).unwrap();
        assert!(tape.value(f.data).iter().all(|&v| v == 0.0));

        let w = Tensor::uniform(&[5, 3, 1, 1], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5], -1.0, 1.0, &mut rng);
        let mut rand = ParamSet::new();
        rand.insert("encoder.reduce.weight", w.clone()).unwrap();
        rand.insert("encoder.reduce.bias", b.clone()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&raw);
        let f = reduce_channels(&mut tape, &rand, x).unwrap();
        let out = tape.tensor(f.data);
        for pos in 0..8 {
            for o in 0..5 {
                let expect: f64 = b.data()[o] + (0..3).map(|c| w.data()[o * 3 + c] * raw.data()[c * 8 + pos]).sum::<f64>();
                assert!((out.at(&[pos, o]) - expect).abs() < 1e-12);
            }
        }
    }
}
