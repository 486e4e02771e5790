//! Position enhancement branch.
//!
//! The query at step `t` is a learned embedding `q_t` that depends on `t`
//! alone. Its attention keys come from the position aware module: a shared
//! two-layer LSTM scans every feature-map row left to right, and two 3×3
//! convolutions with a ReLU between them turn the second LSTM's hidden
//! states into the key map `F̂`. The glimpse aggregates the original map
//! `F` by default.

use crate::config::{ModelConfig, PositionMode};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::hybrid::{dot_attention, AttentionResult};
use crate::layers::{chw_to_rows, conv, init_conv, init_linear, lstm, lstm_size, rows_to_chw};
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Output of the position aware module. Each field is `[H·W, d]` in the
/// same row order as [`FeatureMap::data`].
#[derive(Clone, Copy, Debug)]
pub struct PositionAwareKeys {
    pub f1: Var,
    pub f2: Var,
    pub f_hat: Var,
}

pub fn init_params(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<()> {
    let d = cfg.d_model;
    params.insert("position.embedding", Tensor::uniform(&[cfg.t_max, d], -0.1, 0.1, rng))?;
    match cfg.position_mode {
        PositionMode::LearnedPam => {
            crate::layers::init_lstm(params, "position.pam.lstm0", d, d, rng)?;
            crate::layers::init_lstm(params, "position.pam.lstm1", d, d, rng)?;
            init_conv(params, "position.pam.conv0", d, d, 3, rng)?;
            init_conv(params, "position.pam.conv1", d, d, 3, rng)?;
        }
        PositionMode::Sincos => init_linear(params, "position.query_proj", 2 * d, d, rng)?,
        PositionMode::None => {}
    }
    Ok(())
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let extra = match cfg.position_mode {
        PositionMode::LearnedPam => 2 * lstm_size(d, d) + 2 * (d * d * 9 + d),
        PositionMode::Sincos => 2 * d * d,
        PositionMode::None => 0,
    };
    cfg.t_max * d + extra
}

/// Row `t` (1-based) of the position embedding table, as `[1, d]`.
pub fn position_embed(tape: &mut Tape, params: &ParamSet, t: usize) -> Result<Var> {
    let table = tape.param(params, "position.embedding")?;
    let t_max = tape.shape(table)[0];
    if t == 0 || t > t_max {
        return Err(Error::StepOverflow { step: t, max: t_max });
    }
    tape.gather_rows(table, &[t - 1])
}

/// Runs the shared row LSTMs and the conv head over `f`.
pub fn position_aware(tape: &mut Tape, params: &ParamSet, f: &FeatureMap) -> Result<PositionAwareKeys> {
    let (h, w, d) = (f.height, f.width, f.channels);
    let zero = Tensor::zeros(&[h, d]);
    let mut states = [(tape.constant(&zero), tape.constant(&zero)), (tape.constant(&zero), tape.constant(&zero))];
    let mut col1 = Vec::with_capacity(w);
    let mut col2 = Vec::with_capacity(w);
    for j in 0..w {
        // every row advances one column in lockstep; rows are the batch
        let rows: Vec<usize> = (0..h).map(|i| i * w + j).collect();
        let x = tape.gather_rows(f.data, &rows)?;
        let (h1, c1) = lstm(tape, params, "position.pam.lstm0", x, states[0].0, states[0].1)?;
        let (h2, c2) = lstm(tape, params, "position.pam.lstm1", h1, states[1].0, states[1].1)?;
        states = [(h1, c1), (h2, c2)];
        col1.push(h1);
        col2.push(h2);
    }
    // stacked columns are ordered j·H + i; restore i·W + j
    let order: Vec<usize> = (0..h).flat_map(|i| (0..w).map(move |j| j * h + i)).collect();
    let stacked1 = tape.concat(&col1, 0)?;
    let f1 = tape.gather_rows(stacked1, &order)?;
    let stacked2 = tape.concat(&col2, 0)?;
    let f2 = tape.gather_rows(stacked2, &order)?;

    let x = rows_to_chw(tape, f2, h, w)?;
    let x = conv(tape, params, "position.pam.conv0", x, 1)?;
    let x = tape.relu(x)?;
    let x = conv(tape, params, "position.pam.conv1", x, 1)?;
    let f_hat = chw_to_rows(tape, x)?;
    Ok(PositionAwareKeys { f1, f2, f_hat })
}

/// Attention of `q_t` over `keys`, aggregating `values`.
pub fn position_attend(tape: &mut Tape, q: Var, keys: Var, values: Var) -> Result<AttentionResult> {
    dot_attention(tape, q, keys, values)
}

/// Sinusoidal column encoding `[h·w, d]`:
/// `pe(pos, 2i) = sin(pos / 1000^(2i/d))`, `pe(pos, 2i+1) = cos(...)`,
/// with `pos` the column index.
pub fn sincos_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * d);
    for _ in 0..h {
        for j in 0..w {
            for k in 0..d {
                let i2 = (k - k % 2) as f64;
                let angle = j as f64 / 1000f64.powf(i2 / d as f64);
                data.push(if k % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![h * w, d], data).expect("h, w, d are positive")
}

/// `[F; pe]` along channels: `[H·W, 2d]`.
pub fn sincos_keys(tape: &mut Tape, f: &FeatureMap) -> Result<Var> {
    let pe = sincos_encoding(f.height, f.width, f.channels);
    let pe = tape.constant(&pe);
    tape.concat(&[f.data, pe], 1)
}

/// Lifts `q_t` to the width of the sinusoidal keys.
pub fn sincos_query(tape: &mut Tape, params: &ParamSet, q: Var) -> Result<Var> {
    let proj = tape.param(params, "position.query_proj")?;
    tape.matmul_nt(q, proj)
}
