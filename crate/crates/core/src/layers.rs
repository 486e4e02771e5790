//! Parameter initializers and small layer helpers shared by the decoder
//! components.

use crate::error::Result;
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// He-uniform conv kernel `[c_out, c_in, k, k]` with a zero bias.
pub(crate) fn init_conv(
    params: &mut ParamSet,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut SplitMix64,
) -> Result<()> {
    let bound = (6.0 / (c_in * k * k) as f64).sqrt();
    params.insert(format!("{prefix}.weight"), Tensor::uniform(&[c_out, c_in, k, k], -bound, bound, rng))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))
}

/// LSTM weights uniform in ±1/√d; forget-gate bias starts at 1.
pub(crate) fn init_lstm(params: &mut ParamSet, prefix: &str, d_in: usize, d: usize, rng: &mut SplitMix64) -> Result<()> {
    let bound = 1.0 / (d as f64).sqrt();
    params.insert(format!("{prefix}.w_ih"), Tensor::uniform(&[4 * d, d_in], -bound, bound, rng))?;
    params.insert(format!("{prefix}.w_hh"), Tensor::uniform(&[4 * d, d], -bound, bound, rng))?;
    let mut b = Tensor::uniform(&[4 * d], -bound, bound, rng);
    b.data_mut()[d..2 * d].iter_mut().for_each(|x| *x = 1.0);
    params.insert(format!("{prefix}.b"), b)
}

/// Glorot-uniform `[d_out, d_in]` matrix.
pub(crate) fn init_linear(params: &mut ParamSet, name: &str, d_out: usize, d_in: usize, rng: &mut SplitMix64) -> Result<()> {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    params.insert(name.to_string(), Tensor::uniform(&[d_out, d_in], -bound, bound, rng))
}

pub(crate) fn conv(tape: &mut Tape, params: &ParamSet, prefix: &str, x: Var, pad: usize) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, pad)
}

pub(crate) fn lstm(tape: &mut Tape, params: &ParamSet, prefix: &str, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let w_ih = tape.param(params, &format!("{prefix}.w_ih"))?;
    let w_hh = tape.param(params, &format!("{prefix}.w_hh"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    tape.lstm_cell(x, h, c, w_ih, w_hh, b)
}

/// Number of scalars in one LSTM layer.
pub(crate) fn lstm_size(d_in: usize, d: usize) -> usize {
    4 * d * d_in + 4 * d * d + 4 * d
}

/// `[C, H, W]` → `[H·W, C]` (one feature vector per row, row-major over
/// positions).
pub(crate) fn chw_to_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// `[H·W, C]` → `[C, H, W]`.
pub(crate) fn rows_to_chw(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose(x)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, h, w])
}
