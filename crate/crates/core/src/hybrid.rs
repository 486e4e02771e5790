//! Context-and-position branch: a two-layer LSTM turns the previous token
//! into the attention query `h_t`, and plain dot-product attention over the
//! feature map yields the glimpse `g_t`.

use crate::error::{Error, Result};
use crate::layers::{init_lstm, lstm, lstm_size};
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;
use crate::vocab::TokenId;

pub const LAYERS: usize = 2;

/// Per-layer `(h, c)` states, each `[1, d]`.
#[derive(Clone, Debug)]
pub struct HybridState {
    pub layers: Vec<(Var, Var)>,
}

impl HybridState {
    /// All-zero initial state.
    pub fn zeros(tape: &mut Tape, d: usize) -> Self {
        let layers = (0..LAYERS)
            .map(|_| {
                let z = Tensor::zeros(&[1, d]);
                (tape.constant(&z), tape.constant(&z))
            })
            .collect();
        Self { layers }
    }
}

/// Attention weights `alpha: [N, 1]` over the N grid positions and the
/// glimpse `[1, C]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionResult {
    pub alpha: Var,
    pub glimpse: Var,
}

pub fn init_params(params: &mut ParamSet, num_tokens: usize, d: usize, rng: &mut SplitMix64) -> Result<()> {
    params.insert("hybrid.embedding", Tensor::uniform(&[num_tokens, d], -0.1, 0.1, rng))?;
    for l in 0..LAYERS {
        init_lstm(params, &format!("hybrid.lstm{l}"), d, d, rng)?;
    }
    Ok(())
}

pub fn param_count(num_tokens: usize, d: usize) -> usize {
    num_tokens * d + LAYERS * lstm_size(d, d)
}

/// One decoder step of the query LSTM. Returns the top-layer hidden state
/// `h_t` (`[1, d]`) and the next state.
pub fn step_query(
    tape: &mut Tape,
    params: &ParamSet,
    prev_token: TokenId,
    state: &HybridState,
) -> Result<(Var, HybridState)> {
    let table = tape.param(params, "hybrid.embedding")?;
    let rows = tape.shape(table)[0];
    if prev_token >= rows {
        return Err(Error::Input(format!("token id {prev_token} outside the {rows}-token vocabulary")));
    }
    let mut x = tape.gather_rows(table, &[prev_token])?;
    let mut next = Vec::with_capacity(LAYERS);
    for (l, &(h, c)) in state.layers.iter().enumerate() {
        let (h1, c1) = lstm(tape, params, &format!("hybrid.lstm{l}"), x, h, c)?;
        next.push((h1, c1));
        x = h1;
    }
    Ok((x, HybridState { layers: next }))
}

/// `alpha = softmax_ij(⟨query, key_ij⟩)`, `glimpse = Σ alpha_ij · value_ij`.
/// Unscaled dot product, no projections.
pub fn dot_attention(tape: &mut Tape, query: Var, keys: Var, values: Var) -> Result<AttentionResult> {
    let (ks, vs) = (tape.shape(keys).to_vec(), tape.shape(values).to_vec());
    if ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::dim(format!("keys {ks:?} and values {vs:?} must share positions")));
    }
    if tape.shape(query) != [1, ks[1]] {
        return Err(Error::dim(format!(
            "query {:?} does not match key width {}",
            tape.shape(query),
            ks[1]
        )));
    }
    let scores = tape.matmul_nt(keys, query)?;
    let alpha = tape.softmax(scores, 0)?;
    let glimpse = tape.matmul_tn(alpha, values)?;
    Ok(AttentionResult { alpha, glimpse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn params(seed: u64, d: usize) -> ParamSet {
        let mut p = ParamSet::new();
        init_params(&mut p, 12, d, &mut SplitMix64::new(seed)).unwrap();
        p
    }

    #[test]
    fn first_query_is_input_independent_and_deterministic() {
        let p = params(1, 6);
        let run = |tok| {
            let mut tape = Tape::new();
            let s = HybridState::zeros(&mut tape, 6);
            let (h, _) = step_query(&mut tape, &p, tok, &s).unwrap();
            tape.value(h).to_vec()
        };
        assert_eq!(run(10), run(10));
    }

    #[test]
    fn different_previous_tokens_change_second_query() {
        for seed in 0..5 {
            let p = params(seed, 6);
            let run = |tok| {
                let mut tape = Tape::new();
                let s = HybridState::zeros(&mut tape, 6);
                let (_, s) = step_query(&mut tape, &p, 10, &s).unwrap();
                let (h2, _) = step_query(&mut tape, &p, tok, &s).unwrap();
                tape.value(h2).to_vec()
            };
            assert_ne!(run(0), run(1), "seed {seed}");
        }
    }

    #[test]
    fn token_outside_vocab_is_input_error() {
        let p = params(1, 4);
        let mut tape = Tape::new();
        let s = HybridState::zeros(&mut tape, 4);
        assert!(matches!(step_query(&mut tape, &p, 12, &s), Err(Error::Input(_))));
    }

    #[test]
    fn equal_keys_give_uniform_attention() {
        let mut rng = SplitMix64::new(2);
        let key = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let keys = Tensor::new(vec![6, 4], key.data().repeat(6)).unwrap();
        let values = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let query = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(&query), tape.constant(&keys), tape.constant(&values));
        let r = dot_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(r.alpha).iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
        for c in 0..4 {
            let mean: f64 = (0..6).map(|i| values.at(&[i, c])).sum::<f64>() / 6.0;
            assert!((tape.value(r.glimpse)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_query_selects_one_position() {
        let keys = Tensor::identity(4);
        let mut rng = SplitMix64::new(3);
        let values = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let query = Tensor::new(vec![1, 4], vec![0.0, 0.0, 200.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(&query), tape.constant(&keys), tape.constant(&values));
        let r = dot_attention(&mut tape, q, k, v).unwrap();
        assert!((tape.value(r.alpha)[2] - 1.0).abs() < 1e-12);
        for c in 0..3 {
            assert!((tape.value(r.glimpse)[c] - values.at(&[2, c])).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_loop_definition() {
        let mut rng = SplitMix64::new(4);
        // 2×3 map with 5 channels
        let keys = Tensor::uniform(&[6, 5], -1.0, 1.0, &mut rng);
        let values = Tensor::uniform(&[6, 5], -1.0, 1.0, &mut rng);
        let query = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(&query), tape.constant(&keys), tape.constant(&values));
        let r = dot_attention(&mut tape, q, k, v).unwrap();

        let mut e = [0.0; 6];
        for (ij, slot) in e.iter_mut().enumerate() {
            let s: f64 = (0..5).map(|c| query.data()[c] * keys.at(&[ij, c])).sum();
            *slot = s.exp();
        }
        let z: f64 = e.iter().sum();
        for ij in 0..6 {
            assert!((tape.value(r.alpha)[ij] - e[ij] / z).abs() < 1e-14);
        }
        for c in 0..5 {
            let g: f64 = (0..6).map(|ij| e[ij] / z * values.at(&[ij, c])).sum();
            assert!((tape.value(r.glimpse)[c] - g).abs() < 1e-14);
        }
        assert!((tape.value(r.alpha).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_dimension_mismatch() {
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(&[1, 3]));
        let k = tape.constant(&Tensor::zeros(&[6, 4]));
        let v = tape.constant(&Tensor::zeros(&[6, 4]));
        assert!(matches!(dot_attention(&mut tape, q, k, v), Err(Error::Dimension(_))));
        let q = tape.constant(&Tensor::zeros(&[1, 4]));
        let v5 = tape.constant(&Tensor::zeros(&[5, 4]));
        assert!(matches!(dot_attention(&mut tape, q, k, v5), Err(Error::Dimension(_))));
    }

    #[test]
    fn joint_permutation_leaves_glimpse_unchanged() {
        let mut rng = SplitMix64::new(5);
        let keys = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let values = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let query = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&r| t.data()[r * 4..r * 4 + 4].to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let mut tape = Tape::new();
        let q = tape.constant(&query);
        let (k, v) = (tape.constant(&keys), tape.constant(&values));
        let a = dot_attention(&mut tape, q, k, v).unwrap();
        let (kp, vp) = (tape.constant(&permute(&keys)), tape.constant(&permute(&values)));
        let b = dot_attention(&mut tape, q, kp, vp).unwrap();
        for (x, y) in tape.value(a.glimpse).iter().zip(tape.value(b.glimpse)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn glimpse_gradient_wrt_query() {
        for seed in 0..5 {
            let mut rng = SplitMix64::new(40 + seed);
            let keys = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
            let values = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
            let weights = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng);
            let mut p = ParamSet::new();
            p.insert("query", Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng)).unwrap();
            let r = grad_check(
                |tape, p| {
                    let q = tape.param(p, "query")?;
                    let (k, v) = (tape.constant(&keys), tape.constant(&values));
                    let att = dot_attention(tape, q, k, v)?;
                    let w = tape.constant(&weights);
                    let proj = tape.mul(att.glimpse, w)?;
                    tape.sum(proj)
                },
                &p,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }
}
