//! The assembled recognizer: encoder, hybrid branch, position enhancement
//! branch, fusion and classifier, with the ablation switches of
//! [`ModelConfig`].

pub mod checkpoint;

use serde::Serialize;

use crate::config::{FusionMode, ModelConfig, PositionMode, PositionValues, Variant};
use crate::encoder::{self, FeatureMap};
use crate::error::{Error, Result};
use crate::fusion;
use crate::hybrid::{self, AttentionResult, HybridState};
use crate::numerics::{Gradients, ParamSet, Tape, Tensor, Var};
use crate::position;
use crate::rng::{derive_seed, SplitMix64};
use crate::vocab::{TokenId, Vocab};

/// Everything the decoder computed at one step. Branch-specific fields are
/// `None` when the variant lacks that branch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoderStepRecord {
    /// 1-based step index.
    pub t: usize,
    pub h_t: Option<Vec<f64>>,
    pub q_t: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub alpha_prime: Option<Vec<f64>>,
    pub g_t: Option<Vec<f64>>,
    pub g_prime_t: Option<Vec<f64>>,
    /// Fusion gate; only present for dynamic fusion in the full variant.
    pub w_t: Option<Vec<f64>>,
    pub g_f: Vec<f64>,
    pub predicted: TokenId,
    pub probability: f64,
}

/// Loss and parameter gradients of one training sample.
#[derive(Clone, Debug)]
pub struct SampleGrads {
    /// Sum of the per-step cross-entropies.
    pub loss_sum: f64,
    /// Supervised steps, EOS included.
    pub steps: usize,
    /// Gradient of `loss_sum`.
    pub grads: Gradients,
}

/// Encoder output plus the step-independent position-branch tensors.
struct Prepared {
    fm: FeatureMap,
    pos_keys: Option<Var>,
    pos_values: Var,
}

#[derive(Clone, Copy)]
struct StepVars {
    h: Option<Var>,
    q: Option<Var>,
    hybrid: Option<AttentionResult>,
    position: Option<AttentionResult>,
    gate: Option<Var>,
    g_f: Var,
}

/// A recognizer: configuration, vocabulary and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    /// Replaces the dynamic fusion gate by a constant. Diagnostic only.
    pub gate_override: Option<f64>,
}

impl Model {
    /// Deterministic initialization. Each component draws from its own
    /// seed stream, so variants built from one seed share the weights of
    /// the components they have in common.
    pub fn build(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let stream = |purpose: &str| SplitMix64::new(derive_seed(seed, purpose));
        let mut params = ParamSet::new();
        encoder::init_params(&config, &mut params, &mut stream("init.encoder"))?;
        if config.has_hybrid() {
            hybrid::init_params(&mut params, vocab.num_tokens(), d, &mut stream("init.hybrid"))?;
        }
        if config.has_position() {
            position::init_params(&config, &mut params, &mut stream("init.position"))?;
        }
        if config.variant == Variant::Full {
            fusion::init_params(config.fusion_mode, d, &mut params, &mut stream("init.fusion"))?;
        }
        fusion::init_classifier(vocab.num_classes(), d, &mut params, &mut stream("init.classifier"))?;
        Ok(Self {
            config,
            vocab,
            params,
            gate_override: None,
        })
    }

    /// Parameter count implied by the configuration, without building.
    pub fn expected_param_count(config: &ModelConfig, vocab: &Vocab) -> usize {
        let d = config.d_model;
        let mut n = encoder::param_count(config) + vocab.num_classes() * d + vocab.num_classes();
        if config.has_hybrid() {
            n += hybrid::param_count(vocab.num_tokens(), d);
        }
        if config.has_position() {
            n += position::param_count(config);
        }
        if config.variant == Variant::Full {
            n += fusion::param_count(config.fusion_mode, d);
        }
        n
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn prepare(&self, tape: &mut Tape, image: &Tensor) -> Result<Prepared> {
        let fm = encoder::encode(tape, &self.params, &self.config, image)?;
        if !self.config.has_position() {
            return Ok(Prepared {
                fm,
                pos_keys: None,
                pos_values: fm.data,
            });
        }
        let (keys, values) = match self.config.position_mode {
            PositionMode::LearnedPam => {
                let k = position::position_aware(tape, &self.params, &fm)?;
                let values = match self.config.position_values {
                    PositionValues::F => fm.data,
                    PositionValues::FHat => k.f_hat,
                };
                (k.f_hat, values)
            }
            PositionMode::Sincos => (position::sincos_keys(tape, &fm)?, fm.data),
            PositionMode::None => (fm.data, fm.data),
        };
        Ok(Prepared {
            fm,
            pos_keys: Some(keys),
            pos_values: values,
        })
    }

    fn step(
        &self,
        tape: &mut Tape,
        prep: &Prepared,
        state: &mut Option<HybridState>,
        t: usize,
        prev: TokenId,
    ) -> Result<StepVars> {
        let p = &self.params;
        let (h, hyb) = match state {
            Some(st) => {
                let (h, next) = hybrid::step_query(tape, p, prev, st)?;
                *st = next;
                let att = hybrid::dot_attention(tape, h, prep.fm.data, prep.fm.data)?;
                (Some(h), Some(att))
            }
            None => (None, None),
        };
        let (q, pos) = match prep.pos_keys {
            Some(keys) => {
                let q = position::position_embed(tape, p, t)?;
                let query = match self.config.position_mode {
                    PositionMode::Sincos => position::sincos_query(tape, p, q)?,
                    _ => q,
                };
                let att = position::position_attend(tape, query, keys, prep.pos_values)?;
                (Some(q), Some(att))
            }
            None => (None, None),
        };
        let (g_f, gate) = match (hyb, pos) {
            (Some(a), Some(b)) => self.fuse(tape, a.glimpse, b.glimpse)?,
            (Some(a), None) => (a.glimpse, None),
            (None, Some(b)) => (b.glimpse, None),
            (None, None) => return Err(Error::Config("model has neither decoder branch".into())),
        };
        Ok(StepVars {
            h,
            q,
            hybrid: hyb,
            position: pos,
            gate,
            g_f,
        })
    }

    fn fuse(&self, tape: &mut Tape, g: Var, g_prime: Var) -> Result<(Var, Option<Var>)> {
        let p = &self.params;
        match (self.config.fusion_mode, self.gate_override) {
            (FusionMode::Dynamic, Some(value)) => {
                let cat = tape.concat(&[g, g_prime], 1)?;
                let w_p = tape.param(p, "fusion.w_p")?;
                let proj = tape.matmul_nt(cat, w_p)?;
                let d = tape.shape(proj)[1];
                let gate = tape.constant(&Tensor::full(&[1, d], value));
                Ok((tape.mul(gate, proj)?, Some(gate)))
            }
            (FusionMode::Dynamic, None) => {
                let (f, w) = fusion::dynamic_fuse(tape, p, g, g_prime)?;
                Ok((f, Some(w)))
            }
            (mode, _) => Ok((fusion::static_fuse(tape, p, g, g_prime, mode)?, None)),
        }
    }

    /// Token targets for `label`: its characters followed by EOS.
    pub fn targets(&self, label: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.vocab.encode(label)?;
        ids.push(self.vocab.eos());
        if ids.len() > self.config.t_max {
            return Err(Error::StepOverflow {
                step: ids.len(),
                max: self.config.t_max,
            });
        }
        Ok(ids)
    }

    /// Records the teacher-forced pass; returns the mean loss node, the
    /// `[T, K]` logits and the per-step variables.
    fn teacher_forced_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        targets: &[TokenId],
    ) -> Result<(Var, Var, Vec<StepVars>)> {
        let prep = self.prepare(tape, image)?;
        let mut state = self
            .config
            .has_hybrid()
            .then(|| HybridState::zeros(tape, self.config.d_model));
        let mut prev = self.vocab.start();
        let mut steps = Vec::with_capacity(targets.len());
        for (i, &target) in targets.iter().enumerate() {
            steps.push(self.step(tape, &prep, &mut state, i + 1, prev)?);
            prev = target;
        }
        let rows: Vec<Var> = steps.iter().map(|s| s.g_f).collect();
        let glimpses = tape.concat(&rows, 0)?;
        let logits = fusion::logits(tape, &self.params, glimpses)?;
        let labels: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        Ok((loss, logits, steps))
    }

    /// Mean per-step cross-entropy (EOS included) under teacher forcing,
    /// with the per-step records.
    pub fn forward_teacher_forced(&self, image: &Tensor, label: &str) -> Result<(f64, Vec<DecoderStepRecord>)> {
        let targets = self.targets(label)?;
        let mut tape = Tape::new();
        let (loss, logits, steps) = self.teacher_forced_tape(&mut tape, image, &targets)?;
        let k = self.vocab.num_classes();
        let records = steps
            .iter()
            .enumerate()
            .map(|(i, s)| self.record(&tape, s, i + 1, &tape.value(logits)[i * k..(i + 1) * k]))
            .collect();
        Ok((tape.scalar(loss), records))
    }

    /// Summed teacher-forced loss and its gradient for one sample.
    pub fn loss_and_grads(&self, image: &Tensor, label: &str) -> Result<SampleGrads> {
        let targets = self.targets(label)?;
        let mut tape = Tape::new();
        let (loss, _, _) = self.teacher_forced_tape(&mut tape, image, &targets)?;
        let total = tape.scale(loss, targets.len() as f64)?;
        let loss_sum = tape.scalar(total);
        if !loss_sum.is_finite() {
            return Err(Error::Numeric {
                name: "loss".into(),
                detail: format!("non-finite loss {loss_sum}"),
            });
        }
        Ok(SampleGrads {
            loss_sum,
            steps: targets.len(),
            grads: tape.backward(total)?,
        })
    }

    /// Greedy decoding for at most `t_max` steps.
    pub fn decode_greedy(&self, image: &Tensor) -> Result<(String, Vec<DecoderStepRecord>)> {
        self.decode_greedy_with(image, self.config.t_max)
    }

    /// Greedy decoding: feeds each prediction back into the hybrid branch
    /// and stops at EOS or after `max_len` steps (capped at `t_max`).
    pub fn decode_greedy_with(&self, image: &Tensor, max_len: usize) -> Result<(String, Vec<DecoderStepRecord>)> {
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, image)?;
        let mut state = self
            .config
            .has_hybrid()
            .then(|| HybridState::zeros(&mut tape, self.config.d_model));
        let mut prev = self.vocab.start();
        let mut tokens = Vec::new();
        let mut records = Vec::new();
        for t in 1..=max_len.min(self.config.t_max) {
            let s = self.step(&mut tape, &prep, &mut state, t, prev)?;
            let logits = fusion::logits(&mut tape, &self.params, s.g_f)?;
            let rec = self.record(&tape, &s, t, tape.value(logits));
            let token = rec.predicted;
            records.push(rec);
            if token == self.vocab.eos() {
                break;
            }
            tokens.push(token);
            prev = token;
        }
        Ok((self.vocab.decode(&tokens), records))
    }

    fn record(&self, tape: &Tape, s: &StepVars, t: usize, logits: &[f64]) -> DecoderStepRecord {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).to_vec());
        let predicted = fusion::argmax(logits);
        let max = logits[predicted];
        let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        DecoderStepRecord {
            t,
            h_t: get(s.h),
            q_t: get(s.q),
            alpha: get(s.hybrid.map(|a| a.alpha)),
            alpha_prime: get(s.position.map(|a| a.alpha)),
            g_t: get(s.hybrid.map(|a| a.glimpse)),
            g_prime_t: get(s.position.map(|a| a.glimpse)),
            w_t: get(s.gate),
            g_f: tape.value(s.g_f).to_vec(),
            predicted,
            probability: 1.0 / z,
        }
    }

    /// Builds the loss of one sample on a caller-supplied tape, reading
    /// parameters from `params`. Used for finite-difference checks.
    pub fn loss_on_tape(&self, tape: &mut Tape, params: &ParamSet, image: &Tensor, label: &str) -> Result<Var> {
        let view = Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: params.clone(),
            gate_override: self.gate_override,
        };
        let targets = view.targets(label)?;
        view.teacher_forced_tape(tape, image, &targets).map(|(loss, _, _)| loss)
    }
}
