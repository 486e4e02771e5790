//! Glimpse fusion and the character classifier.
//!
//! Dynamic fusion gates the projected concatenation of both glimpses
//! elementwise: `w = σ(W_a·[g; g'])`, `g_f = w ⊙ (W_p·[g; g'])`. Static
//! baselines add the glimpses or project their concatenation.

use crate::config::FusionMode;
use crate::error::Result;
use crate::layers::init_linear;
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::rng::SplitMix64;

pub fn init_params(mode: FusionMode, d: usize, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<()> {
    match mode {
        FusionMode::Dynamic => {
            init_linear(params, "fusion.w_a", d, 2 * d, rng)?;
            init_linear(params, "fusion.w_p", d, 2 * d, rng)
        }
        FusionMode::Concat => init_linear(params, "fusion.w_c", d, 2 * d, rng),
        FusionMode::Add => Ok(()),
    }
}

pub fn param_count(mode: FusionMode, d: usize) -> usize {
    match mode {
        FusionMode::Dynamic => 4 * d * d,
        FusionMode::Concat => 2 * d * d,
        FusionMode::Add => 0,
    }
}

pub fn init_classifier(num_classes: usize, d: usize, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<()> {
    init_linear(params, "classifier.weight", num_classes, d, rng)?;
    params.insert("classifier.bias", Tensor::zeros(&[num_classes]))
}

/// Gated fusion of two `[1, d]` glimpses; returns `(g_f, w)`.
pub fn dynamic_fuse(tape: &mut Tape, params: &ParamSet, g: Var, g_prime: Var) -> Result<(Var, Var)> {
    let cat = tape.concat(&[g, g_prime], 1)?;
    let w_a = tape.param(params, "fusion.w_a")?;
    let w_p = tape.param(params, "fusion.w_p")?;
    let pre = tape.matmul_nt(cat, w_a)?;
    let gate = tape.sigmoid(pre)?;
    let proj = tape.matmul_nt(cat, w_p)?;
    let fused = tape.mul(gate, proj)?;
    Ok((fused, gate))
}

/// Static fusion: `add` → `g + g'`; `concat` → `W_c·[g; g']`.
/// `Dynamic` is routed to [`dynamic_fuse`] and its gate dropped.
pub fn static_fuse(tape: &mut Tape, params: &ParamSet, g: Var, g_prime: Var, mode: FusionMode) -> Result<Var> {
    match mode {
        FusionMode::Add => tape.add(g, g_prime),
        FusionMode::Concat => {
            let cat = tape.concat(&[g, g_prime], 1)?;
            let w_c = tape.param(params, "fusion.w_c")?;
            tape.matmul_nt(cat, w_c)
        }
        FusionMode::Dynamic => dynamic_fuse(tape, params, g, g_prime).map(|(f, _)| f),
    }
}

/// Class logits `[T, K]` for `T` stacked glimpses `[T, d]`.
pub fn logits(tape: &mut Tape, params: &ParamSet, glimpses: Var) -> Result<Var> {
    let w = tape.param(params, "classifier.weight")?;
    let b = tape.param(params, "classifier.bias")?;
    let z = tape.matmul_nt(glimpses, w)?;
    tape.add_row(z, b)
}

/// Class probabilities `[T, K]`.
pub fn classify(tape: &mut Tape, params: &ParamSet, glimpses: Var) -> Result<Var> {
    let z = logits(tape, params, glimpses)?;
    tape.softmax(z, 1)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn vec_var(tape: &mut Tape, v: Vec<f64>) -> Var {
        let n = v.len();
        tape.constant(&Tensor::new(vec![1, n], v).unwrap())
    }

    #[test]
    fn saturated_negative_gate_closes() {
        let d = 4;
        let mut rng = SplitMix64::new(1);
        let mut p = ParamSet::new();
        init_params(FusionMode::Dynamic, d, &mut p, &mut rng).unwrap();
        // a large negative weight on an always-positive input column acts as a bias
        let w_a = p.get_mut("fusion.w_a").unwrap();
        w_a.data_mut().iter_mut().for_each(|x| *x = 0.0);
        for r in 0..d {
            w_a.data_mut()[r * 2 * d] = -1e3;
        }
        let mut tape = Tape::new();
        let g = vec_var(&mut tape, vec![1.0, 0.3, -0.2, 0.5]);
        let gp = vec_var(&mut tape, vec![0.1, 0.2, 0.3, 0.4]);
        let (gf, w) = dynamic_fuse(&mut tape, &p, g, gp).unwrap();
        assert!(tape.value(w).iter().all(|&x| x < 1e-300));
        assert!(tape.value(gf).iter().all(|&x| x.abs() < 1e-300));
    }

    #[test]
    fn gate_is_strictly_inside_unit_interval() {
        let mut rng = SplitMix64::new(2);
        let mut p = ParamSet::new();
        init_params(FusionMode::Dynamic, 6, &mut p, &mut rng).unwrap();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let g = tape.constant(&Tensor::uniform(&[1, 6], -5.0, 5.0, &mut rng));
            let gp = tape.constant(&Tensor::uniform(&[1, 6], -5.0, 5.0, &mut rng));
            let (_, w) = dynamic_fuse(&mut tape, &p, g, gp).unwrap();
            assert!(tape.value(w).iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn dynamic_matches_direct_formula() {
        let d = 3;
        let mut rng = SplitMix64::new(3);
        let mut p = ParamSet::new();
        init_params(FusionMode::Dynamic, d, &mut p, &mut rng).unwrap();
        let g: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let gp: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let (vg, vgp) = (vec_var(&mut tape, g.clone()), vec_var(&mut tape, gp.clone()));
        let (gf, w) = dynamic_fuse(&mut tape, &p, vg, vgp).unwrap();
        let cat: Vec<f64> = g.iter().chain(&gp).copied().collect();
        let (wa, wp) = (p.get("fusion.w_a").unwrap(), p.get("fusion.w_p").unwrap());
        for r in 0..d {
            let a: f64 = (0..2 * d).map(|c| wa.at(&[r, c]) * cat[c]).sum();
            let q: f64 = (0..2 * d).map(|c| wp.at(&[r, c]) * cat[c]).sum();
            let gate = 1.0 / (1.0 + (-a).exp());
            assert!((tape.value(w)[r] - gate).abs() < 1e-14);
            assert!((tape.value(gf)[r] - gate * q).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_is_monotone_in_its_preactivation() {
        let d = 3;
        let mut rng = SplitMix64::new(4);
        let mut p = ParamSet::new();
        init_params(FusionMode::Dynamic, d, &mut p, &mut rng).unwrap();
        let g = vec![0.7, -0.2, 0.4];
        let gp = vec![0.1, 0.9, -0.3];
        let gate_at = |p: &ParamSet| {
            let mut tape = Tape::new();
            let (vg, vgp) = (vec_var(&mut tape, g.clone()), vec_var(&mut tape, gp.clone()));
            let (_, w) = dynamic_fuse(&mut tape, p, vg, vgp).unwrap();
            tape.value(w).to_vec()
        };
        let before = gate_at(&p);
        // raise channel 1's pre-activation by raising a weight on a positive input
        p.get_mut("fusion.w_a").unwrap().data_mut()[2 * d] += 0.5;
        let after = gate_at(&p);
        assert!(after[1] > before[1]);
        assert_eq!(after[0], before[0]);
        assert_eq!(after[2], before[2]);
    }

    #[test]
    fn static_fusion_examples() {
        let mut rng = SplitMix64::new(5);
        let mut p = ParamSet::new();
        init_params(FusionMode::Concat, 3, &mut p, &mut rng).unwrap();
        let mut tape = Tape::new();
        let g = vec_var(&mut tape, vec![0.5, -1.0, 2.0]);
        let z = vec_var(&mut tape, vec![0.0; 3]);
        let h = vec_var(&mut tape, vec![0.25, 0.75, -3.0]);
        let s = static_fuse(&mut tape, &p, g, z, FusionMode::Add).unwrap();
        assert_eq!(tape.value(s), tape.value(g));
        let ab = static_fuse(&mut tape, &p, g, h, FusionMode::Add).unwrap();
        let ba = static_fuse(&mut tape, &p, h, g, FusionMode::Add).unwrap();
        assert_eq!(tape.value(ab), tape.value(ba));
        p.get_mut("fusion.w_c").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        let c = static_fuse(&mut tape, &p, g, h, FusionMode::Concat).unwrap();
        assert!(tape.value(c).iter().all(|&x| x == 0.0));
        assert_eq!(tape.shape(c), &[1, 3]);
    }

    #[test]
    fn classifier_examples() {
        let mut p = ParamSet::new();
        p.insert("classifier.weight", Tensor::zeros(&[91, 4])).unwrap();
        p.insert("classifier.bias", Tensor::zeros(&[91])).unwrap();
        let mut tape = Tape::new();
        let g = vec_var(&mut tape, vec![1.0, -2.0, 3.0, 0.5]);
        let probs = classify(&mut tape, &p, g).unwrap();
        assert!(tape.value(probs).iter().all(|&x| (x - 1.0 / 91.0).abs() < 1e-15));
        assert_eq!(argmax(tape.value(probs)), 0);

        p.get_mut("classifier.bias").unwrap().data_mut()[42] = 1e3;
        let mut rng = SplitMix64::new(6);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let g = tape.constant(&Tensor::uniform(&[1, 4], -10.0, 10.0, &mut rng));
            let probs = classify(&mut tape, &p, g).unwrap();
            assert_eq!(argmax(tape.value(probs)), 42);
        }

        let mut p = ParamSet::new();
        init_classifier(91, 4, &mut p, &mut rng).unwrap();
        p.get_mut("classifier.bias").unwrap().data_mut().iter_mut().for_each(|b| *b = rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let g = tape.constant(&Tensor::uniform(&[3, 4], -3.0, 3.0, &mut rng));
        let probs = classify(&mut tape, &p, g).unwrap();
        for row in tape.value(probs).chunks(91) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    #[test]
    fn fuse_and_classify_gradients() {
        for seed in 0..5 {
            let mut rng = SplitMix64::new(60 + seed);
            let mut p = ParamSet::new();
            init_params(FusionMode::Dynamic, 4, &mut p, &mut rng).unwrap();
            init_classifier(7, 4, &mut p, &mut rng).unwrap();
            p.get_mut("classifier.bias").unwrap().data_mut().iter_mut().for_each(|b| *b = rng.uniform(-1.0, 1.0));
            p.insert("g", Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng)).unwrap();
            p.insert("g_prime", Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng)).unwrap();
            let r = grad_check(
                |tape, p| {
                    let g = tape.param(p, "g")?;
                    let gp = tape.param(p, "g_prime")?;
                    let (gf, _) = dynamic_fuse(tape, p, g, gp)?;
                    let z = logits(tape, p, gf)?;
                    tape.softmax_cross_entropy(z, &[Some(3)])
                },
                &p,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }
}
