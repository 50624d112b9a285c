//! Pseudo-labels and the training losses.
//!
//! The unsupervised side follows weak-to-strong consistency: a weak branch
//! produces hard pseudo-labels with a confidence mask (threshold τ), and
//! strong branches plus a feature-dropout branch are penalized where the
//! mask allows. The supervised side is plain cross-entropy against ground
//! truth. The total objective is `l_sup + λ · l_unsup`.

use ndarray::{Array3, ArrayD, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::segnet::{feature_dropout, Encoded, SegNet};
use crate::tensor::{BatchReduction, CeDivisor, Scalar, Tape, Var};

/// How the Q strong-branch terms combine into the consistency loss.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongReduction {
    /// Average over the Q branches (default).
    Mean,
    /// Plain sum over the branches.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Confidence threshold for pseudo-label validity.
    pub tau: f64,
    /// Trade-off between supervised and unsupervised loss.
    pub lambda: f64,
    /// Coefficient on the strong-branch consistency term.
    pub coeff_s: f64,
    /// Coefficient on the feature-augmentation term.
    pub coeff_fa: f64,
    /// Combination of the Q strong branches.
    pub strong_reduction: StrongReduction,
    /// Divisor convention for masked cross-entropy.
    pub ce_divisor: CeDivisor,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.95,
            lambda: 0.5,
            coeff_s: 0.5,
            coeff_fa: 0.5,
            strong_reduction: StrongReduction::Mean,
            ce_divisor: CeDivisor::FullArea,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0,1], got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.coeff_s < 0.0 || self.coeff_fa < 0.0 {
            return Err(Error::Config(format!(
                "branch coefficients must be >= 0, got {}/{}",
                self.coeff_s, self.coeff_fa
            )));
        }
        Ok(())
    }
}

/// Hard per-pixel labels with confidence and the τ-validity mask, all
/// carried per batch element and detached from any gradient graph.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    /// (N, H, W) argmax classes; ties resolve to the lowest class index.
    pub classes: Array3<usize>,
    /// (N, H, W) maximum softmax probability per pixel.
    pub confidence: Array3<f64>,
    /// (N, H, W) confidence ≥ τ.
    pub valid: Array3<bool>,
}

impl PseudoLabel {
    pub fn valid_fraction(&self) -> f64 {
        let total = self.valid.len();
        if total == 0 {
            return 0.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / total as f64
    }
}

/// Derive hard labels, confidence, and the τ mask from (N, C, H, W) logits.
pub fn pseudo_label<A: Scalar>(logits: &ArrayD<A>, tau: f64) -> Result<PseudoLabel> {
    let lv = logits
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape(format!("pseudo_label expects NCHW logits, got {:?}", logits.shape())))?;
    let (n, c, h, w) = lv.dim();
    if c == 0 {
        return Err(Error::shape("pseudo_label: zero classes"));
    }
    let mut classes = Array3::<usize>::zeros((n, h, w));
    let mut confidence = Array3::<f64>::zeros((n, h, w));
    let mut valid = Array3::<bool>::from_elem((n, h, w), false);
    for ni in 0..n {
        for yi in 0..h {
            for xi in 0..w {
                let mut best = 0usize;
                let mut best_v = lv[[ni, 0, yi, xi]].to_f64();
                for ci in 1..c {
                    let v = lv[[ni, ci, yi, xi]].to_f64();
                    if v > best_v {
                        best = ci;
                        best_v = v;
                    }
                }
                let denom: f64 = (0..c).map(|ci| (lv[[ni, ci, yi, xi]].to_f64() - best_v).exp()).sum();
                let conf = 1.0 / denom;
                classes[[ni, yi, xi]] = best;
                confidence[[ni, yi, xi]] = conf;
                valid[[ni, yi, xi]] = conf >= tau;
            }
        }
    }
    Ok(PseudoLabel {
        classes,
        confidence,
        valid,
    })
}

/// Cross-entropy over the valid pixels, divided by the configured
/// denominator (default: full image area) and averaged over the batch.
pub fn masked_ce<A: Scalar>(
    tape: &mut Tape<A>,
    logits: Var,
    target: &Array3<usize>,
    valid: &Array3<bool>,
    config: &LossConfig,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("masked_ce expects NCHW logits, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if target.dim() != (n, h, w) || valid.dim() != (n, h, w) {
        return Err(Error::shape(format!(
            "masked_ce: logits {:?} vs target {:?} / valid {:?}",
            shape,
            target.dim(),
            valid.dim()
        )));
    }
    if let Some(&t) = target.iter().find(|&&t| t >= c) {
        return Err(Error::validation(format!(
            "masked_ce: target class {t} out of range for {c} classes"
        )));
    }
    Ok(tape.masked_ce(logits, target, valid, config.ce_divisor, BatchReduction::Mean))
}

/// Single weak branch supervising two strong branches with its own
/// τ-masked pseudo-label; the two strong terms are summed.
pub fn loss_group_baseline<A: Scalar>(
    tape: &mut Tape<A>,
    p_w1: Var,
    p_s2: Var,
    p_s3: Var,
    config: &LossConfig,
) -> Result<Var> {
    let shape = tape.value(p_w1).shape().to_vec();
    if tape.value(p_s2).shape() != shape.as_slice() || tape.value(p_s3).shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "loss_group_baseline: shapes differ ({:?}, {:?}, {:?})",
            shape,
            tape.value(p_s2).shape(),
            tape.value(p_s3).shape()
        )));
    }
    let pseudo = pseudo_label(tape.value(p_w1), config.tau)?;
    let a = masked_ce(tape, p_s2, &pseudo.classes, &pseudo.valid, config)?;
    let b = masked_ce(tape, p_s3, &pseudo.classes, &pseudo.valid, config)?;
    Ok(tape.add(a, b))
}

/// The corrected-feature unsupervised loss: decode the corrected features,
/// take their τ-masked pseudo-label as the (detached) target, and penalize
/// the strong branches plus a channel-dropout branch of the same features.
#[allow(clippy::too_many_arguments)]
pub fn loss_unsup_icaf<A: Scalar>(
    tape: &mut Tape<A>,
    bound: &Bound,
    segnet: &SegNet,
    corrected: &Encoded,
    strong_logits: &[Var],
    fa_rate: f64,
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, PseudoLabel)> {
    let parts = loss_unsup_parts(
        tape,
        bound,
        segnet,
        corrected,
        strong_logits,
        fa_rate,
        config,
        rng,
    )?;
    Ok((parts.total, parts.pseudo))
}

/// Components of the unsupervised loss, reported separately for logging.
pub struct UnsupParts {
    pub l_s: Var,
    pub l_fa: Var,
    pub total: Var,
    pub pseudo: PseudoLabel,
}

/// Same as [`loss_unsup_icaf`] but keeps the component scalars.
#[allow(clippy::too_many_arguments)]
pub fn loss_unsup_parts<A: Scalar>(
    tape: &mut Tape<A>,
    bound: &Bound,
    segnet: &SegNet,
    corrected: &Encoded,
    strong_logits: &[Var],
    fa_rate: f64,
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UnsupParts> {
    if strong_logits.is_empty() {
        return Err(Error::validation("loss_unsup_icaf: empty strong-branch list"));
    }
    let logits_a = segnet.decode(tape, bound, corrected)?;
    let pseudo = pseudo_label(tape.value(logits_a), config.tau)?;

    let mut l_s = None;
    for &q in strong_logits {
        let term = masked_ce(tape, q, &pseudo.classes, &pseudo.valid, config)?;
        l_s = Some(match l_s {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let mut l_s = l_s.unwrap();
    if config.strong_reduction == StrongReduction::Mean {
        l_s = tape.scale(l_s, 1.0 / strong_logits.len() as f64);
    }

    let dropped = feature_dropout(tape, corrected.features, fa_rate, true, rng)?;
    let dropped_enc = Encoded {
        features: dropped,
        skip: corrected.skip,
        input_hw: corrected.input_hw,
    };
    let logits_fa = segnet.decode(tape, bound, &dropped_enc)?;
    let l_fa = masked_ce(tape, logits_fa, &pseudo.classes, &pseudo.valid, config)?;

    let s_term = tape.scale(l_s, config.coeff_s);
    let fa_term = tape.scale(l_fa, config.coeff_fa);
    let total = tape.add(s_term, fa_term);
    Ok(UnsupParts {
        l_s,
        l_fa,
        total,
        pseudo,
    })
}

/// Plain pixel-mean cross-entropy against ground truth; no confidence mask.
pub fn loss_sup<A: Scalar>(tape: &mut Tape<A>, logits: Var, gt: &Array3<usize>) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("loss_sup expects NCHW logits, got {shape:?}")));
    }
    let all_valid = Array3::from_elem(gt.dim(), true);
    let config = LossConfig {
        ce_divisor: CeDivisor::FullArea,
        ..LossConfig::default()
    };
    masked_ce(tape, logits, gt, &all_valid, &config)
}

/// l_sup + λ · l_unsup.
pub fn loss_total<A: Scalar>(tape: &mut Tape<A>, l_sup: Var, l_unsup: Var, lambda: f64) -> Var {
    let scaled = tape.scale(l_unsup, lambda);
    tape.add(l_sup, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::segnet::SegNetConfig;
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn logits_1px(vals: &[f64]) -> ArrayD<f64> {
        Array4::from_shape_fn((1, vals.len(), 1, 1), |(_, c, _, _)| vals[c]).into_dyn()
    }

    #[test]
    fn pseudo_label_analytic_cases() {
        let p = pseudo_label(&logits_1px(&[10.0, 0.0, 0.0]), 0.95).unwrap();
        assert_eq!(p.classes[[0, 0, 0]], 0);
        let expect = (10f64).exp() / ((10f64).exp() + 2.0);
        assert!((p.confidence[[0, 0, 0]] - expect).abs() < 1e-9);
        assert!((p.confidence[[0, 0, 0]] - 0.99991).abs() < 1e-5);
        assert!(p.valid[[0, 0, 0]]);

        let p = pseudo_label(&logits_1px(&[0.0, 0.0, 0.0]), 0.95).unwrap();
        assert!((p.confidence[[0, 0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!(!p.valid[[0, 0, 0]]);

        // tau = 0 validates everything.
        let p = pseudo_label(&logits_1px(&[0.0, 0.0, 0.0]), 0.0).unwrap();
        assert!(p.valid[[0, 0, 0]]);

        // Argmax ties resolve to the lowest class index.
        let p = pseudo_label(&logits_1px(&[2.0, 2.0, 1.0]), 0.0).unwrap();
        assert_eq!(p.classes[[0, 0, 0]], 0);

        assert_eq!(pseudo_label(&logits_1px(&[1.0]), 0.5).unwrap().confidence[[0, 0, 0]], 1.0);
    }

    #[test]
    fn pseudo_label_valid_fraction_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let logits = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |_| rng.random_range(-3.0..3.0));
        let p = pseudo_label(&logits, 0.6).unwrap();
        let count = p.valid.iter().filter(|&&v| v).count();
        assert!((p.valid_fraction() - count as f64 / 32.0).abs() < 1e-12);
        for ((c, v), conf) in p.classes.iter().zip(p.valid.iter()).zip(p.confidence.iter()) {
            assert!(*c < 3);
            assert!((1.0 / 3.0..=1.0).contains(conf));
            assert_eq!(*v, *conf >= 0.6);
        }
    }

    #[test]
    fn masked_ce_wrapper_validates_and_matches_analytic_values() {
        let config = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(logits_1px(&[0.0, 0.0, 0.0]));
        let target = Array3::zeros((1, 1, 1));
        let valid = Array3::from_elem((1, 1, 1), true);
        let l = masked_ce(&mut tape, logits, &target, &valid, &config).unwrap();
        assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-12);

        // All pixels invalid: exactly zero.
        let none = Array3::from_elem((1, 1, 1), false);
        let l = masked_ce(&mut tape, logits, &target, &none, &config).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        // Saturated logits: vanishing loss.
        let sat = tape.constant(logits_1px(&[100.0, 0.0, 0.0]));
        let l = masked_ce(&mut tape, sat, &target, &valid, &config).unwrap();
        assert!(tape.scalar(l) < 1e-6);

        // Class overflow and shape mismatch are errors.
        let bad = Array3::from_elem((1, 1, 1), 3usize);
        assert!(masked_ce(&mut tape, logits, &bad, &valid, &config).is_err());
        let wrong = Array3::zeros((1, 2, 1));
        let wrong_valid = Array3::from_elem((1, 2, 1), true);
        assert!(masked_ce(&mut tape, logits, &wrong, &wrong_valid, &config).is_err());
    }

    #[test]
    fn halving_valid_pixels_halves_the_loss() {
        let config = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 2, 2])));
        let target = Array3::zeros((1, 2, 2));
        let all = Array3::from_elem((1, 2, 2), true);
        let mut half = Array3::from_elem((1, 2, 2), false);
        half[[0, 0, 0]] = true;
        half[[0, 0, 1]] = true;
        let l_all = masked_ce(&mut tape, logits, &target, &all, &config).unwrap();
        let l_half = masked_ce(&mut tape, logits, &target, &half, &config).unwrap();
        assert!((tape.scalar(l_all) - 3f64.ln()).abs() < 1e-12);
        assert!((tape.scalar(l_half) - 0.5 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn raising_tau_never_increases_valid_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 4, 6, 6]), |_| rng.random_range(-2.0..2.0));
        let mut last = usize::MAX;
        for tau in [0.0, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0] {
            let p = pseudo_label(&logits, tau).unwrap();
            let count = p.valid.iter().filter(|&&v| v).count();
            assert!(count <= last, "valid count must fall as tau rises");
            last = count;
        }
        // At tau = 0 the masked loss equals the plain unmasked mean CE.
        let p = pseudo_label(&logits, 0.0).unwrap();
        assert!(p.valid.iter().all(|&v| v));
        let config = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(logits.clone());
        let masked = masked_ce(&mut tape, lv, &p.classes, &p.valid, &config).unwrap();
        let mut oracle = 0.0;
        for yi in 0..6 {
            for xi in 0..6 {
                let vals: Vec<f64> = (0..4).map(|c| logits[[0, c, yi, xi]]).collect();
                let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                oracle += lse - vals[p.classes[[0, yi, xi]]];
            }
        }
        oracle /= 36.0;
        assert!((tape.scalar(masked) - oracle).abs() < 1e-12);
    }

    #[test]
    fn group_baseline_analytic_and_degenerate_cases() {
        let config = LossConfig::default();
        let mut tape = Tape::<f64>::new();

        // 1 pixel, C=2: weak (5,0) is confident (0.9933 >= 0.95); both
        // strong branches uniform -> 2 * ln 2.
        let p_w1 = tape.constant(logits_1px(&[5.0, 0.0]));
        let p_s = tape.constant(logits_1px(&[0.0, 0.0]));
        let conf = 5f64.exp() / (5f64.exp() + 1.0);
        assert!(conf >= 0.95);
        let l = loss_group_baseline(&mut tape, p_w1, p_s, p_s, &config).unwrap();
        assert!((tape.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-9);

        // Strong branches that already match the pseudo-label saturate.
        let sat = tape.constant(logits_1px(&[100.0, 0.0]));
        let l = loss_group_baseline(&mut tape, p_w1, sat, sat, &config).unwrap();
        assert!(tape.scalar(l) < 1e-6);

        // No confident weak pixels: zero.
        let meek = tape.constant(logits_1px(&[0.1, 0.0]));
        let l = loss_group_baseline(&mut tape, meek, p_s, p_s, &config).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        // Shape mismatch is an error.
        let other = tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 2, 2])));
        assert!(loss_group_baseline(&mut tape, p_w1, p_s, other, &config).is_err());
    }

    #[test]
    fn supervised_loss_is_plain_mean_ce_and_tau_free() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(logits_1px(&[0.0, 0.0, 0.0]));
        let gt = Array3::zeros((1, 1, 1));
        let l = loss_sup(&mut tape, logits, &gt).unwrap();
        assert!((tape.scalar(l) - 3f64.ln()).abs() < 1e-12);

        let sat = tape.constant(logits_1px(&[100.0, 0.0, 0.0]));
        let l = loss_sup(&mut tape, sat, &gt).unwrap();
        assert!(tape.scalar(l) < 1e-6);

        let bad = Array3::from_elem((1, 1, 1), 5usize);
        assert!(loss_sup(&mut tape, logits, &bad).is_err());
    }

    #[test]
    fn total_loss_combines_linearly() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(ArrayD::from_elem(IxDyn(&[]), 1.0));
        let b = tape.constant(ArrayD::from_elem(IxDyn(&[]), 2.0));
        let zero = tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.0));
        let t1 = loss_total(&mut tape, a, zero, 0.5);
        let t2 = loss_total(&mut tape, a, b, 0.5);
        let t3 = loss_total(&mut tape, zero, zero, 0.5);
        assert_eq!(tape.scalar(t1), 1.0);
        assert_eq!(tape.scalar(t2), 2.0);
        assert_eq!(tape.scalar(t3), 0.0);
    }

    fn tiny_segnet() -> (SegNet, ParamStore<f64>) {
        let segnet = SegNet::new(SegNetConfig {
            in_channels: 3,
            n_classes: 3,
            widths: vec![4, 6, 8, 10],
            dec_width: 6,
            fa_dropout: 0.5,
        })
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        segnet.register(&mut store, &mut rng);
        (segnet, store)
    }

    fn encode_input(
        segnet: &SegNet,
        store: &ParamStore<f64>,
        input: &ArrayD<f64>,
        trainable: bool,
    ) -> (Tape<f64>, Bound, Encoded) {
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape, trainable);
        let x = tape.constant(input.clone());
        let enc = segnet.encode(&mut tape, &bound, x).unwrap();
        (tape, bound, enc)
    }

    #[test]
    fn unsup_loss_gates_on_confidence_and_saturates() {
        let (segnet, mut store) = tiny_segnet();
        let config = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.random_range(0.0..1.0));

        // Zero decoder head: logits are uniform, confidence 1/3 < tau, so
        // the loss is exactly zero whatever the strong branches say.
        store.get_mut("seg.dec.head.weight").fill(0.0);
        store.get_mut("seg.dec.head.bias").fill(0.0);
        let (mut tape, bound, enc) = encode_input(&segnet, &store, &input, false);
        let wild = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| {
            rng.random_range(-50.0..50.0)
        }));
        let (l, pseudo) =
            loss_unsup_icaf(&mut tape, &bound, &segnet, &enc, &[wild, wild], 0.5, &config, &mut rng)
                .unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert_eq!(pseudo.valid.iter().filter(|&&v| v).count(), 0);

        // Biased head: every pixel decodes to class 0 with huge margin, so
        // a matching strong branch and fa_rate = 0 saturate all terms.
        {
            let b = store.get_mut("seg.dec.head.bias");
            b[IxDyn(&[0])] = 100.0;
        }
        let (mut tape, bound, enc) = encode_input(&segnet, &store, &input, false);
        let matching = tape.constant(
            Array4::from_shape_fn((1, 3, 16, 16), |(_, c, _, _)| if c == 0 { 100.0 } else { 0.0 })
                .into_dyn(),
        );
        let parts = loss_unsup_parts(
            &mut tape, &bound, &segnet, &enc, &[matching, matching], 0.0, &config, &mut rng,
        )
        .unwrap();
        assert!(parts.pseudo.valid.iter().all(|&v| v));
        assert!(tape.scalar(parts.l_s) < 1e-6);
        assert!(tape.scalar(parts.l_fa) < 1e-6);
        assert!(tape.scalar(parts.total) < 1e-6);

        // An empty strong list is refused.
        let (mut tape, bound, enc) = encode_input(&segnet, &store, &input, false);
        assert!(loss_unsup_icaf(&mut tape, &bound, &segnet, &enc, &[], 0.5, &config, &mut rng).is_err());
    }

    #[test]
    fn bypass_unsup_loss_reduces_to_group_baseline() {
        let (segnet, store) = tiny_segnet();
        let config = LossConfig {
            coeff_s: 1.0,
            coeff_fa: 0.0,
            strong_reduction: StrongReduction::Sum,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.random_range(0.0..1.0));
        let s2v = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.random_range(-4.0..4.0));
        let s3v = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.random_range(-4.0..4.0));

        let (mut tape, bound, enc) = encode_input(&segnet, &store, &input, false);
        let s2 = tape.constant(s2v.clone());
        let s3 = tape.constant(s3v.clone());
        let (l_unsup, _) = loss_unsup_icaf(
            &mut tape, &bound, &segnet, &enc, &[s2, s3], 0.0, &config, &mut rng,
        )
        .unwrap();
        let p_w1 = segnet.decode(&mut tape, &bound, &enc).unwrap();
        let l_base = loss_group_baseline(&mut tape, p_w1, s2, s3, &config).unwrap();
        assert!(
            (tape.scalar(l_unsup) - tape.scalar(l_base)).abs() < 1e-6,
            "sum-mode unsupervised loss must equal the two-strong baseline"
        );
    }

    #[test]
    fn pseudo_target_path_carries_no_gradient() {
        let (segnet, store) = tiny_segnet();
        // fa off: the only parameter path into the loss is via the
        // detached pseudo-target, so every gradient must vanish.
        let config = LossConfig {
            coeff_fa: 0.0,
            tau: 0.0,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.random_range(0.0..1.0));
        let strong = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.random_range(-3.0..3.0));

        let (mut tape, bound, enc) = encode_input(&segnet, &store, &input, true);
        let s = tape.constant(strong.clone());
        let mut draw = ChaCha8Rng::seed_from_u64(1);
        let (l, _) =
            loss_unsup_icaf(&mut tape, &bound, &segnet, &enc, &[s, s], 0.0, &config, &mut draw).unwrap();
        let grads = bound.grads(&store, tape.backward(l));
        for (name, g) in grads.entries.iter() {
            assert!(
                g.iter().all(|&v| v == 0.0),
                "{name} must receive zero gradient through the detached target"
            );
        }

        // Finite differences agree: nudging a parameter leaves the loss
        // bit-identical (argmax targets are piecewise constant).
        let base = {
            let (mut tape, bound, enc) = encode_input(&segnet, &store, &input, false);
            let s = tape.constant(strong.clone());
            let mut draw = ChaCha8Rng::seed_from_u64(1);
            let (l, _) = loss_unsup_icaf(&mut tape, &bound, &segnet, &enc, &[s, s], 0.0, &config, &mut draw)
                .unwrap();
            tape.scalar(l)
        };
        let mut store2 = store.clone();
        {
            let w = store2.get_mut("seg.enc0.conv1.weight");
            w[IxDyn(&[0, 0, 0, 0])] += 1e-5;
        }
        let shifted = {
            let (mut tape, bound, enc) = encode_input(&segnet, &store2, &input, false);
            let s = tape.constant(strong.clone());
            let mut draw = ChaCha8Rng::seed_from_u64(1);
            let (l, _) = loss_unsup_icaf(&mut tape, &bound, &segnet, &enc, &[s, s], 0.0, &config, &mut draw)
                .unwrap();
            tape.scalar(l)
        };
        assert_eq!(base, shifted);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 1.5, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda: -0.1, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { coeff_s: -1.0, ..LossConfig::default() }.validate().is_err());
    }
}
