//! The training engine: intra-group view sampling, the per-iteration
//! step over labeled and unlabeled group batches, SGD with a poly
//! learning-rate schedule, and per-epoch checkpointing.
//!
//! Every random draw — view selection, shared geometry, strong-transform
//! parameters, CutMix boxes, feature-dropout masks — comes from one
//! ChaCha stream seeded by the run seed, so a (seed, config, data) triple
//! fully determines training.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_strong, apply_weak_image, apply_weak_mask, cutmix_pair, sample_cutmix_box,
    sample_strong_params, sample_weak_params, AugmentConfig, GeoParams, StrongParams,
};
use crate::error::{Error, Result};
use crate::group_data::{io as gio, DatasetManifest};
use crate::nn::{Bound, Checkpoint, ParamStore, RngState, Sgd};
use crate::objective::{loss_sup, loss_total, masked_ce, pseudo_label, LossConfig, StrongReduction};
use crate::pcn::{Pcn, PcnConfig};
use crate::segnet::{feature_dropout, Encoded, SegNet, SegNetConfig};
use crate::tensor::{sc, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Views sampled per group for the correction network.
    pub o: usize,
    /// Interaction views gated against the boundary view.
    pub p: usize,
    /// Strongly perturbed branches.
    pub q: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub poly_power: f64,
    /// Square crop side used for every branch.
    pub crop_size: usize,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many epochs; 0 keeps
    /// only the final one.
    pub checkpoint_every: usize,
    /// Skip the correction network entirely (weak view 1 stands in).
    pub group_baseline_only: bool,
    /// Synthesize the boundary-aware view from weighted weak views.
    pub use_vam: bool,
    /// Gate interaction-view features against the boundary view.
    pub use_vcm: bool,
    /// CutMix across groups on the strong branches.
    pub use_ca: bool,
    /// Feature-dropout branch of the unsupervised loss.
    pub use_fa: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            o: 6,
            p: 3,
            q: 2,
            labeled_per_batch: 8,
            unlabeled_per_batch: 8,
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 80,
            poly_power: 0.9,
            crop_size: 320,
            seed: 42,
            checkpoint_every: 1,
            group_baseline_only: false,
            use_vam: true,
            use_vcm: true,
            use_ca: true,
            use_fa: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("o", self.o),
            ("p", self.p),
            ("q", self.q),
            ("labeled_per_batch", self.labeled_per_batch),
            ("unlabeled_per_batch", self.unlabeled_per_batch),
            ("crop_size", self.crop_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.p > self.o || self.q > self.o {
            return Err(Error::Config(format!(
                "P={} and Q={} must not exceed O={}",
                self.p, self.q, self.o
            )));
        }
        if self.use_vcm && !self.use_vam {
            return Err(Error::Config(
                "use_vcm requires use_vam (the gate needs a boundary view)".into(),
            ));
        }
        if self.base_lr < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate, momentum and weight decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to build a trainer; serialized verbatim into the run
/// directory so a run is reproducible from its config alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerSpec {
    pub segnet: SegNetConfig,
    pub pcn: PcnConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub aug: AugmentConfig,
}

impl TrainerSpec {
    pub fn validate(&self) -> Result<()> {
        self.segnet.validate()?;
        self.pcn.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let crop = self.train.crop_size;
        let stride = self.segnet.stride();
        if crop % stride != 0 || crop % 8 != 0 {
            return Err(Error::Config(format!(
                "crop size {crop} must be divisible by the encoder stride {stride} and by 8"
            )));
        }
        if self.aug.crop_size != (crop, crop) {
            return Err(Error::Config(format!(
                "augmentation crop {:?} must match the training crop {crop}",
                self.aug.crop_size
            )));
        }
        if self.segnet.in_channels != 3 {
            return Err(Error::Config("the data pipeline produces 3-channel images".into()));
        }
        if self.segnet.n_classes > 255 {
            return Err(Error::Config("masks are stored as 8-bit class indices".into()));
        }
        Ok(())
    }
}

/// One group's draw for one iteration: which views participate where, and
/// the shared weak geometry plus per-branch strong parameters.
#[derive(Clone, Debug)]
pub struct SampledViews {
    pub group_id: String,
    /// O distinct view indices into the group.
    pub indices_o: Vec<usize>,
    /// Interaction views, a subset of `indices_o`.
    pub indices_p: Vec<usize>,
    /// Strong-branch views, a subset of `indices_o`.
    pub indices_q: Vec<usize>,
    /// One geometric transform shared by every view and target this
    /// iteration, keeping pixels aligned across branches.
    pub geo: GeoParams,
    /// Intensity-transform parameters, one per strong branch.
    pub strong: Vec<StrongParams>,
}

/// Draw views and transform parameters for one group.
pub fn ivs_sample(
    group_id: &str,
    k: usize,
    source_size: (usize, usize),
    config: &TrainConfig,
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampledViews> {
    if config.o > k {
        return Err(Error::validation(format!(
            "cannot sample O={} views from a group of K={k}",
            config.o
        )));
    }
    let indices_o: Vec<usize> = sample(rng, k, config.o).iter().collect();
    let pos_p: Vec<usize> = sample(rng, config.o, config.p).iter().collect();
    let pos_q: Vec<usize> = sample(rng, config.o, config.q).iter().collect();
    let geo = sample_weak_params(rng, aug, source_size)?;
    let strong = (0..config.q).map(|_| sample_strong_params(rng, aug)).collect();
    Ok(SampledViews {
        group_id: group_id.to_string(),
        indices_p: pos_p.iter().map(|&i| indices_o[i]).collect(),
        indices_q: pos_q.iter().map(|&i| indices_o[i]).collect(),
        indices_o,
        geo,
        strong,
    })
}

/// base · (1 − iter/total)^power.
pub fn poly_lr(base: f64, iter: u64, total_iters: u64, power: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::validation("poly_lr: total_iters must be positive"));
    }
    if iter > total_iters {
        return Err(Error::validation(format!(
            "poly_lr: iter {iter} beyond total {total_iters}"
        )));
    }
    let frac = 1.0 - iter as f64 / total_iters as f64;
    Ok(base * frac.powf(power))
}

/// Steps per epoch are set by the unlabeled loader; labeled groups cycle.
pub fn steps_per_epoch(n_labeled: usize, n_unlabeled: usize, config: &TrainConfig) -> usize {
    if n_unlabeled > 0 {
        n_unlabeled.div_ceil(config.unlabeled_per_batch)
    } else {
        n_labeled.div_ceil(config.labeled_per_batch)
    }
}

/// A group after loading and augmentation, ready to become tape constants.
pub struct PreparedGroup {
    pub sampled: SampledViews,
    /// O weak-transformed views; position i holds view `indices_o[i]`.
    pub weak: Vec<Array3<f32>>,
    /// Q strong-transformed images (CutMix, if any, is applied at batch
    /// assembly since it crosses groups).
    pub strong: Vec<Array3<f32>>,
    /// Positions of `indices_p` within the O-stack.
    pub picks_p: Vec<usize>,
    /// Weak-transformed ground truth for labeled groups.
    pub mask: Option<Array2<u8>>,
}

pub struct PreparedBatch {
    pub labeled: Vec<PreparedGroup>,
    pub unlabeled: Vec<PreparedGroup>,
}

impl PreparedBatch {
    fn ids(&self) -> (Vec<&str>, Vec<&str>) {
        (
            self.labeled.iter().map(|g| g.sampled.group_id.as_str()).collect(),
            self.unlabeled.iter().map(|g| g.sampled.group_id.as_str()).collect(),
        )
    }
}

/// Load one group's sampled views from disk and apply the weak (and for
/// strong branches, intensity) transforms. `with_mask` additionally loads
/// and transforms the ground-truth mask; `with_strong` prepares the Q
/// strong branches (labeled groups skip them).
fn prepare_group(
    manifest: &DatasetManifest,
    sampled: SampledViews,
    with_mask: bool,
    with_strong: bool,
) -> Result<PreparedGroup> {
    let entry = manifest.entry(&sampled.group_id)?;
    let mut weak = Vec::with_capacity(sampled.indices_o.len());
    for &vi in &sampled.indices_o {
        let rel = entry.views.get(vi).ok_or_else(|| {
            Error::validation(format!(
                "group {} has {} views, sampled index {vi}",
                sampled.group_id,
                entry.views.len()
            ))
        })?;
        let img = gio::load_rgb(&manifest.root.join(rel))?;
        weak.push(apply_weak_image(&img, &sampled.geo));
    }
    let picks_p: Vec<usize> = sampled
        .indices_p
        .iter()
        .map(|gi| sampled.indices_o.iter().position(|x| x == gi).unwrap())
        .collect();
    let strong = if with_strong {
        sampled
            .indices_q
            .iter()
            .zip(&sampled.strong)
            .map(|(gi, sp)| {
                let pos = sampled.indices_o.iter().position(|x| x == gi).unwrap();
                apply_strong(&weak[pos], sp)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mask = if with_mask {
        let rel = entry.mask.as_ref().ok_or_else(|| {
            Error::validation(format!("labeled group {} has no mask", sampled.group_id))
        })?;
        let m = gio::load_mask(&manifest.root.join(rel), manifest.n_classes())?;
        Some(apply_weak_mask(&m, &sampled.geo))
    } else {
        None
    };
    Ok(PreparedGroup {
        sampled,
        weak,
        strong,
        picks_p,
        mask,
    })
}

fn stack_images<A: Scalar>(imgs: &[Array3<f32>]) -> ArrayD<A> {
    let (c, h, w) = imgs[0].dim();
    let mut out = Array4::<A>::zeros((imgs.len(), c, h, w));
    for (i, img) in imgs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&img.mapv(|v| sc::<A>(v as f64)));
    }
    out.into_dyn()
}

/// Per-step scalars written to the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_sup: f64,
    pub l_s: f64,
    pub l_fa: f64,
    pub l_total: f64,
    pub valid_fraction: f64,
    pub wall_ms: u64,
}

/// Raw branch outputs captured for loss cross-checks in tests.
pub struct StepTrace {
    /// Decoded corrected-feature logits the pseudo-label derives from.
    pub pseudo_logits: ArrayD<f64>,
    /// Decoded logits of each strong branch.
    pub strong_logits: Vec<ArrayD<f64>>,
    pub l_unsup: f64,
}

/// All loss nodes of one step, still on the tape.
pub struct StepEval {
    pub l_sup: Var,
    pub l_s: Var,
    pub l_fa: Var,
    pub l_unsup: Var,
    pub l_total: Var,
    pub valid_fraction: f64,
    pub trace: Option<StepTrace>,
    /// The pseudo-label the unlabeled path trained against, if any.
    pub pseudo: Option<crate::objective::PseudoLabel>,
}

/// Build the full step loss on the tape: the unlabeled path (correction
/// network, strong branches, feature-dropout branch) and the labeled path
/// (plain forward on one sampled view per group against its mask),
/// combined as `l_sup + λ·l_unsup`.
///
/// `pseudo_override` substitutes a fixed pseudo-label for the one derived
/// from the decoded corrected features. Targets are detached constants in
/// the gradient, so finite-difference oracles must evaluate the loss with
/// the base point's targets held fixed; perturbing a parameter may
/// otherwise flip an argmax or threshold decision and measure the jump
/// instead of the derivative.
#[allow(clippy::too_many_arguments)]
pub fn step_losses<A: Scalar>(
    tape: &mut Tape<A>,
    bound: &Bound,
    segnet: &SegNet,
    pcn: &Pcn,
    spec: &TrainerSpec,
    batch: &PreparedBatch,
    rng: &mut ChaCha8Rng,
    pseudo_override: Option<&crate::objective::PseudoLabel>,
    want_trace: bool,
) -> Result<StepEval> {
    let tcfg = &spec.train;
    let bypass = tcfg.group_baseline_only;
    let use_vam = tcfg.use_vam && !bypass;
    let use_vcm = tcfg.use_vcm && !bypass;
    let mut eff = spec.loss.clone();
    if !tcfg.use_fa {
        // The consistency branch absorbs the disabled branch's weight so
        // the remaining loss keeps its scale.
        eff.coeff_s += eff.coeff_fa;
        eff.coeff_fa = 0.0;
    }

    let zero = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[])));
    let skip_unsup = eff.lambda == 0.0 || batch.unlabeled.is_empty();

    let (l_s, l_fa, l_unsup, valid_fraction, trace, pseudo_used) = if skip_unsup {
        (zero, zero, zero, 0.0, None, None)
    } else {
        let b = batch.unlabeled.len();
        let mut feats = Vec::with_capacity(b);
        let mut skips = Vec::with_capacity(b);
        let mut input_hw = (0, 0);
        for g in &batch.unlabeled {
            let views = tape.constant(stack_images::<A>(&g.weak));
            let out =
                pcn.forward_with_toggles(tape, bound, segnet, views, &g.picks_p, use_vam, use_vcm)?;
            feats.push(out.corrected.features);
            skips.push(out.corrected.skip);
            input_hw = out.corrected.input_hw;
        }
        let enc = Encoded {
            features: if b == 1 { feats[0] } else { tape.concat_batch(&feats) },
            skip: if b == 1 { skips[0] } else { tape.concat_batch(&skips) },
            input_hw,
        };
        let pseudo_logits = segnet.decode(tape, bound, &enc)?;
        let pseudo = match pseudo_override {
            Some(p) => p.clone(),
            None => pseudo_label(tape.value(pseudo_logits), eff.tau)?,
        };
        let (ch, cw) = input_hw;

        let mut l_s_acc: Option<Var> = None;
        let mut strong_trace = Vec::new();
        for qi in 0..tcfg.q {
            // One box draw per strong branch, applied identically to every
            // group in the batch; each group mixes with the next group in
            // the batch ring, and the pseudo-targets and validity masks are
            // mixed with the same box as the images.
            let bbox = if tcfg.use_ca {
                sample_cutmix_box(rng, &spec.aug, (ch, cw))
            } else {
                None
            };
            let mut targets = pseudo.classes.clone();
            let mut valid = pseudo.valid.clone();
            let images = match bbox {
                None => batch
                    .unlabeled
                    .iter()
                    .map(|g| g.strong[qi].clone())
                    .collect::<Vec<_>>(),
                Some(bb) => {
                    let mut imgs = Vec::with_capacity(b);
                    for gi in 0..b {
                        let pj = (gi + 1) % b;
                        let tgt_a = pseudo.classes.index_axis(Axis(0), gi).mapv(|c| c as u8);
                        let tgt_b = pseudo.classes.index_axis(Axis(0), pj).mapv(|c| c as u8);
                        let val_a = pseudo.valid.index_axis(Axis(0), gi).to_owned();
                        let val_b = pseudo.valid.index_axis(Axis(0), pj).to_owned();
                        let (img, tgt, val) = cutmix_pair(
                            &batch.unlabeled[gi].strong[qi],
                            &batch.unlabeled[pj].strong[qi],
                            &tgt_a,
                            &tgt_b,
                            &val_a,
                            &val_b,
                            bb,
                        )?;
                        imgs.push(img);
                        targets
                            .index_axis_mut(Axis(0), gi)
                            .assign(&tgt.mapv(|c| c as usize));
                        valid.index_axis_mut(Axis(0), gi).assign(&val);
                    }
                    imgs
                }
            };
            let x = tape.constant(stack_images::<A>(&images));
            let enc_q = segnet.encode(tape, bound, x)?;
            let logits_q = segnet.decode(tape, bound, &enc_q)?;
            let term = masked_ce(tape, logits_q, &targets, &valid, &eff)?;
            l_s_acc = Some(match l_s_acc {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
            if want_trace {
                strong_trace.push(tape.value(logits_q).mapv(|v| v.to_f64()));
            }
        }
        let mut l_s = l_s_acc.expect("q >= 1 by config validation");
        if eff.strong_reduction == StrongReduction::Mean {
            l_s = tape.scale(l_s, 1.0 / tcfg.q as f64);
        }

        let l_fa = if eff.coeff_fa > 0.0 {
            let dropped =
                feature_dropout(tape, enc.features, spec.segnet.fa_dropout, true, rng)?;
            let enc_fa = Encoded {
                features: dropped,
                skip: enc.skip,
                input_hw: enc.input_hw,
            };
            let logits_fa = segnet.decode(tape, bound, &enc_fa)?;
            masked_ce(tape, logits_fa, &pseudo.classes, &pseudo.valid, &eff)?
        } else {
            zero
        };

        let s_term = tape.scale(l_s, eff.coeff_s);
        let fa_term = tape.scale(l_fa, eff.coeff_fa);
        let l_unsup = tape.add(s_term, fa_term);
        let trace = want_trace.then(|| StepTrace {
            pseudo_logits: tape.value(pseudo_logits).mapv(|v| v.to_f64()),
            strong_logits: strong_trace,
            l_unsup: tape.scalar(l_unsup).to_f64(),
        });
        let fraction = pseudo.valid_fraction();
        (l_s, l_fa, l_unsup, fraction, trace, Some(pseudo))
    };

    let l_sup = if batch.labeled.is_empty() {
        zero
    } else {
        // The supervised term is the plain network on labeled images — the
        // correction path exists only to improve pseudo-labels. One sampled
        // view per group per step keeps the labeled batch the same size as
        // the mask batch and the decoder trained on the distribution it is
        // evaluated on.
        let b = batch.labeled.len();
        let firsts: Vec<_> = batch.labeled.iter().map(|g| g.weak[0].clone()).collect();
        let x = tape.constant(stack_images::<A>(&firsts));
        let logits = segnet.forward(tape, bound, x)?;
        let shape = tape.value(logits).shape().to_vec();
        let (ch, cw) = (shape[2], shape[3]);
        let mut masks = Array3::<usize>::zeros((b, ch, cw));
        for (gi, g) in batch.labeled.iter().enumerate() {
            let m = g.mask.as_ref().ok_or_else(|| {
                Error::validation(format!("labeled group {} lost its mask", g.sampled.group_id))
            })?;
            masks.index_axis_mut(Axis(0), gi).assign(&m.mapv(|c| c as usize));
        }
        loss_sup(tape, logits, &masks)?
    };

    let l_total = loss_total(tape, l_sup, l_unsup, eff.lambda);
    Ok(StepEval {
        l_sup,
        l_s,
        l_fa,
        l_unsup,
        l_total,
        valid_fraction,
        trace,
        pseudo: pseudo_used,
    })
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps_run: u64,
}

/// Owns parameters, optimizer state, and the deterministic rng stream.
pub struct Trainer<A: Scalar> {
    pub spec: TrainerSpec,
    pub segnet: SegNet,
    pub pcn: Pcn,
    pub params: ParamStore<A>,
    pub opt: Sgd<A>,
    pub rng: ChaCha8Rng,
    pub global_step: u64,
    pub start_epoch: u64,
}

impl<A: Scalar> Trainer<A> {
    pub fn new(spec: TrainerSpec) -> Result<Self> {
        spec.validate()?;
        let segnet = SegNet::new(spec.segnet.clone())?;
        let pcn = Pcn::new(spec.pcn.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
        let mut params = ParamStore::<A>::new();
        segnet.register(&mut params, &mut rng);
        pcn.register(&mut params, &mut rng, spec.segnet.feat_channels());
        let opt = Sgd::new(spec.train.momentum, spec.train.weight_decay);
        Ok(Trainer {
            spec,
            segnet,
            pcn,
            params,
            opt,
            rng,
            global_step: 0,
            start_epoch: 0,
        })
    }

    /// Rebuild a trainer from a checkpoint, continuing its rng stream.
    pub fn restore(spec: TrainerSpec, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(spec)?;
        t.params = ckpt.params.cast::<A>();
        let velocity = ckpt
            .velocity
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|x| sc::<A>(x))))
            .collect();
        t.opt.set_velocity(velocity);
        t.rng = ckpt.rng.restore();
        t.global_step = ckpt.step;
        t.start_epoch = ckpt.epoch;
        Ok(t)
    }

    /// Sample and load one batch of labeled and unlabeled groups.
    pub fn prepare_batch(
        &mut self,
        manifest: &DatasetManifest,
        labeled_ids: &[String],
        unlabeled_ids: &[String],
    ) -> Result<PreparedBatch> {
        let size = manifest.file.generator_spec.image_size;
        let mut labeled = Vec::with_capacity(labeled_ids.len());
        for id in labeled_ids {
            let k = manifest.entry(id)?.views.len();
            let sv = ivs_sample(id, k, size, &self.spec.train, &self.spec.aug, &mut self.rng)?;
            labeled.push(prepare_group(manifest, sv, true, false)?);
        }
        let mut unlabeled = Vec::with_capacity(unlabeled_ids.len());
        if self.spec.loss.lambda > 0.0 {
            for id in unlabeled_ids {
                let k = manifest.entry(id)?.views.len();
                let sv = ivs_sample(id, k, size, &self.spec.train, &self.spec.aug, &mut self.rng)?;
                unlabeled.push(prepare_group(manifest, sv, false, true)?);
            }
        }
        Ok(PreparedBatch { labeled, unlabeled })
    }

    /// One optimizer update on the combined loss; returns the logged
    /// metrics (and, on request, the branch trace).
    pub fn train_step(
        &mut self,
        batch: &PreparedBatch,
        epoch: u64,
        lr: f64,
        want_trace: bool,
    ) -> Result<(StepMetrics, Option<StepTrace>)> {
        let started = Instant::now();
        let mut tape = Tape::<A>::new();
        let bound = self.params.bind(&mut tape, true);
        let eval = step_losses(
            &mut tape,
            &bound,
            &self.segnet,
            &self.pcn,
            &self.spec,
            batch,
            &mut self.rng,
            None,
            want_trace,
        )?;
        let metrics = StepMetrics {
            step: self.global_step,
            epoch,
            lr,
            l_sup: tape.scalar(eval.l_sup).to_f64(),
            l_s: tape.scalar(eval.l_s).to_f64(),
            l_fa: tape.scalar(eval.l_fa).to_f64(),
            l_total: tape.scalar(eval.l_total).to_f64(),
            valid_fraction: eval.valid_fraction,
            wall_ms: 0,
        };
        if !(metrics.l_total.is_finite()
            && metrics.l_sup.is_finite()
            && metrics.l_s.is_finite()
            && metrics.l_fa.is_finite())
        {
            let (lab, unl) = batch.ids();
            return Err(Error::Train(format!(
                "non-finite loss at step {}: l_total={} l_sup={} l_s={} l_fa={} \
                 (labeled groups {lab:?}, unlabeled groups {unl:?})",
                self.global_step, metrics.l_total, metrics.l_sup, metrics.l_s, metrics.l_fa
            )));
        }
        let grads = bound.grads(&self.params, tape.backward(eval.l_total));
        drop(tape);
        self.opt.step(&mut self.params, &grads, lr);
        self.global_step += 1;
        let metrics = StepMetrics {
            wall_ms: started.elapsed().as_millis() as u64,
            ..metrics
        };
        Ok((metrics, eval.trace))
    }

    fn checkpoint(&self, digest: &str, epoch: u64) -> Checkpoint {
        Checkpoint {
            config_digest: digest.to_string(),
            epoch,
            step: self.global_step,
            params: self.params.cast::<f64>(),
            velocity: self
                .opt
                .velocity()
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| x.to_f64())))
                .collect(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// The full training loop: `epochs × steps_per_epoch` iterations with
    /// per-step metrics lines and per-epoch checkpoints.
    pub fn train(
        &mut self,
        manifest: &DatasetManifest,
        labeled_ids: &[String],
        unlabeled_ids: &[String],
        run_dir: &Path,
        config_digest: &str,
    ) -> Result<TrainOutcome> {
        if labeled_ids.is_empty() {
            return Err(Error::validation("training needs at least one labeled group"));
        }
        let ckpt_dir = run_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let metrics_path = run_dir.join("metrics.jsonl");
        let mut metrics_file = fs::File::create(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;

        let spe = steps_per_epoch(labeled_ids.len(), unlabeled_ids.len(), &self.spec.train);
        let total_iters = (self.spec.train.epochs * spe) as u64;
        let mut labeled_cycle = Cycler::new(labeled_ids.to_vec());

        for epoch in self.start_epoch..self.spec.train.epochs as u64 {
            let mut unl_order = unlabeled_ids.to_vec();
            unl_order.shuffle(&mut self.rng);
            for s in 0..spe {
                let unl_batch: Vec<String> = if unl_order.is_empty() {
                    Vec::new()
                } else {
                    (0..self.spec.train.unlabeled_per_batch)
                        .map(|j| {
                            unl_order[(s * self.spec.train.unlabeled_per_batch + j) % unl_order.len()]
                                .clone()
                        })
                        .collect()
                };
                let lab_batch: Vec<String> = (0..self.spec.train.labeled_per_batch)
                    .map(|_| labeled_cycle.next(&mut self.rng))
                    .collect();
                let batch = self.prepare_batch(manifest, &lab_batch, &unl_batch)?;
                let lr = poly_lr(
                    self.spec.train.base_lr,
                    self.global_step,
                    total_iters,
                    self.spec.train.poly_power,
                )?;
                let (metrics, _) = self.train_step(&batch, epoch, lr, false)?;
                let line = serde_json::to_string(&metrics)
                    .map_err(|e| Error::Train(format!("metrics serialization: {e}")))?;
                writeln!(metrics_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            }
            metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let every = self.spec.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every as u64 == 0 {
                let path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
                self.checkpoint(config_digest, epoch + 1).save(&path)?;
            }
        }
        metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let final_path = run_dir.join("final.ckpt");
        self.checkpoint(config_digest, self.spec.train.epochs as u64)
            .save(&final_path)?;
        Ok(TrainOutcome {
            final_checkpoint: final_path,
            metrics_path,
            steps_run: self.global_step,
        })
    }
}

/// Endless shuffled iteration over the labeled ids.
struct Cycler {
    ids: Vec<String>,
    cursor: usize,
}

impl Cycler {
    fn new(ids: Vec<String>) -> Self {
        let cursor = ids.len();
        Cycler { ids, cursor }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        if self.cursor >= self.ids.len() {
            self.ids.shuffle(rng);
            self.cursor = 0;
        }
        let id = self.ids[self.cursor].clone();
        self.cursor += 1;
        id
    }
}

/// Standard-precision training entry point.
pub fn train(
    spec: &TrainerSpec,
    manifest: &DatasetManifest,
    labeled_ids: &[String],
    unlabeled_ids: &[String],
    run_dir: &Path,
    config_digest: &str,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::<f32>::new(spec.clone())?;
    trainer.train(manifest, labeled_ids, unlabeled_ids, run_dir, config_digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group_data::{generate_synthetic_dataset, split_dataset, GeneratorSpec};
    use std::collections::HashSet;

    #[test]
    fn poly_schedule_matches_formula() {
        assert_eq!(poly_lr(0.001, 0, 100, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(0.001, 100, 100, 0.9).unwrap(), 0.0);
        let mid = poly_lr(0.001, 50, 100, 0.9).unwrap();
        assert!((mid - 5.3589e-4).abs() < 1e-7, "got {mid}");
        assert!(poly_lr(0.001, 0, 0, 0.9).is_err());
        assert!(poly_lr(0.001, 101, 100, 0.9).is_err());
    }

    fn desk_train_config() -> TrainConfig {
        TrainConfig {
            o: 6,
            p: 3,
            q: 2,
            crop_size: 96,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn view_sampling_contract() {
        let config = desk_train_config();
        let aug = AugmentConfig::with_crop((96, 96));
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let sv = ivs_sample("g0", 12, (128, 128), &config, &aug, &mut rng).unwrap();
        assert_eq!(sv.indices_o.len(), 6);
        assert_eq!(sv.indices_p.len(), 3);
        assert_eq!(sv.indices_q.len(), 2);
        assert_eq!(sv.strong.len(), 2);
        let o_set: HashSet<usize> = sv.indices_o.iter().copied().collect();
        assert_eq!(o_set.len(), 6, "O indices must be distinct");
        assert!(sv.indices_p.iter().all(|i| o_set.contains(i)));
        assert!(sv.indices_q.iter().all(|i| o_set.contains(i)));
        let p_set: HashSet<usize> = sv.indices_p.iter().copied().collect();
        let q_set: HashSet<usize> = sv.indices_q.iter().copied().collect();
        assert_eq!(p_set.len(), 3);
        assert_eq!(q_set.len(), 2);

        // O = K is the exhaustive draw.
        let config = TrainConfig { o: 12, p: 3, q: 2, crop_size: 96, ..TrainConfig::default() };
        let sv = ivs_sample("g0", 12, (128, 128), &config, &aug, &mut rng).unwrap();
        let all: HashSet<usize> = sv.indices_o.iter().copied().collect();
        assert_eq!(all, (0..12).collect::<HashSet<_>>());

        // O beyond K is refused.
        let config = TrainConfig { o: 13, p: 3, q: 2, crop_size: 96, ..TrainConfig::default() };
        assert!(ivs_sample("g0", 12, (128, 128), &config, &aug, &mut rng).is_err());

        // Same seed, same draw.
        let config = desk_train_config();
        let mut r1 = ChaCha8Rng::seed_from_u64(81);
        let mut r2 = ChaCha8Rng::seed_from_u64(81);
        let a = ivs_sample("g0", 12, (128, 128), &config, &aug, &mut r1).unwrap();
        let b = ivs_sample("g0", 12, (128, 128), &config, &aug, &mut r2).unwrap();
        assert_eq!(a.indices_o, b.indices_o);
        assert_eq!(a.indices_p, b.indices_p);
        assert_eq!(a.indices_q, b.indices_q);
        assert_eq!(a.geo, b.geo);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { o: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { p: 7, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { use_vam: false, use_vcm: true, ..TrainConfig::default() }
            .validate()
            .is_err());
        assert_eq!(steps_per_epoch(5, 91, &TrainConfig::default()), 12);
        assert_eq!(steps_per_epoch(5, 0, &TrainConfig::default()), 1);
    }

    fn tiny_spec(seed: u64) -> TrainerSpec {
        TrainerSpec {
            segnet: SegNetConfig {
                in_channels: 3,
                n_classes: 3,
                widths: vec![4, 6, 8, 10],
                dec_width: 6,
                fa_dropout: 0.5,
            },
            pcn: PcnConfig { wgu_widths: vec![4, 6, 8], bypass: false },
            train: TrainConfig {
                o: 2,
                p: 1,
                q: 1,
                labeled_per_batch: 1,
                unlabeled_per_batch: 1,
                epochs: 1,
                crop_size: 32,
                seed,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            aug: AugmentConfig::with_crop((32, 32)),
        }
    }

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        let mut spec = GeneratorSpec::new(4, (32, 32), 7);
        spec.views_per_group = 4;
        spec.illumination_angles = vec![0.0, 90.0, 180.0, 270.0];
        spec.boundary_visibility_width = 90.0;
        generate_synthetic_dataset(&spec, dir).unwrap()
    }

    #[test]
    fn training_runs_deterministically_and_logs() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let manifest = tiny_dataset(&data_dir);
        let (labeled, unlabeled) = split_dataset(&manifest, 0.25, 7).unwrap();
        assert_eq!(labeled.len(), 1);
        assert_eq!(unlabeled.len(), 3);

        let run = |dir: &Path| {
            let mut t = Trainer::<f32>::new(tiny_spec(9)).unwrap();
            t.train(&manifest, &labeled, &unlabeled, dir, "digest-a").unwrap()
        };
        let out1 = run(&tmp.path().join("run1"));
        let out2 = run(&tmp.path().join("run2"));

        let read_metrics = |p: &Path| -> Vec<StepMetrics> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect()
        };
        let m1 = read_metrics(&out1.metrics_path);
        let m2 = read_metrics(&out2.metrics_path);
        assert_eq!(m1.len(), 3, "ceil(3 unlabeled / 1 per batch) = 3 steps");
        assert_eq!(out1.steps_run, 3);
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.l_total, b.l_total, "same seed, same loss");
            assert_eq!(a.l_sup, b.l_sup);
            assert_eq!(a.valid_fraction, b.valid_fraction);
        }
        // The logged lr follows the poly schedule exactly.
        for (i, m) in m1.iter().enumerate() {
            assert_eq!(m.lr, poly_lr(0.001, i as u64, 3, 0.9).unwrap());
            assert!(m.l_total.is_finite());
        }
        assert!(out1.final_checkpoint.exists());
        assert!(tmp.path().join("run1/checkpoints/epoch_0000.ckpt").exists());

        // The final checkpoint restores into an identical parameter set.
        let ckpt = Checkpoint::load(&out1.final_checkpoint, Some("digest-a")).unwrap();
        assert_eq!(ckpt.step, 3);
        let t = Trainer::<f32>::restore(tiny_spec(9), &ckpt).unwrap();
        assert_eq!(t.global_step, 3);
    }

    #[test]
    fn zero_epochs_saves_initialization_only() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"));
        let (labeled, unlabeled) = split_dataset(&manifest, 0.25, 7).unwrap();
        let mut spec = tiny_spec(1);
        spec.train.epochs = 0;
        let mut t = Trainer::<f32>::new(spec).unwrap();
        let out = t
            .train(&manifest, &labeled, &unlabeled, &tmp.path().join("run"), "d")
            .unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(out.final_checkpoint.exists());
        assert_eq!(fs::read_to_string(&out.metrics_path).unwrap(), "");
        let ckpt = Checkpoint::load(&out.final_checkpoint, None).unwrap();
        assert_eq!(ckpt.step, 0);
    }

    #[test]
    fn zero_lr_step_keeps_parameters_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"));
        let (labeled, unlabeled) = split_dataset(&manifest, 0.25, 7).unwrap();
        let mut t = Trainer::<f32>::new(tiny_spec(3)).unwrap();
        let batch = t
            .prepare_batch(&manifest, &labeled[..1].to_vec(), &unlabeled[..1].to_vec())
            .unwrap();
        let before = t.params.clone();
        let (metrics, _) = t.train_step(&batch, 0, 0.0, false).unwrap();
        assert!(metrics.l_total.is_finite());
        for (name, p) in t.params.iter() {
            assert_eq!(before.get(name), p, "{name} must not move at lr 0");
        }
    }

    #[test]
    fn bypass_step_equals_independent_two_strong_reference() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"));
        let (labeled, unlabeled) = split_dataset(&manifest, 0.25, 7).unwrap();
        let mut spec = tiny_spec(11);
        spec.train.o = 3;
        spec.train.p = 1;
        spec.train.q = 2;
        spec.train.group_baseline_only = true;
        spec.train.use_ca = false;
        spec.train.use_fa = false;
        spec.train.unlabeled_per_batch = 2;
        spec.loss.strong_reduction = StrongReduction::Sum;
        let mut t = Trainer::<f64>::new(spec).unwrap();

        for step in 0..3 {
            let unl: Vec<String> = vec![
                unlabeled[step % 3].clone(),
                unlabeled[(step + 1) % 3].clone(),
            ];
            let batch = t.prepare_batch(&manifest, &labeled, &unl).unwrap();
            let (metrics, trace) = t.train_step(&batch, 0, 1e-3, true).unwrap();
            let trace = trace.unwrap();

            // Reference: pseudo-label each group's weak logits by hand and
            // sum the two strong-branch masked CE terms.
            let pl = &trace.pseudo_logits;
            let (b, c, h, w) = {
                let s = pl.shape();
                (s[0], s[1], s[2], s[3])
            };
            let mut reference = 0.0;
            for gi in 0..b {
                let mut group_term = 0.0;
                for yi in 0..h {
                    for xi in 0..w {
                        let vals: Vec<f64> = (0..c).map(|ci| pl[[gi, ci, yi, xi]]).collect();
                        let mut best = 0;
                        for ci in 1..c {
                            if vals[ci] > vals[best] {
                                best = ci;
                            }
                        }
                        let denom: f64 = vals.iter().map(|v| (v - vals[best]).exp()).sum();
                        if 1.0 / denom < 0.95 {
                            continue;
                        }
                        for sl in &trace.strong_logits {
                            let sv: Vec<f64> = (0..c).map(|ci| sl[[gi, ci, yi, xi]]).collect();
                            let m = sv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let lse = m + sv.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                            group_term += lse - sv[best];
                        }
                    }
                }
                reference += group_term / (h * w) as f64;
            }
            reference /= b as f64;
            assert!(
                (trace.l_unsup - reference).abs() < 1e-6,
                "step {step}: engine {} vs reference {reference}",
                trace.l_unsup
            );
            assert!(metrics.l_total.is_finite());
        }
    }

    #[test]
    fn step_loss_gradients_match_finite_differences() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(&tmp.path().join("data"));
        let (labeled, unlabeled) = split_dataset(&manifest, 0.25, 7).unwrap();
        let spec = tiny_spec(13);
        let mut t = Trainer::<f64>::new(spec.clone()).unwrap();
        let batch = t
            .prepare_batch(&manifest, &labeled, &unlabeled[..1].to_vec())
            .unwrap();
        let rng_at_step = t.rng.clone();

        // Establish the base point's pseudo-targets once; the oracle must
        // differentiate the loss with those targets held fixed.
        let base_pseudo = {
            let mut tape = Tape::<f64>::new();
            let bound = t.params.bind(&mut tape, false);
            let mut rng = rng_at_step.clone();
            step_losses(&mut tape, &bound, &t.segnet, &t.pcn, &spec, &batch, &mut rng, None, false)
                .unwrap()
                .pseudo
                .unwrap()
        };
        let eval_loss = |params: &ParamStore<f64>, trainable: bool| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape, trainable);
            let mut rng = rng_at_step.clone();
            let eval = step_losses(
                &mut tape, &bound, &t.segnet, &t.pcn, &spec, &batch, &mut rng,
                Some(&base_pseudo), false,
            )
            .unwrap();
            (tape, bound, eval.l_total)
        };
        let (tape, bound, loss) = eval_loss(&t.params, true);
        let grads = bound.grads(&t.params, tape.backward(loss));
        let mut pick_rng = ChaCha8Rng::seed_from_u64(100);
        let picks = crate::nn::random_picks(&t.params, 10, &mut pick_rng, |_| true);
        let records = crate::nn::check_gradients(&t.params, &grads, &picks, 1e-5, |p| {
            let (tape, _, l) = eval_loss(p, false);
            tape.scalar(l)
        });
        for r in &records {
            assert!(
                r.rel_err < 1e-3,
                "{}[{}]: rel err {}",
                r.pick.name,
                r.pick.index,
                r.rel_err
            );
        }
    }
}
