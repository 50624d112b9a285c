//! The pseudo-label correction network.
//!
//! Two cooperating parts refine what a single view would predict:
//!
//! * The weight generation unit (WGU) scores every weak view per pixel with
//!   a shared-parameter encoder–decoder; a softmax **across the views**
//!   turns the scores into convex weights, and the weighted per-pixel sum
//!   of the views synthesizes one boundary-aware view whose edges come from
//!   whichever view lit them best.
//! * The spatial interaction unit (SIU) embeds the boundary-aware view and
//!   a few interaction views with the shared segmentation encoder, gates
//!   each view's features by a sigmoid map computed from the concatenated
//!   pair, and sums the gated features into one corrected feature map.
//!
//! A bypass mode short-circuits both parts (boundary view := first view,
//! corrected features := its embedding) so the trainer can reduce exactly
//! to the group-consistency baseline.

use ndarray::Axis;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{conv, group_norm, register_conv, register_norm, Bound, ParamStore};
use crate::segnet::{Encoded, SegNet};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PcnConfig {
    /// Widths of the three WGU downsampling stages.
    pub wgu_widths: Vec<usize>,
    /// Identity mode: skip WGU and SIU entirely.
    pub bypass: bool,
}

impl PcnConfig {
    pub fn reference() -> Self {
        PcnConfig {
            wgu_widths: vec![16, 32, 64],
            bypass: false,
        }
    }

    pub fn desk() -> Self {
        PcnConfig {
            wgu_widths: vec![8, 12, 16],
            bypass: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wgu_widths.len() != 3 {
            return Err(Error::Config(format!(
                "wgu_widths must have exactly 3 stages, got {}",
                self.wgu_widths.len()
            )));
        }
        Ok(())
    }
}

/// Everything the unlabeled (or labeled) correction pass produces.
pub struct PcnOutput {
    /// Corrected features bundled with the boundary view's skip tensor so
    /// they can be decoded like any encoder output.
    pub corrected: Encoded,
    /// (1, 3, H, W) synthesized boundary-aware view.
    pub boundary_view: Var,
    /// (O, 1, H, W) per-view weights; absent in bypass mode.
    pub weights: Option<Var>,
    /// Number of SIU gate pairs evaluated.
    pub pairs_evaluated: usize,
}

pub struct Pcn {
    pub config: PcnConfig,
}

impl Pcn {
    pub fn new(config: PcnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pcn { config })
    }

    /// Register WGU parameters (`wgu.`) and SIU parameters (`siu.`);
    /// `feat_channels` is the segmentation encoder's embedding width.
    pub fn register<A: Scalar>(
        &self,
        store: &mut ParamStore<A>,
        rng: &mut ChaCha8Rng,
        feat_channels: usize,
    ) {
        let w = &self.config.wgu_widths;
        register_conv(store, rng, "wgu.down0", 3, w[0], 3, false);
        register_norm(store, "wgu.norm_d0", w[0]);
        register_conv(store, rng, "wgu.down1", w[0], w[1], 3, false);
        register_norm(store, "wgu.norm_d1", w[1]);
        register_conv(store, rng, "wgu.down2", w[1], w[2], 3, false);
        register_norm(store, "wgu.norm_d2", w[2]);
        register_conv(store, rng, "wgu.up2", w[2], w[1], 3, false);
        register_norm(store, "wgu.norm_u2", w[1]);
        register_conv(store, rng, "wgu.up1", w[1], w[0], 3, false);
        register_norm(store, "wgu.norm_u1", w[0]);
        register_conv(store, rng, "wgu.fuse", 2 * w[0], w[0], 3, false);
        register_norm(store, "wgu.norm_f", w[0]);
        register_conv(store, rng, "wgu.head", w[0], 1, 1, true);

        let mid = (feat_channels / 2).max(1);
        register_conv(store, rng, "siu.proj1", 2 * feat_channels, mid, 3, true);
        register_conv(store, rng, "siu.proj2", mid, 1, 1, true);
    }

    /// Per-view score maps (O, 1, H, W) from the shared-parameter unit; the
    /// views ride the batch axis so parameters are shared by construction.
    pub fn wgu_logits<A: Scalar>(&self, tape: &mut Tape<A>, bound: &Bound, views: Var) -> Result<Var> {
        let dim = tape.value(views).shape().to_vec();
        let (h, w) = (dim[2], dim[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "weight generation needs sizes divisible by 8, got {h}x{w}"
            )));
        }
        let d0 = conv(tape, bound, "wgu.down0", views, 2, 1);
        let d0 = group_norm(tape, bound, "wgu.norm_d0", d0);
        let d0 = tape.relu(d0);
        let d1 = conv(tape, bound, "wgu.down1", d0, 2, 1);
        let d1 = group_norm(tape, bound, "wgu.norm_d1", d1);
        let d1 = tape.relu(d1);
        let d2 = conv(tape, bound, "wgu.down2", d1, 2, 1);
        let d2 = group_norm(tape, bound, "wgu.norm_d2", d2);
        let d2 = tape.relu(d2);
        let u2 = tape.upsample_bilinear(d2, h / 4, w / 4);
        let u2 = conv(tape, bound, "wgu.up2", u2, 1, 1);
        let u2 = group_norm(tape, bound, "wgu.norm_u2", u2);
        let u2 = tape.relu(u2);
        let u1 = tape.upsample_bilinear(u2, h / 2, w / 2);
        let u1 = conv(tape, bound, "wgu.up1", u1, 1, 1);
        let u1 = group_norm(tape, bound, "wgu.norm_u1", u1);
        let u1 = tape.relu(u1);
        // Fuse the shallow first-stage features into the decoder path.
        let f = tape.concat_channels(u1, d0);
        let f = conv(tape, bound, "wgu.fuse", f, 1, 1);
        let f = group_norm(tape, bound, "wgu.norm_f", f);
        let f = tape.relu(f);
        let f = tape.upsample_bilinear(f, h, w);
        Ok(conv(tape, bound, "wgu.head", f, 1, 0))
    }

    /// Convex per-pixel view weights: softmax of the WGU scores across the
    /// O views.
    pub fn wgu_forward<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        bound: &Bound,
        views: Var,
    ) -> Result<Var> {
        let logits = self.wgu_logits(tape, bound, views)?;
        Ok(tape.softmax_views(logits))
    }

    /// Gate one interaction view's features against the boundary view's:
    /// A_p = sigmoid(Proj(concat(F_p, F̂))) × F_p.
    pub fn siu_gate<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        bound: &Bound,
        f_p: Var,
        f_hat: Var,
    ) -> Result<Var> {
        if tape.value(f_p).shape() != tape.value(f_hat).shape() {
            return Err(Error::Shape(format!(
                "siu_gate: feature shapes differ ({:?} vs {:?})",
                tape.value(f_p).shape(),
                tape.value(f_hat).shape()
            )));
        }
        let cat = tape.concat_channels(f_p, f_hat);
        let g = conv(tape, bound, "siu.proj1", cat, 1, 1);
        let g = tape.relu(g);
        let g = conv(tape, bound, "siu.proj2", g, 1, 0);
        let gate = tape.sigmoid(g);
        Ok(tape.mul_gate(f_p, gate))
    }

    /// Full correction pass over the O weak views of one group.
    /// `views` is an (O, 3, H, W) node; P interaction views are drawn from
    /// the O views without replacement.
    pub fn forward<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        bound: &Bound,
        segnet: &SegNet,
        views: Var,
        p: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PcnOutput> {
        let o = tape.value(views).shape()[0];
        if self.config.bypass {
            return self.forward_with_toggles(tape, bound, segnet, views, &[], false, false);
        }
        if p == 0 {
            return Err(Error::validation(
                "P must be at least 1 outside bypass mode",
            ));
        }
        if p > o {
            return Err(Error::validation(format!(
                "cannot draw P={p} interaction views from O={o}"
            )));
        }
        let picks: Vec<usize> = sample(rng, o, p).iter().collect();
        self.forward_with_toggles(tape, bound, segnet, views, &picks, true, true)
    }

    /// Correction pass with explicit interaction-view positions (indices
    /// into the O-stack) and per-component switches. With both switches off
    /// this is the bypass path; with only `use_vam` the boundary view is
    /// synthesized but its embedding is used uncorrected.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_toggles<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        bound: &Bound,
        segnet: &SegNet,
        views: Var,
        picks: &[usize],
        use_vam: bool,
        use_vcm: bool,
    ) -> Result<PcnOutput> {
        let o = tape.value(views).shape()[0];
        if !use_vam {
            if use_vcm {
                return Err(Error::Config(
                    "view correction requires view augmentation (use_vcm without use_vam)".into(),
                ));
            }
            let first = tape.select_batch(views, 0);
            let enc = segnet.encode(tape, bound, first)?;
            return Ok(PcnOutput {
                corrected: enc,
                boundary_view: first,
                weights: None,
                pairs_evaluated: 0,
            });
        }
        let weights = self.wgu_forward(tape, bound, views)?;
        let boundary_view = synthesize_boundary_view(tape, views, weights)?;
        let enc_hat = segnet.encode(tape, bound, boundary_view)?;
        if !use_vcm {
            return Ok(PcnOutput {
                corrected: enc_hat,
                boundary_view,
                weights: Some(weights),
                pairs_evaluated: 0,
            });
        }
        if picks.is_empty() {
            return Err(Error::validation(
                "view correction needs at least one interaction view",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in picks {
            if i >= o || !seen.insert(i) {
                return Err(Error::validation(format!(
                    "interaction views must be distinct indices below O={o}, got {picks:?}"
                )));
            }
        }
        // Encode the P interaction views in one pass (group norm keeps the
        // result identical to per-view encoding).
        let selected: Vec<Var> = picks
            .iter()
            .map(|&i| tape.select_batch(views, i))
            .collect();
        let batch = tape.concat_batch(&selected);
        let enc_p = segnet.encode(tape, bound, batch)?;
        let mut pairs = Vec::with_capacity(picks.len());
        for i in 0..picks.len() {
            let f_p = tape.select_batch(enc_p.features, i);
            pairs.push(self.siu_gate(tape, bound, f_p, enc_hat.features)?);
        }
        let corrected = vcm_aggregate(tape, &pairs)?;
        Ok(PcnOutput {
            corrected: Encoded {
                features: corrected,
                skip: enc_hat.skip,
                input_hw: enc_hat.input_hw,
            },
            boundary_view,
            weights: Some(weights),
            pairs_evaluated: picks.len(),
        })
    }
}

/// X̂ = Σ_o w_o · x_o. Verifies the weights are a valid convex combination
/// (per-pixel sum 1 ± 1e-5) before synthesizing.
pub fn synthesize_boundary_view<A: Scalar>(
    tape: &mut Tape<A>,
    views: Var,
    weights: Var,
) -> Result<Var> {
    let wv = tape.value(weights);
    let sums = wv.sum_axis(Axis(0));
    for &s in sums.iter() {
        let s = s.to_f64();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::validation(format!(
                "view weights sum to {s} at some pixel; expected 1 ± 1e-5"
            )));
        }
    }
    Ok(tape.weighted_sum_views(views, weights))
}

/// Elementwise sum of the P gated features.
pub fn vcm_aggregate<A: Scalar>(tape: &mut Tape<A>, pairs: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = pairs.split_first() else {
        return Err(Error::validation(
            "corrected-feature aggregation needs at least one gated pair",
        ));
    };
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p);
    }
    Ok(acc)
}
