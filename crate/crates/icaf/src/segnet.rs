//! A small configurable encoder–decoder segmentation network.
//!
//! The encoder is a chain of strided residual stages (one per factor-of-two
//! downsampling, so `stride = 2^stages`); the decoder reduces the deep
//! features, fuses one quarter-resolution skip connection and predicts
//! class logits upsampled back to the input size. Group normalization keeps
//! every forward pass batch-independent and deterministic.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{conv, group_norm, norm_groups, register_conv, register_norm, Bound, ParamStore};
use crate::tensor::{sc, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Output channel width of each encoder stage; one stage per
    /// factor-of-two, so the output stride is 2^len.
    pub widths: Vec<usize>,
    /// Decoder working width.
    pub dec_width: usize,
    /// Channel-dropout rate of the feature-augmentation branch.
    pub fa_dropout: f64,
}

impl SegNetConfig {
    /// The reference configuration: stride 16, widths 32/64/128/256.
    pub fn reference(n_classes: usize) -> Self {
        SegNetConfig {
            in_channels: 3,
            n_classes,
            widths: vec![32, 64, 128, 256],
            dec_width: 64,
            fa_dropout: 0.5,
        }
    }

    /// A small configuration for CPU-scale experiments.
    pub fn desk(n_classes: usize) -> Self {
        SegNetConfig {
            in_channels: 3,
            n_classes,
            widths: vec![12, 20, 32, 48],
            dec_width: 20,
            fa_dropout: 0.5,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    /// Channel count of the encoder output (the embedding space).
    pub fn feat_channels(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config(
                "segnet needs at least 3 stages (stride >= 8) so the skip \
                 connection is shallower than the embedding"
                    .into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("segnet needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.fa_dropout) {
            return Err(Error::Config(format!(
                "fa_dropout {} outside [0, 1)",
                self.fa_dropout
            )));
        }
        Ok(())
    }
}

/// Encoder outputs: deep features plus the skip tensor the decoder fuses.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// (B, feat_channels, H/s, W/s)
    pub features: Var,
    /// (B, widths[1], H/4, W/4)
    pub skip: Var,
    /// Input (H, W), the decoder's output size.
    pub input_hw: (usize, usize),
}

pub struct SegNet {
    pub config: SegNetConfig,
}

impl SegNet {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(SegNet { config })
    }

    /// Register all parameters under the `seg.` namespace.
    pub fn register<A: Scalar>(&self, store: &mut ParamStore<A>, rng: &mut ChaCha8Rng) {
        let c = &self.config;
        let mut c_in = c.in_channels;
        for (i, &w) in c.widths.iter().enumerate() {
            let p = format!("seg.enc{i}");
            register_conv(store, rng, &format!("{p}.conv1"), c_in, w, 3, false);
            register_norm(store, &format!("{p}.norm1"), w);
            register_conv(store, rng, &format!("{p}.conv2"), w, w, 3, false);
            register_norm(store, &format!("{p}.norm2"), w);
            register_conv(store, rng, &format!("{p}.proj"), c_in, w, 1, false);
            register_norm(store, &format!("{p}.normp"), w);
            c_in = w;
        }
        let f = c.feat_channels();
        register_conv(store, rng, "seg.dec.reduce", f, c.dec_width, 1, false);
        register_norm(store, "seg.dec.norm_r", c.dec_width);
        register_conv(
            store,
            rng,
            "seg.dec.fuse",
            c.dec_width + c.widths[1],
            c.dec_width,
            3,
            false,
        );
        register_norm(store, "seg.dec.norm_f", c.dec_width);
        // Classifier keeps a bias (zero-initialized by registration).
        register_conv(store, rng, "seg.dec.head", c.dec_width, c.n_classes, 1, true);
    }

    fn stage<A: Scalar>(&self, tape: &mut Tape<A>, bound: &Bound, prefix: &str, x: Var) -> Var {
        let h = conv(tape, bound, &format!("{prefix}.conv1"), x, 2, 1);
        let h = group_norm(tape, bound, &format!("{prefix}.norm1"), h);
        let h = tape.relu(h);
        let h = conv(tape, bound, &format!("{prefix}.conv2"), h, 1, 1);
        let h = group_norm(tape, bound, &format!("{prefix}.norm2"), h);
        let s = conv(tape, bound, &format!("{prefix}.proj"), x, 2, 0);
        let s = group_norm(tape, bound, &format!("{prefix}.normp"), s);
        let sum = tape.add(h, s);
        tape.relu(sum)
    }

    /// Embed a batch of images (B, 3, H, W); H and W must be divisible by
    /// the output stride.
    pub fn encode<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        bound: &Bound,
        x: Var,
    ) -> Result<Encoded> {
        let dim = tape.value(x).shape().to_vec();
        let (h, w) = (dim[2], dim[3]);
        let s = self.config.stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by output stride {s}"
            )));
        }
        if dim[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, segnet expects {}",
                dim[1], self.config.in_channels
            )));
        }
        let mut cur = x;
        let mut skip = None;
        for i in 0..self.config.widths.len() {
            cur = self.stage(tape, bound, &format!("seg.enc{i}"), cur);
            if i == 1 {
                skip = Some(cur);
            }
        }
        Ok(Encoded {
            features: cur,
            skip: skip.expect("at least 3 stages"),
            input_hw: (h, w),
        })
    }

    /// Decode features (with their skip tensor) into (B, C, H, W) logits.
    pub fn decode<A: Scalar>(
        &self,
        tape: &mut Tape<A>,
        bound: &Bound,
        enc: &Encoded,
    ) -> Result<Var> {
        let fdim = tape.value(enc.features).shape().to_vec();
        if fdim[1] != self.config.feat_channels() {
            return Err(Error::Shape(format!(
                "decode: features have {} channels, expected {}",
                fdim[1],
                self.config.feat_channels()
            )));
        }
        let (h, w) = enc.input_hw;
        let x = conv(tape, bound, "seg.dec.reduce", enc.features, 1, 0);
        let x = group_norm(tape, bound, "seg.dec.norm_r", x);
        let x = tape.relu(x);
        let x = tape.upsample_bilinear(x, h / 4, w / 4);
        let x = tape.concat_channels(x, enc.skip);
        let x = conv(tape, bound, "seg.dec.fuse", x, 1, 1);
        let x = group_norm(tape, bound, "seg.dec.norm_f", x);
        let x = tape.relu(x);
        let x = conv(tape, bound, "seg.dec.head", x, 1, 0);
        Ok(tape.upsample_bilinear(x, h, w))
    }

    /// decode(encode(x)) in one call.
    pub fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bound: &Bound, x: Var) -> Result<Var> {
        let enc = self.encode(tape, bound, x)?;
        self.decode(tape, bound, &enc)
    }
}

/// Channel-wise dropout on a feature map (N, C, h, w): during training each
/// channel is zeroed with probability `rate` and survivors are scaled by
/// 1/(1−rate); outside training (or at rate 0) this is the identity.
pub fn feature_dropout<A: Scalar>(
    tape: &mut Tape<A>,
    features: Var,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::validation(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(features);
    }
    let dim = tape.value(features).shape().to_vec();
    let (n, c) = (dim[0], dim[1]);
    let scale = 1.0 / (1.0 - rate);
    let keep = Array2::from_shape_simple_fn((n, c), || {
        if rng.random_range(0.0..1.0) < rate {
            A::zero()
        } else {
            sc(scale)
        }
    });
    Ok(tape.dropout_channels(features, keep))
}

/// GroupNorm group count for the embedding width (re-exported convenience).
pub fn feat_norm_groups(channels: usize) -> usize {
    norm_groups(channels)
}
