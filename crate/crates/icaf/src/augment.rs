//! Input perturbations: weak geometric transforms (resize/crop/flip) whose
//! parameters are shared by every view of a group within one iteration,
//! strong intensity transforms (jitter/blur/grayscale), and CutMix for the
//! strong branch. Weak geometry must be shared because one view's
//! pseudo-label supervises other views pixel-by-pixel.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ranges for all perturbations; every field is overridable from the run
/// config.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    /// Output (training) size (H, W).
    pub crop_size: (usize, usize),
    pub flip_prob: f64,
    /// Max deviation of the brightness/contrast/saturation factors from 1.
    pub jitter: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub grayscale_prob: f64,
    pub cutmix_prob: f64,
    /// CutMix box area as a fraction of the image.
    pub cutmix_area: (f64, f64),
}

impl AugmentConfig {
    pub fn with_crop(crop_size: (usize, usize)) -> Self {
        AugmentConfig {
            scale_range: (0.5, 2.0),
            crop_size,
            flip_prob: 0.5,
            jitter: 0.5,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            grayscale_prob: 0.2,
            cutmix_prob: 0.5,
            cutmix_area: (0.25, 0.5),
        }
    }
}

/// One iteration's shared geometric draw: resize by `scale`, crop `crop` =
/// (x, y, h, w) in scaled coordinates, then optional horizontal flip.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoParams {
    pub scale: f64,
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
}

impl GeoParams {
    pub fn identity(size: (usize, usize)) -> Self {
        GeoParams {
            scale: 1.0,
            crop: (0, 0, size.0, size.1),
            flip: false,
        }
    }
}

/// One strong-branch draw. Factors of 1 (and sigma 0) are exact no-ops.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: f64,
    pub grayscale: bool,
    /// (x, y, h, w) in training-size coordinates; filled in by the trainer
    /// batch-wide so every group mixes with the same box.
    pub cutmix: Option<(usize, usize, usize, usize)>,
}

impl StrongParams {
    pub fn identity() -> Self {
        StrongParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            blur_sigma: 0.0,
            grayscale: false,
            cutmix: None,
        }
    }
}

/// Draw weak geometry for a source of `source_size` (H, W).
pub fn sample_weak_params(
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
    source_size: (usize, usize),
) -> Result<GeoParams> {
    let (sh, sw) = source_size;
    let (ch, cw) = config.crop_size;
    // Smallest scale at which the crop still fits.
    let fit = (ch as f64 / sh as f64).max(cw as f64 / sw as f64);
    let (lo, hi) = config.scale_range;
    if hi < fit {
        return Err(Error::validation(format!(
            "crop {ch}x{cw} does not fit a {sh}x{sw} source at any scale in \
             [{lo}, {hi}]"
        )));
    }
    let lo = lo.max(fit);
    let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let scaled_h = ((sh as f64 * scale).round() as usize).max(ch);
    let scaled_w = ((sw as f64 * scale).round() as usize).max(cw);
    let x = rng.random_range(0..=scaled_w - cw);
    let y = rng.random_range(0..=scaled_h - ch);
    let flip = rng.random_range(0.0..1.0) < config.flip_prob;
    Ok(GeoParams {
        scale,
        crop: (x, y, ch, cw),
        flip,
    })
}

/// Map an output pixel index to source coordinates (half-pixel centers).
fn src_coord(out_idx: usize, crop_off: usize, scale: f64, src_len: usize) -> f64 {
    (((out_idx + crop_off) as f64 + 0.5) / scale - 0.5).clamp(0.0, src_len as f64 - 1.0)
}

/// Weak transform of an image (bilinear interpolation).
pub fn apply_weak_image(img: &Array3<f32>, p: &GeoParams) -> Array3<f32> {
    let (c, sh, sw) = img.dim();
    let (cx, cy, oh, ow) = p.crop;
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for y in 0..oh {
        let sy = src_coord(y, cy, p.scale, sh);
        let i0 = sy.floor() as usize;
        let i1 = (i0 + 1).min(sh - 1);
        let fy = (sy - i0 as f64) as f32;
        for x in 0..ow {
            let u = if p.flip { ow - 1 - x } else { x };
            let sx = src_coord(u, cx, p.scale, sw);
            let j0 = sx.floor() as usize;
            let j1 = (j0 + 1).min(sw - 1);
            let fx = (sx - j0 as f64) as f32;
            for ch in 0..c {
                let top = img[[ch, i0, j0]] * (1.0 - fx) + img[[ch, i0, j1]] * fx;
                let bot = img[[ch, i1, j0]] * (1.0 - fx) + img[[ch, i1, j1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Weak transform of a mask (nearest-neighbor, class-preserving).
pub fn apply_weak_mask(mask: &Array2<u8>, p: &GeoParams) -> Array2<u8> {
    let (sh, sw) = mask.dim();
    let (cx, cy, oh, ow) = p.crop;
    let mut out = Array2::<u8>::zeros((oh, ow));
    for y in 0..oh {
        let sy = src_coord(y, cy, p.scale, sh).round() as usize;
        for x in 0..ow {
            let u = if p.flip { ow - 1 - x } else { x };
            let sx = src_coord(u, cx, p.scale, sw).round() as usize;
            out[[y, x]] = mask[[sy.min(sh - 1), sx.min(sw - 1)]];
        }
    }
    out
}

/// Draw strong intensity parameters (CutMix box left absent; the trainer
/// draws one box per strong branch for the whole batch).
pub fn sample_strong_params(rng: &mut ChaCha8Rng, config: &AugmentConfig) -> StrongParams {
    let j = config.jitter;
    let f = |rng: &mut ChaCha8Rng| {
        if j > 0.0 {
            rng.random_range((1.0 - j).max(0.0)..1.0 + j)
        } else {
            1.0
        }
    };
    let brightness = f(rng);
    let contrast = f(rng);
    let saturation = f(rng);
    let blur = rng.random_range(0.0..1.0) < config.blur_prob;
    let blur_sigma = if blur {
        rng.random_range(config.blur_sigma.0..config.blur_sigma.1)
    } else {
        0.0
    };
    let grayscale = rng.random_range(0.0..1.0) < config.grayscale_prob;
    StrongParams {
        brightness,
        contrast,
        saturation,
        blur_sigma,
        grayscale,
        cutmix: None,
    }
}

/// Draw one CutMix box (or none) for a training-size image.
pub fn sample_cutmix_box(
    rng: &mut ChaCha8Rng,
    config: &AugmentConfig,
    size: (usize, usize),
) -> Option<(usize, usize, usize, usize)> {
    if rng.random_range(0.0..1.0) >= config.cutmix_prob {
        return None;
    }
    let (h, w) = size;
    let area = rng.random_range(config.cutmix_area.0..config.cutmix_area.1);
    let ratio = rng.random_range(0.5..2.0f64);
    let bh = ((h as f64 * w as f64 * area * ratio).sqrt().round() as usize).clamp(1, h);
    let bw = ((h as f64 * w as f64 * area / ratio).sqrt().round() as usize).clamp(1, w);
    let y = rng.random_range(0..=h - bh);
    let x = rng.random_range(0..=w - bw);
    Some((x, y, bh, bw))
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Strong intensity transform; geometry (and hence any pixel-aligned
/// target) is untouched. Output clamped to [0, 1].
pub fn apply_strong(img: &Array3<f32>, p: &StrongParams) -> Array3<f32> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "apply_strong expects RGB");
    let mut out = img.clone();
    if p.brightness != 1.0 {
        out.mapv_inplace(|v| v * p.brightness as f32);
    }
    if p.contrast != 1.0 {
        let mut mean = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                mean += luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]) as f64;
            }
        }
        let mean = (mean / (h * w) as f64) as f32;
        let k = p.contrast as f32;
        out.mapv_inplace(|v| mean + (v - mean) * k);
    }
    if p.saturation != 1.0 {
        let k = p.saturation as f32;
        for y in 0..h {
            for x in 0..w {
                let g = luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                for ch in 0..3 {
                    out[[ch, y, x]] = g + (out[[ch, y, x]] - g) * k;
                }
            }
        }
    }
    if p.grayscale {
        for y in 0..h {
            for x in 0..w {
                let g = luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                for ch in 0..3 {
                    out[[ch, y, x]] = g;
                }
            }
        }
    }
    if p.blur_sigma > 0.0 {
        out = gaussian_blur(&out, p.blur_sigma);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(img: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let ksum: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / ksum).collect();
    let (c, h, w) = img.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as i64 + ki as i64 - radius, w);
                    acc += img[[ch, y, sx]] * k;
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as i64 + ki as i64 - radius, h);
                    acc += tmp[[ch, sy, x]] * k;
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Mix two (image, hard target, validity) triples with one box: inside the
/// box the b-side wins, outside the a-side.
#[allow(clippy::too_many_arguments)]
pub fn cutmix_pair(
    img_a: &Array3<f32>,
    img_b: &Array3<f32>,
    tgt_a: &Array2<u8>,
    tgt_b: &Array2<u8>,
    valid_a: &Array2<bool>,
    valid_b: &Array2<bool>,
    bbox: (usize, usize, usize, usize),
) -> Result<(Array3<f32>, Array2<u8>, Array2<bool>)> {
    let (c, h, w) = img_a.dim();
    if img_b.dim() != (c, h, w)
        || tgt_a.dim() != (h, w)
        || tgt_b.dim() != (h, w)
        || valid_a.dim() != (h, w)
        || valid_b.dim() != (h, w)
    {
        return Err(Error::Shape(
            "cutmix_pair: inputs must share H and W".into(),
        ));
    }
    let (bx, by, bh, bw) = bbox;
    if by + bh > h || bx + bw > w {
        return Err(Error::validation(format!(
            "cutmix box ({bx}, {by}, {bh}, {bw}) exceeds {h}x{w} image"
        )));
    }
    let mut img = img_a.clone();
    let mut tgt = tgt_a.clone();
    let mut valid = valid_a.clone();
    for y in by..by + bh {
        for x in bx..bx + bw {
            for ch in 0..c {
                img[[ch, y, x]] = img_b[[ch, y, x]];
            }
            tgt[[y, x]] = tgt_b[[y, x]];
            valid[[y, x]] = valid_b[[y, x]];
        }
    }
    Ok((img, tgt, valid))
}
