//! Evaluation under the one-to-one protocol and visualization panels.
//!
//! Testing scores every view of every test group independently against the
//! group's shared ground-truth mask (the correction network is a training
//! device only), pooling a single confusion matrix: the reported mIoU is
//! the micro-average over all evaluated pixels, not a mean of per-image
//! scores.
//!
//! Panel export writes, per group: the sampled raw views (`view_XX.png`),
//! the synthesized boundary-aware view (`boundary_view.png`), per-view
//! weight heatmaps (`weight_XX.png`), and pseudo-labels with confidence
//! and validity masks at three stages — single view (`*_single.png`),
//! after view augmentation (`*_vam.png`), and after the full correction
//! (`*_vam_vcm.png`).

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis, Ix4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_data::{load_group, DatasetManifest};
use crate::nn::ParamStore;
use crate::objective::{pseudo_label, PseudoLabel};
use crate::pcn::{synthesize_boundary_view, vcm_aggregate, Pcn};
use crate::segnet::{Encoded, SegNet};
use crate::tensor::{sc, Scalar, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    /// counts[(g, p)] = pixels with ground truth g predicted p.
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((n_classes, n_classes)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }
}

/// Add one prediction/ground-truth pair's per-pixel joint counts.
pub fn accumulate_confusion(
    pred: &Array2<usize>,
    gt: &Array2<usize>,
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "confusion: prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let c = cm.n_classes();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p >= c || g >= c {
            return Err(Error::validation(format!(
                "confusion: class {} out of range for {c} classes",
                p.max(g)
            )));
        }
        cm.counts[[g, p]] += 1;
    }
    Ok(())
}

/// Per-class IoU (None for classes absent from both prediction and ground
/// truth) and their mean over the present classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let c = cm.n_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut n = 0usize;
    for ci in 0..c {
        let diag = cm.counts[[ci, ci]];
        let row: u64 = cm.counts.row(ci).sum();
        let col: u64 = cm.counts.column(ci).sum();
        let union = row + col - diag;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = diag as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::validation(
            "mIoU undefined: every class has zero union",
        ));
    }
    Ok((per_class, sum / n as f64))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupScore {
    pub group_id: String,
    pub n_views: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub n_groups: usize,
    pub n_views: usize,
    pub pixels: u64,
    pub per_group: Vec<GroupScore>,
}

/// Argmax class maps for a stack of views, evaluated without any dropout.
fn predict_views<A: Scalar>(
    segnet: &SegNet,
    params: &ParamStore<A>,
    views: &[Array3<f32>],
) -> Result<Vec<Array2<usize>>> {
    let (c, h, w) = views[0].dim();
    let mut stacked = ndarray::Array4::<A>::zeros((views.len(), c, h, w));
    for (i, v) in views.iter().enumerate() {
        stacked
            .index_axis_mut(Axis(0), i)
            .assign(&v.mapv(|x| sc::<A>(x as f64)));
    }
    let mut tape = Tape::<A>::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(stacked.into_dyn());
    let logits = segnet.forward(&mut tape, &bound, x)?;
    let lv = tape
        .value(logits)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap();
    let (n, nc, oh, ow) = lv.dim();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut m = Array2::<usize>::zeros((oh, ow));
        for yi in 0..oh {
            for xi in 0..ow {
                let mut best = 0usize;
                let mut best_v = lv[[ni, 0, yi, xi]];
                for ci in 1..nc {
                    let v = lv[[ni, ci, yi, xi]];
                    if v > best_v {
                        best = ci;
                        best_v = v;
                    }
                }
                m[[yi, xi]] = best;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Score every view of every listed group against its group's shared mask
/// at the native size, pooling one confusion matrix.
pub fn evaluate<A: Scalar>(
    segnet: &SegNet,
    params: &ParamStore<A>,
    manifest: &DatasetManifest,
    group_ids: &[String],
) -> Result<EvalReport> {
    let n_classes = manifest.n_classes();
    if segnet.config.n_classes != n_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes but the dataset has {n_classes}",
            segnet.config.n_classes
        )));
    }
    let mut total = ConfusionMatrix::new(n_classes);
    let mut per_group = Vec::with_capacity(group_ids.len());
    let mut n_views = 0usize;
    for id in group_ids {
        let group = load_group(manifest, id)?;
        let gt = group
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::validation(format!("test group {id} has no mask")))?
            .mapv(|v| v as usize);
        let preds = predict_views(segnet, params, &group.views)?;
        let mut cm = ConfusionMatrix::new(n_classes);
        for pred in &preds {
            accumulate_confusion(pred, &gt, &mut cm)?;
        }
        n_views += preds.len();
        let (_, group_miou) = miou(&cm)?;
        per_group.push(GroupScore {
            group_id: id.clone(),
            n_views: preds.len(),
            miou: group_miou,
        });
        total.merge(&cm);
    }
    let (per_class_iou, mean) = miou(&total)?;
    Ok(EvalReport {
        miou: mean,
        per_class_iou,
        confusion: total
            .counts
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        n_groups: group_ids.len(),
        n_views,
        pixels: total.total(),
        per_group,
    })
}

const PALETTE: [[u8; 3]; 8] = [
    [30, 30, 30],
    [200, 90, 60],
    [70, 160, 230],
    [240, 205, 80],
    [120, 200, 120],
    [190, 110, 200],
    [250, 250, 250],
    [110, 110, 60],
];

fn save_classes(path: &Path, classes: &Array2<usize>) -> Result<()> {
    let (h, w) = classes.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &c) in classes.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Rgb(PALETTE[c % PALETTE.len()]));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_gray(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in map.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([q]));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pseudo_panels(
    out_dir: &Path,
    tag: &str,
    pseudo: &PseudoLabel,
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    let classes = pseudo.classes.index_axis(Axis(0), 0).to_owned();
    let conf = pseudo.confidence.index_axis(Axis(0), 0).to_owned();
    let valid = pseudo
        .valid
        .index_axis(Axis(0), 0)
        .mapv(|v| if v { 1.0 } else { 0.0 });
    let p = out_dir.join(format!("pseudo_{tag}.png"));
    save_classes(&p, &classes)?;
    files.push(p);
    let p = out_dir.join(format!("conf_{tag}.png"));
    save_gray(&p, &conf)?;
    files.push(p);
    let p = out_dir.join(format!("valid_{tag}.png"));
    save_gray(&p, &valid)?;
    files.push(p);
    Ok(())
}

/// Export one unlabeled group's correction pipeline as image files and
/// return the written paths. The group's views are used untransformed,
/// and the O-view and interaction-view draws come from `seed`, so a
/// re-export with the same seed writes identical bytes.
#[allow(clippy::too_many_arguments)]
pub fn export_panels<A: Scalar>(
    segnet: &SegNet,
    pcn: &Pcn,
    params: &ParamStore<A>,
    manifest: &DatasetManifest,
    group_id: &str,
    o: usize,
    p: usize,
    tau: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let group = load_group(manifest, group_id)?;
    if o > group.k() || (!pcn.config.bypass && (p == 0 || p > o)) {
        return Err(Error::validation(format!(
            "panel export needs O <= K and 1 <= P <= O; got O={o}, P={p}, K={}",
            group.k()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks_o: Vec<usize> = sample(&mut rng, group.k(), o).iter().collect();
    let picks_p: Vec<usize> = sample(&mut rng, o, p.min(o)).iter().collect();

    let (c, h, w) = group.views[0].dim();
    let mut stacked = ndarray::Array4::<A>::zeros((o, c, h, w));
    for (i, &vi) in picks_o.iter().enumerate() {
        let path = out_dir.join(format!("view_{i:02}.png"));
        crate::group_data::io::save_rgb(&path, &group.views[vi])?;
        files.push(path);
        stacked
            .index_axis_mut(Axis(0), i)
            .assign(&group.views[vi].mapv(|x| sc::<A>(x as f64)));
    }

    let mut tape = Tape::<A>::new();
    let bound = params.bind(&mut tape, false);
    let views = tape.constant(stacked.into_dyn());
    let first = tape.select_batch(views, 0);
    let enc1 = segnet.encode(&mut tape, &bound, first)?;
    let logits1 = segnet.decode(&mut tape, &bound, &enc1)?;
    let pseudo1 = pseudo_label(tape.value(logits1), tau)?;

    let bypass = pcn.config.bypass;
    let (boundary, weights, enc_hat) = if bypass {
        (first, None, enc1)
    } else {
        let weights = pcn.wgu_forward(&mut tape, &bound, views)?;
        let xhat = synthesize_boundary_view(&mut tape, views, weights)?;
        let enc_hat = segnet.encode(&mut tape, &bound, xhat)?;
        (xhat, Some(weights), enc_hat)
    };
    let pseudo2 = if bypass {
        pseudo1.clone()
    } else {
        let logits2 = segnet.decode(&mut tape, &bound, &enc_hat)?;
        pseudo_label(tape.value(logits2), tau)?
    };
    let pseudo3 = if bypass {
        pseudo1.clone()
    } else {
        let mut pairs = Vec::with_capacity(picks_p.len());
        for &pi in &picks_p {
            let view_p = tape.select_batch(views, pi);
            let enc_p = segnet.encode(&mut tape, &bound, view_p)?;
            pairs.push(pcn.siu_gate(&mut tape, &bound, enc_p.features, enc_hat.features)?);
        }
        let corrected = vcm_aggregate(&mut tape, &pairs)?;
        let enc_a = Encoded {
            features: corrected,
            skip: enc_hat.skip,
            input_hw: enc_hat.input_hw,
        };
        let logits3 = segnet.decode(&mut tape, &bound, &enc_a)?;
        pseudo_label(tape.value(logits3), tau)?
    };

    let bv: ArrayD<A> = tape.value(boundary).clone();
    let bv3 = Array3::from_shape_fn((c, h, w), |(ci, yi, xi)| {
        bv[[0, ci, yi, xi]].to_f64() as f32
    });
    let path = out_dir.join("boundary_view.png");
    crate::group_data::io::save_rgb(&path, &bv3)?;
    files.push(path);

    if let Some(wvar) = weights {
        let wv = tape.value(wvar);
        for i in 0..o {
            let m = Array2::from_shape_fn((h, w), |(yi, xi)| wv[[i, 0, yi, xi]].to_f64());
            let path = out_dir.join(format!("weight_{i:02}.png"));
            save_gray(&path, &m)?;
            files.push(path);
        }
    }

    pseudo_panels(out_dir, "single", &pseudo1, &mut files)?;
    pseudo_panels(out_dir, "vam", &pseudo2, &mut files)?;
    pseudo_panels(out_dir, "vam_vcm", &pseudo3, &mut files)?;
    Ok(files)
}
