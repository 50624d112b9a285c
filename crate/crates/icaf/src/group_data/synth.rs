//! Procedural multi-view scene generator.
//!
//! Each group is one latent scene: a crystal polygon on a dark background
//! with a few near-circular defect blobs. Every view renders the same scene
//! under a different illumination angle; a defect-boundary pixel shows full
//! edge contrast only when its outward normal lies within the visibility
//! window of the view's light, so no single view reveals a whole defect
//! outline but the view union always does. Defect interiors differ from the
//! crystal only by a small contrast, which is also what unlit boundary
//! pixels render at.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{io, DatasetManifest, GeneratorSpec, GroupEntry, ManifestFile, FORMAT_VERSION};
use crate::error::{Error, Result};

const BG_COLOR: [f64; 3] = [0.22, 0.24, 0.26];
const CRYSTAL_COLOR: [f64; 3] = [0.55, 0.53, 0.50];
/// Edge contrast of a boundary pixel facing the light head-on.
const FULL_EDGE_CONTRAST: f64 = 0.35;
/// Magnitude of the per-view directional brightness ramp.
const RAMP_MAG: f64 = 0.05;
/// Safety margin under the per-view coverage cap enforced at build time.
const COVERAGE_MARGIN: f64 = 0.08;

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    alpha: f64,
}

impl Blob {
    /// Squared normalized ellipse coordinate; ≤ 1 means inside.
    fn dist2(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.alpha.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    /// Outward normal angle at a point, from the implicit-form gradient.
    fn normal(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.alpha.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let gu = u / (self.a * self.a);
        let gv = v / (self.b * self.b);
        let gx = gu * c - gv * s;
        let gy = gu * s + gv * c;
        gy.atan2(gx)
    }
}

struct BoundaryPix {
    x: usize,
    y: usize,
    /// Outward normal direction, radians.
    phi: f64,
    /// Index of the owning blob.
    blob: usize,
}

struct Scene {
    crystal: Array2<bool>,
    defect: Array2<bool>,
    mask: Array2<u8>,
    boundary: Vec<BoundaryPix>,
}

/// Independent per-group rng stream derived from the dataset seed.
fn group_rng(seed: u64, group_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"icaf-synth-group");
    h.update(seed.to_le_bytes());
    h.update((group_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Even-odd scanline fill of a closed polygon given as (x, y) vertices.
fn fill_polygon(h: usize, w: usize, verts: &[(f64, f64)]) -> Array2<bool> {
    let mut out = Array2::from_elem((h, w), false);
    let n = verts.len();
    for y in 0..h {
        let yc = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..n {
            let (x0, y0) = verts[i];
            let (x1, y1) = verts[(i + 1) % n];
            if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let lo = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let hi = ((pair[1] - 0.5).floor().min(w as f64 - 1.0)) as isize;
            for x in lo as isize..=hi {
                if x >= 0 {
                    out[[y, x as usize]] = true;
                }
            }
        }
    }
    out
}

fn rasterize_blob(h: usize, w: usize, blob: &Blob) -> Vec<(usize, usize)> {
    let m = blob.a.max(blob.b) + 1.0;
    let y0 = (blob.cy - m).floor().max(0.0) as usize;
    let y1 = ((blob.cy + m).ceil() as usize).min(h - 1);
    let x0 = (blob.cx - m).floor().max(0.0) as usize;
    let x1 = ((blob.cx + m).ceil() as usize).min(w - 1);
    let mut px = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            if blob.dist2(x as f64 + 0.5, y as f64 + 0.5) <= 1.0 {
                px.push((x, y));
            }
        }
    }
    px
}

/// Fraction of a blob's boundary pixels lit from direction `theta`.
fn view_coverage(boundary: &[BoundaryPix], blob: usize, theta: f64, cutoff: f64) -> f64 {
    let own: Vec<&BoundaryPix> = boundary.iter().filter(|b| b.blob == blob).collect();
    if own.is_empty() {
        return 0.0;
    }
    let lit = own
        .iter()
        .filter(|b| (b.phi - theta).cos() >= cutoff)
        .count();
    lit as f64 / own.len() as f64
}

fn build_scene(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let (h, w) = spec.image_size;
    let min_dim = h.min(w) as f64;
    let cutoff = (spec.boundary_visibility_width.to_radians() / 2.0).cos();
    let per_view_cap =
        spec.boundary_visibility_width / 360.0 + COVERAGE_MARGIN;
    let thetas: Vec<f64> = spec
        .illumination_angles
        .iter()
        .map(|a| a.to_radians())
        .collect();

    'scene: for _attempt in 0..200 {
        // Crystal polygon: ten jittered vertices around a jittered center.
        let cx = w as f64 / 2.0 + rng.random_range(-0.04..0.04) * min_dim;
        let cy = h as f64 / 2.0 + rng.random_range(-0.04..0.04) * min_dim;
        let n_verts = 10;
        let verts: Vec<(f64, f64)> = (0..n_verts)
            .map(|i| {
                let ang = i as f64 / n_verts as f64 * std::f64::consts::TAU
                    + rng.random_range(-0.12..0.12);
                let r = rng.random_range(0.30..0.42) * min_dim;
                (cx + r * ang.cos(), cy + r * ang.sin())
            })
            .collect();
        let crystal = fill_polygon(h, w, &verts);
        let crystal_px: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| crystal[[y, x]])
            .collect();
        if crystal_px.len() < (h * w) / 4 {
            continue 'scene;
        }

        // Defect blobs: near-circular ellipses, inside the crystal, apart
        // from each other so boundaries never merge.
        let mut defect = Array2::from_elem((h, w), false);
        let mut blobs: Vec<Blob> = Vec::new();
        let mut blob_px_of: Vec<Vec<(usize, usize)>> = Vec::new();
        let n_blobs = rng.random_range(1..=3usize);
        for _ in 0..n_blobs {
            let mut placed = false;
            for _try in 0..60 {
                let &(px, py) = &crystal_px[rng.random_range(0..crystal_px.len())];
                // At small frames the relative upper bound can fall below
                // the 4-px floor; keep the range non-empty.
                let a_lo = (0.055 * min_dim).max(4.0);
                let a_hi = (0.11 * min_dim).max(a_lo + 0.5);
                let a = rng.random_range(a_lo..a_hi);
                let b = a * rng.random_range(0.85..1.18);
                let blob = Blob {
                    cx: px as f64 + 0.5,
                    cy: py as f64 + 0.5,
                    a,
                    b,
                    alpha: rng.random_range(0.0..std::f64::consts::PI),
                };
                let px_list = rasterize_blob(h, w, &blob);
                if px_list.len() < 12 {
                    continue;
                }
                let ok = px_list.iter().all(|&(x, y)| {
                    if !crystal[[y, x]] {
                        return false;
                    }
                    // Keep a one-pixel moat from existing defects.
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx >= 0
                                && ny >= 0
                                && (nx as usize) < w
                                && (ny as usize) < h
                                && defect[[ny as usize, nx as usize]]
                            {
                                return false;
                            }
                        }
                    }
                    true
                });
                if !ok {
                    continue;
                }
                for &(x, y) in &px_list {
                    defect[[y, x]] = true;
                }
                blobs.push(blob);
                blob_px_of.push(px_list);
                placed = true;
                break;
            }
            if !placed {
                continue 'scene;
            }
        }

        // Contract: defect pixels within [0.5%, 20%] of the image.
        let n_defect: usize = blob_px_of.iter().map(|p| p.len()).sum();
        let frac = n_defect as f64 / (h * w) as f64;
        if !(0.005..=0.20).contains(&frac) {
            continue 'scene;
        }

        // Boundary pixels (4-neighborhood) with analytic outward normals.
        let mut boundary = Vec::new();
        for (bi, px_list) in blob_px_of.iter().enumerate() {
            for &(x, y) in px_list {
                let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)]
                    .iter()
                    .any(|&(dx, dy)| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx < 0
                            || ny < 0
                            || nx as usize >= w
                            || ny as usize >= h
                            || !defect[[ny as usize, nx as usize]]
                    });
                if edge {
                    boundary.push(BoundaryPix {
                        x,
                        y,
                        phi: blobs[bi].normal(x as f64 + 0.5, y as f64 + 0.5),
                        blob: bi,
                    });
                }
            }
        }
        if boundary.len() < 16 {
            continue 'scene;
        }

        // Contract: every view sees at most its angular share of each blob's
        // boundary, and the view union covers every boundary pixel.
        for bi in 0..blobs.len() {
            for &theta in &thetas {
                if view_coverage(&boundary, bi, theta, cutoff) > per_view_cap {
                    continue 'scene;
                }
            }
        }
        let union_ok = boundary
            .iter()
            .all(|b| thetas.iter().any(|&t| (b.phi - t).cos() >= cutoff));
        if !union_ok {
            continue 'scene;
        }

        let crystal_class: u8 = if spec.n_classes >= 3 { 1 } else { 0 };
        let defect_class: u8 = if spec.n_classes >= 3 { 2 } else { 1 };
        let mut mask = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                mask[[y, x]] = if defect[[y, x]] {
                    defect_class
                } else if crystal[[y, x]] {
                    crystal_class
                } else {
                    0
                };
            }
        }
        return Ok(Scene {
            crystal,
            defect,
            mask,
            boundary,
        });
    }
    Err(Error::validation(
        "scene generation failed to satisfy the boundary-coverage and \
         defect-fraction contracts after 200 attempts",
    ))
}

fn render_view(
    scene: &Scene,
    spec: &GeneratorSpec,
    angle_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let (h, w) = spec.image_size;
    let theta = angle_deg.to_radians();
    let cutoff = (spec.boundary_visibility_width.to_radians() / 2.0).cos();
    let dic = spec.defect_interior_contrast;
    let ramp_scale = 0.5 * ((h * h + w * w) as f64).sqrt();
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).expect("valid normal"))
    } else {
        None
    };

    let mut img = Array3::<f32>::zeros((3, h, w));
    let mut base = Array2::<[f64; 3]>::from_elem((h, w), BG_COLOR);
    for y in 0..h {
        for x in 0..w {
            if scene.defect[[y, x]] {
                base[[y, x]] = CRYSTAL_COLOR.map(|c| c - dic);
            } else if scene.crystal[[y, x]] {
                base[[y, x]] = CRYSTAL_COLOR;
            }
        }
    }
    for b in &scene.boundary {
        let v = (b.phi - theta).cos();
        let contrast = if v >= cutoff {
            FULL_EDGE_CONTRAST * v
        } else {
            dic
        };
        base[[b.y, b.x]] = CRYSTAL_COLOR.map(|c| c - contrast);
    }
    let (st, ct) = theta.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let proj = ((x as f64 + 0.5 - w as f64 / 2.0) * ct
                + (y as f64 + 0.5 - h as f64 / 2.0) * st)
                / ramp_scale;
            let ramp = RAMP_MAG * proj;
            for ch in 0..3 {
                let mut v = base[[y, x]][ch] + ramp;
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                img[[ch, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Generate a dataset at `out`: one directory per group with
/// `view_XX.png` files and a shared `mask.png`, plus `manifest.json`.
/// Identical (spec, seed) runs produce byte-identical files.
pub fn generate_synthetic_dataset(spec: &GeneratorSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut groups = Vec::with_capacity(spec.n_groups);
    for gi in 0..spec.n_groups {
        let mut rng = group_rng(spec.seed, gi);
        let scene = build_scene(spec, &mut rng)?;
        let id = format!("group_{gi:04}");
        let dir = out.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut views = Vec::with_capacity(spec.views_per_group);
        for (k, &angle) in spec.illumination_angles.iter().enumerate() {
            let img = render_view(&scene, spec, angle, &mut rng);
            let rel = format!("{id}/view_{k:02}.png");
            io::save_rgb(&out.join(&rel), &img)?;
            views.push(rel);
        }
        let mask_rel = format!("{id}/mask.png");
        io::save_mask(&out.join(&mask_rel), &scene.mask)?;
        groups.push(GroupEntry {
            id,
            labeled: true,
            views,
            mask: Some(mask_rel),
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        file: ManifestFile {
            format_version: FORMAT_VERSION,
            generator_digest: spec.digest(),
            generator_spec: spec.clone(),
            groups,
        },
    };
    manifest.save()?;
    Ok(manifest)
}
