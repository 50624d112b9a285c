//! Elementwise, shape and loss operations on the tape.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix4, Slice};

use super::{sc, BackFn, Scalar, Tape, Var};

/// How a pixel-level loss is reduced over the leading batch axis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BatchReduction {
    Mean,
    Sum,
}

/// Divisor convention for masked cross-entropy: the full image area, or
/// only the number of valid pixels.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeDivisor {
    FullArea,
    ValidCount,
}

impl<A: Scalar> Tape<A> {
    pub fn relu(&mut self, x: Var) -> Var {
        let zero = A::zero();
        let y = self.vals[x.0].mapv(|v| if v > zero { v } else { zero });
        let needs = self.needs[x.0];
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            let mask = vals[x.0].mapv(|v| if v > A::zero() { A::one() } else { A::zero() });
            sink.add(x, g * &mask);
        });
        self.push(y, Some(back), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = A::one();
        let y = self.vals[x.0].mapv(|v| one / (one + (-v).exp()));
        let needs = self.needs[x.0];
        let y_id = Var(self.vals.len());
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            let y = &vals[y_id.0];
            sink.add(x, g * y * &y.mapv(|v| A::one() - v));
        });
        self.push(y, Some(back), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.needs_any(&[a, b]);
        let back: BackFn<A> = Box::new(move |_vals, g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        });
        self.push(y, Some(back), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ca: A = sc(c);
        let y = self.vals[x.0].mapv(|v| v * ca);
        let needs = self.needs[x.0];
        let back: BackFn<A> = Box::new(move |_vals, g, sink| {
            sink.add(x, g.mapv(|v| v * ca));
        });
        self.push(y, Some(back), needs)
    }

    /// Concatenate two (N,C,H,W) tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.0].view();
        let bv = self.vals[b.0].view();
        let ca = av.shape()[1];
        let y = ndarray::concatenate(Axis(1), &[av, bv])
            .expect("concat_channels shape mismatch")
            .as_standard_layout()
            .to_owned();
        let needs = self.needs_any(&[a, b]);
        let back: BackFn<A> = Box::new(move |_vals, g, sink| {
            if sink.wants(a) {
                sink.add(a, g.slice_axis(Axis(1), Slice::from(0..ca)).to_owned());
            }
            if sink.wants(b) {
                sink.add(b, g.slice_axis(Axis(1), Slice::from(ca..)).to_owned());
            }
        });
        self.push(y, Some(back), needs)
    }

    /// Concatenate along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_batch: empty part list");
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
        let y = ndarray::concatenate(Axis(0), &views)
            .expect("concat_batch shape mismatch")
            .as_standard_layout()
            .to_owned();
        let parts: Vec<Var> = parts.to_vec();
        let needs = self.needs_any(&parts);
        let back: BackFn<A> = Box::new(move |_vals, g, sink| {
            let mut off = 0;
            for (p, n) in parts.iter().zip(&sizes) {
                if sink.wants(*p) {
                    sink.add(
                        *p,
                        g.slice_axis(Axis(0), Slice::from(off..off + n)).to_owned(),
                    );
                }
                off += n;
            }
        });
        self.push(y, Some(back), needs)
    }

    /// Select sample `i` of a batched tensor, keeping the batch axis (1,...).
    pub fn select_batch(&mut self, x: Var, i: usize) -> Var {
        let y = self.vals[x.0]
            .slice_axis(Axis(0), Slice::from(i..i + 1))
            .to_owned();
        let needs = self.needs[x.0];
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            if sink.wants(x) {
                let mut dx = ArrayD::zeros(vals[x.0].raw_dim());
                dx.slice_axis_mut(Axis(0), Slice::from(i..i + 1)).assign(g);
                sink.add(x, dx);
            }
        });
        self.push(y, Some(back), needs)
    }

    /// Elementwise product of features (N,C,H,W) with a single-channel
    /// spatial gate (N,1,H,W) broadcast over channels.
    pub fn mul_gate(&mut self, feat: Var, gate: Var) -> Var {
        let fv = self.vals[feat.0].view().into_dimensionality::<Ix4>().unwrap();
        let gv = self.vals[gate.0].view().into_dimensionality::<Ix4>().unwrap();
        assert_eq!(gv.dim().1, 1, "mul_gate: gate must have one channel");
        let y = &fv * &gv.broadcast(fv.dim()).unwrap();
        let needs = self.needs_any(&[feat, gate]);
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            let fv = vals[feat.0].view().into_dimensionality::<Ix4>().unwrap();
            let gv = vals[gate.0].view().into_dimensionality::<Ix4>().unwrap();
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            if sink.wants(feat) {
                sink.add(feat, (&g4 * &gv.broadcast(fv.dim()).unwrap()).into_dyn());
            }
            if sink.wants(gate) {
                let dgate = (&g4 * &fv).sum_axis(Axis(1)).insert_axis(Axis(1));
                sink.add(gate, dgate.into_dyn());
            }
        });
        self.push(y.into_dyn(), Some(back), needs)
    }

    /// Bilinear resize of (N,C,H,W) to (N,C,oh,ow) with half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let ytab = resize_taps(h, oh);
        let xtab = resize_taps(w, ow);
        let mut out = Array4::<A>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                let src = xv.index_axis(Axis(0), ni);
                let src = src.index_axis(Axis(0), ci);
                let mut dst = out.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for (oy, &(i0, i1, fy)) in ytab.iter().enumerate() {
                    let fy: A = sc(fy);
                    for (ox, &(j0, j1, fx)) in xtab.iter().enumerate() {
                        let fx: A = sc(fx);
                        let top = src[[i0, j0]] * (A::one() - fx) + src[[i0, j1]] * fx;
                        let bot = src[[i1, j0]] * (A::one() - fx) + src[[i1, j1]] * fx;
                        dst[[oy, ox]] = top * (A::one() - fy) + bot * fy;
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            if !sink.wants(x) {
                return;
            }
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array4::<A>::zeros(
                vals[x.0]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .dim(),
            );
            for ni in 0..n {
                for ci in 0..c {
                    let gsrc = g4.index_axis(Axis(0), ni);
                    let gsrc = gsrc.index_axis(Axis(0), ci);
                    let mut d = dx.index_axis_mut(Axis(0), ni);
                    let mut d = d.index_axis_mut(Axis(0), ci);
                    for (oy, &(i0, i1, fy)) in ytab.iter().enumerate() {
                        let fy: A = sc(fy);
                        for (ox, &(j0, j1, fx)) in xtab.iter().enumerate() {
                            let fx: A = sc(fx);
                            let gv = gsrc[[oy, ox]];
                            d[[i0, j0]] = d[[i0, j0]] + gv * (A::one() - fy) * (A::one() - fx);
                            d[[i0, j1]] = d[[i0, j1]] + gv * (A::one() - fy) * fx;
                            d[[i1, j0]] = d[[i1, j0]] + gv * fy * (A::one() - fx);
                            d[[i1, j1]] = d[[i1, j1]] + gv * fy * fx;
                        }
                    }
                }
            }
            sink.add(x, dx.into_dyn());
        });
        self.push(out.into_dyn(), Some(back), needs)
    }

    /// Softmax across the leading (view) axis of an (O,C,H,W) tensor, per
    /// (channel, pixel) lane.
    pub fn softmax_views(&mut self, x: Var) -> Var {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let m = xv.fold_axis(Axis(0), A::neg_infinity(), |acc, &v| acc.max(v));
        let e = (&xv - &m.view().insert_axis(Axis(0))).mapv(|v| v.exp());
        let s = e.sum_axis(Axis(0));
        let y = &e / &s.view().insert_axis(Axis(0));
        let needs = self.needs[x.0];
        let y_id = Var(self.vals.len());
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            if !sink.wants(x) {
                return;
            }
            let y = vals[y_id.0].view().into_dimensionality::<Ix4>().unwrap();
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dot = (&g4 * &y).sum_axis(Axis(0));
            let dx = &y * &(&g4 - &dot.view().insert_axis(Axis(0)));
            sink.add(x, dx.into_dyn());
        });
        self.push(y.into_dyn(), Some(back), needs)
    }

    /// Per-pixel convex combination of views: (O,C,H,W) weighted by
    /// (O,1,H,W) weight maps, producing (1,C,H,W).
    pub fn weighted_sum_views(&mut self, views: Var, weights: Var) -> Var {
        let vv = self.vals[views.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.vals[weights.0].view().into_dimensionality::<Ix4>().unwrap();
        assert_eq!(vv.dim().0, wv.dim().0, "weighted_sum_views: O mismatch");
        assert_eq!(wv.dim().1, 1, "weighted_sum_views: weights must be single-channel");
        let wb = wv.broadcast(vv.dim()).unwrap();
        let y = (&vv * &wb).sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.needs_any(&[views, weights]);
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            let vv = vals[views.0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = vals[weights.0].view().into_dimensionality::<Ix4>().unwrap();
            let g0 = g
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(0), 0);
            if sink.wants(views) {
                let gb = g0.insert_axis(Axis(0));
                let dv = &wv.broadcast(vv.dim()).unwrap() * &gb.broadcast(vv.dim()).unwrap();
                sink.add(views, dv.into_dyn());
            }
            if sink.wants(weights) {
                let gb = g0.insert_axis(Axis(0));
                let dw = (&vv * &gb.broadcast(vv.dim()).unwrap())
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                sink.add(weights, dw.into_dyn());
            }
        });
        self.push(y.into_dyn(), Some(back), needs)
    }

    /// Channel-wise dropout with a precomputed keep/scale mask of shape
    /// (N,C): entries are 0 (dropped) or 1/(1-rate) (kept).
    pub fn dropout_channels(&mut self, x: Var, keep: Array2<A>) -> Var {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let kb = keep
            .view()
            .insert_axis(Axis(2))
            .insert_axis(Axis(3))
            .broadcast(xv.dim())
            .unwrap()
            .to_owned();
        let y = (&xv * &kb).into_dyn();
        let needs = self.needs[x.0];
        let back: BackFn<A> = Box::new(move |_vals, g, sink| {
            if sink.wants(x) {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                sink.add(x, (&g4 * &kb).into_dyn());
            }
        });
        self.push(y, Some(back), needs)
    }

    /// Group normalization over (N,C,H,W) with per-channel affine params.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(c % groups == 0, "group_norm: groups must divide channels");
        let cg = c / groups;
        let m = cg * h * w;
        let gv = self.vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.vals[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        let epsa: A = sc(eps);
        let mut mu = Array2::<A>::zeros((n, groups));
        let mut rstd = Array2::<A>::zeros((n, groups));
        let mut y = Array4::<A>::zeros((n, c, h, w));
        let minv: A = sc(1.0 / m as f64);
        for ni in 0..n {
            for gi in 0..groups {
                let sl = xv.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                let mean = sl.iter().copied().sum::<A>() * minv;
                let var = sl
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<A>()
                    * minv;
                let rs = A::one() / (var + epsa).sqrt();
                mu[[ni, gi]] = mean;
                rstd[[ni, gi]] = rs;
                for ci in 0..cg {
                    let ch = gi * cg + ci;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let src = sl.index_axis(Axis(0), ci);
                    let mut dst = y.slice_mut(ndarray::s![ni, ch, .., ..]);
                    dst.zip_mut_with(&src, |d, &s| *d = (s - mean) * rs * ga + be);
                }
            }
        }
        let needs = self.needs_any(&[x, gamma, beta]);
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            let xv = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let gv = vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let minv: A = sc(1.0 / m as f64);
            let mut dgamma = Array1::<A>::zeros(c);
            let mut dbeta = Array1::<A>::zeros(c);
            let want_x = sink.wants(x);
            let mut dx = if want_x {
                Some(Array4::<A>::zeros((n, c, h, w)))
            } else {
                None
            };
            for ni in 0..n {
                for gi in 0..groups {
                    let mean = mu[[ni, gi]];
                    let rs = rstd[[ni, gi]];
                    // First pass: per-group reductions.
                    let mut sum_gv = A::zero();
                    let mut sum_gx = A::zero();
                    for ci in 0..cg {
                        let ch = gi * cg + ci;
                        let ga = gv[ch];
                        let gs = g4.slice(ndarray::s![ni, ch, .., ..]);
                        let xs = xv.slice(ndarray::s![ni, ch, .., ..]);
                        for (&gg, &xx) in gs.iter().zip(xs.iter()) {
                            let xhat = (xx - mean) * rs;
                            let gvec = gg * ga;
                            sum_gv = sum_gv + gvec;
                            sum_gx = sum_gx + gvec * xhat;
                            dgamma[ch] = dgamma[ch] + gg * xhat;
                            dbeta[ch] = dbeta[ch] + gg;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mean_gv = sum_gv * minv;
                        let mean_gx = sum_gx * minv;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            let ga = gv[ch];
                            let gs = g4.slice(ndarray::s![ni, ch, .., ..]);
                            let xs = xv.slice(ndarray::s![ni, ch, .., ..]);
                            let mut ds = dx.slice_mut(ndarray::s![ni, ch, .., ..]);
                            ndarray::Zip::from(&mut ds).and(&gs).and(&xs).for_each(
                                |d, &gg, &xx| {
                                    let xhat = (xx - mean) * rs;
                                    *d = rs * (gg * ga - mean_gv - xhat * mean_gx);
                                },
                            );
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                sink.add(x, dx.into_dyn());
            }
            sink.add(gamma, dgamma.into_dyn());
            sink.add(beta, dbeta.into_dyn());
        });
        self.push(y.into_dyn(), Some(back), needs)
    }

    /// Cross-entropy of logits (N,C,H,W) against hard targets (N,H,W),
    /// restricted to `valid` pixels. The per-image divisor is either the
    /// full area H*W or the image's valid-pixel count.
    pub fn masked_ce(
        &mut self,
        logits: Var,
        target: &Array3<usize>,
        valid: &Array3<bool>,
        divisor: CeDivisor,
        reduction: BatchReduction,
    ) -> Var {
        let lv = self.vals[logits.0]
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let (n, c, h, w) = lv.dim();
        assert_eq!(target.dim(), (n, h, w), "masked_ce: target shape");
        assert_eq!(valid.dim(), (n, h, w), "masked_ce: valid shape");
        // Per-image scale factors.
        let mut scales = Array1::<A>::zeros(n);
        for ni in 0..n {
            let denom = match divisor {
                CeDivisor::FullArea => (h * w) as f64,
                CeDivisor::ValidCount => valid
                    .index_axis(Axis(0), ni)
                    .iter()
                    .filter(|&&v| v)
                    .count()
                    .max(1) as f64,
            };
            let batch = match reduction {
                BatchReduction::Mean => n as f64,
                BatchReduction::Sum => 1.0,
            };
            scales[ni] = sc(1.0 / (denom * batch));
        }
        let mut total = A::zero();
        for ni in 0..n {
            let mut acc = A::zero();
            for yi in 0..h {
                for xi in 0..w {
                    if !valid[[ni, yi, xi]] {
                        continue;
                    }
                    let t = target[[ni, yi, xi]];
                    debug_assert!(t < c, "masked_ce: target class out of range");
                    let mut m = A::neg_infinity();
                    for ci in 0..c {
                        m = m.max(lv[[ni, ci, yi, xi]]);
                    }
                    let mut s = A::zero();
                    for ci in 0..c {
                        s = s + (lv[[ni, ci, yi, xi]] - m).exp();
                    }
                    let lse = m + s.ln();
                    acc = acc + lse - lv[[ni, t, yi, xi]];
                }
            }
            total = total + acc * scales[ni];
        }
        let needs = self.needs[logits.0];
        let target = target.clone();
        let valid = valid.clone();
        let back: BackFn<A> = Box::new(move |vals, g, sink| {
            if !sink.wants(logits) {
                return;
            }
            let lv = vals[logits.0].view().into_dimensionality::<Ix4>().unwrap();
            let gscalar = *g.iter().next().unwrap();
            let mut dl = Array4::<A>::zeros((n, c, h, w));
            for ni in 0..n {
                let scale = scales[ni] * gscalar;
                for yi in 0..h {
                    for xi in 0..w {
                        if !valid[[ni, yi, xi]] {
                            continue;
                        }
                        let t = target[[ni, yi, xi]];
                        let mut m = A::neg_infinity();
                        for ci in 0..c {
                            m = m.max(lv[[ni, ci, yi, xi]]);
                        }
                        let mut s = A::zero();
                        for ci in 0..c {
                            s = s + (lv[[ni, ci, yi, xi]] - m).exp();
                        }
                        for ci in 0..c {
                            let p = (lv[[ni, ci, yi, xi]] - m).exp() / s;
                            let ind = if ci == t { A::one() } else { A::zero() };
                            dl[[ni, ci, yi, xi]] = (p - ind) * scale;
                        }
                    }
                }
            }
            sink.add(logits, dl.into_dyn());
        });
        self.push(ndarray::arr0(total).into_dyn(), Some(back), needs)
    }

    /// Scalar probe readout sum(x * probe), for gradient checks and tests.
    pub fn dot_readout(&mut self, x: Var, probe: ArrayD<A>) -> Var {
        assert_eq!(probe.shape(), self.vals[x.0].shape(), "dot_readout shape");
        let total: A = self.vals[x.0]
            .iter()
            .zip(probe.iter())
            .map(|(&a, &b)| a * b)
            .sum();
        let needs = self.needs[x.0];
        let back: BackFn<A> = Box::new(move |_vals, g, sink| {
            if sink.wants(x) {
                let gscalar = *g.iter().next().unwrap();
                sink.add(x, probe.mapv(|v| v * gscalar));
            }
        });
        self.push(ndarray::arr0(total).into_dyn(), Some(back), needs)
    }
}

/// Source taps (i0, i1, frac) for half-pixel-center bilinear resizing.
fn resize_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
