//! im2col convolution with explicit backward passes.

use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Ix1, Ix4};

use super::{Scalar, Tape, Var};

pub(crate) fn conv_out_size(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Unfold one sample (C,H,W) into a (C*k*k, Ho*Wo) patch matrix.
fn im2col<A: Scalar>(
    x: ArrayView3<'_, A>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<A> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::<A>::zeros((c_in * k * k, ho * wo));
    let xs = x.as_slice().expect("im2col: input not contiguous");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                if kx >= w + pad || ky >= h + pad {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let row_off = row * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_off = ci * h * w + iy as usize * w;
                    let dst_off = row_off + oy * wo;
                    let ox_lo = if pad > kx {
                        (pad - kx).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox_hi = ((w + pad - kx).div_ceil(stride)).min(wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    if stride == 1 {
                        let ix0 = ox_lo + kx - pad;
                        let len = ox_hi - ox_lo;
                        cs[dst_off + ox_lo..dst_off + ox_lo + len]
                            .copy_from_slice(&xs[src_off + ix0..src_off + ix0 + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - pad;
                            cs[dst_off + ox] = xs[src_off + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C*k*k, Ho*Wo) patch-gradient matrix back onto one sample,
/// accumulating overlaps.
fn col2im_add<A: Scalar>(
    cols: &Array2<A>,
    k: usize,
    stride: usize,
    pad: usize,
    mut out: ArrayViewMut3<'_, A>,
    ho: usize,
    wo: usize,
) {
    let (c_in, h, w) = out.dim();
    let cs = cols.as_slice().unwrap();
    let os = out.as_slice_mut().expect("col2im: output not contiguous");
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                if kx >= w + pad || ky >= h + pad {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let row_off = row * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_off = ci * h * w + iy as usize * w;
                    let src_off = row_off + oy * wo;
                    let ox_lo = if pad > kx {
                        (pad - kx).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox_hi = ((w + pad - kx).div_ceil(stride)).min(wo);
                    for ox in ox_lo..ox_hi {
                        let ix = ox * stride + kx - pad;
                        os[dst_off + ix] = os[dst_off + ix] + cs[src_off + ox];
                    }
                }
            }
        }
    }
}

impl<A: Scalar> Tape<A> {
    /// 2-D convolution of `x` (N,Cin,H,W) with `w` (Cout,Cin,k,k) and an
    /// optional bias (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.vals[x.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: x must be 4-d");
        let wv = self.vals[w.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: w must be 4-d");
        let (n, c_in, h, wd) = xv.dim();
        let (c_out, wc_in, k, k2) = wv.dim();
        assert_eq!(c_in, wc_in, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: only square kernels");
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);

        let w2d = wv.to_shape((c_out, c_in * k * k)).unwrap().to_owned();
        let mut out = Array4::<A>::zeros((n, c_out, ho, wo));
        for ni in 0..n {
            let cols = im2col(xv.index_axis(ndarray::Axis(0), ni), k, stride, pad, ho, wo);
            let mut o2d = w2d.dot(&cols);
            if let Some(bv) = b {
                let bias = self.vals[bv.0]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("conv2d: bias must be 1-d");
                for co in 0..c_out {
                    let bc = bias[co];
                    o2d.row_mut(co).mapv_inplace(|v| v + bc);
                }
            }
            out.index_axis_mut(ndarray::Axis(0), ni)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(o2d.as_slice().unwrap());
        }

        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        let needs = self.needs_any(&parents);
        let back: super::BackFn<A> = Box::new(move |vals, g, sink| {
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let xv = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = vals[w.0].view().into_dimensionality::<Ix4>().unwrap();
            let w2d = wv.to_shape((c_out, c_in * k * k)).unwrap().to_owned();
            let want_x = sink.wants(x);
            let want_w = sink.wants(w);
            let mut dw2d = Array2::<A>::zeros((c_out, c_in * k * k));
            let mut dx = if want_x {
                Some(Array4::<A>::zeros((n, c_in, h, wd)))
            } else {
                None
            };
            for ni in 0..n {
                let g2d = gv
                    .index_axis(ndarray::Axis(0), ni)
                    .to_shape((c_out, ho * wo))
                    .unwrap()
                    .to_owned();
                if want_w {
                    let cols =
                        im2col(xv.index_axis(ndarray::Axis(0), ni), k, stride, pad, ho, wo);
                    dw2d = dw2d + g2d.dot(&cols.t());
                }
                if let Some(dx) = dx.as_mut() {
                    let colsg = w2d.t().dot(&g2d);
                    col2im_add(
                        &colsg,
                        k,
                        stride,
                        pad,
                        dx.index_axis_mut(ndarray::Axis(0), ni),
                        ho,
                        wo,
                    );
                }
            }
            if want_w {
                sink.add(w, dw2d.into_shape_with_order((c_out, c_in, k, k)).unwrap().into_dyn());
            }
            if let Some(dx) = dx {
                sink.add(x, dx.into_dyn());
            }
            if let Some(bv) = b {
                if sink.wants(bv) {
                    let db = gv
                        .sum_axis(ndarray::Axis(3))
                        .sum_axis(ndarray::Axis(2))
                        .sum_axis(ndarray::Axis(0));
                    sink.add(bv, db.into_dyn());
                }
            }
        });
        self.push(out.into_dyn(), Some(back), needs)
    }
}
