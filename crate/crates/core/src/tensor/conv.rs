//! 2-d cross-correlation over NCHW tensors, computed directly.
//!
//! Forward and both backward passes parallelize over disjoint output
//! planes, and every output element accumulates its terms in the same
//! fixed order regardless of thread count, so results are bitwise
//! reproducible.

use rayon::prelude::*;

use super::{Op, Tape, TensorId};
use crate::error::{Result, SpemError};

pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

fn conv_dims(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x_shape.len() != 4 || w_shape.len() != 4 {
        return Err(SpemError::shape(format!(
            "conv2d wants NCHW input and OIHW kernel, got {x_shape:?} and {w_shape:?}"
        )));
    }
    if stride == 0 {
        return Err(SpemError::arg("conv2d stride must be >= 1"));
    }
    let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, c_in_w, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if c_in != c_in_w {
        return Err(SpemError::shape(format!(
            "conv2d channel mismatch: input has {c_in} channels, kernel expects {c_in_w}"
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(SpemError::shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Range of output positions whose kernel tap `k` lands inside the input,
/// i.e. 0 <= o*stride + k - pad < extent.
fn valid_out_range(extent: usize, out_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi_in = extent + pad;
    let hi = if hi_in > k {
        (((hi_in - k - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl Tape {
    /// Cross-correlation of `x` (NCHW) with kernel `w` (OIHW); no bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let d = conv_dims(self.shape(x), self.shape(w), stride, pad)?;
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];

        let plane = d.oh * d.ow;
        out.par_chunks_mut(plane).enumerate().for_each(|(p, yp)| {
            let (ni, co) = (p / d.c_out, p % d.c_out);
            let x_img = &xd[ni * d.c_in * d.h * d.w..(ni + 1) * d.c_in * d.h * d.w];
            for ci in 0..d.c_in {
                let xp = &x_img[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_out_range(d.h, d.oh, ky, stride, pad);
                    for kx in 0..d.kw {
                        let wv = wd[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(d.w, d.ow, kx, stride, pad);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xp[iy * d.w..(iy + 1) * d.w];
                            let yrow = &mut yp[oy * d.ow..(oy + 1) * d.ow];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                for (ye, &xe) in yrow[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(xrow[ix0..ix0 + len].iter())
                                {
                                    *ye += wv * xe;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    yrow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        });

        let rg = self.nodes[x.0].requires_grad || self.nodes[w.0].requires_grad;
        Ok(self.push(
            out,
            vec![d.n, d.c_out, d.oh, d.ow],
            rg,
            Op::Conv2d { x, w, stride, pad },
        ))
    }

    pub(super) fn backward_conv2d(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let Op::Conv2d { x, w, stride, pad } = self.nodes[i].op else {
            unreachable!()
        };
        let d = conv_dims(self.shape(x), self.shape(w), stride, pad).expect("checked at record");
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;

        if self.wants_grad(x) {
            let mut gx = self.adj_take(adj, x);
            gx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(p, gxp)| {
                let (ni, ci) = (p / d.c_in, p % d.c_in);
                for co in 0..d.c_out {
                    let gp = &g[(ni * d.c_out + co) * d.oh * d.ow
                        ..(ni * d.c_out + co + 1) * d.oh * d.ow];
                    for ky in 0..d.kh {
                        let (oy_lo, oy_hi) = valid_out_range(d.h, d.oh, ky, stride, pad);
                        for kx in 0..d.kw {
                            let wv = wd[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = valid_out_range(d.w, d.ow, kx, stride, pad);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                let grow = &gp[oy * d.ow..(oy + 1) * d.ow];
                                let xgrow = &mut gxp[iy * d.w..(iy + 1) * d.w];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    for (xg, &ge) in xgrow[ix0..ix0 + (ox_hi - ox_lo)]
                                        .iter_mut()
                                        .zip(grow[ox_lo..ox_hi].iter())
                                    {
                                        *xg += wv * ge;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * stride + kx - pad;
                                        xgrow[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            adj[x.0] = Some(gx);
        }

        if self.wants_grad(w) {
            let mut gw = self.adj_take(adj, w);
            let ksz = d.c_in * d.kh * d.kw;
            gw.par_chunks_mut(ksz).enumerate().for_each(|(co, gwp)| {
                for ni in 0..d.n {
                    let gp = &g[(ni * d.c_out + co) * d.oh * d.ow
                        ..(ni * d.c_out + co + 1) * d.oh * d.ow];
                    for ci in 0..d.c_in {
                        let xp = &xd[(ni * d.c_in + ci) * d.h * d.w
                            ..(ni * d.c_in + ci + 1) * d.h * d.w];
                        for ky in 0..d.kh {
                            let (oy_lo, oy_hi) = valid_out_range(d.h, d.oh, ky, stride, pad);
                            for kx in 0..d.kw {
                                let (ox_lo, ox_hi) = valid_out_range(d.w, d.ow, kx, stride, pad);
                                if ox_hi <= ox_lo {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gp[oy * d.ow..(oy + 1) * d.ow];
                                    let xrow = &xp[iy * d.w..(iy + 1) * d.w];
                                    if stride == 1 {
                                        let ix0 = ox_lo + kx - pad;
                                        for (&ge, &xe) in grow[ox_lo..ox_hi]
                                            .iter()
                                            .zip(xrow[ix0..ix0 + (ox_hi - ox_lo)].iter())
                                        {
                                            acc += ge * xe;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            let ix = ox * stride + kx - pad;
                                            acc += grow[ox] * xrow[ix];
                                        }
                                    }
                                }
                                gwp[(ci * d.kh + ky) * d.kw + kx] += acc;
                            }
                        }
                    }
                }
            });
            adj[w.0] = Some(gw);
        }
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{naive_conv2d, TestRng};

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let x = tape
            .var((1..=9).map(|v| v as f64).collect(), &[1, 1, 3, 3])
            .unwrap();
        let w = tape.var(vec![1.0], &[1, 1, 1, 1]).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = tape.var(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let w = tape.var(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[9.0]);
    }

    #[test]
    fn random_cases_match_naive_loops() {
        let mut rng = TestRng::new(11);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let (n, ci, h, w, co, k) = (2, 3, 7, 6, 4, 3);
            let x = rng.uniform_vec(n * ci * h * w, -2.0, 2.0);
            let wt = rng.uniform_vec(co * ci * k * k, -1.0, 1.0);
            let mut tape = Tape::new();
            let xt = tape.var(x.clone(), &[n, ci, h, w]).unwrap();
            let kt = tape.var(wt.clone(), &[co, ci, k, k]).unwrap();
            let y = tape.conv2d(xt, kt, stride, pad).unwrap();
            let (expect, eshape) = naive_conv2d(&x, &[n, ci, h, w], &wt, &[co, ci, k, k], stride, pad);
            assert_eq!(tape.shape(y), eshape.as_slice());
            for (a, b) in tape.data(y).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12, "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.var(vec![0.0; 2 * 4 * 4], &[1, 2, 4, 4]).unwrap();
        let w = tape.var(vec![0.0; 3 * 9], &[1, 3, 3, 3]).unwrap();
        assert!(tape.conv2d(x, w, 1, 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = TestRng::new(5);
        let (n, ci, h, w, co, k) = (1, 2, 5, 5, 2, 3);
        let x0 = rng.uniform_vec(n * ci * h * w, -2.0, 2.0);
        let w0 = rng.uniform_vec(co * ci * k * k, -1.0, 1.0);
        let weights = rng.uniform_vec(n * co * 5 * 5, -1.0, 1.0);

        let eval = |x: &[f64], wt: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let xt = tape.var(x.to_vec(), &[n, ci, h, w]).unwrap();
            let kt = tape.var(wt.to_vec(), &[co, ci, k, k]).unwrap();
            let y = tape.conv2d(xt, kt, 1, 1).unwrap();
            let mask = tape.constant(weights.clone(), &[n, co, 5, 5]).unwrap();
            let prod = tape.mul(y, mask).unwrap();
            let l = tape.sum(prod);
            tape.scalar(l).unwrap()
        };

        let mut tape = Tape::new();
        let xt = tape.var(x0.clone(), &[n, ci, h, w]).unwrap();
        let kt = tape.var(w0.clone(), &[co, ci, k, k]).unwrap();
        let y = tape.conv2d(xt, kt, 1, 1).unwrap();
        let mask = tape.constant(weights.clone(), &[n, co, 5, 5]).unwrap();
        let prod = tape.mul(y, mask).unwrap();
        let l = tape.sum(prod);
        tape.backward(l).unwrap();

        let h_step = 1e-4;
        for (buf, grads, is_x) in [
            (&x0, tape.grad(xt).unwrap().to_vec(), true),
            (&w0, tape.grad(kt).unwrap().to_vec(), false),
        ] {
            for idx in 0..buf.len() {
                let mut plus = buf.clone();
                let mut minus = buf.clone();
                plus[idx] += h_step;
                minus[idx] -= h_step;
                let fd = if is_x {
                    (eval(&plus, &w0) - eval(&minus, &w0)) / (2.0 * h_step)
                } else {
                    (eval(&x0, &plus) - eval(&x0, &minus)) / (2.0 * h_step)
                };
                let a = grads[idx];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((a - fd) / denom).abs() < 1e-4,
                    "idx {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
