//! Naive reference implementations used as independent oracles in tests
//! and by the `gradcheck` command. Everything here favors obviousness
//! over speed: plain nested loops, full coordinate arithmetic, no reuse
//! of the tape code paths.

use crate::error::{Result, SpemError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small seeded RNG for tests and oracle inputs.
pub struct TestRng(ChaCha8Rng);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }
}

fn coords_of(flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut rem = flat;
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = rem % shape[d];
        rem /= shape[d];
    }
    coords
}

fn flat_of(coords: &[usize], shape: &[usize]) -> usize {
    let mut idx = 0usize;
    for d in 0..shape.len() {
        idx = idx * shape[d] + coords[d];
    }
    idx
}

/// Elementwise binary op under right-aligned broadcasting, computed by
/// decomposing every output index into coordinates and clamping size-1
/// axes. Returns (buffer, shape).
pub fn naive_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    op: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let rank = a_shape.len().max(b_shape.len());
    let pad = |s: &[usize]| {
        let mut p = vec![1usize; rank - s.len()];
        p.extend_from_slice(s);
        p
    };
    let ap = pad(a_shape);
    let bp = pad(b_shape);
    let mut out_shape = vec![0usize; rank];
    for d in 0..rank {
        if ap[d] == bp[d] || ap[d] == 1 || bp[d] == 1 {
            out_shape[d] = ap[d].max(bp[d]);
        } else {
            return Err(SpemError::shape(format!(
                "cannot broadcast {a_shape:?} with {b_shape:?}"
            )));
        }
    }
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    for (flat, slot) in out.iter_mut().enumerate() {
        let coords = coords_of(flat, &out_shape);
        let ac: Vec<usize> = coords
            .iter()
            .zip(ap.iter())
            .map(|(&c, &d)| if d == 1 { 0 } else { c })
            .collect();
        let bc: Vec<usize> = coords
            .iter()
            .zip(bp.iter())
            .map(|(&c, &d)| if d == 1 { 0 } else { c })
            .collect();
        *slot = op(a[flat_of(&ac, &ap)], b[flat_of(&bc, &bp)]);
    }
    Ok((out, out_shape))
}

/// Direct six-loop cross-correlation. `x` is NCHW, `w` is (Cout, Cin, K, K).
pub fn naive_conv2d(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, c_in, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (c_out, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    assert_eq!(w_shape[1], c_in);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for ni in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c_in + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * c_in + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((ni * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, vec![n, c_out, oh, ow])
}

/// Per-channel spatial max by plain scan. `x` is (C, H, W) flattened.
pub fn naive_channel_max(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    (0..c)
        .map(|ci| {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            plane.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Per-channel spatial min by plain scan.
pub fn naive_channel_min(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    (0..c)
        .map(|ci| {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            plane.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Per-channel spatial mean by plain scan.
pub fn naive_channel_mean(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    (0..c)
        .map(|ci| {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            plane.iter().sum::<f64>() / (h * w) as f64
        })
        .collect()
}

/// Mean softmax cross-entropy computed row by row with explicit exps.
pub fn naive_softmax_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let l = &logits[row * k..(row + 1) * k];
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|&v| (v - m).exp()).sum();
        total += -(l[label] - m - z.ln());
    }
    total / n as f64
}

/// Top-1 accuracy by a per-sample loop; ties go to the lowest class index.
pub fn naive_top1(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let l = &logits[row * k..(row + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if l[j] > l[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
