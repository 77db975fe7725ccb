//! Fully-connected layer and the fused softmax cross-entropy loss.

use super::{Op, Tape, TensorId};
use crate::error::{Result, SpemError};

impl Tape {
    /// `y = x @ w + b` with `x` (N, F), `w` (F, K), `b` (K).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(SpemError::shape(format!(
                "linear wants x(N,F) w(F,K) b(K), got {xs:?} {ws:?} {bs:?}"
            )));
        }
        let (n, f) = (xs[0], xs[1]);
        let (fw, k) = (ws[0], ws[1]);
        if f != fw || bs[0] != k {
            return Err(SpemError::shape(format!(
                "linear dims disagree: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; n * k];
        for ni in 0..n {
            let xrow = &xd[ni * f..(ni + 1) * f];
            let orow = &mut out[ni * k..(ni + 1) * k];
            orow.copy_from_slice(bd);
            for (fi, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[fi * k..(fi + 1) * k];
                for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        Ok(self.push(out, vec![n, k], rg, Op::Linear { x, w, b }))
    }

    pub(super) fn backward_linear(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let Op::Linear { x, w, b } = self.nodes[i].op else {
            unreachable!()
        };
        let (n, f) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let k = self.nodes[w.0].shape[1];
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;

        if self.nodes[x.0].requires_grad {
            let mut gx = self.adj_take(adj, x);
            for ni in 0..n {
                let grow = &g[ni * k..(ni + 1) * k];
                let gxrow = &mut gx[ni * f..(ni + 1) * f];
                for fi in 0..f {
                    let wrow = &wd[fi * k..(fi + 1) * k];
                    let mut acc = 0.0;
                    for (ge, we) in grow.iter().zip(wrow.iter()) {
                        acc += ge * we;
                    }
                    gxrow[fi] += acc;
                }
            }
            adj[x.0] = Some(gx);
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = self.adj_take(adj, w);
            for ni in 0..n {
                let grow = &g[ni * k..(ni + 1) * k];
                let xrow = &xd[ni * f..(ni + 1) * f];
                for (fi, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let gwrow = &mut gw[fi * k..(fi + 1) * k];
                    for (gwe, &ge) in gwrow.iter_mut().zip(grow.iter()) {
                        *gwe += xv * ge;
                    }
                }
            }
            adj[w.0] = Some(gw);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = self.adj_take(adj, b);
            for ni in 0..n {
                let grow = &g[ni * k..(ni + 1) * k];
                for (gbe, &ge) in gb.iter_mut().zip(grow.iter()) {
                    *gbe += ge;
                }
            }
            adj[b.0] = Some(gb);
        }
    }

    /// Mean softmax cross-entropy over a batch of logits (N, K).
    /// The max-shift keeps the exponentials in range.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(SpemError::shape(format!(
                "cross-entropy wants (N,K) logits, got {shape:?}"
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(SpemError::arg(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(SpemError::arg(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let l = &ld[row * k..(row + 1) * k];
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in l.iter().enumerate() {
                let e = (v - m).exp();
                probs[row * k + j] = e;
                z += e;
            }
            for p in probs[row * k..(row + 1) * k].iter_mut() {
                *p /= z;
            }
            total += -(l[label] - m - z.ln());
        }
        let loss = total / n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub(super) fn backward_softmax_ce(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let Op::SoftmaxCrossEntropy {
            logits,
            ref labels,
            ref probs,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        if !self.nodes[logits.0].requires_grad {
            return;
        }
        let k = self.nodes[logits.0].shape[1];
        let n = labels.len();
        let scale = g[0] / n as f64;
        let mut gl = self.adj_take(adj, logits);
        for (row, &label) in labels.iter().enumerate() {
            for j in 0..k {
                let onehot = if j == label { 1.0 } else { 0.0 };
                gl[row * k + j] += scale * (probs[row * k + j] - onehot);
            }
        }
        adj[logits.0] = Some(gl);
    }
}
