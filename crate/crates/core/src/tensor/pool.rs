//! Global spatial pooling: each channel's H x W plane reduces to one value.
//!
//! Accepts (C, H, W) or (N, C, H, W); the spatial dims become 1 x 1.
//! Max and min route their gradient to the first extremal element in
//! row-major order, which makes tie-breaking deterministic.

use super::{Op, Tape, TensorId};
use crate::error::{Result, SpemError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Min,
    Avg,
}

fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(SpemError::shape(format!(
            "global pooling wants (C,H,W) or (N,C,H,W), got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn global_max_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.global_pool(x, PoolKind::Max)
    }

    pub fn global_min_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.global_pool(x, PoolKind::Min)
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.global_pool(x, PoolKind::Avg)
    }

    pub fn global_pool(&mut self, x: TensorId, kind: PoolKind) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let (n, c, h, w) = pool_dims(&shape)?;
        let plane = h * w;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; n * c];
        let mut argext = Vec::new();
        match kind {
            PoolKind::Avg => {
                for (i, slot) in out.iter_mut().enumerate() {
                    let p = &xd[i * plane..(i + 1) * plane];
                    *slot = p.iter().sum::<f64>() / plane as f64;
                }
            }
            PoolKind::Max | PoolKind::Min => {
                argext = vec![0usize; n * c];
                for (i, slot) in out.iter_mut().enumerate() {
                    let p = &xd[i * plane..(i + 1) * plane];
                    let mut best = 0usize;
                    for (j, &v) in p.iter().enumerate().skip(1) {
                        let better = match kind {
                            PoolKind::Max => v > p[best],
                            PoolKind::Min => v < p[best],
                            PoolKind::Avg => unreachable!(),
                        };
                        if better {
                            best = j;
                        }
                    }
                    *slot = p[best];
                    argext[i] = best;
                }
            }
        }
        let out_shape = if shape.len() == 3 {
            vec![c, 1, 1]
        } else {
            vec![n, c, 1, 1]
        };
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, out_shape, rg, Op::GlobalPool { x, kind, argext }))
    }

    pub(super) fn backward_global_pool(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let Op::GlobalPool { x, kind, ref argext } = self.nodes[i].op else {
            unreachable!()
        };
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let shape = &self.nodes[x.0].shape;
        let (n, c, h, w) = pool_dims(shape).expect("checked at record");
        let plane = h * w;
        let mut gx = self.adj_take(adj, x);
        match kind {
            PoolKind::Avg => {
                let inv = 1.0 / plane as f64;
                for i in 0..n * c {
                    let gv = g[i] * inv;
                    for slot in gx[i * plane..(i + 1) * plane].iter_mut() {
                        *slot += gv;
                    }
                }
            }
            PoolKind::Max | PoolKind::Min => {
                for i in 0..n * c {
                    gx[i * plane + argext[i]] += g[i];
                }
            }
        }
        adj[x.0] = Some(gx);
    }
}
