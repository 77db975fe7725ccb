//! Batch normalization over NCHW tensors.

use super::{Op, Tape, TensorId};
use crate::error::{Result, SpemError};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Running statistics owned by a layer, updated on train-mode forwards
/// as `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

impl Tape {
    /// Normalize per channel, then apply the affine pair. Train mode uses
    /// batch statistics (population variance) and updates `stats`; eval
    /// mode reads `stats` and leaves them untouched.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        train: bool,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(SpemError::shape(format!(
                "batch_norm wants NCHW input, got {shape:?}"
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if n == 0 {
            return Err(SpemError::arg("batch_norm on an empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(SpemError::shape(format!(
                "batch_norm affine length {:?}/{:?} does not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if stats.running_mean.len() != c {
            return Err(SpemError::shape(format!(
                "batch_norm running stats cover {} channels, input has {c}",
                stats.running_mean.len()
            )));
        }

        let m = (n * h * w) as f64;
        let plane = h * w;
        let (mut mean, mut inv_std) = (vec![0.0; c], vec![0.0; c]);
        if train {
            for ci in 0..c {
                let mut sum = 0.0;
                for ni in 0..n {
                    let p = &self.nodes[x.0].data[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    sum += p.iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut var = 0.0;
                for ni in 0..n {
                    let p = &self.nodes[x.0].data[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    var += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
                }
                let var = var / m;
                mean[ci] = mu;
                inv_std[ci] = 1.0 / (var + BN_EPS).sqrt();
                stats.running_mean[ci] = BN_MOMENTUM * stats.running_mean[ci] + (1.0 - BN_MOMENTUM) * mu;
                stats.running_var[ci] = BN_MOMENTUM * stats.running_var[ci] + (1.0 - BN_MOMENTUM) * var;
            }
        } else {
            for ci in 0..c {
                mean[ci] = stats.running_mean[ci];
                inv_std[ci] = 1.0 / (stats.running_var[ci] + BN_EPS).sqrt();
            }
        }

        let mut out = vec![0.0; n * c * plane];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                    for j in 0..plane {
                        out[base + j] = ga * (xd[base + j] - mu) * is + be;
                    }
                }
            }
        }

        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(
            out,
            shape,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                train,
                mean,
                inv_std,
            },
        ))
    }

    pub(super) fn backward_batch_norm(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let Op::BatchNorm {
            x,
            gamma,
            beta,
            train,
            ref mean,
            ref inv_std,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        let shape = &self.nodes[x.0].shape;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = (n * plane) as f64;
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;

        // Per-channel sums of dy and dy * x_hat feed all three gradients.
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, is) = (mean[ci], inv_std[ci]);
                for j in 0..plane {
                    let dy = g[base + j];
                    sum_dy[ci] += dy;
                    sum_dy_xhat[ci] += dy * (xd[base + j] - mu) * is;
                }
            }
        }

        if self.nodes[beta.0].requires_grad {
            let mut gb = self.adj_take(adj, beta);
            for ci in 0..c {
                gb[ci] += sum_dy[ci];
            }
            adj[beta.0] = Some(gb);
        }
        if self.nodes[gamma.0].requires_grad {
            let mut gg = self.adj_take(adj, gamma);
            for ci in 0..c {
                gg[ci] += sum_dy_xhat[ci];
            }
            adj[gamma.0] = Some(gg);
        }
        if self.nodes[x.0].requires_grad {
            let mut gx = self.adj_take(adj, x);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (mu, is, ga) = (mean[ci], inv_std[ci], gd[ci]);
                    if train {
                        let k1 = sum_dy[ci] / m;
                        let k2 = sum_dy_xhat[ci] / m;
                        for j in 0..plane {
                            let xhat = (xd[base + j] - mu) * is;
                            gx[base + j] += ga * is * (g[base + j] - k1 - xhat * k2);
                        }
                    } else {
                        for j in 0..plane {
                            gx[base + j] += ga * is * g[base + j];
                        }
                    }
                }
            }
            adj[x.0] = Some(gx);
        }
    }
}
