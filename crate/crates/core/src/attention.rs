//! Channel attention blocks.
//!
//! The main module squeezes a feature map with the mix pool, excites the
//! embedding through a per-channel affine + sigmoid, then refines that
//! map with a second gate computed from the channel extrema
//! (`v = v_exc * v_rew`). Every published ablation of the refinement gate
//! is available as a [`ReweightVariant`]. A squeeze-and-excitation block
//! is included as the comparison baseline.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpemError};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::pooling::{
    self, ChannelVector, MixCoefficient, PoolingKind, PoolingStrategy,
};
use crate::tensor::{Tape, TensorId};

/// Per-channel multiplier map, shaped like a [`ChannelVector`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionMap(pub TensorId);

impl AttentionMap {
    pub fn id(self) -> TensorId {
        self.0
    }
}

/// All learnables of one attention block: the mix pair plus the affine
/// vectors of the excitation and reweighting gates. Gammas start at 0 and
/// betas at -1, so a fresh block outputs a constant map regardless of input.
#[derive(Debug, Clone)]
pub struct SpemParams {
    pub mix: MixCoefficient,
    pub gamma_exc: ParamId,
    pub beta_exc: ParamId,
    pub gamma_rew: ParamId,
    pub beta_rew: ParamId,
    /// Second (gamma, beta) pair, present only for the unshared variant.
    pub rew_unshared: Option<(ParamId, ParamId)>,
    pub channels: usize,
}

impl SpemParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        variant: ReweightVariant,
    ) -> Self {
        let vec_shape = vec![channels, 1, 1];
        let mix = MixCoefficient::register(store, &format!("{prefix}.mix"));
        let reg_pair = |store: &mut ParamStore, tag: &str| {
            let gamma = store.register(
                format!("{prefix}.gamma_{tag}"),
                vec![0.0; channels],
                vec_shape.clone(),
                true,
                ParamGroup::Attention,
            );
            let beta = store.register(
                format!("{prefix}.beta_{tag}"),
                vec![-1.0; channels],
                vec_shape.clone(),
                true,
                ParamGroup::Attention,
            );
            (gamma, beta)
        };
        let (gamma_exc, beta_exc) = reg_pair(store, "exc");
        let (gamma_rew, beta_rew) = reg_pair(store, "rew");
        let rew_unshared = if variant == ReweightVariant::UnsharedAddSigmoid {
            Some(reg_pair(store, "rew2"))
        } else {
            None
        };
        SpemParams {
            mix,
            gamma_exc,
            beta_exc,
            gamma_rew,
            beta_rew,
            rew_unshared,
            channels,
        }
    }

    /// Ids of every parameter, for gradient bookkeeping.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.mix.p0,
            self.mix.p1,
            self.gamma_exc,
            self.beta_exc,
            self.gamma_rew,
            self.beta_rew,
        ];
        if let Some((g, b)) = self.rew_unshared {
            ids.push(g);
            ids.push(b);
        }
        ids
    }
}

/// Shape of the reweighting gate. `SharedAddSigmoid` is the production
/// form; the rest are the ablation grid, plus `NoReweight` which disables
/// the gate by emitting an all-ones map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReweightVariant {
    SharedAddSigmoid,
    UnsharedAddSigmoid,
    SharedAddNoSigmoid,
    SharedMulSigmoid,
    SigmoidThenAdd,
    SigmoidThenMul,
    MaxOnly,
    MinOnly,
    NoReweight,
}

impl ReweightVariant {
    pub const ALL: [ReweightVariant; 9] = [
        ReweightVariant::SharedAddSigmoid,
        ReweightVariant::UnsharedAddSigmoid,
        ReweightVariant::SharedAddNoSigmoid,
        ReweightVariant::SharedMulSigmoid,
        ReweightVariant::SigmoidThenAdd,
        ReweightVariant::SigmoidThenMul,
        ReweightVariant::MaxOnly,
        ReweightVariant::MinOnly,
        ReweightVariant::NoReweight,
    ];

    /// CLI spelling: `ours` for the production gate, `a`..`g` for the
    /// ablation letters, `none` to drop the gate.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ours" => ReweightVariant::SharedAddSigmoid,
            "a" => ReweightVariant::UnsharedAddSigmoid,
            "b" => ReweightVariant::SharedAddNoSigmoid,
            "c" => ReweightVariant::SharedMulSigmoid,
            "d" => ReweightVariant::SigmoidThenAdd,
            "e" => ReweightVariant::SigmoidThenMul,
            "f" => ReweightVariant::MaxOnly,
            "g" => ReweightVariant::MinOnly,
            "none" => ReweightVariant::NoReweight,
            other => {
                return Err(SpemError::Config(format!(
                    "unknown reweight variant '{other}' (want ours|a|b|c|d|e|f|g|none)"
                )))
            }
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ReweightVariant::SharedAddSigmoid => "ours",
            ReweightVariant::UnsharedAddSigmoid => "a",
            ReweightVariant::SharedAddNoSigmoid => "b",
            ReweightVariant::SharedMulSigmoid => "c",
            ReweightVariant::SigmoidThenAdd => "d",
            ReweightVariant::SigmoidThenMul => "e",
            ReweightVariant::MaxOnly => "f",
            ReweightVariant::MinOnly => "g",
            ReweightVariant::NoReweight => "none",
        }
    }
}

/// Which attention module, if any, a block carries. This is the
/// configuration-level choice; parameters are registered when the network
/// is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttentionKind {
    None,
    Se { reduction: usize },
    Spem { pooling: PoolingKind, variant: ReweightVariant },
}

fn channel_count(shape: &[usize]) -> Result<usize> {
    match *shape {
        [c, _, _] => Ok(c),
        [_, c, _, _] => Ok(c),
        _ => Err(SpemError::shape(format!(
            "expected (C,H,W) or (N,C,H,W), got {shape:?}"
        ))),
    }
}

fn check_channels(tape: &Tape, id: TensorId, expect: usize, what: &str) -> Result<()> {
    let got = channel_count(tape.shape(id))?;
    if got != expect {
        return Err(SpemError::shape(format!(
            "{what} covers {expect} channels but input has {got}"
        )));
    }
    Ok(())
}

/// `v_exc = sigmoid(gamma * u + beta)`, one sigmoid in total.
pub fn excitation(
    tape: &mut Tape,
    store: &ParamStore,
    u: ChannelVector,
    gamma: ParamId,
    beta: ParamId,
) -> Result<AttentionMap> {
    let c = store.get(gamma).shape[0];
    check_channels(tape, u.id(), c, "excitation affine")?;
    let g = tape.param(store, gamma);
    let b = tape.param(store, beta);
    let scaled = tape.mul(u.id(), g)?;
    let shifted = tape.add(scaled, b)?;
    Ok(AttentionMap(tape.sigmoid(shifted)))
}

/// Refinement gate over the channel extrema.
pub fn reweight(
    tape: &mut Tape,
    store: &ParamStore,
    f_max: ChannelVector,
    f_min: ChannelVector,
    params: &SpemParams,
    variant: ReweightVariant,
) -> Result<AttentionMap> {
    check_channels(tape, f_max.id(), params.channels, "reweight affine")?;
    check_channels(tape, f_min.id(), params.channels, "reweight affine")?;
    if tape.shape(f_max.id()) != tape.shape(f_min.id()) {
        return Err(SpemError::shape(format!(
            "extrema shapes disagree: {:?} vs {:?}",
            tape.shape(f_max.id()),
            tape.shape(f_min.id())
        )));
    }

    // Shared affine g(z) = gamma * z + beta, instantiated lazily per term.
    let gamma = tape.param(store, params.gamma_rew);
    let beta = tape.param(store, params.beta_rew);
    let affine = |tape: &mut Tape, z: TensorId| -> Result<TensorId> {
        let s = tape.mul(z, gamma)?;
        tape.add(s, beta)
    };

    let out = match variant {
        ReweightVariant::SharedAddSigmoid => {
            // sigmoid(f_min*gamma + f_max*gamma + beta): one shared affine
            // over the sum of both extrema.
            let lo = tape.mul(f_min.id(), gamma)?;
            let hi = tape.mul(f_max.id(), gamma)?;
            let s = tape.add(lo, hi)?;
            let s = tape.add(s, beta)?;
            tape.sigmoid(s)
        }
        ReweightVariant::UnsharedAddSigmoid => {
            let (gamma2, beta2) = params
                .rew_unshared
                .ok_or_else(|| SpemError::State("unshared variant without its second affine".into()))?;
            let g2 = tape.param(store, gamma2);
            let b2 = tape.param(store, beta2);
            let lo = affine(tape, f_min.id())?;
            let hi = tape.mul(f_max.id(), g2)?;
            let hi = tape.add(hi, b2)?;
            let s = tape.add(lo, hi)?;
            tape.sigmoid(s)
        }
        ReweightVariant::SharedAddNoSigmoid => {
            let lo = tape.mul(f_min.id(), gamma)?;
            let hi = tape.mul(f_max.id(), gamma)?;
            let s = tape.add(lo, hi)?;
            tape.add(s, beta)?
        }
        ReweightVariant::SharedMulSigmoid => {
            let hi = affine(tape, f_max.id())?;
            let lo = affine(tape, f_min.id())?;
            let p = tape.mul(hi, lo)?;
            tape.sigmoid(p)
        }
        ReweightVariant::SigmoidThenAdd => {
            let hi = affine(tape, f_max.id())?;
            let lo = affine(tape, f_min.id())?;
            let sh = tape.sigmoid(hi);
            let sl = tape.sigmoid(lo);
            tape.add(sh, sl)?
        }
        ReweightVariant::SigmoidThenMul => {
            let hi = affine(tape, f_max.id())?;
            let lo = affine(tape, f_min.id())?;
            let sh = tape.sigmoid(hi);
            let sl = tape.sigmoid(lo);
            tape.mul(sh, sl)?
        }
        ReweightVariant::MaxOnly => {
            let hi = affine(tape, f_max.id())?;
            tape.sigmoid(hi)
        }
        ReweightVariant::MinOnly => {
            let lo = affine(tape, f_min.id())?;
            tape.sigmoid(lo)
        }
        ReweightVariant::NoReweight => {
            let len = tape.data(f_max.id()).len();
            let shape = tape.shape(f_max.id()).to_vec();
            tape.constant(vec![1.0; len], &shape)?
        }
    };
    Ok(AttentionMap(out))
}

/// Full attention map: pool once, excite, reweight, multiply.
/// The channel extrema are computed a single time and shared between the
/// pooling blend and the reweighting gate.
pub fn spem_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    params: &SpemParams,
    variant: ReweightVariant,
    strategy: &PoolingStrategy,
) -> Result<AttentionMap> {
    let f_max = pooling::global_max_pool(tape, x)?;
    let f_min = pooling::global_min_pool(tape, x)?;
    let u = pooling::mix_pool_from(tape, store, x, f_max, f_min, strategy)?;
    let v_exc = excitation(tape, store, u, params.gamma_exc, params.beta_exc)?;
    let v_rew = reweight(tape, store, f_max, f_min, params, variant)?;
    let v = tape.mul(v_exc.id(), v_rew.id())?;
    Ok(AttentionMap(v))
}

/// Scale every channel of `x` by its attention value.
pub fn recalibrate(tape: &mut Tape, x: TensorId, v: AttentionMap) -> Result<TensorId> {
    let cx = channel_count(tape.shape(x))?;
    check_channels(tape, v.id(), cx, "attention map")?;
    tape.mul(x, v.id())
}

/// Squeeze-and-excitation parameters: two fully-connected layers around a
/// bottleneck of width `max(1, C/r)`.
#[derive(Debug, Clone)]
pub struct SeParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl SeParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(SpemError::Config("se reduction must be >= 1".into()));
        }
        let hidden = (channels / reduction).max(1);
        let w1 = store.register(
            format!("{prefix}.w1"),
            kaiming_normal(rng, channels, channels * hidden),
            vec![channels, hidden],
            true,
            ParamGroup::Attention,
        );
        let b1 = store.register(
            format!("{prefix}.b1"),
            vec![0.0; hidden],
            vec![hidden],
            true,
            ParamGroup::Attention,
        );
        let w2 = store.register(
            format!("{prefix}.w2"),
            kaiming_normal(rng, hidden, hidden * channels),
            vec![hidden, channels],
            true,
            ParamGroup::Attention,
        );
        let b2 = store.register(
            format!("{prefix}.b2"),
            vec![0.0; channels],
            vec![channels],
            true,
            ParamGroup::Attention,
        );
        Ok(SeParams {
            w1,
            b1,
            w2,
            b2,
            channels,
            hidden,
        })
    }
}

/// Zero-mean normal draw with Kaiming variance 2/fan_in.
pub fn kaiming_normal<R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// `sigmoid(W2 relu(W1 gap(x)))` with biases on both layers.
pub fn se_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    params: &SeParams,
) -> Result<AttentionMap> {
    check_channels(tape, x, params.channels, "se block")?;
    let pooled = tape.global_avg_pool(x)?;
    let pooled_shape = tape.shape(pooled).to_vec();
    let n = if pooled_shape.len() == 4 {
        pooled_shape[0]
    } else {
        1
    };
    let flat = tape.reshape(pooled, &[n, params.channels])?;
    let w1 = tape.param(store, params.w1);
    let b1 = tape.param(store, params.b1);
    let w2 = tape.param(store, params.w2);
    let b2 = tape.param(store, params.b2);
    let h = tape.linear(flat, w1, b1)?;
    let h = tape.relu(h);
    let o = tape.linear(h, w2, b2)?;
    let s = tape.sigmoid(o);
    let out = tape.reshape(s, &pooled_shape)?;
    Ok(AttentionMap(out))
}
