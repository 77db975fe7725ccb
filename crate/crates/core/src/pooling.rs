//! Global pooling strategies for squeezing a feature map into one value
//! per channel.
//!
//! Besides plain average pooling, this module provides a mix pool
//! `u = lambda * f_max + (1 - lambda) * f_min` where `lambda` is either a
//! fixed constant or derived from two trainable scalars as
//! `lambda = p0^2 / (p0^2 + p1^2)`, which keeps it in [0, 1] by
//! construction and lets gradient descent pick the blend.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpemError};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};

/// A per-channel statistic shaped (C,1,1) or (N,C,1,1).
#[derive(Debug, Clone, Copy)]
pub struct ChannelVector(pub TensorId);

impl ChannelVector {
    pub fn id(self) -> TensorId {
        self.0
    }

    /// Wrap a tensor after checking that its spatial extent is 1x1.
    pub fn wrap(tape: &Tape, id: TensorId) -> Result<Self> {
        let shape = tape.shape(id);
        let ok = matches!(*shape, [_, 1, 1] | [_, _, 1, 1]);
        if !ok {
            return Err(SpemError::shape(format!(
                "channel vector must be (C,1,1) or (N,C,1,1), got {shape:?}"
            )));
        }
        Ok(ChannelVector(id))
    }
}

/// Trainable pair behind the adaptive mixing weight. Both scalars start
/// at 0.5 so the mix opens as an even blend.
#[derive(Debug, Clone, Copy)]
pub struct MixCoefficient {
    pub p0: ParamId,
    pub p1: ParamId,
}

impl MixCoefficient {
    pub fn register(store: &mut ParamStore, prefix: &str) -> Self {
        let p0 = store.register(
            format!("{prefix}.p0"),
            vec![0.5],
            vec![1],
            false,
            ParamGroup::Attention,
        );
        let p1 = store.register(
            format!("{prefix}.p1"),
            vec![0.5],
            vec![1],
            false,
            ParamGroup::Attention,
        );
        MixCoefficient { p0, p1 }
    }

    /// Current lambda as a plain number (for logging).
    pub fn lambda_value(&self, store: &ParamStore) -> Result<f64> {
        lambda_of(store.get(self.p0).data[0], store.get(self.p1).data[0])
    }
}

/// `lambda = p0^2 / (p0^2 + p1^2)` on plain scalars.
pub fn lambda_of(p0: f64, p1: f64) -> Result<f64> {
    let denom = p0 * p0 + p1 * p1;
    if denom == 0.0 {
        return Err(SpemError::DegenerateMix);
    }
    Ok(p0 * p0 / denom)
}

/// How to squeeze a feature map down to one value per channel.
#[derive(Debug, Clone, Copy)]
pub enum PoolingStrategy {
    /// Global average pooling.
    Gap,
    /// `c * f_max + (1-c) * f_min` with a constant blend in [0, 1].
    FixedMix(f64),
    /// The trainable blend.
    AdaptiveMix(MixCoefficient),
}

impl PoolingStrategy {
    pub fn fixed(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) || c.is_nan() {
            return Err(SpemError::Config(format!(
                "fixed mix constant must lie in [0,1], got {c}"
            )));
        }
        Ok(PoolingStrategy::FixedMix(c))
    }
}

/// Configuration-level mirror of [`PoolingStrategy`]; the adaptive case
/// registers its coefficient pair only when a model is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PoolingKind {
    Gap,
    Fixed(f64),
    Adaptive,
}

impl PoolingKind {
    /// CLI spelling: `gap`, `fixed:<c>`, or `adaptive`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "gap" {
            return Ok(PoolingKind::Gap);
        }
        if s == "adaptive" {
            return Ok(PoolingKind::Adaptive);
        }
        if let Some(c) = s.strip_prefix("fixed:") {
            let c: f64 = c
                .parse()
                .map_err(|_| SpemError::Config(format!("bad fixed mix constant '{c}'")))?;
            PoolingStrategy::fixed(c)?;
            return Ok(PoolingKind::Fixed(c));
        }
        Err(SpemError::Config(format!(
            "unknown pooling '{s}' (want gap|fixed:<c>|adaptive)"
        )))
    }

    pub fn tag(&self) -> String {
        match self {
            PoolingKind::Gap => "gap".into(),
            PoolingKind::Fixed(c) => format!("fixed:{c}"),
            PoolingKind::Adaptive => "adaptive".into(),
        }
    }

    /// Build the runtime strategy, registering the coefficient pair for
    /// the adaptive case.
    pub fn instantiate(&self, store: &mut ParamStore, prefix: &str) -> Result<PoolingStrategy> {
        match self {
            PoolingKind::Gap => Ok(PoolingStrategy::Gap),
            PoolingKind::Fixed(c) => PoolingStrategy::fixed(*c),
            PoolingKind::Adaptive => Ok(PoolingStrategy::AdaptiveMix(MixCoefficient::register(
                store,
                &format!("{prefix}.mix"),
            ))),
        }
    }
}

pub fn global_max_pool(tape: &mut Tape, x: TensorId) -> Result<ChannelVector> {
    Ok(ChannelVector(tape.global_max_pool(x)?))
}

pub fn global_min_pool(tape: &mut Tape, x: TensorId) -> Result<ChannelVector> {
    Ok(ChannelVector(tape.global_min_pool(x)?))
}

pub fn global_avg_pool(tape: &mut Tape, x: TensorId) -> Result<ChannelVector> {
    Ok(ChannelVector(tape.global_avg_pool(x)?))
}

/// Differentiable lambda node built from the coefficient pair.
/// Errors out when p0 = p1 = 0 rather than emitting NaN.
pub fn mix_lambda(tape: &mut Tape, store: &ParamStore, m: &MixCoefficient) -> Result<TensorId> {
    let p0 = tape.param(store, m.p0);
    let p1 = tape.param(store, m.p1);
    let p0sq = tape.mul(p0, p0)?;
    let p1sq = tape.mul(p1, p1)?;
    let denom = tape.add(p0sq, p1sq)?;
    if tape.data(denom)[0] == 0.0 {
        return Err(SpemError::DegenerateMix);
    }
    tape.div(p0sq, denom)
}

/// Pool `x` according to `strategy`, recomputing the extrema.
pub fn mix_pool(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    strategy: &PoolingStrategy,
) -> Result<ChannelVector> {
    match strategy {
        PoolingStrategy::Gap => global_avg_pool(tape, x),
        _ => {
            let f_max = global_max_pool(tape, x)?;
            let f_min = global_min_pool(tape, x)?;
            mix_pool_from(tape, store, x, f_max, f_min, strategy)
        }
    }
}

/// Pool using extrema computed elsewhere, so callers that also need
/// `f_max`/`f_min` for other purposes pool without recomputing them.
pub fn mix_pool_from(
    tape: &mut Tape,
    store: &ParamStore,
    x: TensorId,
    f_max: ChannelVector,
    f_min: ChannelVector,
    strategy: &PoolingStrategy,
) -> Result<ChannelVector> {
    match strategy {
        PoolingStrategy::Gap => global_avg_pool(tape, x),
        PoolingStrategy::FixedMix(c) => {
            if !(0.0..=1.0).contains(c) || c.is_nan() {
                return Err(SpemError::Config(format!(
                    "fixed mix constant must lie in [0,1], got {c}"
                )));
            }
            let hi = tape.mul_scalar(f_max.0, *c);
            let lo = tape.mul_scalar(f_min.0, 1.0 - *c);
            Ok(ChannelVector(tape.add(hi, lo)?))
        }
        PoolingStrategy::AdaptiveMix(m) => {
            let lambda = mix_lambda(tape, store, m)?;
            let one = tape.constant(vec![1.0], &[1])?;
            let complement = tape.sub(one, lambda)?;
            let hi = tape.mul(f_max.0, lambda)?;
            let lo = tape.mul(f_min.0, complement)?;
            Ok(ChannelVector(tape.add(hi, lo)?))
        }
    }
}
