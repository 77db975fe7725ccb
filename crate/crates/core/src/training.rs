//! SGD training loop: momentum + weight decay, step-decay learning rate,
//! and a task loss with a quadratic penalty on the mix coefficients that
//! keeps them from drifting during training.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::data::{AugmentConfig, Dataset};
use crate::error::{Result, SpemError};
use crate::param::ParamStore;
use crate::pooling::MixCoefficient;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// (epoch, multiplier) pairs; each multiplier applies from its epoch on.
    pub lr_schedule: Vec<(usize, f64)>,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// The usual CIFAR recipe: lr 0.1 decayed 10x at 50% and 75% of the run.
    pub fn standard(epochs: usize) -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs,
            lr_schedule: vec![(epochs / 2, 0.1), (epochs * 3 / 4, 0.1)],
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(SpemError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SpemError::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(SpemError::Config("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(SpemError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate in force at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(at, mult) in &self.lr_schedule {
            if epoch >= at {
                lr *= mult;
            }
        }
        lr
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::standard(164)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Coefficient of the quadratic penalty on each (p0, p1) pair.
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { eta: 0.1 }
    }
}

/// `L = mean cross-entropy + eta * sum_i (p0_i^2 + p1_i^2)`.
///
/// The caller passes the coefficient pairs that actually participate in
/// pooling; with `eta = 0` or no pairs the task loss is returned exactly.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    logits: TensorId,
    labels: &[usize],
    mixes: &[MixCoefficient],
    cfg: &LossConfig,
) -> Result<TensorId> {
    if cfg.eta < 0.0 {
        return Err(SpemError::Config(format!(
            "penalty coefficient must be >= 0, got {}",
            cfg.eta
        )));
    }
    let task = tape.softmax_cross_entropy(logits, labels)?;
    if cfg.eta == 0.0 || mixes.is_empty() {
        return Ok(task);
    }
    let mut penalty: Option<TensorId> = None;
    for m in mixes {
        let p0 = tape.param(store, m.p0);
        let p1 = tape.param(store, m.p1);
        let p0sq = tape.mul(p0, p0)?;
        let p1sq = tape.mul(p1, p1)?;
        let pair = tape.add(p0sq, p1sq)?;
        penalty = Some(match penalty {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    let scaled = tape.mul_scalar(penalty.expect("nonempty"), cfg.eta);
    tape.add(task, scaled)
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        SgdState {
            velocity: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One SGD update: `v = momentum*v + (g + wd*p); p -= lr*v`.
/// Weight decay is skipped for parameters flagged no-decay (the mix pairs,
/// which carry their own penalty, and batch-norm affines).
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut SgdState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(SpemError::State(format!(
            "optimizer tracks {} parameters, store has {}",
            state.velocity.len(),
            store.len()
        )));
    }
    for (p, v) in store.iter_mut().zip(state.velocity.iter_mut()) {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| SpemError::State(format!("missing gradient for {}", p.name)))?;
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        for ((val, vel), &g) in p.data.iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
            *vel = cfg.momentum * *vel + (g + wd * *val);
            *val -= lr * *vel;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_top1: f64,
    /// Lambda of every adaptive attention module, in network order.
    pub lambdas: Vec<f64>,
}

/// Train/test split plus the augmentation recipe for the train side.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub augment: AugmentConfig,
}

fn mix_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the packed words
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        .wrapping_add(a)
        .wrapping_mul(0x94D0_49BB_1331_11EB)
        .wrapping_add(b);
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Augmentation RNG for one sample: depends only on (seed, epoch, index),
/// so iteration order cannot change the draws.
pub fn sample_rng(seed: u64, epoch: usize, sample_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA06, epoch as u64, sample_index as u64))
}

fn batch_tensor(
    tape: &mut Tape,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    rng_for: Option<(u64, usize)>,
) -> Result<(TensorId, Vec<usize>)> {
    let mut data = Vec::with_capacity(indices.len() * 3 * 32 * 32);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let record = &dataset.records[idx];
        let pixels = match rng_for {
            Some((seed, epoch)) => {
                let mut rng = sample_rng(seed, epoch, idx);
                crate::data::augment(record, cfg, &mut rng)
            }
            None => crate::data::eval_pixels(record, cfg),
        };
        data.extend_from_slice(&pixels);
        labels.push(record.label as usize);
    }
    let x = tape.var(data, &[indices.len(), 3, 32, 32])?;
    Ok((x, labels))
}

/// Full training run. Deterministic for a fixed seed: shuffling, parameter
/// init, and augmentation all derive from it.
pub fn train(
    net: &mut Network,
    data: &DataBundle,
    opt: &OptimizerConfig,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    opt.validate()?;
    let mixes = net.adaptive_mix_coefficients();
    let mut state = SgdState::new(&net.store);
    let mut history = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let lr = opt.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.train.records.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5F1E, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let mut tape = Tape::new();
            let (x, labels) = batch_tensor(
                &mut tape,
                &data.train,
                chunk,
                &data.augment,
                Some((seed, epoch)),
            )?;
            let logits = net.forward(&mut tape, x, true)?;
            let loss = total_loss(&mut tape, &net.store, logits, &labels, &mixes, loss_cfg)?;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut net.store);
            // Parameters outside the loss graph (e.g. identity-forced
            // attention) step with a zero gradient.
            net.store.fill_missing_grads();
            sgd_step(&mut net.store, &mut state, opt, lr)?;
            net.store.zero_grad();
            loss_sum += tape.scalar(loss)? * chunk.len() as f64;
            seen += chunk.len();
        }

        let test_top1 = evaluate(net, &data.test, &data.augment, opt.batch_size)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            test_top1,
            lambdas: net.lambdas()?,
        });
    }
    Ok(history)
}

/// Top-1 accuracy over a dataset in eval mode; ties resolve to the lowest
/// class index.
pub fn evaluate(
    net: &mut Network,
    dataset: &Dataset,
    cfg: &AugmentConfig,
    batch_size: usize,
) -> Result<f64> {
    if dataset.records.is_empty() {
        return Err(SpemError::arg("evaluate on an empty dataset"));
    }
    let indices: Vec<usize> = (0..dataset.records.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let (x, labels) = batch_tensor(&mut tape, dataset, chunk, cfg, None)?;
        let logits = net.forward(&mut tape, x, false)?;
        let k = tape.shape(logits)[1];
        let out = tape.data(logits);
        for (row, &label) in labels.iter().enumerate() {
            let scores = &out[row * k..(row + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if scores[j] > scores[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.records.len() as f64)
}

/// Emit the history as CSV: epoch, train_loss, test_top1, then one lambda
/// column per adaptive module in network order.
pub fn write_history_csv(history: &[EpochStats], out: &mut dyn Write) -> Result<()> {
    let width = history.first().map(|h| h.lambdas.len()).unwrap_or(0);
    let mut header = String::from("epoch,train_loss,test_top1");
    for i in 0..width {
        header.push_str(&format!(",lambda_{i}"));
    }
    writeln!(out, "{header}")?;
    for row in history {
        let mut line = format!("{},{},{}", row.epoch, row.train_loss, row.test_top1);
        for l in &row.lambdas {
            line.push_str(&format!(",{l}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::backbone::{build, NetworkConfig};
    use crate::data::synthetic;
    use crate::param::ParamGroup;
    use crate::pooling::PoolingKind;
    use crate::reference::TestRng;

    #[test]
    fn loss_hand_case_and_eta_zero() {
        // Uniform logits over 4 classes -> ln 4; one pair at 0.5 with
        // eta 0.1 adds exactly 0.05.
        let mut store = ParamStore::new();
        let m = MixCoefficient::register(&mut store, "m");
        let mut tape = Tape::new();
        let logits = tape.var(vec![0.0; 4], &[1, 4]).unwrap();
        let l = total_loss(&mut tape, &store, logits, &[2], &[m], &LossConfig { eta: 0.1 }).unwrap();
        let expect = 4.0f64.ln() + 0.05;
        assert!((tape.scalar(l).unwrap() - expect).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.var(vec![0.0; 4], &[1, 4]).unwrap();
        let task = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        let l0 = total_loss(&mut tape, &store, logits, &[2], &[m], &LossConfig { eta: 0.0 }).unwrap();
        assert_eq!(tape.scalar(l0).unwrap(), tape.scalar(task).unwrap());
    }

    #[test]
    fn penalty_matches_independent_recompute() {
        let mut store = ParamStore::new();
        let mut rng = TestRng::new(51);
        let mut mixes = Vec::new();
        for i in 0..5 {
            let m = MixCoefficient::register(&mut store, &format!("m{i}"));
            store.get_mut(m.p0).data[0] = rng.uniform(-1.5, 1.5);
            store.get_mut(m.p1).data[0] = rng.uniform(-1.5, 1.5);
            mixes.push(m);
        }
        let eta = 0.1;
        let mut tape = Tape::new();
        let logits = tape.var(rng.uniform_vec(3 * 7, -2.0, 2.0), &[3, 7]).unwrap();
        let labels = [0usize, 3, 6];
        let total = total_loss(&mut tape, &store, logits, &labels, &mixes, &LossConfig { eta }).unwrap();
        let task = crate::reference::naive_softmax_cross_entropy(tape.data(logits), 7, &labels);
        let pen: f64 = mixes
            .iter()
            .map(|m| {
                let p0 = store.get(m.p0).data[0];
                let p1 = store.get(m.p1).data[0];
                p0 * p0 + p1 * p1
            })
            .sum();
        assert!((tape.scalar(total).unwrap() - (task + eta * pen)).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_shrinks_the_pair() {
        let mut store = ParamStore::new();
        let m = MixCoefficient::register(&mut store, "m");
        for (id, v) in [(m.p0, 0.8), (m.p1, -0.6)] {
            store.get_mut(id).data[0] = v;
        }
        let mut tape = Tape::new();
        let logits = tape.var(vec![0.1, -0.1], &[1, 2]).unwrap();
        let l = total_loss(&mut tape, &store, logits, &[0], &[m], &LossConfig { eta: 0.1 }).unwrap();
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(&mut store);
        // d(eta p^2)/dp = 2 eta p: gradient sign equals the sign of p, so a
        // descent step moves each coefficient toward zero.
        let g0 = store.get(m.p0).grad.as_deref().unwrap()[0];
        let g1 = store.get(m.p1).grad.as_deref().unwrap()[0];
        assert!(g0 > 0.0 && (g0 - 0.16).abs() < 1e-12);
        assert!(g1 < 0.0 && (g1 + 0.12).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_grad_zero_velocity_keeps_params() {
        let mut store = ParamStore::new();
        store.register("w", vec![1.0, -2.0], vec![2], true, ParamGroup::Backbone);
        store.fill_missing_grads();
        let mut state = SgdState::new(&store);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::standard(1)
        };
        sgd_step(&mut store, &mut state, &cfg, 0.1).unwrap();
        assert_eq!(store.iter().next().unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_single_step_moves_by_lr_times_grad() {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![1.0], vec![1], true, ParamGroup::Backbone);
        store.get_mut(id).grad = Some(vec![1.0]);
        let mut state = SgdState::new(&store);
        let cfg = OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerConfig::standard(1)
        };
        sgd_step(&mut store, &mut state, &cfg, 0.1).unwrap();
        assert!((store.get(id).data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_matches_hand_unrolled_recurrence() {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![0.0], vec![1], true, ParamGroup::Backbone);
        let mut state = SgdState::new(&store);
        let cfg = OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            ..OptimizerConfig::standard(1)
        };
        let lr = 0.01;
        let grads = [0.5, -0.25];
        // Hand-unrolled: v1 = 0.5, p1 = -lr*v1; v2 = 0.9*0.5 - 0.25, p2 = p1 - lr*v2.
        let v1 = grads[0];
        let p1 = 0.0 - lr * v1;
        let v2 = 0.9 * v1 + grads[1];
        let p2 = p1 - lr * v2;
        for g in grads {
            store.get_mut(id).grad = Some(vec![g]);
            sgd_step(&mut store, &mut state, &cfg, lr).unwrap();
            store.zero_grad();
        }
        assert!((store.get(id).data[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_skips_flagged_params() {
        let mut store = ParamStore::new();
        let decayed = store.register("w", vec![1.0], vec![1], true, ParamGroup::Backbone);
        let frozen = store.register("p", vec![1.0], vec![1], false, ParamGroup::Attention);
        store.fill_missing_grads();
        let mut state = SgdState::new(&store);
        let cfg = OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.1,
            ..OptimizerConfig::standard(1)
        };
        sgd_step(&mut store, &mut state, &cfg, 1.0).unwrap();
        assert!((store.get(decayed).data[0] - 0.9).abs() < 1e-15);
        assert_eq!(store.get(frozen).data[0], 1.0);
    }

    #[test]
    fn sgd_missing_grad_is_state_error() {
        let mut store = ParamStore::new();
        store.register("w", vec![1.0], vec![1], true, ParamGroup::Backbone);
        let mut state = SgdState::new(&store);
        let cfg = OptimizerConfig::standard(1);
        assert!(matches!(
            sgd_step(&mut store, &mut state, &cfg, 0.1),
            Err(SpemError::State(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_empty_history_and_unchanged_model() {
        let mut net = build(NetworkConfig::new(1, 2, AttentionKind::None), 1).unwrap();
        let before: Vec<Vec<f64>> = net.store.iter().map(|p| p.data.clone()).collect();
        let (train_set, test_set) = synthetic(8, 2, 0).split(4);
        let augment = AugmentConfig::for_dataset(&train_set);
        let bundle = DataBundle { train: train_set, test: test_set, augment };
        let opt = OptimizerConfig {
            epochs: 0,
            ..OptimizerConfig::standard(0)
        };
        let history = train(&mut net, &bundle, &opt, &LossConfig::default(), 7).unwrap();
        assert!(history.is_empty());
        let after: Vec<Vec<f64>> = net.store.iter().map(|p| p.data.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluate_all_correct_and_empty() {
        let mut net = build(NetworkConfig::new(1, 2, AttentionKind::None), 1).unwrap();
        let (_, test_set) = synthetic(8, 2, 0).split(4);
        let empty = Dataset {
            records: vec![],
            num_classes: 2,
        };
        let cfg = AugmentConfig::for_dataset(&test_set);
        assert!(matches!(
            evaluate(&mut net, &empty, &cfg, 4),
            Err(SpemError::Argument(_))
        ));
    }

    #[test]
    fn lr_schedule_steps_down() {
        let opt = OptimizerConfig::standard(100);
        assert_eq!(opt.lr_at(0), 0.1);
        assert!((opt.lr_at(50) - 0.01).abs() < 1e-15);
        assert!((opt.lr_at(75) - 0.001).abs() < 1e-15);
        assert!((opt.lr_at(99) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn history_csv_has_lambda_columns() {
        let history = vec![EpochStats {
            epoch: 0,
            train_loss: 1.5,
            test_top1: 0.5,
            lambdas: vec![0.5, 0.25],
        }];
        let mut buf = Vec::new();
        write_history_csv(&history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_loss,test_top1,lambda_0,lambda_1\n"));
        assert!(text.contains("0,1.5,0.5,0.5,0.25"));
    }

    #[test]
    fn tiny_training_run_fits_separable_data() {
        let mut net = build(
            NetworkConfig::new(
                1,
                2,
                AttentionKind::Spem {
                    pooling: PoolingKind::Adaptive,
                    variant: crate::attention::ReweightVariant::SharedAddSigmoid,
                },
            ),
            11,
        )
        .unwrap();
        let full = synthetic(120, 2, 3);
        let (train_set, test_set) = full.split(96);
        let augment = AugmentConfig::for_dataset(&train_set);
        let bundle = DataBundle { train: train_set, test: test_set, augment };
        let opt = OptimizerConfig {
            lr: 0.05,
            epochs: 5,
            batch_size: 16,
            lr_schedule: vec![],
            ..OptimizerConfig::standard(5)
        };
        let history = train(&mut net, &bundle, &opt, &LossConfig::default(), 5).unwrap();
        assert_eq!(history.len(), 5);
        for row in &history {
            for &l in &row.lambdas {
                assert!((0.0..=1.0).contains(&l));
            }
        }
        // Separable blobs: the tiny net should classify nearly everything.
        let acc = evaluate(&mut net, &bundle.train, &bundle.augment, 16).unwrap();
        assert!(acc > 0.9, "train accuracy {acc}");
    }
}
