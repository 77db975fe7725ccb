//! Pre-activation bottleneck ResNet for 32x32 inputs, with an optional
//! attention module on each block's residual branch.
//!
//! Depth follows the CIFAR convention 9n+2 with n blocks per stage and
//! base widths 16/32/64 expanded 4x, so n=18 is the 164-layer network.
//! Attention is applied to the branch output just before the skip
//! addition. Checkpoints round-trip parameters and batch-norm running
//! statistics bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, kaiming_normal, AttentionKind, AttentionMap, ReweightVariant, SeParams, SpemParams,
};
use crate::error::{Result, SpemError};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::pooling::{MixCoefficient, PoolingKind, PoolingStrategy};
use crate::tensor::{BnStats, Tape, TensorId};

pub const EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Blocks per stage; network depth is 9n+2.
    pub blocks_per_stage: usize,
    /// Base widths of the three stages (bottleneck width before 4x expansion).
    pub stage_widths: [usize; 3],
    pub num_classes: usize,
    pub attention: AttentionKind,
}

impl NetworkConfig {
    pub fn new(n: usize, num_classes: usize, attention: AttentionKind) -> Self {
        NetworkConfig {
            blocks_per_stage: n,
            stage_widths: [16, 32, 64],
            num_classes,
            attention,
        }
    }

    pub fn depth(&self) -> usize {
        9 * self.blocks_per_stage + 2
    }

    fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 {
            return Err(SpemError::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(SpemError::Config(format!(
                "stage widths must be positive, got {:?}",
                self.stage_widths
            )));
        }
        if self.num_classes < 2 {
            return Err(SpemError::Config("need at least two classes".into()));
        }
        if let AttentionKind::Se { reduction } = self.attention {
            if reduction == 0 {
                return Err(SpemError::Config("se reduction must be >= 1".into()));
            }
        }
        if let AttentionKind::Spem { pooling: PoolingKind::Fixed(c), .. } = self.attention {
            if !(0.0..=1.0).contains(&c) || c.is_nan() {
                return Err(SpemError::Config(format!(
                    "fixed mix constant must lie in [0,1], got {c}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct ConvLayer {
    w: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn register<R: rand::Rng>(
        store: &mut ParamStore,
        name: String,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.register(
            name,
            kaiming_normal(rng, fan_in, c_out * c_in * k * k),
            vec![c_out, c_in, k, k],
            true,
            ParamGroup::Backbone,
        );
        ConvLayer { w, stride, pad }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<TensorId> {
        let w = tape.param(store, self.w);
        tape.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    stats: BnStats,
}

impl BnLayer {
    fn register(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.register(
            format!("{name}.gamma"),
            vec![1.0; channels],
            vec![channels],
            false,
            ParamGroup::Backbone,
        );
        let beta = store.register(
            format!("{name}.beta"),
            vec![0.0; channels],
            vec![channels],
            false,
            ParamGroup::Backbone,
        );
        BnLayer {
            gamma,
            beta,
            stats: BnStats::new(channels),
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        train: bool,
    ) -> Result<TensorId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.batch_norm(x, gamma, beta, &mut self.stats, train)
    }
}

/// One attention module instance bound to a block.
#[derive(Debug)]
pub struct SpemInstance {
    pub params: SpemParams,
    pub strategy: PoolingStrategy,
    pub variant: ReweightVariant,
    /// When set, the block multiplies by an all-ones map instead of the
    /// computed attention, which must reproduce the attention-free network.
    pub force_identity: bool,
}

#[derive(Debug)]
enum BlockAttention {
    None,
    Se(SeParams),
    Spem(SpemInstance),
}

#[derive(Debug)]
struct Block {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
    bn3: BnLayer,
    conv3: ConvLayer,
    shortcut: Option<ConvLayer>,
    attention: BlockAttention,
    out_channels: usize,
}

impl Block {
    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        train: bool,
    ) -> Result<TensorId> {
        let pre = self.bn1.forward(tape, store, x, train)?;
        let pre = tape.relu(pre);
        let mut h = self.conv1.forward(tape, store, pre)?;
        h = self.bn2.forward(tape, store, h, train)?;
        h = tape.relu(h);
        h = self.conv2.forward(tape, store, h)?;
        h = self.bn3.forward(tape, store, h, train)?;
        h = tape.relu(h);
        h = self.conv3.forward(tape, store, h)?;

        h = match &self.attention {
            BlockAttention::None => h,
            BlockAttention::Se(se) => {
                let map = attention::se_forward(tape, store, h, se)?;
                attention::recalibrate(tape, h, map)?
            }
            BlockAttention::Spem(inst) => {
                let map = if inst.force_identity {
                    let n = tape.shape(h)[0];
                    AttentionMap(tape.constant(
                        vec![1.0; n * self.out_channels],
                        &[n, self.out_channels, 1, 1],
                    )?)
                } else {
                    attention::spem_forward(
                        tape,
                        store,
                        h,
                        &inst.params,
                        inst.variant,
                        &inst.strategy,
                    )?
                };
                attention::recalibrate(tape, h, map)?
            }
        };

        // Identity skip, or 1x1 conv on the pre-activated input when the
        // block changes resolution or width.
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(tape, store, pre)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

#[derive(Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
    stem: ConvLayer,
    stages: Vec<Vec<Block>>,
    final_bn: BnLayer,
    fc_w: ParamId,
    fc_b: ParamId,
}

/// Build a network with deterministic, seed-driven initialization.
/// Attention parameters are initialized from constants and consume no
/// randomness, so configurations differing only in attention draw
/// identical backbone weights for the same seed.
pub fn build(config: NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));

    let stem = ConvLayer::register(&mut store, "stem.w".into(), config.stage_widths[0], 3, 3, 1, 1, &mut rng);

    let mut stages = Vec::new();
    let mut in_c = config.stage_widths[0];
    for (s, &width) in config.stage_widths.iter().enumerate() {
        let out_c = width * EXPANSION;
        let mut blocks = Vec::new();
        for b in 0..config.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("stage{s}.block{b}");
            let bn1 = BnLayer::register(&mut store, &format!("{name}.bn1"), in_c);
            let conv1 = ConvLayer::register(&mut store, format!("{name}.conv1.w"), width, in_c, 1, 1, 0, &mut rng);
            let bn2 = BnLayer::register(&mut store, &format!("{name}.bn2"), width);
            let conv2 = ConvLayer::register(&mut store, format!("{name}.conv2.w"), width, width, 3, stride, 1, &mut rng);
            let bn3 = BnLayer::register(&mut store, &format!("{name}.bn3"), width);
            let conv3 = ConvLayer::register(&mut store, format!("{name}.conv3.w"), out_c, width, 1, 1, 0, &mut rng);
            let shortcut = if stride != 1 || in_c != out_c {
                Some(ConvLayer::register(
                    &mut store,
                    format!("{name}.shortcut.w"),
                    out_c,
                    in_c,
                    1,
                    stride,
                    0,
                    &mut rng,
                ))
            } else {
                None
            };
            let attention = match config.attention {
                AttentionKind::None => BlockAttention::None,
                AttentionKind::Se { reduction } => BlockAttention::Se(SeParams::register(
                    &mut store,
                    &format!("{name}.se"),
                    out_c,
                    reduction,
                    &mut rng,
                )?),
                AttentionKind::Spem { pooling, variant } => {
                    let params =
                        SpemParams::register(&mut store, &format!("{name}.spem"), out_c, variant);
                    let strategy = match pooling {
                        PoolingKind::Gap => PoolingStrategy::Gap,
                        PoolingKind::Fixed(c) => PoolingStrategy::fixed(c)?,
                        PoolingKind::Adaptive => PoolingStrategy::AdaptiveMix(params.mix),
                    };
                    BlockAttention::Spem(SpemInstance {
                        params,
                        strategy,
                        variant,
                        force_identity: false,
                    })
                }
            };
            blocks.push(Block {
                bn1,
                conv1,
                bn2,
                conv2,
                bn3,
                conv3,
                shortcut,
                attention,
                out_channels: out_c,
            });
            in_c = out_c;
        }
        stages.push(blocks);
    }

    let final_c = config.stage_widths[2] * EXPANSION;
    let final_bn = BnLayer::register(&mut store, "head.bn", final_c);
    let fc_w = store.register(
        "head.fc.w",
        kaiming_normal(&mut rng, final_c, final_c * config.num_classes),
        vec![final_c, config.num_classes],
        true,
        ParamGroup::Backbone,
    );
    let fc_b = store.register(
        "head.fc.b",
        vec![0.0; config.num_classes],
        vec![config.num_classes],
        true,
        ParamGroup::Backbone,
    );

    Ok(Network {
        config,
        store,
        stem,
        stages,
        final_bn,
        fc_w,
        fc_b,
    })
}

impl Network {
    /// Logits for a batch shaped (N, 3, 32, 32).
    pub fn forward(&mut self, tape: &mut Tape, batch: TensorId, train: bool) -> Result<TensorId> {
        let shape = tape.shape(batch).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != 32 || shape[3] != 32 {
            return Err(SpemError::shape(format!(
                "network wants (N,3,32,32) input, got {shape:?}"
            )));
        }
        let mut h = self.stem.forward(tape, &self.store, batch)?;
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                h = block.forward(tape, &self.store, h, train)?;
            }
        }
        h = self.final_bn.forward(tape, &self.store, h, train)?;
        h = tape.relu(h);
        let pooled = tape.global_avg_pool(h)?;
        let n = tape.shape(pooled)[0];
        let c = tape.shape(pooled)[1];
        let flat = tape.reshape(pooled, &[n, c])?;
        let w = tape.param(&self.store, self.fc_w);
        let b = tape.param(&self.store, self.fc_b);
        tape.linear(flat, w, b)
    }

    /// Exact trainable scalar count: (total, attention share).
    pub fn param_count(&self) -> (usize, usize) {
        self.store.count_by_group()
    }

    /// Totals keyed by top-level module (stem, stageN, head) and group.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for p in self.store.iter() {
            let key = p.name.split('.').next().unwrap_or("?").to_string();
            match rows.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.numel(),
                None => rows.push((key, p.numel())),
            }
        }
        rows
    }

    /// Mix coefficients of adaptive-pooled attention blocks, in network
    /// order. These are the pairs the loss penalty applies to.
    pub fn adaptive_mix_coefficients(&self) -> Vec<MixCoefficient> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for block in stage {
                if let BlockAttention::Spem(inst) = &block.attention {
                    if matches!(inst.strategy, PoolingStrategy::AdaptiveMix(_)) {
                        out.push(inst.params.mix);
                    }
                }
            }
        }
        out
    }

    /// Current lambda value per adaptive module, in network order.
    pub fn lambdas(&self) -> Result<Vec<f64>> {
        self.adaptive_mix_coefficients()
            .iter()
            .map(|m| m.lambda_value(&self.store))
            .collect()
    }

    /// Parameter ids of every attention block, for diagnostics.
    pub fn spem_param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for block in stage {
                if let BlockAttention::Spem(inst) = &block.attention {
                    out.extend(inst.params.all_ids());
                }
            }
        }
        out
    }

    /// Replace every attention map with ones (see [`SpemInstance`]).
    pub fn set_force_identity(&mut self, on: bool) {
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                if let BlockAttention::Spem(inst) = &mut block.attention {
                    inst.force_identity = on;
                }
            }
        }
    }

    /// Batch-norm running statistics in a stable order: (name, values).
    fn state_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, _) in stage.iter().enumerate() {
                for bn in ["bn1", "bn2", "bn3"] {
                    names.push(format!("stage{s}.block{b}.{bn}.running_mean"));
                    names.push(format!("stage{s}.block{b}.{bn}.running_var"));
                }
            }
        }
        names.push("head.bn.running_mean".into());
        names.push("head.bn.running_var".into());
        names
    }

    fn state_buffers(&self) -> Vec<&Vec<f64>> {
        let mut bufs = Vec::new();
        for stage in &self.stages {
            for block in stage {
                for bn in [&block.bn1, &block.bn2, &block.bn3] {
                    bufs.push(&bn.stats.running_mean);
                    bufs.push(&bn.stats.running_var);
                }
            }
        }
        bufs.push(&self.final_bn.stats.running_mean);
        bufs.push(&self.final_bn.stats.running_var);
        bufs
    }

    fn state_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut bufs = Vec::new();
        for stage in self.stages.iter_mut() {
            for block in stage.iter_mut() {
                for bn in [&mut block.bn1, &mut block.bn2, &mut block.bn3] {
                    bufs.push(&mut bn.stats.running_mean);
                    bufs.push(&mut bn.stats.running_var);
                }
            }
        }
        bufs.push(&mut self.final_bn.stats.running_mean);
        bufs.push(&mut self.final_bn.stats.running_var);
        bufs
    }
}

/// One standalone bottleneck block with attention, used by the gradient
/// checker to exercise conv + batch norm + attention in a single unit.
#[derive(Debug)]
pub struct BlockProbe {
    pub store: ParamStore,
    block: Block,
}

/// Build a block probe: `in_c` in/out channels, bottleneck `width`, and a
/// mix-pool attention module in its production configuration.
pub fn block_probe(in_c: usize, width: usize, stride: usize, seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xB10C));
    let out_c = in_c; // identity skip; the probe keeps resolution
    let name = "block";
    let bn1 = BnLayer::register(&mut store, &format!("{name}.bn1"), in_c);
    let conv1 = ConvLayer::register(&mut store, format!("{name}.conv1.w"), width, in_c, 1, 1, 0, &mut rng);
    let bn2 = BnLayer::register(&mut store, &format!("{name}.bn2"), width);
    let conv2 = ConvLayer::register(&mut store, format!("{name}.conv2.w"), width, width, 3, stride, 1, &mut rng);
    let bn3 = BnLayer::register(&mut store, &format!("{name}.bn3"), width);
    let conv3 = ConvLayer::register(&mut store, format!("{name}.conv3.w"), out_c, width, 1, 1, 0, &mut rng);
    let params = SpemParams::register(
        &mut store,
        &format!("{name}.spem"),
        out_c,
        ReweightVariant::SharedAddSigmoid,
    );
    // Nudge the attention affines off their constant-output init so the
    // probe exercises every gradient path.
    use rand::Rng as _;
    for id in params.all_ids() {
        let p = store.get_mut(id);
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let strategy = PoolingStrategy::AdaptiveMix(params.mix);
    let block = Block {
        bn1,
        conv1,
        bn2,
        conv2,
        bn3,
        conv3,
        shortcut: None,
        attention: BlockAttention::Spem(SpemInstance {
            params,
            strategy,
            variant: ReweightVariant::SharedAddSigmoid,
            force_identity: false,
        }),
        out_channels: out_c,
    };
    Ok(BlockProbe { store, block })
}

impl BlockProbe {
    /// Forward in train mode against an external parameter store that
    /// mirrors `self.store` (same registration order).
    pub fn forward_with(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId> {
        self.block.forward(tape, store, x, true)
    }
}

const CKPT_MAGIC: &str = "SPEMCKPT v1";

/// Write parameters and running statistics as a human-readable manifest
/// followed by raw little-endian f64 data. Round-trips bit-exactly.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(CKPT_MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "config {}\n",
        serde_json::to_string(&net.config).map_err(|e| SpemError::Format(e.to_string()))?
    ));
    let mut offset = 0usize;
    let mut blobs: Vec<&[f64]> = Vec::new();
    for p in net.store.iter() {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("param {} {} {offset}\n", p.name, dims.join(",")));
        offset += p.data.len() * 8;
        blobs.push(&p.data);
    }
    for (name, buf) in net.state_names().iter().zip(net.state_buffers()) {
        header.push_str(&format!("state {} {} {offset}\n", name, buf.len()));
        offset += buf.len() * 8;
        blobs.push(buf);
    }
    header.push_str("END\n");

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(offset);
    for blob in blobs {
        for v in blob {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Rebuild a network from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let raw = fs::read(path)?;
    let end_tag = b"END\n";
    let end = raw
        .windows(end_tag.len())
        .position(|w| w == end_tag)
        .ok_or_else(|| SpemError::Format("checkpoint missing END marker".into()))?;
    let header = std::str::from_utf8(&raw[..end])
        .map_err(|_| SpemError::Format("checkpoint header is not UTF-8".into()))?;
    let data = &raw[end + end_tag.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(SpemError::Format("not a checkpoint file".into()));
    }
    let config_line = lines
        .next()
        .and_then(|l| l.strip_prefix("config "))
        .ok_or_else(|| SpemError::Format("checkpoint missing config line".into()))?;
    let config: NetworkConfig = serde_json::from_str(config_line)
        .map_err(|e| SpemError::Format(format!("bad checkpoint config: {e}")))?;
    let mut net = build(config, 0)?;

    let read_block = |offset: usize, len: usize| -> Result<Vec<f64>> {
        let bytes = data
            .get(offset..offset + len * 8)
            .ok_or_else(|| SpemError::Format(format!("checkpoint truncated at byte {offset}")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let mut state_names = net.state_names();
    let mut state_values: Vec<Option<Vec<f64>>> = vec![None; state_names.len()];
    for line in lines {
        if line == "END" || line.is_empty() {
            break;
        }
        let mut parts = line.split(' ');
        let kind = parts.next().unwrap_or("");
        let name = parts
            .next()
            .ok_or_else(|| SpemError::Format(format!("bad manifest line '{line}'")))?;
        let shape_s = parts
            .next()
            .ok_or_else(|| SpemError::Format(format!("bad manifest line '{line}'")))?;
        let offset: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SpemError::Format(format!("bad offset in '{line}'")))?;
        match kind {
            "param" => {
                let id = net.store.find(name).map_err(|_| {
                    SpemError::Format(format!("checkpoint names unknown parameter {name}"))
                })?;
                let shape: Vec<usize> = shape_s
                    .split(',')
                    .map(|d| d.parse().map_err(|_| SpemError::Format(format!("bad shape in '{line}'"))))
                    .collect::<Result<_>>()?;
                if shape != net.store.get(id).shape {
                    return Err(SpemError::Format(format!(
                        "shape of {name} is {:?} in checkpoint but {:?} in model",
                        shape,
                        net.store.get(id).shape
                    )));
                }
                let values = read_block(offset, net.store.get(id).numel())?;
                net.store.get_mut(id).data = values;
            }
            "state" => {
                let idx = state_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| SpemError::Format(format!("unknown state buffer {name}")))?;
                let len: usize = shape_s
                    .parse()
                    .map_err(|_| SpemError::Format(format!("bad length in '{line}'")))?;
                state_values[idx] = Some(read_block(offset, len)?);
                state_names[idx].push('\0'); // consume the slot on duplicates
            }
            other => {
                return Err(SpemError::Format(format!(
                    "unknown manifest entry kind '{other}'"
                )))
            }
        }
    }
    for (buf, val) in net.state_buffers_mut().into_iter().zip(state_values) {
        if let Some(v) = val {
            if v.len() != buf.len() {
                return Err(SpemError::Format("state buffer length mismatch".into()));
            }
            *buf = v;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::TestRng;

    fn spem_adaptive() -> AttentionKind {
        AttentionKind::Spem {
            pooling: PoolingKind::Adaptive,
            variant: ReweightVariant::SharedAddSigmoid,
        }
    }

    #[test]
    fn resnet164_parameter_counts_match_published_sizes() {
        let plain = build(NetworkConfig::new(18, 10, AttentionKind::None), 0).unwrap();
        let (total, attn) = plain.param_count();
        assert_eq!(total, 1_703_258);
        assert_eq!(attn, 0);

        let c100 = build(NetworkConfig::new(18, 100, AttentionKind::None), 0).unwrap();
        assert_eq!(c100.param_count().0, 1_726_388);
        assert_eq!(c100.param_count().0 - total, 23_130);

        let spem = build(NetworkConfig::new(18, 10, spem_adaptive()), 0).unwrap();
        let (stotal, sattn) = spem.param_count();
        assert_eq!(sattn, 32_364);
        assert_eq!(stotal, 1_703_258 + 32_364);

        let se = build(
            NetworkConfig::new(18, 10, AttentionKind::Se { reduction: 16 }),
            0,
        )
        .unwrap();
        assert_eq!(se.param_count().1, 202_104);
    }

    #[test]
    fn backbone_count_is_affine_in_depth() {
        let count = |n| {
            build(NetworkConfig::new(n, 10, AttentionKind::None), 0)
                .unwrap()
                .param_count()
                .0 as i64
        };
        let (p1, p2, p3) = (count(1), count(2), count(4));
        let slope = p2 - p1;
        assert_eq!(p3, p1 + 3 * slope);
        // ResNet83 = n=9 rounds to the published 0.87M.
        let p9 = count(9);
        assert_eq!((p9 as f64 / 10_000.0).round() / 100.0, 0.87);
    }

    #[test]
    fn unshared_reweight_adds_two_vectors_per_block() {
        let shared = build(NetworkConfig::new(2, 10, spem_adaptive()), 0).unwrap();
        let unshared = build(
            NetworkConfig::new(
                2,
                10,
                AttentionKind::Spem {
                    pooling: PoolingKind::Adaptive,
                    variant: ReweightVariant::UnsharedAddSigmoid,
                },
            ),
            0,
        )
        .unwrap();
        let per_block_extra: usize = [64, 128, 256].iter().map(|c| 2 * c * 2).sum();
        assert_eq!(
            unshared.param_count().1 - shared.param_count().1,
            per_block_extra
        );
    }

    #[test]
    fn toy_forward_shapes_and_determinism() {
        let mut net = build(NetworkConfig::new(1, 10, spem_adaptive()), 7).unwrap();
        let mut rng = TestRng::new(2);
        let batch = rng.uniform_vec(4 * 3 * 32 * 32, -1.0, 1.0);

        let mut tape = Tape::new();
        let x = tape.var(batch.clone(), &[4, 3, 32, 32]).unwrap();
        let logits = net.forward(&mut tape, x, false).unwrap();
        assert_eq!(tape.shape(logits), &[4, 10]);
        assert!(tape.data(logits).iter().all(|v| v.is_finite()));

        let mut tape2 = Tape::new();
        let x2 = tape2.var(batch, &[4, 3, 32, 32]).unwrap();
        let logits2 = net.forward(&mut tape2, x2, false).unwrap();
        assert_eq!(tape.data(logits), tape2.data(logits2));
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let mut net = build(NetworkConfig::new(1, 10, AttentionKind::None), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.var(vec![0.0; 3 * 16 * 16], &[1, 3, 16, 16]).unwrap();
        assert!(net.forward(&mut tape, x, false).is_err());
    }

    #[test]
    fn forced_identity_matches_attention_free_network() {
        let seed = 99;
        let mut plain = build(NetworkConfig::new(1, 10, AttentionKind::None), seed).unwrap();
        let mut forced = build(NetworkConfig::new(1, 10, spem_adaptive()), seed).unwrap();
        forced.set_force_identity(true);

        let mut rng = TestRng::new(4);
        let batch = rng.uniform_vec(2 * 3 * 32 * 32, -1.0, 1.0);
        let mut t1 = Tape::new();
        let x1 = t1.var(batch.clone(), &[2, 3, 32, 32]).unwrap();
        let l1 = plain.forward(&mut t1, x1, false).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.var(batch, &[2, 3, 32, 32]).unwrap();
        let l2 = forced.forward(&mut t2, x2, false).unwrap();
        assert_eq!(t1.data(l1), t2.data(l2));
    }

    #[test]
    fn gradient_reaches_every_attention_parameter() {
        use crate::training::{total_loss, LossConfig};
        let mut net = build(NetworkConfig::new(1, 10, spem_adaptive()), 3).unwrap();
        let mut rng = TestRng::new(8);
        let batch = rng.uniform_vec(2 * 3 * 32 * 32, -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.var(batch, &[2, 3, 32, 32]).unwrap();
        let logits = net.forward(&mut tape, x, true).unwrap();
        let mixes = net.adaptive_mix_coefficients();
        let loss = total_loss(
            &mut tape,
            &net.store,
            logits,
            &[3, 7],
            &mixes,
            &LossConfig::default(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut net.store);
        for id in net.spem_param_ids() {
            let p = net.store.get(id);
            let g = p.grad.as_ref().unwrap_or_else(|| panic!("no grad for {}", p.name));
            assert!(
                g.iter().any(|&v| v != 0.0),
                "gradient identically zero for {}",
                p.name
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = build(NetworkConfig::new(1, 10, spem_adaptive()), 5).unwrap();
        // Touch the running stats so they are not at defaults.
        let mut rng = TestRng::new(6);
        let batch = rng.uniform_vec(2 * 3 * 32 * 32, -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.var(batch.clone(), &[2, 3, 32, 32]).unwrap();
        net.forward(&mut tape, x, true).unwrap();

        save_checkpoint(&net, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        for (a, b) in net.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        for (a, b) in net.state_buffers().iter().zip(loaded.state_buffers().iter()) {
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        // And the loaded model computes the same function.
        let mut t1 = Tape::new();
        let x1 = t1.var(batch.clone(), &[2, 3, 32, 32]).unwrap();
        let l1 = net.forward(&mut t1, x1, false).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.var(batch, &[2, 3, 32, 32]).unwrap();
        let l2 = loaded.forward(&mut t2, x2, false).unwrap();
        assert_eq!(t1.data(l1), t2.data(l2));

        // A second save of the loaded model reproduces the file bytes.
        let path2 = dir.path().join("net2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(build(NetworkConfig::new(0, 10, AttentionKind::None), 0).is_err());
        let mut cfg = NetworkConfig::new(1, 10, AttentionKind::None);
        cfg.stage_widths = [16, 0, 64];
        assert!(build(cfg, 0).is_err());
        assert!(build(NetworkConfig::new(1, 1, AttentionKind::None), 0).is_err());
    }
}
