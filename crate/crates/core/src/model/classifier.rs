//! Shared convolutional trunk followed by one linear head per task. Logits of
//! all heads are concatenated in task order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::layers::{BatchNorm, BnStats, Conv, Linear};
use crate::model::{bind, digest_tensors, Mode, ParamCursor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainBlock {
    pub out_channels: usize,
    /// 2×2 average pooling after the activation.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResStage {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrunkArch {
    /// conv3×3 → BN → ReLU (→ avg-pool) blocks.
    Plain { blocks: Vec<PlainBlock> },
    /// CIFAR-style ResNet with basic blocks and a 3×3 stem.
    Resnet { stem_channels: usize, stages: Vec<ResStage> },
}

/// Architecture descriptor: input shape plus trunk layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub trunk: TrunkArch,
}

impl ArchSpec {
    /// Four conv blocks for 8×8 (or larger) inputs.
    pub fn desk(channels: usize, side: usize) -> Self {
        let b = |out_channels, pool| PlainBlock { out_channels, pool };
        Self {
            input: [channels, side, side],
            trunk: TrunkArch::Plain {
                blocks: vec![b(16, false), b(32, true), b(32, true), b(64, false)],
            },
        }
    }

    /// One conv block; used for gradient checks.
    pub fn tiny(channels: usize, side: usize) -> Self {
        Self {
            input: [channels, side, side],
            trunk: TrunkArch::Plain {
                blocks: vec![PlainBlock { out_channels: 4, pool: true }],
            },
        }
    }

    pub fn resnet18(channels: usize, side: usize) -> Self {
        Self::resnet(channels, side, [2, 2, 2, 2])
    }

    pub fn resnet34(channels: usize, side: usize) -> Self {
        Self::resnet(channels, side, [3, 4, 6, 3])
    }

    fn resnet(channels: usize, side: usize, depth: [usize; 4]) -> Self {
        let widths = [64, 128, 256, 512];
        let stages = depth
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (&blocks, channels))| ResStage {
                channels,
                blocks,
                stride: if i == 0 { 1 } else { 2 },
            })
            .collect();
        Self {
            input: [channels, side, side],
            trunk: TrunkArch::Resnet { stem_channels: 64, stages },
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.trunk {
            TrunkArch::Plain { blocks } => blocks.last().map_or(self.input[0], |b| b.out_channels),
            TrunkArch::Resnet { stem_channels, stages } => {
                stages.last().map_or(*stem_channels, |s| s.channels)
            }
        }
    }

    pub fn bn_layer_count(&self) -> usize {
        match &self.trunk {
            TrunkArch::Plain { blocks } => blocks.len(),
            TrunkArch::Resnet { stem_channels, stages } => {
                let mut count = 1;
                let mut cin = *stem_channels;
                for s in stages {
                    for b in 0..s.blocks {
                        let stride = if b == 0 { s.stride } else { 1 };
                        count += 2;
                        if stride != 1 || cin != s.channels {
                            count += 1;
                        }
                        cin = s.channels;
                    }
                }
                count
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Plain {
        conv: Conv,
        bn: BatchNorm,
        pool: bool,
    },
    Residual {
        conv1: Conv,
        bn1: BatchNorm,
        conv2: Conv,
        bn2: BatchNorm,
        shortcut: Option<(Conv, BatchNorm)>,
    },
}

impl Block {
    fn tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        match self {
            Block::Plain { conv, bn, .. } => {
                conv.tensors(out);
                bn.tensors(out);
            }
            Block::Residual { conv1, bn1, conv2, bn2, shortcut } => {
                conv1.tensors(out);
                bn1.tensors(out);
                conv2.tensors(out);
                bn2.tensors(out);
                if let Some((c, b)) = shortcut {
                    c.tensors(out);
                    b.tensors(out);
                }
            }
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>, buf: &mut Vec<&'a mut Tensor>) {
        match self {
            Block::Plain { conv, bn, .. } => {
                conv.tensors_mut(out);
                bn.tensors_mut(out, buf);
            }
            Block::Residual { conv1, bn1, conv2, bn2, shortcut } => {
                conv1.tensors_mut(out);
                bn1.tensors_mut(out, buf);
                conv2.tensors_mut(out);
                bn2.tensors_mut(out, buf);
                if let Some((c, b)) = shortcut {
                    c.tensors_mut(out);
                    b.tensors_mut(out, buf);
                }
            }
        }
    }

    fn bns(&self) -> Vec<&BatchNorm> {
        match self {
            Block::Plain { bn, .. } => vec![bn],
            Block::Residual { bn1, bn2, shortcut, .. } => {
                let mut v = vec![bn1, bn2];
                if let Some((_, b)) = shortcut {
                    v.push(b);
                }
                v
            }
        }
    }

    fn bns_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Block::Plain { bn, .. } => vec![bn],
            Block::Residual { bn1, bn2, shortcut, .. } => {
                let mut v = vec![bn1, bn2];
                if let Some((_, b)) = shortcut {
                    v.push(b);
                }
                v
            }
        }
    }
}

/// Forward pass results on a tape.
pub struct ClassifierOutput {
    /// `[n, total classes]`, heads in task order.
    pub logits: Var,
    /// Pooled trunk features `[n, feature_dim]`.
    pub features: Var,
    /// Input of every normalisation layer, in layer order.
    pub bn_inputs: Vec<Var>,
    /// Batch moments of every normalisation layer (train mode only).
    pub batch_stats: Vec<BnStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: ArchSpec,
    blocks: Vec<Block>,
    heads: Vec<Linear>,
}

struct BnTrace<'a> {
    mode: Mode,
    inputs: &'a mut Vec<Var>,
    stats: &'a mut Vec<BnStats>,
}

impl BnTrace<'_> {
    fn apply(&mut self, tape: &mut Tape, cur: &mut ParamCursor, bn: &BatchNorm, x: Var) -> Var {
        self.inputs.push(x);
        let (y, st) = bn.forward(tape, cur, x, self.mode);
        if let Some(st) = st {
            self.stats.push(st);
        }
        y
    }
}

impl Classifier {
    /// Builds a classifier with one head of width `first_head`.
    pub fn new(arch: ArchSpec, first_head: usize, seed: u64) -> Result<Self> {
        if first_head == 0 {
            return Err(Error::Config("head width must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut cin = arch.input[0];
        let mut side = arch.input[1];
        match &arch.trunk {
            TrunkArch::Plain { blocks: spec } => {
                for b in spec {
                    if b.pool {
                        if side % 2 != 0 {
                            return Err(Error::Config(format!(
                                "cannot pool odd spatial size {side}"
                            )));
                        }
                        side /= 2;
                    }
                    blocks.push(Block::Plain {
                        conv: Conv::new(cin, b.out_channels, 3, 1, 1, &mut rng),
                        bn: BatchNorm::new(b.out_channels),
                        pool: b.pool,
                    });
                    cin = b.out_channels;
                }
            }
            TrunkArch::Resnet { stem_channels, stages } => {
                blocks.push(Block::Plain {
                    conv: Conv::new(cin, *stem_channels, 3, 1, 1, &mut rng),
                    bn: BatchNorm::new(*stem_channels),
                    pool: false,
                });
                cin = *stem_channels;
                for s in stages {
                    for i in 0..s.blocks {
                        let stride = if i == 0 { s.stride } else { 1 };
                        let shortcut = (stride != 1 || cin != s.channels).then(|| {
                            (
                                Conv::new(cin, s.channels, 1, stride, 0, &mut rng),
                                BatchNorm::new(s.channels),
                            )
                        });
                        blocks.push(Block::Residual {
                            conv1: Conv::new(cin, s.channels, 3, stride, 1, &mut rng),
                            bn1: BatchNorm::new(s.channels),
                            conv2: Conv::new(s.channels, s.channels, 3, 1, 1, &mut rng),
                            bn2: BatchNorm::new(s.channels),
                            shortcut,
                        });
                        cin = s.channels;
                    }
                }
            }
        }
        let heads = vec![Linear::new(arch.feature_dim(), first_head, &mut rng)];
        Ok(Self { arch, blocks, heads })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.heads.iter().map(Linear::out_features).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(Linear::out_features).sum()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Appends a freshly initialised head of width `k_new`; existing
    /// parameters are untouched.
    pub fn expand_head(&mut self, k_new: usize, init_seed: u64) -> Result<()> {
        if k_new == 0 {
            return Err(Error::Config("new head width must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        self.heads.push(Linear::new(self.arch.feature_dim(), k_new, &mut rng));
        Ok(())
    }

    /// Trainable tensors in canonical order: trunk, then heads.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.tensors(&mut out);
        }
        for h in &self.heads {
            h.tensors(&mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        for b in &mut self.blocks {
            b.tensors_mut(&mut out, &mut buf);
        }
        for h in &mut self.heads {
            h.tensors_mut(&mut out);
        }
        out
    }

    /// Parameters followed by normalisation buffers; the full serialisable state.
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        let mut out = self.params();
        for b in &self.blocks {
            for bn in b.bns() {
                bn.buffers(&mut out);
            }
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        for b in &mut self.blocks {
            b.tensors_mut(&mut out, &mut buf);
        }
        for h in &mut self.heads {
            h.tensors_mut(&mut out);
        }
        out.extend(buf);
        out
    }

    pub fn digest(&self) -> String {
        digest_tensors(self.state_tensors())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        bind(tape, &self.params(), trainable)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(Error::Dimension(format!(
                "classifier expects [n, {}, {}, {}], got {:?}",
                self.arch.input[0], self.arch.input[1], self.arch.input[2], shape
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Dimension("empty image batch".into()));
        }
        Ok(())
    }

    /// Forward pass on a tape with parameters bound by [`Classifier::bind`].
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<ClassifierOutput> {
        self.check_input(tape.shape(x))?;
        if mode == Mode::Train && tape.shape(x)[0] < 2 {
            return Err(Error::DegenerateBatch(
                "train-mode batch statistics need at least 2 images".into(),
            ));
        }
        let mut cur = ParamCursor::new(params);
        let mut bn_inputs = Vec::new();
        let mut batch_stats = Vec::new();
        let mut trace = BnTrace { mode, inputs: &mut bn_inputs, stats: &mut batch_stats };
        let mut h = x;
        for block in &self.blocks {
            match block {
                Block::Plain { conv, bn, pool } => {
                    let c = conv.forward(tape, &mut cur, h);
                    let n = trace.apply(tape, &mut cur, bn, c);
                    h = tape.relu(n);
                    if *pool {
                        h = tape.avg_pool2(h);
                    }
                }
                Block::Residual { conv1, bn1, conv2, bn2, shortcut } => {
                    let c1 = conv1.forward(tape, &mut cur, h);
                    let n1 = trace.apply(tape, &mut cur, bn1, c1);
                    let a1 = tape.relu(n1);
                    let c2 = conv2.forward(tape, &mut cur, a1);
                    let n2 = trace.apply(tape, &mut cur, bn2, c2);
                    let skip = match shortcut {
                        Some((sc, sb)) => {
                            let s = sc.forward(tape, &mut cur, h);
                            trace.apply(tape, &mut cur, sb, s)
                        }
                        None => h,
                    };
                    let sum = tape.add(n2, skip);
                    h = tape.relu(sum);
                }
            }
        }
        let features = tape.global_avg_pool(h);
        let head_logits: Vec<Var> = self
            .heads
            .iter()
            .map(|head| head.forward(tape, &mut cur, features))
            .collect();
        cur.finish();
        let logits = if head_logits.len() == 1 {
            head_logits[0]
        } else {
            tape.concat_cols(&head_logits)
        };
        Ok(ClassifierOutput { logits, features, bn_inputs, batch_stats })
    }

    /// Eval-mode logits, computed in chunks.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images.shape())?;
        let n = images.rows();
        const CHUNK: usize = 256;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let x = tape.constant(images.select_rows(&idx));
            let out = self.forward_on(&mut tape, &params, x, Mode::Eval)?;
            parts.push(tape.value(out.logits).clone());
            start = end;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::cat_rows(&refs)
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn update_running_stats(&mut self, batch: &[BnStats]) {
        let mut it = batch.iter();
        for b in &mut self.blocks {
            for bn in b.bns_mut() {
                if let Some(st) = it.next() {
                    bn.update_running(st);
                }
            }
        }
    }

    /// Copies of the stored normalisation statistics, in layer order.
    pub fn extract_bn_stats(&self) -> Result<Vec<BnStats>> {
        let stats: Vec<BnStats> = self
            .blocks
            .iter()
            .flat_map(|b| b.bns().into_iter().map(BatchNorm::stats))
            .collect();
        if stats.is_empty() {
            return Err(Error::UnsupportedArchitecture(
                "trunk has no batch-normalisation layers".into(),
            ));
        }
        Ok(stats)
    }

    pub fn bn_momentum(&self) -> f64 {
        self.blocks
            .first()
            .and_then(|b| b.bns().first().map(|bn| bn.momentum))
            .unwrap_or(crate::model::layers::BN_MOMENTUM)
    }

    /// Rebuilds the structure for `arch` with the given head widths; values
    /// are placeholders to be overwritten through [`Classifier::state_tensors_mut`].
    pub fn skeleton(arch: ArchSpec, head_widths: &[usize]) -> Result<Self> {
        let first = *head_widths
            .first()
            .ok_or_else(|| Error::Config("classifier needs at least one head".into()))?;
        let mut c = Self::new(arch, first, 0)?;
        for &w in &head_widths[1..] {
            c.expand_head(w, 0)?;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn probe(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, 1, 8, 8], 1.0, &mut rng)
    }

    #[test]
    fn logits_width_is_sum_of_heads() {
        let mut c = Classifier::new(ArchSpec::desk(1, 8), 20, 1).unwrap();
        c.expand_head(20, 2).unwrap();
        let l = c.logits(&probe(3, 4)).unwrap();
        assert_eq!(l.shape(), &[4, 40]);
    }

    #[test]
    fn eval_mode_rows_depend_only_on_their_image() {
        let c = Classifier::new(ArchSpec::desk(1, 8), 5, 1).unwrap();
        let img = probe(4, 1);
        let twice = Tensor::cat_rows(&[&img, &img]).unwrap();
        let l = c.logits(&twice).unwrap();
        assert_eq!(l.row(0), l.row(1));
    }

    #[test]
    fn zero_weight_head_outputs_its_bias() {
        let mut c = Classifier::new(ArchSpec::desk(1, 8), 3, 1).unwrap();
        c.expand_head(2, 9).unwrap();
        let head = c.heads.last_mut().unwrap();
        head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        head.bias.data_mut().copy_from_slice(&[0.25, -1.5]);
        let l = c.logits(&probe(5, 6)).unwrap();
        for r in 0..6 {
            assert_eq!(&l.row(r)[3..], &[0.25, -1.5]);
        }
    }

    #[test]
    fn expand_preserves_old_columns_exactly() {
        let c = Classifier::new(ArchSpec::desk(1, 8), 20, 1).unwrap();
        let x = probe(6, 5);
        let before = c.logits(&x).unwrap();
        let before_digest = digest_tensors(c.state_tensors());
        let mut e = c.clone();
        e.expand_head(20, 11).unwrap();
        assert_eq!(e.head_widths(), vec![20, 20]);
        let after = e.logits(&x).unwrap();
        assert_eq!(after.slice_cols(0, 20), before);
        let old = c.params().len();
        assert_eq!(&e.params()[..old], &c.params()[..]);
        assert_eq!(before_digest, c.digest());
    }

    #[test]
    fn expansion_order_and_determinism() {
        let c = Classifier::new(ArchSpec::desk(1, 8), 20, 1).unwrap();
        let mut a = c.clone();
        a.expand_head(10, 3).unwrap();
        a.expand_head(10, 4).unwrap();
        assert_eq!(a.head_widths(), vec![20, 10, 10]);
        let mut b = c.clone();
        b.expand_head(10, 3).unwrap();
        b.expand_head(10, 4).unwrap();
        assert_eq!(a, b);
        assert!(c.clone().expand_head(0, 1).is_err());
    }

    #[test]
    fn input_shape_is_checked() {
        let c = Classifier::new(ArchSpec::desk(1, 8), 4, 1).unwrap();
        let bad = Tensor::zeros(&[2, 3, 8, 8]);
        assert!(matches!(c.logits(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn fresh_bn_stats_and_layer_count() {
        for arch in [ArchSpec::desk(1, 8), ArchSpec::resnet18(3, 8)] {
            let c = Classifier::new(arch.clone(), 4, 1).unwrap();
            let stats = c.extract_bn_stats().unwrap();
            assert_eq!(stats.len(), arch.bn_layer_count());
            for s in &stats {
                assert!(s.mean.iter().all(|&m| m == 0.0));
                assert!(s.var.iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn extracted_stats_are_copies() {
        let c = Classifier::new(ArchSpec::desk(1, 8), 4, 1).unwrap();
        let mut stats = c.extract_bn_stats().unwrap();
        stats[0].mean[0] = 42.0;
        assert_eq!(c.extract_bn_stats().unwrap()[0].mean[0], 0.0);
    }

    #[test]
    fn normalisation_free_trunk_is_unsupported() {
        let arch = ArchSpec { input: [1, 8, 8], trunk: TrunkArch::Plain { blocks: vec![] } };
        let c = Classifier::new(arch, 3, 1).unwrap();
        assert!(matches!(c.extract_bn_stats(), Err(Error::UnsupportedArchitecture(_))));
    }

    #[test]
    fn resnet_forward_shapes() {
        let arch = ArchSpec {
            input: [3, 8, 8],
            trunk: TrunkArch::Resnet {
                stem_channels: 4,
                stages: vec![
                    ResStage { channels: 4, blocks: 1, stride: 1 },
                    ResStage { channels: 8, blocks: 2, stride: 2 },
                ],
            },
        };
        let c = Classifier::new(arch.clone(), 5, 1).unwrap();
        assert_eq!(c.extract_bn_stats().unwrap().len(), arch.bn_layer_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        assert_eq!(c.logits(&x).unwrap().shape(), &[3, 5]);
    }
}
