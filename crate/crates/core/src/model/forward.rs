use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::FEATURE_SIDE;
use super::store::bn_buffers;
use super::RocNet;
use crate::error::{dim_err, Error, Result};
use crate::octree::NodeType;
use crate::tensor::{BnStats, Real, Tape, Tensor, Var};
use crate::voxel::VoxelGrid;

pub const BN_EPS: f64 = 1e-5;
pub const DROPOUT_RATE: f64 = 0.5;

/// Batch statistics recorded per batch-norm layer during one forward pass.
pub type BnRecord<T> = BTreeMap<String, (Vec<T>, Vec<T>)>;

/// How batch-norm layers pick their statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'r, T> {
    /// Statistics of the current grouped call; recorded for running averages.
    Train,
    /// Running statistics stored with the parameters.
    Eval,
    /// Statistics recorded by an earlier pass, looked up by layer name.
    Replay(&'r BnRecord<T>),
}

/// Work done by a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Mixed leaf blocks passed through the leaf encoder.
    pub leaf_encodes: usize,
    /// Interior nodes merged by a node encoder.
    pub node_encodes: usize,
    /// Convolutions run over voxel payloads.
    pub voxel_convs: usize,
    pub leaf_decodes: usize,
    pub node_decodes: usize,
}

/// One forward (and optionally backward) pass over a model.
pub struct Forward<'a, T: Real> {
    pub tape: Tape<T>,
    pub(crate) net: &'a RocNet<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    mode: BnMode<'a, T>,
    dropout: Option<ChaCha8Rng>,
    pub bn_record: BnRecord<T>,
    pub counters: Counters,
}

impl<'a, T: Real> Forward<'a, T> {
    /// `trainable` binds parameters as gradient-receiving leaves.
    pub fn new(net: &'a RocNet<T>, mode: BnMode<'a, T>, trainable: bool) -> Self {
        Forward {
            tape: Tape::new(),
            net,
            bound: BTreeMap::new(),
            trainable,
            mode,
            dropout: None,
            bn_record: BTreeMap::new(),
            counters: Counters::default(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(net: &'a RocNet<T>, tape: Tape<T>, mode: BnMode<'a, T>, trainable: bool) -> Self {
        Forward { tape, ..Forward::new(net, mode, trainable) }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Uses `var` (already on this tape) wherever parameter `name` is read.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let expected = self.net.params.get(name)?.shape();
        if self.tape.shape(var) != expected {
            return dim_err(format!("binding {name} with shape {:?}, expected {expected:?}", self.tape.shape(var)));
        }
        self.bound.insert(name.to_string(), var);
        Ok(())
    }

    /// Enables dropout in the classification head, seeded for reproducibility.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.net.params.get(name)?.clone();
        let v = if self.trainable { self.tape.parameter(value)? } else { self.tape.constant(value)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched so far, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Takes the accumulated gradient of every bound parameter that backward reached.
    pub fn take_gradients(&mut self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if let Some(g) = self.tape.take_grad(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv3d(x, w, b, stride, padding)
    }

    fn conv_t(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv_transpose3d(x, w, b, stride, padding)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, BnStats::Batch, BN_EPS)?;
                if let Some(s) = stats {
                    self.bn_record.insert(prefix.to_string(), s);
                }
                Ok(y)
            }
            BnMode::Eval => {
                let (mean, var) = bn_buffers(prefix);
                let store = &self.net.params;
                let stats = BnStats::Fixed { mean: store.buffer(&mean)?.data(), var: store.buffer(&var)?.data() };
                Ok(self.tape.batch_norm(x, gamma, beta, stats, BN_EPS)?.0)
            }
            BnMode::Replay(record) => {
                let (mean, var) = record
                    .get(prefix)
                    .ok_or_else(|| Error::InvalidArgument(format!("no recorded statistics for {prefix}")))?;
                Ok(self.tape.batch_norm(x, gamma, beta, BnStats::Fixed { mean, var }, BN_EPS)?.0)
            }
        }
    }

    fn conv_bn_elu(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let y = self.conv(x, &format!("{prefix}.conv"), stride, padding)?;
        let y = self.bn(y, &format!("{prefix}.bn"))?;
        self.tape.elu(y)
    }

    fn check_feature(&self, x: Var, what: &str) -> Result<usize> {
        let s = self.tape.shape(x);
        let f = self.net.config.feature_channels;
        if s.len() != 5 || s[1..] != [f, FEATURE_SIDE, FEATURE_SIDE, FEATURE_SIDE] {
            return dim_err(format!("{what} expects [B, {f}, 4, 4, 4], got {s:?}"));
        }
        Ok(s[0])
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.net.config.levels() {
            return Err(Error::InvalidArgument(format!("level {level} outside 1..={}", self.net.config.levels())));
        }
        Ok(())
    }

    /// Encodes mixed leaf blocks into a `[B, 64, 4, 4, 4]` feature batch.
    pub fn leaf_encode(&mut self, blocks: &[&VoxelGrid]) -> Result<Var> {
        let k = self.net.config.leaf_side;
        if blocks.is_empty() {
            return Err(Error::EmptyInput("leaf_encode of no blocks".into()));
        }
        let mut data = Vec::with_capacity(blocks.len() * k * k * k);
        for b in blocks {
            if b.side() != k {
                return dim_err(format!("leaf block side {} != leaf side {k}", b.side()));
            }
            data.extend((0..b.voxel_count()).map(|i| if b.get_index(i) { T::one() } else { T::zero() }));
        }
        let mut x = self.tape.constant(Tensor::new(vec![blocks.len(), 1, k, k, k], data)?)?;
        for (i, st) in self.net.config.leaf_encoder_stages().iter().enumerate() {
            x = self.conv_bn_elu(x, &format!("leaf_enc.{i}"), st.stride, st.padding)?;
            self.counters.voxel_convs += 1;
        }
        self.counters.leaf_encodes += blocks.len();
        Ok(x)
    }

    /// Learnable `[1, 64, 4, 4, 4]` feature shared by every empty or full leaf.
    pub fn constant_leaf_feature(&mut self, kind: NodeType) -> Result<Var> {
        match kind {
            NodeType::EmptyLeaf => self.param("leaf_const.empty"),
            NodeType::FullLeaf => self.param("leaf_const.full"),
            other => Err(Error::InvalidArgument(format!("no constant feature for {other:?}"))),
        }
    }

    /// Merges eight child feature batches (one per octant) into parent features.
    pub fn node_encode(&mut self, children: &[Var], level: usize) -> Result<Var> {
        if children.len() != 8 {
            return Err(Error::InvalidArgument(format!("node_encode needs 8 children, got {}", children.len())));
        }
        self.check_level(level)?;
        let batch = self.check_feature(children[0], "node_encode")?;
        let mut lifted = Vec::with_capacity(8);
        for (slot, &c) in children.iter().enumerate() {
            if self.check_feature(c, "node_encode")? != batch {
                return dim_err("node_encode children have different batch sizes");
            }
            lifted.push(self.conv_bn_elu(c, &format!("node_enc.{level}.phi{slot}"), 1, 0)?);
        }
        let sum = self.tape.add_n(&lifted)?;
        self.counters.node_encodes += batch;
        self.conv_bn_elu(sum, &format!("node_enc.{level}.psi"), 1, 0)
    }

    /// Root features to `[B, d]` latent codes.
    pub fn tree_encode(&mut self, root: Var) -> Result<Var> {
        let batch = self.check_feature(root, "tree_encode")?;
        let y = self.conv(root, "tree_enc.conv", 1, 0)?;
        self.tape.reshape(y, &[batch, self.net.config.latent_dim])
    }

    /// `[B, d]` latent codes to root features.
    pub fn tree_decode(&mut self, codes: Var) -> Result<Var> {
        let s = self.tape.shape(codes).to_vec();
        let d = self.net.config.latent_dim;
        if s.len() != 2 || s[1] != d {
            return dim_err(format!("tree_decode expects [B, {d}], got {s:?}"));
        }
        let x = self.tape.reshape(codes, &[s[0], d, 1, 1, 1])?;
        let y = self.conv_t(x, "tree_dec.conv", 1, 0)?;
        self.tape.elu(y)
    }

    /// Expands parent features into eight child feature batches.
    pub fn node_decode(&mut self, parent: Var, level: usize) -> Result<[Var; 8]> {
        self.check_level(level)?;
        let batch = self.check_feature(parent, "node_decode")?;
        let lifted = self.conv_bn_elu(parent, &format!("node_dec.{level}.lift"), 1, 0)?;
        let mut out = [lifted; 8];
        for (slot, o) in out.iter_mut().enumerate() {
            *o = self.conv_bn_elu(lifted, &format!("node_dec.{level}.child{slot}"), 1, 0)?;
        }
        self.counters.node_decodes += batch;
        Ok(out)
    }

    /// Features to `[B, 1, k, k, k]` occupancy probabilities.
    pub fn leaf_decode(&mut self, x: Var) -> Result<Var> {
        let batch = self.check_feature(x, "leaf_decode")?;
        let stages = self.net.config.leaf_decoder_stages();
        let mut y = x;
        for (i, st) in stages.iter().enumerate() {
            y = self.conv_t(y, &format!("leaf_dec.{i}.conv"), st.stride, st.padding)?;
            if i + 1 < stages.len() {
                y = self.bn(y, &format!("leaf_dec.{i}.bn"))?;
                y = self.tape.elu(y)?;
            }
        }
        self.counters.leaf_decodes += batch;
        self.tape.sigmoid(y)
    }

    /// `[B, 4]` node-type logits in [`NodeType`] code order.
    pub fn classify_node(&mut self, x: Var) -> Result<Var> {
        let batch = self.check_feature(x, "classify_node")?;
        let y = self.conv(x, "node_cls.conv", 1, 0)?;
        let y = self.tape.elu(y)?;
        let y = self.tape.reshape(y, &[batch, self.net.config.latent_dim])?;
        let w = self.param("node_cls.fc.weight")?;
        let b = self.param("node_cls.fc.bias")?;
        self.tape.linear(y, w, b)
    }

    /// `[B, d]` codes to `[B, n_classes]` logits. Dropout applies only when enabled.
    pub fn classification_head(&mut self, codes: Var) -> Result<Var> {
        if self.net.config.n_classes == 0 {
            return Err(Error::InvalidArgument("model has no classification head".into()));
        }
        let mut x = codes;
        if let Some(rng) = self.dropout.as_mut() {
            let keep = T::lit(1.0 / (1.0 - DROPOUT_RATE));
            let mask = (0..self.tape.value(codes).len())
                .map(|_| if rng.gen::<f64>() < DROPOUT_RATE { T::zero() } else { keep })
                .collect();
            x = self.tape.dropout(codes, mask)?;
        }
        let w = self.param("head.fc.weight")?;
        let b = self.param("head.fc.bias")?;
        self.tape.linear(x, w, b)
    }
}
