//! The recursive octree autoencoder: parameters, layers and tree-level passes.

mod config;
mod decode;
mod encode;
mod forward;
mod store;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub use config::{ConvStage, ModelConfig, FEATURE_SIDE};
pub use decode::{argmax_among, guarded_type, DecodeLoss, DecodeMode};
pub use encode::{check_trees, dynamic_batch_plan, BatchPlan, Source};
pub use forward::{BnMode, BnRecord, Counters, Forward, BN_EPS, DROPOUT_RATE};
pub use store::{ParameterStore, Scope};

use crate::error::{Error, Result};
use crate::octree::Octree;
use crate::tensor::{read_u32, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ROCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

/// A model configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RocNet<T> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
}

impl<T: Real> RocNet<T> {
    /// Fresh parameters: He-normal weights, zero biases, unit BN scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = store::init_store(&config, seed);
        Ok(RocNet { config, params })
    }

    /// Number of trainable scalars in `scope`. Running statistics are not counted.
    pub fn count_parameters(&self, scope: Scope) -> usize {
        count_parameters(&self.config, scope)
    }

    pub fn cast<U: Real>(&self) -> RocNet<U> {
        RocNet { config: self.config.clone(), params: self.params.cast() }
    }

    /// Inference-mode latent codes, one row of `latent_dim` values per tree.
    pub fn encode(&self, trees: &[&Octree]) -> Result<Vec<Vec<T>>> {
        let mut fwd = Forward::new(self, BnMode::Eval, false);
        let codes = fwd.encode_batch(trees)?;
        Ok(fwd.tape.value(codes).data().chunks(self.config.latent_dim).map(<[T]>::to_vec).collect())
    }

    /// Inference-mode decoding of latent codes.
    pub fn decode(&self, codes: &[Vec<T>], mode: DecodeMode, reference: Option<&[&Octree]>) -> Result<Vec<Octree>> {
        let d = self.config.latent_dim;
        if codes.is_empty() {
            return Err(Error::EmptyInput("no latent codes".into()));
        }
        if let Some(c) = codes.iter().find(|c| c.len() != d) {
            return Err(Error::Dimension(format!("latent of length {} for latent_dim {d}", c.len())));
        }
        if codes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent value".into()));
        }
        let mut fwd = Forward::new(self, BnMode::Eval, false);
        let flat: Vec<T> = codes.iter().flatten().copied().collect();
        let x = fwd.tape.constant(Tensor::new(vec![codes.len(), d], flat)?)?;
        fwd.decode_batch(x, mode, reference)
    }

    /// Inference-mode shape-class logits, one row per tree.
    pub fn classify(&self, trees: &[&Octree]) -> Result<Vec<Vec<T>>> {
        let mut fwd = Forward::new(self, BnMode::Eval, false);
        let codes = fwd.encode_batch(trees)?;
        let logits = fwd.classification_head(codes)?;
        Ok(fwd.tape.value(logits).data().chunks(self.config.n_classes).map(<[T]>::to_vec).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let c = &self.config;
        for v in [c.grid_side, c.leaf_side, c.feature_channels, c.merge_channels, c.latent_dim, c.n_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let entries: Vec<(&String, &Tensor<T>)> = self.params.params().chain(self.params.buffers()).collect();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_to(&mut out);
        }
        out
    }

    /// Reads a checkpoint, requiring every expected tensor with its expected shape.
    pub fn read_from(reader: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        reader.read_exact(&mut magic)?;
        if &magic[..6] != CHECKPOINT_MAGIC || magic[6] != CHECKPOINT_VERSION {
            return Err(Error::Format("not a version-1 checkpoint".into()));
        }
        let mut fields = [0usize; 6];
        for f in fields.iter_mut() {
            *f = read_u32(reader)? as usize;
        }
        let config = ModelConfig {
            grid_side: fields[0],
            leaf_side: fields[1],
            feature_channels: fields[2],
            merge_channels: fields[3],
            latent_dim: fields[4],
            n_classes: fields[5],
        };
        config.validate()?;
        let template = store::init_store::<T>(&config, 0);
        let count = read_u32(reader)? as usize;
        let mut net = RocNet { config, params: ParameterStore::default() };
        for _ in 0..count {
            let mut len = [0u8; 2];
            reader.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            reader.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let t = Tensor::<T>::read_from(reader)?;
            let expected = match (template.get(&name), template.buffer(&name)) {
                (Ok(e), _) | (_, Ok(e)) => e.shape(),
                _ => return Err(Error::Format(format!("unexpected tensor {name}"))),
            };
            if t.shape() != expected {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {expected:?}", t.shape())));
            }
            if template.get(&name).is_ok() {
                net.params.insert(name, t);
            } else {
                net.params.insert_buffer(name, t);
            }
        }
        for (name, _) in template.params().chain(template.buffers()) {
            if net.params.get(name).is_err() && net.params.buffer(name).is_err() {
                return Err(Error::Format(format!("checkpoint lacks tensor {name}")));
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Trainable scalars of a configuration in `scope`, without allocating the model.
pub fn count_parameters(config: &ModelConfig, scope: Scope) -> usize {
    store::parameter_specs(config)
        .0
        .iter()
        .filter(|s| scope == Scope::All || s.scope == scope)
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::NodeType;
    use crate::voxel::{synthetic, ShapeKind, VoxelGrid};

    fn tiny() -> RocNet<f32> {
        RocNet::new(ModelConfig::new(16, 4), 3).unwrap()
    }

    #[test]
    fn scope_partition_and_growth() {
        let cfg = ModelConfig { n_classes: 3, ..ModelConfig::new(32, 8) };
        let parts: usize =
            [Scope::Encoder, Scope::Decoder, Scope::Classifier].iter().map(|&s| count_parameters(&cfg, s)).sum();
        assert_eq!(parts, count_parameters(&cfg, Scope::All));
        let enc: Vec<usize> =
            [64, 128, 256].iter().map(|&n| count_parameters(&ModelConfig::new(n, 32), Scope::Encoder)).collect();
        assert_eq!(enc[1] - enc[0], enc[2] - enc[1]);
    }

    #[test]
    fn fresh_empty_feature_is_zero() {
        let net = tiny();
        assert!(net.params.get("leaf_const.empty").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(net.params.get("leaf_const.full").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = tiny();
        let bytes = net.to_bytes();
        let back = RocNet::<f32>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RocNet::<f32>::read_from(&mut bad.as_slice()).is_err());
        assert!(RocNet::<f32>::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn empty_tree_skips_voxel_convolutions() {
        let net = tiny();
        let tree = Octree::build(&VoxelGrid::empty(16).unwrap(), 4).unwrap();
        let mut fwd = Forward::new(&net, BnMode::Eval, false);
        let code = fwd.encode_tree(&tree).unwrap();
        assert_eq!(fwd.tape.shape(code), &[1, 80]);
        assert_eq!(fwd.counters.voxel_convs, 0);
        assert_eq!(fwd.counters.node_encodes, 0);
    }

    #[test]
    fn encode_counts_match_tree() {
        let net = tiny();
        let tree = Octree::build(&synthetic(ShapeKind::Sphere, 16, 1).unwrap(), 4).unwrap();
        for batched in [false, true] {
            let mut fwd = Forward::new(&net, BnMode::Eval, false);
            if batched {
                fwd.encode_batch(&[&tree]).unwrap();
            } else {
                fwd.encode_tree(&tree).unwrap();
            }
            assert_eq!(fwd.counters.leaf_encodes, tree.count(NodeType::MixedLeaf));
            assert_eq!(fwd.counters.node_encodes, tree.count(NodeType::Interior));
        }
    }

    #[test]
    fn known_mode_keeps_topology() {
        let net = tiny();
        let tree = Octree::build(&synthetic(ShapeKind::Torus, 16, 2).unwrap(), 4).unwrap();
        let codes = net.encode(&[&tree]).unwrap();
        let out = net.decode(&codes, DecodeMode::Known, Some(&[&tree])).unwrap();
        assert_eq!(out[0].topology(), tree.topology());
        assert!(net.decode(&codes, DecodeMode::Known, None).is_err());
        let pred = net.decode(&codes, DecodeMode::Predicted, None).unwrap();
        let mut deepest = 0;
        pred[0].visit_pre(|n| deepest = deepest.max(n.depth));
        assert!(deepest <= 2);
    }

    #[test]
    fn depth_guard() {
        let l = [0.0f32, 1.0, 2.0, 3.0];
        assert_eq!(guarded_type(&l, 2, 2), NodeType::MixedLeaf);
        let l = [0.0f32, 1.0, 9.0, 3.0];
        assert_eq!(guarded_type(&l, 0, 2), NodeType::Interior);
        let l = [5.0f32, 1.0, 9.0, 3.0];
        assert_eq!(guarded_type(&l, 1, 2), NodeType::EmptyLeaf);
    }
}
