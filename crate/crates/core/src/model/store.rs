use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, FEATURE_SIDE};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Decoder,
    /// Node classifier and shape classification head.
    Classifier,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub scope: Scope,
}

/// Named learnable tensors plus non-trainable batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        ParameterStore { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::InvalidArgument(format!("no buffer named {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no buffer named {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

pub(crate) fn bn_buffers(prefix: &str) -> (String, String) {
    (format!("{prefix}.running_mean"), format!("{prefix}.running_var"))
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
    bns: Vec<(String, usize)>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, scope: Scope) {
        self.specs.push(ParamSpec { name, shape, init, scope });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, scope: Scope) {
        self.add(format!("{prefix}.weight"), vec![cout, cin, k, k, k], Init::He(cin * k * k * k), scope);
        self.add(format!("{prefix}.bias"), vec![cout], Init::Zeros, scope);
    }

    fn conv_t(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, scope: Scope) {
        self.add(format!("{prefix}.weight"), vec![cin, cout, k, k, k], Init::He(cin * k * k * k), scope);
        self.add(format!("{prefix}.bias"), vec![cout], Init::Zeros, scope);
    }

    fn bn(&mut self, prefix: &str, c: usize, scope: Scope) {
        self.add(format!("{prefix}.gamma"), vec![c], Init::Ones, scope);
        self.add(format!("{prefix}.beta"), vec![c], Init::Zeros, scope);
        self.bns.push((prefix.to_string(), c));
    }

    fn linear(&mut self, prefix: &str, dout: usize, din: usize, scope: Scope) {
        self.add(format!("{prefix}.weight"), vec![dout, din], Init::He(din), scope);
        self.add(format!("{prefix}.bias"), vec![dout], Init::Zeros, scope);
    }
}

/// Every parameter of a model, in a fixed order, plus the batch-norm layers.
pub(crate) fn parameter_specs(cfg: &ModelConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    use Scope::*;
    let f = cfg.feature_channels;
    let m = cfg.merge_channels;
    let d = cfg.latent_dim;
    let s = FEATURE_SIDE;
    let mut b = SpecBuilder { specs: Vec::new(), bns: Vec::new() };

    for (i, st) in cfg.leaf_encoder_stages().iter().enumerate() {
        b.conv(&format!("leaf_enc.{i}.conv"), st.out_channels, st.in_channels, st.kernel, Encoder);
        b.bn(&format!("leaf_enc.{i}.bn"), st.out_channels, Encoder);
    }
    b.add("leaf_const.empty".into(), vec![1, f, s, s, s], Init::Zeros, Encoder);
    b.add("leaf_const.full".into(), vec![1, f, s, s, s], Init::He(f), Encoder);
    for level in 1..=cfg.levels() {
        for slot in 0..8 {
            b.conv(&format!("node_enc.{level}.phi{slot}.conv"), m, f, 1, Encoder);
            b.bn(&format!("node_enc.{level}.phi{slot}.bn"), m, Encoder);
        }
        b.conv(&format!("node_enc.{level}.psi.conv"), f, m, 1, Encoder);
        b.bn(&format!("node_enc.{level}.psi.bn"), f, Encoder);
    }
    b.conv("tree_enc.conv", d, f, s, Encoder);

    b.conv_t("tree_dec.conv", d, f, s, Decoder);
    for level in 1..=cfg.levels() {
        b.conv(&format!("node_dec.{level}.lift.conv"), m, f, 1, Decoder);
        b.bn(&format!("node_dec.{level}.lift.bn"), m, Decoder);
        for slot in 0..8 {
            b.conv(&format!("node_dec.{level}.child{slot}.conv"), f, m, 1, Decoder);
            b.bn(&format!("node_dec.{level}.child{slot}.bn"), f, Decoder);
        }
    }
    let dec = cfg.leaf_decoder_stages();
    for (i, st) in dec.iter().enumerate() {
        b.conv_t(&format!("leaf_dec.{i}.conv"), st.in_channels, st.out_channels, st.kernel, Decoder);
        if i + 1 < dec.len() {
            b.bn(&format!("leaf_dec.{i}.bn"), st.out_channels, Decoder);
        }
    }

    b.conv("node_cls.conv", d, f, s, Classifier);
    b.linear("node_cls.fc", 4, d, Classifier);
    if cfg.n_classes > 0 {
        b.linear("head.fc", cfg.n_classes, d, Classifier);
    }
    (b.specs, b.bns)
}

pub(crate) fn init_store<T: Real>(cfg: &ModelConfig, seed: u64) -> ParameterStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (specs, bns) = parameter_specs(cfg);
    let mut store = ParameterStore::default();
    for spec in specs {
        let len: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::He(fan_in) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
            }
        };
        store.insert(spec.name, Tensor::new(spec.shape, data).unwrap());
    }
    for (prefix, c) in bns {
        let (mean, var) = bn_buffers(&prefix);
        store.insert_buffer(mean, Tensor::zeros(&[c]));
        store.insert_buffer(var, Tensor::ones(&[c]));
    }
    store
}
