use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Subject to decoupled weight decay. Biases, norms, scales and the
    /// register token are exempt.
    pub decay: bool,
}

/// Every parameter of the model, in a fixed registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    config: ModelConfig,
    params: IndexMap<String, Param<T>>,
}

enum Init {
    Zeros,
    Ones,
    Const(Vec<f64>),
    Normal(f64),
}

struct Builder {
    rng: ChaCha8Rng,
    params: IndexMap<String, Param<f64>>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init, decay: bool) {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::from_fn(shape, |_| 1.0),
            Init::Const(v) => Tensor::new(shape.to_vec(), v).expect("constant init matches shape"),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| d.sample(&mut self.rng))
            }
        };
        self.params.insert(name, Param { value: t, decay });
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        self.add(format!("{name}.w"), &[fan_in, fan_out], Init::Normal(std), true);
        self.add(format!("{name}.b"), &[fan_out], Init::Zeros, false);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.g"), &[c], Init::Ones, false);
        self.add(format!("{name}.b"), &[c], Init::Zeros, false);
    }

    fn attention(&mut self, name: &str, c: usize, head_dim: usize, out_gain: f64) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), c, c, 1.0);
        }
        self.linear(&format!("{name}.o"), c, c, out_gain);
        let tau = (head_dim as f64).sqrt();
        self.add(format!("{name}.tau"), &[1], Init::Const(vec![tau]), false);
    }

    fn mlp(&mut self, name: &str, c: usize, hidden: usize, out_gain: f64) {
        self.linear(&format!("{name}.fc1"), c, hidden, 1.0);
        self.linear(&format!("{name}.fc2"), hidden, c, out_gain);
    }
}

impl ParamStore<f64> {
    /// Deterministic initialization from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let p = config.patch_size;
        let hd = config.head_dim();
        let hidden = c * config.mlp_ratio;
        let residual_gain = 1.0 / ((2 * (config.encoder_depth + config.decoder_depth)) as f64).sqrt();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: IndexMap::new(),
        };
        b.linear("patch_embed", p * p * 3, c, 1.0);
        for i in 0..config.encoder_depth {
            b.norm(&format!("enc.{i}.ln1"), c);
            b.attention(&format!("enc.{i}.attn"), c, hd, residual_gain);
            b.norm(&format!("enc.{i}.ln2"), c);
            b.mlp(&format!("enc.{i}.mlp"), c, hidden, residual_gain);
        }
        b.norm("enc.norm", c);
        b.add("reg".into(), &[c], Init::Normal(0.1), false);
        for i in 0..config.decoder_depth {
            b.norm(&format!("dec.{i}.ln1"), c);
            b.attention(&format!("dec.{i}.self"), c, hd, residual_gain);
            b.norm(&format!("dec.{i}.ln2"), c);
            b.norm(&format!("dec.{i}.ln_ctx"), c);
            b.attention(&format!("dec.{i}.cross"), c, hd, residual_gain);
            b.norm(&format!("dec.{i}.ln3"), c);
            b.mlp(&format!("dec.{i}.mlp"), c, hidden, residual_gain);
        }
        let per_patch = p * p * 4;
        let hh = config.head_hidden;
        for kind in ["head_local", "head_global"] {
            b.linear(&format!("{kind}.mid"), c, per_patch, 0.5);
            b.add(
                format!("{kind}.top.w"),
                &[c, per_patch],
                Init::Normal(0.5 / (c as f64).sqrt()),
                true,
            );
            b.linear(&format!("{kind}.conv1"), 9 * 4, hh, 1.0);
            b.linear(&format!("{kind}.conv2"), 9 * hh, 4, 0.1);
        }
        b.linear("head_pose.fc1", c, c, 1.0);
        b.add(
            "head_pose.fc2.w".into(),
            &[c, 9],
            Init::Normal(0.1 / (c as f64).sqrt()),
            true,
        );
        let mut bias = vec![0.0; 9];
        bias[0] = 1.0;
        b.add("head_pose.fc2.b".into(), &[9], Init::Const(bias), false);
        Ok(ParamStore {
            config: config.clone(),
            params: b.params,
        })
    }
}

impl<T: Real> ParamStore<T> {
    /// Reassembles a store from named tensors, checking names and shapes
    /// against a fresh initialization of `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = ParamStore::init(config, 0)?;
        if named.len() != template.len() {
            return Err(Error::Consistency(format!(
                "expected {} parameters, found {}",
                template.len(),
                named.len()
            )));
        }
        let mut params = IndexMap::with_capacity(named.len());
        for ((name, value), (tname, tparam)) in named.into_iter().zip(template.iter()) {
            if name != tname || value.shape() != tparam.value.shape() {
                return Err(Error::Consistency(format!(
                    "parameter {name} {:?} does not match {tname} {:?}",
                    value.shape(),
                    tparam.value.shape()
                )));
            }
            params.insert(
                name,
                Param {
                    value,
                    decay: tparam.decay,
                },
            );
        }
        Ok(ParamStore {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.params.values().map(|p| &p.value).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.values_mut().map(|p| &mut p.value).collect()
    }

    pub fn decay_flags(&self) -> Vec<bool> {
        self.params.values().map(|p| p.decay).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }
}
