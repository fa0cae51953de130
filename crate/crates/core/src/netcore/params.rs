//! Named parameter tensors of the student, the teacher projector, and their
//! binding into a [`Graph`].
//!
//! Naming scheme:
//!
//! - `tokemb` `[A][d_model]`: token embeddings, also the VQ codebook
//! - `dec.*`: start token, positions `[L][d]`, layers `dec.l{i}.{ln1,self,ln2,cross,ln3,mlp}`,
//!   final norm `dec.lnf`, output head `dec.head`
//! - `enc.*`: summary token, positions `[L][d]`, layers `enc.l{i}.{ln1,attn,ln2,mlp}`,
//!   final norm `enc.lnf`, adapter `enc.out` into the teacher feature space
//! - `proj_s.*`, `proj_t.*`: student and teacher heads with identical shapes

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, MLP_RATIO};
use crate::autograd::{Graph, Var};
use crate::error::{shape, Result};
use crate::tensor::{Scalar, Tensor};

pub const STUDENT_HEAD: &str = "proj_s";
pub const TEACHER_HEAD: &str = "proj_t";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    vq_head: bool,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Truncated normal (σ, cut at ±2σ).
fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

struct Builder<'r, R> {
    rng: &'r mut R,
    out: BTreeMap<String, Tensor<f64>>,
}

impl<R: Rng> Builder<'_, R> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) {
        let data = trunc_normal(self.rng, rows * cols, 0.02);
        self.out
            .insert(name.to_string(), Tensor::from_vec(&[rows, cols], data).unwrap());
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.out.insert(name.to_string(), Tensor::zeros(shape));
    }

    fn ones(&mut self, name: &str, n: usize) {
        self.out.insert(name.to_string(), Tensor::full(&[n], 1.0));
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.weight(&format!("{name}.w"), d_in, d_out);
        self.zeros(&format!("{name}.b"), &[d_out]);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.ones(&format!("{name}.g"), d);
        self.zeros(&format!("{name}.b"), &[d]);
    }

    fn attention(&mut self, name: &str, d: usize, d_kv: usize) {
        self.linear(&format!("{name}.q"), d, d);
        self.linear(&format!("{name}.k"), d_kv, d);
        self.linear(&format!("{name}.v"), d_kv, d);
        self.linear(&format!("{name}.o"), d, d);
    }

    fn mlp(&mut self, name: &str, d: usize) {
        self.linear(&format!("{name}.fc1"), d, MLP_RATIO * d);
        self.linear(&format!("{name}.fc2"), MLP_RATIO * d, d);
    }

    fn projector(&mut self, name: &str, cfg: &ModelConfig) {
        if cfg.proj_hidden == 0 {
            self.linear(&format!("{name}.last"), cfg.d_t, cfg.n_prototypes);
        } else {
            self.linear(&format!("{name}.fc1"), cfg.d_t, cfg.proj_hidden);
            self.linear(&format!("{name}.fc2"), cfg.proj_hidden, cfg.proj_hidden);
            self.linear(&format!("{name}.fc3"), cfg.proj_hidden, cfg.proj_bottleneck);
            self.linear(&format!("{name}.last"), cfg.proj_bottleneck, cfg.n_prototypes);
            // unit-norm prototypes, so logits start as cosines in [-1, 1]
            let w = self.out.get_mut(&format!("{name}.last.w")).unwrap();
            let k = cfg.n_prototypes;
            for j in 0..k {
                let norm = (0..cfg.proj_bottleneck).map(|i| w.data()[i * k + j].powi(2)).sum::<f64>().sqrt();
                for i in 0..cfg.proj_bottleneck {
                    w.data_mut()[i * k + j] /= norm;
                }
            }
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Random student initialisation; the teacher head starts as a copy of
    /// the student head.
    pub fn init<R: Rng>(config: &ModelConfig, vq_head: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let mut b = Builder {
            rng,
            out: BTreeMap::new(),
        };
        b.weight("tokemb", c.vocab_size, d);
        b.weight("dec.start", 1, d);
        b.weight("dec.pos", c.seq_len, d);
        for i in 0..c.dec_depth {
            let p = format!("dec.l{i}");
            b.norm(&format!("{p}.ln1"), d);
            b.attention(&format!("{p}.self"), d, d);
            b.norm(&format!("{p}.ln2"), d);
            b.attention(&format!("{p}.cross"), d, c.d_t);
            b.norm(&format!("{p}.ln3"), d);
            b.mlp(&format!("{p}.mlp"), d);
        }
        b.norm("dec.lnf", d);
        b.linear("dec.head", d, if vq_head { d } else { c.vocab_size });
        b.weight("enc.summary", 1, d);
        b.weight("enc.pos", c.seq_len, d);
        for i in 0..c.enc_depth {
            let p = format!("enc.l{i}");
            b.norm(&format!("{p}.ln1"), d);
            b.attention(&format!("{p}.attn"), d, d);
            b.norm(&format!("{p}.ln2"), d);
            b.mlp(&format!("{p}.mlp"), d);
        }
        if c.enc_depth > 0 {
            b.norm("enc.lnf", d);
        }
        b.linear("enc.out", d, c.d_t);
        b.projector(STUDENT_HEAD, c);
        let mut tensors: BTreeMap<String, Tensor<T>> =
            b.out.into_iter().map(|(k, v)| (k, v.cast())).collect();
        let teacher: Vec<(String, Tensor<T>)> = tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("proj_s.")
                    .map(|rest| (format!("{TEACHER_HEAD}.{rest}"), v.clone()))
            })
            .collect();
        tensors.extend(teacher);
        Ok(ModelParams {
            config: config.clone(),
            vq_head,
            tensors,
        })
    }

    /// Reassembles parameters from named tensors, checking every expected
    /// name and shape against a fresh layout.
    pub fn from_tensors(
        config: &ModelConfig,
        vq_head: bool,
        mut tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let layout = ModelParams::<f64>::init(config, vq_head, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut out = BTreeMap::new();
        for (name, proto) in &layout.tensors {
            let t = tensors
                .remove(name)
                .ok_or_else(|| crate::error::Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != proto.shape() {
                return Err(shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    proto.shape(),
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(crate::error::Error::NonFinite(name.clone()));
            }
            out.insert(name.clone(), t);
        }
        Ok(ModelParams {
            config: config.clone(),
            vq_head,
            tensors: out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vq_head(&self) -> bool {
        self.vq_head
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn is_student(name: &str) -> bool {
        !name.starts_with("proj_t.")
    }

    pub fn student_names(&self) -> Vec<String> {
        self.names()
            .filter(|n| Self::is_student(n))
            .map(str::to_string)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            vq_head: self.vq_head,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Leaves for every parameter whose name starts with one of `prefixes`
    /// (all parameters when empty). Student parameters are trainable when
    /// `trainable` is set; the teacher head never is.
    pub fn bind(&self, g: &mut Graph<T>, prefixes: &[&str], trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let v = if trainable && Self::is_student(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }
}

/// Parameter name → graph leaf.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Rebinds `name` to `v`.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Tensor map keyed by name, as consumed by [`ema_update`](super::ema_update).
pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ModelParams<T> {
    /// Student head tensors with the `proj_s.` prefix stripped.
    pub fn head(&self, which: &str) -> TensorMap<T> {
        let prefix = format!("{which}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|r| (r.to_string(), v.clone())))
            .collect()
    }

    pub fn set_head(&mut self, which: &str, head: TensorMap<T>) -> Result<()> {
        for (k, v) in head {
            let name = format!("{which}.{k}");
            let slot = self
                .tensors
                .get_mut(&name)
                .ok_or_else(|| shape(format!("no parameter {name}")))?;
            if slot.shape() != v.shape() {
                return Err(shape(format!("{name}: shape {:?} vs {:?}", slot.shape(), v.shape())));
            }
            *slot = v;
        }
        Ok(())
    }
}
