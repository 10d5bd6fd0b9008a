//! Named trainable parameters and their initialization.
//!
//! A [`ParamStore`] owns every trainable tensor of a model, keyed by a
//! path-like name (`"vision/block0/attn/wq"`). Initialization is
//! deterministic and order-independent: each parameter's values are drawn
//! from a stream seeded by the store's master seed mixed with a hash of
//! the parameter's name, so registering parameters in a different order
//! (or skipping some under an ablation) never changes the values of the
//! others.

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::graph::Graph;
use crate::tensor::Tensor;

/// Initialization scheme for a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, re-drawn until within
    /// two standard deviations of zero.
    TruncNormal {
        /// Standard deviation of the underlying normal.
        std: f64,
    },
    /// All zeros (biases).
    Zeros,
    /// All ones (normalization gains).
    Ones,
    /// A fixed constant everywhere.
    Constant(f64),
}

/// One named trainable tensor plus its persistent gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    /// Full path-like name, unique within the store.
    pub name: String,
    /// Current value.
    pub value: Tensor,
    /// Accumulated gradient; zeros after [`ParamStore::zero_grads`].
    pub grad: Tensor,
}

/// Deterministic collection of named parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
    seed: u64,
}

impl ParamStore {
    /// An empty store whose parameters will be initialized from `seed`.
    pub fn new(seed: u64) -> Self {
        ParamStore { params: IndexMap::new(), seed }
    }

    /// Master seed the store was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers and initializes a new parameter. Rejects duplicate
    /// names: every parameter is created exactly once.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::Contract(format!(
                "parameter {name:?} has empty shape {shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name)));
        let data: Vec<f64> = match init {
            Init::TruncNormal { std } => {
                (0..numel).map(|_| trunc_normal(&mut rng, std)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Constant(c) => vec![c; numel],
        };
        let value = Tensor::new(shape.to_vec(), data)?;
        let grad = Tensor::zeros(shape);
        self.params.insert(name.to_string(), Parameter { name: name.to_string(), value, grad });
        Ok(())
    }

    /// Looks a parameter up by name.
    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    /// Mutable access to a parameter by name.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    /// True if `name` was registered.
    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// All parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    /// All parameters, mutably, in registration order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    /// Number of parameters (tensors, not scalar entries).
    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// True when no parameters are registered.
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Adds the gradients a swept graph computed for its staged
    /// parameters into this store's persistent gradient buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (name, var) in graph.staged_params() {
            let Some(src) = graph.grad(var) else { continue };
            let p = self.get_mut(name)?;
            for (gi, si) in p.grad.data_mut().iter_mut().zip(src) {
                *gi += si;
            }
        }
        Ok(())
    }

    /// Clears every gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Sample from a normal truncated at two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    for _ in 0..100 {
        let v: f64 = rng.sample::<f64, _>(StandardNormal) * std;
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
    // Practically unreachable (acceptance probability ~0.954 per draw).
    0.0
}

/// FNV-1a hash of a name, used to derive per-parameter seed streams.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One round of splitmix64, to decorrelate seed ^ hash mixes.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
