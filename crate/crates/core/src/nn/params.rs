//! Named parameter storage with deterministic initialization and freezing.
//!
//! Parameters live in a [`ParamStore`] as candle `Var`s keyed by dotted
//! names whose first component is the parameter group (`autoencoder`,
//! `unet_base`, `preprocess`, `guidance`, `fusion`, `frequency`). Modules
//! receive plain tensors when they are built: trainable parameters come back
//! as the tracked variable, frozen ones as a detached view of the same
//! storage, so backpropagation never reaches them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};

use crate::error::{internal_err, Result};
use crate::rng;

pub const GROUPS: [&str; 6] = ["autoencoder", "unet_base", "preprocess", "guidance", "fusion", "frequency"];

/// Name component marking temporal attention layers.
pub const TEMPORAL_TAG: &str = "temporal";

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Kaiming-style uniform bound `sqrt(1 / fan_in)`.
    FanIn(usize),
    /// Identity on the leading square block of a 2-D or `[out, in, 1, 1]` weight.
    Identity,
    Tensor(Tensor),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezePolicy {
    pub groups: BTreeSet<String>,
    pub temporal_layers: bool,
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn groups<I: IntoIterator<Item = &'static str>>(groups: I, temporal_layers: bool) -> Self {
        Self { groups: groups.into_iter().map(String::from).collect(), temporal_layers }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        let group = name.split('.').next().unwrap_or("");
        self.groups.contains(group) || (self.temporal_layers && is_temporal(name))
    }
}

pub fn is_temporal(name: &str) -> bool {
    name.split('.').any(|c| c == TEMPORAL_TAG)
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or("")
}

struct Inner {
    vars: BTreeMap<String, Var>,
    policy: FreezePolicy,
}

/// Shared handle; clones refer to the same parameters.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    seed: u64,
    device: Device,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("param store poisoned");
        f.debug_struct("ParamStore")
            .field("params", &inner.vars.len())
            .field("dtype", &self.dtype)
            .field("policy", &inner.policy)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, device: Device, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner { vars: BTreeMap::new(), policy: FreezePolicy::none() })),
            seed,
            device,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
    pub fn dtype(&self) -> DType {
        self.dtype
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sets the freeze policy applied to modules built from now on.
    pub fn set_policy(&self, policy: FreezePolicy) {
        self.inner.lock().expect("param store poisoned").policy = policy;
    }
    pub fn policy(&self) -> FreezePolicy {
        self.inner.lock().expect("param store poisoned").policy.clone()
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder { store: self.clone(), prefix: String::new() }
    }

    pub fn builder(&self, prefix: &str) -> ParamBuilder {
        ParamBuilder { store: self.clone(), prefix: prefix.to_string() }
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().expect("param store poisoned").vars.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").vars.get(name).cloned()
    }

    /// All parameters, sorted by name.
    pub fn all(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Parameters the current policy leaves trainable, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| !inner.policy.is_frozen(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn frozen(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| inner.policy.is_frozen(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self, group: Option<&str>) -> usize {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .filter(|(k, _)| group.is_none_or(|g| group_of(k) == g))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Inserts or overwrites a parameter value (used when loading checkpoints).
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_device(&self.device)?.to_dtype(self.dtype)?;
        let mut inner = self.inner.lock().expect("param store poisoned");
        match inner.vars.get(name) {
            Some(v) if v.shape() == value.shape() => v.set(&value)?,
            Some(v) => {
                return Err(internal_err!(
                    "parameter {name}: shape {:?} does not match stored {:?}",
                    value.shape(),
                    v.shape()
                ))
            }
            None => {
                inner.vars.insert(name.to_string(), Var::from_tensor(&value.copy()?)?);
            }
        }
        Ok(())
    }

    /// Copies every parameter under `from.` to the same suffix under `to.`,
    /// creating the targets when missing.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<usize> {
        let src: Vec<(String, Tensor)> = {
            let inner = self.inner.lock().expect("param store poisoned");
            inner
                .vars
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&format!("{from}.")).map(|s| (s.to_string(), v.as_tensor().copy())))
                .map(|(s, t)| t.map(|t| (s, t)))
                .collect::<candle_core::Result<_>>()?
        };
        for (suffix, t) in &src {
            self.insert(&format!("{to}.{suffix}"), t)?;
        }
        Ok(src.len())
    }

    fn fetch(&self, name: &str, shape: Shape, init: &Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        let var = match inner.vars.get(name) {
            Some(v) => {
                if v.shape() != &shape {
                    return Err(internal_err!(
                        "parameter {name} has shape {:?}, module expects {shape:?}",
                        v.shape()
                    ));
                }
                v.clone()
            }
            None => {
                let t = self.initial_value(name, &shape, init)?;
                let v = Var::from_tensor(&t)?;
                inner.vars.insert(name.to_string(), v.clone());
                v
            }
        };
        Ok(if inner.policy.is_frozen(name) { var.as_detached_tensor() } else { var.as_tensor().clone() })
    }

    fn initial_value(&self, name: &str, shape: &Shape, init: &Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let dims = shape.dims();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut r = rng::stream(self.seed, name);
                rng::normal_vec_f64(&mut r, n).into_iter().map(|v| v * std).collect()
            }
            Init::FanIn(fan_in) => {
                use rand::Rng;
                let bound = (1.0 / (*fan_in).max(1) as f64).sqrt();
                let mut r = rng::stream(self.seed, name);
                (0..n).map(|_| r.random_range(-bound..bound)).collect()
            }
            Init::Identity => {
                if dims.len() < 2 {
                    return Err(internal_err!("identity init needs a matrix, got {dims:?}"));
                }
                let (rows, cols) = (dims[0], dims[1]);
                let inner: usize = dims[2..].iter().product();
                if inner != 1 {
                    return Err(internal_err!("identity init needs 1x1 kernels, got {dims:?}"));
                }
                let mut v = vec![0.0; n];
                for i in 0..rows.min(cols) {
                    v[i * cols + i] = 1.0;
                }
                v
            }
            Init::Tensor(t) => {
                if t.shape() != shape {
                    return Err(internal_err!("init tensor shape mismatch for {name}"));
                }
                return Ok(t.to_device(&self.device)?.to_dtype(self.dtype)?.copy()?);
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }
}

/// Hands out parameters under a name prefix.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: &str) -> ParamBuilder {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store.clone(), prefix }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn get<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.fetch(&full, shape.into(), &init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}
