use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Named, seeded parameter storage.
///
/// Every module looks its weights up by a dotted name. The first lookup creates the
/// variable from the store's own RNG, so two stores with the same seed and the same
/// construction order hold identical weights. A detached view shares storage with the
/// trainable store but hands out tensors that are not tracked by autodiff.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    detached: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            detached: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// A view over the same variables whose tensors carry no gradient tracking.
    pub fn detached(&self) -> Self {
        let mut view = self.clone();
        view.detached = true;
        view
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    /// Fetch `name`, creating it with `init` if it does not exist yet.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, requested {:?}",
                    var.dims(),
                    shape
                )));
            }
            return Ok(self.view(var));
        }
        if self.detached {
            return Err(Error::Config(format!(
                "parameter {name} missing from a frozen store"
            )));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform(bound) => (0..count)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = self.view(&var);
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn view(&self, var: &Var) -> Tensor {
        if self.detached {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite an existing variable, or insert it when absent.
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(var) => {
                if var.dims() != value.dims() {
                    return Err(Error::Config(format!(
                        "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                        value.dims(),
                        var.dims()
                    )));
                }
                var.set(&value)?;
            }
            None => {
                self.vars
                    .insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    /// Copy every variable of `other` whose name starts with `prefix` into this store.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in other.vars_with_prefix(prefix) {
            self.set(&name, var.as_tensor())?;
            copied += 1;
        }
        Ok(copied)
    }

    /// A deep copy with freshly allocated storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            let copy = var.as_tensor().copy()?;
            vars.insert(name.clone(), Var::from_tensor(&copy)?);
        }
        Ok(Self {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
            rng: self.rng.clone(),
            detached: self.detached,
        })
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .field("detached", &self.detached)
            .finish()
    }
}
