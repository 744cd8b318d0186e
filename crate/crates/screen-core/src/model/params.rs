//! Named parameter store with deterministic initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Collection of trainable parameters, keyed by dotted path names.
pub struct ParamStore {
    pub device: Device,
    pub dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        ParamStore { device, dtype, vars: BTreeMap::new() }
    }

    fn register(&mut self, name: &str, var: Var) -> Result<Tensor> {
        let t = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        Ok(t)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller, driven by the seeded stream for reproducibility
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            data.push(((-2.0 * u1.ln()).sqrt() * u2.cos() * std) as f32);
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.register(name, Var::from_tensor(&t)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.register(name, Var::from_tensor(&t)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.register(name, Var::from_tensor(&t)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    /// Shape parity check against another store.
    pub fn shapes_match(&self, other: &ParamStore) -> bool {
        self.vars.len() == other.vars.len()
            && self.vars.iter().zip(other.vars.iter()).all(|((na, va), (nb, vb))| {
                na == nb && va.as_tensor().dims() == vb.as_tensor().dims()
            })
    }

    /// Copy every parameter value from `other` into this store.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if !self.shapes_match(other) {
            return Err(Error::ShapeMismatch("parameter stores differ".into()));
        }
        for (name, var) in &self.vars {
            let src = other.vars.get(name).expect("checked by shapes_match");
            var.set(src.as_tensor())?;
        }
        Ok(())
    }

    /// Flat export for checkpointing, in name order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F32)?;
            let shape = t.dims().to_vec();
            let data = t.flatten_all()?.to_vec1::<f32>()?;
            out.push((name.clone(), shape, data));
        }
        Ok(out)
    }

    /// Load values by name; every parameter must be present with the right
    /// shape.
    pub fn import(&self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if var.as_tensor().dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}
