//! Named trainable parameters with seeded initialization and safetensors persistence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::same_conv2d;
use crate::error::{Error, Result};

/// Ordered map from parameter name to variable; iteration order is the name order, which
/// keeps optimizer state and checkpoints stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name, v.clone());
        Ok(v)
    }

    /// Gaussian weights with He scaling for the given fan-in.
    pub fn normal(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Var> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive standard deviation");
        let n = shape.iter().product();
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters from `tensors`; every name must exist with a matching shape.
    /// With `prefix` set, only names starting with it are touched and missing extras in
    /// `tensors` are ignored.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>, prefix: Option<&str>) -> Result<()> {
        for (name, var) in &self.vars {
            if prefix.is_some_and(|p| !name.starts_with(p)) {
                continue;
            }
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Validation(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        if prefix.is_none() && tensors.len() != self.vars.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        candle_core::safetensors::save(&self.snapshot()?, path).map_err(|e| Error::format(path, e))
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::format(path, e))?;
        self.assign(&tensors, None)
    }
}

/// Convolution weights `[out, in, kh, kw]` with a per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Var,
    bias: Var,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let weight = store.normal(format!("{name}.weight"), &[c_out, c_in, kh, kw], c_in * kh * kw, rng)?;
        let bias = store.constant(format!("{name}.bias"), &[c_out], bias)?;
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Stride-1 convolution that preserves the spatial size.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(same_conv2d(x, self.weight.as_tensor(), self.bias.as_tensor())?)
    }

    /// Strided convolution with padding `kernel / 2`.
    pub fn forward_strided(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let pad = self.weight.dims()[2] / 2;
        let y = x.conv2d(self.weight.as_tensor(), pad, stride, 1, 1)?;
        let b = self.bias.as_tensor();
        Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?)
    }
}
