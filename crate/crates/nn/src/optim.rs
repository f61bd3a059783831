//! First-order optimizers with serializable state and the polynomial learning-rate decay.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `base * (1 - z / z_max)^power`, zero from `z_max` on.
pub fn poly_lr(base: f64, z: usize, z_max: usize, power: f64) -> f64 {
    if z >= z_max {
        return 0.0;
    }
    base * (1.0 - z as f64 / z_max as f64).powf(power)
}

/// Optimizer over a `ParamStore`, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps: u64,
    /// Momentum buffer, or Adam's first and second moments.
    slots: BTreeMap<String, Vec<Tensor>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    cfg: OptimizerConfig,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            steps: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, var) in params.iter() {
            // Gradients can carry backprop history; slots built from them would keep
            // every past graph alive.
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else {
                continue;
            };
            let g = &g;
            let slots = match self.slots.get_mut(name) {
                Some(s) => s,
                None => {
                    let n = match self.cfg {
                        OptimizerConfig::Sgd { .. } => 1,
                        OptimizerConfig::Adam { .. } => 2,
                    };
                    let zeros = var.as_tensor().zeros_like()?;
                    self.slots.entry(name.clone()).or_insert(vec![zeros; n])
                }
            };
            let update = match self.cfg {
                OptimizerConfig::Sgd { momentum } => {
                    slots[0] = ((&slots[0] * momentum)? + g)?;
                    (&slots[0] * lr)?
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    slots[0] = ((&slots[0] * beta1)? + (g * (1.0 - beta1))?)?;
                    slots[1] = ((&slots[1] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
                    let m_hat = (&slots[0] / (1.0 - beta1.powi(t)))?;
                    let v_hat = (&slots[1] / (1.0 - beta2.powi(t)))?;
                    ((m_hat / v_hat.sqrt()?.affine(1.0, eps)?)? * lr)?
                }
            };
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }

    /// Slot tensors to `<stem>.safetensors` and settings to `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut tensors = HashMap::new();
        for (name, slots) in &self.slots {
            for (i, t) in slots.iter().enumerate() {
                tensors.insert(format!("{i}.{name}"), t.clone());
            }
        }
        let st = stem.with_extension("safetensors");
        if let Some(dir) = st.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        candle_core::safetensors::save(&tensors, &st).map_err(|e| Error::format(&st, e))?;
        let js = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&Sidecar {
            cfg: self.cfg,
            steps: self.steps,
        })
        .expect("sidecar serializes");
        std::fs::write(&js, text).map_err(|e| Error::io(&js, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let js = stem.with_extension("json");
        let text = std::fs::read_to_string(&js).map_err(|e| Error::io(&js, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&js, e))?;
        let st = stem.with_extension("safetensors");
        if !st.exists() {
            return Err(Error::io(
                &st,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let tensors = candle_core::safetensors::load(&st, &Device::Cpu).map_err(|e| Error::format(&st, e))?;
        let mut slots: BTreeMap<String, Vec<(usize, Tensor)>> = BTreeMap::new();
        for (key, t) in tensors {
            let (i, name) = key
                .split_once('.')
                .and_then(|(i, n)| Some((i.parse::<usize>().ok()?, n.to_string())))
                .ok_or_else(|| Error::format(&st, format!("malformed slot key {key}")))?;
            slots.entry(name).or_default().push((i, t));
        }
        let slots = slots
            .into_iter()
            .map(|(name, mut v)| {
                v.sort_by_key(|(i, _)| *i);
                (name, v.into_iter().map(|(_, t)| t).collect())
            })
            .collect();
        let mut opt = Optimizer::new(side.cfg)?;
        opt.steps = side.steps;
        opt.slots = slots;
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(5e-5, 0, 100, 0.9), 5e-5);
        assert_eq!(poly_lr(5e-5, 100, 100, 0.9), 0.0);
        let lrs: Vec<f64> = (0..=100).map(|z| poly_lr(5e-5, z, 100, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn quadratic_descent(cfg: OptimizerConfig, lr: f64) -> f64 {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v = store.normal("x".into(), &[4], 1, &mut rng).unwrap();
        let mut opt = Optimizer::new(cfg).unwrap();
        for _ in 0..300 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, lr).unwrap();
        }
        v.as_tensor()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        assert!(quadratic_descent(OptimizerConfig::sgd(), 0.05) < 1e-8);
        assert!(quadratic_descent(OptimizerConfig::adam(), 0.05) < 1e-4);
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new(DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = store.normal("w".into(), &[3, 2], 2, &mut rng).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam()).unwrap();
        let grads = v.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&store, &grads, 0.1).unwrap();
        opt.save(&dir.path().join("opt")).unwrap();
        let back = Optimizer::load(&dir.path().join("opt")).unwrap();
        assert_eq!(back.steps(), 1);
        assert_eq!(back.cfg, opt.cfg);
        let (a, b) = (&opt.slots["w"], &back.slots["w"]);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }
}
