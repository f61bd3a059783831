//! Adversarial adaptation of G1 with the optional detection, counting and pseudo-label
//! terms, plus resumable checkpoints.
//!
//! Every random draw of iteration `z` comes from a generator seeded by `(seed, z)`, so a
//! run resumed at `z` sees exactly the batches an uninterrupted run would.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wdaseg_core::annotations::{render_heatmap, PointSet};
use wdaseg_core::augment::{cp_aug, crop, geometric_aug};
use wdaseg_core::io::write_npy;
use wdaseg_core::seed::derive_seed;
use wdaseg_core::synthdata::{Benchmark, ImageSample};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, apply_thresholds, background_weight_map, beta_map, collect_class_entropies,
    counting_consistency, decile_threshold, detection_loss, lambda_c, mask_onehot, seg_loss, stack_onehot,
    total_objective, DetectionTargets, LossParts,
};
use crate::networks::{batch_tensor, Discriminator, G1, G2};
use crate::ops::flush_denormals;
use crate::optim::{poly_lr, Optimizer};

const STREAM_G1_INIT: u64 = 20;
const STREAM_D_INIT: u64 = 21;
const STREAM_BATCH: u64 = 22;
const STREAM_EPOCH: u64 = 23;

/// One row of `logs/losses.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    #[serde(rename = "L_s_src")]
    pub seg_source: f64,
    #[serde(rename = "L_s_pl")]
    pub seg_pseudo: f64,
    #[serde(rename = "L_adv")]
    pub adv: f64,
    #[serde(rename = "L_d")]
    pub det: f64,
    #[serde(rename = "L_c")]
    pub count: f64,
    pub lambda_c: f64,
    pub total: f64,
}

/// Source and target crops of one iteration, after augmentation.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Vec<ImageSample>,
    pub target: Vec<ImageSample>,
}

/// Everything needed to continue training from iteration `z`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub z: usize,
    pub g1: G1,
    pub disc: Discriminator,
    pub g1_opt: Optimizer,
    pub disc_opt: Optimizer,
    /// Per-class entropy cutoffs from the last completed epoch.
    pub thresholds: Option<Vec<f64>>,
    /// Entropies seen so far in the current epoch, by predicted class.
    pub entropies: [Vec<f64>; 2],
}

#[derive(Serialize, Deserialize)]
struct StateSidecar {
    z: usize,
    thresholds: Option<Vec<f64>>,
    config: RunConfig,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.train;
        let dtype = if t.double_precision { DType::F64 } else { DType::F32 };
        Ok(Self {
            z: 0,
            g1: G1::new(t.network, dtype, derive_seed(t.seed, STREAM_G1_INIT, 0))?,
            disc: Discriminator::new(t.disc_width, dtype, derive_seed(t.seed, STREAM_D_INIT, 0))?,
            g1_opt: Optimizer::new(t.g1_optimizer)?,
            disc_opt: Optimizer::new(t.disc_optimizer)?,
            thresholds: None,
            entropies: [Vec::new(), Vec::new()],
        })
    }

    /// Writes the state into `dir`; `cfg` is stored alongside so the run can resume.
    pub fn save(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.g1.params().save(&dir.join("g1.safetensors"))?;
        self.disc.params().save(&dir.join("disc.safetensors"))?;
        self.g1_opt.save(&dir.join("g1_opt"))?;
        self.disc_opt.save(&dir.join("disc_opt"))?;
        let ent = dir.join("entropies.safetensors");
        let mut tensors = std::collections::HashMap::new();
        for (name, v) in ["background", "foreground"].iter().zip(&self.entropies) {
            tensors.insert(name.to_string(), Tensor::from_slice(v, v.len(), &Device::Cpu)?);
        }
        candle_core::safetensors::save(&tensors, &ent).map_err(|e| Error::format(&ent, e))?;
        let side = StateSidecar {
            z: self.z,
            thresholds: self.thresholds.clone(),
            config: cfg.clone(),
        };
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string_pretty(&side).expect("state serializes"))
            .map_err(|e| Error::io(&path, e))
    }

    /// Reads a state written by [`TrainState::save`] with the config it was saved with.
    pub fn load(dir: &Path) -> Result<(Self, RunConfig)> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: StateSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let mut state = TrainState::new(&side.config)?;
        state.g1.params().load(&dir.join("g1.safetensors"))?;
        state.disc.params().load(&dir.join("disc.safetensors"))?;
        state.g1_opt = Optimizer::load(&dir.join("g1_opt"))?;
        state.disc_opt = Optimizer::load(&dir.join("disc_opt"))?;
        let ent = dir.join("entropies.safetensors");
        let tensors = candle_core::safetensors::load(&ent, &Device::Cpu).map_err(|e| Error::format(&ent, e))?;
        for (slot, name) in state.entropies.iter_mut().zip(["background", "foreground"]) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::format(&ent, format!("missing {name} entropies")))?;
            *slot = t.to_vec1::<f64>()?;
        }
        state.z = side.z;
        state.thresholds = side.thresholds;
        Ok((state, side.config))
    }
}

/// Loads only G1 and its training config from a checkpoint directory.
pub fn load_g1(dir: &Path) -> Result<(G1, RunConfig)> {
    let path = dir.join("state.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: StateSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    let t = &side.config.train;
    let dtype = if t.double_precision { DType::F64 } else { DType::F32 };
    let g1 = G1::new(t.network, dtype, 0)?;
    g1.params().load(&dir.join("g1.safetensors"))?;
    Ok((g1, side.config))
}

/// Drives [`TrainState`] over a benchmark.
pub struct Trainer<'a> {
    cfg: RunConfig,
    bench: &'a Benchmark,
    g2: Option<&'a G2>,
    state: TrainState,
    run_dir: Option<PathBuf>,
    log: Option<csv::Writer<File>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: RunConfig, bench: &'a Benchmark, g2: Option<&'a G2>) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, state, bench, g2)
    }

    /// Continues from a checkpoint directory, using the config stored there.
    pub fn resume(dir: &Path, bench: &'a Benchmark, g2: Option<&'a G2>) -> Result<Self> {
        let (state, cfg) = TrainState::load(dir)?;
        Self::with_state(cfg, state, bench, g2)
    }

    pub fn with_state(cfg: RunConfig, state: TrainState, bench: &'a Benchmark, g2: Option<&'a G2>) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.train;
        if t.flags.count && g2.is_none() {
            return Err(Error::Config(
                "the counting term needs a pretrained counting network".into(),
            ));
        }
        if bench.source.is_empty() || bench.target_train.is_empty() {
            return Err(Error::Validation("training needs source and target images".into()));
        }
        for s in bench.source.iter().chain(&bench.target_train) {
            let (h, w) = s.dim();
            if h < t.crop || w < t.crop {
                return Err(Error::Validation(format!(
                    "image {h}x{w} is smaller than the crop {}",
                    t.crop
                )));
            }
        }
        if bench
            .source
            .iter()
            .any(|s| s.dense_label.is_none() || s.points.is_none())
        {
            return Err(Error::Validation(
                "source images need dense labels and center points".into(),
            ));
        }
        Ok(Self {
            cfg,
            bench,
            g2,
            state,
            run_dir: None,
            log: None,
        })
    }

    /// Enables `logs/losses.csv`, periodic checkpoints and NaN dumps under `dir`.
    /// An existing log is appended to, so resumed runs extend it.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        let logs = dir.join("logs");
        std::fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
        let path = logs.join("losses.csv");
        let fresh = !path.exists() || self.state.z == 0;
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        self.log = Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file));
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn iterations_per_epoch(&self) -> usize {
        self.bench.target_train.len().div_ceil(self.cfg.train.batch_size)
    }

    fn random_crop(&self, s: &ImageSample, rng: &mut ChaCha8Rng) -> ImageSample {
        let size = self.cfg.train.crop;
        let (h, w) = s.dim();
        crop(s, rng.random_range(0..=h - size), rng.random_range(0..=w - size), size)
    }

    /// The augmented crops used at iteration `z`.
    pub fn batch(&self, z: usize) -> Result<Batch> {
        let t = &self.cfg.train;
        let ipe = self.iterations_per_epoch();
        let n_t = self.bench.target_train.len();
        let mut order: Vec<usize> = (0..n_t).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            t.seed,
            STREAM_EPOCH,
            (z / ipe) as u64,
        )));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, STREAM_BATCH, z as u64));
        let mut batch = Batch {
            source: Vec::with_capacity(t.batch_size),
            target: Vec::with_capacity(t.batch_size),
        };
        for j in 0..t.batch_size {
            let s = &self.bench.source[rng.random_range(0..self.bench.source.len())];
            let s = self.random_crop(s, &mut rng);
            batch.source.push(geometric_aug(&s, rng.random()));

            let b = order[((z % ipe) * t.batch_size + j) % n_t];
            let mut tgt = self.random_crop(&self.bench.target_train[b], &mut rng);
            if t.flags.cp_aug {
                let a = if n_t > 1 {
                    (b + rng.random_range(1..n_t)) % n_t
                } else {
                    b
                };
                let donor = self.random_crop(&self.bench.target_train[a], &mut rng);
                tgt = cp_aug(&donor, &tgt, t.cp_patch())?;
            }
            batch.target.push(geometric_aug(&tgt, rng.random()));
        }
        Ok(batch)
    }

    /// One iteration: G1 update on the full objective, then a discriminator update on
    /// the same (detached) predictions.
    pub fn step(&mut self) -> Result<LossRecord> {
        flush_denormals();
        let z = self.state.z;
        let (t, w) = (&self.cfg.train, &self.cfg.weights);
        let flags = t.flags;
        let dtype = self.state.g1.params().dtype();
        let batch = self.batch(z)?;
        let b = batch.source.len();

        let images: Vec<&Array2<f32>> = batch.source.iter().chain(&batch.target).map(|s| &s.image).collect();
        let out = self.state.g1.forward(&batch_tensor(&images, dtype)?)?;
        let probs = out.probs()?;
        let (lp_s, lp_t) = (out.log_probs.narrow(0, 0, b)?, out.log_probs.narrow(0, b, b)?);
        let (p_s, p_t) = (probs.narrow(0, 0, b)?, probs.narrow(0, b, b)?);
        let p_t_maps = prob_arrays(&p_t)?;

        let y_s = stack_onehot(
            &batch
                .source
                .iter()
                .map(|s| mask_onehot(s.dense_label.as_ref().expect("checked at construction")))
                .collect::<Vec<_>>(),
            dtype,
        )?;
        let use_pl = flags.pseudo_label && z >= t.warmup() && self.state.thresholds.is_some();
        let pseudo = if use_pl {
            let thr = self.state.thresholds.as_ref().expect("checked above");
            let maps = p_t_maps
                .iter()
                .map(|p| Ok(apply_thresholds(p, thr)?.onehot()))
                .collect::<Result<Vec<_>>>()?;
            Some(stack_onehot(&maps, dtype)?)
        } else {
            None
        };
        let seg = seg_loss(&lp_s, &y_s, use_pl.then_some(&lp_t), pseudo.as_ref())?;
        let adv = adversarial_losses(&self.state.disc, &p_s, &p_t)?;

        let det = if flags.detect {
            let targets = detection_targets(&batch, &p_t_maps, &self.cfg)?;
            let heat = &out.heatmap;
            Some(detection_loss(&heat.narrow(0, 0, b)?, &heat.narrow(0, b, b)?, &targets)?.total)
        } else {
            None
        };
        let count = if flags.count {
            let g2 = self.g2.expect("checked at construction");
            let priors = batch
                .target
                .iter()
                .map(|s| g2.predict(&s.image))
                .collect::<Result<Vec<_>>>()?;
            Some(counting_consistency(&out.count.narrow(0, b, b)?, &priors, w.epsilon)?)
        } else {
            None
        };

        let parts = LossParts {
            seg_source: seg.source,
            seg_pseudo: use_pl.then_some(seg.target),
            adv: Some(adv.adv),
            det,
            count,
        };
        let values = parts.values()?;
        let total = total_objective(&parts, z, t.z_max, w)?;
        let record = LossRecord {
            iter: z,
            seg_source: values.seg_source,
            seg_pseudo: values.seg_pseudo,
            adv: values.adv,
            det: values.det,
            count: values.count,
            lambda_c: lambda_c(z, t.z_max),
            total: values.total(z, t.z_max, w),
        };
        let disc_value = adv.disc.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let checks = [
            ("L_s_src", record.seg_source),
            ("L_s_pl", record.seg_pseudo),
            ("L_adv", record.adv),
            ("L_d", record.det),
            ("L_c", record.count),
            ("total", record.total),
            ("L_disc", disc_value),
        ];
        if let Some((term, _)) = checks.iter().find(|(_, v)| !v.is_finite()) {
            let dump = self.dump_batch(z, &batch)?;
            return Err(Error::NonFinite {
                iter: z,
                term: term.to_string(),
                dump,
            });
        }

        let grads = total.backward()?;
        let lr = poly_lr(t.g1_lr, z, t.z_max, t.lr_power);
        self.state.g1_opt.step(self.state.g1.params(), &grads, lr)?;
        drop(grads);
        let dgrads = adv.disc.backward()?;
        let dlr = poly_lr(t.disc_lr, z, t.z_max, t.lr_power);
        self.state.disc_opt.step(self.state.disc.params(), &dgrads, dlr)?;

        if flags.pseudo_label {
            for p in &p_t_maps {
                collect_class_entropies(p, &mut self.state.entropies)?;
            }
            if (z + 1) % self.iterations_per_epoch() == 0 {
                self.state.thresholds = Some(decile_threshold(&self.state.entropies, w.k)?);
                self.state.entropies = [Vec::new(), Vec::new()];
            }
        }
        self.state.z = z + 1;

        if let Some(log) = self.log.as_mut() {
            log.serialize(record).map_err(|e| Error::Format {
                path: PathBuf::from("logs/losses.csv"),
                message: e.to_string(),
            })?;
        }
        if let Some(dir) = &self.run_dir {
            let every = self.cfg.train.checkpoint_every;
            if every > 0 && self.state.z % every == 0 && self.state.z < self.cfg.train.z_max {
                let ckpt = dir.join("checkpoints").join(format!("iter_{:06}", self.state.z));
                self.state.save(&ckpt, &self.cfg)?;
            }
        }
        Ok(record)
    }

    /// Steps until `z_max`, writing `checkpoints/final` when a run directory is set.
    pub fn run(&mut self) -> Result<Vec<LossRecord>> {
        let mut records = Vec::with_capacity(self.cfg.train.z_max.saturating_sub(self.state.z));
        while self.state.z < self.cfg.train.z_max {
            let r = self.step()?;
            if r.iter % 100 == 0 {
                log::info!(
                    "iter {} total {:.4} (src {:.4} pl {:.4} adv {:.4} det {:.4} count {:.4})",
                    r.iter,
                    r.total,
                    r.seg_source,
                    r.seg_pseudo,
                    r.adv,
                    r.det,
                    r.count
                );
            }
            records.push(r);
        }
        self.flush()?;
        if let Some(dir) = &self.run_dir {
            self.state.save(&dir.join("checkpoints").join("final"), &self.cfg)?;
        }
        Ok(records)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io("logs/losses.csv", e))?;
        }
        Ok(())
    }

    fn dump_batch(&self, z: usize, batch: &Batch) -> Result<PathBuf> {
        let root = match &self.run_dir {
            Some(d) => d.clone(),
            None => std::env::temp_dir(),
        };
        let dir = root.join(format!("nan_dump_iter_{z:06}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, set) in [("source", &batch.source), ("target", &batch.target)] {
            for (i, s) in set.iter().enumerate() {
                write_npy(&dir.join(format!("{name}_{i}.npy")), &s.image)?;
            }
        }
        self.state.save(&dir.join("state"), &self.cfg)?;
        Ok(dir)
    }
}

/// `[2, H, W]` arrays of a detached `[B, 2, H, W]` probability tensor.
fn prob_arrays(p: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (b, c, h, w) = p.dims4()?;
    let flat = p.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat
        .chunks(c * h * w)
        .take(b)
        .map(|chunk| Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("tensor size matches"))
        .collect())
}

fn points_of(s: &ImageSample) -> PointSet {
    let (h, w) = s.dim();
    s.points.clone().unwrap_or_else(|| PointSet::empty(h, w))
}

fn detection_targets(batch: &Batch, p_t: &[Array3<f32>], cfg: &RunConfig) -> Result<DetectionTargets> {
    let w = &cfg.weights;
    let heat = |s: &ImageSample| render_heatmap(&points_of(s), w.sigma1).into_inner();
    let beta = |s: &ImageSample| beta_map(&points_of(s), w.sigma2, w.beta_peak);
    let d_s: Vec<_> = batch.source.iter().map(heat).collect();
    let beta_s: Vec<_> = batch.source.iter().map(beta).collect();
    let d_t: Vec<_> = batch.target.iter().map(heat).collect();
    let beta_t: Vec<_> = batch.target.iter().map(beta).collect();
    let w_t: Vec<_> = p_t
        .iter()
        .zip(&d_t)
        .map(|(p, d)| background_weight_map(&p.index_axis(ndarray::Axis(0), 1).to_owned(), d, w.rho))
        .collect();
    let dtype = if cfg.train.double_precision {
        DType::F64
    } else {
        DType::F32
    };
    DetectionTargets::new(&d_s, &beta_s, &d_t, &w_t, &beta_t, w.lambda_point, dtype)
}
