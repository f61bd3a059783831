//! Counting-network pretraining on the labeled source domain.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wdaseg_core::annotations::PointSet;
use wdaseg_core::augment::{crop, GeometricDraw};
use wdaseg_core::seed::derive_seed;
use wdaseg_core::synthdata::ImageSample;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::{batch_tensor, NetworkConfig, G1, G2};
use crate::ops::flush_denormals;
use crate::optim::{poly_lr, Optimizer, OptimizerConfig};

const STREAM_G2_INIT: u64 = 40;
const STREAM_G2_STEP: u64 = 41;

/// Mean of the per-step squared count errors over each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
}

/// True count of a source sample: the number of instance centers.
fn true_count(s: &ImageSample) -> Result<usize> {
    match (&s.instances, &s.points) {
        (Some(inst), _) => Ok(inst.count()),
        (None, Some(p)) => Ok(p.len()),
        (None, None) => Err(Error::Validation(
            "counting pretraining needs source samples with instances or center points".into(),
        )),
    }
}

/// Smallest window of the count pyramid.
pub const MIN_COUNT_WINDOW: usize = 32;

/// Window sides of the count pyramid for a crop: the crop, then repeated halving while
/// the side stays even and at least [`MIN_COUNT_WINDOW`].
pub fn pyramid_windows(side: usize) -> Vec<usize> {
    let mut out = vec![side];
    let mut w = side;
    while w % 2 == 0 && w / 2 >= MIN_COUNT_WINDOW {
        w /= 2;
        out.push(w);
    }
    out
}

/// Centers inside each `window`-sided cell of the crop at `(row, col)`, row-major.
fn window_counts(pts: &PointSet, row: usize, col: usize, side: usize, window: usize) -> Vec<f64> {
    let n = side / window;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(pts.count_in_window(row + i * window, col + j * window, window) as f64);
        }
    }
    out
}

/// One augmented square crop of side `side` and its centers, moved with the pixels.
fn sample_crop(s: &ImageSample, side: usize, rng: &mut ChaCha8Rng) -> Result<ImageSample> {
    let (h, w) = s.dim();
    let side = side.min(h).min(w);
    let (r, c) = (rng.random_range(0..=h - side), rng.random_range(0..=w - side));
    if s.points.is_none() {
        return Err(Error::Validation("source sample lacks center points".into()));
    }
    let mut window = crop(s, r, c, side);
    window.dense_label = None;
    Ok(GeometricDraw::sample(rng).apply(&window))
}

/// Mean over pyramid levels of the per-image summed squared error between window sums
/// of `density: [B, 1, S, S]` and the window counts.
fn pyramid_loss(density: &Tensor, crops: &[ImageSample]) -> Result<Tensor> {
    let (b, _, side, _) = density.dims4()?;
    let dtype = density.dtype();
    let levels = pyramid_windows(side);
    let mut total: Option<Tensor> = None;
    for &win in &levels {
        let n = side / win;
        let sums = density.reshape((b, n, win, n, win))?.sum(4)?.sum(2)?;
        let mut counts = Vec::with_capacity(b * n * n);
        for s in crops {
            let pts = s.points.as_ref().expect("crops keep their centers");
            counts.extend(window_counts(pts, 0, 0, side, win));
        }
        let target = Tensor::from_vec(counts, (b, n, n), &Device::Cpu)?.to_dtype(dtype)?;
        let level = ((sums - target)?.sqr()?.sum_all()? / b as f64)?;
        total = Some(match total {
            Some(t) => (t + level)?,
            None => level,
        });
    }
    Ok((total.expect("at least one level") / levels.len() as f64)?)
}

/// Trains a counting network on source crops with squared count errors and Adam.
/// Each step draws one crop side from `g2_scales` at native resolution; the error is
/// taken over a pyramid of windows (the crop, its quadrants, ...) so the integrated
/// density stays calibrated for windows and whole images of any size.
/// `init` copies the trunk of an existing G1. Returns the network and per-epoch losses.
pub fn pretrain_counting(source: &[ImageSample], cfg: &TrainConfig, init: Option<&G1>) -> Result<(G2, PretrainLog)> {
    cfg.validate()?;
    flush_denormals();
    if source.is_empty() {
        return Err(Error::Validation(
            "counting pretraining needs at least one source image".into(),
        ));
    }
    for s in source {
        true_count(s)?;
        if s.points.is_none() {
            return Err(Error::Validation("source sample lacks center points".into()));
        }
    }
    let dtype = if cfg.double_precision { DType::F64 } else { DType::F32 };
    let g2 = G2::new(cfg.network, dtype, derive_seed(cfg.seed, STREAM_G2_INIT, 0))?;
    if let Some(g1) = init {
        g2.init_from_g1(g1)?;
    }
    let mut opt = Optimizer::new(OptimizerConfig::adam())?;
    let steps_per_epoch = source.len().div_ceil(cfg.g2_batch);
    let total = cfg.g2_epochs * steps_per_epoch;
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.g2_epochs {
        let mut sum = 0.0;
        for k in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + k;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_G2_STEP, step as u64));
            let side = cfg.g2_scales[rng.random_range(0..cfg.g2_scales.len())];
            let crops = (0..cfg.g2_batch)
                .map(|_| sample_crop(&source[rng.random_range(0..source.len())], side, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ndarray::Array2<f32>> = crops.iter().map(|c| &c.image).collect();
            let loss = pyramid_loss(&g2.density(&batch_tensor(&refs, dtype)?)?, &crops)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Validation(format!(
                    "counting loss became {value} at step {step}"
                )));
            }
            sum += value;
            let grads = loss.backward()?;
            opt.step(g2.params(), &grads, poly_lr(cfg.g2_lr, step, total, cfg.lr_power))?;
        }
        let mean = sum / steps_per_epoch as f64;
        log::info!("counting pretraining epoch {epoch}: mse {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok((g2, log))
}

/// Whole-image count as the sum of predictions over non-overlapping `tile`-sided tiles
/// (edge tiles are smaller). Each center lies in exactly one tile, which matches how the
/// training crops were labeled.
pub fn predict_count(g2: &G2, image: &ndarray::Array2<f32>, tile: usize) -> Result<f64> {
    if tile == 0 {
        return Err(Error::InvalidArgument("tile side must be positive".into()));
    }
    let (h, w) = image.dim();
    let mut total = 0.0;
    for r in (0..h).step_by(tile) {
        for c in (0..w).step_by(tile) {
            let view = image.slice(ndarray::s![r..(r + tile).min(h), c..(c + tile).min(w)]);
            total += g2.predict(&view.to_owned())?;
        }
    }
    Ok(total)
}

/// Mean absolute error of tiled whole-image count predictions against instance counts.
pub fn count_mae(g2: &G2, samples: &[ImageSample], tile: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        sum += (predict_count(g2, &s.image, tile)? - true_count(s)? as f64).abs();
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct G2Sidecar {
    network: NetworkConfig,
    double_precision: bool,
}

/// Writes `g2.safetensors` and `g2.json` into `dir`.
pub fn save_g2(g2: &G2, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    g2.params().save(&dir.join("g2.safetensors"))?;
    let side = G2Sidecar {
        network: g2.config(),
        double_precision: g2.params().dtype() == DType::F64,
    };
    let path = dir.join("g2.json");
    std::fs::write(&path, serde_json::to_string_pretty(&side).expect("sidecar serializes"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_g2(dir: &Path) -> Result<G2> {
    let path = dir.join("g2.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: G2Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    let dtype = if side.double_precision { DType::F64 } else { DType::F32 };
    let g2 = G2::new(side.network, dtype, 0)?;
    g2.params().load(&dir.join("g2.safetensors"))?;
    Ok(g2)
}
