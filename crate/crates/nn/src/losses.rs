//! Training objectives: segmentation with entropy-selected pseudo-labels, weighted
//! heatmap regression, the counting hinge, output-space adversarial terms and their
//! weighted combination.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use wdaseg_core::{render_heatmap, PointSet};

use crate::error::{Error, Result};
use crate::networks::{softplus, Discriminator};

const SIMPLEX_TOL: f64 = 1e-4;
pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_d: f64,
    /// Weight of the point-confidence term in the detection loss.
    pub lambda_point: f64,
    /// Half-width of the zero plateau of the counting hinge.
    pub epsilon: f64,
    /// Foreground probability below which a pixel counts as estimated background.
    pub rho: f64,
    /// Decile used for the per-class entropy thresholds.
    pub k: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub beta_peak: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_a: 1e-3,
            lambda_d: 0.1,
            lambda_point: 3.0,
            epsilon: 3.0,
            rho: 0.1,
            k: 8,
            sigma1: 10.0,
            sigma2: 2.0,
            beta_peak: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_a", self.lambda_a),
            ("lambda_d", self.lambda_d),
            ("lambda_point", self.lambda_point),
            ("epsilon", self.epsilon),
            ("rho", self.rho),
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("beta_peak", self.beta_peak),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(1..=9).contains(&self.k) {
            return Err(Error::Config(format!("k must lie in 1..=9, got {}", self.k)));
        }
        if self.rho >= 1.0 {
            return Err(Error::Config(format!("rho must be below 1, got {}", self.rho)));
        }
        if self.sigma2 >= self.sigma1 {
            return Err(Error::Config(format!(
                "sigma2 ({}) must be smaller than sigma1 ({})",
                self.sigma2, self.sigma1
            )));
        }
        Ok(())
    }
}

/// Shannon entropy of one probability vector, with `0 ln 0 = 0`.
pub fn pixel_entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&v| !(0.0..=1.0 + SIMPLEX_TOL).contains(&v)) {
        return Err(Error::Validation(format!("{p:?} is not a probability vector")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

fn check_probs(p: &Array3<f32>) -> Result<()> {
    if p.len_of(Axis(0)) != 2 {
        return Err(Error::Validation(format!(
            "expected a 2-channel probability map, got {} channels",
            p.len_of(Axis(0))
        )));
    }
    Ok(())
}

/// Per-pixel entropy of a `[2, H, W]` probability map.
pub fn entropy_map(p: &Array3<f32>) -> Result<Array2<f64>> {
    check_probs(p)?;
    let (_, h, w) = p.dim();
    let mut out = Array2::zeros((h, w));
    for ((r, c), e) in out.indexed_iter_mut() {
        *e = pixel_entropy(&[p[[0, r, c]] as f64, p[[1, r, c]] as f64])?;
    }
    Ok(out)
}

/// Argmax class with ties going to background.
pub fn argmax_class(p: &Array3<f32>) -> Array2<u8> {
    let (_, h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if p[[1, r, c]] > p[[0, r, c]] {
            FOREGROUND
        } else {
            BACKGROUND
        }
    })
}

/// Entropies grouped by argmax class, appended to `acc`.
pub fn collect_class_entropies(p: &Array3<f32>, acc: &mut [Vec<f64>; 2]) -> Result<()> {
    let e = entropy_map(p)?;
    for (cls, v) in argmax_class(p).iter().zip(e.iter()) {
        acc[*cls as usize].push(*v);
    }
    Ok(())
}

/// Nearest-rank K-th decile of each class list: the `ceil(K n / 10)`-th smallest value.
/// An empty list gets `-inf`, which selects nothing.
pub fn decile_threshold(entropies_by_class: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
    if !(1..=9).contains(&k) {
        return Err(Error::InvalidArgument(format!(
            "decile index must lie in 1..=9, got {k}"
        )));
    }
    Ok(entropies_by_class
        .iter()
        .enumerate()
        .map(|(cls, list)| {
            if list.is_empty() {
                log::warn!("class {cls} has no pixels; its pseudo-labels are disabled");
                return f64::NEG_INFINITY;
            }
            let mut sorted = list.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[(k * sorted.len()).div_ceil(10).max(1) - 1]
        })
        .collect())
}

/// Per-pixel hard target or nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Argmax class, meaningful only where selected.
    pub class: Array2<u8>,
    pub selected: Array2<bool>,
}

impl PseudoLabel {
    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn num_selected_of(&self, cls: u8) -> usize {
        self.selected
            .iter()
            .zip(self.class.iter())
            .filter(|(&s, &c)| s && c == cls)
            .count()
    }

    /// `[2, H, W]` one-hot targets, all-zero at unselected pixels.
    pub fn onehot(&self) -> Array3<f32> {
        let (h, w) = self.class.dim();
        Array3::from_shape_fn((2, h, w), |(l, r, c)| {
            (self.selected[[r, c]] && self.class[[r, c]] as usize == l) as u8 as f32
        })
    }
}

/// Selects pixels whose entropy is at most the threshold of their argmax class.
pub fn apply_thresholds(p: &Array3<f32>, thresholds: &[f64]) -> Result<PseudoLabel> {
    if thresholds.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected 2 thresholds, got {}",
            thresholds.len()
        )));
    }
    let e = entropy_map(p)?;
    let class = argmax_class(p);
    let selected = ndarray::Zip::from(&class)
        .and(&e)
        .map_collect(|&cls, &ent| ent <= thresholds[cls as usize]);
    Ok(PseudoLabel { class, selected })
}

/// Pseudo-labels of one map with thresholds computed from that same map.
pub fn select_pseudo_labels(p: &Array3<f32>, k: usize) -> Result<PseudoLabel> {
    let mut acc = [Vec::new(), Vec::new()];
    collect_class_entropies(p, &mut acc)?;
    apply_thresholds(p, &decile_threshold(&acc, k)?)
}

/// `w_i = 1` where the foreground probability is below `rho` or the sparse target
/// heatmap is positive.
pub fn background_weight_map(p_fg: &Array2<f32>, target_heatmap: &Array2<f32>, rho: f64) -> Array2<f32> {
    ndarray::Zip::from(p_fg)
        .and(target_heatmap)
        .map_collect(|&p, &d| ((p as f64) < rho || d > 0.0) as u8 as f32)
}

/// Point-confidence map: Gaussians of bandwidth `sigma2` with peak `beta_peak`.
pub fn beta_map(pts: &PointSet, sigma2: f64, beta_peak: f64) -> Array2<f32> {
    render_heatmap(pts, sigma2).scaled(beta_peak as f32).into_inner()
}

fn scalar(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct SegLoss {
    pub source: Tensor,
    pub target: Tensor,
    pub total: Tensor,
}

/// Mean cross-entropy over source pixels plus mean cross-entropy over selected target
/// pixels. `y_s` and `pseudo_t` are one-hot `[B, 2, H, W]`; `pseudo_t` is zero at null
/// pixels. No selected pixels gives a zero target term.
pub fn seg_loss(
    log_probs_s: &Tensor,
    y_s: &Tensor,
    log_probs_t: Option<&Tensor>,
    pseudo_t: Option<&Tensor>,
) -> Result<SegLoss> {
    let (b, _, h, w) = log_probs_s.dims4()?;
    let dtype = log_probs_s.dtype();
    let source = ((log_probs_s * y_s)?.sum_all()? * (-1.0 / (b * h * w) as f64))?;
    let target = match (log_probs_t, pseudo_t) {
        (Some(lp), Some(y)) => {
            let n = y.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
            if n > 0.0 {
                ((lp * y)?.sum_all()? * (-1.0 / n))?
            } else {
                scalar(0.0, dtype)?
            }
        }
        _ => scalar(0.0, dtype)?,
    };
    let total = (&source + &target)?;
    Ok(SegLoss { source, target, total })
}

/// Constant per-pixel weights and targets of the detection loss for both domains,
/// each `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct DetectionTargets {
    pub source: Tensor,
    pub source_weight: Tensor,
    pub target: Tensor,
    pub target_weight: Tensor,
}

impl DetectionTargets {
    /// Source weight `1 + lambda beta_s`, target weight `w + lambda beta_t`.
    pub fn new(
        d_s: &[Array2<f32>],
        beta_s: &[Array2<f32>],
        d_t: &[Array2<f32>],
        w_t: &[Array2<f32>],
        beta_t: &[Array2<f32>],
        lambda_point: f64,
        dtype: DType,
    ) -> Result<Self> {
        let src_w: Vec<Array2<f32>> = beta_s
            .iter()
            .map(|b| b.mapv(|v| 1.0 + lambda_point as f32 * v))
            .collect();
        let tgt_w: Vec<Array2<f32>> = w_t
            .iter()
            .zip(beta_t)
            .map(|(w, b)| w + &b.mapv(|v| lambda_point as f32 * v))
            .collect();
        Ok(Self {
            source: stack(d_s, dtype)?,
            source_weight: stack(&src_w, dtype)?,
            target: stack(d_t, dtype)?,
            target_weight: stack(&tgt_w, dtype)?,
        })
    }
}

/// `[B, 1, H, W]` tensor from equally shaped arrays.
pub fn stack(maps: &[Array2<f32>], dtype: DType) -> Result<Tensor> {
    let (h, w) = maps.first().map(|m| m.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(Error::InvalidArgument("maps differ in shape".into()));
        }
        data.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[B, 2, H, W]` tensor from `[2, H, W]` arrays.
pub fn stack_onehot(maps: &[Array3<f32>], dtype: DType) -> Result<Tensor> {
    let (c, h, w) = maps.first().map(|m| m.dim()).unwrap_or((2, 0, 0));
    let data: Vec<f32> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (maps.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// One-hot `[2, H, W]` encoding of a binary mask (channel 1 = foreground).
pub fn mask_onehot(mask: &Array2<bool>) -> Array3<f32> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((2, h, w), |(l, r, c)| (mask[[r, c]] == (l == 1)) as u8 as f32)
}

#[derive(Debug, Clone)]
pub struct DetLoss {
    pub source: Tensor,
    pub target: Tensor,
    pub total: Tensor,
}

/// Weighted squared error of the detection maps, each term averaged over its pixels.
pub fn detection_loss(pred_s: &Tensor, pred_t: &Tensor, t: &DetectionTargets) -> Result<DetLoss> {
    let source = (pred_s - &t.source)?.sqr()?.mul(&t.source_weight)?.mean_all()?;
    let target = (pred_t - &t.target)?.sqr()?.mul(&t.target_weight)?.mean_all()?;
    let total = (&source + &target)?;
    Ok(DetLoss { source, target, total })
}

/// Hinge with a zero plateau of half-width `epsilon` around the prior count.
pub fn counting_consistency_value(t_hat: f64, t_prior: f64, epsilon: f64) -> f64 {
    ((t_prior - epsilon) - t_hat).max(0.0) + (t_hat - (t_prior + epsilon)).max(0.0)
}

/// Batch mean of the counting hinge; `t_hat: [B]`.
pub fn counting_consistency(t_hat: &Tensor, t_prior: &[f64], epsilon: f64) -> Result<Tensor> {
    let prior = Tensor::from_vec(t_prior.to_vec(), t_prior.len(), &Device::Cpu)?.to_dtype(t_hat.dtype())?;
    let below = (prior.affine(1.0, -epsilon)? - t_hat)?.relu()?;
    let above = (t_hat - prior.affine(1.0, epsilon)?)?.relu()?;
    Ok((below + above)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    /// Pushes target predictions toward the source label; differentiable in `p_t`.
    pub adv: Tensor,
    pub disc_source: Tensor,
    pub disc_target: Tensor,
    /// Mean of the two discriminator branches, computed on detached inputs.
    pub disc: Tensor,
}

/// Binary cross-entropy with logits against label 1 (`source = true`) or 0, averaged.
pub fn bce_with_logits(logits: &Tensor, source: bool) -> Result<Tensor> {
    let x = if source { logits.neg()? } else { logits.clone() };
    Ok(softplus(&x)?.mean_all()?)
}

/// Source is label 1 and target label 0 for the discriminator; the generator term labels
/// target predictions as source.
pub fn adversarial_losses(d: &Discriminator, p_s: &Tensor, p_t: &Tensor) -> Result<AdversarialLosses> {
    let adv = bce_with_logits(&d.forward(p_t)?, true)?;
    let disc_source = bce_with_logits(&d.forward(&p_s.detach())?, true)?;
    let disc_target = bce_with_logits(&d.forward(&p_t.detach())?, false)?;
    let disc = ((&disc_source + &disc_target)? * 0.5)?;
    Ok(AdversarialLosses {
        adv,
        disc_source,
        disc_target,
        disc,
    })
}

/// `1 - z / z_max`, clamped to 0 past the end of the schedule.
pub fn lambda_c(z: usize, z_max: usize) -> f64 {
    if z > z_max {
        log::warn!("iteration {z} is past z_max {z_max}; counting weight clamped to 0");
        return 0.0;
    }
    1.0 - z as f64 / z_max.max(1) as f64
}

/// Scalar terms of the overall objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub seg_source: f64,
    pub seg_pseudo: f64,
    pub adv: f64,
    pub det: f64,
    pub count: f64,
}

impl LossValues {
    pub fn total(&self, z: usize, z_max: usize, w: &LossWeights) -> f64 {
        self.seg_source
            + self.seg_pseudo
            + w.lambda_a * self.adv
            + w.lambda_d * self.det
            + lambda_c(z, z_max) * self.count
    }
}

/// Differentiable terms of the overall objective; absent terms are disabled.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub seg_source: Tensor,
    pub seg_pseudo: Option<Tensor>,
    pub adv: Option<Tensor>,
    pub det: Option<Tensor>,
    pub count: Option<Tensor>,
}

impl LossParts {
    pub fn values(&self) -> Result<LossValues> {
        let v = |t: &Option<Tensor>| -> Result<f64> {
            match t {
                Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
                None => Ok(0.0),
            }
        };
        Ok(LossValues {
            seg_source: self.seg_source.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            seg_pseudo: v(&self.seg_pseudo)?,
            adv: v(&self.adv)?,
            det: v(&self.det)?,
            count: v(&self.count)?,
        })
    }
}

/// `L_s + lambda_a L_adv + lambda_d L_d + lambda_c(z) L_c`.
pub fn total_objective(parts: &LossParts, z: usize, z_max: usize, w: &LossWeights) -> Result<Tensor> {
    let mut total = parts.seg_source.clone();
    let terms = [
        (&parts.seg_pseudo, 1.0),
        (&parts.adv, w.lambda_a),
        (&parts.det, w.lambda_d),
        (&parts.count, lambda_c(z, z_max)),
    ];
    for (t, weight) in terms {
        if let Some(t) = t {
            total = (total + (t * weight)?)?;
        }
    }
    Ok(total)
}
