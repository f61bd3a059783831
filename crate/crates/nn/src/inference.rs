//! Prediction with optional detection-guided filtering, and test-set evaluation.

use std::path::Path;

use candle_core::DType;
use ndarray::Array2;
use wdaseg_core::annotations::{detect_peaks, Heatmap, InstanceMap, PointSet};
use wdaseg_core::io::write_overlay;
use wdaseg_core::metrics::{EvalReport, MetricAccumulator};
use wdaseg_core::postprocess::{filter_with_peaks, label_components, open_close, DEFAULT_RADIUS};
use wdaseg_core::synthdata::ImageSample;

use crate::error::{Error, Result};
use crate::networks::{image_tensor, to_array, G1};
use crate::ops::flush_denormals;

/// Post-processing settings of [`predict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Morphological clean-up plus removal of components without a detected center.
    pub filter: bool,
    pub peak_threshold: f32,
    /// Minimum separation of detected centers, in pixels.
    pub peak_distance: usize,
}

impl PredictOptions {
    pub fn new(filter: bool, peak_threshold: f64, sigma1: f64) -> Self {
        Self {
            filter,
            peak_threshold: peak_threshold as f32,
            peak_distance: (2.0 * sigma1).round().max(1.0) as usize,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub foreground_prob: Array2<f32>,
    pub mask: Array2<bool>,
    pub instances: InstanceMap,
    pub peaks: PointSet,
    /// Count estimate of the counting readout.
    pub count: f64,
}

pub fn predict(g1: &G1, image: &Array2<f32>, opts: PredictOptions) -> Result<Prediction> {
    flush_denormals();
    let out = g1.forward(&image_tensor(image, g1.params().dtype())?)?;
    let log_probs = out.log_probs.detach();
    let foreground_prob = to_array(&log_probs, 0, 1)?.mapv(f32::exp);
    let bg = to_array(&log_probs, 0, 0)?;
    // Ties go to background, matching the pseudo-label class rule.
    let fg = to_array(&log_probs, 0, 1)?;
    let mut mask = ndarray::Zip::from(&fg).and(&bg).map_collect(|&f, &b| f > b);
    let heat = Heatmap(to_array(&out.heatmap_clamped()?.detach(), 0, 0)?);
    let peaks = detect_peaks(&heat, opts.peak_threshold, opts.peak_distance);
    if opts.filter {
        mask = filter_with_peaks(&open_close(&mask, DEFAULT_RADIUS), &peaks);
    }
    let instances = label_components(&mask);
    let count = out.count.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
    Ok(Prediction {
        foreground_prob,
        mask,
        instances,
        peaks,
        count,
    })
}

/// Pooled metrics over labeled samples; when `overlay_dir` is set, writes one overlay
/// PNG per image.
pub fn evaluate(
    g1: &G1,
    samples: &[ImageSample],
    opts: PredictOptions,
    overlay_dir: Option<&Path>,
) -> Result<EvalReport> {
    let mut acc = MetricAccumulator::new();
    for (i, s) in samples.iter().enumerate() {
        let (Some(gt_mask), Some(gt)) = (&s.dense_label, &s.instances) else {
            return Err(Error::Validation(format!(
                "test image {i} lacks dense labels or instances"
            )));
        };
        let pred = predict(g1, &s.image, opts)?;
        acc.add(gt_mask, &pred.mask, gt, &pred.instances, pred.count)?;
        if let Some(dir) = overlay_dir {
            write_overlay(&dir.join(format!("{i:04}.png")), &s.image, gt_mask, &pred.mask)?;
        }
    }
    Ok(acc.finish())
}

/// Writes `report` as pretty JSON.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
