//! Class-level (DSC) and instance-level (AJI, PQ) segmentation metrics.
//!
//! Per-image functions return plain values; [`MetricAccumulator`] pools the underlying
//! counts across a test set so that dataset scores are ratios of sums.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::annotations::InstanceMap;
use crate::error::{Error, Result};

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Dice similarity, `2|a∩b| / (|a|+|b|)`; 1 when both masks are empty.
pub fn dsc(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    let c = DiceCounts::new(a, b)?;
    Ok(c.score())
}

#[derive(Debug, Clone, Copy, Default)]
struct DiceCounts {
    intersection: u64,
    total: u64,
}

impl DiceCounts {
    fn new(a: &Array2<bool>, b: &Array2<bool>) -> Result<Self> {
        check_shape(a.dim(), b.dim())?;
        let mut c = DiceCounts::default();
        for (&x, &y) in a.iter().zip(b.iter()) {
            c.intersection += (x && y) as u64;
            c.total += x as u64 + y as u64;
        }
        Ok(c)
    }

    fn score(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / self.total as f64
        }
    }
}

/// Pixel overlap counts between every gt and predicted instance.
struct Overlap {
    /// `inter[g][p]` for ids starting at 1; row/column 0 is background.
    inter: Vec<Vec<u64>>,
    gt_area: Vec<u64>,
    pred_area: Vec<u64>,
}

impl Overlap {
    fn new(gt: &InstanceMap, pred: &InstanceMap) -> Result<Self> {
        check_shape(gt.dim(), pred.dim())?;
        let (ng, np) = (gt.count(), pred.count());
        let mut inter = vec![vec![0u64; np + 1]; ng + 1];
        for (&g, &p) in gt.labels().iter().zip(pred.labels().iter()) {
            inter[g as usize][p as usize] += 1;
        }
        let gt_area = inter.iter().map(|row| row.iter().sum()).collect();
        let pred_area = (0..=np).map(|p| inter.iter().map(|row| row[p]).sum()).collect();
        Ok(Self {
            inter,
            gt_area,
            pred_area,
        })
    }

    fn union(&self, g: usize, p: usize) -> u64 {
        self.gt_area[g] + self.pred_area[p] - self.inter[g][p]
    }

    fn iou(&self, g: usize, p: usize) -> f64 {
        self.inter[g][p] as f64 / self.union(g, p) as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct AjiCounts {
    intersection: u64,
    union: u64,
}

impl AjiCounts {
    fn new(gt: &InstanceMap, pred: &InstanceMap) -> Result<Self> {
        let o = Overlap::new(gt, pred)?;
        let (ng, np) = (gt.count(), pred.count());
        let mut used = vec![false; np + 1];
        let mut c = AjiCounts::default();
        for g in 1..=ng {
            let mut best: Option<(f64, usize)> = None;
            for p in 1..=np {
                if used[p] || o.inter[g][p] == 0 {
                    continue;
                }
                let j = o.iou(g, p);
                if best.is_none_or(|(bj, _)| j > bj) {
                    best = Some((j, p));
                }
            }
            match best {
                Some((_, p)) => {
                    used[p] = true;
                    c.intersection += o.inter[g][p];
                    c.union += o.union(g, p);
                }
                None => c.union += o.gt_area[g],
            }
        }
        for p in 1..=np {
            if !used[p] {
                c.union += o.pred_area[p];
            }
        }
        Ok(c)
    }

    fn score(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Aggregated Jaccard index with greedy one-to-one matching.
///
/// Ground-truth instances are visited in ascending id and take the unused prediction
/// with the highest Jaccard (ties to the smaller id). Unmatched predictions add their
/// area to the denominator.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    Ok(AjiCounts::new(gt, pred)?.score())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PqCounts {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl PqCounts {
    fn new(gt: &InstanceMap, pred: &InstanceMap) -> Result<Self> {
        let o = Overlap::new(gt, pred)?;
        let (ng, np) = (gt.count(), pred.count());
        let mut c = PqCounts::default();
        // IoU > 0.5 admits at most one partner per instance, so no assignment is needed.
        for g in 1..=ng {
            for p in 1..=np {
                if o.inter[g][p] > 0 {
                    let iou = o.iou(g, p);
                    if iou > 0.5 {
                        c.tp += 1;
                        c.iou_sum += iou;
                    }
                }
            }
        }
        c.fp = np - c.tp;
        c.fn_ = ng - c.tp;
        Ok(c)
    }

    fn scores(&self) -> PanopticQuality {
        if self.tp + self.fp + self.fn_ == 0 {
            return PanopticQuality {
                pq: 1.0,
                sq: 1.0,
                rq: 1.0,
            };
        }
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        let sq = if self.tp > 0 {
            self.iou_sum / self.tp as f64
        } else {
            0.0
        };
        PanopticQuality {
            pq: self.iou_sum / denom,
            sq,
            rq: self.tp as f64 / denom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Panoptic quality with matches at IoU > 0.5; both maps empty scores 1.
pub fn pq(gt: &InstanceMap, pred: &InstanceMap) -> Result<PanopticQuality> {
    Ok(PqCounts::new(gt, pred)?.scores())
}

pub fn count_error(pred_count: f64, gt_count: usize) -> f64 {
    (pred_count.round() - gt_count as f64).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub dsc: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pred_count: f64,
    pub gt_count: usize,
    pub count_error: f64,
}

/// Contents of `eval/metrics.json`. Top-level scores are pooled over the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dsc: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub mean_count_error: f64,
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Debug, Default)]
pub struct MetricAccumulator {
    dice: DiceCounts,
    aji: AjiCounts,
    pq: PqCounts,
    per_image: Vec<ImageMetrics>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        gt_mask: &Array2<bool>,
        pred_mask: &Array2<bool>,
        gt: &InstanceMap,
        pred: &InstanceMap,
        pred_count: f64,
    ) -> Result<&ImageMetrics> {
        let d = DiceCounts::new(gt_mask, pred_mask)?;
        let a = AjiCounts::new(gt, pred)?;
        let p = PqCounts::new(gt, pred)?;
        self.dice.intersection += d.intersection;
        self.dice.total += d.total;
        self.aji.intersection += a.intersection;
        self.aji.union += a.union;
        self.pq.iou_sum += p.iou_sum;
        self.pq.tp += p.tp;
        self.pq.fp += p.fp;
        self.pq.fn_ += p.fn_;
        let q = p.scores();
        self.per_image.push(ImageMetrics {
            index: self.per_image.len(),
            dsc: d.score(),
            aji: a.score(),
            pq: q.pq,
            sq: q.sq,
            rq: q.rq,
            pred_count,
            gt_count: gt.count(),
            count_error: count_error(pred_count, gt.count()),
        });
        Ok(self.per_image.last().expect("just pushed"))
    }

    pub fn finish(self) -> EvalReport {
        let q = self.pq.scores();
        let n = self.per_image.len().max(1) as f64;
        EvalReport {
            dsc: self.dice.score(),
            aji: self.aji.score(),
            pq: q.pq,
            sq: q.sq,
            rq: q.rq,
            mean_count_error: self.per_image.iter().map(|m| m.count_error).sum::<f64>() / n,
            per_image: self.per_image,
        }
    }
}
