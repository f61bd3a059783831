//! Data-side building blocks for weakly supervised domain-adaptive segmentation:
//! point annotations and heatmaps, a synthetic source/target benchmark, augmentation,
//! mask post-processing and instance metrics.

pub mod annotations;
pub mod augment;
pub mod error;
pub mod io;
pub mod metrics;
pub mod postprocess;
pub mod seed;
pub mod synthdata;

pub use annotations::{
    detect_peaks, instance_centers, render_heatmap, sample_sparse_points, Heatmap, InstanceMap, Point, PointSet,
};
pub use error::{Error, Result};
pub use synthdata::{Benchmark, BenchmarkSpec, DomainSpec, DomainTag, ImageSample};
