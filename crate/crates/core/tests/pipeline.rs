use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use wdaseg_core::annotations::{detect_peaks, instance_centers, render_heatmap};
use wdaseg_core::augment::cp_aug;
use wdaseg_core::metrics::MetricAccumulator;
use wdaseg_core::postprocess::{filter_with_peaks, label_components};
use wdaseg_core::synthdata::{make_benchmark, Benchmark, BenchmarkSpec};

fn small_spec() -> BenchmarkSpec {
    let mut spec = BenchmarkSpec::desk_default(5);
    spec.n_source = 2;
    spec.n_target_train = 4;
    spec.n_target_test = 2;
    spec.size = 128;
    spec.annotation_ratio = 0.5;
    spec
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Images are quantized on the first save; after that the on-disk form is a fixed point.
#[test]
fn reloaded_benchmark_saves_byte_identically() {
    let bench = make_benchmark(&small_spec()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    bench.save(a.path()).unwrap();
    Benchmark::load(a.path()).unwrap().save(b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn sparse_points_are_a_subset_of_instance_centers() {
    let bench = make_benchmark(&small_spec()).unwrap();
    for s in &bench.target_train {
        let pts = s.points.as_ref().unwrap();
        assert!(s.dense_label.is_none());
        if let Some(inst) = &s.instances {
            let all = instance_centers(inst);
            assert!(pts.iter().all(|p| all.contains(p)));
        }
    }
}

#[test]
fn ground_truth_scores_perfectly_and_survives_center_filtering() {
    let bench = make_benchmark(&small_spec()).unwrap();
    let mut acc = MetricAccumulator::new();
    for s in &bench.target_test {
        let inst = s.instances.as_ref().unwrap();
        let centers = instance_centers(inst);
        let peaks = detect_peaks(&render_heatmap(&centers, 4.0), 0.3, 1);
        let mask = filter_with_peaks(&inst.foreground(), &peaks);
        let pred = label_components(&mask);
        acc.add(s.dense_label.as_ref().unwrap(), &mask, inst, &pred, inst.count() as f64)
            .unwrap();
    }
    let r = acc.finish();
    assert_eq!((r.dsc, r.mean_count_error), (1.0, 0.0));
    assert!(r.aji > 0.9 && r.pq > 0.9, "{r:?}");
}

#[test]
fn cp_aug_on_generated_targets_keeps_shape_and_points_in_bounds() {
    let bench = make_benchmark(&small_spec()).unwrap();
    let (a, b) = (&bench.target_train[0], &bench.target_train[1]);
    let out = cp_aug(a, b, 64).unwrap();
    assert_eq!(out.dim(), b.dim());
    let pts = out.points.as_ref().unwrap();
    assert!(pts.iter().all(|p| p.row < 128 && p.col < 128));
    assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
}
