//! Mask clean-up: morphological open/close, detection-guided component filtering and
//! instance extraction. All connectivity is 4-connectivity.

use image::{GrayImage, ImageBuffer, Luma};
use imageproc::distance_transform::Norm;
use imageproc::morphology;
use imageproc::region_labelling::{connected_components, Connectivity};
use ndarray::Array2;

use crate::annotations::{InstanceMap, PointSet};

pub const DEFAULT_RADIUS: usize = 1;

fn to_gray(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    ImageBuffer::from_raw(
        w as u32,
        h as u32,
        mask.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("buffer length matches dimensions")
}

fn from_gray(img: &GrayImage) -> Array2<bool> {
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.pixels().map(|p| p.0[0] > 0).collect())
        .expect("buffer length matches dimensions")
}

/// Labels 4-connected foreground components `1..=N` in row-major discovery order.
pub fn label_components(mask: &Array2<bool>) -> InstanceMap {
    let (h, w) = mask.dim();
    let raw = connected_components(&to_gray(mask), Connectivity::Four, Luma([0u8]));
    // Relabel by first appearance so ids never depend on the labelling internals.
    let mut remap = std::collections::HashMap::new();
    let mut labels = Array2::<u32>::zeros((h, w));
    for (i, p) in raw.pixels().enumerate() {
        let id = p.0[0];
        if id == 0 {
            continue;
        }
        let next = remap.len() as u32 + 1;
        let new = *remap.entry(id).or_insert(next);
        labels[[i / w, i % w]] = new;
    }
    InstanceMap::from_raw(labels, remap.len())
}

/// Keeps exactly the foreground components that contain at least one peak.
pub fn filter_with_peaks(mask: &Array2<bool>, peaks: &PointSet) -> Array2<bool> {
    let comps = label_components(mask);
    let mut keep = vec![false; comps.count() + 1];
    for p in peaks.iter() {
        if let Some(&id) = comps.labels().get([p.row, p.col]) {
            keep[id as usize] = id > 0;
        }
    }
    comps.labels().mapv(|id| keep[id as usize])
}

/// Opening followed by closing with a square structuring element of side `2 * radius + 1`.
pub fn open_close(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    assert!(radius >= 1, "radius must be at least 1");
    let k = u8::try_from(radius).expect("radius fits in u8");
    let img = to_gray(mask);
    let opened = morphology::open(&img, Norm::LInf, k);
    from_gray(&morphology::close(&opened, Norm::LInf, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Point;
    use ndarray::s;
    use proptest::prelude::*;

    fn two_blobs() -> Array2<bool> {
        let mut m = Array2::from_elem((12, 12), false);
        m.slice_mut(s![1..4, 1..4]).fill(true);
        m.slice_mut(s![7..11, 6..10]).fill(true);
        m
    }

    #[test]
    fn labels_follow_raster_order() {
        let mut m = Array2::from_elem((4, 4), false);
        m[[0, 3]] = true;
        m[[2, 0]] = true;
        m[[2, 1]] = true;
        let l = label_components(&m);
        assert_eq!(l.count(), 2);
        assert_eq!(l.labels()[[0, 3]], 1);
        assert_eq!(l.labels()[[2, 0]], 2);
        // Diagonal neighbours are separate components.
        let mut d = Array2::from_elem((2, 2), false);
        d[[0, 0]] = true;
        d[[1, 1]] = true;
        assert_eq!(label_components(&d).count(), 2);
    }

    #[test]
    fn no_peaks_clears_everything() {
        let out = filter_with_peaks(&two_blobs(), &PointSet::empty(12, 12));
        assert!(out.iter().all(|&b| !b));
    }

    #[test]
    fn only_peaked_component_survives() {
        let m = two_blobs();
        let peaks = PointSet::new(vec![Point::new(2, 2)], 12, 12).unwrap();
        let out = filter_with_peaks(&m, &peaks);
        assert!(out[[2, 2]]);
        assert!(!out[[8, 8]]);
        assert_eq!(out.iter().filter(|&&b| b).count(), 9);
    }

    #[test]
    fn all_components_peaked_is_identity() {
        let m = two_blobs();
        let peaks = PointSet::new(vec![Point::new(2, 2), Point::new(9, 9), Point::new(0, 0)], 12, 12).unwrap();
        assert_eq!(filter_with_peaks(&m, &peaks), m);
    }

    #[test]
    fn opening_removes_single_pixel() {
        let mut m = Array2::from_elem((9, 9), false);
        m[[4, 4]] = true;
        assert!(open_close(&m, 1).iter().all(|&b| !b));
    }

    #[test]
    fn large_square_unchanged() {
        let mut m = Array2::from_elem((20, 20), false);
        m.slice_mut(s![5..15, 4..12]).fill(true);
        assert_eq!(open_close(&m, 1), m);
        let mut edge = Array2::from_elem((20, 20), false);
        edge.slice_mut(s![0..6, 0..6]).fill(true);
        assert_eq!(open_close(&edge, 2), edge);
    }

    #[test]
    fn closing_fills_pinhole() {
        let mut m = Array2::from_elem((20, 20), false);
        m.slice_mut(s![4..16, 4..16]).fill(true);
        let mut holed = m.clone();
        holed[[9, 9]] = false;
        assert_eq!(open_close(&holed, 1), m);
    }

    fn random_mask() -> impl Strategy<Value = Array2<bool>> {
        proptest::collection::vec(any::<bool>(), 16 * 16).prop_map(|v| Array2::from_shape_vec((16, 16), v).unwrap())
    }

    proptest! {
        #[test]
        fn filtering_is_subtractive_and_idempotent(
            m in random_mask(),
            raw in proptest::collection::vec((0usize..16, 0usize..16), 0..5),
        ) {
            let mut v: Vec<Point> = raw.iter().map(|&(r, c)| Point::new(r, c)).collect();
            v.sort();
            v.dedup();
            let peaks = PointSet::new(v, 16, 16).unwrap();
            let once = filter_with_peaks(&m, &peaks);
            prop_assert!(once.iter().zip(m.iter()).all(|(&o, &i)| !o || i));
            prop_assert_eq!(filter_with_peaks(&once, &peaks), once);
        }

        #[test]
        fn open_close_is_idempotent(m in random_mask(), radius in 1usize..3) {
            let once = open_close(&m, radius);
            prop_assert_eq!(open_close(&once, radius), once);
        }

        #[test]
        fn labelling_is_valid(m in random_mask()) {
            let l = label_components(&m);
            prop_assert_eq!(l.foreground(), m);
            prop_assert!(InstanceMap::new(l.labels().clone()).is_ok());
        }
    }
}
