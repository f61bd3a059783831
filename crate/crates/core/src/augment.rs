//! Training-time augmentation: cross-position cut-and-paste (CP-Aug), flips and
//! right-angle rotations, blur, intensity jitter, cropping and resampling.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::{in_window, InstanceMap, Point, PointSet};
use crate::error::{Error, Result};
use crate::synthdata::{gaussian_blur, DomainTag, ImageSample};

/// Grid stride of the CP-Aug window search.
pub const WINDOW_STRIDE: usize = 16;

/// Top-left corners of all `patch`-sized windows on the stride grid, row-major.
pub fn window_grid(height: usize, width: usize, patch: usize) -> Vec<(usize, usize)> {
    let rows = (0..=height - patch).step_by(WINDOW_STRIDE);
    rows.flat_map(|r| (0..=width - patch).step_by(WINDOW_STRIDE).map(move |c| (r, c)))
        .collect()
}

/// Window with the most points (`densest`) or fewest (`!densest`); ties go to the
/// smallest row, then column.
pub fn extremal_window(pts: &PointSet, patch: usize, densest: bool) -> (usize, usize) {
    let mut best: Option<((usize, usize), usize)> = None;
    for (r, c) in window_grid(pts.height(), pts.width(), patch) {
        let n = pts.count_in_window(r, c, patch);
        let better = match best {
            None => true,
            Some((_, bn)) if densest => n > bn,
            Some((_, bn)) => n < bn,
        };
        if better {
            best = Some(((r, c), n));
        }
    }
    best.expect("grid is never empty").0
}

/// Pastes the annotation-densest window of `a` over the sparsest window of `b`.
///
/// Points of `b` under the pasted window are dropped; points of `a` inside its window
/// move with the pixels.
pub fn cp_aug(a: &ImageSample, b: &ImageSample, patch: usize) -> Result<ImageSample> {
    let (h, w) = a.dim();
    if b.dim() != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "cp_aug size mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.domain != DomainTag::Target || b.domain != DomainTag::Target {
        return Err(Error::InvalidArgument("cp_aug expects target-domain samples".into()));
    }
    if patch == 0 || patch > h || patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not fit a {h}x{w} image"
        )));
    }
    let empty = PointSet::empty(h, w);
    let pa = a.points.as_ref().unwrap_or(&empty);
    let pb = b.points.as_ref().unwrap_or(&empty);
    let (ra, ca) = extremal_window(pa, patch, true);
    let (rb, cb) = extremal_window(pb, patch, false);

    let mut image = b.image.clone();
    image
        .slice_mut(s![rb..rb + patch, cb..cb + patch])
        .assign(&a.image.slice(s![ra..ra + patch, ca..ca + patch]));

    let dense_label = match (&a.dense_label, &b.dense_label) {
        (Some(la), Some(lb)) => {
            let mut l = lb.clone();
            l.slice_mut(s![rb..rb + patch, cb..cb + patch])
                .assign(&la.slice(s![ra..ra + patch, ca..ca + patch]));
            Some(l)
        }
        _ => None,
    };

    let mut points: Vec<Point> = pb.iter().filter(|p| !in_window(p, rb, cb, patch)).copied().collect();
    points.extend(
        pa.iter()
            .filter(|p| in_window(p, ra, ca, patch))
            .map(|p| Point::new(p.row - ra + rb, p.col - ca + cb)),
    );
    Ok(ImageSample {
        image,
        dense_label,
        instances: None,
        points: Some(PointSet::new(points, h, w)?),
        domain: DomainTag::Target,
    })
}

/// One draw of the photometric and geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricDraw {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub blur_sigma: Option<f32>,
    pub gain: f32,
    pub bias: f32,
}

impl GeometricDraw {
    pub const fn identity() -> Self {
        Self {
            flip_horizontal: false,
            flip_vertical: false,
            quarter_turns: 0,
            blur_sigma: None,
            gain: 1.0,
            bias: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            blur_sigma: rng.random_bool(0.3).then(|| rng.random_range(0.5..1.2)),
            gain: rng.random_range(0.8..1.2),
            bias: rng.random_range(-0.08..0.08),
        }
    }

    pub fn transform_array<T: Clone>(&self, a: &Array2<T>) -> Array2<T> {
        let mut out = a.clone();
        if self.flip_horizontal {
            out.invert_axis(ndarray::Axis(1));
        }
        if self.flip_vertical {
            out.invert_axis(ndarray::Axis(0));
        }
        for _ in 0..self.quarter_turns % 4 {
            // out'[i, j] = out[j, W-1-i]
            let mut v = out.view();
            v.invert_axis(ndarray::Axis(1));
            out = v.reversed_axes().to_owned();
        }
        out.as_standard_layout().to_owned()
    }

    pub fn transform_point(&self, p: Point, height: usize, width: usize) -> Point {
        let (mut r, mut c) = (p.row, p.col);
        let (mut h, mut w) = (height, width);
        if self.flip_horizontal {
            c = w - 1 - c;
        }
        if self.flip_vertical {
            r = h - 1 - r;
        }
        for _ in 0..self.quarter_turns % 4 {
            (r, c) = (w - 1 - c, r);
            (h, w) = (w, h);
        }
        Point::new(r, c)
    }

    pub fn apply(&self, s: &ImageSample) -> ImageSample {
        let (h, w) = s.dim();
        let mut image = self.transform_array(&s.image);
        if let Some(sigma) = self.blur_sigma {
            image = gaussian_blur(&image, sigma);
        }
        if self.gain != 1.0 || self.bias != 0.0 {
            image.mapv_inplace(|v| (v * self.gain + self.bias).clamp(0.0, 1.0));
        }
        let (nh, nw) = image.dim();
        ImageSample {
            image,
            dense_label: s.dense_label.as_ref().map(|l| self.transform_array(l)),
            instances: s
                .instances
                .as_ref()
                .map(|i| InstanceMap::from_raw(self.transform_array(i.labels()), i.count())),
            points: s.points.as_ref().map(|p| {
                let moved = p.iter().map(|&q| self.transform_point(q, h, w)).collect();
                PointSet::new(moved, nh, nw).expect("bijective transform keeps points valid")
            }),
            domain: s.domain,
        }
    }
}

/// Random flip/rotation plus image-only blur and intensity jitter, fixed by `seed`.
pub fn geometric_aug(s: &ImageSample, seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GeometricDraw::sample(&mut rng).apply(s)
}

/// Crops a `size`-square window at `(row, col)`; instance maps are dropped because
/// cropping can split instances.
pub fn crop(s: &ImageSample, row: usize, col: usize, size: usize) -> ImageSample {
    let win = s![row..row + size, col..col + size];
    ImageSample {
        image: s.image.slice(win).to_owned(),
        dense_label: s.dense_label.as_ref().map(|l| l.slice(win).to_owned()),
        instances: None,
        points: s.points.as_ref().map(|p| {
            let inside = p
                .iter()
                .filter(|q| in_window(q, row, col, size))
                .map(|q| Point::new(q.row - row, q.col - col))
                .collect();
            PointSet::new(inside, size, size).expect("cropped points stay unique")
        }),
        domain: s.domain,
    }
}

/// Bilinear resampling of an image to `height x width`.
pub fn resize_image(a: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = a.dim();
    if (h, w) == (height, width) {
        return a.clone();
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, a.iter().copied().collect())
        .expect("buffer length matches dimensions");
    let out = imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
    Array2::from_shape_vec((height, width), out.into_raw()).expect("buffer length matches dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn target(h: usize, w: usize, pts: &[(usize, usize)], fill: f32) -> ImageSample {
        ImageSample {
            image: Array2::from_elem((h, w), fill),
            dense_label: None,
            instances: None,
            points: Some(PointSet::new(pts.iter().map(|&(r, c)| Point::new(r, c)).collect(), h, w).unwrap()),
            domain: DomainTag::Target,
        }
    }

    #[test]
    fn empty_source_only_pastes_pixels() {
        let a = target(64, 64, &[], 0.9);
        let b = target(64, 64, &[(5, 5), (40, 40)], 0.1);
        let out = cp_aug(&a, &b, 32).unwrap();
        // (0, 0) holds (5, 5); (0, 16) is the first empty window in row-major order.
        let (rb, cb) = extremal_window(b.points.as_ref().unwrap(), 32, false);
        assert_eq!((rb, cb), (0, 16));
        let outside = b
            .points
            .as_ref()
            .unwrap()
            .iter()
            .filter(|p| !in_window(p, rb, cb, 32))
            .count();
        assert_eq!(out.num_points(), outside);
        assert_eq!(out.image[[rb, cb]], 0.9);
        assert_eq!(out.image[[63, 0]], 0.1);
    }

    #[test]
    fn all_source_points_transfer_to_empty_target() {
        let pts = [(130, 140), (200, 250), (170, 180), (140, 300)];
        let a = target(512, 512, &pts, 0.5);
        let b = target(512, 512, &[], 0.2);
        let out = cp_aug(&a, &b, 256).unwrap();
        assert_eq!(out.num_points(), pts.len());
        // First grid window covering all four points.
        assert_eq!(extremal_window(a.points.as_ref().unwrap(), 256, true), (0, 48));
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = target(64, 64, &[], 0.0);
        let b = target(64, 80, &[], 0.0);
        assert!(cp_aug(&a, &b, 32).is_err());
        assert!(cp_aug(&a, &a, 65).is_err());
    }

    #[test]
    fn identity_draw_is_noop() {
        let s = target(20, 30, &[(1, 2), (19, 29)], 0.4);
        assert_eq!(GeometricDraw::identity().apply(&s), s);
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let s = target(20, 30, &[(3, 4)], 0.4);
        let d = GeometricDraw {
            flip_horizontal: true,
            ..GeometricDraw::identity()
        };
        assert_eq!(d.apply(&s).points.unwrap().points(), &[Point::new(3, 25)]);
    }

    #[test]
    fn quarter_turn_matches_pixels() {
        let mut img = Array2::zeros((4, 6));
        img[[1, 4]] = 1.0f32;
        let mut s = target(4, 6, &[(1, 4)], 0.0);
        s.image = img;
        let d = GeometricDraw {
            quarter_turns: 1,
            ..GeometricDraw::identity()
        };
        let out = d.apply(&s);
        assert_eq!(out.dim(), (6, 4));
        let p = out.points.as_ref().unwrap().points()[0];
        assert_eq!(out.image[[p.row, p.col]], 1.0);
    }

    #[test]
    fn rotate_90_then_270_restores() {
        let mut s = target(10, 14, &[(2, 3), (9, 13), (0, 7)], 0.0);
        s.image = Array2::from_shape_fn((10, 14), |(r, c)| (r * 14 + c) as f32 / 140.0);
        s.dense_label = Some(s.image.mapv(|v| v > 0.5));
        let r90 = GeometricDraw {
            quarter_turns: 1,
            ..GeometricDraw::identity()
        };
        let r270 = GeometricDraw {
            quarter_turns: 3,
            ..GeometricDraw::identity()
        };
        assert_eq!(r270.apply(&r90.apply(&s)), s);
    }

    #[test]
    fn resize_keeps_constant_images() {
        let a = Array2::from_elem((16, 16), 0.25f32);
        let r = resize_image(&a, 24, 24);
        assert_eq!(r.dim(), (24, 24));
        assert!(r.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn crop_shifts_points() {
        let s = target(32, 32, &[(4, 4), (20, 25)], 0.3);
        let c = crop(&s, 16, 16, 16);
        assert_eq!(c.points.unwrap().points(), &[Point::new(4, 9)]);
    }

    proptest! {
        #[test]
        fn geometric_aug_preserves_point_count(
            raw in proptest::collection::vec((0usize..24, 0usize..40), 0..8),
            seed in any::<u64>(),
        ) {
            let mut v: Vec<(usize, usize)> = raw;
            v.sort();
            v.dedup();
            let s = target(24, 40, &v, 0.5);
            let out = geometric_aug(&s, seed);
            prop_assert_eq!(out.num_points(), s.num_points());
            prop_assert_eq!(&out, &geometric_aug(&s, seed));
        }
    }
}
