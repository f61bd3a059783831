//! File formats: grayscale PNG, instance PNG, point CSV and raw `.npy` arrays.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use ndarray_npy::WritableElement;

use crate::annotations::{InstanceMap, Point, PointSet};
use crate::error::{Error, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save_image<P: image::PixelWithColorType>(path: &Path, img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
where
    P::Subpixel: image::Primitive,
    [P::Subpixel]: image::EncodableLayout,
{
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::format(path, e))
}

/// Writes values in `[0, 1]` as a 16-bit single-channel PNG.
pub fn write_gray16(path: &Path, values: &Array2<f32>) -> Result<()> {
    let (h, w) = values.dim();
    let buf: Vec<u16> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer length matches dimensions");
    save_image(path, &img)
}

/// Reads any single-image file as grayscale scaled to `[0, 1]` by its type range.
pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("buffer length matches dimensions"))
}

pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = mask.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer length matches dimensions");
    save_image(path, &img)
}

/// Color overlay of a prediction on its image: true positives green, false positives
/// red, false negatives blue, each blended at half opacity over the grayscale image.
pub fn write_overlay(path: &Path, image: &Array2<f32>, gt: &Array2<bool>, pred: &Array2<bool>) -> Result<()> {
    let (h, w) = image.dim();
    if gt.dim() != (h, w) || pred.dim() != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "overlay shapes differ: image {:?}, gt {:?}, pred {:?}",
            image.dim(),
            gt.dim(),
            pred.dim()
        )));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for ((&v, &g), &p) in image.iter().zip(gt).zip(pred) {
        let base = v.clamp(0.0, 1.0) * 255.0;
        let tint = match (g, p) {
            (true, true) => Some([0.0, 255.0, 0.0]),
            (false, true) => Some([255.0, 0.0, 0.0]),
            (true, false) => Some([0.0, 0.0, 255.0]),
            (false, false) => None,
        };
        for k in 0..3 {
            let c = tint.map_or(base, |t: [f32; 3]| 0.5 * base + 0.5 * t[k]);
            buf.push(c.round() as u8);
        }
    }
    let img: ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer length matches dimensions");
    save_image(path, &img)
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(read_gray(path)?.mapv(|v| v > 0.0))
}

/// Instance ids as a 16-bit PNG.
pub fn write_instances(path: &Path, inst: &InstanceMap) -> Result<()> {
    if inst.count() > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} instances do not fit a 16-bit PNG",
            inst.count()
        )));
    }
    let (h, w) = inst.dim();
    let buf = inst.labels().iter().map(|&v| v as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer length matches dimensions");
    save_image(path, &img)
}

pub fn read_instances(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    let labels = Array2::from_shape_vec(
        (h as usize, w as usize),
        img.into_raw().into_iter().map(u32::from).collect(),
    )
    .expect("buffer length matches dimensions");
    InstanceMap::new(labels).map_err(|e| Error::format(path, e))
}

/// Point CSV with header `row,col`.
pub fn write_points(path: &Path, pts: &PointSet) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    if pts.is_empty() {
        w.write_record(["row", "col"]).map_err(|e| Error::format(path, e))?;
    }
    for p in pts.iter() {
        w.serialize(p).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path, height: usize, width: usize) -> Result<PointSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let points = r
        .deserialize::<Point>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e))?;
    PointSet::new(points, height, width).map_err(|e| Error::format(path, e))
}

/// Raw dense array as `.npy`.
pub fn write_npy<T: WritableElement>(path: &Path, values: &Array2<T>) -> Result<()> {
    ensure_parent(path)?;
    ndarray_npy::write_npy(path, values).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        let pts = PointSet::new(vec![Point::new(3, 4), Point::new(0, 9)], 10, 10).unwrap();
        write_points(&p, &pts).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("row,col\n3,4\n"));
        assert_eq!(read_points(&p, 10, 10).unwrap(), pts);

        let empty = PointSet::empty(10, 10);
        write_points(&p, &empty).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "row,col\n");
        assert_eq!(read_points(&p, 10, 10).unwrap(), empty);
    }

    #[test]
    fn gray16_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let v = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) as f32 / 34.0);
        write_gray16(&p, &v).unwrap();
        let back = read_gray(&p).unwrap();
        assert_eq!(back.dim(), (5, 7));
        assert!(back
            .iter()
            .zip(v.iter())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 65535.0 + 1e-7));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_gray(Path::new("/nonexistent/slice.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/slice.png"));
    }

    #[test]
    fn overlay_colors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        let img = Array2::from_elem((1, 4), 0.0f32);
        let gt = ndarray::arr2(&[[true, false, true, false]]);
        let pred = ndarray::arr2(&[[true, true, false, false]]);
        write_overlay(&p, &img, &gt, &pred).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        let px: Vec<[u8; 3]> = back.pixels().map(|p| p.0).collect();
        assert_eq!(px, vec![[0, 128, 0], [128, 0, 0], [0, 0, 128], [0, 0, 0]]);
    }
}
