//! Synthetic two-domain benchmark and image-stack ingestion.
//!
//! Each domain draws non-overlapping ragged elliptical blobs over a smooth textured
//! background. Source and target differ only through their [`DomainSpec`], so the
//! domain gap is a dial: contrast, texture and noise.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use imageproc::filter::gaussian_blur_f32;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotations::{instance_centers, sample_sparse_points, InstanceMap, PointSet};
use crate::error::{Error, Result};
use crate::io;
use crate::postprocess::label_components;
use crate::seed::derive_seed;

const MAX_PLACEMENT_TRIES: usize = 500;
/// Minimum background gap between blobs, in pixels.
const BLOB_GAP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensity {
    pub mean: f64,
    pub std: f64,
}

/// Appearance and geometry of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub blob_count_range: (usize, usize),
    /// Semi-axis range in pixels.
    pub blob_radius_range: (f64, f64),
    /// Relative amplitude of the boundary perturbation; 0 gives clean ellipses.
    pub boundary_raggedness: f64,
    pub foreground_intensity: Intensity,
    pub background_intensity: f64,
    /// Correlation length of the background texture, in pixels.
    pub background_texture_scale: f64,
    /// Standard deviation of the background texture before contrast is applied.
    pub texture_strength: f64,
    /// Scales every intensity around mid-gray.
    pub contrast: f64,
    pub noise_std: f64,
}

impl DomainSpec {
    /// Bright blobs on a smooth dark background.
    pub fn source_default() -> Self {
        Self {
            blob_count_range: (4, 9),
            blob_radius_range: (6.0, 12.0),
            boundary_raggedness: 0.12,
            foreground_intensity: Intensity { mean: 0.72, std: 0.05 },
            background_intensity: 0.32,
            background_texture_scale: 10.0,
            texture_strength: 0.04,
            contrast: 1.0,
            noise_std: 0.03,
        }
    }

    /// Lower contrast, coarser and stronger texture and more noise than the source.
    pub fn target_default() -> Self {
        Self {
            blob_count_range: (4, 9),
            blob_radius_range: (6.0, 12.0),
            boundary_raggedness: 0.2,
            foreground_intensity: Intensity { mean: 0.64, std: 0.06 },
            background_intensity: 0.40,
            background_texture_scale: 5.0,
            texture_strength: 0.07,
            contrast: 0.8,
            noise_std: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::Generation {
                field,
                reason: reason.to_string(),
            })
        };
        let (cmin, cmax) = self.blob_count_range;
        if cmin > cmax {
            return bad("blob_count_range", "min exceeds max");
        }
        let (rmin, rmax) = self.blob_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return bad("blob_radius_range", "need 0 < min <= max");
        }
        if !(self.boundary_raggedness >= 0.0 && self.boundary_raggedness < 1.0) {
            return bad("boundary_raggedness", "must lie in [0, 1)");
        }
        let fg = self.foreground_intensity;
        if !(fg.mean.is_finite() && fg.std >= 0.0 && fg.std.is_finite()) {
            return bad("foreground_intensity", "mean must be finite and std >= 0");
        }
        if !self.background_intensity.is_finite() {
            return bad("background_intensity", "must be finite");
        }
        if !(self.background_texture_scale > 0.0 && self.background_texture_scale.is_finite()) {
            return bad("background_texture_scale", "must be positive");
        }
        if !(self.texture_strength >= 0.0 && self.texture_strength.is_finite()) {
            return bad("texture_strength", "must be >= 0");
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return bad("contrast", "must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// One grayscale image with whatever annotation its split carries.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Array2<f32>,
    pub dense_label: Option<Array2<bool>>,
    pub instances: Option<InstanceMap>,
    pub points: Option<PointSet>,
    pub domain: DomainTag,
}

impl ImageSample {
    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn num_points(&self) -> usize {
        self.points.as_ref().map_or(0, PointSet::len)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values outside [0, 1]".into()));
        }
        if let Some(l) = &self.dense_label {
            if l.dim() != dim {
                return Err(Error::Validation("label shape differs from image".into()));
            }
        }
        if let Some(inst) = &self.instances {
            if inst.dim() != dim {
                return Err(Error::Validation("instance shape differs from image".into()));
            }
            if let Some(l) = &self.dense_label {
                if *l != inst.foreground() {
                    return Err(Error::Validation("dense label differs from instance foreground".into()));
                }
            }
            if let Some(p) = &self.points {
                let centers = instance_centers(inst);
                if !p.iter().all(|q| centers.contains(q)) {
                    return Err(Error::Validation("points are not instance centers".into()));
                }
            }
        }
        if let Some(p) = &self.points {
            if (p.height(), p.width()) != dim {
                return Err(Error::Validation("point set shape differs from image".into()));
            }
        }
        Ok(())
    }
}

fn to_luma_f32(a: &Array2<f32>) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    let (h, w) = a.dim();
    ImageBuffer::from_raw(w as u32, h as u32, a.iter().copied().collect()).expect("buffer length matches dimensions")
}

fn from_luma_f32(img: ImageBuffer<Luma<f32>, Vec<f32>>) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("buffer length matches dimensions")
}

pub(crate) fn gaussian_blur(a: &Array2<f32>, sigma: f32) -> Array2<f32> {
    from_luma_f32(gaussian_blur_f32(&to_luma_f32(a), sigma))
}

/// Smooth zero-mean noise field with unit standard deviation.
fn texture_field(size: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let white = Array2::from_shape_simple_fn((size, size), || StandardNormal.sample(&mut *rng));
    let mut t = gaussian_blur(&white, scale as f32);
    let mean = t.mean().unwrap_or(0.0);
    t.mapv_inplace(|v| v - mean);
    let std = (t.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
    if std > 0.0 {
        t.mapv_inplace(|v| v / std);
    }
    t
}

/// Rasterised ragged ellipse, as pixel offsets from its center.
fn blob_shape(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<(isize, isize)> {
    let (rmin, rmax) = spec.blob_radius_range;
    let a = rng.random_range(rmin..=rmax);
    let b = rng.random_range(rmin..=rmax);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let harmonics: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| {
            (
                k as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let norm: f64 = harmonics.iter().map(|h| h.1.abs()).sum::<f64>().max(1e-9);
    let rag = spec.boundary_raggedness;
    let bound = (a.max(b) * (1.0 + rag)).ceil() as isize + 1;
    let (st, ct) = theta.sin_cos();
    let mut px = Vec::new();
    for dr in -bound..=bound {
        for dc in -bound..=bound {
            let (y, x) = (dr as f64, dc as f64);
            let u = x * ct + y * st;
            let v = -x * st + y * ct;
            let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let phi = v.atan2(u);
            let wobble: f64 = harmonics
                .iter()
                .map(|&(k, amp, ph)| amp * (k * phi + ph).sin())
                .sum::<f64>()
                / norm;
            if rho <= 1.0 + rag * wobble {
                px.push((dr, dc));
            }
        }
    }
    // Keep the largest 4-connected piece so every instance is connected.
    let side = (2 * bound + 1) as usize;
    let mut local = Array2::from_elem((side, side), false);
    for &(dr, dc) in &px {
        local[[(dr + bound) as usize, (dc + bound) as usize]] = true;
    }
    let comps = label_components(&local);
    let areas = comps.areas();
    let Some(best) = (1..areas.len()).max_by_key(|&i| (areas[i], std::cmp::Reverse(i))) else {
        return vec![(0, 0)];
    };
    comps
        .labels()
        .indexed_iter()
        .filter(|(_, &id)| id as usize == best)
        .map(|((r, c), _)| (r as isize - bound, c as isize - bound))
        .collect()
}

fn generate_one(spec: &DomainSpec, size: usize, seed: u64, domain: DomainTag) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cmin, cmax) = spec.blob_count_range;
    let n_blobs = rng.random_range(cmin..=cmax);

    let mut labels = Array2::<u32>::zeros((size, size));
    // Pixels within BLOB_GAP of an existing blob.
    let mut blocked = Array2::from_elem((size, size), false);
    let mut fg_levels = Vec::with_capacity(n_blobs);
    let fg = Normal::new(spec.foreground_intensity.mean, spec.foreground_intensity.std).expect("validated std");
    for id in 1..=n_blobs as u32 {
        let shape = blob_shape(spec, &mut rng);
        let reach = shape.iter().map(|&(r, c)| r.abs().max(c.abs())).max().unwrap_or(0) as usize;
        if 2 * reach + 1 >= size {
            return Err(Error::Generation {
                field: "blob_radius_range",
                reason: format!("blob of reach {reach} does not fit a {size}px image"),
            });
        }
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let cr = rng.random_range(reach..size - reach) as isize;
            let cc = rng.random_range(reach..size - reach) as isize;
            let fits = shape
                .iter()
                .all(|&(r, c)| !blocked[[(cr + r) as usize, (cc + c) as usize]]);
            if !fits {
                continue;
            }
            for &(r, c) in &shape {
                let (pr, pc) = ((cr + r) as usize, (cc + c) as usize);
                labels[[pr, pc]] = id;
                let r0 = pr.saturating_sub(BLOB_GAP);
                let c0 = pc.saturating_sub(BLOB_GAP);
                let r1 = (pr + BLOB_GAP).min(size - 1);
                let c1 = (pc + BLOB_GAP).min(size - 1);
                blocked.slice_mut(ndarray::s![r0..=r1, c0..=c1]).fill(true);
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation {
                field: "blob_count_range",
                reason: format!("could not place blob {id} of {n_blobs} without overlap in a {size}px image"),
            });
        }
        fg_levels.push(fg.sample(&mut rng));
    }

    let texture = texture_field(size, spec.background_texture_scale, &mut rng);
    let fine = texture_field(size, 1.0, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("validated std");
    let mut image = Array2::<f32>::zeros((size, size));
    for ((r, c), v) in image.indexed_iter_mut() {
        let id = labels[[r, c]];
        let raw = if id > 0 {
            fg_levels[id as usize - 1] + 0.03 * fine[[r, c]] as f64
        } else {
            spec.background_intensity + spec.texture_strength * texture[[r, c]] as f64
        };
        let x = 0.5 + spec.contrast * (raw - 0.5) + noise.sample(&mut rng);
        *v = x.clamp(0.0, 1.0) as f32;
    }
    // Slight optical blur softens the hard rasterised edges.
    let image = gaussian_blur(&image, 0.7).mapv(|v| v.clamp(0.0, 1.0));

    let instances = InstanceMap::from_raw(labels, n_blobs);
    let points = instance_centers(&instances);
    Ok(ImageSample {
        image,
        dense_label: Some(instances.foreground()),
        instances: Some(instances),
        points: Some(points),
        domain,
    })
}

/// Generates `n_images` fully annotated samples; image `i` depends only on `(seed, i)`.
pub fn generate_domain(
    spec: &DomainSpec,
    n_images: usize,
    size: usize,
    seed: u64,
    domain: DomainTag,
) -> Result<Vec<ImageSample>> {
    if n_images < 1 {
        return Err(Error::InvalidArgument("n_images must be at least 1".into()));
    }
    if size < 64 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} below the 64px minimum"
        )));
    }
    spec.validate()?;
    (0..n_images)
        .map(|i| generate_one(spec, size, derive_seed(seed, 1, i as u64), domain))
        .collect()
}

/// Everything needed to regenerate a benchmark bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub size: usize,
    pub annotation_ratio: f64,
    pub seed: u64,
    /// Seed for the sparse point selection; defaults to `seed`.
    #[serde(default)]
    pub annotation_seed: Option<u64>,
}

impl BenchmarkSpec {
    pub fn desk_default(seed: u64) -> Self {
        Self {
            source: DomainSpec::source_default(),
            target: DomainSpec::target_default(),
            n_source: 96,
            n_target_train: 16,
            n_target_test: 8,
            size: 256,
            annotation_ratio: 0.15,
            seed,
            annotation_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    /// Fully labelled.
    pub source: Vec<ImageSample>,
    /// Sparse points only.
    pub target_train: Vec<ImageSample>,
    /// Dense labels and instances, for evaluation only.
    pub target_test: Vec<ImageSample>,
}

/// Builds source, sparsely annotated target-train and densely labelled target-test splits.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    if !(0.0..=1.0).contains(&spec.annotation_ratio) {
        return Err(Error::InvalidArgument(format!(
            "annotation ratio {} outside [0, 1]",
            spec.annotation_ratio
        )));
    }
    if spec.n_source == 0 || spec.n_target_train == 0 || spec.n_target_test == 0 {
        return Err(Error::InvalidArgument("every split needs at least one image".into()));
    }
    let source = generate_domain(
        &spec.source,
        spec.n_source,
        spec.size,
        derive_seed(spec.seed, 10, 0),
        DomainTag::Source,
    )?;
    let mut target = generate_domain(
        &spec.target,
        spec.n_target_train + spec.n_target_test,
        spec.size,
        derive_seed(spec.seed, 11, 0),
        DomainTag::Target,
    )?;
    let target_test = target.split_off(spec.n_target_train);
    let annotation_seed = spec.annotation_seed.unwrap_or(spec.seed);
    let target_train = target
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let full = s.points.expect("generated samples carry centers");
            let points =
                sample_sparse_points(&full, spec.annotation_ratio, derive_seed(annotation_seed, 12, i as u64))?;
            Ok(ImageSample {
                image: s.image,
                dense_label: None,
                instances: None,
                points: Some(points),
                domain: DomainTag::Target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        spec: spec.clone(),
        source,
        target_train,
        target_test,
    })
}

fn numbered(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{i:04}.{ext}"))
}

impl Benchmark {
    /// Writes the directory layout plus `benchmark.json`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (i, s) in self.source.iter().enumerate() {
            io::write_gray16(&numbered(&root.join("source/images"), i, "png"), &s.image)?;
            if let Some(l) = &s.dense_label {
                io::write_mask(&numbered(&root.join("source/labels"), i, "png"), l)?;
            }
        }
        for (i, s) in self.target_train.iter().enumerate() {
            io::write_gray16(&numbered(&root.join("target_train/images"), i, "png"), &s.image)?;
            let (h, w) = s.dim();
            let pts = s.points.clone().unwrap_or_else(|| PointSet::empty(h, w));
            io::write_points(&numbered(&root.join("target_train/points"), i, "csv"), &pts)?;
        }
        for (i, s) in self.target_test.iter().enumerate() {
            io::write_gray16(&numbered(&root.join("target_test/images"), i, "png"), &s.image)?;
            if let Some(l) = &s.dense_label {
                io::write_mask(&numbered(&root.join("target_test/labels"), i, "png"), l)?;
            }
            if let Some(inst) = &s.instances {
                io::write_instances(&numbered(&root.join("target_test/instances"), i, "png"), inst)?;
            }
        }
        let manifest = root.join("benchmark.json");
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest = root.join("benchmark.json");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let spec: BenchmarkSpec = serde_json::from_str(&text).map_err(|e| Error::format(&manifest, e))?;

        let mut source = Vec::with_capacity(spec.n_source);
        for i in 0..spec.n_source {
            let image = io::read_gray(&numbered(&root.join("source/images"), i, "png"))?;
            let label = io::read_mask(&numbered(&root.join("source/labels"), i, "png"))?;
            let instances = label_components(&label);
            let points = instance_centers(&instances);
            source.push(ImageSample {
                image,
                dense_label: Some(label),
                instances: Some(instances),
                points: Some(points),
                domain: DomainTag::Source,
            });
        }
        let mut target_train = Vec::with_capacity(spec.n_target_train);
        for i in 0..spec.n_target_train {
            let image = io::read_gray(&numbered(&root.join("target_train/images"), i, "png"))?;
            let (h, w) = image.dim();
            let points = io::read_points(&numbered(&root.join("target_train/points"), i, "csv"), h, w)?;
            target_train.push(ImageSample {
                image,
                dense_label: None,
                instances: None,
                points: Some(points),
                domain: DomainTag::Target,
            });
        }
        let mut target_test = Vec::with_capacity(spec.n_target_test);
        for i in 0..spec.n_target_test {
            let image = io::read_gray(&numbered(&root.join("target_test/images"), i, "png"))?;
            let label = io::read_mask(&numbered(&root.join("target_test/labels"), i, "png"))?;
            let instances = io::read_instances(&numbered(&root.join("target_test/instances"), i, "png"))?;
            let points = instance_centers(&instances);
            target_test.push(ImageSample {
                image,
                dense_label: Some(label),
                instances: Some(instances),
                points: Some(points),
                domain: DomainTag::Target,
            });
        }
        Ok(Self {
            spec,
            source,
            target_train,
            target_test,
        })
    }
}

/// Storage order of a 3D stack, e.g. `"zyx"` when pages are slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisOrder([usize; 3]);

impl std::str::FromStr for AxisOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let mut perm = [usize::MAX; 3];
        if lower.len() == 3 {
            for (i, ch) in lower.chars().enumerate() {
                let logical = match ch {
                    'z' => 0,
                    'y' => 1,
                    'x' => 2,
                    _ => usize::MAX,
                };
                if logical < 3 {
                    perm[logical] = i;
                }
            }
        }
        if perm.contains(&usize::MAX) {
            return Err(Error::InvalidArgument(format!(
                "axis order {s:?} is not a permutation of zyx"
            )));
        }
        Ok(AxisOrder(perm))
    }
}

impl Default for AxisOrder {
    fn default() -> Self {
        AxisOrder([0, 1, 2])
    }
}

fn read_tiff_pages(path: &Path) -> Result<Vec<Array2<f32>>> {
    use tiff::decoder::{Decoder, DecodingResult};
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(std::io::BufReader::new(file)).map_err(|e| Error::format(path, e))?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(|e| Error::format(path, e))?;
        let data: Vec<f32> = match dec.read_image().map_err(|e| Error::format(path, e))? {
            DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
            DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::F32(v) => v,
            DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            _ => return Err(Error::format(path, "unsupported TIFF sample type")),
        };
        let page = Array2::from_shape_vec((h as usize, w as usize), data)
            .map_err(|_| Error::format(path, "page is not single-channel"))?;
        pages.push(page);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| Error::format(path, e))?;
    }
    Ok(pages)
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

/// Raw (unnormalised) volume in storage order.
fn read_volume(path: &Path) -> Result<Array3<f32>> {
    let pages = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(path, "directory contains no image slices"));
        }
        files
            .iter()
            .map(|f| {
                let img = image::open(f).map_err(|e| Error::format(f, e))?;
                if img.color().channel_count() != 1 {
                    return Err(Error::format(f, "image is not single-channel"));
                }
                let g = img.to_luma32f();
                let (w, h) = g.dimensions();
                Ok(Array2::from_shape_vec((h as usize, w as usize), g.into_raw())
                    .expect("buffer length matches dimensions"))
            })
            .collect::<Result<Vec<_>>>()?
    } else if path.exists() {
        read_tiff_pages(path)?
    } else {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "stack not found"),
        ));
    };
    let dim = pages[0].dim();
    if pages.iter().any(|p| p.dim() != dim) {
        return Err(Error::format(path, "slices differ in size"));
    }
    let views: Vec<_> = pages.iter().map(|p| p.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("equal slice shapes"))
}

/// Sibling label stack: `<stem>_labels.<ext>`, `<dir>_labels/`, or `labels/` next to `images/`.
fn label_sibling(path: &Path) -> Option<PathBuf> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name()?.to_str()?;
    let mut candidates = Vec::new();
    if path.is_dir() {
        candidates.push(parent.join(format!("{name}_labels")));
        if name == "images" {
            candidates.push(parent.join("labels"));
        }
    } else {
        let stem = path.file_stem()?.to_str()?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("tif");
        candidates.push(parent.join(format!("{stem}_labels.{ext}")));
    }
    candidates.into_iter().find(|c| c.exists())
}

/// Loads a 2D image stack (a multi-page TIFF or a directory of slices) as samples.
///
/// Intensities are min-max normalised over the whole stack. When a sibling label stack
/// exists its non-zero voxels become the dense label and 4-connected components the
/// instances.
pub fn load_stack(path: &Path, axis_order: AxisOrder, domain: DomainTag) -> Result<Vec<ImageSample>> {
    let AxisOrder(perm) = axis_order;
    let vol = read_volume(path)?.permuted_axes(perm).as_standard_layout().to_owned();
    let (lo, hi) = vol.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let vol = vol.mapv(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });

    let labels = match label_sibling(path) {
        Some(lp) => {
            let lv = read_volume(&lp)?.permuted_axes(perm).as_standard_layout().to_owned();
            if lv.dim() != vol.dim() {
                return Err(Error::Validation(format!(
                    "label stack {} has shape {:?}, image stack {:?}",
                    lp.display(),
                    lv.dim(),
                    vol.dim()
                )));
            }
            Some(lv)
        }
        None => None,
    };

    Ok(vol
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(z, slice)| {
            let image = slice.to_owned();
            let (dense_label, instances, points) = match &labels {
                Some(lv) => {
                    let mask = lv.index_axis(Axis(0), z).mapv(|v| v > 0.0);
                    let inst = label_components(&mask);
                    let pts = instance_centers(&inst);
                    (Some(mask), Some(inst), Some(pts))
                }
                None => (None, None, None),
            };
            ImageSample {
                image,
                dense_label,
                instances,
                points,
                domain,
            }
        })
        .collect())
}

/// Mean absolute difference between the normalised 32-bin intensity histograms of two sets.
pub fn histogram_distance(a: &[ImageSample], b: &[ImageSample]) -> f64 {
    const BINS: usize = 32;
    let hist = |set: &[ImageSample]| {
        let mut h = [0f64; BINS];
        let mut n = 0f64;
        for s in set {
            for &v in s.image.iter() {
                h[((v * BINS as f32) as usize).min(BINS - 1)] += 1.0;
                n += 1.0;
            }
        }
        h.map(|x| x / n.max(1.0))
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(hb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / BINS as f64
}
