//! Procedural multi-sensor test data: textured images, thermal maps, and
//! superellipsoid point clouds with optional localized defects.
//!
//! Every sample is drawn from its own counter-based random stream, so
//! generation is reproducible bit for bit regardless of how many samples are
//! produced, in which order, or on how many threads. Defects are injected by
//! mutating exactly the modalities they are visible in; the other modalities
//! of the same sample stay byte-identical to their pristine version, which
//! makes the emitted ground truth verifiable by direct comparison.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{derive_object_label, ModalityId, ModalityLabels, ObjectLabel, Split, GOOD_DEFECT};
use crate::ingest::image::{save_png, ImageData};
use crate::ingest::pointcloud::{save_point_labels, save_xyz, PointCloudData};
use crate::ingest::IngestError;

/// Default dataset seed.
pub const DEFAULT_SEED: u64 = 7;
/// Default RGB image edge length in pixels.
pub const DEFAULT_IMAGE_SIZE: u32 = 256;
/// Default infrared image edge length in pixels.
pub const DEFAULT_IR_SIZE: u32 = 128;
/// Default number of points per cloud.
pub const DEFAULT_CLOUD_POINTS: usize = 800;
/// Default defect strength as a multiple of the modality noise level.
pub const DEFAULT_DEFECT_MAGNITUDE: f64 = 5.0;
/// Default defect extent as a fraction of the object size.
pub const DEFAULT_DEFECT_EXTENT: f64 = 0.08;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthesis parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SynthError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SynthError::Io { path: path.display().to_string(), source }
    }
}

/// What kind of deviation a defect introduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// A discolored round patch; affects the RGB image only.
    SurfaceBlob,
    /// A local temperature excursion; affects the infrared image only.
    ThermalSpot,
    /// An indentation of the surface; affects the point cloud only.
    GeometricDent,
    /// A defect visible in a caller-chosen subset of modalities.
    CrossModal,
}

impl DefectKind {
    /// Directory name used for this kind under `test/` and `GT/`.
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::SurfaceBlob => "blob",
            DefectKind::ThermalSpot => "hotspot",
            DefectKind::GeometricDent => "dent",
            DefectKind::CrossModal => "mixed",
        }
    }
}

/// A defect to inject: what it is, where it shows up, and how strong it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Modalities the defect is visible in, in canonical order. The three
    /// single-modality kinds fix this to their one modality; `CrossModal`
    /// accepts any non-empty subset.
    pub visibility: Vec<ModalityId>,
    /// Strength as a multiple of the configured noise level of each affected
    /// modality (pixel-value noise for images, coordinate noise for clouds).
    pub magnitude: f64,
    /// Radius of the affected region as a fraction of the object size
    /// (image edge for rasters, bounding-box diagonal for clouds).
    pub extent: f64,
}

impl DefectSpec {
    /// A single-modality defect of the given kind. `kind` must not be
    /// [`DefectKind::CrossModal`].
    pub fn exclusive(kind: DefectKind, magnitude: f64, extent: f64) -> Result<Self, SynthError> {
        let visibility = match kind {
            DefectKind::SurfaceBlob => vec![ModalityId::Rgb],
            DefectKind::ThermalSpot => vec![ModalityId::Infrared],
            DefectKind::GeometricDent => vec![ModalityId::Pointcloud],
            DefectKind::CrossModal => {
                return Err(SynthError::Parameter(
                    "cross-modal defects need an explicit visibility set".into(),
                ))
            }
        };
        let spec = DefectSpec { kind, visibility, magnitude, extent };
        spec.validate()?;
        Ok(spec)
    }

    /// A defect visible in `visibility`, which must be non-empty.
    pub fn cross_modal(
        visibility: Vec<ModalityId>,
        magnitude: f64,
        extent: f64,
    ) -> Result<Self, SynthError> {
        let spec = DefectSpec { kind: DefectKind::CrossModal, visibility, magnitude, extent };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.visibility.is_empty() {
            return Err(SynthError::Parameter("defect visibility set is empty".into()));
        }
        if self.visibility.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SynthError::Parameter(
                "defect visibility set must be sorted and free of duplicates".into(),
            ));
        }
        let expected = match self.kind {
            DefectKind::SurfaceBlob => Some(ModalityId::Rgb),
            DefectKind::ThermalSpot => Some(ModalityId::Infrared),
            DefectKind::GeometricDent => Some(ModalityId::Pointcloud),
            DefectKind::CrossModal => None,
        };
        if let Some(m) = expected {
            if self.visibility != [m] {
                return Err(SynthError::Parameter(format!(
                    "{:?} defects are visible exactly in {:?}",
                    self.kind, m
                )));
            }
        }
        if !self.magnitude.is_finite() || self.magnitude <= 0.0 {
            return Err(SynthError::Parameter(format!(
                "defect magnitude must be positive, got {}",
                self.magnitude
            )));
        }
        if !self.extent.is_finite() || self.extent <= 0.0 || self.extent > 0.45 {
            return Err(SynthError::Parameter(format!(
                "defect extent must lie in (0, 0.45], got {} (larger regions would not fit inside the object bounds)",
                self.extent
            )));
        }
        Ok(())
    }
}

/// One entry of the defect mix: a spec and its relative share of the
/// abnormal test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub spec: DefectSpec,
    pub weight: f64,
}

/// Additive noise levels, in pixel values (0–255 scale) for images and in
/// coordinate units for point clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub image: f64,
    pub cloud: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self { image: 2.0, cloud: 0.35 }
    }
}

/// Full description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Category names; each becomes one directory under the dataset root.
    pub categories: Vec<String>,
    /// Normal training samples per category.
    pub train_count: usize,
    /// Normal test samples per category (written under `test/good`).
    pub test_normal: usize,
    /// Defective test samples per category, split across `mix`.
    pub test_abnormal: usize,
    /// Defect mix; shares are apportioned by largest remainder so the
    /// per-kind counts always sum to `test_abnormal` exactly.
    pub mix: Vec<MixEntry>,
    pub noise: NoiseLevels,
    pub seed: u64,
    /// RGB image edge length in pixels (images are square).
    pub image_size: u32,
    /// Infrared image edge length in pixels.
    pub ir_size: u32,
    /// Points per cloud; every generated cloud has exactly this many.
    pub cloud_points: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let thirds = [DefectKind::SurfaceBlob, DefectKind::ThermalSpot, DefectKind::GeometricDent]
            .into_iter()
            .map(|kind| MixEntry {
                spec: DefectSpec::exclusive(kind, DEFAULT_DEFECT_MAGNITUDE, DEFAULT_DEFECT_EXTENT)
                    .expect("default defect spec is valid"),
                weight: 1.0,
            })
            .collect();
        Self {
            categories: vec!["orb".into(), "brick".into(), "drum".into()],
            train_count: 60,
            test_normal: 10,
            test_abnormal: 30,
            mix: thirds,
            noise: NoiseLevels::default(),
            seed: DEFAULT_SEED,
            image_size: DEFAULT_IMAGE_SIZE,
            ir_size: DEFAULT_IR_SIZE,
            cloud_points: DEFAULT_CLOUD_POINTS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.categories.is_empty() {
            return Err(SynthError::Parameter("at least one category is required".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &self.categories {
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(SynthError::Parameter(format!("invalid category name {name:?}")));
            }
            if !seen.insert(name) {
                return Err(SynthError::Parameter(format!("duplicate category {name:?}")));
            }
        }
        if self.train_count == 0 {
            return Err(SynthError::Parameter("train_count must be at least 1".into()));
        }
        if self.image_size < 8 || self.ir_size < 8 {
            return Err(SynthError::Parameter("image sizes must be at least 8 pixels".into()));
        }
        if self.cloud_points < 32 {
            return Err(SynthError::Parameter("cloud_points must be at least 32".into()));
        }
        if !self.noise.image.is_finite()
            || self.noise.image < 0.0
            || !self.noise.cloud.is_finite()
            || self.noise.cloud < 0.0
        {
            return Err(SynthError::Parameter("noise levels must be finite and >= 0".into()));
        }
        if self.test_abnormal > 0 {
            if self.mix.is_empty() {
                return Err(SynthError::Parameter(
                    "abnormal samples requested but the defect mix is empty".into(),
                ));
            }
            let mut dirs = BTreeSet::new();
            for entry in &self.mix {
                entry.spec.validate()?;
                if !entry.weight.is_finite() || entry.weight <= 0.0 {
                    return Err(SynthError::Parameter(format!(
                        "mix weights must be positive, got {}",
                        entry.weight
                    )));
                }
                if !dirs.insert(entry.spec.kind.dir_name()) {
                    return Err(SynthError::Parameter(format!(
                        "two mix entries map to the same directory {:?}",
                        entry.spec.kind.dir_name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Apportions `total` samples across the mix weights by largest remainder,
/// so the counts sum to `total` exactly. Remainder ties go to the earlier
/// entry.
pub fn mix_counts(mix: &[MixEntry], total: usize) -> Vec<usize> {
    if mix.is_empty() || total == 0 {
        return vec![0; mix.len()];
    }
    let weight_sum: f64 = mix.iter().map(|e| e.weight).sum();
    let quotas: Vec<f64> =
        mix.iter().map(|e| e.weight / weight_sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % mix.len()]] += 1;
    }
    counts
}

/// One pristine object rendered in all three modalities under a shared pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub rgb: ImageData,
    pub ir: ImageData,
    pub cloud: PointCloudData,
}

/// Ground truth emitted by [`inject_defect`]: an annotation per modality the
/// defect is visible in, and the per-modality labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Single-channel 0/255 mask, present iff the defect is visible in RGB.
    pub rgb_mask: Option<ImageData>,
    /// Single-channel 0/255 mask, present iff the defect is visible in infrared.
    pub ir_mask: Option<ImageData>,
    /// Per-point 0/1 flags, present iff the defect is visible in the cloud.
    pub point_labels: Option<Vec<u8>>,
    pub labels: ModalityLabels,
}

/// Shape and appearance parameters of one category. Categories cycle through
/// three base shapes; the superellipsoid exponents control how boxy or
/// cylindrical the surface is.
#[derive(Debug, Clone, Copy)]
struct CategoryStyle {
    eps_lat: f64,
    eps_lon: f64,
    semi_axes: [f64; 3],
    texture_freq: f64,
    warm_spread: f64,
}

fn category_style(index: usize) -> CategoryStyle {
    match index % 3 {
        0 => CategoryStyle {
            eps_lat: 1.0,
            eps_lon: 1.0,
            semi_axes: [22.0, 20.0, 15.0],
            texture_freq: 3.0,
            warm_spread: 2.2,
        },
        1 => CategoryStyle {
            eps_lat: 0.35,
            eps_lon: 0.35,
            semi_axes: [18.0, 18.0, 12.0],
            texture_freq: 5.0,
            warm_spread: 1.4,
        },
        _ => CategoryStyle {
            eps_lat: 0.35,
            eps_lon: 1.0,
            semi_axes: [16.0, 16.0, 14.0],
            texture_freq: 4.0,
            warm_spread: 3.0,
        },
    }
}

/// Deterministic per-sample random stream, keyed by the dataset seed and
/// the sample's identity tag.
pub fn sample_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::core::mix_seed(seed, tag))
}

fn signed_pow(v: f64, e: f64) -> f64 {
    v.signum() * v.abs().powf(e)
}

/// Renders one pristine object. The pose drawn from `rng` (a rotation about
/// the vertical axis) turns the point cloud; the rasters are a fixed
/// overhead view down that same axis, so they are unaffected by the pose and
/// the three modalities stay spatially consistent. With zero noise, samples
/// of the same category differ only in that pose.
pub fn generate_object(config: &SynthConfig, category_index: usize, rng: &mut ChaCha8Rng) -> SynthObject {
    let style = category_style(category_index);
    let theta: f64 = rng.gen::<f64>() * TAU;
    let (sin_t, cos_t) = theta.sin_cos();

    // Point cloud: a Fibonacci lattice mapped onto the superellipsoid,
    // rotated by the pose, plus radial noise.
    let n = config.cloud_points;
    let golden = PI * (3.0 - 5.0_f64.sqrt());
    let mut points = Vec::with_capacity(n);
    let cloud_noise = noise_dist(config.noise.cloud);
    for i in 0..n {
        let zf = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let eta = zf.asin();
        let omega = golden * i as f64;
        let ce = signed_pow(eta.cos(), style.eps_lat);
        let x = style.semi_axes[0] * ce * signed_pow(omega.cos(), style.eps_lon);
        let y = style.semi_axes[1] * ce * signed_pow(omega.sin(), style.eps_lon);
        let z = style.semi_axes[2] * signed_pow(eta.sin(), style.eps_lat);
        let mut p = [x * cos_t - y * sin_t, x * sin_t + y * cos_t, z];
        if let Some(dist) = &cloud_noise {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-12);
            let step = dist.sample(rng);
            for v in p.iter_mut() {
                *v += *v / r * step;
            }
        }
        points.push(p);
    }
    let cloud = PointCloudData::new(points).expect("generated cloud is non-empty");

    // RGB: a plaid of sinusoids in image coordinates.
    let rgb = render_image(config.image_size, 3, config.noise.image, rng, |u, v| {
        let f = style.texture_freq;
        let r = 150.0 + 70.0 * (TAU * f * u).sin();
        let g = 140.0 + 70.0 * (TAU * f * v + 1.3).sin();
        let b = 128.0 + 50.0 * (TAU * f * (u + v) + 2.1).sin();
        [r, g, b]
    });

    // Infrared: a warm core that falls off radially, plus a mild vertical
    // drift.
    let ir = render_image(config.ir_size, 1, config.noise.image, rng, |u, v| {
        let rr = u * u + v * v;
        let t = 95.0 + 110.0 * (-style.warm_spread * rr).exp() + 18.0 * v;
        [t, 0.0, 0.0]
    });

    SynthObject { rgb, ir, cloud }
}

fn noise_dist(std: f64) -> Option<Normal<f64>> {
    if std > 0.0 {
        Some(Normal::new(0.0, std).expect("validated noise std"))
    } else {
        None
    }
}

fn render_image(
    size: u32,
    channels: u32,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
    pattern: impl Fn(f64, f64) -> [f64; 3],
) -> ImageData {
    let mut img = ImageData::filled(size, size, channels, 0);
    let half = (size as f64 - 1.0) / 2.0;
    let dist = noise_dist(noise_std);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 - half) / (size as f64);
            let v = (y as f64 - half) / (size as f64);
            let base = pattern(u, v);
            for c in 0..channels {
                let mut value = base[c as usize];
                if let Some(d) = &dist {
                    value += d.sample(rng);
                }
                img.set_sample(x, y, c, value.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

/// Flips a pixel value away from mid-gray by `delta`. The result always
/// differs from the input and never needs clamping, so a changed-pixel scan
/// against the pristine image recovers the defect mask exactly.
fn push_pixel(value: u8, delta: u8) -> u8 {
    if value >= 128 {
        value - delta
    } else {
        value + delta
    }
}

fn stamp_disk(img: &mut ImageData, mask: &mut ImageData, center: (f64, f64), radius: f64, delta: u8) {
    let (cx, cy) = center;
    let x0 = (cx - radius).floor().max(0.0) as u32;
    let x1 = (cx + radius).ceil().min(img.width as f64 - 1.0) as u32;
    let y0 = (cy - radius).floor().max(0.0) as u32;
    let y1 = (cy + radius).ceil().min(img.height as f64 - 1.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..img.channels {
                    let v = img.sample(x, y, c);
                    img.set_sample(x, y, c, push_pixel(v, delta));
                }
                mask.set_sample(x, y, 0, 255);
            }
        }
    }
}

fn image_delta(magnitude: f64, noise_image: f64) -> u8 {
    (magnitude * noise_image).round().clamp(1.0, 127.0) as u8
}

/// Injects `spec` into `object`, mutating exactly the modalities in the
/// spec's visibility set; the others are left byte-identical. The returned
/// ground truth flags precisely the pixels and points that were changed:
/// a mask pixel is set iff that pixel differs from the pristine image, and a
/// point is flagged iff its coordinates moved.
///
/// Defect strength scales with the configured noise (`spec.magnitude` times
/// the per-modality noise level), with a small floor so defects stay
/// non-empty when the noise is zero. The location is drawn from `rng` once
/// and shared across modalities.
pub fn inject_defect(
    object: &mut SynthObject,
    spec: &DefectSpec,
    noise: &NoiseLevels,
    rng: &mut ChaCha8Rng,
) -> Result<GroundTruth, SynthError> {
    spec.validate()?;

    // Shared anchor: a direction and an off-center distance.
    let phi: f64 = rng.gen::<f64>() * TAU;
    let rho: f64 = 0.25 + 0.65 * rng.gen::<f64>();
    let beta: f64 = (rng.gen::<f64>() * 2.0 - 1.0) * (PI / 3.0);

    let mut gt = GroundTruth {
        rgb_mask: None,
        ir_mask: None,
        point_labels: None,
        labels: ModalityLabels::default(),
    };
    for m in ModalityId::ALL {
        gt.labels.set(m, Some(spec.visibility.contains(&m)));
    }

    for &m in &spec.visibility {
        match m {
            ModalityId::Rgb | ModalityId::Infrared => {
                let img = if m == ModalityId::Rgb { &mut object.rgb } else { &mut object.ir };
                let size = img.width.min(img.height) as f64;
                let radius = (spec.extent * size).max(1.0);
                let half = size / 2.0;
                if radius + 1.0 >= half {
                    return Err(SynthError::Parameter(format!(
                        "defect extent {} exceeds the {}x{} image bounds",
                        spec.extent, img.width, img.height
                    )));
                }
                let reach = half - radius - 1.0;
                let cx = (img.width as f64 - 1.0) / 2.0 + rho * reach * phi.cos();
                let cy = (img.height as f64 - 1.0) / 2.0 + rho * reach * phi.sin();
                let mut mask = ImageData::filled(img.width, img.height, 1, 0);
                stamp_disk(img, &mut mask, (cx, cy), radius, image_delta(spec.magnitude, noise.image));
                match m {
                    ModalityId::Rgb => gt.rgb_mask = Some(mask),
                    _ => gt.ir_mask = Some(mask),
                }
            }
            ModalityId::Pointcloud => {
                let cloud = &mut object.cloud;
                let centroid = cloud.centroid();
                let diag = cloud.bbox_diagonal();
                if diag <= 0.0 {
                    return Err(SynthError::Parameter(
                        "cannot dent a degenerate point cloud".into(),
                    ));
                }
                let radius = spec.extent * diag;
                // Depth floor: keeps the displacement far above coordinate
                // rounding even when the configured noise is zero.
                let depth = (spec.magnitude * noise.cloud).max(4e-3 * diag);
                let dir = [
                    phi.cos() * beta.cos(),
                    phi.sin() * beta.cos(),
                    beta.sin(),
                ];
                let mut anchor_idx = 0usize;
                let mut best = f64::NEG_INFINITY;
                for (i, p) in cloud.points.iter().enumerate() {
                    let d = (p[0] - centroid[0]) * dir[0]
                        + (p[1] - centroid[1]) * dir[1]
                        + (p[2] - centroid[2]) * dir[2];
                    if d > best {
                        best = d;
                        anchor_idx = i;
                    }
                }
                let anchor = cloud.points[anchor_idx];
                let mut labels = vec![0u8; cloud.len()];
                for (i, p) in cloud.points.iter_mut().enumerate() {
                    let dx = p[0] - anchor[0];
                    let dy = p[1] - anchor[1];
                    let dz = p[2] - anchor[2];
                    let r = (dx * dx + dy * dy + dz * dz).sqrt();
                    if r < radius {
                        // Bowl profile with a floor so even rim points move
                        // by a representable amount.
                        let w = (1.0 - (r / radius).powi(2)).max(1e-3);
                        let ux = p[0] - centroid[0];
                        let uy = p[1] - centroid[1];
                        let uz = p[2] - centroid[2];
                        let len = (ux * ux + uy * uy + uz * uz).sqrt().max(1e-9);
                        p[0] -= ux / len * depth * w;
                        p[1] -= uy / len * depth * w;
                        p[2] -= uz / len * depth * w;
                        labels[i] = 1;
                    }
                }
                gt.point_labels = Some(labels);
            }
        }
    }
    Ok(gt)
}

/// One sample row of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub category: String,
    pub split: Split,
    /// Defect directory name; `good` for normal samples.
    pub defect: String,
    pub id: String,
    /// Per-modality anomaly labels.
    pub labels: ModalityLabels,
    /// Modalities the defect is visible in; empty for normal samples.
    pub visibility: Vec<ModalityId>,
    pub object_label: ObjectLabel,
}

/// Everything written by [`generate_dataset`], in deterministic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub samples: Vec<ManifestSample>,
}

/// File name of the manifest under the dataset root.
pub const MANIFEST_NAME: &str = "manifest.json";

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), SynthError> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| SynthError::Parameter(format!("manifest serialization failed: {e}")))?;
    fs::write(path, json).map_err(|e| SynthError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest, SynthError> {
    let text = fs::read_to_string(path).map_err(|e| SynthError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| SynthError::Parameter(format!("{}: invalid manifest: {e}", path.display())))
}

struct SamplePlan {
    category: String,
    category_index: usize,
    split: Split,
    defect: String,
    id: String,
    spec: Option<DefectSpec>,
}

/// Generates a dataset under `root` in the on-disk layout that
/// [`crate::ingest::scan_dataset`] reads back: per category, `RGB`,
/// `Infrared`, and `Pointcloud` directories with `train/`, `test/<defect>/`,
/// and `GT/<defect>/` inside, plus a `manifest.json` at the root describing
/// every sample. Annotations are written only for the modalities a defect is
/// visible in. Samples are generated in parallel; their random streams
/// depend only on the seed and the sample's identity, so the output is
/// byte-identical across runs and thread counts.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> Result<Manifest, SynthError> {
    config.validate()?;
    let mut plans = Vec::new();
    for (ci, cat) in config.categories.iter().enumerate() {
        for i in 0..config.train_count {
            plans.push(SamplePlan {
                category: cat.clone(),
                category_index: ci,
                split: Split::Train,
                defect: GOOD_DEFECT.to_string(),
                id: format!("{i:03}"),
                spec: None,
            });
        }
        for i in 0..config.test_normal {
            plans.push(SamplePlan {
                category: cat.clone(),
                category_index: ci,
                split: Split::Test,
                defect: GOOD_DEFECT.to_string(),
                id: format!("{i:03}"),
                spec: None,
            });
        }
        let counts = mix_counts(&config.mix, config.test_abnormal);
        for (entry, count) in config.mix.iter().zip(&counts) {
            for i in 0..*count {
                plans.push(SamplePlan {
                    category: cat.clone(),
                    category_index: ci,
                    split: Split::Test,
                    defect: entry.spec.kind.dir_name().to_string(),
                    id: format!("{i:03}"),
                    spec: Some(entry.spec.clone()),
                });
            }
        }
    }

    // Create the directory tree up front; the per-sample work then only
    // writes files, which keeps the parallel stage free of races.
    for cat in &config.categories {
        for m in ModalityId::ALL {
            let base = root.join(cat).join(m.dir_name());
            fs::create_dir_all(base.join(Split::Train.dir_name()))
                .map_err(|e| SynthError::io(&base, e))?;
        }
    }
    for plan in &plans {
        if plan.split != Split::Test {
            continue;
        }
        for m in ModalityId::ALL {
            let base = root.join(&plan.category).join(m.dir_name());
            let test_dir = base.join(Split::Test.dir_name()).join(&plan.defect);
            fs::create_dir_all(&test_dir).map_err(|e| SynthError::io(&test_dir, e))?;
            let visible = plan.spec.as_ref().is_some_and(|s| s.visibility.contains(&m));
            if visible {
                let gt_dir = base.join("GT").join(&plan.defect);
                fs::create_dir_all(&gt_dir).map_err(|e| SynthError::io(&gt_dir, e))?;
            }
        }
    }

    let samples: Vec<ManifestSample> = plans
        .par_iter()
        .map(|plan| write_sample(config, root, plan))
        .collect::<Result<_, _>>()?;

    let mut manifest = Manifest { config: config.clone(), samples };
    manifest.samples.sort_by(|a, b| {
        let split_rank = |s: Split| match s {
            Split::Train => 0,
            Split::Test => 1,
        };
        (a.category.as_str(), split_rank(a.split), a.defect.as_str(), a.id.as_str()).cmp(&(
            b.category.as_str(),
            split_rank(b.split),
            b.defect.as_str(),
            b.id.as_str(),
        ))
    });
    save_manifest(&manifest, &root.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn write_sample(
    config: &SynthConfig,
    root: &Path,
    plan: &SamplePlan,
) -> Result<ManifestSample, SynthError> {
    let tag = format!(
        "{}/{}/{}/{}",
        plan.category,
        plan.split.dir_name(),
        plan.defect,
        plan.id
    );
    let mut rng = sample_rng(config.seed, &tag);
    let mut object = generate_object(config, plan.category_index, &mut rng);
    let gt = match &plan.spec {
        Some(spec) => Some(inject_defect(&mut object, spec, &config.noise, &mut rng)?),
        None => None,
    };

    let cat_dir = root.join(&plan.category);
    let rel = |m: ModalityId| -> PathBuf {
        let base = cat_dir.join(m.dir_name());
        match plan.split {
            Split::Train => base.join(Split::Train.dir_name()),
            Split::Test => base.join(Split::Test.dir_name()).join(&plan.defect),
        }
    };
    save_png(&object.rgb, &rel(ModalityId::Rgb).join(format!("{}.png", plan.id)))?;
    save_png(&object.ir, &rel(ModalityId::Infrared).join(format!("{}.png", plan.id)))?;
    save_xyz(&object.cloud, &rel(ModalityId::Pointcloud).join(format!("{}.xyz", plan.id)))?;

    let mut labels = ModalityLabels::default();
    for m in ModalityId::ALL {
        labels.set(m, Some(false));
    }
    let mut visibility = Vec::new();
    if let Some(gt) = &gt {
        labels = gt.labels.clone();
        visibility = plan.spec.as_ref().expect("defective plan has a spec").visibility.clone();
        if let Some(mask) = &gt.rgb_mask {
            let dir = cat_dir.join(ModalityId::Rgb.dir_name()).join("GT").join(&plan.defect);
            save_png(mask, &dir.join(format!("{}.png", plan.id)))?;
        }
        if let Some(mask) = &gt.ir_mask {
            let dir = cat_dir.join(ModalityId::Infrared.dir_name()).join("GT").join(&plan.defect);
            save_png(mask, &dir.join(format!("{}.png", plan.id)))?;
        }
        if let Some(flags) = &gt.point_labels {
            let dir = cat_dir.join(ModalityId::Pointcloud.dir_name()).join("GT").join(&plan.defect);
            save_point_labels(flags, &dir.join(format!("{}.txt", plan.id)))?;
        }
    }

    let object_label = derive_object_label(&labels)
        .expect("synthesized samples always carry all three modality labels");
    Ok(ManifestSample {
        category: plan.category.clone(),
        split: plan.split,
        defect: plan.defect.clone(),
        id: plan.id.clone(),
        object_label,
        labels,
        visibility,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::scan_dataset;

    fn small_config() -> SynthConfig {
        SynthConfig {
            categories: vec!["alpha".into(), "beta".into()],
            train_count: 4,
            test_normal: 2,
            test_abnormal: 6,
            image_size: 48,
            ir_size: 32,
            cloud_points: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_validates_and_splits_in_thirds() {
        let config = SynthConfig::default();
        config.validate().unwrap();
        assert_eq!(mix_counts(&config.mix, 30), vec![10, 10, 10]);
        assert_eq!(mix_counts(&config.mix, 31), vec![11, 10, 10]);
        assert_eq!(mix_counts(&config.mix, 2), vec![1, 1, 0]);
    }

    #[test]
    fn largest_remainder_follows_the_weights() {
        let mk = |w| MixEntry {
            spec: DefectSpec::exclusive(DefectKind::SurfaceBlob, 5.0, 0.1).unwrap(),
            weight: w,
        };
        let mix = vec![mk(0.5), mk(0.25), mk(0.25)];
        assert_eq!(mix_counts(&mix, 10), vec![5, 3, 2]);
        assert_eq!(mix_counts(&mix, 0), vec![0, 0, 0]);
    }

    #[test]
    fn generated_objects_have_the_configured_shapes() {
        let config = small_config();
        let mut rng = sample_rng(config.seed, "alpha/train/good/000");
        let object = generate_object(&config, 0, &mut rng);
        assert_eq!(object.cloud.len(), 200);
        assert_eq!((object.rgb.width, object.rgb.height, object.rgb.channels), (48, 48, 3));
        assert_eq!((object.ir.width, object.ir.height, object.ir.channels), (32, 32, 1));
        assert!(object.cloud.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn generation_is_deterministic_per_tag() {
        let config = small_config();
        let mut a = sample_rng(config.seed, "alpha/train/good/001");
        let mut b = sample_rng(config.seed, "alpha/train/good/001");
        assert_eq!(generate_object(&config, 0, &mut a), generate_object(&config, 0, &mut b));
        let mut c = sample_rng(config.seed, "alpha/train/good/002");
        assert_ne!(generate_object(&config, 0, &mut a), generate_object(&config, 0, &mut c));
    }

    #[test]
    fn zero_noise_samples_differ_only_by_pose() {
        let config = SynthConfig {
            noise: NoiseLevels { image: 0.0, cloud: 0.0 },
            ..small_config()
        };
        let mut a = sample_rng(config.seed, "alpha/train/good/000");
        let mut b = sample_rng(config.seed, "alpha/train/good/001");
        let oa = generate_object(&config, 0, &mut a);
        let ob = generate_object(&config, 0, &mut b);
        // The pose is a rotation about the origin, so the multiset of point
        // radii is invariant.
        let radii = |o: &SynthObject| {
            let mut r: Vec<f64> = o
                .cloud
                .points
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .collect();
            r.sort_by(|x, y| x.partial_cmp(y).unwrap());
            r
        };
        let (ra, rb) = (radii(&oa), radii(&ob));
        for (x, y) in ra.iter().zip(&rb) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        assert_ne!(oa.cloud, ob.cloud, "different poses should move the points");
    }

    #[test]
    fn blob_changes_only_rgb_and_matches_its_mask() {
        let config = small_config();
        let mut rng = sample_rng(config.seed, "alpha/test/blob/000");
        let mut object = generate_object(&config, 0, &mut rng);
        let pristine = object.clone();
        let spec = DefectSpec::exclusive(DefectKind::SurfaceBlob, 5.0, 0.12).unwrap();
        let gt = inject_defect(&mut object, &spec, &config.noise, &mut rng).unwrap();

        assert_eq!(object.ir, pristine.ir, "infrared must stay byte-identical");
        assert_eq!(object.cloud, pristine.cloud, "cloud must stay untouched");
        assert!(gt.ir_mask.is_none() && gt.point_labels.is_none());
        assert_eq!(gt.labels.get(ModalityId::Rgb), Some(true));
        assert_eq!(gt.labels.get(ModalityId::Infrared), Some(false));

        let mask = gt.rgb_mask.expect("blob emits an RGB mask");
        let mut flagged = 0usize;
        for y in 0..object.rgb.height {
            for x in 0..object.rgb.width {
                let changed = (0..3).any(|c| object.rgb.sample(x, y, c) != pristine.rgb.sample(x, y, c));
                let in_mask = mask.sample(x, y, 0) != 0;
                assert_eq!(changed, in_mask, "diff and mask disagree at ({x},{y})");
                flagged += usize::from(in_mask);
            }
        }
        assert!(flagged > 0, "the defect region must be non-empty");
    }

    #[test]
    fn dent_moves_exactly_the_flagged_points() {
        let config = small_config();
        let mut rng = sample_rng(config.seed, "beta/test/dent/000");
        let mut object = generate_object(&config, 1, &mut rng);
        let pristine = object.clone();
        let spec = DefectSpec::exclusive(DefectKind::GeometricDent, 5.0, 0.12).unwrap();
        let gt = inject_defect(&mut object, &spec, &config.noise, &mut rng).unwrap();

        assert_eq!(object.rgb, pristine.rgb);
        assert_eq!(object.ir, pristine.ir);
        let labels = gt.point_labels.expect("dent emits point labels");
        assert_eq!(labels.len(), object.cloud.len());
        let mut moved = 0usize;
        for i in 0..labels.len() {
            let changed = object.cloud.points[i] != pristine.cloud.points[i];
            assert_eq!(changed, labels[i] == 1, "diff and labels disagree at point {i}");
            moved += usize::from(changed);
        }
        assert!(moved >= 3, "a dent should cover several points, moved {moved}");
    }

    #[test]
    fn cross_modal_defect_touches_exactly_its_visibility_set() {
        let config = small_config();
        let mut rng = sample_rng(config.seed, "alpha/test/mixed/000");
        let mut object = generate_object(&config, 0, &mut rng);
        let pristine = object.clone();
        let spec = DefectSpec::cross_modal(
            vec![ModalityId::Rgb, ModalityId::Pointcloud],
            5.0,
            0.1,
        )
        .unwrap();
        let gt = inject_defect(&mut object, &spec, &config.noise, &mut rng).unwrap();
        assert_ne!(object.rgb, pristine.rgb);
        assert_eq!(object.ir, pristine.ir);
        assert_ne!(object.cloud, pristine.cloud);
        assert!(gt.rgb_mask.is_some() && gt.ir_mask.is_none() && gt.point_labels.is_some());
        assert_eq!(gt.labels.get(ModalityId::Pointcloud), Some(true));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(DefectSpec::exclusive(DefectKind::SurfaceBlob, 0.0, 0.1).is_err());
        assert!(DefectSpec::exclusive(DefectKind::SurfaceBlob, 5.0, 0.6).is_err());
        assert!(DefectSpec::exclusive(DefectKind::CrossModal, 5.0, 0.1).is_err());
        assert!(DefectSpec::cross_modal(vec![], 5.0, 0.1).is_err());
        assert!(DefectSpec::cross_modal(
            vec![ModalityId::Infrared, ModalityId::Rgb],
            5.0,
            0.1
        )
        .is_err(), "out-of-order visibility must be rejected");

        let bad = DefectSpec {
            kind: DefectKind::SurfaceBlob,
            visibility: vec![ModalityId::Infrared],
            magnitude: 5.0,
            extent: 0.1,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oversized_extent_fails_against_small_images() {
        let config = SynthConfig { image_size: 8, ir_size: 8, ..small_config() };
        let mut rng = sample_rng(0, "x");
        let mut object = generate_object(&config, 0, &mut rng);
        let spec = DefectSpec::exclusive(DefectKind::SurfaceBlob, 5.0, 0.45).unwrap();
        let err = inject_defect(&mut object, &spec, &config.noise, &mut rng).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn dataset_layout_round_trips_through_the_scanner() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let manifest = generate_dataset(&config, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 2 * (4 + 2 + 6));

        let index = scan_dataset(dir.path()).unwrap();
        assert_eq!(index.categories.len(), 2);
        for cat in &index.categories {
            assert_eq!(cat.train.len(), 4);
            assert_eq!(cat.test.len(), 8);
            for sample in &cat.test {
                let row = manifest
                    .samples
                    .iter()
                    .find(|s| {
                        s.category == cat.name
                            && s.split == Split::Test
                            && s.defect == sample.defect
                            && s.id == sample.id
                    })
                    .expect("every scanned sample appears in the manifest");
                // Annotation presence per modality must agree with the labels.
                for m in ModalityId::ALL {
                    let has_annotation = sample.annotation(m).is_some();
                    assert_eq!(
                        row.labels.get(m),
                        Some(has_annotation),
                        "{}/{} {:?}",
                        sample.defect,
                        sample.id,
                        m
                    );
                    assert_eq!(row.visibility.contains(&m), has_annotation);
                }
                assert_eq!(row.object_label == ObjectLabel::Anomalous, !sample.is_normal());
            }
        }

        let loaded = load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn defect_counts_follow_the_mix() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let manifest = generate_dataset(&config, dir.path()).unwrap();
        for cat in &config.categories {
            let count = |defect: &str| {
                manifest
                    .samples
                    .iter()
                    .filter(|s| &s.category == cat && s.defect == defect)
                    .count()
            };
            assert_eq!(count("blob"), 2);
            assert_eq!(count("hotspot"), 2);
            assert_eq!(count("dent"), 2);
            let normals = manifest
                .samples
                .iter()
                .filter(|s| &s.category == cat && s.defect == GOOD_DEFECT)
                .count();
            assert_eq!(normals, 4 + 2);
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = small_config();
        let ma = generate_dataset(&config, dir_a.path()).unwrap();
        let mb = generate_dataset(&config, dir_b.path()).unwrap();
        assert_eq!(ma, mb);

        let mut paths = Vec::new();
        collect_files(dir_a.path(), &mut paths);
        assert!(!paths.is_empty());
        for rel in paths {
            let a = std::fs::read(dir_a.path().join(&rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{} differs between runs", rel.display());
        }
    }

    #[test]
    fn no_abnormal_samples_means_no_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig { test_abnormal: 0, ..small_config() };
        let manifest = generate_dataset(&config, dir.path()).unwrap();
        assert!(manifest.samples.iter().all(|s| s.object_label == ObjectLabel::Normal));
        let mut paths = Vec::new();
        collect_files(dir.path(), &mut paths);
        assert!(
            paths.iter().all(|p| !p.components().any(|c| c.as_os_str() == "GT")),
            "no ground-truth files should be written"
        );
    }

    fn collect_files(root: &Path, out: &mut Vec<PathBuf>) {
        fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    walk(&path, root, out);
                } else {
                    out.push(path.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        walk(root, root, out);
        out.sort();
    }
}
