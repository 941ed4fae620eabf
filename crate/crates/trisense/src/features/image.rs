//! Patch descriptors for RGB and infrared images.
//!
//! Images are first resampled to a square working resolution (224 px by
//! default), then divided into a uniform patch grid (28x28 by default).
//! Each patch yields per-channel mean and standard deviation plus an
//! 8-bin gradient-orientation histogram computed on luminance, giving
//! `2 * channels + 8` dimensions per patch.

use crate::core::ModalityId;
use crate::ingest::image::ImageData;

use super::{FeatureError, PatchFeatureMap};

/// Working resolution the input is resampled to before patch extraction.
pub const WORKING_SIZE: u32 = 224;
/// Default patch grid: 28x28 = 784 patches at the working resolution.
pub const DEFAULT_GRID: u32 = 28;
/// Orientation histogram bins per patch.
pub const ORIENT_BINS: usize = 8;

/// Rec. 601 luminance, rounded half away from zero. Grayscale input is
/// returned unchanged.
pub fn to_luminance(img: &ImageData) -> ImageData {
    if img.channels == 1 {
        return img.clone();
    }
    let mut out = Vec::with_capacity(img.width as usize * img.height as usize);
    for px in img.pixels.chunks_exact(img.channels as usize) {
        let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
        out.push(y.round().clamp(0.0, 255.0) as u8);
    }
    ImageData { width: img.width, height: img.height, channels: 1, pixels: out }
}

/// Bilinear resampling with the half-pixel-center convention: destination
/// pixel `(x, y)` samples source coordinate `((x + 0.5) * sw / dw - 0.5,
/// (y + 0.5) * sh / dh - 0.5)`, clamped to the image. Results round half
/// away from zero, so the midpoint of 0 and 255 becomes 128.
pub fn resize_bilinear(img: &ImageData, dst_w: u32, dst_h: u32) -> ImageData {
    assert!(dst_w > 0 && dst_h > 0, "resize target must be non-empty");
    if dst_w == img.width && dst_h == img.height {
        return img.clone();
    }
    let c = img.channels as usize;
    let sw = img.width as f64 / dst_w as f64;
    let sh = img.height as f64 / dst_h as f64;
    let mut pixels = Vec::with_capacity(dst_w as usize * dst_h as usize * c);
    for dy in 0..dst_h {
        let sy = ((dy as f64 + 0.5) * sh - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = sy.floor() as u32;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for dx in 0..dst_w {
            let sx = ((dx as f64 + 0.5) * sw - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = sx.floor() as u32;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p00 = img.sample(x0, y0, ch as u32) as f64;
                let p10 = img.sample(x1, y0, ch as u32) as f64;
                let p01 = img.sample(x0, y1, ch as u32) as f64;
                let p11 = img.sample(x1, y1, ch as u32) as f64;
                let top = p00 + (p10 - p00) * fx;
                let bot = p01 + (p11 - p01) * fx;
                let v = top + (bot - top) * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageData { width: dst_w, height: dst_h, channels: img.channels, pixels }
}

/// Extracts the per-patch descriptor map for one image.
///
/// The image is resampled to `working_size` square, split into a
/// `grid x grid` partition of equal-size cells (cell boundaries are the
/// integer splits `floor(i * size / grid)`), and each cell produces:
///
/// * mean and population standard deviation of each channel, pixel values
///   scaled to `[0, 1]`;
/// * an 8-bin orientation histogram of luminance gradients (central
///   differences with replicated borders), weighted by gradient magnitude
///   and scaled to the per-pixel mean magnitude per bin in `[0, 1]` gray
///   units, so flat patches stay near zero.
pub fn extract_patch_features(
    img: &ImageData,
    modality: ModalityId,
    grid: u32,
    working_size: u32,
) -> Result<PatchFeatureMap, FeatureError> {
    if grid == 0 {
        return Err(FeatureError::Parameter("patch grid must be positive".into()));
    }
    if working_size == 0 {
        return Err(FeatureError::Parameter("working size must be positive".into()));
    }
    if grid > working_size {
        return Err(FeatureError::GridTooFine { rows: grid, cols: grid, size: working_size });
    }
    let resized = resize_bilinear(img, working_size, working_size);
    let lum = to_luminance(&resized);
    let (gx, gy) = luminance_gradients(&lum);

    let c = resized.channels as usize;
    let dim = 2 * c + ORIENT_BINS;
    let size = working_size as usize;
    let g = grid as usize;
    let mut values = Vec::with_capacity(g * g * dim);

    for gi in 0..g {
        let y0 = gi * size / g;
        let y1 = (gi + 1) * size / g;
        for gj in 0..g {
            let x0 = gj * size / g;
            let x1 = (gj + 1) * size / g;
            let n = ((y1 - y0) * (x1 - x0)) as f64;

            // Per-channel mean and population standard deviation in [0, 1].
            // Integer accumulation keeps the sums exact, so constant patches
            // come out with a standard deviation of exactly zero.
            for ch in 0..c {
                let mut sum = 0u64;
                let mut sum_sq = 0u64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = resized.sample(x as u32, y as u32, ch as u32) as u64;
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let mean = sum as f64 / n;
                let var = ((sum_sq as f64 - (sum as f64) * (sum as f64) / n) / n).max(0.0);
                values.push((mean / 255.0) as f32);
                values.push((var.sqrt() / 255.0) as f32);
            }

            // Magnitude-weighted orientation histogram over [-pi, pi),
            // reported as the per-pixel mean gradient magnitude landing in
            // each bin (in [0, 1] gray units). Scaling by patch area rather
            // than total mass keeps near-flat patches near zero instead of
            // amplifying the orientation of pure sensor noise.
            let mut hist = [0.0f64; ORIENT_BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = gx[y * size + x];
                    let dy = gy[y * size + x];
                    let mag = (dx * dx + dy * dy).sqrt();
                    if mag > 0.0 {
                        let theta = dy.atan2(dx);
                        let bin = (((theta + std::f64::consts::PI)
                            / (2.0 * std::f64::consts::PI))
                            * ORIENT_BINS as f64)
                            .floor() as usize;
                        hist[bin.min(ORIENT_BINS - 1)] += mag;
                    }
                }
            }
            values.extend(hist.iter().map(|&h| (h / (255.0 * n)) as f32));
        }
    }

    PatchFeatureMap::new(modality, Some((grid, grid)), dim, values)
}

/// Central-difference gradients of a grayscale image with replicated
/// borders, in pixel-value units (0..=255).
fn luminance_gradients(lum: &ImageData) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(lum.channels, 1);
    let w = lum.width as usize;
    let h = lum.height as usize;
    let at = |x: i64, y: i64| -> f64 {
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        lum.pixels[y * w + x] as f64
    };
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y) - at(x - 1, y)) / 2.0;
            gy[i] = (at(x, y + 1) - at(x, y - 1)) / 2.0;
        }
    }
    (gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> ImageData {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        ImageData { width, height, channels: 3, pixels }
    }

    fn gray(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> ImageData {
        let mut pixels = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        ImageData { width, height, channels: 1, pixels }
    }

    #[test]
    fn luminance_of_pure_red_is_76() {
        // 0.299 * 255 = 76.245 -> 76.
        let img = rgb(2, 1, |_, _| [255, 0, 0]);
        let lum = to_luminance(&img);
        assert_eq!(lum.pixels, vec![76, 76]);
    }

    #[test]
    fn luminance_of_white_is_255_and_black_is_0() {
        let img = rgb(1, 2, |_, y| if y == 0 { [255, 255, 255] } else { [0, 0, 0] });
        let lum = to_luminance(&img);
        assert_eq!(lum.pixels, vec![255, 0]);
    }

    #[test]
    fn resize_identity_when_size_matches() {
        let img = rgb(4, 4, |x, y| [(x * 10) as u8, (y * 10) as u8, 7]);
        let out = resize_bilinear(&img, 4, 4);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn upsample_midpoint_of_black_and_white_is_128() {
        // Doubling a 2x1 [0, 255] row puts destination pixels 1 and 2 at
        // source coordinates 0.25 and 0.75: 63.75 -> 64 and 191.25 -> 191,
        // while a 3x upsample's center pixel sits exactly between the two
        // sources: 127.5 rounds half away from zero to 128.
        let img = gray(2, 1, |x, _| if x == 0 { 0 } else { 255 });
        let out = resize_bilinear(&img, 4, 1);
        assert_eq!(out.pixels, vec![0, 64, 191, 255]);
        let mid = resize_bilinear(&img, 3, 1);
        assert_eq!(mid.pixels[1], 128);
    }

    #[test]
    fn downsample_averages_uniform_blocks_exactly() {
        // A half-black half-white 4x4 image downsampled 2x: destination
        // centers land on source coordinates 0.5 and 2.5, averaging equal
        // pixels -> exact block values.
        let img = gray(4, 4, |x, _| if x < 2 { 10 } else { 200 });
        let out = resize_bilinear(&img, 2, 2);
        assert_eq!(out.pixels, vec![10, 200, 10, 200]);
    }

    #[test]
    fn constant_image_features_are_mean_zero_std_zero_hist() {
        let img = rgb(16, 16, |_, _| [51, 102, 204]);
        let map = extract_patch_features(&img, ModalityId::Rgb, 2, 16).unwrap();
        assert_eq!(map.grid, Some((2, 2)));
        assert_eq!(map.dim, 14);
        assert_eq!(map.count(), 4);
        for row in map.rows() {
            assert!((row[0] - 51.0 / 255.0).abs() < 1e-6);
            assert_eq!(row[1], 0.0);
            assert!((row[2] - 102.0 / 255.0).abs() < 1e-6);
            assert_eq!(row[3], 0.0);
            assert!((row[4] - 204.0 / 255.0).abs() < 1e-6);
            assert_eq!(row[5], 0.0);
            assert!(row[6..].iter().all(|&h| h == 0.0));
        }
    }

    #[test]
    fn vertical_step_edge_fills_the_rightward_orientation_bin() {
        // Dark left half, bright right half: every non-zero gradient points
        // in +x (theta = 0), which lands in bin 4 of 8 over [-pi, pi).
        let img = gray(16, 16, |x, _| if x < 8 { 0 } else { 200 });
        let map = extract_patch_features(&img, ModalityId::Infrared, 1, 16).unwrap();
        assert_eq!(map.dim, 10);
        let hist = &map.row(0)[2..10];
        assert!(hist[4] > 0.0, "hist = {hist:?}");
        for (b, &h) in hist.iter().enumerate() {
            if b != 4 {
                assert_eq!(h, 0.0);
            }
        }
        // Two columns of magnitude 100 gradients over a 16x16 patch.
        let expected = (2.0 * 16.0 * 100.0) / (255.0 * 256.0);
        assert!((hist[4] as f64 - expected).abs() < 1e-6, "hist = {hist:?}");
    }

    #[test]
    fn horizontal_step_edge_fills_the_downward_orientation_bin() {
        // Bright area below: gradients point in +y (theta = pi/2), bin 6.
        let img = gray(16, 16, |_, y| if y < 8 { 0 } else { 200 });
        let map = extract_patch_features(&img, ModalityId::Infrared, 1, 16).unwrap();
        let hist = &map.row(0)[2..10];
        assert!(hist[6] > 0.0, "hist = {hist:?}");
        assert!(hist.iter().enumerate().all(|(b, &h)| b == 6 || h == 0.0), "hist = {hist:?}");
    }

    #[test]
    fn checkerboard_patch_mean_is_half_and_std_is_half() {
        let img = gray(8, 8, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let map = extract_patch_features(&img, ModalityId::Infrared, 1, 8).unwrap();
        let row = map.row(0);
        assert!((row[0] - 0.5).abs() < 1e-6);
        assert!((row[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn default_working_grid_yields_784_patches() {
        let img = gray(64, 64, |x, y| ((x * 3 + y * 5) % 251) as u8);
        let map =
            extract_patch_features(&img, ModalityId::Infrared, DEFAULT_GRID, WORKING_SIZE).unwrap();
        assert_eq!(map.count(), 784);
        assert_eq!(map.grid, Some((28, 28)));
    }

    #[test]
    fn grid_finer_than_working_resolution_is_rejected() {
        let img = gray(8, 8, |_, _| 0);
        let err = extract_patch_features(&img, ModalityId::Infrared, 300, 224).unwrap_err();
        assert!(matches!(err, FeatureError::GridTooFine { .. }));
    }

    proptest! {
        #[test]
        fn histogram_mass_stays_under_the_gradient_ceiling(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut data = gray(16, 16, |_, _| 0);
            for p in &mut data.pixels {
                *p = rng.gen();
            }
            let map = extract_patch_features(&data, ModalityId::Infrared, 4, 16).unwrap();
            // Central differences cap the per-pixel magnitude at
            // 127.5 * sqrt(2), so the per-pixel mean mass across bins
            // stays under sqrt(2)/2 in [0, 1] gray units.
            for row in map.rows() {
                let s: f64 = row[2..].iter().map(|&h| h as f64).sum();
                prop_assert!((0.0..=0.7072).contains(&s), "bin mass sum {s}");
            }
        }

        #[test]
        fn features_are_finite_and_bounded(seed in 0u64..200, w in 4u32..40, h in 4u32..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut img = gray(w, h, |_, _| 0);
            for p in &mut img.pixels {
                *p = rng.gen();
            }
            let map = extract_patch_features(&img, ModalityId::Infrared, 3, 12).unwrap();
            for row in map.rows() {
                for &v in row {
                    prop_assert!(v.is_finite());
                    prop_assert!((-0.001..=1.001).contains(&v));
                }
            }
        }

        #[test]
        fn resize_preserves_constant_images(v in any::<u8>(), w in 1u32..20, h in 1u32..20) {
            let img = gray(w, h, |_, _| v);
            let out = resize_bilinear(&img, 13, 9);
            prop_assert!(out.pixels.iter().all(|&p| p == v));
        }
    }
}
