//! 8-bit image loading and saving: PNG (via the `image` crate) and binary
//! PNM (P5 grayscale / P6 color), plus mask binarization and the 16-bit PGM
//! writer used for score-map export.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::IngestError;

/// 8-bit raster image, row-major, `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub width: u32,
    pub height: u32,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: u32,
    pub pixels: Vec<u8>,
}

impl ImageData {
    pub fn new(width: u32, height: u32, channels: u32, pixels: Vec<u8>) -> Result<Self, IngestError> {
        if width == 0 || height == 0 {
            return Err(IngestError::Image("image must have at least one pixel".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(IngestError::Image(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(IngestError::Image(format!(
                "pixel buffer length {} does not match {}x{}x{}",
                pixels.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: u8) -> Self {
        let n = width as usize * height as usize * channels as usize;
        Self { width, height, channels, pixels: vec![value; n] }
    }

    #[inline]
    pub fn sample(&self, x: u32, y: u32, c: u32) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.pixels[idx]
    }

    #[inline]
    pub fn set_sample(&mut self, x: u32, y: u32, c: u32, v: u8) {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.pixels[idx] = v;
    }
}

/// Load a PNG or binary PNM image. The format is detected from the file
/// content, not the extension. 16-bit sources are converted to 8 bits.
pub fn load_image(path: &Path) -> Result<ImageData, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_pnm(&bytes).map_err(|msg| IngestError::Image(format!("{}: {msg}", path.display())));
    }
    let dynimg = image::load_from_memory(&bytes)
        .map_err(|e| IngestError::Image(format!("{}: {e}", path.display())))?;
    let img = match dynimg.color().channel_count() {
        1 | 2 => {
            let g = dynimg.to_luma8();
            ImageData::new(g.width(), g.height(), 1, g.into_raw())?
        }
        _ => {
            let rgb = dynimg.to_rgb8();
            ImageData::new(rgb.width(), rgb.height(), 3, rgb.into_raw())?
        }
    };
    Ok(img)
}

/// Load a ground-truth mask and binarize it at threshold 128 (>= 128 maps to
/// 255). Multi-channel masks are reduced to luminance first. When
/// `expected_size` is given, a differing mask size is an error.
pub fn load_mask(path: &Path, expected_size: Option<(u32, u32)>) -> Result<ImageData, IngestError> {
    let img = load_image(path)?;
    let gray = if img.channels == 1 {
        img
    } else {
        crate::features::image::to_luminance(&img)
    };
    if let Some((w, h)) = expected_size {
        if gray.width != w || gray.height != h {
            return Err(IngestError::MaskSizeMismatch {
                path: path.display().to_string(),
                mask: (gray.width, gray.height),
                image: (w, h),
            });
        }
    }
    let pixels = gray.pixels.iter().map(|&v| if v >= 128 { 255 } else { 0 }).collect();
    Ok(ImageData { width: gray.width, height: gray.height, channels: 1, pixels })
}

/// Save an image as PNG (8-bit grayscale or RGB).
pub fn save_png(img: &ImageData, path: &Path) -> Result<(), IngestError> {
    let (w, h) = (img.width, img.height);
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(IngestError::Image(format!("unsupported channel count {c}"))),
    };
    let file = fs::File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    image::write_buffer_with_format(&mut writer, &img.pixels, w, h, color, image::ImageFormat::Png)
        .map_err(|e| IngestError::Image(format!("{}: {e}", path.display())))?;
    writer.flush().map_err(|e| IngestError::io(path, e))?;
    Ok(())
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageData, String> {
    let mut cursor = 2usize; // past magic
    let magic = &bytes[..2];
    let width = read_pnm_int(bytes, &mut cursor)?;
    let height = read_pnm_int(bytes, &mut cursor)?;
    let maxval = read_pnm_int(bytes, &mut cursor)?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("invalid maxval {maxval}"));
    }
    // exactly one whitespace byte separates header and payload
    cursor += 1;
    let channels: usize = if magic == b"P6" { 3 } else { 1 };
    let n_samples = width as usize * height as usize * channels;
    let wide = maxval > 255;
    let payload_len = n_samples * if wide { 2 } else { 1 };
    let payload = bytes
        .get(cursor..cursor + payload_len)
        .ok_or_else(|| "truncated PNM payload".to_string())?;
    let pixels: Vec<u8> = if wide {
        // 16-bit big-endian samples, rescaled to 8 bits
        payload
            .chunks_exact(2)
            .map(|c| {
                let v = u16::from_be_bytes([c[0], c[1]]) as u32;
                ((v * 255 + maxval / 2) / maxval).min(255) as u8
            })
            .collect()
    } else if maxval == 255 {
        payload.to_vec()
    } else {
        payload
            .iter()
            .map(|&v| (((v as u32) * 255 + maxval / 2) / maxval).min(255) as u8)
            .collect()
    };
    ImageData::new(width, height, channels as u32, pixels).map_err(|e| e.to_string())
}

fn read_pnm_int(bytes: &[u8], cursor: &mut usize) -> Result<u32, String> {
    // skip whitespace and '#' comments
    loop {
        match bytes.get(*cursor) {
            Some(b) if b.is_ascii_whitespace() => *cursor += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*cursor) {
                    *cursor += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *cursor;
    while matches!(bytes.get(*cursor), Some(b) if b.is_ascii_digit()) {
        *cursor += 1;
    }
    if *cursor == start {
        return Err("expected integer in PNM header".into());
    }
    std::str::from_utf8(&bytes[start..*cursor])
        .unwrap()
        .parse::<u32>()
        .map_err(|e| e.to_string())
}

/// Save an 8-bit image as binary PNM (P5 for grayscale, P6 for RGB).
pub fn save_pnm(img: &ImageData, path: &Path) -> Result<(), IngestError> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height).unwrap();
    out.extend_from_slice(&img.pixels);
    fs::write(path, out).map_err(|e| IngestError::io(path, e))
}

/// Write a 16-bit grayscale PGM (P5, maxval 65535, big-endian samples).
pub fn save_pgm16(width: u32, height: u32, samples: &[u16], path: &Path) -> Result<(), IngestError> {
    if samples.len() != width as usize * height as usize {
        return Err(IngestError::Image("sample count does not match dimensions".into()));
    }
    let mut out = Vec::with_capacity(samples.len() * 2 + 32);
    write!(out, "P5\n{width} {height}\n65535\n").unwrap();
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| IngestError::io(path, e))
}

/// Read a 16-bit grayscale PGM written by [`save_pgm16`].
pub fn load_pgm16(path: &Path) -> Result<(u32, u32, Vec<u16>), IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(IngestError::Image(format!("{}: not a P5 PGM", path.display())));
    }
    let mut cursor = 2usize;
    let width = read_pnm_int(&bytes, &mut cursor).map_err(IngestError::Image)?;
    let height = read_pnm_int(&bytes, &mut cursor).map_err(IngestError::Image)?;
    let maxval = read_pnm_int(&bytes, &mut cursor).map_err(IngestError::Image)?;
    if maxval != 65535 {
        return Err(IngestError::Image(format!("expected 16-bit PGM, got maxval {maxval}")));
    }
    cursor += 1;
    let n = width as usize * height as usize;
    let payload = bytes
        .get(cursor..cursor + 2 * n)
        .ok_or_else(|| IngestError::Image("truncated PGM payload".into()))?;
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, samples))
}
