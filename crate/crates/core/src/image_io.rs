//! 8-bit grayscale PGM (binary P5) and PNG reading and writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::geometry::PressureImage;
use crate::phantom::BinaryMask;
use crate::{PatError, Result};

/// How image values map to preview bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreviewScale {
    /// `[0, 1] -> [0, 255]`, values outside clamped.
    Unit,
    /// `[-max|x|, +max|x|] -> [0, 255]`, so zero maps to mid-gray.
    Symmetric,
}

impl PreviewScale {
    pub fn describe(self) -> &'static str {
        match self {
            PreviewScale::Unit => "linear [0, 1] -> [0, 255], clamped",
            PreviewScale::Symmetric => "linear [-max|x|, +max|x|] -> [0, 255]",
        }
    }
}

pub fn preview_bytes(img: &PressureImage, scale: PreviewScale) -> Vec<u8> {
    let to_byte = |u: f64| (u.clamp(0.0, 1.0) * 255.0).round() as u8;
    match scale {
        PreviewScale::Unit => img.values.iter().map(|&v| to_byte(v)).collect(),
        PreviewScale::Symmetric => {
            let m = img.max_abs();
            if m == 0.0 {
                return vec![128; img.values.len()];
            }
            img.values.iter().map(|&v| to_byte((v + m) / (2.0 * m))).collect()
        }
    }
}

pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != height * width {
        return Err(PatError::shape(height * width, pixels.len()));
    }
    let f = File::create(path).map_err(|e| PatError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{width} {height}\n255\n")
        .and_then(|_| w.write_all(pixels))
        .and_then(|_| w.flush())
        .map_err(|e| PatError::io(path, e))
}

pub fn write_png(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != height * width {
        return Err(PatError::shape(height * width, pixels.len()));
    }
    let f = File::create(path).map_err(|e| PatError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| PatError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(pixels).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Grayscale raster as `(height, width, pixels)`.
pub type Gray8 = (usize, usize, Vec<u8>);

fn format_err(path: &Path, reason: impl Into<String>) -> PatError {
    PatError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Gray8> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| PatError::io(path, e))?;
    // header: magic, width, height, maxval separated by whitespace, '#' comments
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected binary PGM (P5), found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field '{s}'")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("only 8-bit PGM is supported (maxval {maxval})")));
    }
    // exactly one whitespace byte ends the header
    let data = &bytes[(i + 1).min(bytes.len())..];
    if data.len() < width * height {
        return Err(format_err(path, "truncated PGM payload"));
    }
    Ok((height, width, data[..width * height].to_vec()))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Gray8> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| PatError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(f));
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("expected 8-bit PNG, got {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = match info.color_type {
        png::ColorType::Grayscale => buf[..w * h].to_vec(),
        png::ColorType::GrayscaleAlpha => buf[..w * h * 2].chunks_exact(2).map(|c| c[0]).collect(),
        other => return Err(format_err(path, format!("expected a grayscale PNG, got {other:?}"))),
    };
    Ok((h, w, pixels))
}

/// Reads a PGM or PNG by extension (`.pgm` / `.png`, case-insensitive).
pub fn read_gray(path: impl AsRef<Path>) -> Result<Gray8> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(format_err(path, "unsupported image extension (expected .pgm or .png)")),
    }
}

/// Loads a vessel mask; any nonzero pixel is vessel.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (h, w, px) = read_gray(path)?;
    BinaryMask::from_raster(&[h, w], &px)
}

/// Writes an 8-bit preview, format chosen by extension.
pub fn write_preview(path: impl AsRef<Path>, img: &PressureImage, scale: PreviewScale) -> Result<()> {
    let path = path.as_ref();
    let bytes = preview_bytes(img, scale);
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img.height, img.width, &bytes),
        _ => write_pgm(path, img.height, img.width, &bytes),
    }
}
