//! Raster containers and their PNG encodings.
//!
//! RGB images are 8-bit PNG, instance maps 16-bit grayscale PNG holding the
//! part ID, and binary masks 8-bit grayscale PNG with values `{0, 255}`.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unexpected png format in {0}")]
    Format(String),
    #[error("mask contains non-binary value {0}")]
    NonBinary(u8),
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Channel-major floats in `[0, 1]`, shape `[3, H, W]`.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0f32; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        encode(self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, &self.data)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, info, data) = decode(bytes)?;
        if info != (png::ColorType::Rgb, png::BitDepth::Eight) {
            return Err(ImageError::Format("expected 8-bit RGB".into()));
        }
        Ok(Self { width: w, height: h, data })
    }
}

/// Per-pixel part IDs; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl InstanceMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_be_bytes()).collect();
        encode(self.width, self.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, info, data) = decode(bytes)?;
        if info != (png::ColorType::Grayscale, png::BitDepth::Sixteen) {
            return Err(ImageError::Format("expected 16-bit grayscale".into()));
        }
        let data = data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        Ok(Self { width: w, height: h, data })
    }
}

/// Strictly binary mask stored as `0`/`1` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        encode(self.width, self.height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, info, data) = decode(bytes)?;
        if info != (png::ColorType::Grayscale, png::BitDepth::Eight) {
            return Err(ImageError::Format("expected 8-bit grayscale".into()));
        }
        let data = data
            .into_iter()
            .map(|v| match v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(ImageError::NonBinary(other)),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { width: w, height: h, data })
    }
}

fn encode(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Adaptive);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(usize, usize, (png::ColorType, png::BitDepth), Vec<u8>), ImageError> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Format("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, (info.color_type, info.bit_depth), buf))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ImageError> {
    std::fs::read(path).map_err(|source| ImageError::Io { path: path.display().to_string(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    std::fs::write(path, bytes).map_err(|source| ImageError::Io { path: path.display().to_string(), source })
}
