//! 8-bit RGB rasters and float frames, with PNG I/O.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
}

/// Interleaved RGB, row-major, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_black(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn write_png<W: Write>(&self, w: W) -> Result<(), ImageError> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.data)?;
        writer.finish()?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut buf = Vec::new();
        self.write_png(&mut buf)?;
        Ok(buf)
    }

    pub fn read_png<R: Read + std::io::BufRead + std::io::Seek>(r: R) -> Result<Self, ImageError> {
        let decoder = png::Decoder::new(r);
        let mut reader = decoder.read_info()?;
        let size = reader.output_buffer_size().ok_or_else(|| ImageError::Unsupported("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Unsupported(format!("{:?} {:?}", info.color_type, info.bit_depth)));
        }
        buf.truncate(info.buffer_size());
        Ok(Self { width: info.width as usize, height: info.height as usize, data: buf })
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        Self::read_png(std::io::Cursor::new(bytes))
    }

    pub fn to_frame(&self) -> Frame {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = self.data[p * 3 + c] as f64 / 255.0;
            }
        }
        Frame { width: self.width, height: self.height, data }
    }
}

/// Planar float RGB frame, `[3, height, width]`, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let n = width * height;
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            data[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = rgb[c]);
        }
        Self { width, height, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let n = self.width * self.height;
        let mut img = RgbImage::new(self.width, self.height);
        for p in 0..n {
            for c in 0..3 {
                img.data[p * 3 + c] = (self.data[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        img
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let mut img = RgbImage::filled(7, 5, [10, 20, 30]);
        img.put(3, 2, [255, 0, 7]);
        let bytes = img.to_png_bytes().unwrap();
        assert_eq!(RgbImage::from_png_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn frame_conversion_round_trip() {
        let mut img = RgbImage::filled(4, 3, [0, 128, 255]);
        img.put(0, 0, [1, 2, 3]);
        assert_eq!(img.to_frame().to_rgb(), img);
    }
}
