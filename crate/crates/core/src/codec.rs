//! Fixed linear latent codec: 8x8 space-to-depth (192 values per block)
//! projected onto 4 orthonormal directions.
//!
//! Rows 0, 1, 2 of the basis are the per-channel block means, so any constant
//! colour survives a round trip exactly. Row 3 is a seeded random direction
//! orthogonalised against them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Frame;

pub const BLOCK: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
const BLOCK_DIM: usize = 3 * BLOCK * BLOCK;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("frame {width}x{height} not divisible by {BLOCK}")]
    Indivisible { width: usize, height: usize },
    #[error("latent has {0} channels, expected {LATENT_CHANNELS}")]
    ChannelCount(usize),
}

/// `[4, height, width]` latent, row-major per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { channels: LATENT_CHANNELS, height, width, data: vec![0.0; LATENT_CHANNELS * height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), LATENT_CHANNELS * height * width);
        Self { channels: LATENT_CHANNELS, height, width, data }
    }

    pub fn mean_abs_diff(&self, other: &Latent) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    /// `LATENT_CHANNELS x BLOCK_DIM`, rows orthonormal. Block vectors are
    /// ordered (channel, dy, dx).
    basis: Vec<[f64; BLOCK_DIM]>,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::new(0x5eed_c0dec)
    }
}

impl LatentCodec {
    pub fn new(seed: u64) -> Self {
        let mut basis = Vec::with_capacity(LATENT_CHANNELS);
        let per = 1.0 / (BLOCK * BLOCK) as f64;
        let norm = per.sqrt();
        for c in 0..3 {
            let mut row = [0.0; BLOCK_DIM];
            row[c * BLOCK * BLOCK..(c + 1) * BLOCK * BLOCK].iter_mut().for_each(|v| *v = norm);
            basis.push(row);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = [0.0; BLOCK_DIM];
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        // Gram-Schmidt twice for numerical cleanliness
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = row.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                row.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
        basis.push(row);
        Self { basis }
    }

    pub fn latent_shape(&self, frame_h: usize, frame_w: usize) -> Result<(usize, usize), CodecError> {
        if frame_h % BLOCK != 0 || frame_w % BLOCK != 0 || frame_h == 0 || frame_w == 0 {
            return Err(CodecError::Indivisible { width: frame_w, height: frame_h });
        }
        Ok((frame_h / BLOCK, frame_w / BLOCK))
    }

    fn block(frame: &Frame, bi: usize, bj: usize, out: &mut [f64; BLOCK_DIM]) {
        let n = frame.width * frame.height;
        for c in 0..3 {
            for dy in 0..BLOCK {
                let row = (bi * BLOCK + dy) * frame.width + bj * BLOCK;
                let dst = (c * BLOCK + dy) * BLOCK;
                out[dst..dst + BLOCK].copy_from_slice(&frame.data[c * n + row..c * n + row + BLOCK]);
            }
        }
    }

    pub fn encode(&self, frame: &Frame) -> Result<Latent, CodecError> {
        let (lh, lw) = self.latent_shape(frame.height, frame.width)?;
        let mut latent = Latent::zeros(lh, lw);
        let plane = lh * lw;
        let mut buf = [0.0; BLOCK_DIM];
        for bi in 0..lh {
            for bj in 0..lw {
                Self::block(frame, bi, bj, &mut buf);
                for (k, b) in self.basis.iter().enumerate() {
                    latent.data[k * plane + bi * lw + bj] = b.iter().zip(buf.iter()).map(|(x, y)| x * y).sum();
                }
            }
        }
        Ok(latent)
    }

    /// Transpose projection and depth-to-space, without clamping.
    pub fn decode_unclamped(&self, latent: &Latent) -> Result<Frame, CodecError> {
        if latent.channels != LATENT_CHANNELS {
            return Err(CodecError::ChannelCount(latent.channels));
        }
        let (lh, lw) = (latent.height, latent.width);
        let (h, w) = (lh * BLOCK, lw * BLOCK);
        let mut frame = Frame::zeros(w, h);
        let n = w * h;
        let plane = lh * lw;
        for bi in 0..lh {
            for bj in 0..lw {
                let mut buf = [0.0; BLOCK_DIM];
                for (k, b) in self.basis.iter().enumerate() {
                    let z = latent.data[k * plane + bi * lw + bj];
                    buf.iter_mut().zip(b.iter()).for_each(|(o, v)| *o += z * v);
                }
                for c in 0..3 {
                    for dy in 0..BLOCK {
                        let row = (bi * BLOCK + dy) * w + bj * BLOCK;
                        let src = (c * BLOCK + dy) * BLOCK;
                        frame.data[c * n + row..c * n + row + BLOCK].copy_from_slice(&buf[src..src + BLOCK]);
                    }
                }
            }
        }
        Ok(frame)
    }

    pub fn decode(&self, latent: &Latent) -> Result<Frame, CodecError> {
        let mut f = self.decode_unclamped(latent)?;
        f.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(f)
    }

    pub fn basis_orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame { width: w, height: h, data: (0..3 * w * h).map(|_| rng.random::<f64>()).collect() }
    }

    #[test]
    fn basis_is_orthonormal() {
        assert!(LatentCodec::default().basis_orthonormality_error() < 1e-12);
    }

    #[test]
    fn shapes_and_zero() {
        let c = LatentCodec::default();
        let z = c.encode(&Frame::zeros(128, 80)).unwrap();
        assert_eq!((z.channels, z.height, z.width), (4, 10, 16));
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(c.decode(&Latent::zeros(10, 16)).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(matches!(c.encode(&Frame::zeros(100, 80)), Err(CodecError::Indivisible { .. })));
        let bad = Latent { channels: 3, height: 1, width: 1, data: vec![0.0; 3] };
        assert!(matches!(c.decode(&bad), Err(CodecError::ChannelCount(3))));
    }

    #[test]
    fn constant_colour_is_exact() {
        let c = LatentCodec::default();
        let f = Frame::constant(32, 16, [0.25, 0.5, 0.75]);
        let r = c.decode(&c.encode(&f).unwrap()).unwrap();
        assert!(f.data.iter().zip(&r.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn projection_is_idempotent_and_linear() {
        let c = LatentCodec::default();
        let x = random_frame(32, 16, 1);
        let y = random_frame(32, 16, 2);
        let zx = c.encode(&x).unwrap();
        let again = c.encode(&c.decode_unclamped(&zx).unwrap()).unwrap();
        assert!(zx.data.iter().zip(&again.data).all(|(a, b)| (a - b).abs() < 1e-6));

        let mix = Frame {
            width: 32,
            height: 16,
            data: x.data.iter().zip(&y.data).map(|(a, b)| 0.3 * a - 1.7 * b).collect(),
        };
        let zy = c.encode(&y).unwrap();
        let zm = c.encode(&mix).unwrap();
        for i in 0..zm.data.len() {
            assert!((zm.data[i] - (0.3 * zx.data[i] - 1.7 * zy.data[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_is_a_contraction() {
        let c = LatentCodec::default();
        let x = random_frame(32, 16, 3);
        let once = c.decode(&c.encode(&x).unwrap()).unwrap();
        let twice = c.decode(&c.encode(&once).unwrap()).unwrap();
        assert!(twice.mean_abs_diff(&once) <= x.mean_abs_diff(&once) + 1e-12);
    }
}
