//! Fixed orthogonal stand-in for a learned latent autoencoder.
//!
//! Encoding projects each `f x f` pixel block of each channel onto its
//! normalized constant vector (an orthonormal family, so the projection
//! is orthogonal) and then maps the resulting block means from `[0, 1]`
//! to `[-1, 1]`. Decoding applies the adjoint: every pixel of a block
//! receives the block value, mapped back and clamped to `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LatentCodec {
    /// Spatial reduction factor.
    pub factor: usize,
}

impl LatentCodec {
    pub fn new(factor: usize) -> Self {
        Self { factor }
    }

    /// `[c, h, w] -> [c, h/f, w/f]` in `[-1, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let [c, h, w] = image.shape() else {
            return Err(Error::shape("latent_encode", "expected rank-3 image"));
        };
        let (c, h, w) = (*c, *h, *w);
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid(
                "latent_encode",
                format!("factor {f} does not divide {h}x{w}"),
            ));
        }
        let (lh, lw) = (h / f, w / f);
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; c * lh * lw];
        image.with_data(|px| {
            for ch in 0..c {
                for cy in 0..lh {
                    for cx in 0..lw {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += px[ch * h * w + (cy * f + dy) * w + cx * f + dx];
                            }
                        }
                        out[ch * lh * lw + cy * lw + cx] = 2.0 * acc * norm - 1.0;
                    }
                }
            }
        });
        Tensor::from_vec(out, &[c, lh, lw])
    }

    /// `[c, lh, lw] -> [c, lh*f, lw*f]`, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let [c, lh, lw] = latent.shape() else {
            return Err(Error::shape("latent_decode", "expected rank-3 latent"));
        };
        let (c, lh, lw) = (*c, *lh, *lw);
        let f = self.factor;
        let (h, w) = (lh * f, lw * f);
        let mut out = vec![0.0; c * h * w];
        latent.with_data(|z| {
            for ch in 0..c {
                for cy in 0..lh {
                    for cx in 0..lw {
                        let v = ((z[ch * lh * lw + cy * lw + cx] + 1.0) / 2.0).clamp(0.0, 1.0);
                        for dy in 0..f {
                            for dx in 0..f {
                                out[ch * h * w + (cy * f + dy) * w + cx * f + dx] = v;
                            }
                        }
                    }
                }
            }
        });
        Tensor::from_vec(out, &[c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn block_constant_images_round_trip_exactly() {
        let codec = LatentCodec::new(4);
        let mut rng = SeedRng::new(13);
        // Build an image constant on each 4x4 block with values in [0,1].
        let mut px = vec![0.0; 3 * 16 * 16];
        for ch in 0..3 {
            for by in 0..4 {
                for bx in 0..4 {
                    let v = rng.uniform();
                    for dy in 0..4 {
                        for dx in 0..4 {
                            px[ch * 256 + (by * 4 + dy) * 16 + bx * 4 + dx] = v;
                        }
                    }
                }
            }
        }
        let img = Tensor::from_vec(px.clone(), &[3, 16, 16]).unwrap();
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        for (a, b) in px.iter().zip(back.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_encode_is_idempotent_projection() {
        let codec = LatentCodec::new(8);
        let mut rng = SeedRng::new(14);
        let img = {
            let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.uniform()).collect();
            Tensor::from_vec(data, &[3, 32, 32]).unwrap()
        };
        let once = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        let twice = codec.decode(&codec.encode(&once).unwrap()).unwrap();
        for (a, b) in once.to_vec().iter().zip(twice.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_block_mean() {
        let codec = LatentCodec::new(2);
        let img = Tensor::from_vec(
            vec![
                0.0, 1.0, //
                0.5, 0.5,
            ],
            &[1, 2, 2],
        )
        .unwrap();
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 1, 1]);
        assert!((z.to_vec()[0] - 0.0).abs() < 1e-15); // mean 0.5 -> 0.0
    }
}
