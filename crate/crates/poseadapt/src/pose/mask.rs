//! Binary pose masks: downsampling, Gaussian dilation, patch labels.

use super::PoseImage;
use crate::error::{Error, Result};

/// Binary map over a pixel or latent grid. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Number of lit cells.
    pub fn coverage(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Downsample a pose image to a binary map with any-hit semantics: a cell
/// is lit iff any pixel of its receptive block is nonzero in any channel.
pub fn binarize_and_downsample(
    img: &PoseImage,
    latent_h: usize,
    latent_w: usize,
) -> Result<BinaryMap> {
    if latent_h == 0
        || latent_w == 0
        || img.height % latent_h != 0
        || img.width % latent_w != 0
    {
        return Err(Error::invalid(
            "binarize_and_downsample",
            format!(
                "latent {latent_h}x{latent_w} does not divide image {}x{}",
                img.height, img.width
            ),
        ));
    }
    let (bh, bw) = (img.height / latent_h, img.width / latent_w);
    let hw = img.height * img.width;
    let mut out = BinaryMap::zeros(latent_h, latent_w);
    for cy in 0..latent_h {
        for cx in 0..latent_w {
            'block: for dy in 0..bh {
                for dx in 0..bw {
                    let i = (cy * bh + dy) * img.width + cx * bw + dx;
                    if img.pixels[i] != 0.0
                        || img.pixels[hw + i] != 0.0
                        || img.pixels[2 * hw + i] != 0.0
                    {
                        out.data[cy * latent_w + cx] = 1;
                        break 'block;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Dilate a binary map: convolve with a `k x k` Gaussian of std `sigma`
/// (zero padded), then re-binarize with a strict `> 0` test. `k = 1` is
/// the identity.
pub fn gaussian_dilate(mask: &BinaryMap, sigma: f64, k: usize) -> Result<BinaryMap> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::invalid("gaussian_dilate", format!("kernel length {k} is even")));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid("gaussian_dilate", "sigma must be positive"));
    }
    let c = (k / 2) as isize;
    let mut kernel = vec![0.0f64; k * k];
    let mut total = 0.0;
    for ky in 0..k {
        for kx in 0..k {
            let dy = ky as isize - c;
            let dx = kx as isize - c;
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[ky * k + kx] = v;
            total += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= total;
    }

    let (h, w) = (mask.height, mask.width);
    let mut acc = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.data[y * w + x] == 0 {
                continue;
            }
            for ky in 0..k {
                let oy = y as isize + ky as isize - c;
                if oy < 0 || oy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ox = x as isize + kx as isize - c;
                    if ox < 0 || ox >= w as isize {
                        continue;
                    }
                    acc[oy as usize * w + ox as usize] += kernel[ky * k + kx];
                }
            }
        }
    }
    let mut out = BinaryMap::zeros(h, w);
    for (o, &a) in out.data.iter_mut().zip(&acc) {
        *o = u8::from(a > 0.0);
    }
    Ok(out)
}

/// Kernel length for a Gaussian of std `sigma`: `2 * ceil(3 sigma) + 1`.
pub fn kernel_for_sigma(sigma: f64) -> usize {
    assert!(sigma > 0.0, "sigma must be positive");
    2 * (3.0 * sigma).ceil() as usize + 1
}

/// Label each `p x p` patch of a mask: 1 iff the patch contains a lit cell.
/// Patches are enumerated row-major over the patch grid.
pub fn patchify_mask(mask: &BinaryMap, p: usize) -> Result<Vec<u8>> {
    if p == 0 || mask.height % p != 0 || mask.width % p != 0 {
        return Err(Error::invalid(
            "patchify_mask",
            format!("patch size {p} does not divide {}x{}", mask.height, mask.width),
        ));
    }
    let (gh, gw) = (mask.height / p, mask.width / p);
    let mut bits = vec![0u8; gh * gw];
    for py in 0..gh {
        for px in 0..gw {
            'scan: for dy in 0..p {
                for dx in 0..p {
                    if mask.get(py * p + dy, px * p + dx) == 1 {
                        bits[py * gw + px] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    Ok(bits)
}

/// Percentage of patches labelled as pose.
pub fn activation_rate(patch_mask: &[u8]) -> f64 {
    assert!(!patch_mask.is_empty());
    let lit: usize = patch_mask.iter().map(|&b| b as usize).sum();
    100.0 * lit as f64 / patch_mask.len() as f64
}

/// The coarse-to-fine mask stack: one dilated latent-resolution mask and
/// its patch labels per kernel in the schedule.
#[derive(Debug, Clone)]
pub struct PoseMaskPyramid {
    pub sigma: f64,
    /// Gaussian kernel lengths, one per attention block.
    pub kernels: Vec<usize>,
    pub masks: Vec<BinaryMap>,
    pub patch_masks: Vec<Vec<u8>>,
}

impl PoseMaskPyramid {
    /// Build masks for a rendered pose at the latent resolution.
    ///
    /// The canonical schedule is decreasing (coarse to fine), but any
    /// odd-kernel schedule is accepted so that constant and fine-to-coarse
    /// configurations can be compared.
    pub fn build(
        img: &PoseImage,
        latent_h: usize,
        latent_w: usize,
        sigma: f64,
        kernels: &[usize],
        patch: usize,
    ) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::invalid("mask_pyramid", "empty kernel schedule"));
        }
        let base = binarize_and_downsample(img, latent_h, latent_w)?;
        let mut masks = Vec::with_capacity(kernels.len());
        let mut patch_masks = Vec::with_capacity(kernels.len());
        for &k in kernels {
            let m = gaussian_dilate(&base, sigma, k)?;
            patch_masks.push(patchify_mask(&m, patch)?);
            masks.push(m);
        }
        Ok(Self {
            sigma,
            kernels: kernels.to_vec(),
            masks,
            patch_masks,
        })
    }

    pub fn depth(&self) -> usize {
        self.masks.len()
    }

    /// The finest mask (last in the schedule), used by the guided loss.
    pub fn finest(&self) -> &BinaryMap {
        self.masks.last().expect("pyramid is never empty")
    }
}
