//! Deterministic, non-anti-aliased skeleton rasterization.

use super::{PoseSkeleton, LIMB_PALETTE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The conditional pose image: an RGB float canvas where each drawn limb
/// carries its palette color and the background is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseImage {
    pub height: usize,
    pub width: usize,
    /// Channel-major `[3, height, width]` values in [0,1].
    pub pixels: Vec<f64>,
}

impl PoseImage {
    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; 3 * height * width],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [self.pixels[i], self.pixels[hw + i], self.pixels[2 * hw + i]]
    }

    fn set_pixel(&mut self, y: usize, x: usize, color: [f64; 3]) {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        self.pixels[i] = color[0];
        self.pixels[hw + i] = color[1];
        self.pixels[2 * hw + i] = color[2];
    }

    pub fn count_nonzero(&self) -> usize {
        let hw = self.height * self.width;
        (0..hw)
            .filter(|&i| {
                self.pixels[i] != 0.0 || self.pixels[hw + i] != 0.0 || self.pixels[2 * hw + i] != 0.0
            })
            .count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.pixels.clone(), &[3, self.height, self.width])
            .expect("pixel buffer matches shape")
    }
}

/// Default limb line width for a canvas: one pixel per 128 of the smaller
/// extent, so masks stay nonempty even on small canvases.
pub fn default_line_width(height: usize, width: usize) -> usize {
    ((height.min(width) as f64 / 128.0).round() as usize).max(1)
}

/// Rasterize the skeleton: one colored segment per limb whose endpoint
/// scores both exceed `threshold`. Later limbs overwrite earlier ones;
/// pixels are set, never blended, so rendering is bit-deterministic.
pub fn render_skeleton(
    skeleton: &PoseSkeleton,
    threshold: f64,
    line_width: usize,
) -> Result<PoseImage> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("render_skeleton", "threshold outside [0,1]"));
    }
    if line_width == 0 {
        return Err(Error::invalid("render_skeleton", "zero line width"));
    }
    let (h, w) = skeleton.canvas;
    let mut img = PoseImage::black(h, w);
    for (_, limb, a, b) in skeleton.visible_limbs(threshold) {
        draw_segment(
            &mut img,
            (a.x, a.y),
            (b.x, b.y),
            LIMB_PALETTE[limb],
            line_width as f64 / 2.0,
        );
    }
    Ok(img)
}

/// Set every pixel whose center lies within `radius` of the segment.
fn draw_segment(
    img: &mut PoseImage,
    p0: (f64, f64),
    p1: (f64, f64),
    color: [f64; 3],
    radius: f64,
) {
    let (x0, y0) = p0;
    let (x1, y1) = p1;
    let pad = radius + 1.0;
    let xmin = (x0.min(x1) - pad).floor().max(0.0) as usize;
    let xmax = (x0.max(x1) + pad).ceil().min(img.width as f64 - 1.0) as usize;
    let ymin = (y0.min(y1) - pad).floor().max(0.0) as usize;
    let ymax = (y0.max(y1) + pad).ceil().min(img.height as f64 - 1.0) as usize;
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len2 = dx * dx + dy * dy;
    for py in ymin..=ymax {
        for px in xmin..=xmax {
            let (fx, fy) = (px as f64, py as f64);
            let t = if len2 > 0.0 {
                (((fx - x0) * dx + (fy - y0) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            let d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
            if d2 <= radius * radius {
                img.set_pixel(py, px, color);
            }
        }
    }
}
