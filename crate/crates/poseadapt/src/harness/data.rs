//! Synthetic stick-figure dataset.
//!
//! Each sample is a multi-person skeleton on a 128x128 canvas plus a style
//! label. The target image is a pure function of `(skeleton, style)`: the
//! style paints a dark textured background, the skeleton is drawn on top
//! with the limb palette at a width that survives 8x downsampling. Persons
//! are placed in disjoint horizontal bands so limb colors stay separable.

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::Result;
use crate::pose::{
    render_skeleton, Keypoint, PoseImage, PoseSkeleton, LIMB_PALETTE, NUM_KEYPOINTS,
    SCORE_THRESHOLD,
};
use crate::rng::SeedRng;

/// Dark background base colors, one per style; all far away from the limb
/// palette in brightness so limb pixels remain identifiable.
pub const STYLE_BACKGROUNDS: [[f64; 3]; 8] = [
    [0.10, 0.10, 0.10],
    [0.16, 0.10, 0.04],
    [0.04, 0.10, 0.16],
    [0.05, 0.13, 0.05],
    [0.13, 0.05, 0.13],
    [0.14, 0.14, 0.06],
    [0.03, 0.12, 0.12],
    [0.12, 0.07, 0.03],
];

/// Body orientation latent; affects shoulder and hip widths so that
/// front, side, and back layouts are geometrically distinct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Front,
    Side,
    Back,
}

impl Orientation {
    fn width_factor(self) -> f64 {
        match self {
            Orientation::Front => 1.0,
            Orientation::Side => 0.35,
            Orientation::Back => 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub skeleton: PoseSkeleton,
    pub style: usize,
    pub orientation: Orientation,
    pub split: Split,
}

impl SyntheticSample {
    /// Deterministic render of the sample's target image.
    pub fn target_image(&self, cfg: &ExperimentConfig) -> Result<PoseImage> {
        let mut img = style_background(self.style, cfg.image_size);
        let limbs = render_skeleton(&self.skeleton, SCORE_THRESHOLD, cfg.target_line_width)?;
        // Overlay: limb pixels replace the background.
        let hw = img.height * img.width;
        for i in 0..hw {
            if limbs.pixels[i] != 0.0 || limbs.pixels[hw + i] != 0.0 || limbs.pixels[2 * hw + i] != 0.0
            {
                img.pixels[i] = limbs.pixels[i];
                img.pixels[hw + i] = limbs.pixels[hw + i];
                img.pixels[2 * hw + i] = limbs.pixels[2 * hw + i];
            }
        }
        Ok(img)
    }

    /// The conditioning pose image.
    pub fn pose_image(&self, cfg: &ExperimentConfig) -> Result<PoseImage> {
        render_skeleton(&self.skeleton, SCORE_THRESHOLD, cfg.pose_line_width)
    }
}

/// Style background: base color with a vertical gradient and, for even
/// styles, a faint checker texture. Pure function of `(style, size)`.
pub fn style_background(style: usize, size: usize) -> PoseImage {
    let base = STYLE_BACKGROUNDS[style % STYLE_BACKGROUNDS.len()];
    let mut img = PoseImage::black(size, size);
    let hw = size * size;
    for y in 0..size {
        let grad = 0.06 * y as f64 / size as f64;
        for x in 0..size {
            let checker = if style % 2 == 0 && ((x / 16) + (y / 16)) % 2 == 0 {
                0.03
            } else {
                0.0
            };
            let i = y * size + x;
            img.pixels[i] = base[0] + grad + checker;
            img.pixels[hw + i] = base[1] + grad + checker;
            img.pixels[2 * hw + i] = base[2] + grad + checker;
        }
    }
    img
}

/// Canonical joint offsets in scale units: `(x, y)` with `y` growing
/// downward and the pelvis midpoint at the origin. Lateral offsets are
/// multiplied by the orientation width factor.
const JOINT_OFFSETS: [(f64, f64); NUM_KEYPOINTS] = [
    (0.00, -1.05),  // nose
    (-0.08, -1.13), // left eye
    (0.08, -1.13),  // right eye
    (-0.18, -1.06), // left ear
    (0.18, -1.06),  // right ear
    (-0.42, -0.80), // left shoulder
    (0.42, -0.80),  // right shoulder
    (-0.58, -0.38), // left elbow
    (0.58, -0.38),  // right elbow
    (-0.66, 0.05),  // left wrist
    (0.66, 0.05),   // right wrist
    (-0.26, 0.00),  // left hip
    (0.26, 0.00),   // right hip
    (-0.30, 0.55),  // left knee
    (0.30, 0.55),   // right knee
    (-0.33, 1.10),  // left ankle
    (0.33, 1.10),   // right ankle
];

/// Joints that receive positional jitter (limb endpoints away from the
/// torso; jitter magnitudes keep every limb longer than its draw width).
const JITTERED: [usize; 8] = [7, 8, 9, 10, 13, 14, 15, 16];

fn person_at(
    cx: f64,
    cy: f64,
    scale: f64,
    orientation: Orientation,
    rng: &mut SeedRng,
) -> [Keypoint; NUM_KEYPOINTS] {
    let wf = orientation.width_factor();
    let mut kps = [Keypoint {
        x: 0.0,
        y: 0.0,
        score: 1.0,
    }; NUM_KEYPOINTS];
    for (i, kp) in kps.iter_mut().enumerate() {
        let (dx, dy) = JOINT_OFFSETS[i];
        kp.x = cx + dx * wf * scale;
        kp.y = cy + dy * scale;
    }
    for &j in &JITTERED {
        kps[j].x += rng.uniform_in(-0.10, 0.10) * scale;
        kps[j].y += rng.uniform_in(-0.10, 0.10) * scale;
    }
    kps
}

/// Generate a seed-deterministic dataset: 1-3 persons per sample in
/// disjoint horizontal bands, styles uniform over the configured count,
/// orientations uniform. Every skeleton stays fully inside the canvas.
pub fn gen_dataset(
    n: usize,
    seed: u64,
    split: Split,
    cfg: &ExperimentConfig,
) -> Vec<SyntheticSample> {
    let mut rng = SeedRng::new(seed);
    let size = cfg.image_size as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let persons_count = match rng.uniform() {
            u if u < 0.5 => 1,
            u if u < 0.8 => 2,
            _ => 3,
        };
        let orientation = match rng.below(3) {
            0 => Orientation::Front,
            1 => Orientation::Side,
            _ => Orientation::Back,
        };
        let band_w = size / persons_count as f64;
        let mut persons = Vec::with_capacity(persons_count);
        for b in 0..persons_count {
            // Figure half-extent is ~0.75 scale horizontally and ~1.25
            // vertically; margins keep every joint on canvas after jitter.
            let max_scale = ((band_w / 2.0 - 4.0) / 0.85).min(size / 2.6);
            let scale = rng.uniform_in(0.62 * max_scale, max_scale);
            let half_w = 0.80 * scale;
            let lo_x = b as f64 * band_w + half_w + 2.0;
            let hi_x = (b + 1) as f64 * band_w - half_w - 2.0;
            let cx = rng.uniform_in(lo_x, hi_x.max(lo_x + 1e-9));
            let top = 1.25 * scale + 3.0;
            let bottom = size - 1.22 * scale - 3.0;
            let cy = rng.uniform_in(top, bottom.max(top + 1e-9));
            persons.push(person_at(cx, cy, scale, orientation, &mut rng));
        }
        let style = rng.below(cfg.num_styles);
        let skeleton = PoseSkeleton::new(persons, (cfg.image_size, cfg.image_size))
            .expect("generator respects the person cap");
        out.push(SyntheticSample {
            skeleton,
            style,
            orientation,
            split,
        });
    }
    out
}
