//! Keypoint skeletons, limb rasterization, and pose-mask pyramids.
//!
//! Skeletons follow the COCO 17-keypoint protocol with at most ten persons
//! per image. Rendering draws each limb in a fixed distinct color so that
//! downstream scoring can recover keypoints from generated images by color
//! alone. The mask pipeline turns a rendered pose into binary maps at the
//! latent resolution, dilated by Gaussian kernels of decreasing length for
//! coarse-to-fine attention masking.

mod mask;
mod render;

pub mod io;

pub use mask::{
    activation_rate, binarize_and_downsample, gaussian_dilate, kernel_for_sigma, patchify_mask,
    BinaryMap, PoseMaskPyramid,
};
pub use render::{default_line_width, render_skeleton, PoseImage};

use crate::error::{Error, Result};

/// Keypoints per person under the COCO protocol.
pub const NUM_KEYPOINTS: usize = 17;

/// Maximum persons per image.
pub const MAX_PERSONS: usize = 10;

/// Keypoint score threshold used to filter limbs before rendering.
pub const SCORE_THRESHOLD: f64 = 0.05;

/// COCO keypoint indices, for readability at call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum CocoKeypoint {
    Nose = 0,
    LeftEye = 1,
    RightEye = 2,
    LeftEar = 3,
    RightEar = 4,
    LeftShoulder = 5,
    RightShoulder = 6,
    LeftElbow = 7,
    RightElbow = 8,
    LeftWrist = 9,
    RightWrist = 10,
    LeftHip = 11,
    RightHip = 12,
    LeftKnee = 13,
    RightKnee = 14,
    LeftAnkle = 15,
    RightAnkle = 16,
}

/// COCO limb list: keypoint index pairs connected by a line.
pub const LIMBS: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

/// One RGB color per limb, in [0,1]. All 19 entries are distinct, which is
/// what lets the evaluation stage identify limbs in generated images.
pub const LIMB_PALETTE: [[f64; 3]; 19] = [
    [1.0, 0.0, 0.0],
    [1.0, 1.0 / 3.0, 0.0],
    [1.0, 2.0 / 3.0, 0.0],
    [1.0, 1.0, 0.0],
    [2.0 / 3.0, 1.0, 0.0],
    [1.0 / 3.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0 / 3.0],
    [0.0, 1.0, 2.0 / 3.0],
    [0.0, 1.0, 1.0],
    [0.0, 2.0 / 3.0, 1.0],
    [0.0, 1.0 / 3.0, 1.0],
    [0.0, 0.0, 1.0],
    [1.0 / 3.0, 0.0, 1.0],
    [2.0 / 3.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 0.0, 2.0 / 3.0],
    [1.0, 0.0, 1.0 / 3.0],
    [1.0, 2.0 / 3.0, 2.0 / 3.0],
];

/// A single keypoint: pixel position plus detection score in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Multi-person 17-keypoint annotation on a pixel canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSkeleton {
    pub persons: Vec<[Keypoint; NUM_KEYPOINTS]>,
    /// Canvas dimensions `(height, width)` in pixels.
    pub canvas: (usize, usize),
}

impl PoseSkeleton {
    pub fn new(persons: Vec<[Keypoint; NUM_KEYPOINTS]>, canvas: (usize, usize)) -> Result<Self> {
        if canvas.0 == 0 || canvas.1 == 0 {
            return Err(Error::invalid("skeleton", "empty canvas"));
        }
        if persons.len() > MAX_PERSONS {
            return Err(Error::invalid(
                "skeleton",
                format!(
                    "{} persons exceeds the protocol maximum {MAX_PERSONS}",
                    persons.len()
                ),
            ));
        }
        Ok(Self { persons, canvas })
    }

    /// Limbs whose endpoint scores both exceed `threshold`, as
    /// `(person, limb, a, b)` tuples in deterministic draw order.
    pub fn visible_limbs(
        &self,
        threshold: f64,
    ) -> impl Iterator<Item = (usize, usize, Keypoint, Keypoint)> + '_ {
        self.persons.iter().enumerate().flat_map(move |(pi, kps)| {
            LIMBS.iter().enumerate().filter_map(move |(li, &(a, b))| {
                let (ka, kb) = (kps[a], kps[b]);
                (ka.score > threshold && kb.score > threshold).then_some((pi, li, ka, kb))
            })
        })
    }
}
