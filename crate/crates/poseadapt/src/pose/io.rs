//! Keypoint documents and portable image files.
//!
//! A keypoint document is a JSON object with the canvas dimensions and one
//! flat `[x1, y1, s1, ..., x17, y17, s17]` array per person:
//!
//! ```json
//! {"canvas": [128, 128], "persons": [[64.0, 20.0, 1.0, ...]]}
//! ```
//!
//! Datasets store one document per line (JSON lines). Images are written
//! as binary portable graymaps (P5) and pixmaps (P6).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryMap, Keypoint, PoseImage, PoseSkeleton, NUM_KEYPOINTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkeletonDoc {
    /// (height, width) in pixels.
    canvas: (usize, usize),
    persons: Vec<Vec<f64>>,
}

/// Serialize a skeleton as a single-line JSON document.
pub fn skeleton_to_json(sk: &PoseSkeleton) -> String {
    let doc = SkeletonDoc {
        canvas: sk.canvas,
        persons: sk
            .persons
            .iter()
            .map(|kps| {
                kps.iter()
                    .flat_map(|kp| [kp.x, kp.y, kp.score])
                    .collect::<Vec<f64>>()
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("skeleton doc serializes")
}

/// Parse a keypoint document produced by [`skeleton_to_json`].
pub fn skeleton_from_json(text: &str) -> Result<PoseSkeleton> {
    let doc: SkeletonDoc =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("keypoint document: {e}")))?;
    let mut persons = Vec::with_capacity(doc.persons.len());
    for (i, flat) in doc.persons.iter().enumerate() {
        if flat.len() != 3 * NUM_KEYPOINTS {
            return Err(Error::Config(format!(
                "person {i} has {} values, expected {}",
                flat.len(),
                3 * NUM_KEYPOINTS
            )));
        }
        let mut kps = [Keypoint {
            x: 0.0,
            y: 0.0,
            score: 0.0,
        }; NUM_KEYPOINTS];
        for (k, kp) in kps.iter_mut().enumerate() {
            *kp = Keypoint {
                x: flat[3 * k],
                y: flat[3 * k + 1],
                score: flat[3 * k + 2],
            };
        }
        persons.push(kps);
    }
    PoseSkeleton::new(persons, doc.canvas)
}

pub fn read_skeleton_file(path: &Path) -> Result<PoseSkeleton> {
    skeleton_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_skeleton_file(path: &Path, sk: &PoseSkeleton) -> Result<()> {
    std::fs::write(path, skeleton_to_json(sk) + "\n")?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary 8-bit portable graymap (P5) bytes for values in [0,1].
pub fn pgm_bytes(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

/// Binary 24-bit portable pixmap (P6) bytes for channel-major `[3,h,w]`
/// values in [0,1].
pub fn ppm_bytes(height: usize, width: usize, pixels: &[f64]) -> Vec<u8> {
    assert_eq!(pixels.len(), 3 * height * width);
    let hw = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..hw {
        out.push(to_byte(pixels[i]));
        out.push(to_byte(pixels[hw + i]));
        out.push(to_byte(pixels[2 * hw + i]));
    }
    out
}

pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pgm_bytes(height, width, values))?;
    Ok(())
}

pub fn write_ppm(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ppm_bytes(height, width, pixels))?;
    Ok(())
}

pub fn write_pose_image(path: &Path, img: &PoseImage) -> Result<()> {
    write_ppm(path, img.height, img.width, &img.pixels)
}

pub fn write_mask_pgm(path: &Path, mask: &BinaryMap) -> Result<()> {
    let values: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
    write_pgm(path, mask.height, mask.width, &values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeleton_document_round_trips() {
        let mut kps = [Keypoint {
            x: 0.0,
            y: 0.0,
            score: 1.0,
        }; NUM_KEYPOINTS];
        for (i, kp) in kps.iter_mut().enumerate() {
            kp.x = 3.25 * i as f64;
            kp.y = 1.5 * i as f64 + 0.125;
            kp.score = if i % 3 == 0 { 0.5 } else { 1.0 };
        }
        let sk = PoseSkeleton::new(vec![kps], (96, 64)).unwrap();
        let back = skeleton_from_json(&skeleton_to_json(&sk)).unwrap();
        assert_eq!(sk, back);
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(skeleton_from_json("{}").is_err());
        assert!(skeleton_from_json(r#"{"canvas": [4, 4], "persons": [[1.0, 2.0]]}"#).is_err());
    }

    #[test]
    fn pnm_headers_and_sizes() {
        let g = pgm_bytes(2, 3, &[0.0, 0.5, 1.0, 0.25, 0.75, 1.0]);
        assert!(g.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(g.len(), b"P5\n3 2\n255\n".len() + 6);

        let img = PoseImage::black(2, 2);
        let c = ppm_bytes(2, 2, &img.pixels);
        assert!(c.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(c.len(), b"P6\n2 2\n255\n".len() + 12);
    }
}
