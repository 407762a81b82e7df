//! Synthetic gait data: generation, rendering, file formats and the on-disk
//! dataset layout, plus keypoint normalization.

pub mod dataset;
pub mod format;
pub mod generator;
pub mod render;

pub use dataset::{DatasetIndex, Entry, GenConfig, Sequence};
pub use generator::{generate_identity, generate_skeleton_sequence, Condition, IdentityParams, WalkParams};
pub use render::render_silhouettes;

use crate::error::{dim_err, Error, Result};
use crate::graph::{joint, NUM_JOINTS};
use crate::silhouette::FRAME_SIZE;
use crate::tensor::Tensor;

/// Channels per joint: x, y, confidence.
pub const KP_CHANNELS: usize = 3;

/// `T×12×3` skeleton sequence, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointsMatrix {
    frames: usize,
    data: Vec<f32>,
}

impl KeypointsMatrix {
    pub fn new(frames: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InputLength("keypoint sequence is empty".into()));
        }
        if data.len() != frames * NUM_JOINTS * KP_CHANNELS {
            return Err(dim_err!("{} keypoint values for {} frames", data.len(), frames));
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, t: usize, j: usize) -> [f32; 3] {
        let o = (t * NUM_JOINTS + j) * KP_CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn xy(&self, t: usize, j: usize) -> [f64; 2] {
        let p = self.get(t, j);
        [p[0] as f64, p[1] as f64]
    }

    /// Frames at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> KeypointsMatrix {
        let stride = NUM_JOINTS * KP_CHANNELS;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &t in idx {
            data.extend_from_slice(&self.data[t * stride..(t + 1) * stride]);
        }
        KeypointsMatrix { frames: idx.len(), data }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.frames, NUM_JOINTS, KP_CHANNELS], data).expect("keypoint shape")
    }
}

/// `T×64×64` binary masks, frame-major, row-major within a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSequence {
    frames: usize,
    data: Vec<u8>,
}

pub const FRAME_PIXELS: usize = FRAME_SIZE * FRAME_SIZE;

impl SilhouetteSequence {
    pub fn new(frames: usize, data: Vec<u8>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InputLength("silhouette sequence is empty".into()));
        }
        if data.len() != frames * FRAME_PIXELS {
            return Err(dim_err!("{} silhouette bytes for {} frames", data.len(), frames));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::Format("silhouette bytes must be 0 or 1".into()));
        }
        Ok(Self { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.data[t * FRAME_PIXELS..(t + 1) * FRAME_PIXELS]
    }

    pub fn foreground(&self, t: usize) -> usize {
        self.frame(t).iter().filter(|&&b| b == 1).count()
    }

    pub fn select(&self, idx: &[usize]) -> SilhouetteSequence {
        let mut data = Vec::with_capacity(idx.len() * FRAME_PIXELS);
        for &t in idx {
            data.extend_from_slice(self.frame(t));
        }
        SilhouetteSequence { frames: idx.len(), data }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(&[self.frames, FRAME_SIZE, FRAME_SIZE], data).expect("silhouette shape")
    }
}

/// Translates each frame so the mid-hip sits at the origin and divides by the
/// torso length, taken as the mean shoulder-to-hip distance over both sides
/// and all frames. Confidence passes through. Disabled → unchanged copy.
pub fn normalize_keypoints(kp: &KeypointsMatrix, enabled: bool) -> Result<KeypointsMatrix> {
    if !enabled {
        return Ok(kp.clone());
    }
    use joint::*;
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut torso = 0.0;
    for t in 0..kp.frames {
        torso += dist(kp.xy(t, L_SHOULDER), kp.xy(t, L_HIP)) + dist(kp.xy(t, R_SHOULDER), kp.xy(t, R_HIP));
    }
    torso /= (2 * kp.frames) as f64;
    if !(torso > 1e-9) || !torso.is_finite() {
        return Err(Error::Normalization(format!("torso length {torso} is not positive")));
    }
    let mut data = kp.data.clone();
    for t in 0..kp.frames {
        let (l, r) = (kp.xy(t, L_HIP), kp.xy(t, R_HIP));
        let mid = [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0];
        for j in 0..NUM_JOINTS {
            let o = (t * NUM_JOINTS + j) * KP_CHANNELS;
            let p = kp.xy(t, j);
            data[o] = ((p[0] - mid[0]) / torso) as f32;
            data[o + 1] = ((p[1] - mid[1]) / torso) as f32;
        }
    }
    Ok(KeypointsMatrix { frames: kp.frames, data })
}
