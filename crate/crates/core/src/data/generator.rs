//! Procedural 3D walkers projected to 2D keypoints.
//!
//! The body frame has `y` up, `z` along the walking direction and `x` to the
//! walker's left. The pelvis stays at the origin (treadmill walking). A view of
//! `θ` degrees projects `u = x·cosθ + z·sinθ`, `v = −y`, then adds a
//! per-sequence image offset and Gaussian noise of 0.5 px.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{joint, NUM_JOINTS};
use crate::rng::Rng;

use super::KeypointsMatrix;

pub const NOISE_SIGMA: f64 = 0.5;
pub const MIN_FRAMES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Nm => "NM",
            Condition::Bg => "BG",
            Condition::Cl => "CL",
        }
    }

    /// Directory-name form, e.g. `nm`.
    pub fn dir_name(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }

    pub fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NM" => Ok(Condition::Nm),
            "BG" => Ok(Condition::Bg),
            "CL" => Ok(Condition::Cl),
            _ => Err(Error::Config(format!("unknown condition '{s}'"))),
        }
    }
}

/// Body proportions and gait dynamics of one synthetic subject. Lengths are
/// in pixels, angles in radians, frequency in cycles per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    pub torso: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub upper_arm: f64,
    pub lower_arm: f64,
    pub upper_leg: f64,
    pub lower_leg: f64,
    pub frequency: f64,
    pub hip_swing: f64,
    pub knee_flex: f64,
    pub shoulder_swing: f64,
    pub elbow_flex: f64,
    pub knee_phase: f64,
    pub elbow_phase: f64,
    pub arm_phase: f64,
    pub sway: f64,
    pub bob: f64,
    pub thickness: f64,
    pub lean: f64,
}

/// Sampling ranges of [`IdentityParams`], in field order.
pub const IDENTITY_RANGES: [(&str, f64, f64); 19] = [
    ("torso", 26.0, 34.0),
    ("shoulder_width", 16.0, 24.0),
    ("hip_width", 10.0, 16.0),
    ("upper_arm", 14.0, 20.0),
    ("lower_arm", 12.0, 18.0),
    ("upper_leg", 20.0, 28.0),
    ("lower_leg", 19.0, 27.0),
    ("frequency", 0.03, 0.07),
    ("hip_swing", 0.35, 0.55),
    ("knee_flex", 0.4, 0.9),
    ("shoulder_swing", 0.25, 0.5),
    ("elbow_flex", 0.1, 0.5),
    ("knee_phase", 0.3, 1.2),
    ("elbow_phase", 0.0, 0.8),
    ("arm_phase", -0.3, 0.3),
    ("sway", 0.5, 2.0),
    ("bob", 0.5, 2.0),
    ("thickness", 3.5, 6.0),
    ("lean", -0.1, 0.15),
];

impl IdentityParams {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.torso,
            self.shoulder_width,
            self.hip_width,
            self.upper_arm,
            self.lower_arm,
            self.upper_leg,
            self.lower_leg,
            self.frequency,
            self.hip_swing,
            self.knee_flex,
            self.shoulder_swing,
            self.elbow_flex,
            self.knee_phase,
            self.elbow_phase,
            self.arm_phase,
            self.sway,
            self.bob,
            self.thickness,
            self.lean,
        ]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            torso: v[0],
            shoulder_width: v[1],
            hip_width: v[2],
            upper_arm: v[3],
            lower_arm: v[4],
            upper_leg: v[5],
            lower_leg: v[6],
            frequency: v[7],
            hip_swing: v[8],
            knee_flex: v[9],
            shoulder_swing: v[10],
            elbow_flex: v[11],
            knee_phase: v[12],
            elbow_phase: v[13],
            arm_phase: v[14],
            sway: v[15],
            bob: v[16],
            thickness: v[17],
            lean: v[18],
        }
    }
}

/// Draws every field uniformly from [`IDENTITY_RANGES`]; deterministic in `seed`.
pub fn generate_identity(seed: u64) -> IdentityParams {
    let mut rng = Rng::new(seed, 0x1d);
    let v: Vec<f64> = IDENTITY_RANGES.iter().map(|&(_, lo, hi)| rng.range(lo, hi)).collect();
    IdentityParams::from_slice(&v)
}

/// Per-walk variation shared by every view of one recorded walk.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkParams {
    pub start_phase: f64,
    pub frequency_scale: f64,
    pub amplitude_scale: f64,
    /// Torso, arm and leg length scale; 1 except for clothing changes.
    pub limb_scale: f64,
    pub condition: Condition,
}

impl WalkParams {
    pub fn sample(condition: Condition, rng: &mut Rng) -> Self {
        let start_phase = rng.range(0.0, 2.0 * PI);
        let frequency_scale = rng.range(0.96, 1.04);
        let amplitude_scale = rng.range(0.94, 1.06);
        let cl = rng.range(0.95, 1.05);
        let limb_scale = if condition == Condition::Cl { cl } else { 1.0 };
        Self { start_phase, frequency_scale, amplitude_scale, limb_scale, condition }
    }
}

/// 3D joint positions at frame `t`, in joint order.
pub fn pose_3d(id: &IdentityParams, walk: &WalkParams, t: f64) -> [[f64; 3]; NUM_JOINTS] {
    use joint::*;
    let phi = 2.0 * PI * id.frequency * walk.frequency_scale * t + walk.start_phase;
    let amp = walk.amplitude_scale;
    let ls = walk.limb_scale;
    let (ul, ll, ua, la) = (id.upper_leg * ls, id.lower_leg * ls, id.upper_arm * ls, id.lower_arm * ls);
    let pelvis = [id.sway * phi.sin(), ul + ll + id.bob * (2.0 * phi).cos(), 0.0];
    let mut p = [[0.0; 3]; NUM_JOINTS];
    let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    // angle measured from straight down, positive towards +z
    let seg = |len: f64, ang: f64| [0.0, -len * ang.cos(), len * ang.sin()];
    let torso = id.torso * ls;
    let shoulder_mid = add(pelvis, [0.0, torso * id.lean.cos(), torso * id.lean.sin()]);
    for (side, sign, offset) in [(0usize, 1.0, 0.0), (1usize, -1.0, PI)] {
        let hip = add(pelvis, [sign * id.hip_width / 2.0, 0.0, 0.0]);
        let thigh = amp * id.hip_swing * (phi + offset).sin();
        let flex = amp * id.knee_flex * (0.5 + 0.5 * (phi + offset + id.knee_phase).sin());
        let knee = add(hip, seg(ul, thigh));
        let ankle = add(knee, seg(ll, thigh - flex));
        let shoulder = add(shoulder_mid, [sign * id.shoulder_width / 2.0, 0.0, 0.0]);
        let arm_phase = phi + offset + PI + id.arm_phase;
        let upper = amp * id.shoulder_swing * arm_phase.sin();
        let bend = amp * id.elbow_flex * (0.5 + 0.5 * (arm_phase + id.elbow_phase).sin());
        let elbow = add(shoulder, seg(ua, upper));
        let wrist = add(elbow, seg(la, upper + bend));
        let (sh, el, wr, hp, kn, an) = if side == 0 {
            (L_SHOULDER, L_ELBOW, L_WRIST, L_HIP, L_KNEE, L_ANKLE)
        } else {
            (R_SHOULDER, R_ELBOW, R_WRIST, R_HIP, R_KNEE, R_ANKLE)
        };
        p[sh] = shoulder;
        p[el] = elbow;
        p[wr] = wrist;
        p[hp] = hip;
        p[kn] = knee;
        p[an] = ankle;
    }
    p
}

/// Orthographic projection for a view angle in degrees: `(u, v)` with `v` down.
pub fn project(p: [f64; 3], view_deg: f64) -> [f64; 2] {
    let th = view_deg.to_radians();
    [p[0] * th.cos() + p[2] * th.sin(), -p[1]]
}

/// Keypoints of one walk seen from one view. `rng` supplies the image offset
/// and coordinate noise.
pub fn render_walk(id: &IdentityParams, walk: &WalkParams, view_deg: f64, frames: usize, rng: &mut Rng) -> Result<KeypointsMatrix> {
    if frames < MIN_FRAMES {
        return Err(Error::InputLength(format!("walks need at least {MIN_FRAMES} frames, got {frames}")));
    }
    let offset = [rng.range(80.0, 240.0), rng.range(100.0, 140.0)];
    let mut data = Vec::with_capacity(frames * NUM_JOINTS * 3);
    for t in 0..frames {
        let pose = pose_3d(id, walk, t as f64);
        for p in pose {
            let [u, v] = project(p, view_deg);
            data.push((u + offset[0] + NOISE_SIGMA * rng.normal()) as f32);
            data.push((v + offset[1] + NOISE_SIGMA * rng.normal()) as f32);
            data.push(1.0);
        }
    }
    KeypointsMatrix::new(frames, data)
}

/// One walk seen from one view, with walk parameters drawn from `rng`.
pub fn generate_skeleton_sequence(
    id: &IdentityParams,
    view_deg: f64,
    condition: Condition,
    frames: usize,
    rng: &mut Rng,
) -> Result<KeypointsMatrix> {
    let walk = WalkParams::sample(condition, rng);
    render_walk(id, &walk, view_deg, frames, rng)
}
