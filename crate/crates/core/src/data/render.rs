//! Rasterizes keypoint sequences into 64×64 binary silhouettes.
//!
//! Each frame is drawn as capsules along the limbs and torso sides, a filled
//! torso quad, a neck and a round head. The figure is scaled so its full
//! extent (including stroke radius) spans 60 rows, then cropped to 64 columns
//! centered on the body's foreground centroid. Clothing changes thicken every
//! stroke by 1.5×; a bag adds an ellipse beside the torso.

use crate::error::{Error, Result};
use crate::graph::joint::*;
use crate::silhouette::FRAME_SIZE;

use super::generator::{Condition, IdentityParams};
use super::{KeypointsMatrix, SilhouetteSequence, FRAME_PIXELS};

pub const FIGURE_HEIGHT: f64 = 60.0;
const TOP_MARGIN: f64 = 2.0;
const WIDE: usize = 2 * FRAME_SIZE;
pub const CLOTHING_INFLATION: f64 = 1.5;
const TORSO_STROKE: f64 = 1.3;

const LIMB_SEGMENTS: [(usize, usize); 8] = [
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
];
const TORSO_SEGMENTS: [(usize, usize); 4] =
    [(L_SHOULDER, R_SHOULDER), (L_HIP, R_HIP), (L_SHOULDER, L_HIP), (R_SHOULDER, R_HIP)];

#[derive(Clone, Copy)]
struct Capsule {
    a: [f64; 2],
    b: [f64; 2],
    r: f64,
}

impl Capsule {
    fn contains(&self, p: [f64; 2]) -> bool {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let w = [p[0] - self.a[0], p[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 { ((w[0] * d[0] + w[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = [w[0] - t * d[0], w[1] - t * d[1]];
        q[0] * q[0] + q[1] * q[1] <= self.r * self.r
    }

    fn bounds(&self) -> [f64; 4] {
        [
            self.a[0].min(self.b[0]) - self.r,
            self.a[1].min(self.b[1]) - self.r,
            self.a[0].max(self.b[0]) + self.r,
            self.a[1].max(self.b[1]) + self.r,
        ]
    }
}

fn inside_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Pixel range `[lo, hi)` whose centers may fall inside `[min, max]`.
fn span(min: f64, max: f64, size: usize) -> (usize, usize) {
    let lo = (min - 0.5).floor().max(0.0) as usize;
    let hi = ((max - 0.5).ceil() + 1.0).clamp(0.0, size as f64) as usize;
    (lo.min(size), hi)
}

struct Figure {
    capsules: Vec<Capsule>,
    torso: [[f64; 2]; 4],
    torso_len: f64,
    torso_center: [f64; 2],
    torso_half_width: f64,
}

fn figure(kp: &KeypointsMatrix, t: usize, radius: f64) -> Result<Figure> {
    let p: Vec<[f64; 2]> = (0..12).map(|j| kp.xy(t, j)).collect();
    if p.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Render(format!("frame {t} has non-finite joints")));
    }
    let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    let neck = mid(p[L_SHOULDER], p[R_SHOULDER]);
    let pelvis = mid(p[L_HIP], p[R_HIP]);
    let axis = [neck[0] - pelvis[0], neck[1] - pelvis[1]];
    let torso_len = (axis[0] * axis[0] + axis[1] * axis[1]).sqrt();
    let extent = p.iter().map(|q| (q[0] - p[0][0]).abs().max((q[1] - p[0][1]).abs())).fold(0.0, f64::max);
    if extent < 1e-6 || torso_len < 1e-6 {
        return Err(Error::Render(format!("frame {t} has degenerate joints")));
    }
    let up = [axis[0] / torso_len, axis[1] / torso_len];
    let head_r = 0.25 * torso_len;
    let head = [neck[0] + up[0] * 0.45 * torso_len, neck[1] + up[1] * 0.45 * torso_len];
    let mut capsules = Vec::with_capacity(LIMB_SEGMENTS.len() + TORSO_SEGMENTS.len() + 2);
    for (a, b) in LIMB_SEGMENTS {
        capsules.push(Capsule { a: p[a], b: p[b], r: radius });
    }
    for (a, b) in TORSO_SEGMENTS {
        capsules.push(Capsule { a: p[a], b: p[b], r: radius * TORSO_STROKE });
    }
    capsules.push(Capsule { a: neck, b: head, r: radius * 0.8 });
    capsules.push(Capsule { a: head, b: head, r: head_r });
    let torso = [p[L_SHOULDER], p[R_SHOULDER], p[R_HIP], p[L_HIP]];
    let torso_center = mid(neck, pelvis);
    let torso_half_width =
        torso.iter().map(|q| (q[0] - torso_center[0]).abs()).fold(0.0, f64::max) + radius * TORSO_STROKE;
    Ok(Figure { capsules, torso, torso_len, torso_center, torso_half_width })
}

fn transform(f: &mut Figure, scale: f64, shift: [f64; 2]) {
    let tr = |q: [f64; 2]| [(q[0] - shift[0]) * scale, (q[1] - shift[1]) * scale];
    for c in &mut f.capsules {
        c.a = tr(c.a);
        c.b = tr(c.b);
        c.r *= scale;
    }
    for q in &mut f.torso {
        *q = tr(*q);
    }
    f.torso_center = tr(f.torso_center);
    f.torso_len *= scale;
    f.torso_half_width *= scale;
}

fn render_frame(kp: &KeypointsMatrix, t: usize, radius: f64, bag: bool, out: &mut [u8]) -> Result<()> {
    let mut fig = figure(kp, t, radius)?;
    let mut top = f64::INFINITY;
    let mut bottom = f64::NEG_INFINITY;
    for c in &fig.capsules {
        let b = c.bounds();
        top = top.min(b[1]);
        bottom = bottom.max(b[3]);
    }
    let scale = FIGURE_HEIGHT / (bottom - top);
    let pelvis_u = (kp.xy(t, L_HIP)[0] + kp.xy(t, R_HIP)[0]) / 2.0;
    transform(&mut fig, scale, [pelvis_u - (WIDE as f64 / 2.0) / scale, top - TOP_MARGIN / scale]);

    let mut body = vec![0u8; FRAME_SIZE * WIDE];
    for c in &fig.capsules {
        let b = c.bounds();
        let (x0, x1) = span(b[0], b[2], WIDE);
        let (y0, y1) = span(b[1], b[3], FRAME_SIZE);
        for y in y0..y1 {
            for x in x0..x1 {
                if c.contains([x as f64 + 0.5, y as f64 + 0.5]) {
                    body[y * WIDE + x] = 1;
                }
            }
        }
    }
    let tb = fig.torso.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |m, q| {
        [m[0].min(q[0]), m[1].min(q[1]), m[2].max(q[0]), m[3].max(q[1])]
    });
    let (x0, x1) = span(tb[0], tb[2], WIDE);
    let (y0, y1) = span(tb[1], tb[3], FRAME_SIZE);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside_polygon(&fig.torso, [x as f64 + 0.5, y as f64 + 0.5]) {
                body[y * WIDE + x] = 1;
            }
        }
    }

    // the crop follows the body alone so a bag only ever adds pixels
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &v) in body.iter().enumerate() {
        if v == 1 {
            sum += (i % WIDE) as f64 + 0.5;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Render(format!("frame {t} rasterized to an empty mask")));
    }
    let left = (sum / count as f64 - FRAME_SIZE as f64 / 2.0).round() as i64;

    if bag {
        let a = 0.22 * fig.torso_len;
        let b = 0.3 * fig.torso_len;
        let cx = fig.torso_center[0] + fig.torso_half_width + 0.5 * a;
        let cy = fig.torso_center[1] + 0.25 * fig.torso_len;
        let (x0, x1) = span(cx - a, cx + a, WIDE);
        let (y0, y1) = span(cy - b, cy + b, FRAME_SIZE);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / a;
                let dy = (y as f64 + 0.5 - cy) / b;
                if dx * dx + dy * dy <= 1.0 {
                    body[y * WIDE + x] = 1;
                }
            }
        }
    }

    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let src = x as i64 + left;
            out[y * FRAME_SIZE + x] = if (0..WIDE as i64).contains(&src) { body[y * WIDE + src as usize] } else { 0 };
        }
    }
    Ok(())
}

/// One mask per keypoint frame. Stroke radius is the identity's body
/// thickness (×1.5 under clothing changes); bags add an ellipse.
pub fn render_silhouettes(kp: &KeypointsMatrix, id: &IdentityParams, condition: Condition) -> Result<SilhouetteSequence> {
    if !(id.thickness > 0.0) {
        return Err(Error::Render(format!("body thickness {} is not positive", id.thickness)));
    }
    let radius = match condition {
        Condition::Cl => id.thickness * CLOTHING_INFLATION,
        _ => id.thickness,
    };
    let mut data = vec![0u8; kp.frames() * FRAME_PIXELS];
    for (t, frame) in data.chunks_exact_mut(FRAME_PIXELS).enumerate() {
        render_frame(kp, t, radius, condition == Condition::Bg, frame)?;
    }
    SilhouetteSequence::new(kp.frames(), data)
}
