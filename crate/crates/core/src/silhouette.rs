//! Part-based silhouette encoder.
//!
//! A simplified reading of the GaitPart pipeline: three 3×3 conv stages with
//! 2×2 max pooling after the first two, a horizontal split of the final map
//! into `N` strips reduced by spatial max, a per-part window-3 temporal
//! convolution ("micro-motion") with relu, and a max over time. The published
//! focal-conv and attention blocks are not reproduced, and strips use max only
//! rather than max plus mean.

use crate::autodiff::{PoolKind, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FRAME_SIZE: usize = 64;
/// Spatial extent of the final feature map.
pub const MAP_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SilConfig {
    pub channels: [usize; 3],
    pub parts: usize,
    pub window: usize,
}

impl Default for SilConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128], parts: 16, window: 3 }
    }
}

impl SilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("silhouette channels must be positive".into()));
        }
        if self.parts == 0 || MAP_SIZE % self.parts != 0 {
            return Err(Error::Config(format!("{} parts do not split {} rows", self.parts, MAP_SIZE)));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("micro-motion window must be odd, got {}", self.window)));
        }
        Ok(())
    }

    /// Length of each part feature.
    pub fn part_dim(&self) -> usize {
        self.channels[2]
    }
}

struct ConvStage {
    w: ParamId,
    b: ParamId,
}

pub struct SilhouetteEncoder {
    pub config: SilConfig,
    prefix: String,
    stages: [ConvStage; 3],
    motion_w: ParamId,
    motion_b: ParamId,
}

impl SilhouetteEncoder {
    pub fn new(config: SilConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut cin = 1;
        let mut stage = |i: usize, cout: usize, cin: usize| {
            let fan_in = cin * 9;
            // relu stack without normalization: keep activation scale with a √6 gain
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..cout * fan_in).map(|_| rng.range(-bound, bound)).collect();
            let w = store.add(
                &format!("{prefix}.conv{i}.w"),
                ParamKind::Weight,
                Tensor::new(&[cout, cin, 3, 3], data).expect("conv shape"),
            );
            let b = store.add(&format!("{prefix}.conv{i}.b"), ParamKind::Weight, Tensor::zeros(&[cout]));
            ConvStage { w, b }
        };
        let s1 = stage(1, config.channels[0], cin);
        cin = config.channels[0];
        let s2 = stage(2, config.channels[1], cin);
        cin = config.channels[1];
        let s3 = stage(3, config.channels[2], cin);
        let d = config.parts * config.part_dim();
        let mut mw = vec![0.0; config.window * d];
        mw[(config.window / 2) * d..(config.window / 2 + 1) * d].fill(1.0);
        let motion_w = store.add(&format!("{prefix}.motion.w"), ParamKind::Weight, Tensor::new(&[config.window, d], mw)?);
        let motion_b = store.add(&format!("{prefix}.motion.b"), ParamKind::Weight, Tensor::zeros(&[d]));
        Ok(Self { config, prefix: prefix.to_string(), stages: [s1, s2, s3], motion_w, motion_b })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `[F×64×64]` masks (or `[F×1×64×64]`) → `[F×c3×16×16]` feature maps.
    pub fn encode_frames(&self, s: &mut Session, frames: Var) -> Result<Var> {
        let sh = s.tape.shape(frames).to_vec();
        let f = match sh.as_slice() {
            [f, FRAME_SIZE, FRAME_SIZE] | [f, 1, FRAME_SIZE, FRAME_SIZE] => *f,
            _ => return Err(dim_err!("silhouette frames must be [F x 64 x 64], got {:?}", sh)),
        };
        let mut x = s.tape.reshape(frames, &[f, 1, FRAME_SIZE, FRAME_SIZE])?;
        for (i, st) in self.stages.iter().enumerate() {
            let w = s.param(st.w);
            let b = s.param(st.b);
            x = s.tape.conv2d(x, w, 1, 1)?;
            x = s.tape.add_bias_axis(x, b, 1)?;
            x = s.tape.relu(x);
            if i < 2 {
                x = s.tape.max_pool2d(x)?;
            }
        }
        Ok(x)
    }

    /// `[B×T×64×64]` masks → part features `[B×N×d_s]`.
    pub fn forward(&self, s: &mut Session, sil: Var) -> Result<Var> {
        let sh = s.tape.shape(sil).to_vec();
        if sh.len() != 4 || sh[2] != FRAME_SIZE || sh[3] != FRAME_SIZE {
            return Err(dim_err!("silhouettes must be [B x T x 64 x 64], got {:?}", sh));
        }
        let (b, t) = (sh[0], sh[1]);
        if t < 3 {
            return Err(Error::InputLength(format!("silhouette sequence has {t} frames, needs at least 3")));
        }
        let (n, c) = (self.config.parts, self.config.part_dim());
        let frames = s.tape.reshape(sil, &[b * t, FRAME_SIZE, FRAME_SIZE])?;
        let maps = self.encode_frames(s, frames)?;
        let parts = horizontal_split(&mut s.tape, maps, n)?;
        let seq = s.tape.reshape(parts, &[b, t, n, c])?;
        let w = s.param(self.motion_w);
        let bias = s.param(self.motion_b);
        let m = micro_motion(&mut s.tape, seq, w, bias)?;
        let pooled = s.tape.pool(m, 1, PoolKind::Max)?;
        Ok(pooled)
    }
}

/// `[F×C×H×W]` → `[F×N×C]`: each part is the max over its `H/N` rows and all columns.
pub fn horizontal_split(tape: &mut Tape, fmap: Var, parts: usize) -> Result<Var> {
    let sh = tape.shape(fmap).to_vec();
    if sh.len() != 4 {
        return Err(dim_err!("horizontal_split expects [F x C x H x W], got {:?}", sh));
    }
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if parts == 0 || h % parts != 0 {
        return Err(Error::Config(format!("{parts} parts do not split {h} rows")));
    }
    let x = tape.reshape(fmap, &[f, c, parts, (h / parts) * w])?;
    let x = tape.pool(x, 3, PoolKind::Max)?;
    tape.permute(x, &[0, 2, 1])
}

/// Per-part, per-channel temporal convolution plus bias and relu on
/// `[B×T×N×C]`; `w` is `[window × N·C]`, `bias` is `[N·C]`.
pub fn micro_motion(tape: &mut Tape, x: Var, w: Var, bias: Var) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(dim_err!("micro_motion expects [B x T x N x C], got {:?}", sh));
    }
    let d = sh[2] * sh[3];
    if tape.shape(w).len() != 2 || tape.shape(w)[1] != d || tape.shape(bias) != [d] {
        return Err(dim_err!("micro-motion kernels {:?} for {} part channels", tape.shape(w), d));
    }
    let flat = tape.reshape(x, &[sh[0], sh[1], d])?;
    let y = tape.conv1d_time(flat, w)?;
    let y = tape.add(y, bias)?;
    let y = tape.relu(y);
    tape.reshape(y, &sh)
}
