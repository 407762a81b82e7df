//! Eval-mode embedding extraction from checkpoints.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::data::{normalize_keypoints, DatasetIndex, Entry, Sequence};
use crate::error::{Error, Result};
use crate::eval::{Embedding, EmbeddingSet};
use crate::fusion::{BiFusion, MSGG_PREFIX, SIL_PREFIX};
use crate::msgg::Msgg;
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::silhouette::SilhouetteEncoder;
use crate::train::{keypoint_tensor, parse_model_config, silhouette_tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// Fused part features `N×d_fused` (full model).
    BiFusion,
    /// Compact skeleton embedding (full model).
    MsggOnly,
    /// Silhouette part features `N×d_s` (silhouette or full model).
    SilhouetteOnly,
    /// Pooled embedding of every skeleton branch, one part per branch
    /// (skeleton or full model).
    MsggBranches,
}

impl EmbedMode {
    pub const ALL: [EmbedMode; 4] =
        [EmbedMode::BiFusion, EmbedMode::MsggOnly, EmbedMode::SilhouetteOnly, EmbedMode::MsggBranches];

    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::BiFusion => "bifusion",
            EmbedMode::MsggOnly => "msgg_only",
            EmbedMode::SilhouetteOnly => "silhouette_only",
            EmbedMode::MsggBranches => "msgg_branches",
        }
    }

    /// Mode used when none is requested for a checkpoint kind.
    pub fn default_for(kind: CheckpointKind) -> Self {
        match kind {
            CheckpointKind::Msgg => EmbedMode::MsggBranches,
            CheckpointKind::Silhouette => EmbedMode::SilhouetteOnly,
            CheckpointKind::BiFusion => EmbedMode::BiFusion,
        }
    }
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EmbedMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding mode '{s}'")))
    }
}

enum Net {
    Msgg(Msgg),
    Sil(SilhouetteEncoder),
    Full(BiFusion),
}

/// A checkpoint rebuilt into its network.
pub struct LoadedModel {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub classes: usize,
    store: ParamStore,
    net: Net,
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (config, classes) = parse_model_config(&ckpt.config)?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0, 0);
        let net = match ckpt.kind {
            CheckpointKind::Msgg => Net::Msgg(Msgg::new(config.msgg_config(classes), &mut store, MSGG_PREFIX, &mut rng)?),
            CheckpointKind::Silhouette => {
                Net::Sil(SilhouetteEncoder::new(config.sil_config(), &mut store, SIL_PREFIX, &mut rng)?)
            }
            CheckpointKind::BiFusion => Net::Full(BiFusion::new(
                config.msgg_config(classes),
                config.sil_config(),
                config.fusion_config(),
                &mut store,
                &mut rng,
            )?),
        };
        let n = ckpt.apply(&mut store)?;
        if n != store.len() {
            return Err(Error::Load(format!("checkpoint holds {n} of {} parameters", store.len())));
        }
        Ok(Self { kind: ckpt.kind, config, classes, store, net })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn supports(&self, mode: EmbedMode) -> bool {
        matches!(
            (&self.net, mode),
            (Net::Full(_), _) | (Net::Msgg(_), EmbedMode::MsggBranches) | (Net::Sil(_), EmbedMode::SilhouetteOnly)
        )
    }

    /// `(parts, values)` for one sequence, using its first `eval_frames`
    /// frames (all when 0).
    pub fn embed(&self, mode: EmbedMode, seq: &Sequence, eval_frames: usize) -> Result<(usize, Vec<f64>)> {
        if !self.supports(mode) {
            return Err(Error::Load(format!("a {:?} checkpoint cannot produce {} embeddings", self.kind, mode)));
        }
        let t = if eval_frames == 0 { seq.keypoints.frames() } else { eval_frames.min(seq.keypoints.frames()) };
        let frames: Vec<usize> = (0..t).collect();
        let mut s = Session::inference(&self.store);
        let needs_kp = !matches!(mode, EmbedMode::SilhouetteOnly);
        let needs_sil = matches!(mode, EmbedMode::BiFusion | EmbedMode::SilhouetteOnly);
        let kp = if needs_kp {
            let k = normalize_keypoints(&seq.keypoints.select(&frames), self.config.normalize)?;
            Some(s.input(keypoint_tensor(&[k])?))
        } else {
            None
        };
        let sil = if needs_sil { Some(s.input(silhouette_tensor(&[seq.silhouettes.select(&frames)])?)) } else { None };
        let (parts, out) = match (&self.net, mode) {
            (Net::Full(m), EmbedMode::BiFusion) => {
                let o = m.forward(&mut s, kp.unwrap(), sil.unwrap())?;
                (m.sil.config.parts, o.fused)
            }
            (Net::Full(m), EmbedMode::MsggOnly) => (1, m.compact_embedding(&mut s, kp.unwrap())?),
            (Net::Full(m), EmbedMode::SilhouetteOnly) => (m.sil.config.parts, m.sil.forward(&mut s, sil.unwrap())?),
            (Net::Sil(m), EmbedMode::SilhouetteOnly) => (m.config.parts, m.forward(&mut s, sil.unwrap())?),
            (Net::Full(BiFusion { msgg: m, .. }), EmbedMode::MsggBranches) | (Net::Msgg(m), EmbedMode::MsggBranches) => {
                let o = m.forward(&mut s, kp.unwrap())?;
                let data: Vec<f64> = o.embeddings.iter().flat_map(|&e| s.value(e).data().to_vec()).collect();
                return Ok((o.embeddings.len(), data));
            }
            _ => unreachable!("mode support checked above"),
        };
        Ok((parts, s.value(out).data().to_vec()))
    }

    /// Embeds sequences in parallel; output order follows `items`.
    pub fn embed_all(&self, mode: EmbedMode, items: &[(Entry, Sequence)], eval_frames: usize) -> Result<EmbeddingSet> {
        let out: Vec<Embedding> = items
            .par_iter()
            .map(|(e, seq)| {
                let (parts, data) = self.embed(mode, seq, eval_frames)?;
                Embedding::new(e, parts, data)
            })
            .collect::<Result<_>>()?;
        EmbeddingSet::new(out)
    }

    /// Reads and embeds dataset entries in parallel; output order follows `entries`.
    pub fn embed_index(&self, mode: EmbedMode, index: &DatasetIndex, entries: &[Entry], eval_frames: usize) -> Result<EmbeddingSet> {
        let out: Vec<Embedding> = entries
            .par_iter()
            .map(|e| {
                let seq = index.read(e)?;
                let (parts, data) = self.embed(mode, &seq, eval_frames)?;
                Embedding::new(e, parts, data)
            })
            .collect::<Result<_>>()?;
        EmbeddingSet::new(out)
    }
}
