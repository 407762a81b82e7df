//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`RunConfig::to_text`] prints every key in [`KEYS`] order and
//! parses back to the same configuration.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::graph::{SelfLoop, Strategy};
use crate::msgg::{MsggConfig, Pyramid};
use crate::silhouette::SilConfig;

/// Which features the silhouette-side triplet term of global training sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SilLossTarget {
    Fused,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub ids: usize,
    pub frames: usize,
    pub views: Vec<u32>,
    pub nm_walks: usize,
    pub bg_walks: usize,
    pub cl_walks: usize,
    pub normalize: bool,
    pub channels: [usize; 3],
    pub temporal_kernel: usize,
    pub blocks: usize,
    pub strategy: Strategy,
    pub self_loop: SelfLoop,
    pub semp: bool,
    pub pyramid: Pyramid,
    pub sil_channels: [usize; 3],
    pub parts: usize,
    pub micro_window: usize,
    pub compact_dim: usize,
    pub dropout: f64,
    pub fused_dim: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub batch_frames: usize,
    pub margin: f64,
    pub loss_weights: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pretrain_lr: f64,
    pub pretrain_iters: usize,
    pub pretrain_milestones: Vec<usize>,
    pub sil_lr: f64,
    pub sil_iters: usize,
    pub sil_milestones: Vec<usize>,
    pub global_lr_pretrained: f64,
    pub global_lr_new: f64,
    pub global_iters: usize,
    pub global_milestones: Vec<usize>,
    pub sil_loss_on: SilLossTarget,
    pub gallery_nm: usize,
    pub rank_k: usize,
    pub exclude_identical_view: bool,
    pub eval_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let msgg = MsggConfig::default();
        let sil = SilConfig::default();
        let fusion = FusionConfig::default();
        Self {
            seed: 0,
            ids: gen.ids,
            frames: gen.frames,
            views: gen.views,
            nm_walks: gen.nm,
            bg_walks: gen.bg,
            cl_walks: gen.cl,
            normalize: true,
            channels: msgg.channels,
            temporal_kernel: msgg.temporal_kernel,
            blocks: msgg.blocks,
            strategy: msgg.strategy,
            self_loop: msgg.self_loop,
            semp: msgg.semp,
            pyramid: msgg.pyramid,
            sil_channels: sil.channels,
            parts: sil.parts,
            micro_window: sil.window,
            compact_dim: fusion.compact_dim,
            dropout: fusion.dropout,
            fused_dim: fusion.fused_dim,
            batch_p: 4,
            batch_k: 4,
            batch_frames: 30,
            margin: crate::loss::DEFAULT_MARGIN,
            loss_weights: vec![3.0, 2.0, 1.0],
            momentum: 0.9,
            weight_decay: 5e-4,
            pretrain_lr: 0.1,
            pretrain_iters: 3000,
            pretrain_milestones: vec![1000, 2000, 3000],
            sil_lr: 0.1,
            sil_iters: 3000,
            sil_milestones: vec![1000, 2000, 3000],
            global_lr_pretrained: 1e-4,
            global_lr_new: 0.1,
            global_iters: 1600,
            global_milestones: vec![400, 800, 1200, 1600],
            sil_loss_on: SilLossTarget::Fused,
            gallery_nm: 4,
            rank_k: 1,
            exclude_identical_view: true,
            eval_frames: 0,
        }
    }
}

/// Every key with a one-line description, in print order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, sampling and generation"),
    ("ids", "number of synthetic identities"),
    ("frames", "frames per generated sequence"),
    ("views", "comma-separated view angles in degrees"),
    ("nm_walks", "normal walks per identity"),
    ("bg_walks", "walks carrying a bag per identity"),
    ("cl_walks", "walks in different clothes per identity"),
    ("normalize", "center keypoints on the mid-hip and divide by torso length (true/false)"),
    ("channels", "skeleton block channels c1,c2,c3"),
    ("temporal_kernel", "temporal convolution length (odd)"),
    ("blocks", "skeleton blocks, 1 to 6"),
    ("strategy", "partition strategy: uniform, distance, spatial, gait_temporal"),
    ("self_loop", "identity added to every_subset or self_subset_only"),
    ("semp", "semantic pooling between branches (true/false)"),
    ("pyramid", "branches: full, joints_limbs, joints, three_joints"),
    ("sil_channels", "silhouette conv channels"),
    ("parts", "horizontal silhouette parts"),
    ("micro_window", "micro-motion window (odd)"),
    ("compact_dim", "compact block output length"),
    ("dropout", "compact block dropout rate"),
    ("fused_dim", "fused part feature length"),
    ("batch_p", "identities per batch"),
    ("batch_k", "sequences per identity"),
    ("batch_frames", "frames per training clip"),
    ("margin", "triplet margin"),
    ("loss_weights", "branch triplet weights, shallowest first"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "SGD weight decay"),
    ("pretrain_lr", "skeleton pretraining learning rate"),
    ("pretrain_iters", "skeleton pretraining iterations"),
    ("pretrain_milestones", "iterations where the pretraining rate drops x0.1"),
    ("sil_lr", "silhouette pretraining learning rate"),
    ("sil_iters", "silhouette pretraining iterations"),
    ("sil_milestones", "iterations where the silhouette rate drops x0.1"),
    ("global_lr_pretrained", "global-training rate of the pretrained backbones"),
    ("global_lr_new", "global-training rate of the fusion, compact block and classifier"),
    ("global_iters", "global training iterations"),
    ("global_milestones", "iterations where both global rates drop x0.1"),
    ("sil_loss_on", "silhouette triplet term on fused or raw part features"),
    ("gallery_nm", "leading normal walks used as gallery and training set"),
    ("rank_k", "rank used for retrieval accuracy"),
    ("exclude_identical_view", "skip the probe's own view in gallery averages (true/false)"),
    ("eval_frames", "frames per sequence at test time, 0 for all"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let l: Vec<usize> = parse_list(key, v)?;
    l.try_into().map_err(|_| Error::Config(format!("{key} takes three values, got '{v}'")))
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "ids" => self.ids = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "views" => self.views = parse_list(key, v)?,
            "nm_walks" => self.nm_walks = parse(key, v)?,
            "bg_walks" => self.bg_walks = parse(key, v)?,
            "cl_walks" => self.cl_walks = parse(key, v)?,
            "normalize" => self.normalize = parse(key, v)?,
            "channels" => self.channels = parse_triple(key, v)?,
            "temporal_kernel" => self.temporal_kernel = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "self_loop" => {
                self.self_loop = match v {
                    "every_subset" => SelfLoop::EverySubset,
                    "self_subset_only" => SelfLoop::SelfSubsetOnly,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for self_loop"))),
                }
            }
            "semp" => self.semp = parse(key, v)?,
            "pyramid" => self.pyramid = v.parse()?,
            "sil_channels" => self.sil_channels = parse_triple(key, v)?,
            "parts" => self.parts = parse(key, v)?,
            "micro_window" => self.micro_window = parse(key, v)?,
            "compact_dim" => self.compact_dim = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "fused_dim" => self.fused_dim = parse(key, v)?,
            "batch_p" => self.batch_p = parse(key, v)?,
            "batch_k" => self.batch_k = parse(key, v)?,
            "batch_frames" => self.batch_frames = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "loss_weights" => self.loss_weights = parse_list(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_iters" => self.pretrain_iters = parse(key, v)?,
            "pretrain_milestones" => self.pretrain_milestones = parse_list(key, v)?,
            "sil_lr" => self.sil_lr = parse(key, v)?,
            "sil_iters" => self.sil_iters = parse(key, v)?,
            "sil_milestones" => self.sil_milestones = parse_list(key, v)?,
            "global_lr_pretrained" => self.global_lr_pretrained = parse(key, v)?,
            "global_lr_new" => self.global_lr_new = parse(key, v)?,
            "global_iters" => self.global_iters = parse(key, v)?,
            "global_milestones" => self.global_milestones = parse_list(key, v)?,
            "sil_loss_on" => {
                self.sil_loss_on = match v {
                    "fused" => SilLossTarget::Fused,
                    "raw" => SilLossTarget::Raw,
                    _ => return Err(Error::Config(format!("invalid value '{v}' for sil_loss_on"))),
                }
            }
            "gallery_nm" => self.gallery_nm = parse(key, v)?,
            "rank_k" => self.rank_k = parse(key, v)?,
            "exclude_identical_view" => self.exclude_identical_view = parse(key, v)?,
            "eval_frames" => self.eval_frames = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "ids" => self.ids.to_string(),
            "frames" => self.frames.to_string(),
            "views" => join(&self.views),
            "nm_walks" => self.nm_walks.to_string(),
            "bg_walks" => self.bg_walks.to_string(),
            "cl_walks" => self.cl_walks.to_string(),
            "normalize" => self.normalize.to_string(),
            "channels" => join(&self.channels),
            "temporal_kernel" => self.temporal_kernel.to_string(),
            "blocks" => self.blocks.to_string(),
            "strategy" => self.strategy.name().to_string(),
            "self_loop" => match self.self_loop {
                SelfLoop::EverySubset => "every_subset".into(),
                SelfLoop::SelfSubsetOnly => "self_subset_only".into(),
            },
            "semp" => self.semp.to_string(),
            "pyramid" => self.pyramid.name().to_string(),
            "sil_channels" => join(&self.sil_channels),
            "parts" => self.parts.to_string(),
            "micro_window" => self.micro_window.to_string(),
            "compact_dim" => self.compact_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "fused_dim" => self.fused_dim.to_string(),
            "batch_p" => self.batch_p.to_string(),
            "batch_k" => self.batch_k.to_string(),
            "batch_frames" => self.batch_frames.to_string(),
            "margin" => self.margin.to_string(),
            "loss_weights" => join(&self.loss_weights),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "pretrain_iters" => self.pretrain_iters.to_string(),
            "pretrain_milestones" => join(&self.pretrain_milestones),
            "sil_lr" => self.sil_lr.to_string(),
            "sil_iters" => self.sil_iters.to_string(),
            "sil_milestones" => join(&self.sil_milestones),
            "global_lr_pretrained" => self.global_lr_pretrained.to_string(),
            "global_lr_new" => self.global_lr_new.to_string(),
            "global_iters" => self.global_iters.to_string(),
            "global_milestones" => join(&self.global_milestones),
            "sil_loss_on" => match self.sil_loss_on {
                SilLossTarget::Fused => "fused".into(),
                SilLossTarget::Raw => "raw".into(),
            },
            "gallery_nm" => self.gallery_nm.to_string(),
            "rank_k" => self.rank_k.to_string(),
            "exclude_identical_view" => self.exclude_identical_view.to_string(),
            "eval_frames" => self.eval_frames.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("known key"))).collect()
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            ids: self.ids,
            seed: self.seed,
            frames: self.frames,
            views: self.views.clone(),
            nm: self.nm_walks,
            bg: self.bg_walks,
            cl: self.cl_walks,
        }
    }

    pub fn msgg_config(&self, num_classes: usize) -> MsggConfig {
        MsggConfig {
            channels: self.channels,
            temporal_kernel: self.temporal_kernel,
            blocks: self.blocks,
            strategy: self.strategy,
            self_loop: self.self_loop,
            semp: self.semp,
            pyramid: self.pyramid,
            num_classes,
        }
    }

    pub fn sil_config(&self) -> SilConfig {
        SilConfig { channels: self.sil_channels, parts: self.parts, window: self.micro_window }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig { compact_dim: self.compact_dim, dropout: self.dropout, fused_dim: self.fused_dim }
    }

    /// Triplet weights for the configured branches, shallowest first.
    pub fn branch_weights(&self) -> Result<Vec<f64>> {
        let n = self.pyramid.scales().len();
        if self.loss_weights.len() < n {
            return Err(Error::Config(format!("{} branches need {} loss weights", n, n)));
        }
        Ok(self.loss_weights[..n].to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.msgg_config(1).validate()?;
        self.sil_config().validate()?;
        self.fusion_config().validate()?;
        self.branch_weights()?;
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::Config("batches need at least 2 identities with 2 sequences each".into()));
        }
        if self.batch_frames < self.temporal_kernel.max(3) {
            return Err(Error::Config(format!("batch_frames {} is shorter than the temporal kernel", self.batch_frames)));
        }
        if self.gallery_nm == 0 || self.gallery_nm > self.nm_walks {
            return Err(Error::Config(format!("gallery_nm must be in 1..={}", self.nm_walks)));
        }
        if self.rank_k == 0 {
            return Err(Error::Config("rank_k must be at least 1".into()));
        }
        if !(self.margin >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("margin, momentum and weight decay must be non-negative, momentum below 1".into()));
        }
        Ok(())
    }
}
