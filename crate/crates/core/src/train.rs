//! Batch sampling and the three training stages: skeleton pretraining,
//! silhouette pretraining and global two-modality training.
//!
//! Every stage draws batches and dropout masks from generators derived from
//! the configured seed, runs single-threaded and is bit-reproducible.

use std::fmt::Write as _;

use crate::autodiff::Mode;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{RunConfig, SilLossTarget};
use crate::data::{normalize_keypoints, Condition, DatasetIndex, KeypointsMatrix, Sequence, SilhouetteSequence};
use crate::error::{Error, Result};
use crate::fusion::{BiFusion, MSGG_PREFIX, SIL_PREFIX};
use crate::loss::{global_loss, msgg_pretrain_loss, triplet};
use crate::msgg::Msgg;
use crate::optim::{MultiStep, Sgd};
use crate::params::{ParamId, ParamStore, PendingStats, Session};
use crate::rng::Rng;
use crate::silhouette::{SilhouetteEncoder, FRAME_SIZE};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 10;
const STREAM_SAMPLE: u64 = 20;
const STREAM_DROPOUT: u64 = 30;

/// Training sequences grouped by dense class label.
pub struct TrainPool {
    classes: Vec<Vec<Sequence>>,
}

impl TrainPool {
    /// `items` are `(identity, sequence)`; identities are relabeled densely
    /// in ascending order. Keypoints are normalized once here when asked.
    pub fn new(mut items: Vec<(usize, Sequence)>, normalize: bool) -> Result<Self> {
        items.sort_by_key(|(id, _)| *id);
        let mut classes: Vec<Vec<Sequence>> = Vec::new();
        let mut last = None;
        for (id, mut seq) in items {
            seq.keypoints = normalize_keypoints(&seq.keypoints, normalize)?;
            if last != Some(id) {
                classes.push(Vec::new());
                last = Some(id);
            }
            classes.last_mut().unwrap().push(seq);
        }
        Ok(Self { classes })
    }

    /// Normal walks `1..=cfg.gallery_nm` of every identity in `index`.
    pub fn from_index(index: &DatasetIndex, cfg: &RunConfig) -> Result<Self> {
        let entries: Vec<_> = index
            .entries
            .iter()
            .filter(|e| e.condition == Condition::Nm && e.seq <= cfg.gallery_nm)
            .copied()
            .collect();
        let seqs = index.read_all(&entries)?;
        Self::new(entries.iter().map(|e| e.id).zip(seqs).collect(), cfg.normalize)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &[Sequence] {
        &self.classes[c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub frames: usize,
}

impl BatchSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { p: cfg.batch_p, k: cfg.batch_k, frames: cfg.batch_frames }
    }
}

/// One sampled clip: class, sequence within the class, frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRef {
    pub label: usize,
    pub seq: usize,
    pub frames: Vec<usize>,
}

/// `frames` contiguous indices starting at a random offset, wrapping around
/// sequences shorter than the window.
pub fn sample_window(len: usize, frames: usize, rng: &mut Rng) -> Vec<usize> {
    let start = if len >= frames { rng.below(len - frames + 1) } else { rng.below(len) };
    (0..frames).map(|i| (start + i) % len).collect()
}

/// `P` classes without replacement, `K` sequences each (without replacement
/// when the class has at least `K`), one random window per sequence.
pub fn sample_batch(pool: &TrainPool, spec: BatchSpec, rng: &mut Rng) -> Result<Vec<ClipRef>> {
    if pool.num_classes() < spec.p {
        return Err(Error::Sampling(format!("{} identities available, batch needs {}", pool.num_classes(), spec.p)));
    }
    if spec.p == 0 || spec.k == 0 || spec.frames == 0 {
        return Err(Error::Sampling("batch dimensions must be positive".into()));
    }
    let mut classes: Vec<usize> = (0..pool.num_classes()).collect();
    rng.shuffle(&mut classes);
    let mut clips = Vec::with_capacity(spec.p * spec.k);
    for &c in &classes[..spec.p] {
        let n = pool.class(c).len();
        if n == 0 {
            return Err(Error::Sampling(format!("identity {c} has no sequences")));
        }
        let picks: Vec<usize> = if n >= spec.k {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(spec.k);
            all
        } else {
            (0..spec.k).map(|_| rng.below(n)).collect()
        };
        for s in picks {
            let len = pool.class(c)[s].keypoints.frames();
            clips.push(ClipRef { label: c, seq: s, frames: sample_window(len, spec.frames, rng) });
        }
    }
    Ok(clips)
}

/// Model inputs for a list of clips.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labels: Vec<usize>,
    /// `[B×T×12×3]`.
    pub keypoints: Option<Tensor>,
    /// `[B×T×64×64]`.
    pub silhouettes: Option<Tensor>,
}

pub fn keypoint_tensor(clips: &[KeypointsMatrix]) -> Result<Tensor> {
    let t = clips.first().map(|c| c.frames()).unwrap_or(0);
    if clips.iter().any(|c| c.frames() != t) {
        return Err(Error::Dimension("clips in a batch must share their length".into()));
    }
    let data = clips.iter().flat_map(|c| c.data().iter().map(|&v| v as f64)).collect();
    Tensor::new(&[clips.len(), t, 12, 3], data)
}

pub fn silhouette_tensor(clips: &[SilhouetteSequence]) -> Result<Tensor> {
    let t = clips.first().map(|c| c.frames()).unwrap_or(0);
    if clips.iter().any(|c| c.frames() != t) {
        return Err(Error::Dimension("clips in a batch must share their length".into()));
    }
    let data = clips.iter().flat_map(|c| c.data().iter().map(|&v| v as f64)).collect();
    Tensor::new(&[clips.len(), t, FRAME_SIZE, FRAME_SIZE], data)
}

impl Batch {
    pub fn assemble(pool: &TrainPool, clips: &[ClipRef], keypoints: bool, silhouettes: bool) -> Result<Self> {
        let seqs: Vec<&Sequence> = clips.iter().map(|c| &pool.class(c.label)[c.seq]).collect();
        let kp = if keypoints {
            let cl: Vec<KeypointsMatrix> = seqs.iter().zip(clips).map(|(s, c)| s.keypoints.select(&c.frames)).collect();
            Some(keypoint_tensor(&cl)?)
        } else {
            None
        };
        let sil = if silhouettes {
            let cl: Vec<SilhouetteSequence> =
                seqs.iter().zip(clips).map(|(s, c)| s.silhouettes.select(&c.frames)).collect();
            Some(silhouette_tensor(&cl)?)
        } else {
            None
        };
        Ok(Self { labels: clips.iter().map(|c| c.label).collect(), keypoints: kp, silhouettes: sil })
    }

    fn kp(&self) -> Result<Tensor> {
        self.keypoints.clone().ok_or_else(|| Error::Contract("batch carries no keypoints".into()))
    }

    fn sil(&self) -> Result<Tensor> {
        self.silhouettes.clone().ok_or_else(|| Error::Contract("batch carries no silhouettes".into()))
    }
}

/// One iteration of telemetry. Pretraining stages leave unused terms at 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_sil_tp: f64,
    pub loss_ske_tp: f64,
    pub loss_ske_ce: f64,
    pub lr_group0: f64,
    pub lr_group1: f64,
}

pub const LOG_HEADER: &str = "iteration,loss_total,loss_sil_tp,loss_ske_tp,loss_ske_ce,lr_group0,lr_group1";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration, r.loss_total, r.loss_sil_tp, r.loss_ske_tp, r.loss_ske_ce, r.lr_group0, r.lr_group1
        )
        .unwrap();
    }
    s
}

/// Checkpoint config text: the run config preceded by the class count.
pub fn model_config_text(cfg: &RunConfig, classes: usize) -> String {
    format!("classes = {classes}\n{}", cfg.to_text())
}

/// Inverse of [`model_config_text`].
pub fn parse_model_config(text: &str) -> Result<(RunConfig, usize)> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let classes = first
        .strip_prefix("classes = ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Load("checkpoint config lacks a class count".into()))?;
    Ok((RunConfig::from_text(rest).map_err(|e| Error::Load(e.to_string()))?, classes))
}

fn apply_step(store: &mut ParamStore, sgd: &mut Sgd, grads: &[(ParamId, Tensor)], stats: PendingStats, lr: impl Fn(ParamId) -> f64) {
    stats.apply(store);
    sgd.step(store, grads, lr);
}

/// Skeleton network trained with weighted branch triplets plus cross-entropy.
pub struct MsggTrainer {
    pub model: Msgg,
    pub store: ParamStore,
    sgd: Sgd,
    schedule: MultiStep,
    weights: Vec<f64>,
    margin: f64,
    dropout: Rng,
    pub iteration: usize,
}

impl MsggTrainer {
    pub fn new(cfg: &RunConfig, classes: usize) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let model = Msgg::new(cfg.msgg_config(classes), &mut store, MSGG_PREFIX, &mut rng)?;
        Ok(Self {
            model,
            store,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            schedule: MultiStep::new(cfg.pretrain_lr, cfg.pretrain_milestones.clone()),
            weights: cfg.branch_weights()?,
            margin: cfg.margin,
            dropout: Rng::new(cfg.seed, STREAM_DROPOUT),
            iteration: 0,
        })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LogRow> {
        let lr = self.schedule.lr_at(self.iteration);
        let rng = self.dropout.fork(0);
        let mut s = Session::train(&self.store, Mode::Train, rng);
        let x = s.input(batch.kp()?);
        let out = self.model.forward(&mut s, x)?;
        let loss = msgg_pretrain_loss(&mut s.tape, &out.embeddings, &self.weights, out.logits, &batch.labels, self.margin)?;
        let tp: f64 = loss.triplets.iter().zip(&self.weights).map(|(&t, w)| w * s.value(t).item()).sum();
        let row = LogRow {
            iteration: self.iteration,
            loss_total: s.value(loss.total).item(),
            loss_sil_tp: 0.0,
            loss_ske_tp: tp,
            loss_ske_ce: s.value(loss.ce).item(),
            lr_group0: lr,
            lr_group1: lr,
        };
        let grads = s.backward(loss.total)?;
        let stats = s.into_stat_updates();
        apply_step(&mut self.store, &mut self.sgd, &grads, stats, |_| lr);
        self.iteration += 1;
        Ok(row)
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let text = model_config_text(cfg, self.model.config.num_classes);
        Checkpoint::from_store(CheckpointKind::Msgg, &text, &self.store, &[&format!("{MSGG_PREFIX}.")])
    }
}

/// Silhouette encoder trained with the part-averaged triplet loss.
pub struct SilTrainer {
    pub model: SilhouetteEncoder,
    pub store: ParamStore,
    sgd: Sgd,
    schedule: MultiStep,
    margin: f64,
    pub iteration: usize,
}

impl SilTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed, STREAM_INIT + 1);
        let mut store = ParamStore::new();
        let model = SilhouetteEncoder::new(cfg.sil_config(), &mut store, SIL_PREFIX, &mut rng)?;
        Ok(Self {
            model,
            store,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            schedule: MultiStep::new(cfg.sil_lr, cfg.sil_milestones.clone()),
            margin: cfg.margin,
            iteration: 0,
        })
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LogRow> {
        let lr = self.schedule.lr_at(self.iteration);
        let mut s = Session::train(&self.store, Mode::Train, Rng::new(0, 0));
        let x = s.input(batch.sil()?);
        let parts = self.model.forward(&mut s, x)?;
        let loss = triplet(&mut s.tape, parts, &batch.labels, self.margin)?;
        let value = s.value(loss).item();
        let row = LogRow {
            iteration: self.iteration,
            loss_total: value,
            loss_sil_tp: value,
            loss_ske_tp: 0.0,
            loss_ske_ce: 0.0,
            lr_group0: lr,
            lr_group1: lr,
        };
        let grads = s.backward(loss)?;
        let stats = s.into_stat_updates();
        apply_step(&mut self.store, &mut self.sgd, &grads, stats, |_| lr);
        self.iteration += 1;
        Ok(row)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, classes: usize) -> Checkpoint {
        let text = model_config_text(cfg, classes);
        Checkpoint::from_store(CheckpointKind::Silhouette, &text, &self.store, &[&format!("{SIL_PREFIX}.")])
    }
}

/// Full model with two learning-rate groups.
pub struct GlobalTrainer {
    pub model: BiFusion,
    pub store: ParamStore,
    sgd: Sgd,
    groups: Vec<usize>,
    schedules: [MultiStep; 2],
    margin: f64,
    sil_loss_on: SilLossTarget,
    dropout: Rng,
    pub iteration: usize,
}

impl GlobalTrainer {
    /// Freshly initialized model; see [`GlobalTrainer::load_pretrained`].
    pub fn new(cfg: &RunConfig, classes: usize) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed, STREAM_INIT + 2);
        let mut store = ParamStore::new();
        let model =
            BiFusion::new(cfg.msgg_config(classes), cfg.sil_config(), cfg.fusion_config(), &mut store, &mut rng)?;
        let groups = store.ids().map(|id| model.group_of(&store, id)).collect();
        Ok(Self {
            model,
            store,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            groups,
            schedules: [
                MultiStep::new(cfg.global_lr_pretrained, cfg.global_milestones.clone()),
                MultiStep::new(cfg.global_lr_new, cfg.global_milestones.clone()),
            ],
            margin: cfg.margin,
            sil_loss_on: cfg.sil_loss_on,
            dropout: Rng::new(cfg.seed, STREAM_DROPOUT + 1),
            iteration: 0,
        })
    }

    pub fn load_pretrained(&mut self, msgg: &Checkpoint, sil: &Checkpoint) -> Result<()> {
        if msgg.kind != CheckpointKind::Msgg || sil.kind != CheckpointKind::Silhouette {
            return Err(Error::Load("global training needs a skeleton and a silhouette checkpoint".into()));
        }
        msgg.apply(&mut self.store)?;
        sil.apply(&mut self.store)?;
        Ok(())
    }

    pub fn step(&mut self, batch: &Batch) -> Result<LogRow> {
        let lrs = [self.schedules[0].lr_at(self.iteration), self.schedules[1].lr_at(self.iteration)];
        let rng = self.dropout.fork(0);
        let mut s = Session::train(&self.store, Mode::Train, rng);
        let kp = s.input(batch.kp()?);
        let sil = s.input(batch.sil()?);
        let out = self.model.forward(&mut s, kp, sil)?;
        let feats = match self.sil_loss_on {
            SilLossTarget::Fused => out.fused,
            SilLossTarget::Raw => out.parts,
        };
        let e_body = *out.msgg.embeddings.last().expect("branch embedding");
        let loss = global_loss(&mut s.tape, feats, e_body, out.msgg.logits, &batch.labels, self.margin)?;
        let row = LogRow {
            iteration: self.iteration,
            loss_total: s.value(loss.total).item(),
            loss_sil_tp: s.value(loss.sil_tp).item(),
            loss_ske_tp: s.value(loss.ske_tp).item(),
            loss_ske_ce: s.value(loss.ske_ce).item(),
            lr_group0: lrs[0],
            lr_group1: lrs[1],
        };
        let grads = s.backward(loss.total)?;
        let stats = s.into_stat_updates();
        let groups = &self.groups;
        apply_step(&mut self.store, &mut self.sgd, &grads, stats, |id| lrs[groups[id.index()]]);
        self.iteration += 1;
        Ok(row)
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let text = model_config_text(cfg, self.model.msgg.config.num_classes);
        Checkpoint::from_store(CheckpointKind::BiFusion, &text, &self.store, &[""])
    }
}

/// Runs `iters` sampled steps; `step` consumes each batch.
pub fn run_stage(
    pool: &TrainPool,
    spec: BatchSpec,
    iters: usize,
    sampler: &mut Rng,
    keypoints: bool,
    silhouettes: bool,
    mut step: impl FnMut(&Batch) -> Result<LogRow>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    let mut rows = Vec::with_capacity(iters);
    for _ in 0..iters {
        let clips = sample_batch(pool, spec, sampler)?;
        let batch = Batch::assemble(pool, &clips, keypoints, silhouettes)?;
        let row = step(&batch)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn sampler(cfg: &RunConfig, stage: u64) -> Rng {
    Rng::new(cfg.seed, STREAM_SAMPLE + stage)
}

pub fn pretrain_msgg(pool: &TrainPool, cfg: &RunConfig, on_row: impl FnMut(&LogRow)) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut t = MsggTrainer::new(cfg, pool.num_classes())?;
    let mut rng = sampler(cfg, 0);
    let rows = run_stage(pool, BatchSpec::from_config(cfg), cfg.pretrain_iters, &mut rng, true, false, |b| t.step(b), on_row)?;
    Ok((t.checkpoint(cfg), rows))
}

pub fn pretrain_sil(pool: &TrainPool, cfg: &RunConfig, on_row: impl FnMut(&LogRow)) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut t = SilTrainer::new(cfg)?;
    let mut rng = sampler(cfg, 1);
    let rows = run_stage(pool, BatchSpec::from_config(cfg), cfg.sil_iters, &mut rng, false, true, |b| t.step(b), on_row)?;
    Ok((t.checkpoint(cfg, pool.num_classes()), rows))
}

pub fn train_global(
    pool: &TrainPool,
    cfg: &RunConfig,
    msgg: &Checkpoint,
    sil: &Checkpoint,
    on_row: impl FnMut(&LogRow),
) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut t = GlobalTrainer::new(cfg, pool.num_classes())?;
    t.load_pretrained(msgg, sil)?;
    let mut rng = sampler(cfg, 2);
    let rows = run_stage(pool, BatchSpec::from_config(cfg), cfg.global_iters, &mut rng, true, true, |b| t.step(b), on_row)?;
    Ok((t.checkpoint(cfg), rows))
}
