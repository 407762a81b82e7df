use bifusion::checkpoint::{Checkpoint, CheckpointKind};
use bifusion::config::RunConfig;
use bifusion::data::{Condition, Entry, Sequence};
use bifusion::extract::{EmbedMode, LoadedModel};
use bifusion::optim::MultiStep;
use bifusion::params::ParamStore;
use bifusion::rng::Rng;
use bifusion::tensor::Tensor;
use bifusion::train::{
    log_csv, pretrain_msgg, pretrain_sil, sample_batch, sample_window, train_global, Batch, BatchSpec, GlobalTrainer,
    TrainPool, LOG_HEADER,
};
use bifusion::Error;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("ids", "3"),
        ("frames", "12"),
        ("views", "0,90"),
        ("channels", "4,6,8"),
        ("temporal_kernel", "3"),
        ("sil_channels", "2,3,4"),
        ("parts", "4"),
        ("compact_dim", "5"),
        ("fused_dim", "6"),
        ("batch_p", "2"),
        ("batch_k", "2"),
        ("batch_frames", "8"),
        ("pretrain_iters", "3"),
        ("sil_iters", "3"),
        ("global_iters", "3"),
        ("pretrain_lr", "0.01"),
        ("global_lr_new", "0.01"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn dataset(cfg: &RunConfig) -> Vec<(Entry, Sequence)> {
    cfg.gen_config().generate().unwrap()
}

fn pool(cfg: &RunConfig, data: &[(Entry, Sequence)]) -> TrainPool {
    let items = data
        .iter()
        .filter(|(e, _)| e.condition == Condition::Nm && e.seq <= cfg.gallery_nm)
        .map(|(e, s)| (e.id, s.clone()))
        .collect();
    TrainPool::new(items, cfg.normalize).unwrap()
}

fn two_id_pool() -> TrainPool {
    let mut cfg = tiny();
    cfg.set("ids", "2").unwrap();
    pool(&cfg, &dataset(&cfg))
}

#[test]
fn batch_size_is_p_times_k() {
    let p = two_id_pool();
    let clips = sample_batch(&p, BatchSpec { p: 2, k: 2, frames: 30 }, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(clips.len(), 4);
    assert!(clips.iter().all(|c| c.frames.len() == 30));
    let mut labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    labels.sort();
    assert_eq!(labels, vec![0, 0, 1, 1]);
}

#[test]
fn short_sequences_wrap_with_their_period() {
    let mut rng = Rng::new(3, 0);
    for _ in 0..20 {
        let w = sample_window(10, 30, &mut rng);
        assert_eq!(w.len(), 30);
        for i in 0..20 {
            assert_eq!(w[i], w[i + 10]);
        }
        for i in 1..30 {
            assert_eq!(w[i], (w[i - 1] + 1) % 10);
        }
    }
}

#[test]
fn long_sequences_get_contiguous_windows() {
    let mut rng = Rng::new(4, 0);
    for _ in 0..50 {
        let w = sample_window(40, 30, &mut rng);
        assert!(w[0] <= 10);
        assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
    }
}

#[test]
fn sampling_is_deterministic_in_the_seed() {
    let p = two_id_pool();
    let spec = BatchSpec { p: 2, k: 2, frames: 8 };
    let a = sample_batch(&p, spec, &mut Rng::new(11, 0)).unwrap();
    let b = sample_batch(&p, spec, &mut Rng::new(11, 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn too_few_identities_is_a_sampling_error() {
    let p = two_id_pool();
    let r = sample_batch(&p, BatchSpec { p: 3, k: 2, frames: 8 }, &mut Rng::new(0, 0));
    assert!(matches!(r, Err(Error::Sampling(_))));
}

#[test]
fn k_above_class_size_samples_with_replacement() {
    let p = two_id_pool();
    let clips = sample_batch(&p, BatchSpec { p: 2, k: 9, frames: 8 }, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(clips.len(), 18);
    assert!(clips.iter().all(|c| c.seq < p.class(c.label).len()));
}

#[test]
fn learning_rate_drops_tenfold_at_milestones() {
    let s = MultiStep::new(0.1, vec![1000, 2000, 3000]);
    assert_eq!(s.lr_at(0), 0.1);
    assert_eq!(s.lr_at(999), 0.1);
    assert!((s.lr_at(1000) - 0.01).abs() < 1e-15);
    assert!((s.lr_at(3000) - 1e-4).abs() < 1e-15);
}

#[test]
fn global_training_uses_two_rate_groups() {
    let cfg = RunConfig::default();
    let t = tiny();
    let data = dataset(&t);
    let p = pool(&t, &data);
    let clips = sample_batch(&p, BatchSpec::from_config(&t), &mut Rng::new(0, 0)).unwrap();
    let batch = Batch::assemble(&p, &clips, true, true).unwrap();
    let mut tr = GlobalTrainer::new(&t, p.num_classes()).unwrap();
    let row = tr.step(&batch).unwrap();
    assert_eq!(row.lr_group0, cfg.global_lr_pretrained);
    assert_eq!(row.lr_group1, t.global_lr_new);
    assert!(row.loss_total.is_finite());
    assert!((row.loss_total - (row.loss_sil_tp + row.loss_ske_tp + row.loss_ske_ce)).abs() < 1e-9);
}

#[test]
fn log_has_documented_columns() {
    let t = tiny();
    let data = dataset(&t);
    let (_, rows) = pretrain_msgg(&pool(&t, &data), &t, |_| {}).unwrap();
    let csv = log_csv(&rows);
    assert_eq!(LOG_HEADER, "iteration,loss_total,loss_sil_tp,loss_ske_tp,loss_ske_ce,lr_group0,lr_group1");
    assert!(csv.starts_with(LOG_HEADER));
    assert_eq!(csv.lines().count(), 1 + t.pretrain_iters);
}

fn full_run(cfg: &RunConfig) -> (Checkpoint, Checkpoint, Checkpoint) {
    let data = dataset(cfg);
    let p = pool(cfg, &data);
    let (m, _) = pretrain_msgg(&p, cfg, |_| {}).unwrap();
    let (s, _) = pretrain_sil(&p, cfg, |_| {}).unwrap();
    let (g, _) = train_global(&p, cfg, &m, &s, |_| {}).unwrap();
    (m, s, g)
}

#[test]
fn identical_seeds_give_bit_identical_checkpoints() {
    let cfg = tiny();
    let a = full_run(&cfg);
    let b = full_run(&cfg);
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    assert_eq!(a.1.to_bytes(), b.1.to_bytes());
    assert_eq!(a.2.to_bytes(), b.2.to_bytes());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(full_run(&other).2.to_bytes(), a.2.to_bytes());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let (m, s, g) = full_run(&tiny());
    let dir = tempfile::tempdir().unwrap();
    for (ck, magic) in [(&m, b"MSGG"), (&s, b"SILP"), (&g, b"BFUS")] {
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], magic);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
    }
}

#[test]
fn corrupted_checkpoints_fail_to_load() {
    let (m, _, _) = full_run(&tiny());
    let bytes = m.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn shape_mismatch_is_a_load_error() {
    let (m, _, _) = full_run(&tiny());
    let mut wider = tiny();
    wider.set("channels", "4,6,10").unwrap();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0, 0);
    bifusion::msgg::Msgg::new(wider.msgg_config(3), &mut store, "msgg", &mut rng).unwrap();
    assert!(matches!(m.apply(&mut store), Err(Error::Load(_))));
}

#[test]
fn global_training_rejects_swapped_checkpoints() {
    let cfg = tiny();
    let data = dataset(&cfg);
    let p = pool(&cfg, &data);
    let (m, s, _) = full_run(&cfg);
    assert!(matches!(train_global(&p, &cfg, &s, &m, |_| {}), Err(Error::Load(_))));
    assert!(matches!(m.clone().expect_kind(CheckpointKind::Silhouette), Err(Error::Load(_))));
}

#[test]
fn extraction_shapes_and_determinism() {
    let cfg = tiny();
    let data = dataset(&cfg);
    let (m, s, g) = full_run(&cfg);
    let seq = &data[0].1;
    let full = LoadedModel::from_checkpoint(&g).unwrap();
    let (parts, v) = full.embed(EmbedMode::BiFusion, seq, 0).unwrap();
    assert_eq!((parts, v.len()), (4, 4 * 6));
    assert_eq!(full.embed(EmbedMode::BiFusion, seq, 0).unwrap().1, v);
    assert_eq!(full.embed(EmbedMode::BiFusion, &seq.clone(), 0).unwrap().1, v);
    let (parts, v) = full.embed(EmbedMode::MsggOnly, seq, 0).unwrap();
    assert_eq!((parts, v.len()), (1, 5));
    let (parts, v) = full.embed(EmbedMode::SilhouetteOnly, seq, 0).unwrap();
    assert_eq!((parts, v.len()), (4, 4 * 4));
    let msgg = LoadedModel::from_checkpoint(&m).unwrap();
    let (parts, v) = msgg.embed(EmbedMode::MsggBranches, seq, 0).unwrap();
    assert_eq!((parts, v.len()), (3, 3 * 8));
    assert!(matches!(msgg.embed(EmbedMode::BiFusion, seq, 0), Err(Error::Load(_))));
    let sil = LoadedModel::from_checkpoint(&s).unwrap();
    assert!(matches!(sil.embed(EmbedMode::MsggOnly, seq, 0), Err(Error::Load(_))));
}

#[test]
fn default_model_embeds_sixteen_parts_of_128() {
    let mut cfg = RunConfig::default();
    cfg.set("ids", "2").unwrap();
    let tr = GlobalTrainer::new(&cfg, 2).unwrap();
    let ck = tr.checkpoint(&cfg);
    let model = LoadedModel::from_checkpoint(&ck).unwrap();
    let mut gen = cfg.gen_config();
    gen.views = vec![90];
    gen.frames = 12;
    let data = gen.generate().unwrap();
    let (parts, v) = model.embed(EmbedMode::BiFusion, &data[0].1, 0).unwrap();
    assert_eq!((parts, v.len()), (16, 16 * 128));
    let (parts, v) = model.embed(EmbedMode::MsggOnly, &data[0].1, 0).unwrap();
    assert_eq!((parts, v.len()), (1, 32));
}

#[test]
fn keypoint_batches_have_model_layout() {
    let p = two_id_pool();
    let clips = sample_batch(&p, BatchSpec { p: 2, k: 2, frames: 8 }, &mut Rng::new(0, 0)).unwrap();
    let b = Batch::assemble(&p, &clips, true, true).unwrap();
    assert_eq!(b.keypoints.as_ref().map(Tensor::shape), Some(&[4usize, 8, 12, 3][..]));
    assert_eq!(b.silhouettes.as_ref().map(Tensor::shape), Some(&[4usize, 8, 64, 64][..]));
}

/// Fixed batch of 2 identities × 2 walks × 30 frames, seed 0, default
/// hyperparameters, no pretraining.
#[test]
fn single_batch_overfit() {
    let mut cfg = RunConfig::default();
    for (k, v) in [("ids", "2"), ("views", "90"), ("frames", "30"), ("batch_p", "2"), ("batch_k", "2")] {
        cfg.set(k, v).unwrap();
    }
    let data = dataset(&cfg);
    let items = data
        .iter()
        .filter(|(e, _)| e.condition == Condition::Nm && e.seq <= 2)
        .map(|(e, s)| (e.id, s.clone()))
        .collect();
    let p = TrainPool::new(items, cfg.normalize).unwrap();
    let clips = sample_batch(&p, BatchSpec::from_config(&cfg), &mut Rng::new(0, 0)).unwrap();
    let batch = Batch::assemble(&p, &clips, true, true).unwrap();
    let mut tr = GlobalTrainer::new(&cfg, 2).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        last = tr.step(&batch).unwrap().loss_total;
        if last < 0.05 {
            break;
        }
    }
    assert!(last < 0.05, "loss {last} after 500 iterations");
}
