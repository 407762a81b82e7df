use bifusion::autodiff::Mode;
use bifusion::fusion::{identity_fusion_weights, param_group, BiFusion, CompactBlock, FusionConfig, FusionHead};
use bifusion::loss::{global_loss, msgg_pretrain_loss, triplet, weighted_sum, DEFAULT_MARGIN};
use bifusion::msgg::{MsggConfig, Pyramid};
use bifusion::params::{ParamStore, Session};
use bifusion::rng::Rng;
use bifusion::silhouette::SilConfig;
use bifusion::tensor::Tensor;
use bifusion::Error;
use proptest::prelude::*;

fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed, 3);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn small_msgg(classes: usize) -> MsggConfig {
    MsggConfig { channels: [4, 6, 8], temporal_kernel: 3, blocks: 6, num_classes: classes, ..MsggConfig::default() }
}

fn small_sil() -> SilConfig {
    SilConfig { channels: [2, 3, 4], parts: 4, window: 3 }
}

#[test]
fn default_fusion_dimensions() {
    let f = FusionConfig::default();
    assert_eq!((f.compact_dim, f.dropout, f.fused_dim), (32, 0.3, 128));
}

#[test]
fn compact_block_eval_is_linear_of_batchnorm() {
    let mut store = ParamStore::new();
    let cb = CompactBlock::new(&mut store, "c", 5, 32, 0.3, &mut Rng::new(1, 0));
    let e = normal(&[3, 5], 2);
    let mut s = Session::inference(&store);
    let x = s.input(e.clone());
    let y = cb.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).shape(), &[3, 32]);
    // running mean 0, var 1, γ 1, β 0: batch norm is x / sqrt(1 + eps)
    let w = store.get(cb.fc.w);
    let b = store.get(cb.fc.b);
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for r in 0..3 {
        for o in 0..32 {
            let want: f64 = (0..5).map(|i| e.data()[r * 5 + i] * scale * w.data()[i * 32 + o]).sum::<f64>() + b.data()[o];
            assert!((s.value(y).data()[r * 32 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn compact_block_zero_weights_give_zero() {
    let mut store = ParamStore::new();
    let cb = CompactBlock::new(&mut store, "c", 5, 32, 0.3, &mut Rng::new(1, 0));
    store.set(cb.fc.w, Tensor::zeros(&[5, 32])).unwrap();
    store.set(cb.fc.b, Tensor::zeros(&[32])).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = Session::train(&store, mode, Rng::new(4, 0));
        let x = s.input(normal(&[4, 5], 9));
        let y = cb.forward(&mut s, x).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identity_projection_passes_parts_through() {
    let (n, ds, dk) = (3, 4, 2);
    let mut store = ParamStore::new();
    let head = FusionHead::new(&mut store, "f", n, ds + dk, ds, &mut Rng::new(0, 0));
    store.set(head.w, identity_fusion_weights(n, ds + dk, ds)).unwrap();
    store.set(head.b, Tensor::zeros(&[n, ds])).unwrap();
    let parts = normal(&[2, n, ds], 5);
    let mut s = Session::inference(&store);
    let p = s.input(parts.clone());
    let k = s.input(normal(&[2, dk], 6));
    let y = head.forward(&mut s, p, k).unwrap();
    assert_eq!(s.value(y).data(), parts.data());
}

#[test]
fn compact_features_reach_every_part() {
    let (n, ds, dk) = (4, 3, 2);
    let mut store = ParamStore::new();
    let head = FusionHead::new(&mut store, "f", n, ds + dk, 5, &mut Rng::new(0, 0));
    let parts = normal(&[1, n, ds], 5);
    let run = |k: Tensor| {
        let mut s = Session::inference(&store);
        let p = s.input(parts.clone());
        let k = s.input(k);
        let y = head.forward(&mut s, p, k).unwrap();
        s.value(y).clone()
    };
    let a = run(normal(&[1, dk], 6));
    let b = run(Tensor::zeros(&[1, dk]));
    for part in 0..n {
        let d: f64 = (0..5).map(|o| (a.data()[part * 5 + o] - b.data()[part * 5 + o]).abs()).sum();
        assert!(d > 0.0, "part {part} ignores the compact features");
    }
}

#[test]
fn fusion_rejects_part_count_mismatch() {
    let mut store = ParamStore::new();
    let head = FusionHead::new(&mut store, "f", 4, 5, 5, &mut Rng::new(0, 0));
    let mut s = Session::inference(&store);
    let p = s.input(Tensor::zeros(&[1, 3, 3]));
    let k = s.input(Tensor::zeros(&[1, 2]));
    assert!(matches!(head.forward(&mut s, p, k), Err(Error::Dimension(_))));
}

#[test]
fn assembled_model_output_shapes() {
    let mut store = ParamStore::new();
    let sil = SilConfig { channels: [2, 3, 4], parts: 16, window: 3 };
    let m = BiFusion::new(small_msgg(3), sil, FusionConfig::default(), &mut store, &mut Rng::new(0, 0)).unwrap();
    let mut s = Session::inference(&store);
    let kp = s.input(normal(&[2, 6, 12, 3], 1));
    let x = s.input(Tensor::zeros(&[2, 4, 64, 64]));
    let out = m.forward(&mut s, kp, x).unwrap();
    assert_eq!(s.value(out.fused).shape(), &[2, 16, 128]);
    assert_eq!(s.value(out.compact).shape(), &[2, 32]);
    assert_eq!(s.value(out.msgg.logits).shape(), &[2, 3]);
}

#[test]
fn parameter_groups_split_backbones_from_new_layers() {
    let mut store = ParamStore::new();
    let m = BiFusion::new(small_msgg(2), small_sil(), FusionConfig::default(), &mut store, &mut Rng::new(0, 0)).unwrap();
    let head = m.msgg.head_prefix();
    let mut seen = [0, 0];
    for id in store.ids() {
        let name = store.entry(id).name.clone();
        let g = m.group_of(&store, id);
        seen[g] += 1;
        let backbone = (name.starts_with("msgg.") && !name.starts_with(&head)) || name.starts_with("sil.");
        assert_eq!(g == 0, backbone, "{name}");
    }
    assert!(seen[0] > 0 && seen[1] > 0);
    assert_eq!(param_group("fusion.w", &head), 1);
    assert_eq!(param_group("compact.fc.w", &head), 1);
}

fn triplet_value(points: &[f64], labels: &[usize], margin: f64) -> f64 {
    let mut t = bifusion::autodiff::Tape::new();
    let x = t.constant(Tensor::new(&[labels.len(), 1], points.to_vec()).unwrap());
    let l = triplet(&mut t, x, labels, margin).unwrap();
    t.value(l).item()
}

fn triplet_from_distances(d: &[f64], labels: &[usize], margin: f64) -> f64 {
    let b = labels.len();
    let mut t = bifusion::autodiff::Tape::new();
    let dist = t.constant(Tensor::new(&[1, b, b], d.to_vec()).unwrap());
    let l = t.batch_all_triplet(dist, labels, margin).unwrap();
    t.value(l).item()
}

fn dist4(d01: f64, d02: f64, d23: f64) -> Vec<f64> {
    let mut d = vec![1.0; 16];
    for i in 0..4 {
        d[i * 5] = 0.0;
    }
    for (i, j, v) in [(0, 1, d01), (0, 2, d02), (2, 3, d23)] {
        d[i * 4 + j] = v;
        d[j * 4 + i] = v;
    }
    d
}

#[test]
fn triplet_margin_examples() {
    let labels = [0, 0, 1, 1];
    // d_ap 0.1, d_an 0.5 for (a=0, p=1, n=2); every other triple is also satisfied
    assert_eq!(triplet_from_distances(&dist4(0.1, 0.5, 0.1), &labels, 0.2), 0.0);
    // d_ap 0.5, d_an 0.1 scores 0.6; the mirrored (a=2, p=3, n=0) scores 0.1 − 0.1 + 0.2
    let v = triplet_from_distances(&dist4(0.5, 0.1, 0.1), &labels, 0.2);
    assert!((v - (0.6 + 0.2) / 2.0).abs() < 1e-12, "{v}");
}

#[test]
fn well_separated_batch_has_zero_loss() {
    assert_eq!(triplet_value(&[0.0, 0.05, 5.0, 5.05], &[0, 0, 1, 1], DEFAULT_MARGIN), 0.0);
}

#[test]
fn pretrain_loss_weights_components() {
    let mut t = bifusion::autodiff::Tape::new();
    let terms: Vec<_> = [0.1, 0.2, 0.3, 0.4].iter().map(|&v| t.constant(Tensor::scalar(v))).collect();
    let total = weighted_sum(&mut t, &[(3.0, terms[0]), (2.0, terms[1]), (1.0, terms[2]), (1.0, terms[3])]).unwrap();
    assert!((t.value(total).item() - 1.4).abs() < 1e-12);
}

#[test]
fn pretrain_loss_is_ce_when_triplets_vanish() {
    let mut t = bifusion::autodiff::Tape::new();
    let e = t.constant(Tensor::new(&[4, 1], vec![0.0, 0.01, 9.0, 9.01]).unwrap());
    let logits = t.constant(Tensor::new(&[4, 2], vec![1.0, 0.0, 2.0, -1.0, 0.0, 0.5, 0.3, 0.2]).unwrap());
    let labels = [0, 0, 1, 1];
    let l = msgg_pretrain_loss(&mut t, &[e, e, e], &[3.0, 2.0, 1.0], logits, &labels, DEFAULT_MARGIN).unwrap();
    let ce = t.value(l.ce).item();
    assert!(ce > 0.0);
    assert_eq!(t.value(l.total).item(), ce);
}

#[test]
fn global_loss_sums_components() {
    let mut t = bifusion::autodiff::Tape::new();
    let labels = [0, 0, 1, 1];
    let fused = t.constant(Tensor::new(&[4, 2, 1], vec![0.0, 0.0, 0.5, 0.5, 0.1, 0.1, 0.6, 0.6]).unwrap());
    let body = t.constant(Tensor::new(&[4, 1], vec![0.0, 0.3, 0.2, 0.4]).unwrap());
    let logits = t.constant(normal(&[4, 2], 3));
    let g = global_loss(&mut t, fused, body, logits, &labels, DEFAULT_MARGIN).unwrap();
    let parts: f64 = [g.sil_tp, g.ske_tp, g.ske_ce].iter().map(|&v| t.value(v).item()).sum();
    assert!((t.value(g.total).item() - parts).abs() < 1e-12);
    assert!(t.value(g.total).item() > 0.0);
}

#[test]
fn detached_fused_features_leave_fusion_without_gradient() {
    let mut store = ParamStore::new();
    let m = BiFusion::new(small_msgg(2), small_sil(), FusionConfig::default(), &mut store, &mut Rng::new(0, 0)).unwrap();
    let mut s = Session::train(&store, Mode::Train, Rng::new(0, 0));
    let kp = s.input(normal(&[4, 5, 12, 3], 1));
    let x = s.input(normal(&[4, 3, 64, 64], 2).map(|v| (v > 0.0) as u8 as f64));
    let out = m.forward(&mut s, kp, x).unwrap();
    let detached = s.input(s.value(out.fused).clone());
    let e_body = *out.msgg.embeddings.last().unwrap();
    let g = global_loss(&mut s.tape, detached, e_body, out.msgg.logits, &[0, 0, 1, 1], DEFAULT_MARGIN).unwrap();
    let grads = s.backward(g.total).unwrap();
    for (id, grad) in grads {
        if store.entry(id).name.starts_with("fusion.") {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_is_permutation_and_translation_invariant(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let x = normal(&[6, 3], seed);
        let labels = [0, 1, 2, 0, 1, 2];
        let base = {
            let mut t = bifusion::autodiff::Tape::new();
            let v = t.constant(x.clone());
            let l = triplet(&mut t, v, &labels, DEFAULT_MARGIN).unwrap();
            t.value(l).item()
        };
        let order = [3, 5, 0, 4, 2, 1];
        let mut perm = Vec::new();
        for &i in &order {
            perm.extend(x.data()[i * 3..i * 3 + 3].iter().map(|v| v + shift));
        }
        let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let mut t = bifusion::autodiff::Tape::new();
        let v = t.constant(Tensor::new(&[6, 3], perm).unwrap());
        let l = triplet(&mut t, v, &plabels, DEFAULT_MARGIN).unwrap();
        prop_assert!((t.value(l).item() - base).abs() < 1e-9);
    }

    #[test]
    fn zero_margin_zero_set_is_scale_invariant(seed in 0u64..10_000, c in 0.1f64..10.0) {
        let x = normal(&[6, 2], seed);
        let labels = [0, 0, 1, 1, 2, 2];
        let zero = |data: Vec<f64>| {
            let mut t = bifusion::autodiff::Tape::new();
            let v = t.constant(Tensor::new(&[6, 2], data).unwrap());
            let l = triplet(&mut t, v, &labels, 0.0).unwrap();
            t.value(l).item() == 0.0
        };
        let scaled: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        prop_assert_eq!(zero(x.data().to_vec()), zero(scaled));
    }

    #[test]
    fn global_loss_is_nonnegative(seed in 0u64..10_000) {
        let mut t = bifusion::autodiff::Tape::new();
        let fused = t.constant(normal(&[4, 3, 2], seed));
        let body = t.constant(normal(&[4, 5], seed + 1));
        let logits = t.constant(normal(&[4, 3], seed + 2));
        let g = global_loss(&mut t, fused, body, logits, &[0, 1, 0, 1], DEFAULT_MARGIN).unwrap();
        prop_assert!(t.value(g.total).item() >= 0.0);
    }
}

#[test]
fn pyramid_variants_build() {
    for p in Pyramid::ALL {
        let mut store = ParamStore::new();
        let cfg = MsggConfig { pyramid: p, ..small_msgg(2) };
        assert!(BiFusion::new(cfg, small_sil(), FusionConfig::default(), &mut store, &mut Rng::new(0, 0)).is_ok());
    }
}
