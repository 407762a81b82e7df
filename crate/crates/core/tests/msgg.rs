use bifusion::autodiff::{Mode, Tape};
use bifusion::graph::{SelfLoop, Strategy};
use bifusion::msgg::*;
use bifusion::params::{ParamKind, ParamStore, Session};
use bifusion::{Error, Rng, Tensor};

fn random_kp(b: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed, 9);
    let data = (0..b * t * 12 * 3).map(|_| rng.normal()).collect();
    Tensor::new(&[b, t, 12, 3], data).unwrap()
}

fn build(config: MsggConfig, seed: u64) -> (Msgg, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed, 0);
    let m = Msgg::new(config, &mut store, "msgg", &mut rng).unwrap();
    (m, store)
}

fn embed(m: &Msgg, store: &ParamStore, kp: &Tensor) -> Vec<Tensor> {
    let mut s = Session::inference(store);
    let x = s.input(kp.clone());
    let out = m.forward(&mut s, x).unwrap();
    let mut v: Vec<Tensor> = out.embeddings.iter().map(|&e| s.value(e).clone()).collect();
    v.push(s.value(out.logits).clone());
    v
}

#[test]
fn spatial_aggregate_two_node_edge() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[&[1.0], &[3.0]]));
    let base = t.constant(Tensor::ones(&[2, 2]));
    let w = t.constant(Tensor::matrix(&[&[1.0]]));
    let we = t.constant(Tensor::ones(&[2, 2]));
    let y = spatial_aggregate(&mut t, x, &[base], &[w], &[we]).unwrap();
    for v in t.value(y).data() {
        assert!((v - 2.0).abs() < 1e-5);
    }
}

#[test]
fn spatial_aggregate_isolated_nodes_and_zero_weights() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[&[1.0, -2.0], &[3.0, 0.5], &[4.0, 4.0]]));
    let base = t.constant(Tensor::eye(3));
    let w = t.constant(Tensor::eye(2));
    let we = t.constant(Tensor::ones(&[3, 3]));
    let y = spatial_aggregate(&mut t, x, &[base], &[w], &[we]).unwrap();
    assert!(t.value(y).max_abs_diff(t.value(x)) < 1e-5);

    let wz = t.constant(Tensor::zeros(&[2, 2]));
    let y = spatial_aggregate(&mut t, x, &[base], &[wz], &[we]).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let base4 = t.constant(Tensor::eye(4));
    let we4 = t.constant(Tensor::ones(&[4, 4]));
    assert!(matches!(spatial_aggregate(&mut t, x, &[base4], &[w], &[we4]), Err(Error::Dimension(_))));
}

#[test]
fn edge_importance_zero_cuts_contribution() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(&[&[1.0], &[3.0]]));
    let base = t.constant(Tensor::ones(&[2, 2]));
    let w = t.constant(Tensor::matrix(&[&[1.0]]));
    let we = t.constant(Tensor::matrix(&[&[1.0, 0.0], &[1.0, 1.0]]));
    let y = spatial_aggregate(&mut t, x, &[base], &[w], &[we]).unwrap();
    // node 0 now only sees itself
    assert!((t.value(y).data()[0] - 1.0).abs() < 1e-5);
}

#[test]
fn temporal_aggregate_examples() {
    let mut t = Tape::new();
    // [T=3, N=2, C=1]: node 0 series 1,2,3; node 1 series 5,5,5
    let x = t.constant(Tensor::new(&[3, 2, 1], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap());
    let id = t.constant(Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
    let y = temporal_aggregate(&mut t, x, id).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let w = t.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap());
    let y = temporal_aggregate(&mut t, x, w).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 5.0, 6.0, 5.0, 5.0, 5.0]);

    let w0 = t.constant(Tensor::new(&[3, 2], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let y0 = temporal_aggregate(&mut t, x, w0).unwrap();
    let yv = t.value(y0).data();
    assert_eq!([yv[1], yv[3], yv[5]], [5.0, 5.0, 5.0]);
    assert_eq!([yv[0], yv[2], yv[4]], [0.0, 0.0, 0.0]);
}

#[test]
fn semantic_pool_examples() {
    let mut t = Tape::new();
    let pool = t.constant(Tensor::matrix(&[&[0.5, 0.5]]));
    let lower = t.constant(Tensor::matrix(&[&[2.0], &[4.0]]));
    let cur = t.constant(Tensor::matrix(&[&[1.0]]));
    let y = semantic_pool(&mut t, lower, cur, pool).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);

    let zero = t.constant(Tensor::zeros(&[2, 1]));
    let y = semantic_pool(&mut t, zero, cur, pool).unwrap();
    assert_eq!(t.value(y).data(), &[1.0]);

    let eq = t.constant(Tensor::matrix(&[&[7.0], &[7.0]]));
    let y = semantic_pool(&mut t, eq, cur, pool).unwrap();
    assert_eq!(t.value(y).data(), &[8.0]);

    let wide = t.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(semantic_pool(&mut t, wide, cur, pool), Err(Error::Dimension(_))));
}

#[test]
fn default_embeddings_have_c3_length() {
    let (m, store) = build(MsggConfig { num_classes: 5, ..Default::default() }, 1);
    let out = embed(&m, &store, &random_kp(1, 12, 3));
    assert_eq!(out.len(), 4);
    for e in &out[..3] {
        assert_eq!(e.shape(), &[1, 64]);
        assert!(e.all_finite());
    }
    assert_eq!(out[3].shape(), &[1, 5]);
}

#[test]
fn block_one_has_c1_channels_everywhere() {
    let (m, store) = build(MsggConfig { blocks: 1, ..Default::default() }, 1);
    let out = embed(&m, &store, &random_kp(2, 10, 4));
    for e in &out[..3] {
        assert_eq!(e.shape(), &[2, 16]);
    }
}

#[test]
fn shape_contract_over_configs() {
    for channels in [[16, 32, 64], [4, 8, 16], [8, 8, 8]] {
        for gamma in [3, 9] {
            for strategy in Strategy::ALL {
                for pyramid in Pyramid::ALL {
                    let cfg = MsggConfig { channels, temporal_kernel: gamma, strategy, pyramid, ..Default::default() };
                    let (m, store) = build(cfg, 2);
                    let out = embed(&m, &store, &random_kp(1, 9, 5));
                    assert_eq!(out.len(), pyramid.scales().len() + 1);
                    for e in &out[..out.len() - 1] {
                        assert_eq!(e.shape(), &[1, channels[2]]);
                        assert!(e.all_finite());
                    }
                }
            }
        }
    }
}

#[test]
fn short_sequences_are_rejected() {
    let (m, store) = build(MsggConfig::default(), 1);
    let mut s = Session::inference(&store);
    let x = s.input(random_kp(1, 8, 1));
    assert!(matches!(m.forward(&mut s, x), Err(Error::InputLength(_))));
}

#[test]
fn eval_forward_is_deterministic() {
    let (m, store) = build(MsggConfig::default(), 3);
    let kp = random_kp(1, 20, 8);
    let a = embed(&m, &store, &kp);
    let b = embed(&m, &store, &kp);
    assert_eq!(a, b);
}

#[test]
fn frame_order_matters() {
    let (m, mut store) = build(MsggConfig::default(), 3);
    // give the temporal kernels some asymmetry so order is visible
    let mut rng = Rng::new(77, 0);
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).name.ends_with(".temporal")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let t = 20;
    let kp = random_kp(1, t, 8);
    let mut rev = vec![0.0; kp.len()];
    let frame = 12 * 3;
    for f in 0..t {
        rev[f * frame..(f + 1) * frame].copy_from_slice(&kp.data()[(t - 1 - f) * frame..(t - f) * frame]);
    }
    let a = embed(&m, &store, &kp);
    let b = embed(&m, &store, &Tensor::new(&[1, t, 12, 3], rev).unwrap());
    assert!(a[0].max_abs_diff(&b[0]) > 1e-9);
}

#[test]
fn without_semp_branches_are_independent() {
    let cfg = MsggConfig { semp: false, ..Default::default() };
    let (m, store) = build(cfg, 4);
    let kp = random_kp(1, 12, 6);
    let run = |zero_joints: bool| {
        let mut s = Session::inference(&store);
        let x = s.input(kp.clone());
        let mut inputs = m.branch_inputs(&mut s, x).unwrap();
        if zero_joints {
            inputs[0] = s.input(Tensor::zeros(&[1, 12, 12, 3]));
        }
        let out = m.forward_branches(&mut s, &inputs).unwrap();
        (s.value(out.embeddings[0]).clone(), s.value(out.embeddings[2]).clone())
    };
    let (j1, b1) = run(false);
    let (j2, b2) = run(true);
    assert_eq!(b1, b2);
    assert_ne!(j1, j2);

    let (m, store) = build(MsggConfig::default(), 4);
    let mut s = Session::inference(&store);
    let x = s.input(kp.clone());
    let mut inputs = m.branch_inputs(&mut s, x).unwrap();
    let o1 = m.forward_branches(&mut s, &inputs).unwrap();
    let b_on = s.value(o1.embeddings[2]).clone();
    inputs[0] = s.input(Tensor::zeros(&[1, 12, 12, 3]));
    let o2 = m.forward_branches(&mut s, &inputs).unwrap();
    assert_ne!(&b_on, s.value(o2.embeddings[2]));
}

#[test]
fn zero_input_gives_zero_first_block() {
    let (m, store) = build(MsggConfig { blocks: 1, ..Default::default() }, 5);
    let mut s = Session::train(&store, Mode::Train, Rng::new(0, 0));
    let x = s.input(Tensor::zeros(&[2, 10, 12, 3]));
    let out = m.forward(&mut s, x).unwrap();
    for e in out.embeddings {
        assert!(s.value(e).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zeroed_blocks_are_identity_through_residual() {
    let cfg = MsggConfig { channels: [8, 8, 8], semp: false, ..Default::default() };
    let (m6, mut s6) = build(cfg.clone(), 6);
    let (m1, s1) = build(MsggConfig { blocks: 1, ..cfg }, 6);
    let ids: Vec<_> = s6
        .ids()
        .filter(|&id| {
            let e = s6.entry(id);
            e.kind == ParamKind::Weight && !e.name.starts_with("msgg.block1.") && !e.name.starts_with("msgg.head")
        })
        .collect();
    for id in ids {
        s6.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let kp = random_kp(1, 15, 2);
    let a = embed(&m6, &s6, &kp);
    let b = embed(&m1, &s1, &kp);
    for r in 0..3 {
        assert!(a[r].max_abs_diff(&b[r]) < 1e-12, "branch {r}");
    }
}

#[test]
fn self_loop_flag_changes_adjacency() {
    let base = MsggConfig { channels: [4, 4, 4], ..Default::default() };
    let (m1, s1) = build(base.clone(), 8);
    let (m2, s2) = build(MsggConfig { self_loop: SelfLoop::SelfSubsetOnly, ..base }, 8);
    let kp = random_kp(1, 10, 3);
    assert_ne!(embed(&m1, &s1, &kp)[0], embed(&m2, &s2, &kp)[0]);
}

#[test]
fn even_temporal_kernel_is_a_config_error() {
    let mut store = ParamStore::new();
    let cfg = MsggConfig { temporal_kernel: 4, ..Default::default() };
    assert!(matches!(Msgg::new(cfg, &mut store, "m", &mut Rng::new(0, 0)), Err(Error::Config(_))));
}
