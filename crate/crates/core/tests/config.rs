use bifusion::config::{RunConfig, KEYS};
use bifusion::graph::Strategy;
use bifusion::msgg::Pyramid;
use bifusion::Error;

#[test]
fn defaults_match_published_hyperparameters() {
    let c = RunConfig::default();
    assert_eq!(c.channels, [16, 32, 64]);
    assert_eq!(c.compact_dim, 32);
    assert_eq!(c.dropout, 0.3);
    assert_eq!(c.fused_dim, 128);
    assert_eq!(c.margin, 0.2);
    assert_eq!(c.loss_weights, vec![3.0, 2.0, 1.0]);
    assert_eq!(c.momentum, 0.9);
    assert_eq!(c.weight_decay, 5e-4);
    assert_eq!(c.pretrain_lr, 0.1);
    assert_eq!(c.global_lr_pretrained, 1e-4);
    assert_eq!(c.global_lr_new, 0.1);
    assert_eq!(c.parts, 16);
    assert_eq!(c.sil_channels[2], 128);
    assert_eq!((c.batch_p, c.batch_k, c.batch_frames), (4, 4, 30));
    assert_eq!(c.temporal_kernel, 9);
    assert_eq!(c.strategy, Strategy::GaitTemporal);
    assert_eq!(c.pyramid, Pyramid::Full);
    assert!(c.semp && c.normalize);
    assert_eq!(c.gallery_nm, 4);
    assert_eq!((c.nm_walks, c.bg_walks, c.cl_walks, c.views.len()), (6, 2, 2, 11));
    c.validate().unwrap();
}

#[test]
fn derived_model_configs_carry_the_values() {
    let c = RunConfig::default();
    let m = c.msgg_config(7);
    assert_eq!((m.channels, m.num_classes, m.blocks), ([16, 32, 64], 7, 6));
    let f = c.fusion_config();
    assert_eq!((f.compact_dim, f.dropout, f.fused_dim), (32, 0.3, 128));
    assert_eq!(c.branch_weights().unwrap(), vec![3.0, 2.0, 1.0]);
}

#[test]
fn text_round_trips() {
    let mut c = RunConfig::default();
    c.set("channels", "8,16,32").unwrap();
    c.set("strategy", "spatial").unwrap();
    c.set("pretrain_milestones", "10,20").unwrap();
    c.set("semp", "false").unwrap();
    let back = RunConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn every_key_reads_back() {
    let c = RunConfig::default();
    for (k, _) in KEYS {
        let v = c.get(k).unwrap_or_else(|| panic!("no value for {k}"));
        let mut d = RunConfig::default();
        d.set(k, &v).unwrap();
        assert_eq!(d, c, "{k}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let mut c = RunConfig::default();
    assert!(matches!(c.set("chanels", "1,2,3"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_text("seed = 1\nbogus = 2\n"), Err(Error::Config(_))));
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let c = RunConfig::from_text("# desk run\n\nseed = 3\n  ids = 5  \n").unwrap();
    assert_eq!((c.seed, c.ids), (3, 5));
}

#[test]
fn invalid_values_fail_validation() {
    for (k, v) in [("batch_p", "1"), ("batch_k", "1"), ("temporal_kernel", "4"), ("gallery_nm", "7"), ("dropout", "1.0")] {
        let mut c = RunConfig::default();
        let r = c.set(k, v).and_then(|_| c.validate());
        assert!(matches!(r, Err(Error::Config(_))), "{k}={v}");
    }
    let mut c = RunConfig::default();
    assert!(c.set("seed", "minus one").is_err());
}
