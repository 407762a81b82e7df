use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
ids = 3
frames = 12
views = 0,90
channels = 4,6,8
temporal_kernel = 3
sil_channels = 2,3,4
parts = 4
compact_dim = 5
fused_dim = 6
batch_p = 2
batch_k = 2
batch_frames = 8
pretrain_iters = 3
sil_iters = 3
global_iters = 3
";

fn bifusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bifusion")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bifusion(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn last_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates, pretrains both branches and trains the fused model under `dir`.
fn pipeline(dir: &Path, threads: &str) {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let data = dir.join("data");
    let d = s(&data);
    let t = ["--threads", threads, "--deterministic"];
    let run = |rest: &[&str]| {
        let mut a: Vec<&str> = t.to_vec();
        a.extend_from_slice(rest);
        ok(&a);
    };
    run(&["gen", "--config", c, "--out", d]);
    let m = dir.join("msgg.ckpt");
    let sil = dir.join("sil.ckpt");
    let g = dir.join("global.ckpt");
    run(&["pretrain-msgg", "--config", c, "--data", d, "--out", s(&m), "--log", s(&dir.join("msgg.csv"))]);
    run(&["pretrain-sil", "--config", c, "--data", d, "--out", s(&sil)]);
    run(&["train", "--config", c, "--data", d, "--msgg", s(&m), "--sil", s(&sil), "--out", s(&g), "--log", s(&dir.join("global.csv"))]);
    run(&["eval", "--config", c, "--data", d, "--checkpoint", s(&g), "--out", s(&dir.join("report.csv"))]);
}

#[test]
fn gen_writes_the_full_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["--deterministic", "gen", "--ids", "20", "--seed", "7", "--out", s(&out), "--set", "frames=12"]);
    let mut dirs = 0;
    for id in fs::read_dir(&out).unwrap() {
        let id = id.unwrap().path();
        if !id.is_dir() {
            continue;
        }
        for walk in fs::read_dir(&id).unwrap() {
            for view in fs::read_dir(walk.unwrap().path()).unwrap() {
                let view = view.unwrap().path();
                assert!(view.join("data.kpm").is_file() && view.join("data.sil").is_file());
                dirs += 1;
            }
        }
    }
    assert_eq!(dirs, 20 * (6 + 2 + 2) * 11);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2200);
}

#[test]
fn pipeline_is_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "3");
    for f in ["data/manifest.csv", "data/001/nm-01/090/data.kpm", "data/002/cl-02/000/data.sil", "msgg.ckpt", "sil.ckpt", "global.ckpt", "msgg.csv", "global.csv", "report.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between thread counts");
    }
    let report = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert!(report.starts_with("condition,probe_view,accuracy\n"));
    for c in ["nm", "bg", "cl"] {
        assert!(report.lines().any(|l| l.to_ascii_lowercase().starts_with(&format!("{c},mean,"))), "{report}");
    }
}

#[test]
fn eval_with_one_probe_condition() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), "1");
    let cfg = tmp.path().join("tiny.cfg");
    let data = tmp.path().join("data");
    let m = tmp.path().join("msgg.ckpt");
    let out = ok(&["--deterministic", "eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&m), "--probe", "CL"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    // two probe views and the mean
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows.iter().all(|r| r.to_ascii_lowercase().starts_with("cl,")));
    for mode in ["msgg_only", "silhouette_only", "bifusion", "msgg_branches"] {
        let g = tmp.path().join("global.ckpt");
        let ck = if mode == "msgg_branches" { &m } else { &g };
        ok(&["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(ck), "--mode", mode, "--probe", "NM"]);
    }
}

#[test]
fn export_embeddings_has_one_row_per_part() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), "1");
    let out = tmp.path().join("emb.csv");
    ok(&[
        "export-embeddings",
        "--config",
        s(&tmp.path().join("tiny.cfg")),
        "--data",
        s(&tmp.path().join("data")),
        "--checkpoint",
        s(&tmp.path().join("global.ckpt")),
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(out).unwrap();
    // 3 ids x 10 walks x 2 views, 4 parts each
    assert_eq!(text.lines().count(), 1 + 3 * 10 * 2 * 4);
    let first = text.lines().nth(1).unwrap();
    assert_eq!(first.rsplit(',').next().unwrap().split(' ').count(), 6);
}

#[test]
fn gradcheck_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("grad.csv");
    ok(&["--deterministic", "gradcheck", "--out", s(&out)]);
    let text = fs::read_to_string(out).unwrap();
    for name in ["matmul", "msgg_2block", "edge_importance", "silhouette_encoder", "bifusion_global"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name},"))), "{name} missing:\n{text}");
    }
}

#[test]
fn inspect_graph_prints_subsets() {
    let out = ok(&["inspect-graph", "--scale", "bodyparts", "--set", "strategy=uniform"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[..2], ["scale,strategy,k", "bodyparts,uniform,0"]);
    // three body parts: arms, torso, legs
    assert_eq!(lines.len(), 2 + 3);
    assert!(lines[2..].iter().all(|l| l.split(',').count() == 3));
}

#[test]
fn usage_errors_are_one_line_with_exit_2() {
    for args in [&["frobnicate"][..], &["eval", "--bogus"][..], &["gen"][..]] {
        let out = bifusion(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error kind=usage message="), "{err}");
    }
}

#[test]
fn runtime_errors_name_their_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bifusion(&["gen", "--out", s(tmp.path()), "--set", "chanels=1,2,3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(last_line(&out).starts_with("error kind=config"));

    let out = bifusion(&["eval", "--data", s(&tmp.path().join("missing")), "--checkpoint", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(last_line(&out).starts_with("error kind="));

    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = bifusion(&["--deterministic", "gen", "--ids", "2", "--set", "frames=12", "--set", "views=0", "--out", s(&tmp.path().join("d"))]);
    assert!(out.status.success());
    let out = bifusion(&["eval", "--data", s(&tmp.path().join("d")), "--checkpoint", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(last_line(&out).starts_with("error kind=format"), "{}", last_line(&out));
}

#[test]
fn help_lists_config_keys() {
    for (cmd, keys) in [
        ("gen", &["ids", "frames", "views"][..]),
        ("pretrain-msgg", &["channels", "pretrain_lr", "loss_weights", "batch_p"][..]),
        ("pretrain-sil", &["sil_channels", "sil_lr", "parts"][..]),
        ("train", &["compact_dim", "fused_dim", "global_lr_new", "dropout"][..]),
        ("eval", &["gallery_nm", "rank_k"][..]),
        ("inspect-graph", &["strategy"][..]),
    ] {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8(out.stdout).unwrap();
        for k in keys {
            assert!(text.contains(k), "{cmd} --help lacks {k}");
        }
    }
}
