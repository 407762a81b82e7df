//! Finite-difference checks of every differentiable kernel and of small
//! assembled models. The `gradcheck` command and the test suite share it.

use std::time::Instant;

use crate::autodiff::{grad_check, Mode, PoolKind, RunningStats, Tape, Var};
use crate::error::Result;
use crate::fusion::{BiFusion, FusionConfig};
use crate::graph::{SelfLoop, Strategy};
use crate::loss::{global_loss, msgg_pretrain_loss, triplet, DEFAULT_MARGIN};
use crate::msgg::{Msgg, MsggConfig, Pyramid};
use crate::params::{ParamKind, ParamStore, Session};
use crate::rng::Rng;
use crate::silhouette::{SilConfig, SilhouetteEncoder, FRAME_SIZE};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= TOLERANCE
    }
}

type KernelFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Normal draws pushed at least 0.1 away from zero, so relu kinks stay far
/// from the finite-difference stencil.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    normal(shape, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

/// A shuffled grid with spacing 0.1: every max is unique by a wide gap.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape, v).expect("shape")
}

/// Projects `y` onto fixed random weights so every output element matters.
fn readout(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = normal(&shape, &mut Rng::new(0x5eed, 7));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn kernel_cases() -> Vec<(&'static str, KernelFn, Vec<Tensor>)> {
    let mut r = Rng::new(2024, 0);
    let r = &mut r;
    vec![
        ("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; readout(t, y) }, vec![normal(&[2, 3, 4], r), normal(&[4, 5], r)]),
        ("add", |t, v| { let y = t.add(v[0], v[1])?; readout(t, y) }, vec![normal(&[2, 3, 4], r), normal(&[4], r)]),
        ("mul", |t, v| { let y = t.mul(v[0], v[1])?; readout(t, y) }, vec![normal(&[2, 3, 4], r), normal(&[3, 4], r)]),
        ("scale", |t, v| { let y = t.scale(v[0], -1.7); readout(t, y) }, vec![normal(&[5], r)]),
        (
            "add_bias_axis",
            |t, v| { let y = t.add_bias_axis(v[0], v[1], 1)?; readout(t, y) },
            vec![normal(&[2, 3, 2, 2], r), normal(&[3], r)],
        ),
        (
            "reshape_permute",
            |t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                let y = t.reshape(y, &[4, 6])?;
                readout(t, y)
            },
            vec![normal(&[2, 3, 4], r)],
        ),
        ("relu", |t, v| { let y = t.relu(v[0]); readout(t, y) }, vec![off_zero(&[4, 5], r)]),
        (
            "dropout",
            |t, v| {
                let y = t.dropout(v[0], 0.3, Mode::Train, &mut Rng::new(5, 0))?;
                readout(t, y)
            },
            vec![normal(&[4, 5], r)],
        ),
        (
            "conv2d",
            |t, v| { let y = t.conv2d(v[0], v[1], 1, 1)?; readout(t, y) },
            vec![normal(&[2, 2, 5, 5], r), normal(&[3, 2, 3, 3], r)],
        ),
        (
            "conv2d_stride2",
            |t, v| { let y = t.conv2d(v[0], v[1], 2, 1)?; readout(t, y) },
            vec![normal(&[1, 2, 5, 5], r), normal(&[2, 2, 3, 3], r)],
        ),
        ("max_pool2d", |t, v| { let y = t.max_pool2d(v[0])?; readout(t, y) }, vec![distinct(&[2, 2, 4, 4], r)]),
        (
            "conv1d_time_grouped",
            |t, v| { let y = t.conv1d_time(v[0], v[1])?; readout(t, y) },
            vec![normal(&[2, 7, 6], r), normal(&[3, 3], r)],
        ),
        (
            "conv1d_time_per_channel",
            |t, v| { let y = t.conv1d_time(v[0], v[1])?; readout(t, y) },
            vec![normal(&[6, 4], r), normal(&[5, 4], r)],
        ),
        (
            "batch_norm_train",
            |t, v| {
                let (mean, var) = ([0.0; 4], [1.0; 4]);
                let (y, _) = t.batch_norm(v[0], v[1], v[2], Mode::Train, RunningStats { mean: &mean, var: &var }, 1e-5)?;
                readout(t, y)
            },
            vec![normal(&[3, 2, 4], r), off_zero(&[4], r), normal(&[4], r)],
        ),
        (
            "batch_norm_eval",
            |t, v| {
                let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
                let (y, _) = t.batch_norm(v[0], v[1], v[2], Mode::Eval, RunningStats { mean: &mean, var: &var }, 1e-5)?;
                readout(t, y)
            },
            vec![normal(&[4, 3], r), normal(&[3], r), normal(&[3], r)],
        ),
        ("pool_mean", |t, v| { let y = t.pool(v[0], 1, PoolKind::Mean)?; readout(t, y) }, vec![normal(&[2, 5, 3], r)]),
        ("pool_max", |t, v| { let y = t.pool(v[0], 1, PoolKind::Max)?; readout(t, y) }, vec![distinct(&[2, 5, 3], r)]),
        ("concat", |t, v| { let y = t.concat(v[0], v[1])?; readout(t, y) }, vec![normal(&[2, 3], r), normal(&[2, 4], r)]),
        ("broadcast", |t, v| { let y = t.broadcast(v[0], 1, 4)?; readout(t, y) }, vec![normal(&[2, 3], r)]),
        (
            "part_linear",
            |t, v| { let y = t.part_linear(v[0], v[1])?; readout(t, y) },
            vec![normal(&[3, 4, 5], r), normal(&[4, 5, 2], r)],
        ),
        (
            "node_mix_shared",
            |t, v| { let y = t.node_mix(v[0], v[1])?; readout(t, y) },
            vec![normal(&[4, 4], r), normal(&[2, 3, 4, 5], r)],
        ),
        (
            "node_mix_per_frame",
            |t, v| { let y = t.node_mix(v[0], v[1])?; readout(t, y) },
            vec![normal(&[6, 4, 4], r), normal(&[2, 3, 4, 5], r)],
        ),
        (
            "node_mix_pooling",
            |t, v| { let y = t.node_mix(v[0], v[1])?; readout(t, y) },
            vec![normal(&[2, 4], r), normal(&[3, 4, 5], r)],
        ),
        (
            "sym_normalize",
            |t, v| { let y = t.sym_normalize(v[0])?; readout(t, y) },
            vec![normal(&[3, 4, 4], r).map(|x| 0.1 + x.abs())],
        ),
        ("pairwise_dist", |t, v| { let y = t.pairwise_dist(v[0])?; readout(t, y) }, vec![normal(&[5, 3], r)]),
        ("pairwise_dist_parts", |t, v| { let y = t.pairwise_dist(v[0])?; readout(t, y) }, vec![normal(&[5, 2, 3], r)]),
        (
            "batch_all_triplet",
            |t, v| t.batch_all_triplet(v[0], &[0, 0, 1, 1, 2, 2], DEFAULT_MARGIN),
            vec![normal(&[2, 6, 6], r).map(|x| 0.5 + x.abs())],
        ),
        ("triplet_embeddings", |t, v| triplet(t, v[0], &[0, 0, 1, 1, 2, 2], DEFAULT_MARGIN), vec![normal(&[6, 4], r)]),
        ("softmax_cross_entropy", |t, v| t.softmax_cross_entropy(v[0], &[1, 0, 4, 2]), vec![normal(&[4, 5], r)]),
        ("sum", |t, v| Ok(t.sum(v[0])), vec![normal(&[3, 2], r)]),
        ("mean", |t, v| Ok(t.mean(v[0])), vec![normal(&[3, 2], r)]),
    ]
}

/// One result per tape kernel.
pub fn kernel_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, f, inputs) in kernel_cases() {
        let start = Instant::now();
        let error = grad_check(f, &inputs, STEP)?;
        out.push(CheckResult { name: name.to_string(), error, seconds: start.elapsed().as_secs_f64() });
    }
    Ok(out)
}

/// Denominator floor of train-mode model checks, as a fraction of the
/// largest gradient magnitude in the model.
///
/// In train mode some parameters have an exact gradient of zero (a bias
/// feeding batch normalization) or a tiny one (scale-invariant adjacency
/// entries). There the central difference is pure roundoff, about `ε·|L|/h`,
/// and the `1e-8` floor would report that noise as a large relative error.
pub const TRAIN_FLOOR: f64 = 1e-4;

/// Compares session gradients of every trainable parameter with central
/// differences. Returns `(parameter name, worst relative error)` pairs.
///
/// Each evaluation uses a fresh session in `mode`, seeded identically, so
/// dropout masks repeat and batch statistics are recomputed. Errors are
/// `|a − f| / max(1e-8, |a| + |f|, floor · max|a|)`; `floor = 0` gives the
/// plain kernel measure.
pub fn grad_check_params<F>(store: &ParamStore, mode: Mode, floor: f64, f: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut s = Session::train(store, mode, Rng::new(0, 0));
        let loss = f(&mut s)?;
        Ok(s.value(loss).item())
    };
    let mut s = Session::train(store, mode, Rng::new(0, 0));
    let loss = f(&mut s)?;
    let grads = s.backward(loss)?;
    let largest = grads.iter().flat_map(|(_, g)| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor * largest).max(1e-8);
    let mut probe = store.clone();
    let mut out = Vec::new();
    for (id, g) in grads {
        let mut worst = 0.0f64;
        for e in 0..g.len() {
            let orig = probe.get(id).data()[e];
            probe.get_mut(id).data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig;
            let (a, fd) = (g.data()[e], (plus - minus) / (2.0 * h));
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(floor));
        }
        out.push((store.entry(id).name.clone(), worst));
    }
    Ok(out)
}

/// Sets every running statistic to the batch statistic of one train-mode pass.
fn freeze_stats<F>(store: &mut ParamStore, f: F) -> Result<()>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::train(store, Mode::Train, Rng::new(0, 0));
    f(&mut s)?;
    let pending = s.into_stat_updates();
    pending.freeze(store);
    Ok(())
}

/// Replaces zero-initialized biases and unit scales with random values, so
/// no relu sits exactly on its kink and every gradient path is exercised.
/// Running statistics get random means and variances in [0.5, 1.5).
fn jitter(store: &mut ParamStore, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let running_var = store.entry(id).kind == ParamKind::Buffer && store.entry(id).name.ends_with("var");
        for v in store.get_mut(id).data_mut() {
            if running_var {
                *v = rng.range(0.5, 1.5);
            } else {
                *v += 0.2 * rng.normal();
            }
        }
    }
}

fn mini_msgg_config(strategy: Strategy) -> MsggConfig {
    MsggConfig {
        channels: [4, 6, 8],
        temporal_kernel: 3,
        blocks: 2,
        strategy,
        self_loop: SelfLoop::EverySubset,
        semp: true,
        pyramid: Pyramid::Full,
        num_classes: 2,
    }
}

fn mini_sil_config() -> SilConfig {
    SilConfig { channels: [2, 3, 4], parts: 4, window: 3 }
}

const LABELS: [usize; 4] = [0, 0, 1, 1];

fn keypoints(b: usize, t: usize, rng: &mut Rng) -> Tensor {
    normal(&[b, t, 12, 3], rng)
}

/// Binary masks, like rendered frames. Real-valued noise would put some of
/// the ~10^5 first-stage relu inputs within one step of their kink.
fn silhouettes(b: usize, t: usize, rng: &mut Rng) -> Tensor {
    let n = b * t * FRAME_SIZE * FRAME_SIZE;
    let data = (0..n).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[b, t, FRAME_SIZE, FRAME_SIZE], data).expect("shape")
}

fn summarize(name: &str, per_param: &[(String, f64)], start: Instant) -> CheckResult {
    let error = per_param.iter().map(|p| p.1).fold(0.0, f64::max);
    CheckResult { name: name.to_string(), error, seconds: start.elapsed().as_secs_f64() }
}

/// Smooth stand-in objective for eval-mode checks: a fixed random readout of
/// every embedding plus cross-entropy on the logits. Triplet hinges would put
/// kinks within `h` of the evaluation point.
fn smooth_objective(t: &mut Tape, embeddings: &[Var], logits: Var) -> Result<Var> {
    let mut total = t.softmax_cross_entropy(logits, &LABELS)?;
    for &e in embeddings {
        let r = readout(t, e)?;
        total = t.add(total, r)?;
    }
    Ok(total)
}

/// Two-block skeleton network.
///
/// The plain error measure runs in eval mode with frozen statistics under a
/// smooth objective, on the uniform partition. Partitions with a self-only
/// subset (gait-temporal puts every node alone in subset 0) give the diagonal
/// edge weights a gradient near the 1e-6 degree guard, about 1e-7, which central
/// differences at `h = 1e-5` cannot resolve; gait-temporal is therefore checked
/// with [`TRAIN_FLOOR`], in eval mode and in train mode under the pretraining
/// loss. The edge-importance matrices of the plain check are also reported on
/// their own.
pub fn msgg_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for strategy in [Strategy::Uniform, Strategy::GaitTemporal] {
        let mut rng = Rng::new(77, 0);
        let mut store = ParamStore::new();
        let model = Msgg::new(mini_msgg_config(strategy), &mut store, "msgg", &mut rng)?;
        jitter(&mut store, &mut rng);
        let kp = keypoints(4, 5, &mut rng);
        let smooth = |s: &mut Session| {
            let x = s.input(kp.clone());
            let out = model.forward(s, x)?;
            smooth_objective(&mut s.tape, &out.embeddings, out.logits)
        };
        let mut frozen = store.clone();
        freeze_stats(&mut frozen, smooth)?;
        let start = Instant::now();
        if strategy == Strategy::Uniform {
            let eval = grad_check_params(&frozen, Mode::Eval, 0.0, smooth, STEP)?;
            let importance: Vec<_> = eval.iter().filter(|p| p.0.contains("edge_importance")).cloned().collect();
            out.push(summarize("msgg_2block", &eval, start));
            out.push(summarize("edge_importance", &importance, start));
            continue;
        }
        let eval = grad_check_params(&frozen, Mode::Eval, TRAIN_FLOOR, smooth, STEP)?;
        out.push(summarize("msgg_2block_gait_temporal", &eval, start));
        let weights = model.config.branch_loss_weights();
        let loss = |s: &mut Session| {
            let x = s.input(kp.clone());
            let out = model.forward(s, x)?;
            Ok(msgg_pretrain_loss(&mut s.tape, &out.embeddings, &weights, out.logits, &LABELS, DEFAULT_MARGIN)?.total)
        };
        let start = Instant::now();
        let train = grad_check_params(&store, Mode::Train, TRAIN_FLOOR, loss, STEP)?;
        out.push(summarize("msgg_2block_train", &train, start));
    }
    Ok(out)
}

/// Three-stage silhouette encoder under a part-wise triplet loss.
pub fn silhouette_check() -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = Rng::new(78, 0);
    let mut store = ParamStore::new();
    let model = SilhouetteEncoder::new(mini_sil_config(), &mut store, "sil", &mut rng)?;
    jitter(&mut store, &mut rng);
    let sil = silhouettes(4, 3, &mut rng);
    let per_param = grad_check_params(
        &store,
        Mode::Eval,
        0.0,
        |s| {
            let x = s.input(sil.clone());
            let parts = model.forward(s, x)?;
            let tp = triplet(&mut s.tape, parts, &LABELS, DEFAULT_MARGIN)?;
            let r = readout(&mut s.tape, parts)?;
            let r = s.tape.scale(r, 0.01);
            s.tape.add(tp, r)
        },
        STEP,
    )?;
    Ok(summarize("silhouette_encoder", &per_param, start))
}

/// Assembled two-modality model: eval mode with frozen statistics under a
/// smooth objective on the uniform partition, then gait-temporal in train
/// mode with dropout active under the global loss.
pub fn fusion_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let fusion = FusionConfig { compact_dim: 3, dropout: 0.3, fused_dim: 5 };
    for strategy in [Strategy::Uniform, Strategy::GaitTemporal] {
        let mut rng = Rng::new(79, 0);
        let mut store = ParamStore::new();
        let model = BiFusion::new(mini_msgg_config(strategy), mini_sil_config(), fusion.clone(), &mut store, &mut rng)?;
        jitter(&mut store, &mut rng);
        let kp = keypoints(4, 5, &mut rng);
        let sil = silhouettes(4, 3, &mut rng);
        let start = Instant::now();
        if strategy == Strategy::Uniform {
            let smooth = |s: &mut Session| {
                let k = s.input(kp.clone());
                let x = s.input(sil.clone());
                let out = model.forward(s, k, x)?;
                smooth_objective(&mut s.tape, &[out.fused, out.compact], out.msgg.logits)
            };
            let mut frozen = store.clone();
            freeze_stats(&mut frozen, smooth)?;
            let eval = grad_check_params(&frozen, Mode::Eval, 0.0, smooth, STEP)?;
            out.push(summarize("bifusion_global", &eval, start));
            continue;
        }
        let loss = |s: &mut Session| {
            let k = s.input(kp.clone());
            let x = s.input(sil.clone());
            let out = model.forward(s, k, x)?;
            let e_body = *out.msgg.embeddings.last().expect("branch embedding");
            Ok(global_loss(&mut s.tape, out.fused, e_body, out.msgg.logits, &LABELS, DEFAULT_MARGIN)?.total)
        };
        let train = grad_check_params(&store, Mode::Train, TRAIN_FLOOR, loss, STEP)?;
        out.push(summarize("bifusion_global_train", &train, start));
    }
    Ok(out)
}

/// Every kernel, then the model-level checks.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = kernel_checks()?;
    out.extend(msgg_checks()?);
    out.push(silhouette_check()?);
    out.extend(fusion_checks()?);
    Ok(out)
}

/// `check,max_rel_error,status` lines; timings are left out so reports are
/// reproducible.
pub fn report_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("check,max_rel_error,status\n");
    for r in results {
        let status = if r.passed() { "pass" } else { "fail" };
        s.push_str(&format!("{},{:.3e},{}\n", r.name, r.error, status));
    }
    s
}
