//! Multi-scale skeleton graph network.
//!
//! Six cross-scale spatial-temporal blocks run over parallel branches
//! (joints, limbs, body parts by default). Each block applies, per branch,
//! K-subset graph convolution with learnable edge importance, batch norm,
//! relu, a per-node temporal convolution, batch norm and relu, plus a residual
//! from block 2 on. Semantic pooling then passes averaged features from each
//! branch to the next coarser one.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{PoolKind, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::graph::{
    build_pyramid_graph, partition_neighbors, subset_bases, PyramidGraph, Scale, ScaleGraph, SelfLoop, Strategy,
    NUM_JOINTS,
};
use crate::params::{BatchNormParams, LinearParams, ParamKind, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which branches the network stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pyramid {
    /// Joints, limbs and body parts.
    Full,
    JointsLimbs,
    Joints,
    /// Three joint-scale branches chained by identity pooling.
    ThreeJoints,
}

impl Pyramid {
    pub const ALL: [Pyramid; 4] = [Pyramid::Full, Pyramid::JointsLimbs, Pyramid::Joints, Pyramid::ThreeJoints];

    pub fn scales(self) -> Vec<Scale> {
        match self {
            Pyramid::Full => vec![Scale::Joints, Scale::Limbs, Scale::Bodyparts],
            Pyramid::JointsLimbs => vec![Scale::Joints, Scale::Limbs],
            Pyramid::Joints => vec![Scale::Joints],
            Pyramid::ThreeJoints => vec![Scale::Joints; 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pyramid::Full => "full",
            Pyramid::JointsLimbs => "joints_limbs",
            Pyramid::Joints => "joints",
            Pyramid::ThreeJoints => "three_joints",
        }
    }
}

impl fmt::Display for Pyramid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pyramid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pyramid::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pyramid '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsggConfig {
    pub channels: [usize; 3],
    pub temporal_kernel: usize,
    pub blocks: usize,
    pub strategy: Strategy,
    pub self_loop: SelfLoop,
    pub semp: bool,
    pub pyramid: Pyramid,
    pub num_classes: usize,
}

impl Default for MsggConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            temporal_kernel: 9,
            blocks: 6,
            strategy: Strategy::GaitTemporal,
            self_loop: SelfLoop::EverySubset,
            semp: true,
            pyramid: Pyramid::Full,
            num_classes: 2,
        }
    }
}

impl MsggConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {}", self.temporal_kernel)));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !(1..=6).contains(&self.blocks) {
            return Err(Error::Config(format!("blocks must be in 1..=6, got {}", self.blocks)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of block `b` (1-based): (1,2)→c1, (3,4)→c2, (5,6)→c3.
    pub fn block_channels(&self, b: usize) -> usize {
        self.channels[(b - 1) / 2]
    }

    /// Channels of the pooled embeddings.
    pub fn embedding_dim(&self) -> usize {
        self.block_channels(self.blocks)
    }

    /// Triplet-loss weight of each branch, deepest branch last: (3,2,1) for
    /// three branches, (3,2) for two, (3) for one.
    pub fn branch_loss_weights(&self) -> Vec<f64> {
        (0..self.pyramid.scales().len()).map(|i| 3.0 - i as f64).collect()
    }
}

enum Residual {
    None,
    Identity,
    Project(LinearParams),
}

struct BranchBlock {
    weights: Vec<crate::params::ParamId>,
    bias: crate::params::ParamId,
    importance: Vec<crate::params::ParamId>,
    bn_spatial: BatchNormParams,
    temporal: crate::params::ParamId,
    bn_temporal: BatchNormParams,
    residual: Residual,
}

struct Branch {
    graph: ScaleGraph,
    input_pool: Tensor,
    static_bases: Option<Vec<Tensor>>,
    /// Pooling from the previous branch into this one, `[N × N_prev]`.
    semp: Option<Tensor>,
}

pub struct MsggOutput {
    /// GAP embeddings `[B × c3]`, shallowest branch first.
    pub embeddings: Vec<Var>,
    pub logits: Var,
}

/// Model structure; parameter values live in a [`ParamStore`] under `prefix`.
pub struct Msgg {
    pub config: MsggConfig,
    prefix: String,
    branches: Vec<Branch>,
    blocks: Vec<Vec<BranchBlock>>,
    head_bn: BatchNormParams,
    head_fc: LinearParams,
}

impl Msgg {
    pub fn new(config: MsggConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let pyramid = build_pyramid_graph();
        let branches = build_branches(&config, &pyramid)?;
        let k = config.strategy.subsets();
        let gamma = config.temporal_kernel;
        let mut blocks = Vec::new();
        for b in 1..=config.blocks {
            let cin = if b == 1 { 3 } else { config.block_channels(b - 1) };
            let cout = config.block_channels(b);
            let mut per_branch = Vec::new();
            for (r, br) in branches.iter().enumerate() {
                let n = br.graph.node_count();
                let p = format!("{prefix}.block{b}.branch{r}");
                let weights = (0..k)
                    .map(|i| store.add_uniform(&format!("{p}.spatial.w{i}"), &[cin, cout], cin, rng))
                    .collect();
                let bias = store.add(&format!("{p}.spatial.b"), ParamKind::Weight, Tensor::zeros(&[cout]));
                let importance = (0..k)
                    .map(|i| store.add(&format!("{p}.edge_importance{i}"), ParamKind::NoDecay, Tensor::ones(&[n, n])))
                    .collect();
                let bn_spatial = BatchNormParams::new(store, &format!("{p}.bn_spatial"), cout);
                let mut tk = vec![0.0; gamma * n];
                for node in 0..n {
                    tk[(gamma / 2) * n + node] = 1.0;
                }
                let temporal = store.add(&format!("{p}.temporal"), ParamKind::Weight, Tensor::new(&[gamma, n], tk)?);
                let bn_temporal = BatchNormParams::new(store, &format!("{p}.bn_temporal"), cout);
                let residual = if b == 1 {
                    Residual::None
                } else if cin == cout {
                    Residual::Identity
                } else {
                    let w = store.add_uniform(&format!("{p}.residual.w"), &[cin, cout], cin, rng);
                    let bb = store.add(&format!("{p}.residual.b"), ParamKind::Weight, Tensor::zeros(&[cout]));
                    Residual::Project(LinearParams { w, b: bb })
                };
                per_branch.push(BranchBlock { weights, bias, importance, bn_spatial, temporal, bn_temporal, residual });
            }
            blocks.push(per_branch);
        }
        let c3 = config.embedding_dim();
        let head_bn = BatchNormParams::new(store, &format!("{prefix}.head.bn"), c3);
        let head_fc = LinearParams::new(store, &format!("{prefix}.head.fc"), c3, config.num_classes, rng);
        Ok(Self { config, prefix: prefix.to_string(), branches, blocks, head_bn, head_fc })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Prefix shared by the classifier head parameters.
    pub fn head_prefix(&self) -> String {
        format!("{}.head", self.prefix)
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Pools `[B×T×12×3]` keypoints into one input per branch.
    pub fn branch_inputs(&self, s: &mut Session, kp: Var) -> Result<Vec<Var>> {
        let sh = s.tape.shape(kp).to_vec();
        if sh.len() != 4 || sh[2] != NUM_JOINTS || sh[3] != 3 {
            return Err(dim_err!("keypoints must be [B x T x 12 x 3], got {:?}", sh));
        }
        let mut out = Vec::new();
        for br in &self.branches {
            if br.graph.scale == Scale::Joints {
                out.push(kp);
            } else {
                let m = s.input(br.input_pool.clone());
                out.push(s.tape.node_mix(m, kp)?);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, s: &mut Session, kp: Var) -> Result<MsggOutput> {
        let inputs = self.branch_inputs(s, kp)?;
        self.forward_branches(s, &inputs)
    }

    /// Runs all blocks from explicit per-branch inputs `[B×T×N_r×3]`.
    pub fn forward_branches(&self, s: &mut Session, inputs: &[Var]) -> Result<MsggOutput> {
        if inputs.len() != self.branches.len() {
            return Err(dim_err!("{} branch inputs for {} branches", inputs.len(), self.branches.len()));
        }
        let t = s.tape.shape(inputs[0])[1];
        if t < self.config.temporal_kernel {
            return Err(Error::InputLength(format!(
                "sequence has {t} frames, temporal kernel needs at least {}",
                self.config.temporal_kernel
            )));
        }
        let bases = self.adjacency_bases(s, inputs)?;
        let mut state: Vec<Var> = inputs.to_vec();
        for blk in &self.blocks {
            let mut next = Vec::with_capacity(state.len());
            for ((x, bb), base) in state.iter().zip(blk).zip(&bases) {
                next.push(self.branch_block(s, *x, bb, base)?);
            }
            if self.config.semp {
                for r in 1..next.len() {
                    let m = self.branches[r].semp.clone().expect("semp map");
                    let m = s.input(m);
                    next[r] = semantic_pool(&mut s.tape, next[r - 1], next[r], m)?;
                }
            }
            state = next;
        }
        let mut embeddings = Vec::with_capacity(state.len());
        for x in state {
            embeddings.push(global_average_pool(&mut s.tape, x)?);
        }
        let top = *embeddings.last().expect("at least one branch");
        let h = s.batch_norm(top, &self.head_bn)?;
        let logits = s.linear(h, &self.head_fc)?;
        Ok(MsggOutput { embeddings, logits })
    }

    /// Per branch, per subset: `A_k (+I)` as `[N×N]`, or `[B·T×N×N]` when the
    /// strategy depends on per-frame coordinates.
    fn adjacency_bases(&self, s: &mut Session, inputs: &[Var]) -> Result<Vec<Vec<Var>>> {
        let mut out = Vec::new();
        for (br, &x) in self.branches.iter().zip(inputs) {
            let tensors = match &br.static_bases {
                Some(b) => b.clone(),
                None => dynamic_bases(&br.graph, self.config.strategy, self.config.self_loop, s.value(x))?,
            };
            out.push(tensors.into_iter().map(|t| s.input(t)).collect());
        }
        Ok(out)
    }

    fn branch_block(&self, s: &mut Session, x: Var, bb: &BranchBlock, bases: &[Var]) -> Result<Var> {
        let weights: Vec<Var> = bb.weights.iter().map(|&w| s.param(w)).collect();
        let importance: Vec<Var> = bb.importance.iter().map(|&w| s.param(w)).collect();
        let mut y = spatial_aggregate(&mut s.tape, x, bases, &weights, &importance)?;
        let bias = s.param(bb.bias);
        y = s.tape.add(y, bias)?;
        y = s.batch_norm(y, &bb.bn_spatial)?;
        y = s.tape.relu(y);
        let tw = s.param(bb.temporal);
        y = temporal_aggregate(&mut s.tape, y, tw)?;
        y = s.batch_norm(y, &bb.bn_temporal)?;
        y = s.tape.relu(y);
        match &bb.residual {
            Residual::None => Ok(y),
            Residual::Identity => s.tape.add(y, x),
            Residual::Project(lin) => {
                let r = s.linear(x, lin)?;
                s.tape.add(y, r)
            }
        }
    }
}

fn build_branches(config: &MsggConfig, pyramid: &PyramidGraph) -> Result<Vec<Branch>> {
    let scales = config.pyramid.scales();
    let mut out = Vec::new();
    for (r, &scale) in scales.iter().enumerate() {
        let graph = pyramid.scale(scale).clone();
        let static_bases = if config.strategy.is_dynamic() {
            None
        } else {
            let lab = partition_neighbors(&graph, config.strategy, None)?;
            let n = graph.node_count();
            Some(
                subset_bases(&lab, config.self_loop)
                    .into_iter()
                    .map(|m| Tensor::new(&[n, n], m))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let semp = (r > 0).then(|| match (scales[r - 1], scale) {
            (Scale::Joints, Scale::Limbs) => pyramid.joints_to_limbs.matrix(),
            (Scale::Limbs, Scale::Bodyparts) => pyramid.limbs_to_bodyparts.matrix(),
            (a, b) if a == b => Tensor::eye(a.node_count()),
            (a, b) => unreachable!("no pooling from {a} to {b}"),
        });
        out.push(Branch { input_pool: pyramid.joint_pool_matrix(scale), graph, static_bases, semp });
    }
    Ok(out)
}

/// Per-frame subset bases from the first two channels of `x [B×T×N×C]`.
fn dynamic_bases(graph: &ScaleGraph, strategy: Strategy, self_loop: SelfLoop, x: &Tensor) -> Result<Vec<Tensor>> {
    let sh = x.shape();
    let n = graph.node_count();
    if sh.len() != 4 || sh[2] != n || sh[3] < 2 {
        return Err(dim_err!("coordinates {:?} for a {}-node graph", sh, n));
    }
    let frames = sh[0] * sh[1];
    let c = sh[3];
    let k = strategy.subsets();
    let mut data = vec![Vec::with_capacity(frames * n * n); k];
    for f in 0..frames {
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let o = (f * n + i) * c;
                [x.data()[o], x.data()[o + 1]]
            })
            .collect();
        let lab = partition_neighbors(graph, strategy, Some(&coords))?;
        for (d, m) in data.iter_mut().zip(subset_bases(&lab, self_loop)) {
            d.extend_from_slice(&m);
        }
    }
    data.into_iter().map(|d| Tensor::new(&[frames, n, n], d)).collect()
}

/// `Σ_k norm((A_k + I) ⊙ W_E_k) · f · W_k` for features `[..×N×C_in]`.
///
/// `bases[k]` is `[N×N]` or `[L×N×N]` with `L` the number of frames.
pub fn spatial_aggregate(tape: &mut Tape, x: Var, bases: &[Var], weights: &[Var], importance: &[Var]) -> Result<Var> {
    if bases.len() != weights.len() || bases.len() != importance.len() || bases.is_empty() {
        return Err(dim_err!(
            "{} bases, {} weights, {} importance matrices",
            bases.len(),
            weights.len(),
            importance.len()
        ));
    }
    let mut acc: Option<Var> = None;
    for ((&base, &w), &we) in bases.iter().zip(weights).zip(importance) {
        let mask = tape.mul(base, we)?;
        let norm = tape.sym_normalize(mask)?;
        let mixed = tape.node_mix(norm, x)?;
        let y = tape.matmul(mixed, w)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Per-node temporal correlation of `[B×T×N×C]` (or `[T×N×C]`) with `w [Γ×N]`.
pub fn temporal_aggregate(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    let r = sh.len();
    if r < 3 {
        return Err(dim_err!("temporal_aggregate expects [.. x T x N x C], got {:?}", sh));
    }
    let (n, c) = (sh[r - 2], sh[r - 1]);
    if tape.shape(w).len() != 2 || tape.shape(w)[1] != n {
        return Err(dim_err!("temporal kernels {:?} for {} nodes", tape.shape(w), n));
    }
    let mut flat = sh[..r - 2].to_vec();
    flat.push(n * c);
    let xf = tape.reshape(x, &flat)?;
    let y = tape.conv1d_time(xf, w)?;
    tape.reshape(y, &sh)
}

/// `current + pool · lower` where `pool [N_hi × N_lo]` averages node pairs.
pub fn semantic_pool(tape: &mut Tape, lower: Var, current: Var, pool: Var) -> Result<Var> {
    let (sl, sc) = (tape.shape(lower).to_vec(), tape.shape(current).to_vec());
    if sl.last() != sc.last() {
        return Err(dim_err!("semantic pooling channel mismatch: {:?} vs {:?}", sl, sc));
    }
    let msg = tape.node_mix(pool, lower)?;
    tape.add(current, msg)
}

/// Mean over frames and nodes: `[B×T×N×C] → [B×C]`.
pub fn global_average_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(dim_err!("GAP expects [B x T x N x C], got {:?}", sh));
    }
    let flat = tape.reshape(x, &[sh[0], sh[1] * sh[2], sh[3]])?;
    tape.pool(flat, 1, PoolKind::Mean)
}
