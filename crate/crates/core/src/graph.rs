//! The three-scale skeleton graph: joints, limbs and body parts.
//!
//! Joint order is fixed for the whole crate:
//!
//! | index | joint | index | joint |
//! |---|---|---|---|
//! | 0 | left shoulder | 6 | left hip |
//! | 1 | right shoulder | 7 | right hip |
//! | 2 | left elbow | 8 | left knee |
//! | 3 | right elbow | 9 | right knee |
//! | 4 | left wrist | 10 | left ankle |
//! | 5 | right wrist | 11 | right ankle |
//!
//! Degree normalization is symmetric, `D^-1/2 (A_k + I) D^-1/2`. By default
//! the identity is added to every subset; [`SelfLoop::SelfSubsetOnly`] adds it
//! to subset 0 only.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::DEGREE_GUARD;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 12;

pub mod joint {
    pub const L_SHOULDER: usize = 0;
    pub const R_SHOULDER: usize = 1;
    pub const L_ELBOW: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const L_WRIST: usize = 4;
    pub const R_WRIST: usize = 5;
    pub const L_HIP: usize = 6;
    pub const R_HIP: usize = 7;
    pub const L_KNEE: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const L_ANKLE: usize = 10;
    pub const R_ANKLE: usize = 11;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Joints,
    Limbs,
    Bodyparts,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Joints, Scale::Limbs, Scale::Bodyparts];

    pub fn node_count(self) -> usize {
        match self {
            Scale::Joints => 12,
            Scale::Limbs => 6,
            Scale::Bodyparts => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Joints => "joints",
            Scale::Limbs => "limbs",
            Scale::Bodyparts => "bodyparts",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scale::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scale '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGraph {
    pub scale: Scale,
    pub node_names: Vec<&'static str>,
    pub edges: Vec<(usize, usize)>,
    /// Nodes with large swing amplitude during walking.
    pub positive: Vec<usize>,
    /// Nodes with small swing amplitude.
    pub negative: Vec<usize>,
}

impl ScaleGraph {
    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    /// Dense symmetric 0/1 adjacency without self loops, row-major.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.node_count();
        let mut a = vec![0.0; n * n];
        for &(i, j) in &self.edges {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
        a
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(i, j)| if i == v { Some(j) } else if j == v { Some(i) } else { None })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn is_positive(&self, v: usize) -> bool {
        self.positive.contains(&v)
    }
}

/// Pairing of nodes at one scale into the nodes of the next: `((a,b) → i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMap {
    pub from: Scale,
    pub to: Scale,
    pub pairs: Vec<((usize, usize), usize)>,
}

impl PoolMap {
    /// `[N_to × N_from]` averaging matrix with 0.5 at both members of each pair.
    pub fn matrix(&self) -> Tensor {
        let (nf, nt) = (self.from.node_count(), self.to.node_count());
        let mut m = vec![0.0; nt * nf];
        for &((a, b), i) in &self.pairs {
            m[i * nf + a] += 0.5;
            m[i * nf + b] += 0.5;
        }
        Tensor::new(&[nt, nf], m).expect("pool matrix shape")
    }

    /// Target node of each source node.
    pub fn target_of(&self, src: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|((a, b), _)| *a == src || *b == src)
            .map(|&(_, i)| i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGraph {
    pub joints: ScaleGraph,
    pub limbs: ScaleGraph,
    pub bodyparts: ScaleGraph,
    pub joints_to_limbs: PoolMap,
    pub limbs_to_bodyparts: PoolMap,
}

impl PyramidGraph {
    pub fn scale(&self, s: Scale) -> &ScaleGraph {
        match s {
            Scale::Joints => &self.joints,
            Scale::Limbs => &self.limbs,
            Scale::Bodyparts => &self.bodyparts,
        }
    }

    /// Averaging matrix `[N_scale × 12]` from joints to the nodes of `s`.
    pub fn joint_pool_matrix(&self, s: Scale) -> Tensor {
        match s {
            Scale::Joints => Tensor::eye(NUM_JOINTS),
            Scale::Limbs => self.joints_to_limbs.matrix(),
            Scale::Bodyparts => {
                let a = self.joints_to_limbs.matrix();
                let b = self.limbs_to_bodyparts.matrix();
                let mut m = vec![0.0; 3 * NUM_JOINTS];
                for i in 0..3 {
                    for l in 0..6 {
                        let w = b.data()[i * 6 + l];
                        for j in 0..NUM_JOINTS {
                            m[i * NUM_JOINTS + j] += w * a.data()[l * NUM_JOINTS + j];
                        }
                    }
                }
                Tensor::new(&[3, NUM_JOINTS], m).expect("pool matrix shape")
            }
        }
    }
}

pub fn build_pyramid_graph() -> PyramidGraph {
    use joint::*;
    let joints = ScaleGraph {
        scale: Scale::Joints,
        node_names: vec![
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ],
        edges: vec![
            (L_SHOULDER, L_ELBOW),
            (L_ELBOW, L_WRIST),
            (R_SHOULDER, R_ELBOW),
            (R_ELBOW, R_WRIST),
            (L_HIP, L_KNEE),
            (L_KNEE, L_ANKLE),
            (R_HIP, R_KNEE),
            (R_KNEE, R_ANKLE),
            (L_SHOULDER, R_SHOULDER),
            (L_HIP, R_HIP),
            (L_SHOULDER, L_HIP),
            (R_SHOULDER, R_HIP),
        ],
        positive: vec![L_ELBOW, R_ELBOW, L_WRIST, R_WRIST, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE],
        negative: vec![L_SHOULDER, R_SHOULDER, L_HIP, R_HIP],
    };
    // limbs: 0 left arm, 1 right arm, 2 left torso, 3 right torso, 4 left leg, 5 right leg
    let limbs = ScaleGraph {
        scale: Scale::Limbs,
        node_names: vec!["left_arm", "right_arm", "left_torso", "right_torso", "left_leg", "right_leg"],
        edges: vec![(0, 2), (1, 3), (4, 2), (5, 3), (2, 3)],
        positive: vec![0, 1, 4, 5],
        negative: vec![2, 3],
    };
    let bodyparts = ScaleGraph {
        scale: Scale::Bodyparts,
        node_names: vec!["arms", "torso", "legs"],
        edges: vec![(0, 1), (2, 1)],
        positive: vec![0, 2],
        negative: vec![1],
    };
    let joints_to_limbs = PoolMap {
        from: Scale::Joints,
        to: Scale::Limbs,
        pairs: vec![
            ((L_ELBOW, L_WRIST), 0),
            ((R_ELBOW, R_WRIST), 1),
            ((L_SHOULDER, L_HIP), 2),
            ((R_SHOULDER, R_HIP), 3),
            ((L_KNEE, L_ANKLE), 4),
            ((R_KNEE, R_ANKLE), 5),
        ],
    };
    let limbs_to_bodyparts = PoolMap {
        from: Scale::Limbs,
        to: Scale::Bodyparts,
        pairs: vec![((0, 1), 0), ((2, 3), 1), ((4, 5), 2)],
    };
    PyramidGraph { joints, limbs, bodyparts, joints_to_limbs, limbs_to_bodyparts }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Uniform,
    Distance,
    Spatial,
    GaitTemporal,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Uniform, Strategy::Distance, Strategy::Spatial, Strategy::GaitTemporal];

    pub fn subsets(self) -> usize {
        match self {
            Strategy::Uniform => 1,
            Strategy::Distance => 2,
            Strategy::Spatial | Strategy::GaitTemporal => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Distance => "distance",
            Strategy::Spatial => "spatial",
            Strategy::GaitTemporal => "gait_temporal",
        }
    }

    /// Whether labels depend on per-frame coordinates.
    pub fn is_dynamic(self) -> bool {
        self == Strategy::Spatial
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown partition strategy '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelfLoop {
    /// `A_k + I` for every subset.
    EverySubset,
    /// `A_0 + I`, other subsets without the identity.
    SelfSubsetOnly,
}

/// Subset index for each (root, member) pair of the neighbor set `N(v) ∪ {v}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionLabeling {
    pub strategy: Strategy,
    pub k: usize,
    n: usize,
    labels: Vec<Option<u8>>,
}

impl PartitionLabeling {
    /// Subset of `member` relative to `root`, `None` when not adjacent.
    pub fn label(&self, root: usize, member: usize) -> Option<usize> {
        self.labels[root * self.n + member].map(usize::from)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }
}

/// Tolerance under which two distances to the gravity center count as equal.
const EQUIDISTANT_TOL: f64 = 1e-9;

/// Labels every member of every neighbor set. `coords` are per-node 2D
/// positions of one frame and are required by [`Strategy::Spatial`].
pub fn partition_neighbors(
    graph: &ScaleGraph,
    strategy: Strategy,
    coords: Option<&[[f64; 2]]>,
) -> Result<PartitionLabeling> {
    let n = graph.node_count();
    let radius: Option<Vec<f64>> = match (strategy, coords) {
        (Strategy::Spatial, None) => {
            return Err(Error::Config("spatial partitioning needs node coordinates".into()))
        }
        (Strategy::Spatial, Some(c)) => {
            if c.len() != n {
                return Err(crate::error::dim_err!("{} coordinates for {} nodes", c.len(), n));
            }
            let gx = c.iter().map(|p| p[0]).sum::<f64>() / n as f64;
            let gy = c.iter().map(|p| p[1]).sum::<f64>() / n as f64;
            Some(c.iter().map(|p| (p[0] - gx).hypot(p[1] - gy)).collect())
        }
        _ => None,
    };
    let mut labels = vec![None; n * n];
    for v in 0..n {
        labels[v * n + v] = Some(0u8);
        for u in graph.neighbors(v) {
            let l = match strategy {
                Strategy::Uniform => 0,
                Strategy::Distance => 1,
                Strategy::Spatial => {
                    let r = radius.as_ref().expect("radius computed");
                    let (ru, rv) = (r[u], r[v]);
                    if (ru - rv).abs() <= EQUIDISTANT_TOL * (1.0 + rv.abs()) {
                        0
                    } else if ru < rv {
                        1
                    } else {
                        2
                    }
                }
                Strategy::GaitTemporal => {
                    if graph.is_positive(u) {
                        1
                    } else {
                        2
                    }
                }
            };
            labels[v * n + u] = Some(l);
        }
    }
    Ok(PartitionLabeling { strategy, k: strategy.subsets(), n, labels })
}

/// Unnormalized subset matrices `A_k` (diagonal excluded), each `N×N` row-major.
pub fn subset_matrices(labeling: &PartitionLabeling) -> Vec<Vec<f64>> {
    let n = labeling.n;
    let mut out = vec![vec![0.0; n * n]; labeling.k];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if let Some(k) = labeling.label(i, j) {
                out[k][i * n + j] = 1.0;
            }
        }
    }
    out
}

/// `A_k` plus the identity where `self_loop` asks for it.
pub fn subset_bases(labeling: &PartitionLabeling, self_loop: SelfLoop) -> Vec<Vec<f64>> {
    let n = labeling.n;
    let mut out = subset_matrices(labeling);
    for (k, m) in out.iter_mut().enumerate() {
        if k == 0 || self_loop == SelfLoop::EverySubset {
            for i in 0..n {
                m[i * n + i] += 1.0;
            }
        }
    }
    out
}

/// `D^-1/2 M D^-1/2` with `D_ii = Σ_j M_ij + 1e-6`.
pub fn sym_normalize_dense(m: &[f64], n: usize) -> Vec<f64> {
    let inv: Vec<f64> = (0..n)
        .map(|i| 1.0 / (m[i * n..(i + 1) * n].iter().sum::<f64>() + DEGREE_GUARD).sqrt())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[i] * m[i * n + j] * inv[j];
        }
    }
    out
}

/// Normalized adjacency subsets, one `N×N` tensor per subset.
pub fn normalized_adjacency(labeling: &PartitionLabeling, self_loop: SelfLoop) -> Vec<Tensor> {
    let n = labeling.n;
    subset_bases(labeling, self_loop)
        .iter()
        .map(|m| Tensor::new(&[n, n], sym_normalize_dense(m, n)).expect("adjacency shape"))
        .collect()
}

/// Edge-importance matrices, all ones, one per subset.
pub fn edge_importance_init(graph: &ScaleGraph, k: usize) -> Vec<Tensor> {
    let n = graph.node_count();
    (0..k).map(|_| Tensor::ones(&[n, n])).collect()
}

/// Frontal standing pose in image coordinates (y down), used where spatial
/// partitioning needs coordinates without a sequence.
pub fn rest_pose() -> [[f64; 2]; NUM_JOINTS] {
    [
        [-10.0, 0.0],
        [10.0, 0.0],
        [-12.0, 15.0],
        [12.0, 15.0],
        [-13.0, 30.0],
        [13.0, 30.0],
        [-6.0, 30.0],
        [6.0, 30.0],
        [-6.0, 52.0],
        [6.0, 52.0],
        [-6.0, 74.0],
        [6.0, 74.0],
    ]
}

/// Node positions of scale `s` from joint positions, by pair averaging.
pub fn scale_coords(pyramid: &PyramidGraph, s: Scale, joints: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let m = pyramid.joint_pool_matrix(s);
    let n = s.node_count();
    (0..n)
        .map(|i| {
            let row = &m.data()[i * NUM_JOINTS..(i + 1) * NUM_JOINTS];
            let mut p = [0.0, 0.0];
            for (w, q) in row.iter().zip(joints) {
                p[0] += w * q[0];
                p[1] += w * q[1];
            }
            p
        })
        .collect()
}

/// CSV dump of every subset for one scale and strategy: a `scale,strategy,k`
/// header line before each dense matrix.
pub fn adjacency_csv(pyramid: &PyramidGraph, s: Scale, strategy: Strategy, self_loop: SelfLoop) -> Result<String> {
    let g = pyramid.scale(s);
    let coords = scale_coords(pyramid, s, &rest_pose());
    let labeling = partition_neighbors(g, strategy, Some(&coords))?;
    let n = g.node_count();
    let mut out = String::new();
    for (k, m) in normalized_adjacency(&labeling, self_loop).iter().enumerate() {
        out.push_str("scale,strategy,k\n");
        out.push_str(&format!("{},{},{}\n", s, strategy, k));
        for i in 0..n {
            let row: Vec<String> = m.data()[i * n..(i + 1) * n].iter().map(|v| format!("{v:.12}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    Ok(out)
}
