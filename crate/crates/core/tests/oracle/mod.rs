//! Brute-force oracles shared by the core tests and the acceptance suite.
#![allow(dead_code)]

use bifusion::data::{Condition, Entry};
use bifusion::eval::{Embedding, EmbeddingSet};
use bifusion::graph::{ScaleGraph, Scale, Strategy};
use bifusion::Rng;

pub fn edges_by_name(scale: Scale) -> Vec<(&'static str, &'static str)> {
    match scale {
        Scale::Joints => vec![
            ("left_shoulder", "left_elbow"),
            ("left_elbow", "left_wrist"),
            ("right_shoulder", "right_elbow"),
            ("right_elbow", "right_wrist"),
            ("left_hip", "left_knee"),
            ("left_knee", "left_ankle"),
            ("right_hip", "right_knee"),
            ("right_knee", "right_ankle"),
            ("left_shoulder", "right_shoulder"),
            ("left_hip", "right_hip"),
            ("left_shoulder", "left_hip"),
            ("right_shoulder", "right_hip"),
        ],
        Scale::Limbs => vec![
            ("left_arm", "left_torso"),
            ("right_arm", "right_torso"),
            ("left_leg", "left_torso"),
            ("right_leg", "right_torso"),
            ("left_torso", "right_torso"),
        ],
        Scale::Bodyparts => vec![("arms", "torso"), ("legs", "torso")],
    }
}

pub fn distal(name: &str) -> bool {
    ["elbow", "wrist", "knee", "ankle", "arm", "leg"].iter().any(|s| name.contains(s))
}

/// Dense oracle built straight from the named edge list.
pub fn adjacency_oracle(g: &ScaleGraph, strategy: Strategy, coords: &[[f64; 2]], every: bool) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let idx = |name: &str| g.node_names.iter().position(|x| *x == name).unwrap();
    let mut adj = vec![vec![false; n]; n];
    for (a, b) in edges_by_name(g.scale) {
        adj[idx(a)][idx(b)] = true;
        adj[idx(b)][idx(a)] = true;
    }
    let k = match strategy {
        Strategy::Uniform => 1,
        Strategy::Distance => 2,
        _ => 3,
    };
    let cx: f64 = coords.iter().map(|c| c[0]).sum::<f64>() / n as f64;
    let cy: f64 = coords.iter().map(|c| c[1]).sum::<f64>() / n as f64;
    let r = |i: usize| ((coords[i][0] - cx).powi(2) + (coords[i][1] - cy).powi(2)).sqrt();
    let mut mats = vec![vec![0.0; n * n]; k];
    for i in 0..n {
        for j in 0..n {
            if !adj[i][j] {
                continue;
            }
            let s = match strategy {
                Strategy::Uniform => 0,
                Strategy::Distance => 1,
                Strategy::Spatial => {
                    if r(j) == r(i) {
                        0
                    } else if r(j) < r(i) {
                        1
                    } else {
                        2
                    }
                }
                Strategy::GaitTemporal => {
                    if distal(g.node_names[j]) {
                        1
                    } else {
                        2
                    }
                }
            };
            mats[s][i * n + j] = 1.0;
        }
    }
    for (s, m) in mats.iter_mut().enumerate() {
        if s == 0 || every {
            for i in 0..n {
                m[i * n + i] += 1.0;
            }
        }
    }
    mats.iter()
        .map(|m| {
            let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i * n + j]).sum::<f64>() + 1e-6).collect();
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = m[i * n + j] / (deg[i].sqrt() * deg[j].sqrt());
                }
            }
            out
        })
        .collect()
}

pub fn random_coords(n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.range(-30.0, 30.0), rng.range(-40.0, 40.0)]).collect()
}

pub fn emb(id: usize, condition: Condition, seq: usize, view: u32, parts: usize, data: Vec<f64>) -> Embedding {
    Embedding::new(&Entry { id, condition, seq, view, frames: 1 }, parts, data).unwrap()
}

/// Double-loop oracle: for each probe and gallery view, counts gallery entries
/// that beat the best same-identity entry, ordering by (distance, position).
pub fn rank_oracle(gallery: &EmbeddingSet, probe: &EmbeddingSet, k: usize) -> Vec<(Condition, u32, f64)> {
    let dist = |a: &Embedding, b: &Embedding| {
        let d = a.dim();
        let mut total = 0.0;
        for n in 0..a.parts {
            let mut s = 0.0;
            for i in 0..d {
                let x = a.data[n * d + i] - b.data[n * d + i];
                s += x * x;
            }
            total += s.sqrt();
        }
        total / a.parts as f64
    };
    let mut gviews: Vec<u32> = gallery.items.iter().map(|e| e.view).collect();
    gviews.sort();
    gviews.dedup();
    let mut keys: Vec<(Condition, u32)> = probe.items.iter().map(|p| (p.condition, p.view)).collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (cond, pv) in keys {
        let mut accs = Vec::new();
        for &gv in &gviews {
            if gv == pv {
                continue;
            }
            let members: Vec<&Embedding> = gallery.items.iter().filter(|g| g.view == gv).collect();
            let (mut hit, mut total) = (0, 0);
            for p in probe.items.iter().filter(|p| p.condition == cond && p.view == pv) {
                total += 1;
                let mut best: Option<(f64, usize)> = None;
                for (i, g) in members.iter().enumerate() {
                    if g.id == p.id {
                        let d = dist(p, g);
                        if best.map_or(true, |b| d < b.0) {
                            best = Some((d, i));
                        }
                    }
                }
                let Some((bd, bi)) = best else { continue };
                let mut ahead = 0;
                for (i, g) in members.iter().enumerate() {
                    let d = dist(p, g);
                    if d < bd || (d == bd && i < bi) {
                        ahead += 1;
                    }
                }
                if ahead < k {
                    hit += 1;
                }
            }
            accs.push(100.0 * hit as f64 / total as f64);
        }
        out.push((cond, pv, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    out
}

pub fn random_instance(rng: &mut Rng) -> (EmbeddingSet, EmbeddingSet) {
    let ids = 2 + rng.below(6);
    let views: Vec<u32> = (0..2 + rng.below(3)).map(|v| v as u32 * 18).collect();
    let parts = 1 + rng.below(3);
    let dim = 1 + rng.below(4);
    let centers: Vec<Vec<f64>> = (0..ids).map(|_| (0..parts * dim).map(|_| rng.normal()).collect()).collect();
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for id in 0..ids {
        for &view in &views {
            for seq in 1..=2 {
                let data = centers[id].iter().map(|c| c + 0.8 * rng.normal()).collect();
                gallery.push(emb(id, Condition::Nm, seq, view, parts, data));
            }
            for cond in [Condition::Nm, Condition::Cl] {
                let data = centers[id].iter().map(|c| c + 0.8 * rng.normal()).collect();
                probe.push(emb(id, cond, 5, view, parts, data));
            }
        }
    }
    rng.shuffle(&mut gallery);
    rng.shuffle(&mut probe);
    (EmbeddingSet::new(gallery).unwrap(), EmbeddingSet::new(probe).unwrap())
}

