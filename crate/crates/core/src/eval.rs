//! Gallery/probe retrieval evaluation.
//!
//! Every probe is matched against each gallery view separately; accuracy for
//! a (condition, probe view) cell averages over gallery views, skipping the
//! probe's own view unless asked otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Condition, Entry};
use crate::error::{dim_err, Error, Result};

/// Features of one sequence: `parts` rows of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub id: usize,
    pub condition: Condition,
    pub seq: usize,
    pub view: u32,
    pub parts: usize,
    pub data: Vec<f64>,
}

impl Embedding {
    pub fn new(entry: &Entry, parts: usize, data: Vec<f64>) -> Result<Self> {
        if parts == 0 || data.is_empty() || data.len() % parts != 0 {
            return Err(dim_err!("{} values do not split into {} parts", data.len(), parts));
        }
        Ok(Self { id: entry.id, condition: entry.condition, seq: entry.seq, view: entry.view, parts, data })
    }

    pub fn dim(&self) -> usize {
        self.data.len() / self.parts
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub items: Vec<Embedding>,
}

impl EmbeddingSet {
    pub fn new(items: Vec<Embedding>) -> Result<Self> {
        if let Some(first) = items.first() {
            if items.iter().any(|e| e.parts != first.parts || e.data.len() != first.data.len()) {
                return Err(dim_err!("embeddings in a set must share their shape"));
            }
        }
        Ok(Self { items })
    }

    pub fn views(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.items.iter().map(|e| e.view).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Splits into the gallery (NM sequences `1..=gallery_nm`) and the rest.
    pub fn split_gallery(self, gallery_nm: usize) -> (EmbeddingSet, EmbeddingSet) {
        let (g, p) = self.items.into_iter().partition(|e| e.condition == Condition::Nm && e.seq <= gallery_nm);
        (EmbeddingSet { items: g }, EmbeddingSet { items: p })
    }
}

/// Mean over parts of the Euclidean distance between matching part rows.
pub fn part_distance(q: &[f64], g: &[f64], parts: usize) -> Result<f64> {
    if q.len() != g.len() || parts == 0 || q.len() % parts != 0 {
        return Err(dim_err!("part_distance between {} and {} values in {} parts", q.len(), g.len(), parts));
    }
    let d = q.len() / parts;
    let total: f64 = q
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(total / parts as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankCell {
    pub condition: Condition,
    pub probe_view: u32,
    /// Percent of probes retrieved within rank k, averaged over gallery views.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub k: usize,
    pub cells: Vec<RankCell>,
}

impl RankTable {
    /// Mean accuracy over probe views for one condition.
    pub fn mean(&self, condition: Condition) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.condition == condition).map(|c| c.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<Condition> = self.cells.iter().map(|c| c.condition).collect();
        c.dedup();
        c
    }

    /// `condition,probe_view,accuracy` rows, then one `mean` row per condition.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,probe_view,accuracy\n");
        for c in &self.cells {
            writeln!(s, "{},{},{:.4}", c.condition, c.probe_view, c.accuracy).unwrap();
        }
        for cond in self.conditions() {
            writeln!(s, "{},mean,{:.4}", cond, self.mean(cond).unwrap()).unwrap();
        }
        s
    }
}

/// Rank-k accuracy per (condition, probe view). Nearest neighbors are ranked
/// by distance with ties broken by gallery order.
pub fn rank_k_table(gallery: &EmbeddingSet, probe: &EmbeddingSet, k: usize, exclude_identical_view: bool) -> Result<RankTable> {
    if k == 0 {
        return Err(Error::Config("rank k must be at least 1".into()));
    }
    let Some(first) = gallery.items.first() else {
        return Err(Error::Protocol("gallery is empty".into()));
    };
    let (parts, len) = (first.parts, first.data.len());
    if probe.items.iter().chain(&gallery.items).any(|e| e.parts != parts || e.data.len() != len) {
        return Err(dim_err!("gallery and probe embeddings differ in shape"));
    }
    let gviews = gallery.views();
    if let Some(p) = probe.items.iter().find(|p| gviews.binary_search(&p.view).is_err()) {
        return Err(Error::Protocol(format!("gallery has no sequences in probe view {}", p.view)));
    }
    let by_view: Vec<Vec<&Embedding>> =
        gviews.iter().map(|&v| gallery.items.iter().filter(|e| e.view == v).collect()).collect();

    // hits[p][v]: whether probe p is retrieved within rank k in gallery view v
    let hits: Vec<Vec<Option<bool>>> = probe
        .items
        .par_iter()
        .map(|p| {
            gviews
                .iter()
                .zip(&by_view)
                .map(|(&gv, members)| {
                    if exclude_identical_view && gv == p.view {
                        return Ok(None);
                    }
                    let mut d: Vec<(f64, usize)> = members
                        .iter()
                        .enumerate()
                        .map(|(i, g)| Ok((part_distance(&p.data, &g.data, parts)?, i)))
                        .collect::<Result<_>>()?;
                    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    Ok(Some(d.iter().take(k).any(|&(_, i)| members[i].id == p.id)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut cells: BTreeMap<(Condition, u32), Vec<(usize, usize)>> = BTreeMap::new();
    for (p, h) in probe.items.iter().zip(&hits) {
        let per_view = cells.entry((p.condition, p.view)).or_insert_with(|| vec![(0, 0); gviews.len()]);
        for (slot, hit) in per_view.iter_mut().zip(h) {
            if let Some(hit) = hit {
                slot.0 += *hit as usize;
                slot.1 += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for ((condition, probe_view), per_view) in cells {
        let accs: Vec<f64> =
            per_view.iter().filter(|(_, n)| *n > 0).map(|&(c, n)| 100.0 * c as f64 / n as f64).collect();
        if accs.is_empty() {
            return Err(Error::Protocol(format!("probe view {probe_view} has no gallery view to match against")));
        }
        out.push(RankCell { condition, probe_view, accuracy: accs.iter().sum::<f64>() / accs.len() as f64 });
    }
    Ok(RankTable { k, cells: out })
}
