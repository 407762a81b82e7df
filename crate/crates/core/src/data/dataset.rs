//! On-disk dataset layout and synthetic dataset generation.
//!
//! `<root>/<id:03>/<cond>-<seq:02>/<view:03>/data.kpm|data.sil` with a root
//! `manifest.csv` listing `id,cond,seq,view,T` per sequence.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::format::{read_kpm, read_sil, write_kpm, write_sil};
use super::generator::{generate_identity, render_walk, Condition, IdentityParams, WalkParams};
use super::render::render_silhouettes;
use super::{KeypointsMatrix, SilhouetteSequence};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,cond,seq,view,T";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entry {
    pub id: usize,
    pub condition: Condition,
    /// 1-based sequence number within the condition.
    pub seq: usize,
    pub view: u32,
    pub frames: usize,
}

impl Entry {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{:03}", self.id))
            .join(format!("{}-{:02}", self.condition.dir_name(), self.seq))
            .join(format!("{:03}", self.view))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub keypoints: KeypointsMatrix,
    pub silhouettes: SilhouetteSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub ids: usize,
    pub seed: u64,
    pub frames: usize,
    pub views: Vec<u32>,
    pub nm: usize,
    pub bg: usize,
    pub cl: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { ids: 20, seed: 0, frames: 40, views: (0..11).map(|i| i * 18).collect(), nm: 6, bg: 2, cl: 2 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids == 0 {
            return Err(Error::Config("dataset needs at least one identity".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Config("dataset needs at least one view".into()));
        }
        if self.views.iter().any(|&v| v > 999) {
            return Err(Error::Config("views are degrees below 1000".into()));
        }
        if self.nm > 99 || self.bg > 99 || self.cl > 99 {
            return Err(Error::Config("at most 99 sequences per condition".into()));
        }
        Ok(())
    }

    pub fn count(&self, c: Condition) -> usize {
        match c {
            Condition::Nm => self.nm,
            Condition::Bg => self.bg,
            Condition::Cl => self.cl,
        }
    }

    /// Every entry, ordered by identity, condition, sequence and view.
    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for id in 0..self.ids {
            for c in Condition::ALL {
                for seq in 1..=self.count(c) {
                    for &view in &self.views {
                        out.push(Entry { id, condition: c, seq, view, frames: self.frames });
                    }
                }
            }
        }
        out
    }

    pub fn identity(&self, id: usize) -> IdentityParams {
        generate_identity(Rng::new(self.seed, 0x1000 + id as u64).next_u64())
    }

    fn walk_rng(&self, id: usize, c: Condition, seq: usize) -> Rng {
        Rng::new(self.seed, ((id as u64) << 16) | (c.code() << 8) | seq as u64)
    }

    /// All views of one walk. Walk-level variation is shared across views;
    /// image offset and noise are drawn per view.
    pub fn generate_walk(&self, id: usize, c: Condition, seq: usize) -> Result<Vec<(Entry, Sequence)>> {
        let ident = self.identity(id);
        let mut rng = self.walk_rng(id, c, seq);
        let walk = WalkParams::sample(c, &mut rng);
        let mut out = Vec::with_capacity(self.views.len());
        for &view in &self.views {
            let mut vr = rng.fork(view as u64);
            let keypoints = render_walk(&ident, &walk, view as f64, self.frames, &mut vr)?;
            let silhouettes = render_silhouettes(&keypoints, &ident, c)?;
            let entry = Entry { id, condition: c, seq, view, frames: self.frames };
            out.push((entry, Sequence { keypoints, silhouettes }));
        }
        Ok(out)
    }

    /// Whole dataset in memory, in [`GenConfig::entries`] order.
    pub fn generate(&self) -> Result<Vec<(Entry, Sequence)>> {
        self.validate()?;
        let walks: Vec<(usize, Condition, usize)> = (0..self.ids)
            .flat_map(|id| Condition::ALL.into_iter().flat_map(move |c| (1..=self.count(c)).map(move |s| (id, c, s))))
            .collect();
        let parts: Vec<Vec<(Entry, Sequence)>> =
            walks.par_iter().map(|&(id, c, s)| self.generate_walk(id, c, s)).collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Generates and writes the dataset under `root`.
    pub fn write(&self, root: &Path) -> Result<DatasetIndex> {
        self.validate()?;
        let walks: Vec<(usize, Condition, usize)> = (0..self.ids)
            .flat_map(|id| Condition::ALL.into_iter().flat_map(move |c| (1..=self.count(c)).map(move |s| (id, c, s))))
            .collect();
        walks.par_iter().try_for_each(|&(id, c, s)| -> Result<()> {
            for (entry, seq) in self.generate_walk(id, c, s)? {
                write_sequence(root, &entry, &seq)?;
            }
            Ok(())
        })?;
        let index = DatasetIndex { root: root.to_path_buf(), entries: self.entries() };
        index.write_manifest()?;
        Ok(index)
    }
}

pub fn write_sequence(root: &Path, entry: &Entry, seq: &Sequence) -> Result<()> {
    if seq.keypoints.frames() != entry.frames || seq.silhouettes.frames() != entry.frames {
        return Err(Error::Format(format!("sequence length does not match entry {:?}", entry)));
    }
    let dir = entry.dir(root);
    fs::create_dir_all(&dir)?;
    write_kpm(&dir.join("data.kpm"), &seq.keypoints)?;
    write_sil(&dir.join("data.sil"), &seq.silhouettes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl DatasetIndex {
    pub fn manifest_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{},{}\n", e.id, e.condition.dir_name(), e.seq, e.view, e.frames));
        }
        s
    }

    pub fn write_manifest(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.root.join(MANIFEST), self.manifest_text())?;
        Ok(())
    }

    /// Reads the manifest and checks that every listed file exists and that
    /// identities are dense from 0.
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST))
            .map_err(|e| Error::Load(format!("cannot read {}: {e}", root.join(MANIFEST).display())))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::Format(format!("manifest header must be '{MANIFEST_HEADER}'")));
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("manifest line {}: '{line}'", n + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let entry = Entry {
                id: f[0].parse().map_err(|_| bad())?,
                condition: f[1].parse().map_err(|_| bad())?,
                seq: f[2].parse().map_err(|_| bad())?,
                view: f[3].parse().map_err(|_| bad())?,
                frames: f[4].parse().map_err(|_| bad())?,
            };
            let dir = entry.dir(root);
            for name in ["data.kpm", "data.sil"] {
                if !dir.join(name).is_file() {
                    return Err(Error::Load(format!("missing {}", dir.join(name).display())));
                }
            }
            entries.push(entry);
        }
        let index = DatasetIndex { root: root.to_path_buf(), entries };
        let n = index.num_identities();
        for id in 0..n {
            if !index.entries.iter().any(|e| e.id == id) {
                return Err(Error::Format(format!("identities are not dense: {id} is missing")));
            }
        }
        Ok(index)
    }

    pub fn num_identities(&self) -> usize {
        self.entries.iter().map(|e| e.id + 1).max().unwrap_or(0)
    }

    pub fn read(&self, entry: &Entry) -> Result<Sequence> {
        let dir = entry.dir(&self.root);
        let keypoints = read_kpm(&dir.join("data.kpm"))?;
        let silhouettes = read_sil(&dir.join("data.sil"))?;
        if keypoints.frames() != entry.frames || silhouettes.frames() != entry.frames {
            return Err(Error::Format(format!("{} does not hold {} frames", dir.display(), entry.frames)));
        }
        Ok(Sequence { keypoints, silhouettes })
    }

    /// Reads the given entries in order, in parallel.
    pub fn read_all(&self, entries: &[Entry]) -> Result<Vec<Sequence>> {
        entries.par_iter().map(|e| self.read(e)).collect()
    }
}
