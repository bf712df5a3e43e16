//! Compose marginal probability maps and neuron labels into directed synapse
//! candidates.
//!
//! Rules run in a fixed order; each stage only removes voxels, except rule 4,
//! which repartitions the surviving voxels by flanking neuron pair.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{distance_to_vesicles, squared_edt};
use crate::segmentation::{Connectivity, Grid3};
use crate::volume::{VolumeError, VolumeKind, VoxelGrid};

#[derive(Debug, Error)]
pub enum CompositionError {
    #[error("expected a {expected:?} volume for {what}, got {actual:?}")]
    WrongKind { what: &'static str, expected: VolumeKind, actual: VolumeKind },
    #[error("invalid composition config: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed synapse record on line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, CompositionError>;

/// Rule parameters. Probabilities are on the 0..=255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    /// 0..=256; 256 rejects everything.
    pub cleft_threshold: u16,
    pub max_vesicle_distance_nm: f64,
    pub min_2d_size: usize,
    pub min_3d_size: usize,
    pub min_slice_persistence: usize,
    pub vesicle_search_radius_nm: f64,
    pub min_vesicle_voxels: usize,
    pub membrane_band_threshold: u8,
    /// Vesicle probability at or above which a voxel counts as vesicle.
    pub vesicle_threshold: u8,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            cleft_threshold: 200,
            max_vesicle_distance_nm: 200.0,
            min_2d_size: 40,
            min_3d_size: 150,
            min_slice_persistence: 2,
            vesicle_search_radius_nm: 300.0,
            min_vesicle_voxels: 20,
            membrane_band_threshold: 100,
            vesicle_threshold: 128,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CompositionError::Config(m.into()));
        if self.cleft_threshold > 256 {
            return bad("cleft_threshold must be at most 256");
        }
        if !(self.max_vesicle_distance_nm >= 0.0) {
            return bad("max_vesicle_distance_nm must be non-negative");
        }
        if !(self.vesicle_search_radius_nm > 0.0) || !self.vesicle_search_radius_nm.is_finite() {
            return bad("vesicle_search_radius_nm must be positive and finite");
        }
        Ok(())
    }
}

/// Which flank is pre-synaptic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Direction {
    Directed { pre: u32, post: u32 },
    /// Equal vesicle support on both flanks.
    Undirected,
}

/// A connected set of voxels flagged as one synapse.
#[derive(Debug, Clone, PartialEq)]
pub struct SynapseCandidate {
    pub id: u32,
    /// Sorted voxel indices (x-fastest).
    pub voxels: Vec<usize>,
    /// Mean cleft probability, 0..=255.
    pub score: f64,
    /// Flanking neuron labels, `pair.0 < pair.1`.
    pub pair: (u32, u32),
    /// Nearby vesicle voxels inside `pair.0` and `pair.1`.
    pub vesicle_counts: (usize, usize),
    pub direction: Direction,
    pub centroid_nm: [f64; 3],
}

impl SynapseCandidate {
    /// `(pre, post)`, falling back to the flank pair when undirected.
    pub fn endpoints(&self) -> (u32, u32) {
        match self.direction {
            Direction::Directed { pre, post } => (pre, post),
            Direction::Undirected => self.pair,
        }
    }

    pub fn is_directed(&self) -> bool {
        matches!(self.direction, Direction::Directed { .. })
    }
}

/// Surviving voxels and candidates after one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub voxels: usize,
    /// `None` before candidates exist.
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub candidates: Vec<SynapseCandidate>,
    pub audit: Vec<AuditEntry>,
    /// Rule 4 voxels with fewer than two flanking labels.
    pub dropped_unflanked: usize,
}

/// Voxels sharing a flanking pair before size checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGroup {
    pub pair: (u32, u32),
    pub voxels: Vec<usize>,
}

fn expect_kind(g: &VoxelGrid, what: &'static str, kind: VolumeKind) -> Result<()> {
    if g.kind() != kind {
        return Err(CompositionError::WrongKind { what, expected: kind, actual: g.kind() });
    }
    Ok(())
}

/// Distinct non-zero labels in the 3x3x3 block around `i`, with counts,
/// ordered by label.
fn neighborhood_labels(grid: &Grid3, labels: &[u32], i: usize, out: &mut Vec<(u32, usize)>) {
    out.clear();
    let mut add = |l: u32| {
        if l == 0 {
            return;
        }
        match out.iter_mut().find(|(k, _)| *k == l) {
            Some((_, c)) => *c += 1,
            None => out.push((l, 1)),
        }
    };
    add(labels[i]);
    grid.for_neighbors(i, |j| add(labels[j]));
    out.sort_unstable();
}

/// Rule 1: restrict to the membrane band.
///
/// Keeps voxels of non-zero cleft probability whose membrane probability
/// reaches `membrane_band_threshold` or whose 3x3x3 block touches two or
/// more neuron labels.
pub fn rule1_membrane_mask(
    cleft_prob: &VoxelGrid,
    membrane_prob: &VoxelGrid,
    labels: &VoxelGrid,
    cfg: &CompositionConfig,
) -> Result<Vec<bool>> {
    cleft_prob.same_shape(membrane_prob)?;
    cleft_prob.same_shape(labels)?;
    let (c, m, l) = (cleft_prob.bytes()?, membrane_prob.bytes()?, labels.labels()?);
    let grid = Grid3::new(labels.dims(), Connectivity::TwentySix);
    let mut scratch = Vec::new();
    Ok((0..c.len())
        .map(|i| {
            if c[i] == 0 {
                return false;
            }
            if m[i] >= cfg.membrane_band_threshold {
                return true;
            }
            neighborhood_labels(&grid, l, i, &mut scratch);
            scratch.len() >= 2
        })
        .collect())
}

/// Rule 2: drop voxels farther than `max_vesicle_distance_nm` from any
/// vesicle voxel.
pub fn rule2_vesicle_proximity(mask: &[bool], distance_nm: &[f64], cfg: &CompositionConfig) -> Vec<bool> {
    mask.iter().zip(distance_nm).map(|(&m, &d)| m && d <= cfg.max_vesicle_distance_nm).collect()
}

/// Rule 3: keep voxels with cleft probability at or above the threshold.
pub fn rule3_threshold(cleft_prob: &[u8], mask: &[bool], cfg: &CompositionConfig) -> Vec<bool> {
    mask.iter().zip(cleft_prob).map(|(&m, &p)| m && p as u16 >= cfg.cleft_threshold).collect()
}

/// Rule 4: assign each voxel its flanking neuron pair and split into
/// 26-connected groups with a single pair each.
///
/// The pair is the two labels present in the voxel's 3x3x3 block; with more
/// than two, the two with most voxels in the block (ties to the smaller
/// label). Returns the groups in scan order and the number of voxels dropped
/// for touching fewer than two labels.
pub fn rule4_split_by_pair(mask: &[bool], labels: &VoxelGrid) -> Result<(Vec<PairGroup>, usize)> {
    let l = labels.labels()?;
    if mask.len() != l.len() {
        return Err(VolumeError::LengthMismatch { expected: l.len(), actual: mask.len() }.into());
    }
    let grid = Grid3::new(labels.dims(), Connectivity::TwentySix);
    let mut pair_of: Vec<Option<(u32, u32)>> = vec![None; mask.len()];
    let mut dropped = 0;
    let mut scratch = Vec::new();
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        neighborhood_labels(&grid, l, i, &mut scratch);
        if scratch.len() < 2 {
            dropped += 1;
            continue;
        }
        scratch.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let (a, b) = (scratch[0].0, scratch[1].0);
        pair_of[i] = Some((a.min(b), a.max(b)));
    }
    let mut seen = vec![false; mask.len()];
    let mut groups = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        let Some(pair) = pair_of[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            grid.for_neighbors(i, |j| {
                if !seen[j] && pair_of[j] == Some(pair) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            });
        }
        voxels.sort_unstable();
        groups.push(PairGroup { pair, voxels });
    }
    Ok((groups, dropped))
}

/// Rule 5: keep groups with at least `min_3d_size` voxels and a run of
/// `min_slice_persistence` consecutive z-slices holding at least
/// `min_2d_size` voxels each.
pub fn rule5_size_persistence(groups: Vec<PairGroup>, dims: [usize; 3], cfg: &CompositionConfig) -> Vec<PairGroup> {
    let plane = dims[0] * dims[1];
    groups
        .into_iter()
        .filter(|g| {
            if g.voxels.len() < cfg.min_3d_size {
                return false;
            }
            let mut per_slice: BTreeMap<usize, usize> = BTreeMap::new();
            for &v in &g.voxels {
                *per_slice.entry(v / plane).or_default() += 1;
            }
            let (mut run, mut best, mut last) = (0usize, 0usize, None::<usize>);
            for (&z, &n) in &per_slice {
                if n < cfg.min_2d_size {
                    run = 0;
                    last = None;
                    continue;
                }
                run = if last.is_some_and(|l| l + 1 == z) { run + 1 } else { 1 };
                last = Some(z);
                best = best.max(run);
            }
            best >= cfg.min_slice_persistence
        })
        .collect()
}

/// Vesicle voxels within `radius_nm` of `voxels`, split by flank label.
pub fn flank_vesicle_counts(
    voxels: &[usize],
    pair: (u32, u32),
    vesicle_mask: &[bool],
    labels: &[u32],
    dims: [usize; 3],
    resolution_nm: [f64; 3],
    radius_nm: f64,
) -> (usize, usize) {
    let grid = Grid3::new(dims, Connectivity::Six);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &v in voxels {
        let p = grid.coords(v);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let reach = [0, 1, 2].map(|a| (radius_nm / resolution_nm[a]).floor() as usize);
    let lo = [0, 1, 2].map(|a| lo[a].saturating_sub(reach[a]));
    let hi = [0, 1, 2].map(|a| (hi[a] + reach[a]).min(dims[a] - 1));
    let bdims = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
    let bgrid = Grid3::new(bdims, Connectivity::Six);
    let mut seeds = vec![false; bgrid.len()];
    for &v in voxels {
        let p = grid.coords(v);
        seeds[bgrid.index([0, 1, 2].map(|a| p[a] - lo[a]))] = true;
    }
    let d2 = squared_edt(&seeds, bdims, resolution_nm);
    let r2 = radius_nm * radius_nm;
    let (mut ca, mut cb) = (0, 0);
    for (j, &dist) in d2.iter().enumerate() {
        if dist > r2 {
            continue;
        }
        let b = bgrid.coords(j);
        let i = grid.index([0, 1, 2].map(|a| b[a] + lo[a]));
        if !vesicle_mask[i] {
            continue;
        }
        if labels[i] == pair.0 {
            ca += 1;
        } else if labels[i] == pair.1 {
            cb += 1;
        }
    }
    (ca, cb)
}

/// Rule 6: keep groups with at least `min_vesicle_voxels` nearby vesicle
/// voxels inside one of the two flanks. Returns survivors with their counts.
pub fn rule6_active(
    groups: Vec<PairGroup>,
    vesicle_mask: &[bool],
    labels: &VoxelGrid,
    cfg: &CompositionConfig,
) -> Result<Vec<(PairGroup, (usize, usize))>> {
    let l = labels.labels()?;
    Ok(groups
        .into_iter()
        .filter_map(|g| {
            let counts = flank_vesicle_counts(
                &g.voxels,
                g.pair,
                vesicle_mask,
                l,
                labels.dims(),
                labels.resolution_nm(),
                cfg.vesicle_search_radius_nm,
            );
            (counts.0.max(counts.1) >= cfg.min_vesicle_voxels).then_some((g, counts))
        })
        .collect())
}

/// The flank with strictly more vesicles is pre-synaptic.
pub fn assign_direction(pair: (u32, u32), counts: (usize, usize)) -> Direction {
    match counts.0.cmp(&counts.1) {
        std::cmp::Ordering::Greater => Direction::Directed { pre: pair.0, post: pair.1 },
        std::cmp::Ordering::Less => Direction::Directed { pre: pair.1, post: pair.0 },
        std::cmp::Ordering::Equal => Direction::Undirected,
    }
}

/// Centroid of a voxel set in nanometres.
pub fn centroid_nm(voxels: &[usize], dims: [usize; 3], resolution_nm: [f64; 3]) -> [f64; 3] {
    let grid = Grid3::new(dims, Connectivity::Six);
    let mut s = [0.0; 3];
    for &v in voxels {
        let p = grid.coords(v);
        for a in 0..3 {
            s[a] += p[a] as f64;
        }
    }
    let n = voxels.len().max(1) as f64;
    [0, 1, 2].map(|a| s[a] / n * resolution_nm[a])
}

/// Run rules 1 to 6 and direction assignment.
pub fn compose(
    cleft_prob: &VoxelGrid,
    vesicle_prob: &VoxelGrid,
    membrane_prob: &VoxelGrid,
    labels: &VoxelGrid,
    cfg: &CompositionConfig,
) -> Result<Composition> {
    cfg.validate()?;
    for (g, what) in [(cleft_prob, "cleft"), (vesicle_prob, "vesicle"), (membrane_prob, "membrane")] {
        expect_kind(g, what, VolumeKind::Probability)?;
        g.same_shape(labels)?;
    }
    expect_kind(labels, "labels", VolumeKind::Labels)?;
    let dims = labels.dims();
    let res = labels.resolution_nm();
    let cleft = cleft_prob.bytes()?;
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let mut audit = vec![AuditEntry { stage: "input".into(), voxels: cleft.iter().filter(|&&p| p > 0).count(), candidates: None }];
    let mut log = |stage: &str, voxels: usize, candidates: Option<usize>| {
        audit.push(AuditEntry { stage: stage.into(), voxels, candidates });
    };

    let m1 = rule1_membrane_mask(cleft_prob, membrane_prob, labels, cfg)?;
    log("rule1_membrane", count(&m1), None);
    let vesicle_mask: Vec<bool> = vesicle_prob.bytes()?.iter().map(|&p| p >= cfg.vesicle_threshold).collect();
    let dist = distance_to_vesicles(&vesicle_mask, dims, res);
    let m2 = rule2_vesicle_proximity(&m1, &dist, cfg);
    log("rule2_vesicle_proximity", count(&m2), None);
    let m3 = rule3_threshold(cleft, &m2, cfg);
    log("rule3_threshold", count(&m3), None);
    let (groups, dropped) = rule4_split_by_pair(&m3, labels)?;
    let voxels = |g: &[PairGroup]| g.iter().map(|g| g.voxels.len()).sum::<usize>();
    log("rule4_split_by_pair", voxels(&groups), Some(groups.len()));
    let groups = rule5_size_persistence(groups, dims, cfg);
    log("rule5_size_persistence", voxels(&groups), Some(groups.len()));
    let active = rule6_active(groups, &vesicle_mask, labels, cfg)?;
    log("rule6_active", active.iter().map(|(g, _)| g.voxels.len()).sum(), Some(active.len()));

    let candidates = active
        .into_iter()
        .enumerate()
        .map(|(k, (g, counts))| {
            let score = g.voxels.iter().map(|&v| cleft[v] as f64).sum::<f64>() / g.voxels.len() as f64;
            SynapseCandidate {
                id: k as u32 + 1,
                score,
                pair: g.pair,
                vesicle_counts: counts,
                direction: assign_direction(g.pair, counts),
                centroid_nm: centroid_nm(&g.voxels, dims, res),
                voxels: g.voxels,
            }
        })
        .collect();
    Ok(Composition { candidates, audit, dropped_unflanked: dropped })
}

/// One line of the synapse JSON-lines export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynapseRecord {
    pub id: u32,
    pub pre: u32,
    pub post: u32,
    /// False when `pre`/`post` is only the flank pair.
    pub directed: bool,
    pub voxel_count: usize,
    pub centroid_nm: [f64; 3],
    pub score: f64,
    pub active_flag: bool,
}

impl From<&SynapseCandidate> for SynapseRecord {
    fn from(c: &SynapseCandidate) -> Self {
        let (pre, post) = c.endpoints();
        SynapseRecord {
            id: c.id,
            pre,
            post,
            directed: c.is_directed(),
            voxel_count: c.voxels.len(),
            centroid_nm: c.centroid_nm,
            score: c.score,
            active_flag: true,
        }
    }
}

pub fn write_records(path: impl AsRef<Path>, records: &[SynapseRecord]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CompositionError::Io { path: path.into(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SynapseRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CompositionError::Io { path: path.into(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| CompositionError::Parse { line: n + 1, message: e.to_string() }))
        .collect()
}

/// Rebuild candidates from exported records and their id volume. Vesicle
/// counts are not exported and come back as zero.
pub fn candidates_from_records(records: &[SynapseRecord], ids: &VoxelGrid) -> Result<Vec<SynapseCandidate>> {
    let mut sets: BTreeMap<u32, Vec<usize>> = voxel_sets(ids)?.into_iter().collect();
    Ok(records
        .iter()
        .map(|r| SynapseCandidate {
            id: r.id,
            voxels: sets.remove(&r.id).unwrap_or_default(),
            score: r.score,
            pair: (r.pre.min(r.post), r.pre.max(r.post)),
            vesicle_counts: (0, 0),
            direction: if r.directed { Direction::Directed { pre: r.pre, post: r.post } } else { Direction::Undirected },
            centroid_nm: r.centroid_nm,
        })
        .collect())
}

/// Label volume holding each candidate's id on its voxels.
pub fn candidates_to_volume(candidates: &[SynapseCandidate], dims: [usize; 3], resolution_nm: [f64; 3]) -> VoxelGrid {
    let mut v = vec![0u32; dims.iter().product()];
    for c in candidates {
        for &i in &c.voxels {
            v[i] = c.id;
        }
    }
    VoxelGrid::from_labels(dims, resolution_nm, v).expect("dims match")
}

/// Voxel sets per id from a synapse id volume, sorted by id.
pub fn voxel_sets(ids: &VoxelGrid) -> Result<Vec<(u32, Vec<usize>)>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ids.labels()?.iter().enumerate() {
        if l != 0 {
            map.entry(l).or_default().push(i);
        }
    }
    Ok(map.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RES: [f64; 3] = [6.0, 6.0, 29.0];

    fn pgrid(dims: [usize; 3], v: Vec<u8>) -> VoxelGrid {
        VoxelGrid::from_u8(dims, RES, VolumeKind::Probability, v).unwrap()
    }

    fn lgrid(dims: [usize; 3], v: Vec<u32>) -> VoxelGrid {
        VoxelGrid::from_labels(dims, RES, v).unwrap()
    }

    /// Two neurons split at x = 10 in a 20x8x4 volume.
    fn halves() -> ([usize; 3], Vec<u32>) {
        let dims = [20, 8, 4];
        let l = (0..640).map(|i| if i % 20 < 10 { 1 } else { 2 }).collect();
        (dims, l)
    }

    fn blob(dims: [usize; 3], xs: std::ops::Range<usize>) -> Vec<u8> {
        (0..dims.iter().product::<usize>()).map(|i| if xs.contains(&(i % dims[0])) { 255 } else { 0 }).collect()
    }

    #[test]
    fn rule1_keeps_interface_drops_interior() {
        let (dims, l) = halves();
        let labels = lgrid(dims, l);
        let cfg = CompositionConfig::default();
        let membrane = pgrid(dims, vec![0; 640]);
        let interior = rule1_membrane_mask(&pgrid(dims, blob(dims, 2..5)), &membrane, &labels, &cfg).unwrap();
        assert!(interior.iter().all(|&b| !b));
        let ribbon = blob(dims, 9..11);
        let kept = rule1_membrane_mask(&pgrid(dims, ribbon.clone()), &membrane, &labels, &cfg).unwrap();
        assert_eq!(kept, ribbon.iter().map(|&p| p > 0).collect::<Vec<_>>());
        let both: Vec<u8> = blob(dims, 2..5).iter().zip(&ribbon).map(|(a, b)| a.max(b).to_owned()).collect();
        let m = rule1_membrane_mask(&pgrid(dims, both), &membrane, &labels, &cfg).unwrap();
        assert_eq!(m, kept);
        // membrane band alone also admits voxels
        let band = rule1_membrane_mask(&pgrid(dims, blob(dims, 2..5)), &pgrid(dims, vec![200; 640]), &labels, &cfg).unwrap();
        assert_eq!(band.iter().filter(|&&b| b).count(), 3 * 8 * 4);
    }

    #[test]
    fn rule2_examples() {
        let cfg = CompositionConfig::default();
        let mask = vec![true; 4];
        let empty = distance_to_vesicles(&[false; 4], [4, 1, 1], RES);
        assert!(rule2_vesicle_proximity(&mask, &empty, &cfg).iter().all(|&b| !b));
        assert_eq!(rule2_vesicle_proximity(&mask, &[0.0; 4], &cfg), mask);
    }

    #[test]
    fn rule3_examples() {
        let p = [0u8, 100, 200, 255];
        let mask = [true, true, true, false];
        let at = |t| rule3_threshold(&p, &mask, &CompositionConfig { cleft_threshold: t, ..Default::default() });
        assert_eq!(at(0), mask);
        assert!(at(256).iter().all(|&b| !b));
        assert_eq!(at(150), vec![false, false, true, false]);
    }

    #[test]
    fn rule4_splits_blob_across_two_interfaces() {
        // three neurons in x: 1 | 2 | 3, a blob covering both interfaces
        let dims = [15, 5, 1];
        let l: Vec<u32> = (0..75).map(|i| 1 + (i % 15) as u32 / 5).collect();
        let mask: Vec<bool> = (0..75).map(|i| (4..11).contains(&(i % 15))).collect();
        let (groups, dropped) = rule4_split_by_pair(&mask, &lgrid(dims, l)).unwrap();
        let pairs: Vec<_> = groups.iter().map(|g| g.pair).collect();
        assert_eq!(pairs, vec![(1, 2), (2, 3)]);
        // columns x = 6..=8 see neuron 2 only
        assert_eq!(dropped, 15);
    }

    #[test]
    fn rule4_single_interface_is_unchanged() {
        let (dims, l) = halves();
        let mask: Vec<bool> = blob(dims, 9..11).iter().map(|&p| p > 0).collect();
        let (groups, dropped) = rule4_split_by_pair(&mask, &lgrid(dims, l)).unwrap();
        assert_eq!((groups.len(), dropped), (1, 0));
        assert_eq!(groups[0].voxels.len(), 64);
    }

    #[test]
    fn rule5_examples() {
        let dims = [20, 20, 5];
        let cfg = CompositionConfig { min_2d_size: 50, min_3d_size: 150, min_slice_persistence: 2, ..Default::default() };
        let slab = |zs: std::ops::Range<usize>, n: usize| PairGroup {
            pair: (1, 2),
            voxels: zs.flat_map(|z| (0..n).map(move |k| z * 400 + k)).collect(),
        };
        assert_eq!(rule5_size_persistence(vec![slab(0..3, 60)], dims, &cfg).len(), 1);
        assert!(rule5_size_persistence(vec![slab(0..1, 1)], dims, &CompositionConfig { min_3d_size: 2, ..cfg.clone() }).is_empty());
        assert!(rule5_size_persistence(vec![slab(0..1, 200)], dims, &cfg).is_empty());
        // two qualifying slices that are not consecutive
        let mut gap = slab(0..1, 100);
        gap.voxels.extend(slab(2..3, 100).voxels);
        assert!(rule5_size_persistence(vec![gap], dims, &cfg).is_empty());
    }

    #[test]
    fn rule6_and_direction() {
        let (dims, l) = halves();
        let labels = lgrid(dims, l.clone());
        let cand = PairGroup { pair: (1, 2), voxels: (0..640).filter(|i| (9..11).contains(&(i % 20))).collect() };
        let cfg = CompositionConfig { min_vesicle_voxels: 5, ..Default::default() };
        assert!(rule6_active(vec![cand.clone()], &[false; 640], &labels, &cfg).unwrap().is_empty());
        let ves: Vec<bool> = (0..640).map(|i| i % 20 == 5).collect();
        let kept = rule6_active(vec![cand], &ves, &labels, &cfg).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].1, (32, 0));
        assert_eq!(assign_direction((1, 2), kept[0].1), Direction::Directed { pre: 1, post: 2 });
        assert_eq!(assign_direction((1, 2), (120, 3)), Direction::Directed { pre: 1, post: 2 });
        assert_eq!(assign_direction((1, 2), (3, 120)), Direction::Directed { pre: 2, post: 1 });
        assert_eq!(assign_direction((1, 2), (7, 7)), Direction::Undirected);
    }

    #[test]
    fn search_radius_bounds_counts() {
        let dims = [40, 1, 1];
        let l: Vec<u32> = (0..40).map(|i| if i < 20 { 1 } else { 2 }).collect();
        let ves = vec![true; 40];
        let near = flank_vesicle_counts(&[19, 20], (1, 2), &ves, &l, dims, RES, 30.0);
        assert_eq!(near, (6, 6));
    }

    #[test]
    fn compose_zero_cleft_is_empty() {
        let (dims, l) = halves();
        let z = pgrid(dims, vec![0; 640]);
        let out = compose(&z, &z, &z, &lgrid(dims, l), &CompositionConfig::default()).unwrap();
        assert!(out.candidates.is_empty());
    }

    #[test]
    fn compose_finds_planted_synapse() {
        let (dims, l) = halves();
        let cleft = pgrid(dims, blob(dims, 9..11));
        let ves = pgrid(dims, blob(dims, 4..6));
        let memb = pgrid(dims, blob(dims, 9..11));
        let cfg = CompositionConfig { min_3d_size: 20, min_2d_size: 10, min_vesicle_voxels: 10, ..Default::default() };
        let out = compose(&cleft, &ves, &memb, &lgrid(dims, l), &cfg).unwrap();
        assert_eq!(out.candidates.len(), 1);
        let c = &out.candidates[0];
        assert_eq!(c.direction, Direction::Directed { pre: 1, post: 2 });
        assert_eq!(c.score, 255.0);
        let stages: Vec<_> = out.audit.iter().map(|a| a.voxels).collect();
        assert!(stages.windows(2).all(|w| w[1] <= w[0]), "{stages:?}");
        let rec = SynapseRecord::from(c);
        assert_eq!((rec.pre, rec.post, rec.voxel_count), (1, 2, 64));
        let ids = candidates_to_volume(&out.candidates, dims, RES);
        let back = candidates_from_records(&[rec], &ids).unwrap();
        assert_eq!(SynapseCandidate { vesicle_counts: c.vesicle_counts, ..back[0].clone() }, *c);
    }

    #[test]
    fn records_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let r = SynapseRecord {
            id: 3,
            pre: 4,
            post: 9,
            directed: true,
            voxel_count: 12,
            centroid_nm: [1.0, 2.5, 3.0],
            score: 211.5,
            active_flag: true,
        };
        write_records(&p, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_records(&p).unwrap(), vec![r.clone(), r]);
    }

    proptest! {
        #[test]
        fn rule2_monotone_in_distance(d in proptest::collection::vec(0.0f64..500.0, 30), a in 0.0f64..400.0, b in 0.0f64..400.0) {
            let mask = vec![true; 30];
            let (lo, hi) = (a.min(b), a.max(b));
            let n = |t| rule2_vesicle_proximity(&mask, &d, &CompositionConfig { max_vesicle_distance_nm: t, ..Default::default() })
                .iter().filter(|&&x| x).count();
            prop_assert!(n(lo) <= n(hi));
        }

        #[test]
        fn rule3_monotone_in_threshold(p in proptest::collection::vec(0u8..=255, 30), a in 0u16..=256, b in 0u16..=256) {
            let mask = vec![true; 30];
            let n = |t| rule3_threshold(&p, &mask, &CompositionConfig { cleft_threshold: t, ..Default::default() })
                .iter().filter(|&&x| x).count();
            prop_assert!(n(a.max(b)) <= n(a.min(b)));
        }
    }
}
