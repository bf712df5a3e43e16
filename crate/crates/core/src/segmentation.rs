//! Neuron segmentation: watershed over-segmentation of a membrane probability
//! volume, then greedy agglomeration on mean interface probability.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{VolumeError, VolumeKind, VoxelGrid};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("no voxel at or below seed level {0}")]
    NoSeeds(u8),
    #[error("expected a {expected:?} volume, got {actual:?}")]
    WrongKind { expected: VolumeKind, actual: VolumeKind },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, SegmentationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours.
    #[default]
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let n = dx.abs() + dy.abs() + dz.abs();
                    if n == 0 || (self == Connectivity::Six && n > 1) {
                        continue;
                    }
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }
}

/// Neighbour lookup on an x-fastest grid.
#[derive(Debug, Clone)]
pub struct Grid3 {
    pub dims: [usize; 3],
    offsets: Vec<[isize; 3]>,
}

impl Grid3 {
    pub fn new(dims: [usize; 3], conn: Connectivity) -> Self {
        Self { dims, offsets: conn.offsets() }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [dx, dy, _] = self.dims;
        [i % dx, (i / dx) % dy, i / (dx * dy)]
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2])
    }

    /// Call `f` for every in-bounds neighbour of voxel `i`, in a fixed order.
    #[inline]
    pub fn for_neighbors(&self, i: usize, mut f: impl FnMut(usize)) {
        let p = self.coords(i);
        for o in &self.offsets {
            let q = [0, 1, 2].map(|a| p[a] as isize + o[a]);
            if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < self.dims[a]) {
                f(self.index(q.map(|v| v as usize)));
            }
        }
    }
}

/// Label the connected components of `mask` as 1..=N in scan order of their
/// first voxel; background is 0. Returns the labels and N.
pub fn connected_components(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> (Vec<u32>, u32) {
    let grid = Grid3::new(dims, conn);
    assert_eq!(mask.len(), grid.len(), "mask length");
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            grid.for_neighbors(i, |j| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            });
        }
    }
    (labels, next)
}

fn probability_bytes(grid: &VoxelGrid) -> Result<&[u8]> {
    if grid.kind() != VolumeKind::Probability {
        return Err(SegmentationError::WrongKind { expected: VolumeKind::Probability, actual: grid.kind() });
    }
    Ok(grid.bytes()?)
}

/// Seeded watershed flooding of a probability volume.
///
/// Seeds are the connected components of voxels with probability at most
/// `seed_level`. Unlabelled voxels are claimed in order of
/// `(max(probability, flood level), insertion order)`, so the result is
/// deterministic and each basin is connected.
pub fn watershed(membrane_prob: &VoxelGrid, seed_level: u8, conn: Connectivity) -> Result<VoxelGrid> {
    let prob = probability_bytes(membrane_prob)?;
    let dims = membrane_prob.dims();
    let seeds: Vec<bool> = prob.iter().map(|&p| p <= seed_level).collect();
    let (mut labels, n) = connected_components(&seeds, dims, conn);
    if n == 0 {
        return Err(SegmentationError::NoSeeds(seed_level));
    }
    let grid = Grid3::new(dims, conn);
    let mut buckets: Vec<VecDeque<usize>> = vec![VecDeque::new(); 256];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            buckets[prob[i] as usize].push_back(i);
        }
    }
    let mut level = 0usize;
    while level < 256 {
        let Some(i) = buckets[level].pop_front() else {
            level += 1;
            continue;
        };
        let l = labels[i];
        grid.for_neighbors(i, |j| {
            if labels[j] == 0 {
                labels[j] = l;
                buckets[(prob[j] as usize).max(level)].push_back(j);
            }
        });
    }
    debug_assert!(labels.iter().all(|&l| l != 0));
    Ok(VoxelGrid::from_labels(dims, membrane_prob.resolution_nm(), labels)?)
}

/// Contact between two segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interface {
    /// Smaller label.
    pub a: u32,
    pub b: u32,
    /// Number of face-adjacent voxel pairs.
    pub count: usize,
    /// The voxel pairs as `(index in a, index in b)`.
    pub faces: Vec<(usize, usize)>,
}

/// Every face-adjacent pair of distinct non-zero labels, grouped by unordered
/// label pair with `a < b`, sorted by `(a, b)`.
pub fn contact_interfaces(labels: &VoxelGrid) -> Result<Vec<Interface>> {
    let l = labels.labels()?;
    let grid = Grid3::new(labels.dims(), Connectivity::Six);
    let mut map: BTreeMap<(u32, u32), Vec<(usize, usize)>> = BTreeMap::new();
    for_face_pairs(&grid, |i, j| {
        let (li, lj) = (l[i], l[j]);
        if li != lj && li != 0 && lj != 0 {
            let pair = if li < lj { (i, j) } else { (j, i) };
            map.entry((li.min(lj), li.max(lj))).or_default().push(pair);
        }
    });
    Ok(map.into_iter().map(|((a, b), faces)| Interface { a, b, count: faces.len(), faces }).collect())
}

/// Visit each face-adjacent voxel pair once (`i < j`).
fn for_face_pairs(grid: &Grid3, mut f: impl FnMut(usize, usize)) {
    let [dx, dy, dz] = grid.dims;
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = grid.index([x, y, z]);
                if x + 1 < dx {
                    f(i, i + 1);
                }
                if y + 1 < dy {
                    f(i, i + dx);
                }
                if z + 1 < dz {
                    f(i, i + dx * dy);
                }
            }
        }
    }
}

/// Running interface statistic: `sum` of `p_u + p_v` over `count` voxel pairs
/// (the mean probability is `sum / (2 count)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stat {
    sum: u64,
    count: u64,
}

impl Stat {
    fn add(self, o: Stat) -> Stat {
        Stat { sum: self.sum + o.sum, count: self.count + o.count }
    }

    fn below(self, threshold: u32) -> bool {
        (self.sum as u128) < 2 * threshold as u128 * self.count as u128
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    stat: Stat,
    a: u32,
    b: u32,
}

impl Ord for Candidate {
    /// Reversed so the max-heap yields the lowest mean, then smallest pair.
    fn cmp(&self, o: &Self) -> Ordering {
        let lhs = self.stat.sum as u128 * o.stat.count as u128;
        let rhs = o.stat.sum as u128 * self.stat.count as u128;
        rhs.cmp(&lhs).then_with(|| (o.a, o.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Greedily merge adjacent segments while the lowest mean interface
/// probability is below `merge_threshold` (0 merges nothing, 256 merges every
/// touching pair).
///
/// Output labels are dense, ordered by the smallest input label of each
/// merged group, so a no-op on densely labelled input returns it unchanged.
pub fn agglomerate(labels: &VoxelGrid, membrane_prob: &VoxelGrid, merge_threshold: u32) -> Result<VoxelGrid> {
    labels.same_shape(membrane_prob)?;
    let prob = probability_bytes(membrane_prob)?;
    let l = labels.labels()?;
    let max = l.iter().copied().max().unwrap_or(0);
    let grid = Grid3::new(labels.dims(), Connectivity::Six);
    let mut adj: Vec<BTreeMap<u32, Stat>> = vec![BTreeMap::new(); max as usize + 1];
    for_face_pairs(&grid, |i, j| {
        let (li, lj) = (l[i], l[j]);
        if li != lj && li != 0 && lj != 0 {
            let s = Stat { sum: prob[i] as u64 + prob[j] as u64, count: 1 };
            for (u, v) in [(li, lj), (lj, li)] {
                let e = adj[u as usize].entry(v).or_insert(Stat { sum: 0, count: 0 });
                *e = e.add(s);
            }
        }
    });
    let mut heap = BinaryHeap::new();
    for (a, m) in adj.iter().enumerate() {
        for (&b, &stat) in m.range(a as u32 + 1..) {
            heap.push(Candidate { stat, a: a as u32, b });
        }
    }
    let mut parent: Vec<u32> = (0..=max).collect();
    while let Some(c) = heap.pop() {
        if !c.stat.below(merge_threshold) {
            break;
        }
        // stale unless both ends are still roots with unchanged statistics
        if parent[c.a as usize] != c.a || parent[c.b as usize] != c.b || adj[c.a as usize].get(&c.b) != Some(&c.stat) {
            continue;
        }
        let (keep, gone) = (c.a, c.b);
        parent[gone as usize] = keep;
        let moved = std::mem::take(&mut adj[gone as usize]);
        adj[keep as usize].remove(&gone);
        for (n, s) in moved {
            if n == keep {
                continue;
            }
            adj[n as usize].remove(&gone);
            let e = adj[keep as usize].entry(n).or_insert(Stat { sum: 0, count: 0 });
            *e = e.add(s);
            let merged = *e;
            adj[n as usize].insert(keep, merged);
            let (a, b) = (keep.min(n), keep.max(n));
            heap.push(Candidate { stat: merged, a, b });
        }
    }
    let mut dense = vec![0u32; max as usize + 1];
    let mut present = vec![false; max as usize + 1];
    for &v in l {
        present[v as usize] = true;
    }
    let mut next = 0;
    for v in 1..=max {
        if present[v as usize] {
            let r = find(&mut parent, v);
            if dense[r as usize] == 0 {
                next += 1;
                dense[r as usize] = next;
            }
        }
    }
    let out: Vec<u32> = l.iter().map(|&v| if v == 0 { 0 } else { dense[find(&mut parent, v) as usize] }).collect();
    Ok(VoxelGrid::from_labels(labels.dims(), labels.resolution_nm(), out)?)
}

/// Watershed and agglomeration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub seed_level: u8,
    /// 0..=256.
    pub merge_threshold: u32,
    pub connectivity: Connectivity,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { seed_level: 1, merge_threshold: 140, connectivity: Connectivity::Six }
    }
}

/// [`watershed`] followed by [`agglomerate`].
pub fn segment(membrane_prob: &VoxelGrid, cfg: &SegmentationConfig) -> Result<VoxelGrid> {
    let ws = watershed(membrane_prob, cfg.seed_level, cfg.connectivity)?;
    agglomerate(&ws, membrane_prob, cfg.merge_threshold)
}

/// True when every non-zero voxel is labelled and each label's voxels form
/// one connected set.
pub fn is_connected_partition(labels: &[u32], dims: [usize; 3], conn: Connectivity) -> bool {
    if labels.contains(&0) {
        return false;
    }
    let grid = Grid3::new(dims, conn);
    let mut seen = vec![false; labels.len()];
    let mut done = std::collections::HashSet::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        if !done.insert(labels[start]) {
            return false;
        }
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            grid.for_neighbors(i, |j| {
                if !seen[j] && labels[j] == labels[i] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            });
        }
    }
    true
}

/// Number of distinct non-zero labels.
pub fn segment_count(labels: &[u32]) -> usize {
    let mut v: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RES: [f64; 3] = [6.0, 6.0, 29.0];

    fn prob(dims: [usize; 3], v: Vec<u8>) -> VoxelGrid {
        VoxelGrid::from_u8(dims, RES, VolumeKind::Probability, v).unwrap()
    }

    fn labels(dims: [usize; 3], v: Vec<u32>) -> VoxelGrid {
        VoxelGrid::from_labels(dims, RES, v).unwrap()
    }

    /// Box-blurred noise, so basins are larger than single voxels.
    pub(crate) fn smooth_field(dims: [usize; 3], seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let g = Grid3::new(dims, Connectivity::TwentySix);
        let mut out = vec![0u8; n];
        for i in 0..n {
            let (mut s, mut c) = (raw[i], 1.0);
            g.for_neighbors(i, |j| {
                s += raw[j];
                c += 1.0;
            });
            out[i] = ((s / c - 0.5) * 4.0 * 255.0 + 128.0).clamp(0.0, 255.0) as u8;
        }
        out
    }

    #[test]
    fn offsets_count() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn components_in_scan_order() {
        let mask = [true, false, true, true, false, false];
        let (l, n) = connected_components(&mask, [6, 1, 1], Connectivity::Six);
        assert_eq!((l, n), (vec![1, 0, 2, 2, 0, 0], 2));
        // diagonal contact only joins under 26-connectivity
        let mask = [true, false, false, true];
        assert_eq!(connected_components(&mask, [2, 2, 1], Connectivity::Six).1, 2);
        assert_eq!(connected_components(&mask, [2, 2, 1], Connectivity::TwentySix).1, 1);
    }

    #[test]
    fn uniform_zero_is_one_basin() {
        let g = prob([5, 4, 3], vec![0; 60]);
        let w = watershed(&g, 0, Connectivity::Six).unwrap();
        assert!(w.labels().unwrap().iter().all(|&l| l == 1));
    }

    #[test]
    fn wall_separates_two_basins() {
        let dims = [9, 4, 3];
        let v: Vec<u8> = (0..108).map(|i| if i % 9 == 4 { 255 } else { 0 }).collect();
        let w = watershed(&prob(dims, v), 10, Connectivity::Six).unwrap();
        let l = w.labels().unwrap();
        assert_eq!(segment_count(l), 2);
        for (i, &lab) in l.iter().enumerate() {
            match i % 9 {
                0..=3 => assert_eq!(lab, 1),
                5..=8 => assert_eq!(lab, 2),
                _ => {}
            }
        }
    }

    #[test]
    fn no_seeds_is_an_error() {
        let g = prob([2, 2, 1], vec![200; 4]);
        assert!(matches!(watershed(&g, 50, Connectivity::Six), Err(SegmentationError::NoSeeds(50))));
        let raw = VoxelGrid::from_u8([2, 2, 1], RES, VolumeKind::Raw, vec![0; 4]).unwrap();
        assert!(matches!(watershed(&raw, 50, Connectivity::Six), Err(SegmentationError::WrongKind { .. })));
    }

    #[test]
    fn interface_examples() {
        let i = contact_interfaces(&labels([2, 1, 1], vec![1, 2])).unwrap();
        assert_eq!(i.len(), 1);
        assert_eq!((i[0].a, i[0].b, i[0].count), (1, 2, 1));
        let i = contact_interfaces(&labels([2, 2, 1], vec![1, 2, 2, 1])).unwrap();
        assert_eq!(i.iter().map(|f| f.count).sum::<usize>(), 4);
        let i = contact_interfaces(&labels([2, 1, 1], vec![5, 3])).unwrap();
        assert_eq!((i[0].a, i[0].b, i[0].faces[0]), (3, 5, (1, 0)));
    }

    #[test]
    fn agglomerate_endpoints() {
        let dims = [12, 12, 4];
        let p = prob(dims, smooth_field(dims, 3));
        let ws = watershed(&p, 60, Connectivity::Six).unwrap();
        assert!(segment_count(ws.labels().unwrap()) > 1);
        assert_eq!(agglomerate(&ws, &p, 0).unwrap().labels().unwrap(), ws.labels().unwrap());
        let all = agglomerate(&ws, &p, 256).unwrap();
        assert!(all.labels().unwrap().iter().all(|&l| l == 1));
    }

    #[test]
    fn lowest_interface_merges_first() {
        // 1 | 2 | 3 along x; walls of 100 and 200
        let l = labels([5, 1, 1], vec![1, 1, 2, 3, 3]);
        let p = prob([5, 1, 1], vec![0, 100, 100, 200, 0]);
        let out = agglomerate(&l, &p, 140).unwrap();
        assert_eq!(agglomerate(&l, &p, 151).unwrap().labels().unwrap(), &[1; 5]);
        assert_eq!(out.labels().unwrap(), &[1, 1, 1, 2, 2]);
    }

    fn is_coarsening(fine: &[u32], coarse: &[u32]) -> bool {
        let mut map = std::collections::HashMap::new();
        fine.iter().zip(coarse).all(|(f, c)| *map.entry(*f).or_insert(*c) == *c)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn watershed_partitions(seed in 0u64..1000, level in 40u8..140) {
            let dims = [10, 9, 4];
            let p = prob(dims, smooth_field(dims, seed));
            if let Ok(w) = watershed(&p, level, Connectivity::Six) {
                prop_assert!(is_connected_partition(w.labels().unwrap(), dims, Connectivity::Six));
                let w26 = watershed(&p, level, Connectivity::TwentySix).unwrap();
                prop_assert!(is_connected_partition(w26.labels().unwrap(), dims, Connectivity::TwentySix));
            }
        }

        #[test]
        fn agglomeration_coarsens_monotonically(seed in 0u64..1000) {
            let dims = [10, 10, 3];
            let p = prob(dims, smooth_field(dims, seed));
            let ws = watershed(&p, 90, Connectivity::Six).unwrap();
            let mut prev = segment_count(ws.labels().unwrap());
            let mut prev_labels = ws.labels().unwrap().to_vec();
            for t in (0..=256).step_by(32) {
                let a = agglomerate(&ws, &p, t).unwrap();
                let l = a.labels().unwrap();
                prop_assert!(is_coarsening(ws.labels().unwrap(), l));
                prop_assert!(is_coarsening(&prev_labels, l));
                prop_assert!(is_connected_partition(l, dims, Connectivity::Six));
                let n = segment_count(l);
                prop_assert!(n <= prev);
                prev = n;
                prev_labels = l.to_vec();
            }
        }
    }
}
