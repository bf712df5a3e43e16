//! Synthetic EM-like volumes with complete ground truth.
//!
//! Cells are Voronoi regions of random seeds in physical space, so every
//! interface is a plane whose normal is the seed-to-seed direction. Synapses
//! are planted on interface patches: an extra-dark cleft on the membrane and,
//! for active synapses, a cluster of dark vesicle disks on the pre side.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{read_records, write_records, CompositionError, SynapseRecord};
use crate::convnet::{FeatureMap, Sample, HALF_FIELD, RECEPTIVE_FIELD};
use crate::segmentation::{Connectivity, Grid3};
use crate::volume::{self, reflect, VolumeError, VolumeKind, VoxelGrid};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("could only plant {planted} of {requested} synapses")]
    InterfaceSupply { planted: usize, requested: usize },
    #[error("{feature:?} has {available} positive voxels, {needed} needed")]
    InsufficientPositives { feature: Feature, available: usize, needed: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Records(#[from] CompositionError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad phantom.json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Intensities {
    pub background: u8,
    pub membrane: u8,
    pub cleft: u8,
    pub vesicle: u8,
}

impl Default for Intensities {
    fn default() -> Self {
        Self { background: 200, membrane: 80, cleft: 30, vesicle: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub resolution_nm: [f64; 3],
    pub neuron_seeds: usize,
    /// Weight of z in the Voronoi metric; below 1 stretches cells along z.
    pub voronoi_z_scale: f64,
    pub synapses: usize,
    /// Fraction of synapses planted without vesicles.
    pub inactive_fraction: f64,
    /// In-plane membrane half-width (Chebyshev radius, voxels).
    pub membrane_thickness: usize,
    pub cleft_radius_nm: f64,
    pub vesicle_cluster_radius_nm: f64,
    /// Fraction of the cluster covered by vesicle disks.
    pub vesicle_density: f64,
    pub vesicle_radius_nm: f64,
    /// Gap between the membrane and the near edge of the cluster.
    pub vesicle_gap_nm: f64,
    pub min_site_spacing_nm: f64,
    /// Sites closer than this are checked for vesicle cross-talk.
    pub interaction_range_nm: f64,
    pub min_cleft_voxels: usize,
    /// Consecutive slices with at least `min_cleft_slice_voxels` cleft voxels.
    pub min_cleft_slices: usize,
    pub min_cleft_slice_voxels: usize,
    pub min_cluster_voxels: usize,
    pub noise_sigma: f64,
    pub intensities: Intensities,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [256, 256, 32],
            resolution_nm: [6.0, 6.0, 29.0],
            neuron_seeds: 16,
            voronoi_z_scale: 0.25,
            synapses: 20,
            inactive_fraction: 0.0,
            membrane_thickness: 2,
            cleft_radius_nm: 90.0,
            vesicle_cluster_radius_nm: 70.0,
            vesicle_density: 0.35,
            vesicle_radius_nm: 18.0,
            vesicle_gap_nm: 30.0,
            min_site_spacing_nm: 300.0,
            interaction_range_nm: 600.0,
            min_cleft_voxels: 200,
            min_cleft_slices: 3,
            min_cleft_slice_voxels: 50,
            min_cluster_voxels: 300,
            noise_sigma: 10.0,
            intensities: Intensities::default(),
            seed: 1,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhantomError::Config(m.into()));
        if self.dims.iter().any(|&d| d == 0) {
            return bad("dims must be positive");
        }
        if self.resolution_nm.iter().any(|&r| !(r > 0.0)) {
            return bad("resolution must be positive");
        }
        if self.neuron_seeds < 2 && self.synapses > 0 {
            return bad("synapses need at least two neuron seeds");
        }
        if self.neuron_seeds == 0 {
            return bad("at least one neuron seed is required");
        }
        for (name, f) in [("inactive_fraction", self.inactive_fraction), ("vesicle_density", self.vesicle_density)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.voronoi_z_scale > 0.0) {
            return bad("voronoi_z_scale must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// A generated volume and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomBundle {
    pub config: PhantomConfig,
    pub em: VoxelGrid,
    /// 0/255 probability volume; includes cleft voxels.
    pub membrane: VoxelGrid,
    /// Synapse id per voxel, 0 elsewhere.
    pub cleft: VoxelGrid,
    /// 0/255 probability volume of drawn vesicle voxels.
    pub vesicle: VoxelGrid,
    pub labels: VoxelGrid,
    pub synapses: Vec<SynapseRecord>,
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: V3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Squared distance under the anisotropy-scaled Voronoi metric.
fn metric2(d: V3, z_scale: f64) -> f64 {
    d[0] * d[0] + d[1] * d[1] + (z_scale * d[2]).powi(2)
}

struct Site {
    pos: V3,
    pre: u32,
    post: u32,
    active: bool,
}

struct World<'a> {
    cfg: &'a PhantomConfig,
    grid: Grid3,
    labels: Vec<u32>,
    membrane: Vec<bool>,
}

impl World<'_> {
    fn pos_nm(&self, i: usize) -> V3 {
        let p = self.grid.coords(i);
        [0, 1, 2].map(|a| p[a] as f64 * self.cfg.resolution_nm[a])
    }

    /// Distinct labels in the 3x3x3 block around `i` (at most 3 reported).
    fn block_labels(&self, i: usize) -> Vec<u32> {
        let mut out = vec![self.labels[i]];
        self.grid.for_neighbors(i, |j| {
            let l = self.labels[j];
            if !out.contains(&l) && out.len() < 3 {
                out.push(l);
            }
        });
        out.sort_unstable();
        out
    }

    /// Voxels within `radius_nm` of `centre`.
    fn ball(&self, centre: V3, radius_nm: f64) -> Vec<usize> {
        let r = self.cfg.resolution_nm;
        let lo = [0, 1, 2].map(|a| ((centre[a] - radius_nm) / r[a]).ceil().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| (((centre[a] + radius_nm) / r[a]).floor().max(-1.0) as isize).min(self.grid.dims[a] as isize - 1));
        let mut out = Vec::new();
        if (0..3).any(|a| hi[a] < lo[a] as isize) {
            return out;
        }
        for z in lo[2]..=hi[2] as usize {
            for y in lo[1]..=hi[1] as usize {
                for x in lo[0]..=hi[0] as usize {
                    let i = self.grid.index([x, y, z]);
                    if norm(sub(self.pos_nm(i), centre)) <= radius_nm {
                        out.push(i);
                    }
                }
            }
        }
        out
    }
}

fn seeds_in_box(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<V3> {
    let extent = [0, 1, 2].map(|a| cfg.dims[a] as f64 * cfg.resolution_nm[a]);
    let volume: f64 = extent.iter().product::<f64>() * cfg.voronoi_z_scale;
    // keep seeds apart so no cell is a sliver
    let spacing = 0.5 * (volume / cfg.neuron_seeds as f64).cbrt();
    let mut seeds: Vec<V3> = Vec::with_capacity(cfg.neuron_seeds);
    let mut tries = 0;
    while seeds.len() < cfg.neuron_seeds {
        let s = [0, 1, 2].map(|a| rng.random::<f64>() * extent[a]);
        tries += 1;
        if tries < 10_000 && seeds.iter().any(|t| metric2(sub(s, *t), cfg.voronoi_z_scale).sqrt() < spacing) {
            continue;
        }
        seeds.push(s);
    }
    seeds
}

fn voronoi(cfg: &PhantomConfig, grid: &Grid3, seeds: &[V3]) -> Vec<u32> {
    (0..grid.len())
        .map(|i| {
            let p = grid.coords(i);
            let pos = [0, 1, 2].map(|a| p[a] as f64 * cfg.resolution_nm[a]);
            let mut best = (f64::INFINITY, 0u32);
            for (k, s) in seeds.iter().enumerate() {
                let d2 = metric2(sub(pos, *s), cfg.voronoi_z_scale);
                if d2 < best.0 {
                    best = (d2, k as u32 + 1);
                }
            }
            best.1
        })
        .collect()
}

fn membrane_mask(cfg: &PhantomConfig, grid: &Grid3, labels: &[u32]) -> Vec<bool> {
    let [nx, ny, nz] = grid.dims;
    let t = cfg.membrane_thickness as isize;
    (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let l = labels[i];
            for dy in -t..=t {
                for dx in -t..=t {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    if labels[grid.index([qx as usize, qy as usize, z])] != l {
                        return true;
                    }
                }
            }
            (z > 0 && labels[i - nx * ny] != l) || (z + 1 < nz && labels[i + nx * ny] != l)
        })
        .collect()
}

fn longest_run(voxels: &[usize], grid: &Grid3, min_per_slice: usize) -> usize {
    let mut per: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in voxels {
        *per.entry(grid.coords(v)[2]).or_default() += 1;
    }
    let (mut best, mut run, mut last) = (0, 0, None::<usize>);
    for (&z, &n) in &per {
        if n < min_per_slice {
            last = None;
            run = 0;
            continue;
        }
        run = if last.is_some_and(|l| l + 1 == z) { run + 1 } else { 1 };
        last = Some(z);
        best = best.max(run);
    }
    best
}

/// Build a phantom from `config`; fully determined by `config.seed`.
pub fn generate(config: &PhantomConfig) -> Result<PhantomBundle> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = Grid3::new(cfg.dims, Connectivity::TwentySix);
    let seeds = seeds_in_box(cfg, &mut rng);
    let labels = voronoi(cfg, &grid, &seeds);
    let membrane = membrane_mask(cfg, &grid, &labels);
    let world = World { cfg, grid: grid.clone(), labels, membrane };

    // interface voxels flanked by exactly two cells
    let sites: Vec<usize> =
        (0..grid.len()).filter(|&i| world.membrane[i] && world.block_labels(i).len() == 2).collect();
    let n_inactive = (cfg.inactive_fraction * cfg.synapses as f64).round() as usize;
    let mut active_flags: Vec<bool> = (0..cfg.synapses).map(|k| k >= n_inactive).collect();
    active_flags.shuffle(&mut rng);

    let mut cleft_ids = vec![0u32; grid.len()];
    let mut clusters = vec![false; grid.len()];
    let mut planted: Vec<Site> = Vec::new();
    let mut records = Vec::new();
    let mut attempts = 0usize;
    let max_attempts = 2000 * cfg.synapses.max(1);
    while planted.len() < cfg.synapses {
        attempts += 1;
        if attempts > max_attempts || sites.is_empty() {
            return Err(PhantomError::InterfaceSupply { planted: planted.len(), requested: cfg.synapses });
        }
        let &i = sites.choose(&mut rng).expect("non-empty");
        let pair = world.block_labels(i);
        let (a, b) = (pair[0], pair[1]);
        let active = active_flags[planted.len()];
        let (pre, post) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        let pos = world.pos_nm(i);
        // unit normal pointing from pre into post
        let mut d = sub(seeds[post as usize - 1], seeds[pre as usize - 1]);
        d[2] *= cfg.voronoi_z_scale * cfg.voronoi_z_scale;
        let n = d.map(|v| v / norm(d));
        if n[2].abs() >= 0.4 {
            continue;
        }
        let near: Vec<&Site> = planted.iter().filter(|s| norm(sub(s.pos, pos)) < cfg.interaction_range_nm).collect();
        if planted.iter().any(|s| norm(sub(s.pos, pos)) < cfg.min_site_spacing_nm) {
            continue;
        }
        // vesicles near one synapse must not land in another's flank
        let conflict = near.iter().any(|s| match (active, s.active) {
            (true, true) => s.pre == post || pre == s.post,
            (true, false) => pre == s.pre || pre == s.post,
            (false, true) => s.pre == a || s.pre == b,
            (false, false) => false,
        });
        if conflict {
            continue;
        }
        let cleft: Vec<usize> = world
            .ball(pos, cfg.cleft_radius_nm)
            .into_iter()
            .filter(|&v| world.membrane[v] && cleft_ids[v] == 0 && world.block_labels(v) == [a, b])
            .collect();
        if cleft.len() < cfg.min_cleft_voxels
            || longest_run(&cleft, &grid, cfg.min_cleft_slice_voxels) < cfg.min_cleft_slices
        {
            continue;
        }
        let cluster: Vec<usize> = if active {
            let offset = cfg.vesicle_cluster_radius_nm + cfg.vesicle_gap_nm;
            let centre = [0, 1, 2].map(|k| pos[k] - n[k] * offset);
            let c: Vec<usize> = world
                .ball(centre, cfg.vesicle_cluster_radius_nm)
                .into_iter()
                .filter(|&v| world.labels[v] == pre && !world.membrane[v])
                .collect();
            if c.len() < cfg.min_cluster_voxels {
                continue;
            }
            c
        } else {
            Vec::new()
        };
        let id = planted.len() as u32 + 1;
        for &v in &cleft {
            cleft_ids[v] = id;
        }
        for &v in &cluster {
            clusters[v] = true;
        }
        let centroid = crate::composition::centroid_nm(&cleft, cfg.dims, cfg.resolution_nm);
        records.push(SynapseRecord {
            id,
            pre,
            post,
            directed: true,
            voxel_count: cleft.len(),
            centroid_nm: centroid,
            score: 255.0,
            active_flag: active,
        });
        planted.push(Site { pos, pre, post, active });
    }

    let (em, vesicle) = render(&world, &cleft_ids, &clusters, &mut rng);
    let res = cfg.resolution_nm;
    let to_prob = |m: &[bool]| {
        VoxelGrid::from_u8(cfg.dims, res, VolumeKind::Probability, m.iter().map(|&b| if b { 255 } else { 0 }).collect())
    };
    Ok(PhantomBundle {
        config: cfg.clone(),
        em: VoxelGrid::from_u8(cfg.dims, res, VolumeKind::Raw, em)?,
        membrane: to_prob(&world.membrane)?,
        cleft: VoxelGrid::from_labels(cfg.dims, res, cleft_ids)?,
        vesicle: to_prob(&vesicle)?,
        labels: VoxelGrid::from_labels(cfg.dims, res, world.labels)?,
        synapses: records,
    })
}

/// Image plus the vesicle voxels actually drawn, cleft excluded.
fn render(world: &World, cleft: &[u32], clusters: &[bool], rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<bool>) {
    let cfg = world.cfg;
    let iv = cfg.intensities;
    let grid = &world.grid;
    let mut img: Vec<f64> = world.membrane.iter().map(|&m| if m { iv.membrane } else { iv.background } as f64).collect();
    // vesicle disks: random in-slice disks clipped to the cluster region
    let cluster: Vec<usize> = (0..clusters.len()).filter(|&i| clusters[i]).collect();
    let mut covered = vec![false; clusters.len()];
    let target = (cfg.vesicle_density * cluster.len() as f64).ceil() as usize;
    let r = cfg.vesicle_radius_nm / cfg.resolution_nm[0];
    let ri = r.ceil() as isize;
    let mut n_covered = 0;
    let mut guard = 0;
    while n_covered < target && guard < 100 * cluster.len().max(1) {
        guard += 1;
        let &c = cluster.choose(rng).expect("non-empty cluster");
        let [cx, cy, cz] = grid.coords(c);
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dx * dx + dy * dy) as f64) > r * r {
                    continue;
                }
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= grid.dims[0] as isize || y >= grid.dims[1] as isize {
                    continue;
                }
                let j = grid.index([x as usize, y as usize, cz]);
                if clusters[j] && !covered[j] {
                    covered[j] = true;
                    n_covered += 1;
                }
            }
        }
    }
    for i in 0..img.len() {
        if covered[i] {
            img[i] = iv.vesicle as f64;
        }
        if cleft[i] != 0 {
            img[i] = iv.cleft as f64;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in &mut img {
            *v += noise.sample(rng);
        }
    }
    let disks = covered.iter().zip(cleft).map(|(&c, &l)| c && l == 0).collect();
    (img.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(), disks)
}

impl PhantomBundle {
    /// Cleft ground truth as a 0/255 probability volume.
    pub fn cleft_prob(&self) -> VoxelGrid {
        let ids = self.cleft.labels().expect("labels");
        let v = ids.iter().map(|&l| if l != 0 { 255 } else { 0 }).collect();
        VoxelGrid::from_u8(self.cleft.dims(), self.cleft.resolution_nm(), VolumeKind::Probability, v).expect("dims")
    }

    /// Ground-truth synapses as `(id, voxels)`, optionally active only.
    pub fn synapse_voxels(&self, active_only: bool) -> Vec<(u32, Vec<usize>)> {
        let keep: std::collections::HashSet<u32> =
            self.synapses.iter().filter(|s| s.active_flag || !active_only).map(|s| s.id).collect();
        crate::composition::voxel_sets(&self.cleft)
            .expect("labels")
            .into_iter()
            .filter(|(id, _)| keep.contains(id))
            .collect()
    }

    /// Write every volume plus `synapses_gt.jsonl` and `phantom.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| PhantomError::Io { path: dir.into(), source })?;
        volume::save_named(&self.em, dir, "em")?;
        volume::save_named(&self.membrane, dir, "gt_membrane")?;
        volume::save_named(&self.cleft, dir, "gt_cleft")?;
        volume::save_named(&self.vesicle, dir, "gt_vesicle")?;
        volume::save_named(&self.labels, dir, "gt_labels")?;
        write_records(dir.join("synapses_gt.jsonl"), &self.synapses)?;
        let p = dir.join("phantom.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.config)?)
            .map_err(|source| PhantomError::Io { path: p, source })?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("phantom.json");
        let text = std::fs::read_to_string(&p).map_err(|source| PhantomError::Io { path: p, source })?;
        Ok(Self {
            config: serde_json::from_str(&text)?,
            em: volume::load_named(dir, "em")?,
            membrane: volume::load_named(dir, "gt_membrane")?,
            cleft: volume::load_named(dir, "gt_cleft")?,
            vesicle: volume::load_named(dir, "gt_vesicle")?,
            labels: volume::load_named(dir, "gt_labels")?,
            synapses: read_records(dir.join("synapses_gt.jsonl"))?,
        })
    }
}

/// Which marginal feature a detector is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Membrane,
    Cleft,
    Vesicle,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Membrane, Feature::Cleft, Feature::Vesicle];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Membrane => "membrane",
            Feature::Cleft => "cleft",
            Feature::Vesicle => "vesicle",
        }
    }
}

impl std::str::FromStr for Feature {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Feature::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| format!("unknown feature {s:?}"))
    }
}

impl PhantomBundle {
    /// Ground-truth mask of `feature`.
    pub fn mask(&self, feature: Feature) -> Vec<bool> {
        match feature {
            Feature::Membrane => self.membrane.bytes().expect("bytes").iter().map(|&v| v > 0).collect(),
            Feature::Cleft => self.cleft.labels().expect("labels").iter().map(|&v| v > 0).collect(),
            Feature::Vesicle => self.vesicle.bytes().expect("bytes").iter().map(|&v| v > 0).collect(),
        }
    }
}

/// In-plane reach of the confusable-structure region used for stratified
/// sampling, voxels.
pub const CONTEXT_RADIUS: usize = 6;

/// Chebyshev dilation of a mask within each z slice.
fn dilate_xy(mask: &[bool], dims: [usize; 3], r: usize) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let run = |src: &[bool], stride: usize, n: usize, out: &mut [bool], base: usize| {
        // sliding count over a window of 2r+1 along one axis
        let mut count = 0usize;
        for k in 0..n.min(r + 1) {
            count += src[base + k * stride] as usize;
        }
        for k in 0..n {
            out[base + k * stride] = count > 0;
            if k + r + 1 < n {
                count += src[base + (k + r + 1) * stride] as usize;
            }
            if k >= r {
                count -= src[base + (k - r) * stride] as usize;
            }
        }
    };
    let mut tmp = vec![false; mask.len()];
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            run(mask, 1, nx, &mut tmp, nx * (y + ny * z));
        }
        for x in 0..nx {
            run(&tmp, nx, ny, &mut out, x + nx * ny * z);
        }
    }
    out
}

/// 69x69 patch of `em` centred on `(x, y, z)`, mirror-padded at the border,
/// scaled to `[0, 1]`.
pub fn patch_at(em: &VoxelGrid, x: usize, y: usize, z: usize) -> FeatureMap<f32> {
    let [nx, ny, _] = em.dims();
    let bytes = em.bytes().expect("raw volume");
    let mut v = Vec::with_capacity(RECEPTIVE_FIELD * RECEPTIVE_FIELD);
    for dy in 0..RECEPTIVE_FIELD {
        let sy = reflect(y as isize + dy as isize - HALF_FIELD as isize, ny);
        for dx in 0..RECEPTIVE_FIELD {
            let sx = reflect(x as isize + dx as isize - HALF_FIELD as isize, nx);
            v.push(bytes[sx + nx * (sy + ny * z)] as f32 / 255.0);
        }
    }
    FeatureMap::new(1, RECEPTIVE_FIELD, RECEPTIVE_FIELD, v).expect("patch shape")
}

/// Labelled patches centred on positive and negative voxels of `feature`.
///
/// `round(count * balance)` positives. Both classes are stratified by the
/// other features' masks (the confusable dark structures) grown by
/// [`CONTEXT_RADIUS`] in-plane: half of each class is drawn from voxels in
/// that region when any exist, the rest uniformly. For membranes this keeps
/// the darker cleft and the membrane beside it represented.
pub fn sample_training_patches(
    bundle: &PhantomBundle,
    feature: Feature,
    count: usize,
    balance: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&balance) {
        return Err(PhantomError::Config("balance must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_mask = bundle.mask(feature);
    let positives: Vec<usize> = (0..pos_mask.len()).filter(|&i| pos_mask[i]).collect();
    let n_pos = (count as f64 * balance).round() as usize;
    let n_neg = count - n_pos;
    if positives.len() < n_pos {
        return Err(PhantomError::InsufficientPositives { feature, available: positives.len(), needed: n_pos });
    }
    let mut hard_mask = vec![false; pos_mask.len()];
    for f in Feature::ALL.into_iter().filter(|&f| f != feature) {
        for (h, m) in hard_mask.iter_mut().zip(bundle.mask(f)) {
            *h |= m;
        }
    }
    let hard_mask = dilate_xy(&hard_mask, bundle.em.dims(), CONTEXT_RADIUS);
    let hard: Vec<usize> = (0..pos_mask.len()).filter(|&i| hard_mask[i] && !pos_mask[i]).collect();
    let hard_pos: Vec<usize> = positives.iter().copied().filter(|&i| hard_mask[i]).collect();
    let negatives: Vec<usize> = (0..pos_mask.len()).filter(|&i| !pos_mask[i]).collect();
    if negatives.len() < n_neg {
        return Err(PhantomError::InsufficientPositives { feature, available: negatives.len(), needed: n_neg });
    }
    let n_hard = if hard.is_empty() { 0 } else { n_neg / 2 };
    let mut picks: Vec<(usize, u8)> = Vec::with_capacity(count);
    let n_hard_pos = (n_pos / 2).min(hard_pos.len());
    picks.extend(hard_pos.choose_multiple(&mut rng, n_hard_pos).map(|&i| (i, 1)));
    picks.extend(positives.choose_multiple(&mut rng, n_pos - n_hard_pos).map(|&i| (i, 1)));
    picks.extend((0..n_hard).map(|_| (*hard.choose(&mut rng).expect("non-empty"), 0)));
    picks.extend((n_hard..n_neg).map(|_| (*negatives.choose(&mut rng).expect("non-empty"), 0)));
    let grid = Grid3::new(bundle.em.dims(), Connectivity::Six);
    Ok(picks
        .into_iter()
        .map(|(i, label)| {
            let [x, y, z] = grid.coords(i);
            Sample { patch: patch_at(&bundle.em, x, y, z), label }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { dims: [128, 128, 16], neuron_seeds: 8, synapses: 4, seed: 3, ..Default::default() }
    }

    #[test]
    fn zero_synapses_gives_empty_masks() {
        let b = generate(&PhantomConfig { synapses: 0, ..small() }).unwrap();
        assert!(b.cleft.labels().unwrap().iter().all(|&v| v == 0));
        assert!(b.vesicle.bytes().unwrap().iter().all(|&v| v == 0));
        assert!(b.labels.labels().unwrap().iter().all(|&v| (1..=8).contains(&v)));
        assert!(b.synapses.is_empty());
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        assert_ne!(generate(&small()).unwrap().em, generate(&PhantomConfig { seed: 4, ..small() }).unwrap().em);
    }

    #[test]
    fn planted_synapses_satisfy_invariants() {
        let cfg = PhantomConfig { inactive_fraction: 0.5, ..small() };
        let b = generate(&cfg).unwrap();
        assert_eq!(b.synapses.len(), 4);
        assert_eq!(b.synapses.iter().filter(|s| !s.active_flag).count(), 2);
        let grid = Grid3::new(cfg.dims, Connectivity::TwentySix);
        let labels = b.labels.labels().unwrap();
        let ids = b.cleft.labels().unwrap();
        let memb = b.membrane.bytes().unwrap();
        let ves = b.vesicle.bytes().unwrap();
        for s in &b.synapses {
            let mut pair = [s.pre, s.post];
            pair.sort_unstable();
            for i in (0..ids.len()).filter(|&i| ids[i] == s.id) {
                assert_eq!(memb[i], 255);
                let mut block = vec![labels[i]];
                grid.for_neighbors(i, |j| {
                    if !block.contains(&labels[j]) {
                        block.push(labels[j]);
                    }
                });
                block.sort_unstable();
                assert_eq!(block, pair, "synapse {}", s.id);
            }
            // flanking vesicles near the cleft sit on the pre side only
            let near: Vec<usize> = (0..ves.len())
                .filter(|&i| ves[i] > 0 && (labels[i] == s.pre || labels[i] == s.post))
                .filter(|&i| {
                    let p = grid.coords(i);
                    let q = [0, 1, 2].map(|a| p[a] as f64 * cfg.resolution_nm[a]);
                    norm(sub(q, s.centroid_nm)) < 250.0
                })
                .collect();
            if s.active_flag {
                assert!(near.len() >= cfg.min_cluster_voxels);
                assert!(near.iter().all(|&i| labels[i] == s.pre));
            } else {
                assert!(near.is_empty(), "inactive synapse {} has vesicles", s.id);
            }
        }
    }

    #[test]
    fn bundle_roundtrip() {
        let b = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        assert_eq!(PhantomBundle::read(dir.path()).unwrap(), b);
    }

    #[test]
    fn too_many_synapses_is_an_error() {
        let cfg = PhantomConfig { synapses: 200, ..small() };
        assert!(matches!(generate(&cfg), Err(PhantomError::InterfaceSupply { .. })));
    }

    #[test]
    fn training_patches_are_balanced_and_labelled() {
        let b = generate(&small()).unwrap();
        let s = sample_training_patches(&b, Feature::Cleft, 100, 0.5, 1).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.iter().filter(|x| x.label == 1).count(), 50);
        // patch centres are dark exactly where the cleft is
        let dark = |x: &Sample| x.patch.at(0, HALF_FIELD, HALF_FIELD);
        let mean = |l: u8| {
            let v: Vec<f32> = s.iter().filter(|x| x.label == l).map(dark).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(1) < 0.25 && mean(0) > mean(1));
        let none = generate(&PhantomConfig { synapses: 0, ..small() }).unwrap();
        assert!(matches!(
            sample_training_patches(&none, Feature::Cleft, 10, 0.5, 1),
            Err(PhantomError::InsufficientPositives { .. })
        ));
    }

    #[test]
    fn membrane_positives_include_cleft() {
        let b = generate(&small()).unwrap();
        let s = sample_training_patches(&b, Feature::Membrane, 100, 0.5, 2).unwrap();
        let darkest = s.iter().filter(|x| x.label == 1 && x.patch.at(0, HALF_FIELD, HALF_FIELD) < 0.25).count();
        let membrane = b.mask(Feature::Membrane);
        let cleft = b.mask(Feature::Cleft);
        let on = membrane.iter().filter(|&&m| m).count();
        let both = membrane.iter().zip(&cleft).filter(|&(&m, &c)| m && c).count();
        let uniform = 50.0 * both as f64 / on as f64;
        assert!(darkest as f64 >= 2.0 * uniform, "{darkest} cleft-centred positives, uniform {uniform:.1}");
    }

    #[test]
    fn dilation_matches_brute_force() {
        let dims = [9, 7, 2];
        let mask: Vec<bool> = (0..126).map(|i| i % 17 == 3).collect();
        let got = dilate_xy(&mask, dims, 2);
        let g = Grid3::new(dims, Connectivity::Six);
        for i in 0..mask.len() {
            let [x, y, z] = g.coords(i);
            let want = (0..mask.len()).any(|j| {
                let [a, b, c] = g.coords(j);
                mask[j] && c == z && a.abs_diff(x) <= 2 && b.abs_diff(y) <= 2
            });
            assert_eq!(got[i], want, "{x} {y} {z}");
        }
    }

    #[test]
    fn supply_ordering() {
        let b = generate(&small()).unwrap();
        let n = |f| b.mask(f).iter().filter(|&&m| m).count();
        assert!(n(Feature::Membrane) > n(Feature::Vesicle));
        assert!(n(Feature::Vesicle) > n(Feature::Cleft));
    }
}
