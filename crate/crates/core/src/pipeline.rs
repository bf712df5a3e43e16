//! End-to-end wiring: chunked dense inference of the three marginal
//! detectors, segmentation, rule composition, graph assembly and scoring.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{compose, Composition, CompositionConfig, CompositionError, SynapseRecord};
use crate::convnet::{forward_dense, quantize_prob, train, ConvNetError, FeatureMap, MaxoutNetParams, TrainConfig, HALF_FIELD};
use crate::eval::{density, pr_curve, Overlap, EvalError, PrCurve, ScoredSynapse};
use crate::graph::{augment, build_connectome, graph_prf, line_graph, ConnectomeGraph, GraphError, SynapseEdge};
use crate::phantom::{sample_training_patches, Feature, PhantomBundle, PhantomError};
use crate::segmentation::{segment, SegmentationConfig, SegmentationError};
use crate::volume::{chunk_plan, stitch, ChunkResult, VolumeError, VolumeKind, VoxelGrid};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    ConvNet(#[from] ConvNetError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Chunking of dense inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Core box of one streaming chunk, voxels.
    pub core: [usize; 3],
    /// In-plane halo; at least 34 so every core voxel sees its full window.
    pub halo: usize,
    /// Mirror the volume by 34 voxels in x and y so border voxels get
    /// predictions. Off: border voxels without full context stay 0.
    pub mirror_pad: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { core: [128, 128, 8], halo: HALF_FIELD, mirror_pad: false }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.core.iter().any(|&c| c == 0) {
            return Err(PipelineError::Config("inference core must be positive".into()));
        }
        if self.halo < HALF_FIELD {
            return Err(PipelineError::Config(format!("inference halo {} is below {HALF_FIELD}", self.halo)));
        }
        Ok(())
    }
}

/// Dense foreground probability of `params` over every slice of `em`.
///
/// Chunks run in parallel on the current rayon pool; each output voxel
/// depends only on its own 69x69 input window, so the result is independent
/// of the chunk plan and the thread count.
pub fn infer_volume(em: &VoxelGrid, params: &MaxoutNetParams, cfg: &InferenceConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    if em.kind() != VolumeKind::Raw {
        return Err(PipelineError::Config(format!("inference input must be raw, got {:?}", em.kind())));
    }
    let src = if cfg.mirror_pad { em.pad_xy_mirror(HALF_FIELD)? } else { em.clone() };
    let dims = src.dims();
    let plan = chunk_plan(dims, cfg.core, [cfg.halo, cfg.halo, 0])?;
    let bytes = src.bytes()?;
    let results: Vec<ChunkResult> = plan
        .par_iter()
        .enumerate()
        .map(|(ci, spec)| -> Result<ChunkResult> {
            let o = spec.window_origin();
            let wd = spec.window_dims();
            let plane = wd[0] * wd[1];
            let slices: Vec<Vec<u8>> = (0..wd[2])
                .into_par_iter()
                .map(|dz| infer_window(bytes, dims, [o[0], o[1], o[2] + dz], [wd[0], wd[1]], params))
                .collect::<Result<_>>()?;
            let mut data = Vec::with_capacity(plane * wd[2]);
            for s in slices {
                data.extend(s);
            }
            let grid = VoxelGrid::from_u8(wd, src.resolution_nm(), VolumeKind::Probability, data)?;
            Ok(ChunkResult { chunk: ci, grid })
        })
        .collect::<Result<_>>()?;
    let full = stitch(&results, &plan, dims)?;
    if cfg.mirror_pad {
        let d = em.dims();
        Ok(full.crop([HALF_FIELD, HALF_FIELD, 0], d)?)
    } else {
        Ok(full)
    }
}

/// One xy window of one slice; pixels lacking full context are 0.
fn infer_window(
    bytes: &[u8],
    dims: [usize; 3],
    origin: [usize; 3],
    size: [usize; 2],
    params: &MaxoutNetParams,
) -> Result<Vec<u8>> {
    let [w, h] = size;
    let mut out = vec![0u8; w * h];
    if w < 2 * HALF_FIELD + 1 || h < 2 * HALF_FIELD + 1 {
        return Ok(out);
    }
    let scale = 1.0f32 / 255.0;
    let mut img = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = origin[0] + dims[0] * (origin[1] + y + dims[1] * origin[2]);
        img.extend(bytes[row..row + w].iter().map(|&b| b as f32 * scale));
    }
    let prob = forward_dense(&FeatureMap::new(1, h, w, img)?, params)?;
    let q = quantize_prob(prob.values())?;
    let (ow, oh) = (prob.width(), prob.height());
    for y in 0..oh {
        let dst = (y + HALF_FIELD) * w + HALF_FIELD;
        out[dst..dst + ow].copy_from_slice(&q[y * ow..(y + 1) * ow]);
    }
    Ok(out)
}

/// Parameters of the three marginal detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Detectors {
    pub membrane: MaxoutNetParams,
    pub cleft: MaxoutNetParams,
    pub vesicle: MaxoutNetParams,
}

impl Detectors {
    pub fn get(&self, f: Feature) -> &MaxoutNetParams {
        match f {
            Feature::Membrane => &self.membrane,
            Feature::Cleft => &self.cleft,
            Feature::Vesicle => &self.vesicle,
        }
    }
}

/// Train the `feature` detector from `patches` samples of `bundle`, with a
/// patch and shuffling seed derived from `cfg.seed` and the feature.
pub fn train_detector(bundle: &PhantomBundle, feature: Feature, patches: usize, cfg: &TrainConfig) -> Result<MaxoutNetParams> {
    let k = match feature {
        Feature::Membrane => 1,
        Feature::Cleft => 2,
        Feature::Vesicle => 3,
    };
    let seed = cfg.seed.wrapping_mul(31).wrapping_add(k);
    let samples = sample_training_patches(bundle, feature, patches, cfg.class_balance, seed)?;
    Ok(train(&samples, &TrainConfig { seed, ..cfg.clone() })?)
}

pub fn train_detectors(bundle: &PhantomBundle, patches: usize, cfg: &TrainConfig) -> Result<Detectors> {
    let one = |f| train_detector(bundle, f, patches, cfg);
    Ok(Detectors { membrane: one(Feature::Membrane)?, cleft: one(Feature::Cleft)?, vesicle: one(Feature::Vesicle)? })
}

/// The three probability volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub membrane: VoxelGrid,
    pub cleft: VoxelGrid,
    pub vesicle: VoxelGrid,
}

/// Run all three detectors concurrently on the current pool.
pub fn infer_marginals(em: &VoxelGrid, nets: &Detectors, cfg: &InferenceConfig) -> Result<Marginals> {
    let (membrane, (cleft, vesicle)) = rayon::join(
        || infer_volume(em, &nets.membrane, cfg),
        || rayon::join(|| infer_volume(em, &nets.cleft, cfg), || infer_volume(em, &nets.vesicle, cfg)),
    );
    Ok(Marginals { membrane: membrane?, cleft: cleft?, vesicle: vesicle? })
}

/// Scoring settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Voxels two synapses must share to match.
    pub min_overlap: usize,
    /// Spacing of the score-threshold sweep over 0..=255.
    pub threshold_step: usize,
    /// Score only against ground-truth synapses flagged active.
    pub active_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { min_overlap: 1, threshold_step: 1, active_only: true }
    }
}

/// Ground truth used for scoring.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub cleft: &'a VoxelGrid,
    pub labels: &'a VoxelGrid,
    pub synapses: &'a [SynapseRecord],
}

impl<'a> From<&'a PhantomBundle> for GroundTruth<'a> {
    fn from(b: &'a PhantomBundle) -> Self {
        GroundTruth { cleft: &b.cleft, labels: &b.labels, synapses: &b.synapses }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub best_threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Among matched synapses at the best threshold: directed, with the
    /// pre segment covering the true pre cell more than the true post cell
    /// and the post segment the reverse.
    pub direction_accuracy: f64,
    pub graph_precision: f64,
    pub graph_recall: f64,
    pub graph_f1: f64,
    pub predicted: usize,
    pub ground_truth: usize,
    pub density_per_um3: f64,
    pub density_corrected_per_um3: f64,
    #[serde(skip)]
    pub curve: PrCurve,
}

/// Score candidates against ground truth by a threshold sweep over the
/// candidate score.
pub fn evaluate(
    composition: &Composition,
    labels: &VoxelGrid,
    gt: GroundTruth,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    labels.same_shape(gt.labels)?;
    let keep: std::collections::HashSet<u32> =
        gt.synapses.iter().filter(|s| s.active_flag || !cfg.active_only).map(|s| s.id).collect();
    let gt_sets: Vec<(u32, Vec<usize>)> =
        crate::composition::voxel_sets(gt.cleft)?.into_iter().filter(|(id, _)| keep.contains(id)).collect();
    let pred: Vec<ScoredSynapse> = composition
        .candidates
        .iter()
        .map(|c| ScoredSynapse { id: c.id, voxels: c.voxels.clone(), score: c.score })
        .collect();
    let thresholds: Vec<f64> = (0..=255).step_by(cfg.threshold_step.max(1)).map(f64::from).collect();
    let curve = pr_curve(&pred, &gt_sets, &thresholds, cfg.min_overlap);
    let best = *curve.best_point().expect("non-empty sweep");

    let kept: Vec<&_> = composition.candidates.iter().filter(|c| c.score >= best.threshold).collect();
    let kept_sets: Vec<(u32, Vec<usize>)> = kept.iter().map(|c| (c.id, c.voxels.clone())).collect();
    let matching = crate::graph::match_synapses(&kept_sets, &gt_sets, cfg.min_overlap);

    let overlap = Overlap::new(labels.labels()?, gt.labels.labels()?);
    let by_id: HashMap<u32, &SynapseRecord> = gt.synapses.iter().map(|s| (s.id, s)).collect();
    let cand: HashMap<u32, &&crate::composition::SynapseCandidate> = kept.iter().map(|c| (c.id, c)).collect();
    let correct = matching
        .pairs
        .iter()
        .filter(|(p, g, _)| {
            let (c, s) = (cand[p], by_id[g]);
            c.is_directed() && overlap.oriented(c.endpoints(), (s.pre, s.post))
        })
        .count();
    let direction_accuracy = if matching.pairs.is_empty() { 0.0 } else { correct as f64 / matching.pairs.len() as f64 };

    let pred_graph = build_connectome(kept.iter().map(|c| SynapseEdge::from(*c)))?;
    let gt_graph =
        build_connectome(gt.synapses.iter().filter(|s| keep.contains(&s.id)).map(SynapseEdge::from))?;
    let (lp, lg) = augment(&line_graph(&pred_graph), &line_graph(&gt_graph), &matching);
    let (gp, gr, gf) = graph_prf(&lp, &lg)?;

    let vol = labels.volume_um3();
    let (raw, corrected) = if best.recall > 0.0 { density(kept.len(), vol, best.recall)? } else { (density(kept.len(), vol, 1.0)?.0, 0.0) };
    Ok(Metrics {
        f1: best.f1,
        precision: best.precision,
        recall: best.recall,
        best_threshold: best.threshold,
        tp: best.tp,
        fp: best.fp,
        fn_: best.fn_,
        direction_accuracy,
        graph_precision: gp,
        graph_recall: gr,
        graph_f1: gf,
        predicted: kept.len(),
        ground_truth: gt_sets.len(),
        density_per_um3: raw,
        density_corrected_per_um3: corrected,
        curve,
    })
}

/// Everything settable for a pipeline run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub inference: InferenceConfig,
    pub segmentation: SegmentationConfig,
    pub composition: CompositionConfig,
    pub eval: EvalConfig,
}

/// Wall time of each phase, seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub inference: f64,
    pub segmentation: f64,
    pub rules: f64,
    pub graph: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub marginals: Marginals,
    pub labels: VoxelGrid,
    pub composition: Composition,
    pub graph: ConnectomeGraph,
    pub metrics: Option<Metrics>,
    pub times: PhaseTimes,
}

/// Infer, segment, compose and build the graph on a pool of `threads`
/// workers; score when ground truth is given.
pub fn run_pipeline(
    em: &VoxelGrid,
    nets: &Detectors,
    cfg: &StageConfig,
    threads: usize,
    gt: Option<GroundTruth>,
) -> Result<PipelineRun> {
    if threads == 0 {
        return Err(PipelineError::Config("thread count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| {
        let t = Instant::now();
        let marginals = infer_marginals(em, nets, &cfg.inference)?;
        let inference = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let labels = segment(&marginals.membrane, &cfg.segmentation)?;
        let segmentation = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let composition = compose(&marginals.cleft, &marginals.vesicle, &marginals.membrane, &labels, &cfg.composition)?;
        let rules = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let graph = build_connectome(composition.candidates.iter().map(SynapseEdge::from))?;
        let graph_time = t.elapsed().as_secs_f64();
        let metrics = gt.map(|g| evaluate(&composition, &labels, g, &cfg.eval)).transpose()?;
        Ok(PipelineRun {
            marginals,
            labels,
            composition,
            graph,
            metrics,
            times: PhaseTimes { inference, segmentation, rules, graph: graph_time },
        })
    })
}
