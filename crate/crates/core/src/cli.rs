//! Command-line driver. Every subcommand reads and writes fixed file names
//! under the output directory, so stages chain through files and
//! `pipeline` is the same chain run in one process.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad input or config.

use std::error::Error as StdError;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::{
    candidates_from_records, candidates_to_volume, compose, read_records, write_records, AuditEntry, Composition,
    CompositionConfig, SynapseRecord,
};
use crate::convnet::{MaxoutNetParams, TrainConfig};
use crate::eval::write_pr_csv;
use crate::graph::{build_connectome, export_graph, ConnectomeGraph, GraphFormat, SynapseEdge};
use crate::phantom::{generate, Feature, PhantomBundle, PhantomConfig};
use crate::pipeline::{
    evaluate, infer_volume, run_pipeline, train_detector, Detectors, EvalConfig, GroundTruth,
    InferenceConfig, Marginals, Metrics, PhaseTimes, PipelineError, StageConfig,
};
use crate::segmentation::{segment, segment_count, SegmentationConfig};
use crate::volume::{load_named, load_volume, save_named, VoxelGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

/// A failed stage and whose fault it was.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    /// `EXIT_INTERNAL` or `EXIT_INPUT`.
    pub code: i32,
    pub source: Box<dyn StdError + Send + Sync>,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl StdError for CliError {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(self.source.as_ref())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn input<E: Into<Box<dyn StdError + Send + Sync>>>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError { stage, code: EXIT_INPUT, source: e.into() }
}

fn internal<E: Into<Box<dyn StdError + Send + Sync>>>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError { stage, code: EXIT_INTERNAL, source: e.into() }
}

/// Where stage inputs come from. Unset entries default to files under `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Raw EM `.vol`; its metadata is the sibling `.json`. Default `out/em.vol`.
    pub input: Option<PathBuf>,
    pub membrane_params: Option<PathBuf>,
    pub cleft_params: Option<PathBuf>,
    pub vesicle_params: Option<PathBuf>,
    /// Phantom bundle the detectors are trained on. Default `out`.
    pub training: Option<PathBuf>,
    /// Phantom bundle scored against. Default `out` when it holds one.
    pub ground_truth: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            input: None,
            membrane_params: None,
            cleft_params: None,
            vesicle_params: None,
            training: None,
            ground_truth: None,
        }
    }
}

impl Paths {
    pub fn input(&self) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.out.join("em.vol"))
    }

    pub fn params(&self, f: Feature) -> PathBuf {
        let set = match f {
            Feature::Membrane => &self.membrane_params,
            Feature::Cleft => &self.cleft_params,
            Feature::Vesicle => &self.vesicle_params,
        };
        set.clone().unwrap_or_else(|| self.out.join(format!("params_{}.bin", f.name())))
    }

    pub fn training(&self) -> PathBuf {
        self.training.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn ground_truth(&self) -> Option<PathBuf> {
        match &self.ground_truth {
            Some(p) => Some(p.clone()),
            None => self.out.join("phantom.json").exists().then(|| self.out.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Patches sampled per feature.
    pub patches: usize,
    #[serde(flatten)]
    pub net: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { patches: 200, net: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Parallel thread count compared against one thread.
    pub threads: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { threads: 4 }
    }
}

/// Everything a run needs; read from TOML, then overridden by flags.
///
/// `seed` replaces the seeds of the `phantom` and `train` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub paths: Paths,
    pub phantom: PhantomConfig,
    pub train: TrainSection,
    pub inference: InferenceConfig,
    pub segmentation: SegmentationConfig,
    pub composition: CompositionConfig,
    pub eval: EvalConfig,
    pub bench: BenchSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            paths: Paths::default(),
            phantom: PhantomConfig::default(),
            train: TrainSection::default(),
            inference: InferenceConfig::default(),
            segmentation: SegmentationConfig::default(),
            composition: CompositionConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| input("config")(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| input("config")(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(input("config")(m));
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.bench.threads == 0 {
            return bad("bench.threads must be at least 1".into());
        }
        if self.train.patches == 0 {
            return bad("train.patches must be positive".into());
        }
        self.inference.validate().map_err(input("config"))?;
        self.composition.validate().map_err(input("config"))?;
        Ok(())
    }

    pub fn stages(&self) -> StageConfig {
        StageConfig {
            inference: self.inference.clone(),
            segmentation: self.segmentation.clone(),
            composition: self.composition.clone(),
            eval: self.eval.clone(),
        }
    }

    fn out(&self, stage: &'static str) -> Result<&Path> {
        let out = self.paths.out.as_path();
        std::fs::create_dir_all(out).map_err(|e| internal(stage)(format!("cannot create {}: {e}", out.display())))?;
        Ok(out)
    }

    fn pool(&self, threads: usize) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(internal("threads"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "synstream", version, about = "Compositional synapse detection in anisotropic EM volumes")]
pub struct Cli {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; stage inputs default to files inside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic volume with ground truth.
    Phantom {
        /// Phantom noise sigma.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train detectors on the training phantom.
    Train {
        /// Train only this feature (membrane, cleft or vesicle).
        #[arg(long)]
        feature: Option<Feature>,
        /// Patches per feature.
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Dense inference of probability volumes.
    Infer {
        #[arg(long)]
        feature: Option<Feature>,
        /// Mirror-pad borders so every voxel gets a prediction.
        #[arg(long)]
        mirror_pad: bool,
    },
    /// Watershed and agglomeration of the membrane probability.
    Segment,
    /// Rule composition of synapse candidates.
    Compose,
    /// Connectome export.
    Graph,
    /// Score predictions against the ground-truth phantom.
    Eval,
    /// Time each phase at one and at N threads.
    Bench {
        #[arg(long)]
        bench_threads: Option<usize>,
        #[arg(long)]
        mirror_pad: bool,
    },
    /// Infer, segment, compose, export and score in one run.
    Pipeline {
        #[arg(long)]
        mirror_pad: bool,
    },
}

impl Cli {
    /// Config file merged with flag overrides.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        match &self.command {
            Command::Phantom { noise: Some(n) } => cfg.phantom.noise_sigma = *n,
            Command::Train { patches, epochs, .. } => {
                cfg.train.patches = patches.unwrap_or(cfg.train.patches);
                cfg.train.net.epochs = epochs.unwrap_or(cfg.train.net.epochs);
            }
            Command::Bench { bench_threads, mirror_pad } => {
                cfg.bench.threads = bench_threads.unwrap_or(cfg.bench.threads);
                cfg.inference.mirror_pad |= mirror_pad;
            }
            Command::Infer { mirror_pad, .. } | Command::Pipeline { mirror_pad } => cfg.inference.mirror_pad |= mirror_pad,
            _ => {}
        }
        cfg.phantom.seed = cfg.seed;
        cfg.train.net.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match cli.resolve().and_then(|cfg| dispatch(&cli.command, &cfg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cmd: &Command, cfg: &PipelineConfig) -> Result<()> {
    let all = |f: &Option<Feature>| f.map_or(Feature::ALL.to_vec(), |f| vec![f]);
    match cmd {
        Command::Phantom { .. } => {
            let b = cmd_phantom(cfg)?;
            println!("phantom: {} synapses, dims {:?} -> {}", b.synapses.len(), b.em.dims(), cfg.paths.out.display());
        }
        Command::Train { feature, .. } => {
            for (f, secs) in cmd_train(cfg, &all(feature))? {
                println!("trained {} in {secs:.1} s -> {}", f.name(), cfg.paths.params(f).display());
            }
        }
        Command::Infer { feature, .. } => {
            cmd_infer(cfg, &all(feature))?;
        }
        Command::Segment => {
            let l = cmd_segment(cfg)?;
            println!("segments: {}", segment_count(l.labels().map_err(internal("segment"))?));
        }
        Command::Compose => {
            let c = cmd_compose(cfg)?;
            for a in &c.audit {
                println!("{:<24} voxels {:>9} candidates {}", a.stage, a.voxels, a.candidates.map_or("-".into(), |n| n.to_string()));
            }
        }
        Command::Graph => {
            let g = cmd_graph(cfg)?;
            println!("graph: {} neurons, {} synapses", g.nodes.len(), g.edges.len());
        }
        Command::Eval => print_metrics(&cmd_eval(cfg)?),
        Command::Bench { .. } => print!("{}", cmd_bench(cfg)?.table()),
        Command::Pipeline { .. } => {
            let s = cmd_pipeline(cfg)?;
            println!("segments {} candidates {}", s.segments, s.candidates);
            if let Some(m) = &s.metrics {
                print_metrics(m);
            }
        }
    }
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!(
        "F1 {:.4} P {:.4} R {:.4} at threshold {} | direction {:.4} | graph F1 {:.4} | density {:.4}/um^3 (corrected {:.4})",
        m.f1,
        m.precision,
        m.recall,
        m.best_threshold,
        m.direction_accuracy,
        m.graph_f1,
        m.density_per_um3,
        m.density_corrected_per_um3
    );
}

fn write_json<T: Serialize>(stage: &'static str, path: PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(internal(stage))?;
    std::fs::write(&path, text + "\n").map_err(|e| internal(stage)(format!("cannot write {}: {e}", path.display())))
}

fn load_stem(stage: &'static str, dir: &Path, stem: &str) -> Result<VoxelGrid> {
    load_named(dir, stem).map_err(input(stage))
}

fn load_em(cfg: &PipelineConfig, stage: &'static str) -> Result<VoxelGrid> {
    let p = cfg.paths.input();
    load_volume(&p, p.with_extension("json")).map_err(input(stage))
}

fn load_bundle(dir: &Path, stage: &'static str) -> Result<PhantomBundle> {
    PhantomBundle::read(dir).map_err(input(stage))
}

/// Load one parameter file; a missing file is an input error naming it.
pub fn load_params(cfg: &PipelineConfig, f: Feature, stage: &'static str) -> Result<MaxoutNetParams> {
    let p = cfg.paths.params(f);
    if !p.is_file() {
        return Err(input(stage)(format!("missing parameter file {}", p.display())));
    }
    MaxoutNetParams::load(&p).map_err(|e| input(stage)(format!("{}: {e}", p.display())))
}

pub fn load_detectors(cfg: &PipelineConfig, stage: &'static str) -> Result<Detectors> {
    Ok(Detectors {
        membrane: load_params(cfg, Feature::Membrane, stage)?,
        cleft: load_params(cfg, Feature::Cleft, stage)?,
        vesicle: load_params(cfg, Feature::Vesicle, stage)?,
    })
}

/// Write `phantom` outputs: `em`, ground-truth volumes, `synapses_gt.jsonl`.
pub fn cmd_phantom(cfg: &PipelineConfig) -> Result<PhantomBundle> {
    let b = generate(&cfg.phantom).map_err(input("phantom"))?;
    b.write(cfg.out("phantom")?).map_err(internal("phantom"))?;
    Ok(b)
}

/// Train each of `features` and write `params_<feature>.bin`. Returns
/// training wall times.
pub fn cmd_train(cfg: &PipelineConfig, features: &[Feature]) -> Result<Vec<(Feature, f64)>> {
    let bundle = load_bundle(&cfg.paths.training(), "train")?;
    cfg.out("train")?;
    let pool = cfg.pool(cfg.threads)?;
    features
        .iter()
        .map(|&f| {
            let t = Instant::now();
            let p = pool
                .install(|| train_detector(&bundle, f, cfg.train.patches, &cfg.train.net))
                .map_err(|e| match e {
                    PipelineError::Phantom(_) => input("train")(e),
                    e => internal("train")(e),
                })?;
            let path = cfg.paths.params(f);
            p.save(&path).map_err(internal("train"))?;
            Ok((f, t.elapsed().as_secs_f64()))
        })
        .collect()
}

/// Write `prob_<feature>` volumes.
pub fn cmd_infer(cfg: &PipelineConfig, features: &[Feature]) -> Result<()> {
    let em = load_em(cfg, "infer")?;
    let nets: Vec<(Feature, MaxoutNetParams)> =
        features.iter().map(|&f| Ok((f, load_params(cfg, f, "infer")?))).collect::<Result<_>>()?;
    let out = cfg.out("infer")?;
    let pool = cfg.pool(cfg.threads)?;
    // detectors run concurrently on the same pool
    let probs: Vec<VoxelGrid> = pool
        .install(|| nets.par_iter().map(|(_, p)| infer_volume(&em, p, &cfg.inference)).collect::<std::result::Result<_, _>>())
        .map_err(internal("infer"))?;
    for ((f, _), prob) in nets.iter().zip(&probs) {
        save_named(prob, out, &format!("prob_{}", f.name())).map_err(internal("infer"))?;
    }
    Ok(())
}

/// Write `labels` from `prob_membrane`.
pub fn cmd_segment(cfg: &PipelineConfig) -> Result<VoxelGrid> {
    let out = cfg.out("segment")?;
    let memb = load_stem("segment", out, "prob_membrane")?;
    let labels = segment(&memb, &cfg.segmentation).map_err(internal("segment"))?;
    save_named(&labels, out, "labels").map_err(internal("segment"))?;
    Ok(labels)
}

fn write_composition(out: &Path, c: &Composition, labels: &VoxelGrid) -> Result<()> {
    let records: Vec<SynapseRecord> = c.candidates.iter().map(SynapseRecord::from).collect();
    write_records(out.join("synapses.jsonl"), &records).map_err(internal("compose"))?;
    let ids = candidates_to_volume(&c.candidates, labels.dims(), labels.resolution_nm());
    save_named(&ids, out, "synapse_ids").map_err(internal("compose"))?;
    write_json("compose", out.join("audit.json"), &c.audit)
}

/// Write `synapses.jsonl`, `synapse_ids` and `audit.json`.
pub fn cmd_compose(cfg: &PipelineConfig) -> Result<Composition> {
    let out = cfg.out("compose")?;
    let load = |s| load_stem("compose", out, s);
    let (memb, cleft, ves, labels) = (load("prob_membrane")?, load("prob_cleft")?, load("prob_vesicle")?, load("labels")?);
    let pool = cfg.pool(cfg.threads)?;
    let c = pool.install(|| compose(&cleft, &ves, &memb, &labels, &cfg.composition)).map_err(internal("compose"))?;
    write_composition(out, &c, &labels)?;
    Ok(c)
}

fn write_graph(out: &Path, g: &ConnectomeGraph) -> Result<()> {
    for f in [GraphFormat::GraphMl, GraphFormat::JsonLines, GraphFormat::Dot] {
        export_graph(g, f, out.join(format!("graph.{}", f.extension()))).map_err(internal("graph"))?;
    }
    Ok(())
}

/// Write `graph.graphml`, `graph.jsonl` and `graph.dot` from `synapses.jsonl`.
pub fn cmd_graph(cfg: &PipelineConfig) -> Result<ConnectomeGraph> {
    let out = cfg.out("graph")?;
    let records = read_records(out.join("synapses.jsonl")).map_err(input("graph"))?;
    let g = build_connectome(records.iter().map(SynapseEdge::from)).map_err(input("graph"))?;
    write_graph(out, &g)?;
    Ok(g)
}

fn write_metrics(out: &Path, m: &Metrics) -> Result<()> {
    write_json("eval", out.join("metrics.json"), m)?;
    write_pr_csv(out.join("pr_curve.csv"), &m.curve).map_err(internal("eval"))
}

/// Write `metrics.json` and `pr_curve.csv`.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Metrics> {
    let out = cfg.out("eval")?;
    let Some(gt_dir) = cfg.paths.ground_truth() else {
        return Err(input("eval")("no ground truth: set paths.ground_truth".to_string()));
    };
    let gt = load_bundle(&gt_dir, "eval")?;
    let labels = load_stem("eval", out, "labels")?;
    let ids = load_stem("eval", out, "synapse_ids")?;
    let records = read_records(out.join("synapses.jsonl")).map_err(input("eval"))?;
    let candidates = candidates_from_records(&records, &ids).map_err(input("eval"))?;
    let comp = Composition { candidates, audit: Vec::new(), dropped_unflanked: 0 };
    let pool = cfg.pool(cfg.threads)?;
    let m = pool
        .install(|| evaluate(&comp, &labels, GroundTruth::from(&gt), &cfg.eval))
        .map_err(input("eval"))?;
    write_metrics(out, &m)?;
    Ok(m)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub threads: usize,
    pub seed: u64,
    pub dims: [usize; 3],
    pub segments: usize,
    pub candidates: usize,
    pub times: PhaseTimes,
    pub audit: Vec<AuditEntry>,
    pub metrics: Option<Metrics>,
}

/// Run every stage after training and write all stage outputs plus
/// `summary.json`. Scores when ground truth is available.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<Summary> {
    let em = load_em(cfg, "pipeline")?;
    let nets = load_detectors(cfg, "pipeline")?;
    let gt = cfg.paths.ground_truth().map(|d| load_bundle(&d, "pipeline")).transpose()?;
    let out = cfg.out("pipeline")?;
    let run = run_pipeline(&em, &nets, &cfg.stages(), cfg.threads, gt.as_ref().map(GroundTruth::from))
        .map_err(|e| pipeline_error(e, "pipeline"))?;
    for (f, g) in [("membrane", &run.marginals.membrane), ("cleft", &run.marginals.cleft), ("vesicle", &run.marginals.vesicle)] {
        save_named(g, out, &format!("prob_{f}")).map_err(internal("infer"))?;
    }
    save_named(&run.labels, out, "labels").map_err(internal("segment"))?;
    write_composition(out, &run.composition, &run.labels)?;
    write_graph(out, &run.graph)?;
    if let Some(m) = &run.metrics {
        write_metrics(out, m)?;
    }
    let summary = Summary {
        threads: cfg.threads,
        seed: cfg.seed,
        dims: em.dims(),
        segments: segment_count(run.labels.labels().map_err(internal("segment"))?),
        candidates: run.composition.candidates.len(),
        times: run.times,
        audit: run.composition.audit.clone(),
        metrics: run.metrics.clone(),
    };
    write_json("pipeline", out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Name the failing stage from the error's origin.
fn pipeline_error(e: PipelineError, fallback: &'static str) -> CliError {
    let stage = match &e {
        PipelineError::ConvNet(_) | PipelineError::Volume(_) => "infer",
        PipelineError::Segmentation(_) => "segment",
        PipelineError::Composition(_) => "compose",
        PipelineError::Graph(_) => "graph",
        PipelineError::Eval(_) => "eval",
        PipelineError::Config(_) => return input("config")(e),
        _ => fallback,
    };
    internal(stage)(e)
}

/// One timed phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBench {
    pub phase: String,
    pub voxels: usize,
    pub seconds_single: f64,
    pub seconds_parallel: f64,
    /// Input megabytes (one byte per voxel) per second at `threads`.
    pub throughput_mb_s: f64,
    /// `seconds_single / seconds_parallel`.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub phases: Vec<PhaseBench>,
    /// Speedup of the three inference phases together.
    pub inference_speedup: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>12} {:>10} {:>10} {:>10} {:>8}\n",
            "phase",
            "voxels",
            "t1 (s)",
            format!("t{} (s)", self.threads),
            "MB/s",
            "speedup"
        );
        for p in &self.phases {
            s += &format!(
                "{:<20} {:>12} {:>10.3} {:>10.3} {:>10.2} {:>8.2}\n",
                p.phase, p.voxels, p.seconds_single, p.seconds_parallel, p.throughput_mb_s, p.speedup
            );
        }
        s += &format!("inference speedup 1 -> {}: {:.2}\n", self.threads, self.inference_speedup);
        s
    }
}

fn timed<T>(f: impl FnOnce() -> std::result::Result<T, PipelineError>) -> std::result::Result<(T, f64), PipelineError> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// Phase times on a pool of `threads` workers, in report order.
fn phase_times(em: &VoxelGrid, nets: &Detectors, cfg: &StageConfig, threads: usize) -> std::result::Result<Vec<f64>, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| {
        let (vesicle, tv) = timed(|| infer_volume(em, &nets.vesicle, &cfg.inference))?;
        let (cleft, tc) = timed(|| infer_volume(em, &nets.cleft, &cfg.inference))?;
        let (membrane, tm) = timed(|| infer_volume(em, &nets.membrane, &cfg.inference))?;
        let m = Marginals { membrane, cleft, vesicle };
        let (labels, ts) = timed(|| Ok(segment(&m.membrane, &cfg.segmentation)?))?;
        let (comp, tr) = timed(|| Ok(compose(&m.cleft, &m.vesicle, &m.membrane, &labels, &cfg.composition)?))?;
        let (_, tg) = timed(|| Ok(build_connectome(comp.candidates.iter().map(SynapseEdge::from))?))?;
        Ok(vec![tv, tc, tm, ts, tr, tg])
    })
}

/// Time vesicle, cleft and membrane inference, segmentation, rules and
/// graph assembly at one thread and at `threads`.
pub fn bench(em: &VoxelGrid, nets: &Detectors, cfg: &StageConfig, threads: usize) -> std::result::Result<BenchReport, PipelineError> {
    if threads == 0 {
        return Err(PipelineError::Config("thread count must be at least 1".into()));
    }
    let single = phase_times(em, nets, cfg, 1)?;
    let parallel = if threads == 1 { single.clone() } else { phase_times(em, nets, cfg, threads)? };
    let names = ["vesicle inference", "cleft inference", "membrane inference", "segmentation", "rules", "graph"];
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 1.0 };
    let voxels = em.len();
    let phases = names
        .iter()
        .zip(single.iter().zip(&parallel))
        .map(|(name, (&t1, &tn))| PhaseBench {
            phase: name.to_string(),
            voxels,
            seconds_single: t1,
            seconds_parallel: tn,
            throughput_mb_s: if tn > 0.0 { voxels as f64 / 1e6 / tn } else { 0.0 },
            speedup: ratio(t1, tn),
        })
        .collect();
    let inference_speedup = ratio(single[..3].iter().sum(), parallel[..3].iter().sum());
    Ok(BenchReport { threads, phases, inference_speedup })
}

/// Write `bench.json`.
pub fn cmd_bench(cfg: &PipelineConfig) -> Result<BenchReport> {
    let em = load_em(cfg, "bench")?;
    let nets = load_detectors(cfg, "bench")?;
    let out = cfg.out("bench")?;
    let report = bench(&em, &nets, &cfg.stages(), cfg.bench.threads).map_err(|e| pipeline_error(e, "bench"))?;
    write_json("bench", out.join("bench.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("synstream").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 4\nthreads = 2\n[train]\npatches = 50\nepochs = 3\n[segmentation]\nmerge_threshold = 90\n")
            .unwrap();
        let c = parse(&["--config", p.to_str().unwrap(), "--threads", "3", "train"]).resolve().unwrap();
        assert_eq!((c.seed, c.threads, c.train.patches, c.train.net.epochs), (4, 3, 50, 3));
        assert_eq!((c.phantom.seed, c.train.net.seed, c.segmentation.merge_threshold), (4, 4, 90));
        let c = parse(&["--config", p.to_str().unwrap(), "--seed", "9", "--out", "x", "phantom"]).resolve().unwrap();
        assert_eq!((c.seed, c.phantom.seed, c.paths.out.as_path()), (9, 9, Path::new("x")));
    }

    #[test]
    fn bad_configs_are_input_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        for text in ["threads = 0", "[inference]\nhalo = 20", "nonsense = 1", "seed = \"x\""] {
            std::fs::write(&p, text).unwrap();
            let e = parse(&["--config", p.to_str().unwrap(), "segment"]).resolve().unwrap_err();
            assert_eq!((e.code, e.stage), (EXIT_INPUT, "config"), "{text}");
        }
        let e = parse(&["--config", "/nonexistent/c.toml", "segment"]).resolve().unwrap_err();
        assert!(e.to_string().contains("/nonexistent/c.toml"));
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let c = PipelineConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<PipelineConfig>(&text).unwrap(), c);
    }

    #[test]
    fn speedup_of_one_thread_is_one() {
        let em = VoxelGrid::from_u8([70, 70, 1], [6.0, 6.0, 29.0], crate::volume::VolumeKind::Raw, vec![128; 4900]).unwrap();
        let p = MaxoutNetParams::random(2, 1);
        let nets = Detectors { membrane: p.clone(), cleft: p.clone(), vesicle: p };
        let r = bench(&em, &nets, &StageConfig::default(), 1).unwrap();
        assert_eq!(r.phases.len(), 6);
        assert!(r.phases.iter().all(|p| p.speedup == 1.0 && p.seconds_single >= 0.0));
        assert_eq!(r.inference_speedup, 1.0);
    }
}
