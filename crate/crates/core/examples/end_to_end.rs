//! Train the three detectors on one phantom, run the full pipeline on an
//! independent phantom and print its scores.
//!
//! cargo run --release --example end_to_end -- [patches] [epochs] [noise]

use std::time::Instant;

use synstream::convnet::TrainConfig;
use synstream::phantom::{generate, PhantomConfig};
use synstream::pipeline::{run_pipeline, train_detectors, GroundTruth, InferenceConfig, StageConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let patches: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let noise: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10.0);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());

    let train_set = generate(&PhantomConfig { seed: 1001, noise_sigma: noise, ..Default::default() })?;
    let t = Instant::now();
    let nets = train_detectors(&train_set, patches, &TrainConfig { epochs, seed: 7, ..Default::default() })?;
    println!("trained 3 detectors on {patches} patches each in {:.1?}", t.elapsed());

    let test_set = generate(&PhantomConfig { seed: 1, noise_sigma: noise, ..Default::default() })?;
    let cfg = StageConfig { inference: InferenceConfig { mirror_pad: true, ..Default::default() }, ..Default::default() };
    let t = Instant::now();
    let run = run_pipeline(&test_set.em, &nets, &cfg, threads, Some(GroundTruth::from(&test_set)))?;
    println!("pipeline on {:?} in {:.1?} ({threads} threads): {:?}", test_set.em.dims(), t.elapsed(), run.times);
    for a in &run.composition.audit {
        println!("  {:<24} voxels {:>8}  candidates {:?}", a.stage, a.voxels, a.candidates);
    }
    let m = run.metrics.expect("ground truth given");
    println!(
        "synapse F1 {:.3} (P {:.3} R {:.3} at score >= {}), direction accuracy {:.3}, graph F1 {:.3}",
        m.f1, m.precision, m.recall, m.best_threshold, m.direction_accuracy, m.graph_f1
    );
    Ok(())
}
