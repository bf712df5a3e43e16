//! Train one marginal detector on phantom patches and check how well its
//! dense output separates the feature on an unseen phantom.
//!
//! cargo run --release --example train_marginal -- [membrane|cleft|vesicle] [patches] [epochs]

use std::time::Instant;

use synstream::convnet::{train_with_report, TrainConfig};
use synstream::eval::auc;
use synstream::phantom::{generate, sample_training_patches, Feature, PhantomConfig};
use synstream::pipeline::{infer_volume, InferenceConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let feature: Feature = args.next().unwrap_or_else(|| "cleft".into()).parse()?;
    let patches: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);

    let small = PhantomConfig { dims: [160, 160, 8], neuron_seeds: 10, synapses: 6, ..Default::default() };
    let train_set = generate(&PhantomConfig { seed: 11, ..small.clone() })?;
    let samples = sample_training_patches(&train_set, feature, patches, 0.5, 3)?;
    let cfg = TrainConfig { epochs, ..Default::default() };
    let t = Instant::now();
    let (params, report) = train_with_report(&samples, &cfg)?;
    println!("trained {} on {patches} patches in {:.1?}", feature.name(), t.elapsed());
    for (e, l) in report.epoch_losses.iter().enumerate().step_by((epochs / 6).max(1)) {
        println!("  epoch {e:>3}: mean loss {l:.4}");
    }

    let test_set = generate(&PhantomConfig { seed: 12, ..small })?;
    let prob = infer_volume(&test_set.em, &params, &InferenceConfig { mirror_pad: true, ..Default::default() })?;
    let a = auc(prob.bytes()?, &test_set.mask(feature)).unwrap_or(f64::NAN);
    println!("voxel AUC against the unseen phantom's {} mask: {a:.4}", feature.name());
    Ok(())
}
