//! Chunked streaming inference: the chunk plan and thread count change the
//! schedule, never the output.
//!
//! cargo run --release --example streaming_chunks

use std::time::Instant;

use synstream::convnet::MaxoutNetParams;
use synstream::phantom::{generate, PhantomConfig};
use synstream::pipeline::{infer_volume, InferenceConfig};
use synstream::volume::chunk_plan;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = generate(&PhantomConfig { dims: [200, 180, 6], neuron_seeds: 8, synapses: 3, ..Default::default() })?;
    let params = MaxoutNetParams::random(8, 5);
    let dims = b.em.dims();

    let plan = chunk_plan(dims, [100, 100, 3], [34, 34, 0])?;
    println!("{} chunks over {dims:?}:", plan.len());
    for c in &plan {
        println!("  core at {:?} size {:?}, window {:?} from {:?}", c.origin, c.core, c.window_dims(), c.window_origin());
    }

    let mut reference = None;
    for (core, halo, threads) in [([200, 180, 6], 34, 1), ([100, 100, 3], 34, 2), ([64, 37, 1], 50, 4)] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        let cfg = InferenceConfig { core, halo, mirror_pad: false };
        let t = Instant::now();
        let prob = pool.install(|| infer_volume(&b.em, &params, &cfg))?;
        let same = reference.get_or_insert_with(|| prob.clone()) == &prob;
        println!("core {core:?} halo {halo} threads {threads}: {:.2?}, identical to first: {same}", t.elapsed());
    }
    Ok(())
}
