//! Dense inference with max-pooling fragments against the per-patch
//! definition: same values, a fraction of the work.
//!
//! cargo run --release --example dense_inference -- [side] [width]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synstream::convnet::{forward_dense_counted, forward_patch, param_count, patch_macs, FeatureMap, MaxoutNetParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let side: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(164);
    let width: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);
    let params = MaxoutNetParams::<f32>::random(width, 1);
    println!("MaxoutNet width {width}: {} parameters", param_count(&params));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = FeatureMap::new(1, side, side, (0..side * side).map(|_| rng.random::<f32>()).collect())?;
    let t = Instant::now();
    let (dense, stats) = forward_dense_counted(&img, &params)?;
    let dense_time = t.elapsed();
    let out = side - 68;
    println!(
        "dense: {out}x{out} outputs in {dense_time:.2?}, {} fragments, {:.2} GMAC",
        stats.fragments,
        stats.macs as f64 / 1e9
    );

    // the per-patch definition on a sample of pixels
    let samples = 200.min(out * out);
    let t = Instant::now();
    let mut worst = 0.0f32;
    for _ in 0..samples {
        let (y, x) = (rng.random_range(0..out), rng.random_range(0..out));
        let (_, fg) = forward_patch(&img.window(y, x, 69, 69)?, &params)?;
        worst = worst.max((fg - dense.at(0, y, x)).abs());
    }
    let per_patch = t.elapsed() / samples as u32;
    let naive = (out * out) as u64 * patch_macs(width);
    println!("per-patch: {per_patch:.2?} each, max |dense - patch| over {samples} pixels = {worst:.2e}");
    println!(
        "work: {:.1}x fewer MACs than one pass per pixel; est. per-pixel time {:.2?}",
        naive as f64 / stats.macs as f64,
        per_patch * (out * out) as u32
    );
    Ok(())
}
