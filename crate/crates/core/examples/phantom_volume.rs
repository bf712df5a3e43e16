//! Generate a phantom, print its ground-truth statistics and write it out.
//!
//! cargo run --release --example phantom_volume -- [out_dir] [seed]

use synstream::phantom::{generate, Feature, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "phantom_out".into());
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let cfg = PhantomConfig { seed, ..Default::default() };
    let t = std::time::Instant::now();
    let b = generate(&cfg)?;
    println!("generated {:?} in {:.2?}", cfg.dims, t.elapsed());
    for f in Feature::ALL {
        let n = b.mask(f).iter().filter(|&&m| m).count();
        println!("{:>9}: {n} voxels ({:.2}%)", f.name(), 100.0 * n as f64 / b.em.len() as f64);
    }
    for s in &b.synapses {
        println!(
            "synapse {:>2}: {:>2} -> {:>2}  {:>4} voxels  active={}",
            s.id, s.pre, s.post, s.voxel_count, s.active_flag
        );
    }
    b.write(&out)?;
    println!("wrote {out}/");
    Ok(())
}
