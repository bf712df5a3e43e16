//! The six composition rules on ground-truth marginals, with a quarter of
//! the synapses planted inactive.
//!
//! cargo run --release --example synapse_rules

use synstream::composition::{compose, CompositionConfig, Direction};
use synstream::phantom::{generate, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = generate(&PhantomConfig { inactive_fraction: 0.25, ..Default::default() })?;
    let inactive: Vec<u32> = b.synapses.iter().filter(|s| !s.active_flag).map(|s| s.id).collect();
    println!("{} planted synapses, inactive: {inactive:?}", b.synapses.len());

    let cfg = CompositionConfig::default();
    let c = compose(&b.cleft_prob(), &b.vesicle, &b.membrane, &b.labels, &cfg)?;
    for a in &c.audit {
        println!("{:<24} voxels {:>8}  candidates {}", a.stage, a.voxels, a.candidates.map_or("-".into(), |n| n.to_string()));
    }
    println!("{} rule-4 voxels touched fewer than two neurons", c.dropped_unflanked);
    for s in &c.candidates {
        let d = match s.direction {
            Direction::Directed { pre, post } => format!("{pre:>2} -> {post:<2}"),
            Direction::Undirected => format!("{:>2} -- {:<2}", s.pair.0, s.pair.1),
        };
        println!("candidate {:>2}: {d} {:>5} voxels, vesicles {:?}", s.id, s.voxels.len(), s.vesicle_counts);
    }

    let open = CompositionConfig { max_vesicle_distance_nm: f64::INFINITY, ..cfg };
    let o = compose(&b.cleft_prob(), &b.vesicle, &b.membrane, &b.labels, &open)?;
    let n = |stage: &str| o.audit.iter().find(|a| a.stage == stage).and_then(|a| a.candidates).unwrap_or(0);
    println!(
        "without the proximity rule, rule 6 alone drops {} of {} candidates",
        n("rule5_size_persistence") - n("rule6_active"),
        n("rule5_size_persistence")
    );
    Ok(())
}
