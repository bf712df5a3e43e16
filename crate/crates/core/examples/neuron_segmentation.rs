//! Watershed over-segmentation and agglomeration of a membrane map, swept
//! over the merge threshold.
//!
//! cargo run --release --example neuron_segmentation -- [seed_level]

use synstream::eval::Overlap;
use synstream::phantom::{generate, PhantomConfig};
use synstream::segmentation::{agglomerate, is_connected_partition, segment_count, watershed, Connectivity};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed_level: u8 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let b = generate(&PhantomConfig { dims: [192, 192, 16], neuron_seeds: 12, synapses: 6, ..Default::default() })?;
    let gt = b.labels.labels()?;
    println!("ground truth: {} neurons", segment_count(gt));

    let ws = watershed(&b.membrane, seed_level, Connectivity::Six)?;
    println!("watershed at seed level {seed_level}: {} basins", segment_count(ws.labels()?));
    for t in [0, 60, 140, 200, 256] {
        let a = agglomerate(&ws, &b.membrane, t)?;
        let l = a.labels()?;
        let overlap = Overlap::new(l, gt);
        // share of voxels inside their segment's majority neuron
        let neurons = gt.iter().copied().max().unwrap_or(0);
        let majority: usize = (1..=l.iter().copied().max().unwrap_or(0))
            .map(|s| (1..=neurons).map(|g| overlap.count(s, g)).max().unwrap_or(0))
            .sum();
        println!(
            "merge threshold {t:>3}: {:>4} segments, purity {:.3}, connected partition: {}",
            segment_count(l),
            majority as f64 / l.len() as f64,
            is_connected_partition(l, a.dims(), Connectivity::Six)
        );
    }
    Ok(())
}
