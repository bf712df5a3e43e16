//! Threshold sweep, best operating point and density estimates for a set of
//! scored detections.
//!
//! cargo run --release --example evaluate -- [out_dir]

use synstream::composition::{compose, CompositionConfig};
use synstream::eval::{density, pr_curve, write_pr_csv, PrSummary, ScoredSynapse};
use synstream::phantom::{generate, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "eval_out".into());
    std::fs::create_dir_all(&out)?;
    let b = generate(&PhantomConfig::default())?;
    let c = compose(&b.cleft_prob(), &b.vesicle, &b.membrane, &b.labels, &CompositionConfig::default())?;

    // true detections get high scores; add low-scoring decoys
    let mut pred: Vec<ScoredSynapse> =
        c.candidates.iter().map(|s| ScoredSynapse { id: s.id, voxels: s.voxels.clone(), score: 150.0 + s.id as f64 }).collect();
    let n = b.em.len();
    for k in 0..8u32 {
        let start = (k as usize * 7919 * 97) % (n - 50);
        pred.push(ScoredSynapse { id: 1000 + k, voxels: (start..start + 50).collect(), score: 40.0 + 10.0 * k as f64 });
    }
    let thresholds: Vec<f64> = (0..=255).map(f64::from).collect();
    let curve = pr_curve(&pred, &b.synapse_voxels(true), &thresholds, 1);
    let best = PrSummary::from_curve(&curve).expect("non-empty sweep");
    println!(
        "best F1 {:.3} at score >= {} (P {:.3} R {:.3})",
        best.best_f1, best.best_threshold, best.precision, best.recall
    );
    for t in [0usize, 50, 100, 160, 200] {
        let p = &curve.points[t];
        println!("  t {t:>3}: tp {:>2} fp {:>2} fn {:>2}  F1 {:.3}", p.tp, p.fp, p.fn_, p.f1);
    }
    let path = format!("{out}/pr_curve.csv");
    write_pr_csv(&path, &curve)?;
    println!("wrote {path}");

    let (raw, corrected) = density(c.candidates.len(), b.em.volume_um3(), best.recall)?;
    println!("phantom: {raw:.3} synapses/um^3, {corrected:.3} after recall correction");
    let (raw, corrected) = density(66_162, 95_102.0, 0.782)?;
    println!("a 95102 um^3 block with 66162 detections at recall 0.782: {raw:.3} and {corrected:.3} per um^3");
    Ok(())
}
