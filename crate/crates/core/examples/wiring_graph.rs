//! Build the connectome from detected synapses, export it, and score its
//! line graph against the ground-truth wiring.
//!
//! cargo run --release --example wiring_graph -- [out_dir]

use synstream::composition::{compose, CompositionConfig};
use synstream::graph::{
    augment, build_connectome, export_graph, graph_prf, line_graph, match_synapses, GraphFormat, SynapseEdge,
};
use synstream::phantom::{generate, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "graph_out".into());
    std::fs::create_dir_all(&out)?;
    let b = generate(&PhantomConfig::default())?;
    let c = compose(&b.cleft_prob(), &b.vesicle, &b.membrane, &b.labels, &CompositionConfig::default())?;

    let pred = build_connectome(c.candidates.iter().map(SynapseEdge::from))?;
    let gt = build_connectome(b.synapses.iter().map(SynapseEdge::from))?;
    println!("predicted: {} neurons, {} synapses", pred.nodes.len(), pred.edges.len());
    for f in [GraphFormat::GraphMl, GraphFormat::JsonLines, GraphFormat::Dot] {
        let p = format!("{out}/graph.{}", f.extension());
        export_graph(&pred, f, &p)?;
        println!("wrote {p}");
    }

    let (lp, lg) = (line_graph(&pred), line_graph(&gt));
    println!("line graphs: {} / {} edges (predicted / true)", lp.edges.len(), lg.edges.len());
    let sets: Vec<(u32, Vec<usize>)> = c.candidates.iter().map(|s| (s.id, s.voxels.clone())).collect();
    let m = match_synapses(&sets, &b.synapse_voxels(true), 1);
    let (ap, ag) = augment(&lp, &lg, &m);
    let (p, r, f) = graph_prf(&ap, &ag)?;
    println!("wiring P {p:.3} R {r:.3} F1 {f:.3}");

    // drop every third detection and rescore
    let kept: Vec<_> = c.candidates.iter().filter(|s| s.id % 3 != 0).collect();
    let thin = build_connectome(kept.iter().map(|s| SynapseEdge::from(*s)))?;
    let sets: Vec<(u32, Vec<usize>)> = kept.iter().map(|s| (s.id, s.voxels.clone())).collect();
    let (ap, ag) = augment(&line_graph(&thin), &lg, &match_synapses(&sets, &b.synapse_voxels(true), 1));
    let (p, r, f) = graph_prf(&ap, &ag)?;
    println!("with {} of {} detections: P {p:.3} R {r:.3} F1 {f:.3}", kept.len(), c.candidates.len());
    Ok(())
}
