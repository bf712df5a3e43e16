//! Connectome graph, its line graph, synapse matching and graph-level scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{SynapseCandidate, SynapseRecord};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate synapse id {0}")]
    DuplicateSynapse(u32),
    #[error("line graphs have different node sets ({pred} vs {gt} nodes)")]
    NodeSetMismatch { pred: usize, gt: usize },
    #[error("unknown graph format {0:?} (expected graphml, jsonl or dot)")]
    UnknownFormat(String),
    #[error("malformed edge record on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// One synapse as a connectome edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SynapseEdge {
    pub synapse_id: u32,
    pub pre: u32,
    pub post: u32,
    /// False when the orientation of `pre -> post` is unknown.
    pub directed: bool,
}

impl From<&SynapseCandidate> for SynapseEdge {
    fn from(c: &SynapseCandidate) -> Self {
        let (pre, post) = c.endpoints();
        SynapseEdge { synapse_id: c.id, pre, post, directed: c.is_directed() }
    }
}

impl From<&SynapseRecord> for SynapseEdge {
    fn from(r: &SynapseRecord) -> Self {
        SynapseEdge { synapse_id: r.id, pre: r.pre, post: r.post, directed: r.directed }
    }
}

/// Directed multigraph of neurons; one edge per synapse.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnectomeGraph {
    pub nodes: BTreeSet<u32>,
    /// Sorted by synapse id.
    pub edges: Vec<SynapseEdge>,
}

pub fn build_connectome(edges: impl IntoIterator<Item = SynapseEdge>) -> Result<ConnectomeGraph> {
    let mut by_id = BTreeMap::new();
    for e in edges {
        if by_id.insert(e.synapse_id, e).is_some() {
            return Err(GraphError::DuplicateSynapse(e.synapse_id));
        }
    }
    let edges: Vec<SynapseEdge> = by_id.into_values().collect();
    let nodes = edges.iter().flat_map(|e| [e.pre, e.post]).collect();
    Ok(ConnectomeGraph { nodes, edges })
}

/// Synapses as nodes; an edge `(s1, s2, n)` with `s1 < s2` for every neuron
/// `n` touched by both.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineGraph {
    pub nodes: BTreeSet<u32>,
    pub edges: BTreeSet<(u32, u32, u32)>,
}

impl LineGraph {
    /// Edges as synapse pairs, ignoring the shared neuron.
    pub fn pair_set(&self) -> BTreeSet<(u32, u32)> {
        self.edges.iter().map(|&(a, b, _)| (a, b)).collect()
    }
}

pub fn line_graph(g: &ConnectomeGraph) -> LineGraph {
    let mut incident: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for e in &g.edges {
        incident.entry(e.pre).or_default().insert(e.synapse_id);
        incident.entry(e.post).or_default().insert(e.synapse_id);
    }
    let mut edges = BTreeSet::new();
    for (&n, syn) in &incident {
        let s: Vec<u32> = syn.iter().copied().collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                edges.insert((s[i], s[j], n));
            }
        }
    }
    LineGraph { nodes: g.edges.iter().map(|e| e.synapse_id).collect(), edges }
}

/// One-to-one correspondence between predicted and ground-truth synapses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `(pred id, gt id, overlapping voxels)`.
    pub pairs: Vec<(u32, u32, usize)>,
    pub unmatched_pred: Vec<u32>,
    pub unmatched_gt: Vec<u32>,
}

/// Greedy matching by descending voxel overlap (ties to smaller pred id,
/// then smaller gt id); pairs overlapping by fewer than `min_overlap` voxels
/// stay unmatched.
pub fn match_synapses(pred: &[(u32, Vec<usize>)], gt: &[(u32, Vec<usize>)], min_overlap: usize) -> Matching {
    let mut owner: HashMap<usize, u32> = HashMap::new();
    for (id, vox) in gt {
        for &v in vox {
            owner.insert(v, *id);
        }
    }
    let mut overlaps: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (pid, vox) in pred {
        for v in vox {
            if let Some(&g) = owner.get(v) {
                *overlaps.entry((*pid, g)).or_default() += 1;
            }
        }
    }
    let mut cand: Vec<(usize, u32, u32)> =
        overlaps.into_iter().filter(|&(_, n)| n >= min_overlap.max(1)).map(|((p, g), n)| (n, p, g)).collect();
    cand.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (BTreeSet::new(), BTreeSet::new());
    let mut pairs = Vec::new();
    for (n, p, g) in cand {
        if !used_p.contains(&p) && !used_g.contains(&g) {
            used_p.insert(p);
            used_g.insert(g);
            pairs.push((p, g, n));
        }
    }
    pairs.sort_unstable();
    Matching {
        pairs,
        unmatched_pred: pred.iter().map(|(i, _)| *i).filter(|i| !used_p.contains(i)).collect(),
        unmatched_gt: gt.iter().map(|(i, _)| *i).filter(|i| !used_g.contains(i)).collect(),
    }
}

/// Identity matching for graphs that already share synapse ids.
pub fn identity_matching(pred: &LineGraph, gt: &LineGraph) -> Matching {
    Matching {
        pairs: pred.nodes.intersection(&gt.nodes).map(|&i| (i, i, 1)).collect(),
        unmatched_pred: pred.nodes.difference(&gt.nodes).copied().collect(),
        unmatched_gt: gt.nodes.difference(&pred.nodes).copied().collect(),
    }
}

/// Relabel both line graphs into a shared id space and add every synapse
/// missing from one side as an isolated node.
///
/// Canonical ids: matched pairs first (by gt id), then unmatched gt, then
/// unmatched pred, numbered from 1.
pub fn augment(l_pred: &LineGraph, l_gt: &LineGraph, mapping: &Matching) -> (LineGraph, LineGraph) {
    let mut matched: Vec<(u32, u32)> = mapping.pairs.iter().map(|&(p, g, _)| (g, p)).collect();
    matched.sort_unstable();
    let mut pred_map = BTreeMap::new();
    let mut gt_map = BTreeMap::new();
    let mut next = 0u32;
    let mut fresh = || {
        next += 1;
        next
    };
    for (g, p) in matched {
        let c = fresh();
        gt_map.insert(g, c);
        pred_map.insert(p, c);
    }
    for &g in l_gt.nodes.iter().filter(|g| !gt_map.contains_key(g)).collect::<Vec<_>>() {
        gt_map.insert(g, fresh());
    }
    for &p in l_pred.nodes.iter().filter(|p| !pred_map.contains_key(p)).collect::<Vec<_>>() {
        pred_map.insert(p, fresh());
    }
    let all: BTreeSet<u32> = (1..=next).collect();
    let relabel = |l: &LineGraph, m: &BTreeMap<u32, u32>| LineGraph {
        nodes: all.clone(),
        edges: l
            .edges
            .iter()
            .map(|&(a, b, n)| {
                let (a, b) = (m[&a], m[&b]);
                (a.min(b), a.max(b), n)
            })
            .collect(),
    };
    (relabel(l_pred, &pred_map), relabel(l_gt, &gt_map))
}

/// Precision, recall and F1 over line-graph edges compared as synapse-id
/// pairs. Empty denominators give 0.
pub fn graph_prf(l_pred: &LineGraph, l_gt: &LineGraph) -> Result<(f64, f64, f64)> {
    if l_pred.nodes != l_gt.nodes {
        return Err(GraphError::NodeSetMismatch { pred: l_pred.nodes.len(), gt: l_gt.nodes.len() });
    }
    let (p, g) = (l_pred.pair_set(), l_gt.pair_set());
    let tp = p.intersection(&g).count();
    Ok(crate::eval::prf(tp, p.len() - tp, g.len() - tp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    GraphMl,
    JsonLines,
    Dot,
}

impl std::str::FromStr for GraphFormat {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphml" => Ok(Self::GraphMl),
            "jsonl" | "json-lines" => Ok(Self::JsonLines),
            "dot" => Ok(Self::Dot),
            _ => Err(GraphError::UnknownFormat(s.into())),
        }
    }
}

impl GraphFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::GraphMl => "graphml",
            Self::JsonLines => "jsonl",
            Self::Dot => "dot",
        }
    }
}

fn direction(e: &SynapseEdge) -> &'static str {
    if e.directed {
        "forward"
    } else {
        "unknown"
    }
}

/// Render a graph in `format`.
pub fn render_graph(g: &ConnectomeGraph, format: GraphFormat) -> String {
    let mut s = String::new();
    match format {
        GraphFormat::GraphMl => {
            s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
            s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
            s.push_str("  <key id=\"kind\" for=\"node\" attr.name=\"kind\" attr.type=\"string\"/>\n");
            s.push_str("  <key id=\"synapse_id\" for=\"edge\" attr.name=\"synapse_id\" attr.type=\"int\"/>\n");
            s.push_str("  <key id=\"direction\" for=\"edge\" attr.name=\"direction\" attr.type=\"string\"/>\n");
            s.push_str("  <graph id=\"connectome\" edgedefault=\"directed\">\n");
            for n in &g.nodes {
                let _ = writeln!(s, "    <node id=\"n{n}\"><data key=\"kind\">neuron</data></node>");
            }
            for e in &g.edges {
                let _ = writeln!(
                    s,
                    "    <edge id=\"s{id}\" source=\"n{}\" target=\"n{}\"><data key=\"synapse_id\">{id}</data><data key=\"direction\">{}</data></edge>",
                    e.pre,
                    e.post,
                    direction(e),
                    id = e.synapse_id
                );
            }
            s.push_str("  </graph>\n</graphml>\n");
        }
        GraphFormat::JsonLines => {
            for e in &g.edges {
                s.push_str(&serde_json::to_string(e).expect("edge serializes"));
                s.push('\n');
            }
        }
        GraphFormat::Dot => {
            s.push_str("digraph connectome {\n");
            for n in &g.nodes {
                let _ = writeln!(s, "  n{n};");
            }
            for e in &g.edges {
                let style = if e.directed { "" } else { ", dir=none" };
                let _ = writeln!(s, "  n{} -> n{} [label=\"s{}\"{style}];", e.pre, e.post, e.synapse_id);
            }
            s.push_str("}\n");
        }
    }
    s
}

pub fn export_graph(g: &ConnectomeGraph, format: GraphFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_graph(g, format)).map_err(|source| GraphError::Io { path: path.into(), source })
}

/// Parse the JSON-lines export back into a graph.
pub fn parse_jsonl(text: &str) -> Result<ConnectomeGraph> {
    let edges = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str::<SynapseEdge>(l).map_err(|e| GraphError::Parse { line: n + 1, message: e.to_string() }))
        .collect::<Result<Vec<_>>>()?;
    build_connectome(edges)
}

pub fn import_jsonl(path: impl AsRef<Path>) -> Result<ConnectomeGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io { path: path.into(), source })?;
    parse_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(id: u32, pre: u32, post: u32) -> SynapseEdge {
        SynapseEdge { synapse_id: id, pre, post, directed: true }
    }

    #[test]
    fn connectome_examples() {
        let g = build_connectome([]).unwrap();
        assert!(g.nodes.is_empty() && g.edges.is_empty());
        let g = build_connectome([e(1, 10, 20), e(2, 20, 30)]).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (3, 2));
        assert!(matches!(build_connectome([e(1, 1, 2), e(1, 2, 3)]), Err(GraphError::DuplicateSynapse(1))));
    }

    #[test]
    fn line_graph_examples() {
        assert!(line_graph(&build_connectome([e(1, 1, 2)]).unwrap()).edges.is_empty());
        // neuron 1 touches three synapses
        let l = line_graph(&build_connectome([e(1, 1, 2), e(2, 3, 1), e(3, 1, 4)]).unwrap());
        assert_eq!(l.edges.len(), 3);
        assert!(l.edges.iter().all(|&(_, _, n)| n == 1));
        let l = line_graph(&build_connectome([e(1, 1, 2), e(2, 3, 4)]).unwrap());
        assert_eq!((l.nodes.len(), l.edges.len()), (2, 0));
    }

    fn vox(id: u32, r: std::ops::Range<usize>) -> (u32, Vec<usize>) {
        (id, r.collect())
    }

    #[test]
    fn matching_examples() {
        let gt = vec![vox(1, 0..10), vox(2, 20..30)];
        let m = match_synapses(&gt, &gt, 1);
        assert_eq!(m.pairs, vec![(1, 1, 10), (2, 2, 10)]);
        // one prediction spans both; the larger overlap wins
        let m = match_synapses(&[vox(7, 5..23)], &gt, 1);
        assert_eq!((m.pairs, m.unmatched_gt), (vec![(7, 1, 5)], vec![2]));
        let m = match_synapses(&[vox(1, 100..110)], &gt, 1);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_pred, vec![1]);
    }

    #[test]
    fn augment_and_prf_examples() {
        let gt = line_graph(&build_connectome([e(1, 1, 2), e(2, 2, 3), e(3, 3, 4), e(4, 1, 4)]).unwrap());
        let (p, g) = augment(&gt, &gt, &identity_matching(&gt, &gt));
        assert_eq!(p, g);
        assert_eq!(graph_prf(&p, &g).unwrap(), (1.0, 1.0, 1.0));
        // drop synapse 4: pred keeps edges (1,2) and (2,3) of gt's four
        let pred = line_graph(&build_connectome([e(1, 1, 2), e(2, 2, 3), e(3, 3, 4)]).unwrap());
        let (p, g) = augment(&pred, &gt, &identity_matching(&pred, &gt));
        assert_eq!(p.nodes.len(), g.nodes.len());
        let (pr, rc, f1) = graph_prf(&p, &g).unwrap();
        assert_eq!((pr, rc), (1.0, 0.5));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(graph_prf(&pred, &gt).is_err());
    }

    #[test]
    fn exports() {
        let empty = build_connectome([]).unwrap();
        assert!(render_graph(&empty, GraphFormat::GraphMl).contains("</graphml>"));
        assert_eq!(parse_jsonl(&render_graph(&empty, GraphFormat::JsonLines)).unwrap(), empty);
        let mut u = e(2, 3, 1);
        u.directed = false;
        let g = build_connectome([e(1, 1, 2), u]).unwrap();
        let dot = render_graph(&g, GraphFormat::Dot);
        assert_eq!(dot.matches("->").count(), 2);
        assert!(dot.contains("dir=none"));
        assert!(render_graph(&g, GraphFormat::GraphMl).contains("<data key=\"direction\">unknown</data>"));
        assert_eq!(parse_jsonl(&render_graph(&g, GraphFormat::JsonLines)).unwrap(), g);
        assert!("xml".parse::<GraphFormat>().is_err());
    }

    fn random_graph(seed: Vec<(u8, u8)>) -> ConnectomeGraph {
        build_connectome(seed.iter().enumerate().map(|(i, &(a, b))| e(i as u32 + 1, a as u32, b as u32 + 6))).unwrap()
    }

    proptest! {
        #[test]
        fn line_edges_count_binomials(pairs in proptest::collection::vec((0u8..6, 0u8..6), 0..20)) {
            let g = random_graph(pairs);
            let mut deg: BTreeMap<u32, usize> = BTreeMap::new();
            for ed in &g.edges {
                *deg.entry(ed.pre).or_default() += 1;
                *deg.entry(ed.post).or_default() += 1;
            }
            let expected: usize = deg.values().map(|&d| d * d.saturating_sub(1) / 2).sum();
            prop_assert_eq!(line_graph(&g).edges.len(), expected);
        }

        #[test]
        fn prf_swaps_under_exchange(a in proptest::collection::vec((0u8..6, 0u8..6), 1..15), keep in proptest::collection::vec(any::<bool>(), 15)) {
            let g = random_graph(a);
            let kept: Vec<_> = g.edges.iter().zip(&keep).filter(|(_, &k)| k).map(|(e, _)| *e).collect();
            let gt = line_graph(&g);
            let pred = line_graph(&build_connectome(kept).unwrap());
            let (p1, g1) = augment(&pred, &gt, &identity_matching(&pred, &gt));
            let (g2, p2) = augment(&gt, &pred, &identity_matching(&gt, &pred));
            let (pa, ra, fa) = graph_prf(&p1, &g1).unwrap();
            let (pb, rb, fb) = graph_prf(&g2, &p2).unwrap();
            prop_assert_eq!((pa, ra), (rb, pb));
            prop_assert!((fa - fb).abs() < 1e-12);
            let (p3, g3) = augment(&p1, &g1, &identity_matching(&p1, &g1));
            prop_assert_eq!((p3, g3), (p1, g1));
        }
    }
}
