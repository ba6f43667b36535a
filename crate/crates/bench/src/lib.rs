//! Graph shapes shared by the benchmarks.

use flowgraph_core::fixtures::relay_graph;
use flowgraph_core::DagGraph;

/// `depth` layers of `width` relay nodes; each node reads from two nodes of
/// the previous layer.
pub fn layered_graph(width: usize, depth: usize) -> DagGraph {
    let ids: Vec<String> = (0..depth).flat_map(|d| (0..width).map(move |w| format!("n{d:03}_{w:03}"))).collect();
    let mut edges = Vec::new();
    for d in 1..depth {
        for w in 0..width {
            let to = format!("n{d:03}_{w:03}");
            edges.push((format!("n{:03}_{w:03}", d - 1), to.clone()));
            edges.push((format!("n{:03}_{:03}", d - 1, (w + 1) % width), to));
        }
    }
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let edge_refs: Vec<(&str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    relay_graph(&id_refs, &edge_refs, |_| 0)
}
