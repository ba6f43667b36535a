//! Independent oracles and random graph generators. Shared by the core
//! integration tests and the acceptance suite (included by path).

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use flowgraph_core::compiler::NodeInstance;
use flowgraph_core::fixtures::graph_from_edges;
use flowgraph_core::protocol::{ExecutionKind, NodeSpec, PortSchema};
use flowgraph_core::{DagGraph, Edge, PortRef, ValueKind};
use rand::rngs::StdRng;
use rand::Rng;

/// Node ids and directed edges of a generated graph.
#[derive(Debug, Clone)]
pub struct RawGraph {
    pub ids: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl RawGraph {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn build(&self) -> DagGraph {
        let ids: Vec<&str> = self.ids.iter().map(String::as_str).collect();
        let edges: Vec<(&str, &str)> = self.edges.iter().map(|&(a, b)| (ids[a], ids[b])).collect();
        graph_from_edges(&ids, &edges)
    }
}

fn node_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("n{i:02}")).collect()
}

/// Random DAG on `n` nodes: edges only go forward along a shuffled order.
pub fn random_dag(rng: &mut StdRng, n: usize, density: f64) -> RawGraph {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(density) {
                edges.push((order[a], order[b]));
            }
        }
    }
    RawGraph { ids: node_ids(n), edges }
}

/// Random DAG plus one injected back edge (or a self-loop) closing a cycle.
pub fn random_cyclic(rng: &mut StdRng, n: usize, density: f64) -> RawGraph {
    let mut g = random_dag(rng, n, density);
    let a = rng.gen_range(0..n);
    let b = rng.gen_range(0..n);
    if a == b {
        g.edges.push((a, a));
    } else {
        g.edges.push((a, b));
        g.edges.push((b, a));
    }
    g
}

/// `reach[u][v]`: a path of length at least one leads from u to v.
pub fn reachability(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    (0..n)
        .map(|start| {
            let mut seen = vec![false; n];
            let mut stack: Vec<usize> = adj[start].clone();
            while let Some(v) = stack.pop() {
                if !seen[v] {
                    seen[v] = true;
                    stack.extend(&adj[v]);
                }
            }
            seen
        })
        .collect()
}

/// Groups of mutually reachable nodes that lie on at least one cycle.
pub fn cyclic_groups_oracle(g: &RawGraph) -> BTreeSet<Vec<String>> {
    let reach = reachability(g.n(), &g.edges);
    let mut groups = BTreeSet::new();
    for (u, row) in reach.iter().enumerate() {
        if !row[u] {
            continue;
        }
        let mut group: Vec<String> = (0..g.n()).filter(|&v| row[v] && reach[v][u]).map(|v| g.ids[v].clone()).collect();
        group.sort();
        groups.insert(group);
    }
    groups
}

/// Longest-path depth per node, memoized over predecessors.
pub fn depth_oracle(g: &RawGraph) -> Vec<usize> {
    fn depth(v: usize, preds: &[Vec<usize>], memo: &mut [Option<usize>]) -> usize {
        if let Some(d) = memo[v] {
            return d;
        }
        let d = preds[v].iter().map(|&p| depth(p, preds, memo) + 1).max().unwrap_or(0);
        memo[v] = Some(d);
        d
    }
    let mut preds = vec![Vec::new(); g.n()];
    for &(a, b) in &g.edges {
        preds[b].push(a);
    }
    let mut memo = vec![None; g.n()];
    (0..g.n()).map(|v| depth(v, &preds, &mut memo)).collect()
}

/// Expected layering: ids grouped by oracle depth, ascending within a layer.
pub fn layers_oracle(g: &RawGraph) -> Vec<Vec<String>> {
    let depths = depth_oracle(g);
    let mut by_depth: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (v, d) in depths.into_iter().enumerate() {
        by_depth.entry(d).or_default().push(g.ids[v].clone());
    }
    by_depth
        .into_values()
        .map(|mut ids| {
            ids.sort();
            ids
        })
        .collect()
}

fn probe_spec(type_id: &str, inputs: Vec<PortSchema>, outputs: Vec<PortSchema>) -> NodeSpec {
    NodeSpec {
        type_id: type_id.into(),
        semantic_description: "schema probe".into(),
        inputs,
        outputs,
        config_schema: vec![],
        execution_kind: ExecutionKind::Tool,
        required_secrets: vec![],
        terminal: true,
    }
}

/// `src.out` (kind `s`) wired into `dst.in` (kind `t`).
pub fn lattice_graph(s: ValueKind, t: ValueKind) -> DagGraph {
    let src = NodeInstance {
        node_id: "src".into(),
        spec: probe_spec("probe.emit", vec![], vec![PortSchema::output("out", s, "probe output")]),
        config: Default::default(),
        literals: Default::default(),
    };
    let dst = NodeInstance {
        node_id: "dst".into(),
        spec: probe_spec("probe.accept", vec![PortSchema::input("in", t, "probe input", true)], vec![]),
        config: Default::default(),
        literals: Default::default(),
    };
    DagGraph::new("lattice", vec![src, dst], vec![Edge { from: PortRef::new("src", "out"), to: PortRef::new("dst", "in") }])
}

/// The assignability rule restated independently: exact match, or a dynamic target.
pub fn assignable_oracle(s: ValueKind, t: ValueKind) -> bool {
    s.as_str() == t.as_str() || t.as_str() == "dynamic"
}

/// Attempts the executor should make: `f` leading transient failures with `r` retries.
pub fn expected_attempts(fail_times: u32, max_retries: u32) -> (u32, bool) {
    let mut attempts = 0;
    loop {
        attempts += 1;
        if attempts > fail_times {
            return (attempts, true);
        }
        if attempts > max_retries {
            return (attempts, false);
        }
    }
}

pub fn random_size(rng: &mut StdRng, max: usize) -> usize {
    rng.gen_range(1..=max)
}
