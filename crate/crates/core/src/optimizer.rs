//! Layer planning: Kahn frontier peeling, so each node lands on the layer
//! equal to its longest-path depth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::DagGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecutionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "parallel" => Some(ExecutionMode::Parallel),
            "sequential" => Some(ExecutionMode::Sequential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub graph_id: String,
    pub layers: Vec<Vec<String>>,
    pub mode: ExecutionMode,
}

impl LayerPlan {
    /// Layer index of `node_id`, if present.
    pub fn layer_of(&self, node_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.iter().any(|n| n == node_id))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layer plans serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OptimizerError {
    #[error("graph contains a cycle through {0:?}")]
    CyclicInput(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthStats {
    pub max_width: usize,
    pub layer_count: usize,
    pub node_count: usize,
}

pub fn compute_layers(graph: &DagGraph) -> Result<LayerPlan, OptimizerError> {
    let adj = graph.successors();
    let mut indegree = vec![0usize; adj.len()];
    for succ in &adj {
        for &v in succ {
            indegree[v] += 1;
        }
    }
    // instances are id-sorted, so index order is id order
    let mut frontier: Vec<usize> = (0..adj.len()).filter(|&i| indegree[i] == 0).collect();
    let mut layers = Vec::new();
    let mut placed = 0;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in &adj[u] {
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    next.push(v);
                }
            }
        }
        placed += frontier.len();
        layers.push(frontier.iter().map(|&i| graph.instances[i].node_id.clone()).collect());
        next.sort_unstable();
        frontier = next;
    }
    if placed < adj.len() {
        let stuck = (0..adj.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| graph.instances[i].node_id.clone())
            .collect();
        return Err(OptimizerError::CyclicInput(stuck));
    }
    Ok(LayerPlan { graph_id: graph.graph_id.clone(), layers, mode: ExecutionMode::Parallel })
}

/// Singleton layers in the same topological order.
pub fn sequentialize(plan: &LayerPlan) -> LayerPlan {
    LayerPlan {
        graph_id: plan.graph_id.clone(),
        layers: plan.layers.iter().flatten().map(|id| vec![id.clone()]).collect(),
        mode: ExecutionMode::Sequential,
    }
}

pub fn width_stats(plan: &LayerPlan) -> WidthStats {
    WidthStats {
        max_width: plan.layers.iter().map(Vec::len).max().unwrap_or(0),
        layer_count: plan.layers.len(),
        node_count: plan.layers.iter().map(Vec::len).sum(),
    }
}
