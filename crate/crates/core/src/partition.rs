//! View-graph partitioning: balanced spectral cut followed by flood-fill
//! expansion of the parts until they overlap enough.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::sorted_symmetric_eigen;
use crate::scene::{pair_key, ImageId, TwoViewEdge, ViewGraph};
use crate::{Result, SfmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Partition count is `ceil(|V| / max_partition_size)` unless set explicitly.
    pub max_partition_size: usize,
    pub num_partitions: Option<usize>,
    /// Expansion stops once the overlap ratio reaches this value.
    pub overlap_threshold: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            max_partition_size: 500,
            num_partitions: None,
            overlap_threshold: 0.3,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_partition_size == 0 {
            return Err(SfmError::config("max_partition_size", "must be at least 1"));
        }
        if self.num_partitions == Some(0) {
            return Err(SfmError::config("num_partitions", "must be at least 1"));
        }
        if !(self.overlap_threshold >= 0.0) || !self.overlap_threshold.is_finite() {
            return Err(SfmError::config("overlap_threshold", "must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn partition_count(&self, num_images: usize) -> usize {
        self.num_partitions
            .unwrap_or_else(|| num_images.div_ceil(self.max_partition_size))
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cut {
    pub parts: Vec<BTreeSet<ImageId>>,
    /// Total weight of edges joining different parts.
    pub cut_weight: f64,
}

fn edge_weight(e: &TwoViewEdge) -> f64 {
    e.weight().max(1) as f64
}

/// Fiedler ordering of `nodes` on the normalized weighted Laplacian.
fn spectral_order(graph: &ViewGraph, nodes: &[ImageId]) -> Vec<ImageId> {
    let n = nodes.len();
    let index: BTreeMap<ImageId, usize> = nodes.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for e in graph.edges() {
        if let (Some(&a), Some(&b)) = (index.get(&e.i), index.get(&e.j)) {
            let x = edge_weight(e);
            w[(a, b)] += x;
            w[(b, a)] += x;
        }
    }
    let degree: Vec<f64> = (0..n).map(|k| w.row(k).sum()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| if *d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let delta = if a == b && degree[a] > 0.0 { 1.0 } else { 0.0 };
            lap[(a, b)] = delta - inv_sqrt[a] * w[(a, b)] * inv_sqrt[b];
        }
    }
    let (_, vectors) = sorted_symmetric_eigen(lap);
    let col = if n > 1 { 1 } else { 0 };
    let mut f: Vec<f64> = (0..n).map(|k| vectors[(k, col)] * inv_sqrt[k]).collect();
    // Deterministic sign: the smallest id sits on the non-positive side.
    if f[0] > 0.0 {
        f.iter_mut().for_each(|x| *x = -*x);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(nodes[a].cmp(&nodes[b])));
    order.into_iter().map(|k| nodes[k]).collect()
}

fn bisect(graph: &ViewGraph, nodes: Vec<ImageId>, k: usize, out: &mut Vec<BTreeSet<ImageId>>) {
    if k <= 1 || nodes.len() <= 1 {
        out.push(nodes.into_iter().collect());
        return;
    }
    let left_k = k / 2;
    let order = spectral_order(graph, &nodes);
    let split = (nodes.len() * left_k + k / 2) / k;
    let split = split.clamp(left_k, nodes.len() - (k - left_k));
    let (left, right) = order.split_at(split);
    let mut left = left.to_vec();
    let mut right = right.to_vec();
    left.sort_unstable();
    right.sort_unstable();
    bisect(graph, left, left_k, out);
    bisect(graph, right, k - left_k, out);
}

/// Splits the images into `k` parts by recursive spectral bisection.
pub fn graph_cut(graph: &ViewGraph, k: usize) -> Result<Cut> {
    let nodes: Vec<ImageId> = graph.images().collect();
    if nodes.is_empty() {
        return Err(SfmError::EmptyGraph);
    }
    if k == 0 || k > nodes.len() {
        return Err(SfmError::config(
            "num_partitions",
            format!("{k} partitions requested for {} images", nodes.len()),
        ));
    }
    let mut parts = Vec::with_capacity(k);
    bisect(graph, nodes, k, &mut parts);
    let label: BTreeMap<ImageId, usize> = parts
        .iter()
        .enumerate()
        .flat_map(|(p, s)| s.iter().map(move |id| (*id, p)))
        .collect();
    let cut_weight = graph
        .edges()
        .filter(|e| label[&e.i] != label[&e.j])
        .map(edge_weight)
        .sum();
    Ok(Cut { parts, cut_weight })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    /// Node to the layer it joined in (0 for nodes of the initial cut).
    pub nodes: BTreeMap<ImageId, usize>,
    pub edges: BTreeSet<(ImageId, ImageId)>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node_set(&self) -> BTreeSet<ImageId> {
        self.nodes.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSet {
    pub partitions: Vec<Partition>,
    /// `separators[l][k]`: separators of partition `k` in layer `l + 1`.
    pub separators: Vec<Vec<BTreeSet<ImageId>>>,
    /// Overlap ratio after the cut and after every expansion.
    pub ratios: Vec<f64>,
    pub cut_weight: f64,
    pub total_nodes: usize,
}

impl PartitionSet {
    pub fn overlap_ratio(&self) -> f64 {
        overlap_ratio(&self.partitions, self.total_nodes)
    }

    /// Image id to every `(partition, layer)` it belongs to.
    pub fn assignment(&self) -> BTreeMap<ImageId, Vec<(usize, usize)>> {
        let mut out: BTreeMap<ImageId, Vec<(usize, usize)>> = BTreeMap::new();
        for (k, p) in self.partitions.iter().enumerate() {
            for (id, layer) in &p.nodes {
                out.entry(*id).or_default().push((k, *layer));
            }
        }
        out
    }

    /// View graph of one partition: its images and every edge among them.
    pub fn induced_subgraph(&self, k: usize, graph: &ViewGraph) -> ViewGraph {
        graph.induced(&self.partitions[k].node_set())
    }
}

/// `(sum_k |V_k| - |V|) / |V|`.
pub fn overlap_ratio(partitions: &[Partition], total_nodes: usize) -> f64 {
    if total_nodes == 0 {
        return 0.0;
    }
    let sum: usize = partitions.iter().map(Partition::len).sum();
    (sum as f64 - total_nodes as f64) / total_nodes as f64
}

/// Flood-fill expansion. Each round collects, per partition, the edges not yet
/// in it that touch its newest separators, visits them by descending weight and
/// gives each to the smallest partition holding exactly one endpoint.
pub fn expand_partitions(graph: &ViewGraph, cut: &Cut, overlap_threshold: f64) -> PartitionSet {
    let mut partitions: Vec<Partition> = cut
        .parts
        .iter()
        .map(|nodes| {
            let set: BTreeSet<ImageId> = nodes.clone();
            Partition {
                nodes: nodes.iter().map(|id| (*id, 0)).collect(),
                edges: graph
                    .edges()
                    .filter(|e| set.contains(&e.i) && set.contains(&e.j))
                    .map(TwoViewEdge::key)
                    .collect(),
            }
        })
        .collect();
    let k_count = partitions.len();
    let total_nodes = graph.num_images();
    let first: Vec<BTreeSet<ImageId>> = partitions
        .iter()
        .map(|p| {
            graph
                .edges()
                .filter(|e| p.contains(e.i) != p.contains(e.j))
                .flat_map(|e| [e.i, e.j])
                .filter(|id| p.contains(*id))
                .collect()
        })
        .collect();
    let mut separators = vec![first];
    let mut ratios = vec![overlap_ratio(&partitions, total_nodes)];
    let adjacency: BTreeMap<ImageId, Vec<&TwoViewEdge>> = {
        let mut m: BTreeMap<ImageId, Vec<&TwoViewEdge>> = BTreeMap::new();
        for e in graph.edges() {
            m.entry(e.i).or_default().push(e);
            m.entry(e.j).or_default().push(e);
        }
        m
    };
    let mut layer = 0;
    while *ratios.last().expect("non-empty") < overlap_threshold {
        let frontier = separators.last().expect("non-empty");
        let mut discarded: BTreeSet<(ImageId, ImageId)> = BTreeSet::new();
        for (k, p) in partitions.iter().enumerate() {
            for id in &frontier[k] {
                for e in adjacency.get(id).into_iter().flatten() {
                    if !p.edges.contains(&e.key()) {
                        discarded.insert(e.key());
                    }
                }
            }
        }
        if discarded.is_empty() {
            break;
        }
        let mut order: Vec<&TwoViewEdge> = discarded
            .iter()
            .map(|k| graph.edge(k.0, k.1).expect("edge exists"))
            .collect();
        order.sort_by(|a, b| b.weight().cmp(&a.weight()).then(a.key().cmp(&b.key())));
        layer += 1;
        let mut added: Vec<BTreeSet<ImageId>> = vec![BTreeSet::new(); k_count];
        for e in order {
            let holders = |exact: bool| {
                (0..k_count)
                    .filter(|&k| {
                        let (a, b) = (partitions[k].contains(e.i), partitions[k].contains(e.j));
                        if exact {
                            a != b
                        } else {
                            (a || b) && !partitions[k].edges.contains(&e.key())
                        }
                    })
                    .min_by_key(|&k| (partitions[k].len(), k))
            };
            let Some(k) = holders(true).or_else(|| holders(false)) else {
                continue;
            };
            let p = &mut partitions[k];
            for id in [e.i, e.j] {
                if !p.nodes.contains_key(&id) {
                    p.nodes.insert(id, layer);
                    added[k].insert(id);
                }
            }
            p.edges.insert(pair_key(e.i, e.j));
        }
        let grew = added.iter().any(|s| !s.is_empty());
        separators.push(added);
        ratios.push(overlap_ratio(&partitions, total_nodes));
        if !grew {
            break;
        }
    }
    PartitionSet {
        partitions,
        separators,
        ratios,
        cut_weight: cut.cut_weight,
        total_nodes,
    }
}

/// Cut plus expansion with the configured partition count.
pub fn partition_view_graph(graph: &ViewGraph, config: &PartitionConfig) -> Result<PartitionSet> {
    config.validate()?;
    let k = config.partition_count(graph.num_images());
    let cut = graph_cut(graph, k)?;
    Ok(expand_partitions(graph, &cut, config.overlap_threshold))
}
