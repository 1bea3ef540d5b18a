//! Successful set, per-sample neighborhoods, and normalized adjacency
//! weights with snapshot routing targets.

use crate::data::Dataset;
use crate::embed::{gaussian_similarity, EmbeddingTable, SimilarityConfig};
use crate::error::{Result, RomaError};
use crate::forward::{extract_routing, RoutingVector};
use crate::model::Model;
use crate::rng;
use crate::select::TokenSelector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::Path;

/// Sample ids the model currently answers correctly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuccessIndex {
    pub indices: BTreeSet<u32>,
}

impl SuccessIndex {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    Knn,
    Eps,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfig {
    pub mode: NeighborMode,
    pub k: usize,
    pub eps: f64,
    pub exclude_self: bool,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            mode: NeighborMode::Knn,
            k: 3,
            eps: 0.5,
            exclude_self: true,
        }
    }
}

impl NeighborConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            NeighborMode::Knn | NeighborMode::Random => {
                if self.k < 1 {
                    return Err(RomaError::Config("k must be >= 1".into()));
                }
            }
            NeighborMode::Eps => {
                if !(0.0 < self.eps && self.eps < 1.0) {
                    return Err(RomaError::Config(format!(
                        "eps {} must lie in (0, 1)",
                        self.eps
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NeighborList {
    pub ids: Vec<u32>,
    pub similarities: Vec<f64>,
}

/// Per-sample neighborhood row with snapshot routing targets.
#[derive(Debug, Clone)]
pub struct GraphRow {
    pub neighbor_ids: Vec<u32>,
    pub similarities: Vec<f64>,
    /// Normalized weights summing to 1 (empty rows stay empty).
    pub weights: Vec<f64>,
    /// Routing vectors of the neighbors, captured at graph-build time.
    pub targets: Vec<RoutingVector>,
}

#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub success: SuccessIndex,
    pub rows: BTreeMap<u32, GraphRow>,
}

/// Ids whose argmax prediction matches the label under plain forward.
pub fn successful_set(model: &Model, dataset: &Dataset) -> Result<SuccessIndex> {
    let hits: Vec<Option<u32>> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let trace = model.forward(&s.tokens)?;
            Ok((trace.predicted_class() == s.label).then_some(s.id))
        })
        .collect::<Result<_>>()?;
    Ok(SuccessIndex {
        indices: hits.into_iter().flatten().collect(),
    })
}

fn candidates<'a>(
    query: u32,
    table: &'a EmbeddingTable,
    success: &SuccessIndex,
    exclude_self: bool,
    sim_cfg: &SimilarityConfig,
) -> Result<Vec<(u32, f64)>> {
    let q = table.get(query)?;
    let mut out = Vec::new();
    for &j in &success.indices {
        if exclude_self && j == query {
            continue;
        }
        let s = gaussian_similarity(q, table.get(j)?, sim_cfg)?;
        out.push((j, s));
    }
    Ok(out)
}

/// The k most similar members of S (minus the query when excluded), ties
/// broken by lower sample id. Returns fewer than k when S is small.
pub fn knn_neighbors(
    query: u32,
    table: &EmbeddingTable,
    success: &SuccessIndex,
    cfg: &NeighborConfig,
    sim_cfg: &SimilarityConfig,
) -> Result<NeighborList> {
    cfg.validate()?;
    let mut cands = candidates(query, table, success, cfg.exclude_self, sim_cfg)?;
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cands.truncate(cfg.k);
    Ok(NeighborList {
        ids: cands.iter().map(|c| c.0).collect(),
        similarities: cands.iter().map(|c| c.1).collect(),
    })
}

/// All members of S with similarity >= eps. Possibly empty.
pub fn eps_neighbors(
    query: u32,
    table: &EmbeddingTable,
    success: &SuccessIndex,
    cfg: &NeighborConfig,
    sim_cfg: &SimilarityConfig,
) -> Result<NeighborList> {
    cfg.validate()?;
    let mut cands = candidates(query, table, success, cfg.exclude_self, sim_cfg)?;
    cands.retain(|c| c.1 >= cfg.eps);
    cands.sort_by_key(|c| c.0);
    Ok(NeighborList {
        ids: cands.iter().map(|c| c.0).collect(),
        similarities: cands.iter().map(|c| c.1).collect(),
    })
}

/// k neighbors drawn uniformly from S without replacement (baseline mode).
/// Deterministic in (seed, query id).
pub fn random_neighbors(
    query: u32,
    table: &EmbeddingTable,
    success: &SuccessIndex,
    cfg: &NeighborConfig,
    sim_cfg: &SimilarityConfig,
    seed: u64,
) -> Result<NeighborList> {
    cfg.validate()?;
    let pool: Vec<u32> = success
        .indices
        .iter()
        .copied()
        .filter(|&j| !(cfg.exclude_self && j == query))
        .collect();
    let mut rng = rng::indexed_stream(seed, "graph.random", query as u64);
    let mut picked = Vec::new();
    let mut remaining = pool;
    while picked.len() < cfg.k && !remaining.is_empty() {
        let idx = rng.gen_range(0..remaining.len());
        picked.push(remaining.swap_remove(idx));
    }
    picked.sort_unstable();
    let q = table.get(query)?;
    let sims = picked
        .iter()
        .map(|&j| gaussian_similarity(q, table.get(j)?, sim_cfg))
        .collect::<Result<Vec<f64>>>()?;
    Ok(NeighborList {
        ids: picked,
        similarities: sims,
    })
}

/// Normalized adjacency weights: proportional to similarities, summing to 1.
/// An empty list signals "no neighbors" to the caller, which drops the
/// manifold term for that sample.
pub fn adjacency_weights(similarities: &[f64]) -> Result<Vec<f64>> {
    if similarities.is_empty() {
        return Err(RomaError::Input("no neighbors".into()));
    }
    if similarities.iter().any(|&s| s <= 0.0) {
        return Err(RomaError::Input("similarities must be positive".into()));
    }
    let sum: f64 = similarities.iter().sum();
    Ok(similarities.iter().map(|&s| s / sum).collect())
}

/// Compose S, per-sample neighborhoods, weights, and snapshot routing
/// targets. Pure function of (model parameters, dataset, embeddings, cfg).
#[allow(clippy::too_many_arguments)]
pub fn build_graph(
    model: &Model,
    dataset: &Dataset,
    table: &EmbeddingTable,
    cfg: &NeighborConfig,
    sim_cfg: &SimilarityConfig,
    layer_set: &[usize],
    token_selector: TokenSelector,
    seed: u64,
) -> Result<NeighborGraph> {
    cfg.validate()?;
    let success = successful_set(model, dataset)?;

    // snapshot routing vectors for every successful sample
    let snapshot: BTreeMap<u32, RoutingVector> = dataset
        .samples
        .par_iter()
        .filter(|s| success.indices.contains(&s.id))
        .map(|s| {
            let trace = model.forward(&s.tokens)?;
            Ok((s.id, extract_routing(&trace, layer_set, token_selector)?))
        })
        .collect::<Result<_>>()?;

    let mut rows = BTreeMap::new();
    for s in &dataset.samples {
        let list = match cfg.mode {
            NeighborMode::Knn => knn_neighbors(s.id, table, &success, cfg, sim_cfg)?,
            NeighborMode::Eps => eps_neighbors(s.id, table, &success, cfg, sim_cfg)?,
            NeighborMode::Random => {
                random_neighbors(s.id, table, &success, cfg, sim_cfg, seed)?
            }
        };
        let weights = if list.ids.is_empty() {
            Vec::new()
        } else {
            adjacency_weights(&list.similarities)?
        };
        let targets = list
            .ids
            .iter()
            .map(|id| snapshot[id].clone())
            .collect();
        rows.insert(
            s.id,
            GraphRow {
                neighbor_ids: list.ids,
                similarities: list.similarities,
                weights,
                targets,
            },
        );
    }
    Ok(NeighborGraph { success, rows })
}

impl NeighborGraph {
    pub fn mean_neighbors(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let total: usize = self.rows.values().map(|r| r.neighbor_ids.len()).sum();
        total as f64 / self.rows.len() as f64
    }

    /// Inspection dump: one JSONL row {id, neighbors, weights} per sample.
    pub fn dump(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            id: u32,
            neighbors: &'a [u32],
            weights: &'a [f64],
        }
        let file = std::fs::File::create(path).map_err(|e| RomaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (&id, row) in &self.rows {
            let line = serde_json::to_string(&Row {
                id,
                neighbors: &row.neighbor_ids,
                weights: &row.weights,
            })
            .unwrap();
            writeln!(w, "{line}").map_err(|e| RomaError::io(path, e))?;
        }
        w.flush().map_err(|e| RomaError::io(path, e))
    }
}
