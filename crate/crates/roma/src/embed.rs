//! Task embeddings and the Gaussian similarity kernel.
//!
//! Two embedders ship: a cluster-anchor embedder that uses the latent
//! cluster metadata (jittered unit anchors), and a content-based embedder
//! projecting the token-count histogram. Both emit L2-normalized vectors,
//! which keeps the bandwidth heuristic and epsilon thresholds comparable.

use crate::data::{token_histogram, Dataset, Sample};
use crate::error::{Result, RomaError};
use crate::linalg::{l2_norm, squared_distance};
use crate::rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const DEFAULT_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    fn normalized(mut values: Vec<f64>) -> Self {
        let n = l2_norm(&values);
        if n > 0.0 {
            values.iter_mut().for_each(|v| *v /= n);
        } else {
            values[0] = 1.0;
        }
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub sigma: f64,
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 || !self.sigma.is_finite() {
            return Err(RomaError::Config(format!("sigma {} must be > 0", self.sigma)));
        }
        Ok(())
    }
}

/// Unit anchor for a cluster, deterministic in (seed, cluster).
fn cluster_anchor(cluster: u32, d_emb: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::indexed_stream(seed, "embed.anchor", cluster as u64);
    let v: Vec<f64> = (0..d_emb).map(|_| StandardNormal.sample(&mut rng)).collect();
    Embedding::normalized(v).values
}

/// Cluster-anchor embedding: the cluster's fixed unit anchor plus Gaussian
/// jitter, renormalized. Deterministic in (sample id, seed).
pub fn embed_oracle(sample: &Sample, d_emb: usize, jitter: f64, seed: u64) -> Result<Embedding> {
    if d_emb == 0 {
        return Err(RomaError::Config("embedding dim must be >= 1".into()));
    }
    let mut v = cluster_anchor(sample.cluster, d_emb, seed);
    if jitter > 0.0 {
        let mut rng = rng::indexed_stream(seed, "embed.jitter", sample.id as u64);
        for x in v.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x += jitter * g;
        }
    }
    Ok(Embedding::normalized(v))
}

/// Content-based embedding: fixed random projection of the token-count
/// histogram, L2-normalized. Uses no cluster metadata.
pub fn embed_histogram(sample: &Sample, vocab: usize, d_emb: usize, seed: u64) -> Result<Embedding> {
    if d_emb == 0 {
        return Err(RomaError::Config("embedding dim must be >= 1".into()));
    }
    if let Some(&bad) = sample.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(RomaError::Input(format!("token {bad} >= vocab {vocab}")));
    }
    let hist = token_histogram(&sample.tokens, vocab);
    let mut rng = rng::stream(seed, "embed.projection");
    let mut v = vec![0.0; d_emb];
    // row-major projection d_emb x vocab, regenerated from the stream
    for vi in v.iter_mut() {
        for h in &hist {
            let w: f64 = StandardNormal.sample(&mut rng);
            *vi += w * h;
        }
    }
    Ok(Embedding::normalized(v))
}

/// Gaussian similarity: exp(-||a - b||^2 / (2 sigma^2)), in (0, 1].
pub fn gaussian_similarity(a: &Embedding, b: &Embedding, cfg: &SimilarityConfig) -> Result<f64> {
    cfg.validate()?;
    if a.dim() != b.dim() {
        return Err(RomaError::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d2 = squared_distance(&a.values, &b.values);
    Ok((-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp())
}

/// Map sample id -> embedding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    pub entries: BTreeMap<u32, Embedding>,
}

impl EmbeddingTable {
    pub fn get(&self, id: u32) -> Result<&Embedding> {
        self.entries
            .get(&id)
            .ok_or_else(|| RomaError::Input(format!("no embedding for sample id {id}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedder {
    Oracle,
    Histogram,
}

/// Embed a whole dataset with the chosen embedder.
pub fn embed_dataset(
    dataset: &Dataset,
    embedder: Embedder,
    vocab: usize,
    d_emb: usize,
    jitter: f64,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut entries = BTreeMap::new();
    for s in &dataset.samples {
        let e = match embedder {
            Embedder::Oracle => embed_oracle(s, d_emb, jitter, seed)?,
            Embedder::Histogram => embed_histogram(s, vocab, d_emb, seed)?,
        };
        entries.insert(s.id, e);
    }
    Ok(EmbeddingTable { entries })
}

/// Median pairwise distance over the table: the default bandwidth.
/// Deterministic; exact over all pairs.
pub fn median_distance_sigma(table: &EmbeddingTable) -> Result<f64> {
    let embs: Vec<&Embedding> = table.entries.values().collect();
    if embs.len() < 2 {
        return Err(RomaError::Input(
            "need at least two embeddings for the bandwidth heuristic".into(),
        ));
    }
    let mut dists = Vec::with_capacity(embs.len() * (embs.len() - 1) / 2);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            dists.push(squared_distance(&embs[i].values, &embs[j].values).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median <= 0.0 {
        // all-identical embeddings; any positive bandwidth behaves the same
        return Ok(1.0);
    }
    Ok(median)
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    id: u32,
    vector: Vec<f64>,
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| RomaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (&id, emb) in &table.entries {
        let row = EmbeddingRow {
            id,
            vector: emb.values.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&row).unwrap()).map_err(|e| RomaError::io(path, e))?;
    }
    w.flush().map_err(|e| RomaError::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| RomaError::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut entries = BTreeMap::new();
    let mut dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| RomaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(&line).map_err(|e| RomaError::Parse {
            path: path.into(),
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        if let Some(d) = dim {
            if row.vector.len() != d {
                return Err(RomaError::Parse {
                    path: path.into(),
                    line: lineno + 1,
                    detail: format!(
                        "sample id {}: dimension {} != table dimension {d}",
                        row.id,
                        row.vector.len()
                    ),
                });
            }
        } else {
            dim = Some(row.vector.len());
        }
        if entries.insert(row.id, Embedding { values: row.vector }).is_some() {
            return Err(RomaError::Parse {
                path: path.into(),
                line: lineno + 1,
                detail: format!("duplicate sample id {}", row.id),
            });
        }
    }
    Ok(EmbeddingTable { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn sample(id: u32, cluster: u32, tokens: Vec<u32>) -> Sample {
        Sample {
            id,
            tokens,
            label: 0,
            cluster,
        }
    }

    #[test]
    fn zero_jitter_equals_anchor() {
        let a = embed_oracle(&sample(0, 2, vec![1]), 8, 0.0, 5).unwrap();
        let b = embed_oracle(&sample(99, 2, vec![3]), 8, 0.0, 5).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a.values) - 1.0).abs() < 1e-9);
        let c = embed_oracle(&sample(0, 3, vec![1]), 8, 0.0, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn histogram_embedding_is_order_free_and_deterministic() {
        let a = embed_histogram(&sample(0, 0, vec![1, 4, 2, 4]), 8, 6, 3).unwrap();
        let b = embed_histogram(&sample(1, 0, vec![4, 2, 4, 1]), 8, 6, 3).unwrap();
        assert_eq!(a.values, b.values);

        let again = embed_histogram(&sample(0, 0, vec![1, 4, 2, 4]), 8, 6, 3).unwrap();
        assert_eq!(a, again);

        let all_same = sample(0, 0, vec![3, 3, 3]);
        let e1 = embed_histogram(&all_same, 8, 6, 3).unwrap();
        let sim = gaussian_similarity(&e1, &e1, &SimilarityConfig { sigma: 1.0 }).unwrap();
        assert_eq!(sim, 1.0);
    }

    #[test]
    fn gaussian_similarity_contract() {
        let cfg = SimilarityConfig { sigma: 0.5 };
        let a = Embedding::normalized(vec![1.0, 0.0]);
        let b = Embedding::normalized(vec![0.0, 1.0]);
        let s_ab = gaussian_similarity(&a, &b, &cfg).unwrap();
        let s_ba = gaussian_similarity(&b, &a, &cfg).unwrap();
        assert_eq!(s_ab, s_ba);
        assert!(s_ab > 0.0 && s_ab < 1.0);
        assert_eq!(gaussian_similarity(&a, &a, &cfg).unwrap(), 1.0);

        // unit vectors at 90 degrees: ||a-b||^2 = 2 = 2 sigma^2 at sigma 1
        let cfg2 = SimilarityConfig { sigma: 1.0 };
        let s = gaussian_similarity(&a, &b, &cfg2).unwrap();
        assert!((s - (-1.0f64).exp()).abs() < 1e-9);

        let c = Embedding::normalized(vec![1.0, 0.0, 0.0]);
        assert!(gaussian_similarity(&a, &c, &cfg).is_err());
        assert!(gaussian_similarity(&a, &b, &SimilarityConfig { sigma: 0.0 }).is_err());
    }

    #[test]
    fn within_cluster_similarity_exceeds_between() {
        let spec = DatasetSpec {
            n_clusters: 4,
            samples_per_cluster: 40,
            seq_len: 8,
            vocab: 16,
            n_classes: 3,
            label_noise: 0.0,
            seed: 9,
        };
        let splits = generate(&spec).unwrap();
        let table = embed_dataset(&splits.train, Embedder::Oracle, 16, 16, 0.1, 9).unwrap();
        let cfg = SimilarityConfig { sigma: 1.0 };
        let mut within = (0.0, 0usize);
        let mut between = (0.0, 0usize);
        let samples = &splits.train.samples;
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let s = gaussian_similarity(
                    table.get(samples[i].id).unwrap(),
                    table.get(samples[j].id).unwrap(),
                    &cfg,
                )
                .unwrap();
                if samples[i].cluster == samples[j].cluster {
                    within = (within.0 + s, within.1 + 1);
                } else {
                    between = (between.0 + s, between.1 + 1);
                }
            }
        }
        assert!(within.0 / within.1 as f64 > between.0 / between.1 as f64);
    }

    #[test]
    fn table_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let mut table = EmbeddingTable::default();
        for id in 0..5u32 {
            table.entries.insert(
                id,
                embed_oracle(&sample(id, id % 2, vec![0]), 8, 0.2, 1).unwrap(),
            );
        }
        save_embeddings(&table, &path).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), table);

        save_embeddings(&EmbeddingTable::default(), &path).unwrap();
        assert!(load_embeddings(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            "{\"id\":1,\"vector\":[1.0,0.0]}\n{\"id\":1,\"vector\":[0.0,1.0]}\n",
        )
        .unwrap();
        assert!(load_embeddings(&path).is_err());

        std::fs::write(
            &path,
            "{\"id\":1,\"vector\":[1.0,0.0]}\n{\"id\":2,\"vector\":[0.0]}\n",
        )
        .unwrap();
        let err = load_embeddings(&path).unwrap_err();
        assert!(err.to_string().contains("sample id 2"));
    }

    #[test]
    fn median_sigma_is_deterministic_and_positive() {
        let spec = DatasetSpec {
            n_clusters: 3,
            samples_per_cluster: 20,
            seq_len: 6,
            vocab: 12,
            n_classes: 3,
            label_noise: 0.0,
            seed: 2,
        };
        let splits = generate(&spec).unwrap();
        let table = embed_dataset(&splits.train, Embedder::Oracle, 12, 8, 0.15, 2).unwrap();
        let s1 = median_distance_sigma(&table).unwrap();
        let s2 = median_distance_sigma(&table).unwrap();
        assert_eq!(s1, s2);
        assert!(s1 > 0.0);
    }
}
