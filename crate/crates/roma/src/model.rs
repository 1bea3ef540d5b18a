//! Sparse MoE classifier parameters.
//!
//! Per block: a causal mean-pool mixer (token t sees the mean of hidden states
//! 1..t through a trainable matrix), then a top-K routed expert FFN step with
//! residual connections. Class logits come from the last token's state. All
//! math is f64; checkpoints store f32.

use crate::error::{Result, RomaError};
use crate::rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Scale applied to router rows at init so initial routing stays near-uniform.
const ROUTER_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1
            || self.n_experts < 1
            || self.d_model < 1
            || self.d_ff < 1
            || self.vocab < 1
            || self.n_classes < 1
            || self.seq_len < 1
        {
            return Err(RomaError::Config("all model dims must be >= 1".into()));
        }
        if self.top_k < 1 || self.top_k > self.n_experts {
            return Err(RomaError::Config(format!(
                "top_k {} must satisfy 1 <= K <= E ({})",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// d_ff x d_model
    pub w1: Vec<f64>,
    /// d_model x d_ff
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// d_model x d_model token-mix matrix.
    pub mixer: Vec<f64>,
    /// E x d_model router matrix.
    pub router_w: Vec<f64>,
    /// E router bias.
    pub router_b: Vec<f64>,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab x d_model token embedding table.
    pub embedding: Vec<f64>,
    pub layers: Vec<Layer>,
    /// n_classes x d_model class readout.
    pub readout: Vec<f64>,
}

fn gaussian(rng: &mut impl rand::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect()
}

/// Deterministic initialization from (config, seed).
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.d_model;
    let mut emb_rng = rng::stream(seed, "init.embedding");
    let embedding = gaussian(&mut emb_rng, config.vocab * d, 1.0);

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut mix_rng = rng::indexed_stream(seed, "init.mixer", l as u64);
        let mixer = gaussian(&mut mix_rng, d * d, 1.0 / (d as f64).sqrt());
        let mut rtr_rng = rng::indexed_stream(seed, "init.router", l as u64);
        let router_w = gaussian(
            &mut rtr_rng,
            config.n_experts * d,
            ROUTER_INIT_SCALE / (d as f64).sqrt(),
        );
        let router_b = vec![0.0; config.n_experts];
        let mut experts = Vec::with_capacity(config.n_experts);
        for e in 0..config.n_experts {
            let idx = (l * config.n_experts + e) as u64;
            let mut e_rng = rng::indexed_stream(seed, "init.expert", idx);
            let w1 = gaussian(&mut e_rng, config.d_ff * d, 1.0 / (d as f64).sqrt());
            let w2 = gaussian(&mut e_rng, d * config.d_ff, 1.0 / (config.d_ff as f64).sqrt());
            experts.push(Expert { w1, w2 });
        }
        layers.push(Layer {
            mixer,
            router_w,
            router_b,
            experts,
        });
    }

    let mut out_rng = rng::stream(seed, "init.readout");
    let readout = gaussian(&mut out_rng, config.n_classes * d, 1.0 / (d as f64).sqrt());

    Ok(Model {
        config: *config,
        embedding,
        layers,
        readout,
    })
}

fn hash_block(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex_digest(&h.finalize())
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Model {
    /// Per-block parameter hashes, for frozen-parameter guarantees.
    pub fn param_hashes(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("embedding".to_string(), hash_block(&self.embedding));
        map.insert("readout".to_string(), hash_block(&self.readout));
        for (l, layer) in self.layers.iter().enumerate() {
            map.insert(format!("mixer.{l}"), hash_block(&layer.mixer));
            let mut rh = Sha256::new();
            for v in layer.router_w.iter().chain(&layer.router_b) {
                rh.update(v.to_bits().to_le_bytes());
            }
            map.insert(format!("router.{l}"), hex_digest(&rh.finalize()));
            let mut eh = Sha256::new();
            for e in &layer.experts {
                for v in e.w1.iter().chain(&e.w2) {
                    eh.update(v.to_bits().to_le_bytes());
                }
            }
            map.insert(format!("experts.{l}"), hex_digest(&eh.finalize()));
        }
        map
    }

    /// Hash over every parameter, for whole-model identity checks.
    pub fn full_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, digest) in self.param_hashes() {
            h.update(name.as_bytes());
            h.update(digest.as_bytes());
        }
        hex_digest(&h.finalize())
    }

    pub fn n_params(&self) -> usize {
        let c = &self.config;
        let per_layer = c.d_model * c.d_model
            + c.n_experts * c.d_model
            + c.n_experts
            + c.n_experts * 2 * c.d_ff * c.d_model;
        c.vocab * c.d_model + c.n_layers * per_layer + c.n_classes * c.d_model
    }

    /// Router parameters in the given layer set.
    pub fn n_router_params(&self, layer_set: &[usize]) -> usize {
        let c = &self.config;
        layer_set.len() * (c.n_experts * c.d_model + c.n_experts)
    }
}
