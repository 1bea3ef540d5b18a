//! Deterministic multiply-accumulate accounting for one forward pass.
//! Only the K active experts per token are counted, so the count depends on
//! the architecture alone, never on router parameter values.

use crate::error::Result;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub mixer: u64,
    pub router: u64,
    pub experts: u64,
    pub readout: u64,
    pub total: u64,
}

pub fn count_flops(config: &ModelConfig, seq_len: usize) -> Result<FlopCount> {
    config.validate()?;
    let l = config.n_layers as u64;
    let t = seq_len as u64;
    let d = config.d_model as u64;
    let dff = config.d_ff as u64;
    let e = config.n_experts as u64;
    let k = config.top_k as u64;

    let mixer = l * t * d * d;
    let router = l * t * e * d;
    let experts = l * t * k * 2 * dff * d;
    let readout = config.n_classes as u64 * d;
    Ok(FlopCount {
        mixer,
        router,
        experts,
        readout,
        total: mixer + router + experts + readout,
    })
}
