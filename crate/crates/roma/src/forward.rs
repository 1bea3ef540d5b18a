//! Forward pass with top-K routing, routing overrides, and routing-vector
//! extraction.

use crate::error::{Result, RomaError};
use crate::linalg::{matvec, softmax};
use crate::model::Model;
use crate::select::{validate_layer_set, LayerSet, TokenSelector};
use std::collections::BTreeMap;

/// Externally supplied router logits keyed by (layer, token). Overridden
/// positions bypass the router matrix; the logits feed the same
/// softmax/top-K path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingOverride {
    pub logits: BTreeMap<(usize, usize), Vec<f64>>,
}

impl RoutingOverride {
    pub fn validate(&self, n_layers: usize, seq_len: usize, n_experts: usize) -> Result<()> {
        for (&(l, t), z) in &self.logits {
            if l >= n_layers || t >= seq_len {
                return Err(RomaError::Input(format!(
                    "override position (layer {l}, token {t}) out of range"
                )));
            }
            if z.len() != n_experts {
                return Err(RomaError::Shape(format!(
                    "override at (layer {l}, token {t}) has {} logits, expected {n_experts}",
                    z.len()
                )));
            }
        }
        Ok(())
    }
}

/// Concatenated full-softmax routing distributions for a layer set at the
/// selected token position(s). Multi-token selectors average blockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingVector {
    pub layer_set: LayerSet,
    pub token_selector: TokenSelector,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Hidden states at layer entry, T x d.
    pub input: Vec<Vec<f64>>,
    /// Causal means of the entry states, T x d.
    pub means: Vec<Vec<f64>>,
    /// Post-mixer states feeding the MoE step, T x d.
    pub moe_input: Vec<Vec<f64>>,
    /// Effective router logits (post-override), T x E.
    pub logits: Vec<Vec<f64>>,
    /// Full softmax distributions, T x E.
    pub probs: Vec<Vec<f64>>,
    /// Selected expert indices (ascending), T x K.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized gate weights aligned with `selected`, T x K.
    pub gates: Vec<Vec<f64>>,
    /// tanh activations of each selected expert, T x K x d_ff.
    pub expert_act: Vec<Vec<Vec<f64>>>,
    /// Output of each selected expert before gating, T x K x d.
    pub expert_out: Vec<Vec<Vec<f64>>>,
    /// Whether the router was bypassed at this token.
    pub overridden: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    /// Last token's state at the final layer exit.
    pub final_hidden: Vec<f64>,
    pub class_logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn predicted_class(&self) -> u32 {
        argmax(&self.class_logits) as u32
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-K indices of `p` (ties broken by lower index), returned ascending.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut sel: Vec<usize> = idx.into_iter().take(k).collect();
    sel.sort_unstable();
    sel
}

impl Model {
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.forward_override(tokens, &RoutingOverride::default())
    }

    pub fn forward_override(
        &self,
        tokens: &[u32],
        override_logits: &RoutingOverride,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        if tokens.len() != c.seq_len {
            return Err(RomaError::Input(format!(
                "expected {} tokens, got {}",
                c.seq_len,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(RomaError::Input(format!("token {bad} >= vocab {}", c.vocab)));
        }
        override_logits.validate(c.n_layers, c.seq_len, c.n_experts)?;

        let d = c.d_model;
        let t_len = c.seq_len;

        // embedding lookup
        let mut hidden: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();

        let mut layer_traces = Vec::with_capacity(c.n_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let input = hidden.clone();

            // causal mean pool: m_t = mean(h_1..h_t), inclusive
            let mut means = Vec::with_capacity(t_len);
            let mut running = vec![0.0; d];
            for (t, h) in input.iter().enumerate() {
                for (r, &x) in running.iter_mut().zip(h) {
                    *r += x;
                }
                means.push(running.iter().map(|&r| r / (t + 1) as f64).collect::<Vec<f64>>());
            }

            let mut moe_input = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let mut mixed = vec![0.0; d];
                matvec(&layer.mixer, d, d, &means[t], &mut mixed);
                let x: Vec<f64> = input[t].iter().zip(&mixed).map(|(h, m)| h + m).collect();
                moe_input.push(x);
            }

            let mut logits_rows = Vec::with_capacity(t_len);
            let mut probs_rows = Vec::with_capacity(t_len);
            let mut selected_rows = Vec::with_capacity(t_len);
            let mut gates_rows = Vec::with_capacity(t_len);
            let mut act_rows = Vec::with_capacity(t_len);
            let mut out_rows = Vec::with_capacity(t_len);
            let mut overridden = Vec::with_capacity(t_len);

            for t in 0..t_len {
                let x = &moe_input[t];
                let (z, is_override) = match override_logits.logits.get(&(l, t)) {
                    Some(z) => (z.clone(), true),
                    None => {
                        let mut z = vec![0.0; c.n_experts];
                        matvec(&layer.router_w, c.n_experts, d, x, &mut z);
                        for (zi, b) in z.iter_mut().zip(&layer.router_b) {
                            *zi += b;
                        }
                        (z, false)
                    }
                };
                let p = softmax(&z);
                let sel = top_k_indices(&p, c.top_k);
                let mass: f64 = sel.iter().map(|&e| p[e]).sum();
                let gates: Vec<f64> = sel.iter().map(|&e| p[e] / mass).collect();

                let mut acts = Vec::with_capacity(c.top_k);
                let mut outs = Vec::with_capacity(c.top_k);
                let mut h_new = x.clone();
                for (&e, &w) in sel.iter().zip(&gates) {
                    let expert = &layer.experts[e];
                    let mut u = vec![0.0; c.d_ff];
                    matvec(&expert.w1, c.d_ff, d, x, &mut u);
                    let a: Vec<f64> = u.iter().map(|&ui| ui.tanh()).collect();
                    let mut o = vec![0.0; d];
                    matvec(&expert.w2, d, c.d_ff, &a, &mut o);
                    for (hi, &oi) in h_new.iter_mut().zip(&o) {
                        *hi += w * oi;
                    }
                    acts.push(a);
                    outs.push(o);
                }
                hidden[t] = h_new;

                logits_rows.push(z);
                probs_rows.push(p);
                selected_rows.push(sel);
                gates_rows.push(gates);
                act_rows.push(acts);
                out_rows.push(outs);
                overridden.push(is_override);
            }

            layer_traces.push(LayerTrace {
                input,
                means,
                moe_input,
                logits: logits_rows,
                probs: probs_rows,
                selected: selected_rows,
                gates: gates_rows,
                expert_act: act_rows,
                expert_out: out_rows,
                overridden,
            });
        }

        let final_hidden = hidden[t_len - 1].clone();
        let mut class_logits = vec![0.0; c.n_classes];
        matvec(&self.readout, c.n_classes, d, &final_hidden, &mut class_logits);

        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            layers: layer_traces,
            final_hidden,
            class_logits,
        })
    }
}

/// Concatenate full softmax distributions for `layer_set` at the selected
/// token position(s), averaged blockwise over multi-token selectors.
pub fn extract_routing(
    trace: &ForwardTrace,
    layer_set: &[usize],
    token_selector: TokenSelector,
) -> Result<RoutingVector> {
    let n_layers = trace.layers.len();
    validate_layer_set(layer_set, n_layers)?;
    let seq_len = trace.tokens.len();
    let positions = token_selector.positions(seq_len)?;
    let n_experts = trace.layers[0].probs[0].len();

    let mut values = Vec::with_capacity(layer_set.len() * n_experts);
    for &l in layer_set {
        let mut block = vec![0.0; n_experts];
        for &t in &positions {
            for (b, &p) in block.iter_mut().zip(&trace.layers[l].probs[t]) {
                *b += p;
            }
        }
        let n = positions.len() as f64;
        values.extend(block.into_iter().map(|b| b / n));
    }
    Ok(RoutingVector {
        layer_set: layer_set.to_vec(),
        token_selector,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::Rng;

    fn cfg(e: usize, k: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_experts: e,
            top_k: k,
            d_model: 6,
            d_ff: 8,
            vocab: 10,
            n_classes: 4,
            seq_len: 7,
        }
    }

    fn tokens(seed: u64, vocab: u32, len: usize) -> Vec<u32> {
        let mut rng = crate::rng::stream(seed, "test.tokens");
        (0..len).map(|_| rng.gen_range(0..vocab)).collect()
    }

    #[test]
    fn single_expert_gates_are_one() {
        let m = init_model(&cfg(1, 1), 1).unwrap();
        let tr = m.forward(&tokens(0, 10, 7)).unwrap();
        for lt in &tr.layers {
            for t in 0..7 {
                assert_eq!(lt.selected[t], vec![0]);
                assert_eq!(lt.gates[t], vec![1.0]);
                assert!((lt.probs[t][0] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_k_gates_equal_softmax() {
        let m = init_model(&cfg(4, 4), 2).unwrap();
        let tr = m.forward(&tokens(1, 10, 7)).unwrap();
        for lt in &tr.layers {
            for t in 0..7 {
                for (k, &e) in lt.selected[t].iter().enumerate() {
                    assert!((lt.gates[t][k] - lt.probs[t][e]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn selection_matches_sort_oracle() {
        let m = init_model(&cfg(5, 2), 3).unwrap();
        for s in 0..20 {
            let tr = m.forward(&tokens(s, 10, 7)).unwrap();
            for lt in &tr.layers {
                for t in 0..7 {
                    let p = &lt.probs[t];
                    // brute-force: sort all indices by (prob desc, index asc)
                    let mut idx: Vec<usize> = (0..5).collect();
                    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
                    let mut expect = idx[..2].to_vec();
                    expect.sort_unstable();
                    assert_eq!(lt.selected[t], expect);
                }
            }
        }
    }

    #[test]
    fn probs_and_gates_normalize() {
        let m = init_model(&cfg(5, 2), 4).unwrap();
        let tr = m.forward(&tokens(9, 10, 7)).unwrap();
        for lt in &tr.layers {
            for t in 0..7 {
                assert!((lt.probs[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!((lt.gates[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(lt.gates[t].iter().all(|&g| g >= 0.0));
            }
        }
    }

    #[test]
    fn self_override_is_bitwise_identity() {
        let m = init_model(&cfg(5, 2), 5).unwrap();
        let toks = tokens(7, 10, 7);
        let plain = m.forward(&toks).unwrap();
        let mut ov = RoutingOverride::default();
        for (l, lt) in plain.layers.iter().enumerate() {
            for t in 0..7 {
                ov.logits.insert((l, t), lt.logits[t].clone());
            }
        }
        let with = m.forward_override(&toks, &ov).unwrap();
        assert_eq!(plain.class_logits, with.class_logits);
    }

    #[test]
    fn saturated_override_selects_that_expert() {
        let m = init_model(&cfg(5, 1), 6).unwrap();
        let toks = tokens(8, 10, 7);
        let mut ov = RoutingOverride::default();
        let mut z = vec![0.0; 5];
        z[3] = 1e6;
        ov.logits.insert((1, 4), z);
        let tr = m.forward_override(&toks, &ov).unwrap();
        assert_eq!(tr.layers[1].selected[4], vec![3]);
        assert_eq!(tr.layers[1].gates[4], vec![1.0]);
        assert!(tr.layers[1].overridden[4]);
        assert!(!tr.layers[1].overridden[3]);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let m = init_model(&cfg(5, 2), 6).unwrap();
        assert!(m.forward(&vec![99u32; 7]).is_err());
        assert!(m.forward(&vec![0u32; 3]).is_err());
        let mut ov = RoutingOverride::default();
        ov.logits.insert((9, 0), vec![0.0; 5]);
        assert!(m.forward_override(&tokens(0, 10, 7), &ov).is_err());
    }

    #[test]
    fn extract_routing_blocks_are_distributions() {
        let m = init_model(&cfg(5, 2), 7).unwrap();
        let tr = m.forward(&tokens(3, 10, 7)).unwrap();
        let rv = extract_routing(&tr, &[2], TokenSelector::Last(1)).unwrap();
        assert_eq!(rv.values.len(), 5);
        assert!((rv.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let rv3 = extract_routing(&tr, &[0, 1, 2], TokenSelector::Last(3)).unwrap();
        assert_eq!(rv3.values.len(), 15);
        for block in rv3.values.chunks(5) {
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(extract_routing(&tr, &[5], TokenSelector::Last(1)).is_err());
    }

    #[test]
    fn multi_token_average_of_identical_rows_is_idempotent() {
        // E=1 makes every distribution the single point mass
        let m = init_model(&cfg(1, 1), 8).unwrap();
        let tr = m.forward(&tokens(4, 10, 7)).unwrap();
        let rv = extract_routing(&tr, &[0, 2], TokenSelector::Last(3)).unwrap();
        assert_eq!(rv.values, vec![1.0, 1.0]);
    }
}
