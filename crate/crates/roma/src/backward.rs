//! Manual reverse-mode pass with parameter masking.
//!
//! Gradients are exact for the loss implied by the upstream injections:
//! a class-logit gradient at the output, an optional gradient on the full
//! softmax routing distributions (pre-top-K), and an optional gradient
//! injected directly at router logits. Top-K selection is treated as
//! piecewise-constant, so the task loss reaches router logits only through
//! the renormalized gates of the selected set.

use crate::error::{Result, RomaError};
use crate::linalg::{matvec, matvec_t, outer_acc, softmax_backward};
use crate::model::Model;
use crate::select::{validate_layer_set, LayerSet, TokenSelector};
use crate::forward::ForwardTrace;
use std::collections::BTreeSet;

/// Which parameter blocks receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    pub embedding: bool,
    pub mixers: bool,
    pub experts: bool,
    pub readout: bool,
    pub router_layers: BTreeSet<usize>,
}

impl ParamMask {
    pub fn all(n_layers: usize) -> Self {
        ParamMask {
            embedding: true,
            mixers: true,
            experts: true,
            readout: true,
            router_layers: (0..n_layers).collect(),
        }
    }

    pub fn routers_only(layer_set: &[usize]) -> Self {
        ParamMask {
            embedding: false,
            mixers: false,
            experts: false,
            readout: false,
            router_layers: layer_set.iter().copied().collect(),
        }
    }

    pub fn none() -> Self {
        ParamMask {
            embedding: false,
            mixers: false,
            experts: false,
            readout: false,
            router_layers: BTreeSet::new(),
        }
    }
}

/// Gradient injected on a concatenated per-layer vector (routing
/// distributions or raw logits) at the configured layer set / token
/// position(s). Multi-token selectors distribute the block gradient evenly,
/// mirroring the blockwise average in extraction.
#[derive(Debug, Clone)]
pub struct VectorInjection {
    pub layer_set: LayerSet,
    pub token_selector: TokenSelector,
    pub values: Vec<f64>,
}

/// Parameter gradients. Blocks outside the mask are absent.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embedding: Option<Vec<f64>>,
    pub mixers: Vec<Option<Vec<f64>>>,
    pub router_w: Vec<Option<Vec<f64>>>,
    pub router_b: Vec<Option<Vec<f64>>>,
    /// Per layer, per expert (w1, w2) grads.
    pub experts: Vec<Option<Vec<(Vec<f64>, Vec<f64>)>>>,
    pub readout: Option<Vec<f64>>,
    /// dL/d(router logits), L x T x E. Always computed; at overridden
    /// positions this is the gradient on the supplied override logits.
    pub logit_grads: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        fn add_opt(a: &mut Option<Vec<f64>>, b: &Option<Vec<f64>>) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        add_opt(&mut self.embedding, &other.embedding);
        add_opt(&mut self.readout, &other.readout);
        for (a, b) in self.mixers.iter_mut().zip(&other.mixers) {
            add_opt(a, b);
        }
        for (a, b) in self.router_w.iter_mut().zip(&other.router_w) {
            add_opt(a, b);
        }
        for (a, b) in self.router_b.iter_mut().zip(&other.router_b) {
            add_opt(a, b);
        }
        for (a, b) in self.experts.iter_mut().zip(&other.experts) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for ((w1a, w2a), (w1b, w2b)) in a.iter_mut().zip(b) {
                    for (x, y) in w1a.iter_mut().zip(w1b) {
                        *x += y;
                    }
                    for (x, y) in w2a.iter_mut().zip(w2b) {
                        *x += y;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        fn scale_opt(a: &mut Option<Vec<f64>>, f: f64) {
            if let Some(a) = a.as_mut() {
                a.iter_mut().for_each(|x| *x *= f);
            }
        }
        scale_opt(&mut self.embedding, factor);
        scale_opt(&mut self.readout, factor);
        for a in &mut self.mixers {
            scale_opt(a, factor);
        }
        for a in &mut self.router_w {
            scale_opt(a, factor);
        }
        for a in &mut self.router_b {
            scale_opt(a, factor);
        }
        for layer in self.experts.iter_mut().flatten() {
            for (w1, w2) in layer {
                w1.iter_mut().for_each(|x| *x *= factor);
                w2.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    /// True if any present block contains a non-finite value.
    pub fn has_non_finite(&self) -> bool {
        let check = |v: &Option<Vec<f64>>| {
            v.as_ref()
                .map(|v| v.iter().any(|x| !x.is_finite()))
                .unwrap_or(false)
        };
        check(&self.embedding)
            || check(&self.readout)
            || self.mixers.iter().any(|m| check(m))
            || self.router_w.iter().any(|m| check(m))
            || self.router_b.iter().any(|m| check(m))
            || self.experts.iter().flatten().any(|layer| {
                layer
                    .iter()
                    .any(|(a, b)| a.iter().chain(b).any(|x| !x.is_finite()))
            })
    }
}

impl Model {
    /// SGD step: param -= lr * grad for every present gradient block.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        if let Some(g) = &grads.embedding {
            for (p, gi) in self.embedding.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        if let Some(g) = &grads.readout {
            for (p, gi) in self.readout.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if let Some(g) = &grads.mixers[l] {
                for (p, gi) in layer.mixer.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            if let Some(g) = &grads.router_w[l] {
                for (p, gi) in layer.router_w.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            if let Some(g) = &grads.router_b[l] {
                for (p, gi) in layer.router_b.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            if let Some(g) = &grads.experts[l] {
                for (expert, (gw1, gw2)) in layer.experts.iter_mut().zip(g) {
                    for (p, gi) in expert.w1.iter_mut().zip(gw1) {
                        *p -= lr * gi;
                    }
                    for (p, gi) in expert.w2.iter_mut().zip(gw2) {
                        *p -= lr * gi;
                    }
                }
            }
        }
    }

    /// Reverse pass over a trace produced by this model on the same input.
    ///
    /// `output_grad` is dL/d(class logits). `prob_grad` is injected at the
    /// full-softmax node and flows to router logits via the softmax Jacobian.
    /// `logit_grad` is injected directly at the router-logit node.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
        prob_grad: Option<&VectorInjection>,
        logit_grad: Option<&VectorInjection>,
        mask: &ParamMask,
    ) -> Result<Gradients> {
        let c = &self.config;
        let d = c.d_model;
        let t_len = c.seq_len;
        let n_e = c.n_experts;

        if output_grad.len() != c.n_classes {
            return Err(RomaError::Shape(format!(
                "output_grad has {} entries, expected {}",
                output_grad.len(),
                c.n_classes
            )));
        }
        if trace.tokens.len() != t_len || trace.layers.len() != c.n_layers {
            return Err(RomaError::Shape("trace does not match model config".into()));
        }
        for inj in [prob_grad, logit_grad].into_iter().flatten() {
            validate_layer_set(&inj.layer_set, c.n_layers)?;
            inj.token_selector.validate()?;
            if inj.values.len() != inj.layer_set.len() * n_e {
                return Err(RomaError::Shape(format!(
                    "injection has {} values, expected {}",
                    inj.values.len(),
                    inj.layer_set.len() * n_e
                )));
            }
        }

        // per-position injections, distributed over selected tokens
        let mut prob_inject = vec![vec![vec![0.0; n_e]; t_len]; c.n_layers];
        let mut logit_inject = vec![vec![vec![0.0; n_e]; t_len]; c.n_layers];
        for (inj, target) in [
            (prob_grad, &mut prob_inject),
            (logit_grad, &mut logit_inject),
        ] {
            if let Some(inj) = inj {
                let positions = inj.token_selector.positions(t_len)?;
                let scale = 1.0 / positions.len() as f64;
                for (bi, &l) in inj.layer_set.iter().enumerate() {
                    let block = &inj.values[bi * n_e..(bi + 1) * n_e];
                    for &t in &positions {
                        for (acc, &g) in target[l][t].iter_mut().zip(block) {
                            *acc += g * scale;
                        }
                    }
                }
            }
        }

        let mut grads = Gradients {
            embedding: mask.embedding.then(|| vec![0.0; c.vocab * d]),
            mixers: (0..c.n_layers)
                .map(|_| mask.mixers.then(|| vec![0.0; d * d]))
                .collect(),
            router_w: (0..c.n_layers)
                .map(|l| mask.router_layers.contains(&l).then(|| vec![0.0; n_e * d]))
                .collect(),
            router_b: (0..c.n_layers)
                .map(|l| mask.router_layers.contains(&l).then(|| vec![0.0; n_e]))
                .collect(),
            experts: (0..c.n_layers)
                .map(|_| {
                    mask.experts.then(|| {
                        (0..n_e)
                            .map(|_| (vec![0.0; c.d_ff * d], vec![0.0; d * c.d_ff]))
                            .collect()
                    })
                })
                .collect(),
            readout: mask.readout.then(|| vec![0.0; c.n_classes * d]),
            logit_grads: vec![vec![vec![0.0; n_e]; t_len]; c.n_layers],
        };

        // readout
        let mut d_hidden = vec![vec![0.0; d]; t_len];
        let mut dh_last = vec![0.0; d];
        matvec_t(&self.readout, c.n_classes, d, output_grad, &mut dh_last);
        d_hidden[t_len - 1] = dh_last;
        if let Some(g) = grads.readout.as_mut() {
            outer_acc(g, c.n_classes, d, output_grad, &trace.final_hidden);
        }

        let mut scratch_ff = vec![0.0; c.d_ff];
        let mut scratch_d = vec![0.0; d];

        for l in (0..c.n_layers).rev() {
            let layer = &self.layers[l];
            let lt = &trace.layers[l];
            // d_hidden currently holds grads at this layer's exit
            let mut d_moe_input = vec![vec![0.0; d]; t_len];

            for t in 0..t_len {
                let g_out = &d_hidden[t];
                let x = &lt.moe_input[t];
                let p = &lt.probs[t];
                let sel = &lt.selected[t];
                let gates = &lt.gates[t];

                // residual path
                d_moe_input[t].copy_from_slice(g_out);

                // expert path and gate grads
                let mut gate_grads = vec![0.0; sel.len()];
                for (k, (&e, &w)) in sel.iter().zip(gates).enumerate() {
                    let o = &lt.expert_out[t][k];
                    let a = &lt.expert_act[t][k];
                    gate_grads[k] = g_out.iter().zip(o).map(|(g, o)| g * o).sum();

                    // grad on expert output
                    let go: Vec<f64> = g_out.iter().map(|&g| w * g).collect();
                    // da = W2^T go; du = da * (1 - a^2)
                    matvec_t(&layer.experts[e].w2, d, c.d_ff, &go, &mut scratch_ff);
                    let du: Vec<f64> = scratch_ff
                        .iter()
                        .zip(a)
                        .map(|(&da, &ai)| da * (1.0 - ai * ai))
                        .collect();
                    if let Some(eg) = grads.experts[l].as_mut() {
                        outer_acc(&mut eg[e].1, d, c.d_ff, &go, a);
                        outer_acc(&mut eg[e].0, c.d_ff, d, &du, x);
                    }
                    matvec_t(&layer.experts[e].w1, c.d_ff, d, &du, &mut scratch_d);
                    for (acc, &v) in d_moe_input[t].iter_mut().zip(&scratch_d) {
                        *acc += v;
                    }
                }

                // gates -> full softmax p (top-K selection held constant):
                // w_k = p_k / s over selected set
                let mass: f64 = sel.iter().map(|&e| p[e]).sum();
                let inner: f64 = gate_grads.iter().zip(gates).map(|(&g, &w)| g * w).sum();
                let mut dp = prob_inject[l][t].clone();
                for (k, &e) in sel.iter().enumerate() {
                    dp[e] += (gate_grads[k] - inner) / mass;
                }

                // softmax Jacobian, plus any direct logit injection
                let mut dz = softmax_backward(p, &dp);
                for (z, &g) in dz.iter_mut().zip(&logit_inject[l][t]) {
                    *z += g;
                }
                grads.logit_grads[l][t].copy_from_slice(&dz);

                // router params and input chain, unless this position was
                // overridden (then z is a constant w.r.t. x and the router)
                if !lt.overridden[t] {
                    if let Some(gw) = grads.router_w[l].as_mut() {
                        outer_acc(gw, n_e, d, &dz, x);
                    }
                    if let Some(gb) = grads.router_b[l].as_mut() {
                        for (b, &z) in gb.iter_mut().zip(&dz) {
                            *b += z;
                        }
                    }
                    matvec_t(&layer.router_w, n_e, d, &dz, &mut scratch_d);
                    for (acc, &v) in d_moe_input[t].iter_mut().zip(&scratch_d) {
                        *acc += v;
                    }
                }
            }

            // mixer step backward: x_t = h_t + M m_t, m_t = mean(h_1..h_t)
            let mut d_input = d_moe_input.clone();
            let mut d_mean_suffix = vec![0.0; d]; // running sum of dm_s / (s+1) for s >= t
            // accumulate mixer grads and mean chain
            let mut dm_rows = Vec::with_capacity(t_len);
            for t in 0..t_len {
                if let Some(gm) = grads.mixers[l].as_mut() {
                    outer_acc(gm, d, d, &d_moe_input[t], &lt.means[t]);
                }
                let mut dm = vec![0.0; d];
                matvec_t(&layer.mixer, d, d, &d_moe_input[t], &mut dm);
                dm_rows.push(dm);
            }
            // dH_in[s] += sum_{t >= s} dm_t / (t+1); sweep from the back
            for t in (0..t_len).rev() {
                for (acc, &v) in d_mean_suffix.iter_mut().zip(&dm_rows[t]) {
                    *acc += v / (t + 1) as f64;
                }
                for (acc, &v) in d_input[t].iter_mut().zip(&d_mean_suffix) {
                    *acc += v;
                }
            }
            d_hidden = d_input;
        }

        if let Some(ge) = grads.embedding.as_mut() {
            for (t, &tok) in trace.tokens.iter().enumerate() {
                let row = &mut ge[tok as usize * d..(tok as usize + 1) * d];
                for (r, &g) in row.iter_mut().zip(&d_hidden[t]) {
                    *r += g;
                }
            }
        }

        Ok(grads)
    }
}
