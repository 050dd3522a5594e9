//! The dual-attention layer: per-hop connection-attention over sampled
//! neighborhoods, a fixed hop-coefficient mixture, multi-head
//! concatenation, a softmax classifier, the plain-convolution ablation
//! arm, and the masked cross-entropy loss.

mod checkpoint;
mod features;

pub use checkpoint::{load_model, save_model, ModelCheckpointError, MODEL_MAGIC, MODEL_VERSION};
pub use features::{
    load_features, read_features, save_features, write_features, FeatureFileError, Features,
};

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::engine::{row_softmax, ParamId, ParamStore, Tape, Tensor, ValueId};
use crate::graph::SampledSubgraph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension {got} does not match model dimension {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("subgraph has {got} hops but the model mixes {want}")]
    HopMismatch { got: usize, want: usize },
    #[error("node {node} outside the feature matrix ({rows} rows)")]
    NodeOutOfRange { node: u32, rows: usize },
    #[error("loss mask selects no rows")]
    EmptyMask,
}

/// Nonlinearity applied after each hop aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    LeakyRelu,
}

/// Which forward pipeline to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    /// Learned connection-attention plus the fixed hop mixture.
    DualAttention,
    /// Ablation: fixed edge weights renormalized per neighborhood and a
    /// uniform hop mixture.
    PlainConvolution,
}

/// Dropout configuration for a training-mode forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Per-head parameter handles: the shared linear transform (stored as a
/// `[d, d']` table so rows align with input features) and the length-`2d'`
/// attention vector.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub transform: ParamId,
    pub attention: ParamId,
}

/// All parameters and fixed settings of one dual-attention layer plus its
/// classifier.
#[derive(Debug)]
pub struct DualAttentionParams {
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
    /// Number of hops mixed into each head's output.
    pub hops: usize,
    pub classes: usize,
    /// Fixed hop coefficients; strictly positive, sum to one, non-increasing.
    pub q: Vec<f64>,
    pub leaky_slope: f64,
    pub activation: Activation,
    pub lambda: f64,
    pub store: ParamStore,
    head_params: Vec<HeadParams>,
    classifier_weight: ParamId,
    classifier_bias: ParamId,
}

impl DualAttentionParams {
    /// Initialize with uniform Glorot-style draws, deterministically from
    /// `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        d: usize,
        d_prime: usize,
        heads: usize,
        hops: usize,
        classes: usize,
        leaky_slope: f64,
        activation: Activation,
        lambda: f64,
        seed: u64,
    ) -> Self {
        assert!(d >= 1 && d_prime >= 1 && heads >= 1 && classes >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut head_params = Vec::with_capacity(heads);
        for m in 0..heads {
            let transform = store.add_uniform(
                &format!("head{m}.transform"),
                &[d, d_prime],
                d,
                d_prime,
                &mut rng,
            );
            let attention = store.add_uniform(
                &format!("head{m}.attention"),
                &[2 * d_prime],
                2 * d_prime,
                1,
                &mut rng,
            );
            head_params.push(HeadParams {
                transform,
                attention,
            });
        }
        let classifier_weight = store.add_uniform(
            "classifier.weight",
            &[heads * d_prime, classes],
            heads * d_prime,
            classes,
            &mut rng,
        );
        let classifier_bias = store.add_zeros("classifier.bias", &[classes]);
        DualAttentionParams {
            d,
            d_prime,
            heads,
            hops,
            classes,
            q: hop_coefficients(hops),
            leaky_slope,
            activation,
            lambda,
            store,
            head_params,
            classifier_weight,
            classifier_bias,
        }
    }

    pub fn head(&self, m: usize) -> HeadParams {
        self.head_params[m]
    }

    pub fn classifier_weight(&self) -> ParamId {
        self.classifier_weight
    }

    pub fn classifier_bias(&self) -> ParamId {
        self.classifier_bias
    }

    /// Parameter ids of the per-head transform tables, in head order.
    pub fn transform_tables(&self) -> Vec<ParamId> {
        self.head_params.iter().map(|h| h.transform).collect()
    }
}

/// Fixed hop-attention coefficients: softmax of `q_k = 1 − (k−1)/c` for
/// `k = 1..=c`. Never trained.
pub fn hop_coefficients(c: usize) -> Vec<f64> {
    assert!(c >= 1, "hop count must be at least 1");
    let raw: Vec<f64> = (1..=c).map(|k| 1.0 - (k as f64 - 1.0) / c as f64).collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Everything one forward pass produced, with the tape kept alive so a
/// loss can be appended and differentiated.
pub struct ForwardTrace<'p> {
    pub(crate) tape: Tape<'p>,
    pub(crate) logits_id: ValueId,
    pub centers: Vec<u32>,
    /// Raw attention scores per head and hop (dual-attention arm only),
    /// concatenated over the centers' neighborhoods.
    pub scores: Vec<Vec<Tensor>>,
    /// Normalized coefficients per head and hop, before dropout; each
    /// neighborhood segment sums to one.
    pub alpha: Vec<Vec<Tensor>>,
    /// Per-hop aggregated features per head: `[n_centers, d']`.
    pub hop_features: Vec<Vec<Tensor>>,
    /// Hop mixture per head: `[n_centers, d']`.
    pub mixed: Vec<Tensor>,
    /// Concatenated head outputs: `[n_centers, heads·d']`.
    pub concatenated: Tensor,
    /// Classifier logits: `[n_centers, classes]`.
    pub logits: Tensor,
    /// Row-softmaxed class distribution; rows sum to one.
    pub z: Tensor,
}

impl<'p> ForwardTrace<'p> {
    /// Argmax class per center; ties resolve to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.z.rows())
            .map(|r| {
                let row = self.z.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Append the summed masked cross-entropy to the tape and return its id.
    pub fn cross_entropy_on_tape(
        &mut self,
        labels: &[usize],
        labeled_mask: &[bool],
    ) -> Result<ValueId, ModelError> {
        if !labeled_mask.iter().any(|&m| m) {
            return Err(ModelError::EmptyMask);
        }
        Ok(self
            .tape
            .cross_entropy(self.logits_id, labels, labeled_mask))
    }

    /// Append the full training loss (cross-entropy plus `λ‖θ‖²` over every
    /// registered parameter) to the tape.
    pub fn loss_on_tape(
        &mut self,
        labels: &[usize],
        labeled_mask: &[bool],
        lambda: f64,
        params: &DualAttentionParams,
    ) -> Result<ValueId, ModelError> {
        let ce = self.cross_entropy_on_tape(labels, labeled_mask)?;
        let param_nodes: Vec<ValueId> = params
            .store
            .ids()
            .map(|pid| self.tape.param(pid))
            .collect();
        let pen = self.tape.l2_penalty(&param_nodes, lambda);
        Ok(self.tape.add(ce, pen))
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        self.tape.value(id)
    }

    pub fn backward(&mut self, output: ValueId) -> crate::engine::Gradients {
        self.tape.backward(output)
    }
}

/// Dual-attention forward pass over one sampled subgraph.
///
/// Dropout (when `dropout` is set) applies to the input features and to
/// the normalized attention coefficients; the trace records coefficients
/// before dropout.
pub fn dual_attention_forward<'p>(
    features: &Features,
    subgraph: &SampledSubgraph,
    params: &'p DualAttentionParams,
    dropout: Option<DropoutSpec>,
) -> Result<ForwardTrace<'p>, ModelError> {
    forward_arm(features, subgraph, params, dropout, Arm::DualAttention)
}

/// Ablation forward pass: the same pipeline with connection-attention
/// replaced by the subgraph's edge weights renormalized per neighborhood
/// and the hop mixture replaced by uniform `1/c`.
pub fn plain_convolution_forward<'p>(
    features: &Features,
    subgraph: &SampledSubgraph,
    params: &'p DualAttentionParams,
    dropout: Option<DropoutSpec>,
) -> Result<ForwardTrace<'p>, ModelError> {
    forward_arm(features, subgraph, params, dropout, Arm::PlainConvolution)
}

pub fn forward_arm<'p>(
    features: &Features,
    subgraph: &SampledSubgraph,
    params: &'p DualAttentionParams,
    dropout: Option<DropoutSpec>,
    arm: Arm,
) -> Result<ForwardTrace<'p>, ModelError> {
    if features.dim() != params.d {
        return Err(ModelError::FeatureDim {
            got: features.dim(),
            want: params.d,
        });
    }
    if subgraph.hop_count() != params.hops {
        return Err(ModelError::HopMismatch {
            got: subgraph.hop_count(),
            want: params.hops,
        });
    }

    let nodes = subgraph.distinct_nodes();
    for &n in &nodes {
        if n as usize >= features.node_count() {
            return Err(ModelError::NodeOutOfRange {
                node: n,
                rows: features.node_count(),
            });
        }
    }
    let local: HashMap<u32, u32> = nodes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i as u32))
        .collect();
    let centers = subgraph.centers().to_vec();
    let n_centers = centers.len();
    let c = params.hops;

    let (rate, seed) = match dropout {
        Some(spec) => (spec.rate, spec.seed),
        None => (0.0, 0),
    };
    let mut tape = Tape::new(&params.store, dropout.is_some(), seed);

    // Input features restricted to the subgraph's nodes. One-hot features
    // never materialize: each head reads rows of its transform table
    // directly, with input dropout becoming a shared row mask.
    enum FeatInput {
        Rows(ValueId),
        OneHot { mask: Option<Vec<f64>> },
    }
    let feat = match features {
        Features::Dense(x) => {
            let mut xs = Tensor::zeros(&[nodes.len(), params.d]);
            for (i, &n) in nodes.iter().enumerate() {
                xs.row_mut(i).copy_from_slice(x.row(n as usize));
            }
            let mut id = tape.input(xs);
            if dropout.is_some() {
                id = tape.dropout(id, rate);
            }
            FeatInput::Rows(id)
        }
        Features::OneHot { .. } => FeatInput::OneHot {
            mask: dropout
                .is_some()
                .then(|| tape.sample_mask(nodes.len(), rate)),
        },
    };

    let mut trace_scores: Vec<Vec<Tensor>> = Vec::with_capacity(params.heads);
    let mut trace_alpha: Vec<Vec<Tensor>> = Vec::with_capacity(params.heads);
    let mut trace_hops: Vec<Vec<Tensor>> = Vec::with_capacity(params.heads);
    let mut trace_mixed: Vec<Tensor> = Vec::with_capacity(params.heads);
    let mut head_outputs: Vec<ValueId> = Vec::with_capacity(params.heads);

    for m in 0..params.heads {
        let head = params.head(m);
        let table = tape.param(head.transform);
        let h_all = match &feat {
            FeatInput::Rows(x) => tape.matmul(*x, table),
            FeatInput::OneHot { mask } => {
                let gathered = tape.gather_rows(table, &nodes);
                match mask {
                    Some(mask) => tape.apply_mask(gathered, mask.clone(), true),
                    None => gathered,
                }
            }
        };

        let mut per_hop_scores = Vec::with_capacity(c);
        let mut per_hop_alpha = Vec::with_capacity(c);
        let mut per_hop_features = Vec::with_capacity(c);
        let mut hop_ids: Vec<ValueId> = Vec::with_capacity(c);

        for k in 1..=c {
            let seg_len = subgraph.hop_list(0, k).len();
            let mut center_ids = Vec::with_capacity(n_centers * seg_len);
            let mut neighbor_ids = Vec::with_capacity(n_centers * seg_len);
            let mut offsets = Vec::with_capacity(n_centers + 1);
            offsets.push(0);
            for (ci, &center) in centers.iter().enumerate() {
                let list = subgraph.hop_list(ci, k);
                debug_assert_eq!(list.len(), seg_len);
                for &j in list {
                    center_ids.push(local[&center]);
                    neighbor_ids.push(local[&j]);
                }
                offsets.push(offsets[ci] + list.len());
            }

            let h_neighbors = tape.gather_rows(h_all, &neighbor_ids);
            let alpha = match arm {
                Arm::DualAttention => {
                    let h_centers = tape.gather_rows(h_all, &center_ids);
                    let cat = tape.concat_cols(&[h_centers, h_neighbors]);
                    let att = tape.param(head.attention);
                    let raw = tape.matvec(cat, att);
                    let scored = tape.leaky_relu(raw, params.leaky_slope);
                    per_hop_scores.push(tape.value(scored).clone());
                    tape.masked_softmax(scored, &offsets)
                }
                Arm::PlainConvolution => {
                    let mut weights = Vec::with_capacity(n_centers * seg_len);
                    for (ci, _) in centers.iter().enumerate() {
                        let ws = subgraph.hop_weights(ci, k);
                        let total: f64 = ws.iter().sum();
                        weights.extend(ws.iter().map(|w| w / total));
                    }
                    tape.input(Tensor::from_vec(&[weights.len()], weights))
                }
            };
            per_hop_alpha.push(tape.value(alpha).clone());

            let alpha_used = if dropout.is_some() {
                tape.dropout(alpha, rate)
            } else {
                alpha
            };
            let agg = tape.segment_weighted_sum(alpha_used, h_neighbors, &offsets);
            let activated = match params.activation {
                Activation::Elu => tape.elu(agg),
                Activation::LeakyRelu => tape.leaky_relu(agg, params.leaky_slope),
            };
            per_hop_features.push(tape.value(activated).clone());
            hop_ids.push(activated);
        }

        let coeffs: Vec<f64> = match arm {
            Arm::DualAttention => params.q.clone(),
            Arm::PlainConvolution => vec![1.0 / c as f64; c],
        };
        let mixed = tape.weighted_sum(&hop_ids, &coeffs);
        trace_mixed.push(tape.value(mixed).clone());
        head_outputs.push(mixed);

        trace_scores.push(per_hop_scores);
        trace_alpha.push(per_hop_alpha);
        trace_hops.push(per_hop_features);
    }

    let concatenated = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)
    };
    let cls_w = tape.param(params.classifier_weight);
    let cls_b = tape.param(params.classifier_bias);
    let logits_id = tape.affine(concatenated, cls_w, cls_b);

    let logits = tape.value(logits_id).clone();
    let z = row_softmax(&logits);
    let concatenated_value = tape.value(concatenated).clone();

    Ok(ForwardTrace {
        tape,
        logits_id,
        centers,
        scores: trace_scores,
        alpha: trace_alpha,
        hop_features: trace_hops,
        mixed: trace_mixed,
        concatenated: concatenated_value,
        logits,
        z,
    })
}

/// Max relative error between the model's analytic gradients and central
/// differences of its training loss, over every parameter component.
///
/// Dropout is off for both passes. The loss is the masked cross-entropy
/// plus `λ‖θ‖²` with the model's own `λ`.
pub fn model_grad_check(
    params: &mut DualAttentionParams,
    features: &Features,
    subgraph: &SampledSubgraph,
    labels: &[usize],
    labeled_mask: &[bool],
    epsilon: f64,
) -> Result<f64, ModelError> {
    assert!(
        (1e-6..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-6, 1e-3]"
    );
    let lambda = params.lambda;
    let analytic = {
        let mut trace = dual_attention_forward(features, subgraph, params, None)?;
        let loss_id = trace.loss_on_tape(labels, labeled_mask, lambda, params)?;
        trace.backward(loss_id)
    };
    let loss_at = |params: &DualAttentionParams| -> Result<f64, ModelError> {
        let mut trace = dual_attention_forward(features, subgraph, params, None)?;
        let loss_id = trace.loss_on_tape(labels, labeled_mask, lambda, params)?;
        Ok(trace.value(loss_id).item())
    };

    let mut max_err: f64 = 0.0;
    let pids: Vec<ParamId> = params.store.ids().collect();
    for pid in pids {
        let shape = params.store.get(pid).shape().to_vec();
        let dense = analytic.dense(pid, &shape);
        for i in 0..dense.len() {
            let orig = params.store.get(pid).data()[i];
            params.store.get_mut(pid).data_mut()[i] = orig + epsilon;
            let plus = loss_at(params)?;
            params.store.get_mut(pid).data_mut()[i] = orig - epsilon;
            let minus = loss_at(params)?;
            params.store.get_mut(pid).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = dense.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Connection-attention coefficients for hop `k` as plain data.
///
/// `h_prime` is row-indexed by global node id. Duplicate sampled ids get
/// independent slots. Each center's coefficients sum to one.
pub fn connection_attention(
    h_prime: &Tensor,
    subgraph: &SampledSubgraph,
    attention: &[f64],
    leaky_slope: f64,
    k: usize,
) -> Vec<Vec<f64>> {
    let d_prime = h_prime.cols();
    assert_eq!(attention.len(), 2 * d_prime, "attention vector must be 2d'");
    let (a_center, a_neighbor) = attention.split_at(d_prime);
    subgraph
        .centers()
        .iter()
        .enumerate()
        .map(|(ci, &center)| {
            let hc = h_prime.row(center as usize);
            let base: f64 = a_center.iter().zip(hc).map(|(a, h)| a * h).sum();
            let scores: Vec<f64> = subgraph
                .hop_list(ci, k)
                .iter()
                .map(|&j| {
                    let hj = h_prime.row(j as usize);
                    let s: f64 = base + a_neighbor.iter().zip(hj).map(|(a, h)| a * h).sum::<f64>();
                    if s > 0.0 {
                        s
                    } else {
                        leaky_slope * s
                    }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|&e| e / sum).collect()
        })
        .collect()
}

/// Hop aggregation as plain data: `h_i = δ(Σ_j α_ij · h'_j)` per center.
pub fn aggregate_hop(
    alpha: &[Vec<f64>],
    h_prime: &Tensor,
    subgraph: &SampledSubgraph,
    k: usize,
    activation: Activation,
    leaky_slope: f64,
) -> Tensor {
    let d_prime = h_prime.cols();
    let n_centers = subgraph.centers().len();
    assert_eq!(alpha.len(), n_centers, "alpha/center count mismatch");
    let mut out = Tensor::zeros(&[n_centers, d_prime]);
    for (ci, alpha_row) in alpha.iter().enumerate() {
        let list = subgraph.hop_list(ci, k);
        assert_eq!(alpha_row.len(), list.len(), "alpha/neighborhood mismatch");
        let row = out.row_mut(ci);
        for (&j, &a) in list.iter().zip(alpha_row) {
            for (o, &h) in row.iter_mut().zip(h_prime.row(j as usize)) {
                *o += a * h;
            }
        }
        for v in row.iter_mut() {
            *v = match activation {
                Activation::Elu => {
                    if *v > 0.0 {
                        *v
                    } else {
                        v.exp() - 1.0
                    }
                }
                Activation::LeakyRelu => {
                    if *v > 0.0 {
                        *v
                    } else {
                        leaky_slope * *v
                    }
                }
            };
        }
    }
    out
}

/// Summed cross-entropy of a class distribution against labels over the
/// masked rows, plus `λ‖θ‖²` over every registered parameter.
pub fn loss(
    z: &Tensor,
    labels: &[usize],
    labeled_mask: &[bool],
    lambda: f64,
    store: &ParamStore,
) -> Result<f64, ModelError> {
    assert_eq!(z.rows(), labels.len(), "labels length mismatch");
    assert_eq!(z.rows(), labeled_mask.len(), "mask length mismatch");
    if !labeled_mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyMask);
    }
    let mut total = 0.0;
    for r in 0..z.rows() {
        if labeled_mask[r] {
            total -= z.at(r, labels[r]).ln();
        }
    }
    let penalty: f64 = store.ids().map(|pid| store.get(pid).sum_squares()).sum();
    Ok(total + lambda * penalty)
}
