//! Momentum-SGD training over subgraph mini-batches, evaluation, the hop
//! sweep, and the two-arm ablation comparison.
//!
//! Training is transductive: test documents are nodes of the graph (and
//! get sampled into neighborhoods) but never contribute a loss term.
//! Everything is deterministic given `(config, corpus, graph, seed)`:
//! per-epoch shuffles, per-batch subgraph samples, and dropout masks all
//! derive from the configured seed, and evaluation uses its own fixed
//! seed (`seed + 1`) so reported accuracy is reproducible.

mod optimizer;

pub use optimizer::{momentum_step, LazyMomentum};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::graph::{sample_k_hop, sample_k_hop_capped, SampledSubgraph, TextGraph};
use crate::model::{
    forward_arm, Activation, Arm, DropoutSpec, DualAttentionParams, Features, ModelError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("features cover {features} nodes but the graph has {graph}")]
    FeatureGraphMismatch { features: usize, graph: usize },
    #[error("corpus has {corpus} documents but the graph has {graph}")]
    CorpusGraphMismatch { corpus: usize, graph: usize },
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Hyperparameters for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub heads: usize,
    pub d_prime: usize,
    /// Hop count c; 1..=3.
    pub hops: usize,
    pub fanout: usize,
    pub batch_size: usize,
    /// Cap on distinct nodes materialized per batch subgraph.
    pub subgraph_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub leaky_slope: f64,
    pub activation: Activation,
    /// Optional fraction of train documents held out for validation;
    /// reported separately, never trained on.
    pub val_frac: f64,
    /// When false, epoch records carry 0.0 seconds so metrics files are
    /// byte-identical across runs.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            dropout: 0.3,
            epochs: 300,
            heads: 8,
            d_prime: 64,
            hops: 1,
            fanout: 70,
            batch_size: 10,
            subgraph_size: 200,
            lambda: 5e-4,
            seed: 0,
            leaky_slope: 0.2,
            activation: Activation::Elu,
            val_frac: 0.0,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.lr < 0.0 || self.lr > 1.0 {
            return err(format!("lr {} outside [0, 1]", self.lr));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.epochs < 1 {
            return err("epochs must be at least 1".into());
        }
        if !(1..=3).contains(&self.hops) {
            return err(format!("hops {} outside 1..=3", self.hops));
        }
        if self.fanout < 1 {
            return err("fanout must be at least 1".into());
        }
        if self.batch_size < 1 {
            return err("batch size must be at least 1".into());
        }
        if self.subgraph_size < 1 {
            return err("subgraph size must be at least 1".into());
        }
        if self.lambda < 0.0 {
            return err(format!("l2 coefficient {} is negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return err(format!("val fraction {} outside [0, 1)", self.val_frac));
        }
        if self.heads < 1 || self.d_prime < 1 {
            return err("heads and feature width must be at least 1".into());
        }
        Ok(())
    }
}

/// One epoch's metrics, in the JSON-lines schema of the metrics file.
///
/// `train_loss` is the mean per-document cross-entropy over the train
/// split under evaluation-mode sampling, plus `λ‖θ‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Per-epoch records, dense from epoch 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub epochs: Vec<EpochRecord>,
}

/// A trained model plus what evaluation needs to reproduce its numbers.
pub struct TrainedModel {
    pub params: DualAttentionParams,
    pub arm: Arm,
    pub fanout: usize,
    pub batch_size: usize,
    pub eval_seed: u64,
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: MetricsHistory,
    /// Accuracy on the held-out validation fraction, when configured.
    pub val_accuracy: Option<f64>,
}

const TAG_INIT: u64 = 0x01;
const TAG_VAL_SPLIT: u64 = 0x02;
const TAG_SHUFFLE: u64 = 0x100_0000;
const TAG_SAMPLE: u64 = 0x200_0000;
const TAG_DROPOUT: u64 = 0x300_0000;
const TAG_EVAL: u64 = 0x400_0000;

/// SplitMix64-style derivation of independent sub-seeds.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train a dual-attention model; see [`train_arm`].
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    graph: &TextGraph,
    features: &Features,
) -> Result<TrainOutcome, TrainError> {
    train_arm(config, corpus, graph, features, Arm::DualAttention)
}

/// Train one arm with subgraph mini-batching and lazy momentum updates.
pub fn train_arm(
    config: &TrainConfig,
    corpus: &Corpus,
    graph: &TextGraph,
    features: &Features,
    arm: Arm,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if features.node_count() != graph.n_nodes() {
        return Err(TrainError::FeatureGraphMismatch {
            features: features.node_count(),
            graph: graph.n_nodes(),
        });
    }
    if corpus.n_docs() != graph.n_docs() {
        return Err(TrainError::CorpusGraphMismatch {
            corpus: corpus.n_docs(),
            graph: graph.n_docs(),
        });
    }

    let mut train_ids = corpus.train_ids();
    if train_ids.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let test_ids = corpus.test_ids();

    // Optional validation holdout, carved deterministically off the train
    // split and excluded from every batch.
    let mut val_ids = Vec::new();
    if config.val_frac > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, TAG_VAL_SPLIT));
        train_ids.shuffle(&mut rng);
        let n_val = ((train_ids.len() as f64) * config.val_frac).floor() as usize;
        val_ids = train_ids.split_off(train_ids.len() - n_val);
        train_ids.sort_unstable();
        val_ids.sort_unstable();
        if train_ids.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
    }

    let mut params = DualAttentionParams::init(
        features.dim(),
        config.d_prime,
        config.heads,
        config.hops,
        corpus.n_labels(),
        config.leaky_slope,
        config.activation,
        config.lambda,
        sub_seed(config.seed, TAG_INIT),
    );
    let mut optimizer = LazyMomentum::new(&params.store, config.lr, config.momentum, config.lambda);
    let one_hot = matches!(features, Features::OneHot { .. });
    let tables = params.transform_tables();

    let labels: Vec<usize> = corpus.documents.iter().map(|d| d.label).collect();
    let eval_seed = config.seed.wrapping_add(1);
    let mut history = MetricsHistory::default();
    let mut global_step: u64 = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order = train_ids.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(sub_seed(config.seed, TAG_SHUFFLE + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let centers: Vec<u32> = batch.iter().map(|&id| id as u32).collect();
            let subgraph = sample_k_hop_capped(
                graph,
                &centers,
                config.fanout,
                config.hops,
                sub_seed(config.seed, TAG_SAMPLE + global_step),
                Some(config.subgraph_size),
            );
            if one_hot {
                let nodes = subgraph.distinct_nodes();
                for &table in &tables {
                    optimizer.prepare_rows(&mut params.store, table, &nodes);
                }
            }

            let batch_labels: Vec<usize> = batch.iter().map(|&id| labels[id]).collect();
            let mask = vec![true; batch.len()];
            let grads = {
                let mut trace = forward_arm(
                    features,
                    &subgraph,
                    &params,
                    Some(DropoutSpec {
                        rate: config.dropout,
                        seed: sub_seed(config.seed, TAG_DROPOUT + global_step),
                    }),
                    arm,
                )?;
                let loss_id = trace.cross_entropy_on_tape(&batch_labels, &mask)?;
                if !trace.value(loss_id).item().is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                trace.backward(loss_id)
            };
            optimizer.apply(&mut params.store, &grads);
            global_step += 1;
        }

        optimizer.sync(&mut params.store);

        let (train_acc, train_ce) = evaluate_ids(
            &params,
            arm,
            graph,
            features,
            &train_ids,
            &labels,
            config.fanout,
            config.batch_size,
            sub_seed(eval_seed, TAG_EVAL),
        )?;
        let (test_acc, _) = evaluate_ids(
            &params,
            arm,
            graph,
            features,
            &test_ids,
            &labels,
            config.fanout,
            config.batch_size,
            sub_seed(eval_seed, TAG_EVAL + 1),
        )?;
        let penalty: f64 = params
            .store
            .ids()
            .map(|pid| params.store.get(pid).sum_squares())
            .sum();
        let train_loss = train_ce + config.lambda * penalty;

        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            test_acc,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    let val_accuracy = if val_ids.is_empty() {
        None
    } else {
        let (acc, _) = evaluate_ids(
            &params,
            arm,
            graph,
            features,
            &val_ids,
            &labels,
            config.fanout,
            config.batch_size,
            sub_seed(eval_seed, TAG_EVAL + 2),
        )?;
        Some(acc)
    };

    Ok(TrainOutcome {
        model: TrainedModel {
            params,
            arm,
            fanout: config.fanout,
            batch_size: config.batch_size,
            eval_seed,
        },
        history,
        val_accuracy,
    })
}

/// Accuracy of a trained model over one split of the corpus.
///
/// Dropout is off; neighborhoods are re-sampled under the model's fanout
/// with the fixed evaluation seed, so results are reproducible. Ties in
/// the class distribution resolve to the lowest class index.
pub fn evaluate(
    model: &TrainedModel,
    corpus: &Corpus,
    graph: &TextGraph,
    features: &Features,
    split: crate::corpus::Split,
) -> Result<f64, TrainError> {
    let ids = match split {
        crate::corpus::Split::Train => corpus.train_ids(),
        crate::corpus::Split::Test => corpus.test_ids(),
    };
    let labels: Vec<usize> = corpus.documents.iter().map(|d| d.label).collect();
    let (acc, _) = evaluate_ids(
        &model.params,
        model.arm,
        graph,
        features,
        &ids,
        &labels,
        model.fanout,
        model.batch_size,
        sub_seed(model.eval_seed, TAG_EVAL),
    )?;
    Ok(acc)
}

/// Accuracy and mean per-document cross-entropy over explicit doc ids.
#[allow(clippy::too_many_arguments)]
fn evaluate_ids(
    params: &DualAttentionParams,
    arm: Arm,
    graph: &TextGraph,
    features: &Features,
    ids: &[usize],
    labels: &[usize],
    fanout: usize,
    chunk_size: usize,
    eval_seed: u64,
) -> Result<(f64, f64), TrainError> {
    if ids.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    for (chunk_idx, chunk) in ids.chunks(chunk_size.max(1)).enumerate() {
        let centers: Vec<u32> = chunk.iter().map(|&id| id as u32).collect();
        let subgraph: SampledSubgraph = sample_k_hop(
            graph,
            &centers,
            fanout,
            params.hops,
            sub_seed(eval_seed, chunk_idx as u64),
        );
        let trace = forward_arm(features, &subgraph, params, None, arm)?;
        let preds = trace.predictions();
        for (row, &doc) in chunk.iter().enumerate() {
            if preds[row] == labels[doc] {
                correct += 1;
            }
            ce_sum -= trace.z.at(row, labels[doc]).max(1e-300).ln();
        }
    }
    Ok((correct as f64 / ids.len() as f64, ce_sum / ids.len() as f64))
}

/// One row of the hop-sweep table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub hops: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Train one model per hop count with otherwise identical seeds and
/// hyperparameters, and report per-K accuracy.
pub fn hop_sweep(
    config: &TrainConfig,
    corpus: &Corpus,
    graph: &TextGraph,
    features: &Features,
    k_list: &[usize],
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let started = Instant::now();
        let run_config = TrainConfig {
            hops: k,
            ..config.clone()
        };
        let outcome = train(&run_config, corpus, graph, features)?;
        let last = outcome
            .history
            .epochs
            .last()
            .expect("training always records at least one epoch");
        rows.push(SweepRow {
            hops: k,
            train_acc: last.train_acc,
            test_acc: last.test_acc,
            seconds: if config.record_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(rows)
}

/// Paired two-arm comparison under identical seeds and hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub dual_attention_test_acc: f64,
    pub plain_convolution_test_acc: f64,
}

pub fn ablate(
    config: &TrainConfig,
    corpus: &Corpus,
    graph: &TextGraph,
    features: &Features,
) -> Result<AblationReport, TrainError> {
    let dual = train_arm(config, corpus, graph, features, Arm::DualAttention)?;
    let plain = train_arm(config, corpus, graph, features, Arm::PlainConvolution)?;
    let last = |o: &TrainOutcome| o.history.epochs.last().unwrap().test_acc;
    Ok(AblationReport {
        seed: config.seed,
        dual_attention_test_acc: last(&dual),
        plain_convolution_test_acc: last(&plain),
    })
}
