//! End-to-end training: per-iteration edge holdout and structural dropout,
//! logit-space cross-entropy over sampled positive/negative pairs, Adam
//! updates, and early stopping on a fixed held-out validation split.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::decoder::{self, DecoderParams};
use crate::encoder::{
    encoder_infer, encoder_tape_forward, init_layers, BnStrategy, EncoderConfig, GcnLayer,
    LayerTapeParams,
};
use crate::eval;
use crate::graph::{self, Graph, GraphError, NormalizedAdjacency};
use crate::numeric::{
    adam_step, bce_with_logits, AdamHyper, BatchNormState, Matrix, NumericError, ParamId,
    ParamStore, Tape,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("feature matrix has {feature_rows} rows but the graph has {num_nodes} nodes")]
    FeatureRows {
        feature_rows: usize,
        num_nodes: usize,
    },
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("evaluation during training failed: {0}")]
    Eval(#[from] eval::EvalError),
}

/// Training hyperparameters. The defaults are the configuration the model is
/// meant to run with: 3 layers of 350 units, input dropout 0.5, p_drop 0.15,
/// Adam at 0.001 for up to 4000 iterations with early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Probability that a node loses all incident edges in one iteration.
    pub p_drop: f64,
    pub input_dropout: f64,
    pub hidden_width: usize,
    pub num_layers: usize,
    /// Fraction of edges held out once, up front, for validation.
    pub val_fraction: f64,
    /// Fraction of the remaining edges removed and predicted each iteration.
    pub train_edge_fraction: f64,
    pub negatives_per_positive: f64,
    /// Validation cadence in iterations.
    pub eval_every: usize,
    /// Evaluations without improvement > 1e-4 before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            max_iterations: 4000,
            p_drop: 0.15,
            input_dropout: 0.5,
            hidden_width: 350,
            num_layers: 3,
            val_fraction: 0.15,
            train_edge_fraction: 0.15,
            negatives_per_positive: 1.0,
            eval_every: 50,
            patience: 5,
            seed: 0,
        }
    }
}

/// Per-column statistics from the training features, reapplied at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// The full trained model: encoder layers, decoder, and the feature
/// standardization that inference must reapply.
#[derive(Clone, Debug, PartialEq)]
pub struct GaeModel {
    pub config: EncoderConfig,
    pub layers: Vec<GcnLayer>,
    pub decoder: DecoderParams,
    pub stats: StandardizeStats,
}

impl GaeModel {
    /// Fresh untrained model with the given standardization statistics.
    pub fn init(config: EncoderConfig, stats: StandardizeStats, rng: &mut impl Rng) -> Self {
        assert_eq!(stats.mean.len(), config.input_dim);
        let layers = init_layers(&config, rng);
        let decoder = DecoderParams::init(config.hidden_width, rng);
        Self {
            config,
            layers,
            decoder,
            stats,
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.config.hidden_width
    }

    /// Applies the stored per-column standardization to raw features.
    pub fn standardize(&self, x: &Matrix) -> Matrix {
        apply_standardization(x, &self.stats)
    }
}

/// Shifts and scales every column to the training-set statistics. Columns
/// with zero variance map to zero (their stored std is 1).
pub fn standardize_features(x: &Matrix) -> (Matrix, StandardizeStats) {
    let (rows, cols) = x.shape();
    assert!(rows >= 1, "cannot standardize an empty feature matrix");
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in mean.iter_mut().zip(x.row(r)) {
            *acc += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((acc, v), mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / rows as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let stats = StandardizeStats { mean, std };
    (apply_standardization(x, &stats), stats)
}

/// `(x - mean) / std` columnwise with previously computed statistics.
pub fn apply_standardization(x: &Matrix, stats: &StandardizeStats) -> Matrix {
    assert_eq!(x.cols(), stats.mean.len(), "standardization width mismatch");
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for c in 0..src.len() {
            dst[c] = (src[c] - stats.mean[c]) / stats.std[c];
        }
    }
    out
}

/// Outcome of [`early_stop_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_index: usize },
}

/// Improvement threshold below which a validation score does not reset the
/// patience counter.
pub const EARLY_STOP_MIN_IMPROVEMENT: f64 = 1e-4;

/// Stops once `patience` consecutive evaluations fail to improve on the best
/// score by more than [`EARLY_STOP_MIN_IMPROVEMENT`].
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    assert!(patience >= 1, "patience must be at least 1");
    if history.is_empty() {
        return StopDecision::Continue;
    }
    let mut best = history[0];
    let mut best_index = 0;
    let mut streak = 0;
    for (i, &score) in history.iter().enumerate().skip(1) {
        if score > best + EARLY_STOP_MIN_IMPROVEMENT {
            best = score;
            best_index = i;
            streak = 0;
        } else {
            streak += 1;
            if streak >= patience {
                return StopDecision::Stop { best_index };
            }
        }
    }
    StopDecision::Continue
}

/// One validation-time log record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub val_auc: f64,
    pub wall_time_s: f64,
}

/// Everything the training loop observed.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Training loss of every iteration, in order.
    pub loss_history: Vec<f64>,
    pub best_iteration: usize,
    pub best_val_auc: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    /// CSV rendering: one row per evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_auc,wall_time_s\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                row.iteration, row.loss, row.val_auc, row.wall_time_s
            ));
        }
        out
    }
}

struct LayerIds {
    theta0: ParamId,
    theta1: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

struct ModelParams {
    layers: Vec<LayerIds>,
    omega: ParamId,
    bias: ParamId,
}

fn register_params(
    store: &mut ParamStore,
    layers: &[GcnLayer],
    decoder: &DecoderParams,
) -> ModelParams {
    let layer_ids = layers
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerIds {
            theta0: store.register(format!("layer{l}.theta0"), layer.theta0.clone()),
            theta1: store.register(format!("layer{l}.theta1"), layer.theta1.clone()),
            gamma: store.register(
                format!("layer{l}.gamma"),
                Matrix::from_vec(1, layer.bn.width(), layer.bn.gamma.clone()),
            ),
            beta: store.register(
                format!("layer{l}.beta"),
                Matrix::from_vec(1, layer.bn.width(), layer.bn.beta.clone()),
            ),
        })
        .collect();
    let width = decoder.width();
    let omega = store.register("decoder.omega", Matrix::from_vec(width, 1, decoder.omega.clone()));
    let bias = store.register("decoder.bias", Matrix::from_vec(1, 1, vec![decoder.bias]));
    ModelParams {
        layers: layer_ids,
        omega,
        bias,
    }
}

fn materialize(
    store: &ParamStore,
    params: &ModelParams,
    bn_states: &[BatchNormState],
    config: &EncoderConfig,
    stats: &StandardizeStats,
    input_dropout: f64,
) -> GaeModel {
    let layers = params
        .layers
        .iter()
        .zip(bn_states)
        .map(|(ids, bn_state)| {
            let mut bn = bn_state.clone();
            bn.gamma = store.value(ids.gamma).row(0).to_vec();
            bn.beta = store.value(ids.beta).row(0).to_vec();
            GcnLayer {
                theta0: store.value(ids.theta0).clone(),
                theta1: store.value(ids.theta1).clone(),
                bn,
                input_dropout_rate: input_dropout,
            }
        })
        .collect();
    let decoder = DecoderParams {
        omega: store.value(params.omega).transpose().row(0).to_vec(),
        bias: store.value(params.bias).get(0, 0),
    };
    GaeModel {
        config: config.clone(),
        layers,
        decoder,
        stats: stats.clone(),
    }
}

/// Trains a model on the features and relation graph.
///
/// Per iteration: a fresh subset of the training-pool edges is removed from
/// the message-passing graph and labelled 1, an equal-rate sample of
/// non-edges of the original graph is labelled 0, node-level edge dropout
/// regularizes the remaining structure, and one Adam step minimizes the
/// logit-space cross-entropy over those pairs. Validation ROC-AUC over the
/// fixed held-out split is evaluated on a cadence; the returned model is the
/// snapshot with the best recorded validation score. Fully deterministic for
/// a fixed seed.
pub fn train(x: &Matrix, g: &Graph, config: &TrainConfig) -> Result<(GaeModel, TrainLog), TrainError> {
    if g.num_edges() == 0 {
        return Err(TrainError::EmptyGraph);
    }
    if x.rows() != g.num_nodes() {
        return Err(TrainError::FeatureRows {
            feature_rows: x.rows(),
            num_nodes: g.num_nodes(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let (x_std, stats) = standardize_features(x);

    // Fixed validation split; the validation positives never re-enter the
    // training pool or the message-passing graph.
    let split = graph::split_edges(g, config.val_fraction, 1.0, &mut rng)?;
    let a_hat = split.incomplete_graph;
    let val_pos = split.positives;
    let val_neg = split.negatives;
    let val_exclude: HashSet<(usize, usize)> = val_neg.iter().copied().collect();

    let enc_config = EncoderConfig {
        num_layers: config.num_layers,
        hidden_width: config.hidden_width,
        input_dim: x.cols(),
        input_dropout: config.input_dropout,
        seed: config.seed,
    };
    let init = GaeModel::init(enc_config.clone(), stats.clone(), &mut rng);
    let mut store = ParamStore::new();
    let param_ids = register_params(&mut store, &init.layers, &init.decoder);
    let mut bn_states: Vec<BatchNormState> = init.layers.iter().map(|l| l.bn.clone()).collect();

    let pool = a_hat.edges();
    let adj0 = NormalizedAdjacency::identity(g.num_nodes());
    let hyper = AdamHyper::with_learning_rate(config.learning_rate);

    let mut log = TrainLog::default();
    let mut auc_history = Vec::new();
    let mut best: Option<GaeModel> = None;
    let mut best_auc = f64::NEG_INFINITY;
    let started = Instant::now();

    for iteration in 1..=config.max_iterations {
        // Per-iteration prediction targets and the graph that must not
        // contain them.
        let num_pos = ((config.train_edge_fraction * pool.len() as f64).round() as usize)
            .clamp(1, pool.len());
        let picked = rand::seq::index::sample(&mut rng, pool.len(), num_pos);
        let positives: Vec<(usize, usize)> = picked.iter().map(|i| pool[i]).collect();
        let removed: HashSet<(usize, usize)> = positives.iter().copied().collect();
        let message_graph = a_hat.remove_edges(&removed);
        let message_graph = graph::node_edge_dropout(&message_graph, config.p_drop, &mut rng);

        let num_neg = (config.negatives_per_positive * num_pos as f64).round() as usize;
        let negatives = graph::sample_non_edges(g, num_neg, &mut rng, &val_exclude)?;

        let mut pairs = positives;
        let mut labels = vec![1.0; pairs.len()];
        pairs.extend(&negatives);
        labels.extend(std::iter::repeat(0.0).take(negatives.len()));
        debug_assert!(pairs
            .iter()
            .zip(&labels)
            .all(|(&(i, j), &y)| (y == 1.0) == g.has_edge(i, j)));

        let adj1 = NormalizedAdjacency::self_loop_normalized(&message_graph);
        let mut tape = Tape::new();
        let x_id = tape.constant(x_std.clone());
        let layer_params: Vec<LayerTapeParams> = param_ids
            .layers
            .iter()
            .zip(&bn_states)
            .map(|(ids, bn)| LayerTapeParams {
                theta0: tape.leaf(store.value(ids.theta0).clone()),
                theta1: tape.leaf(store.value(ids.theta1).clone()),
                gamma: tape.leaf(store.value(ids.gamma).clone()),
                beta: tape.leaf(store.value(ids.beta).clone()),
                input_dropout: config.input_dropout,
                bn: BnStrategy::Batch { eps: bn.eps },
            })
            .collect();
        let (h, layer_outs) =
            encoder_tape_forward(&mut tape, x_id, &adj0, &adj1, &layer_params, Some(&mut rng))?;
        let absdiff = tape.pair_abs_diff(h, &pairs)?;
        let omega_id = tape.leaf(store.value(param_ids.omega).clone());
        let bias_id = tape.leaf(store.value(param_ids.bias).clone());
        let raw_logits = tape.matmul(absdiff, omega_id)?;
        let logits_id = tape.add_row_vector(raw_logits, bias_id)?;

        let logits: Vec<f64> = tape.value(logits_id).as_slice().to_vec();
        let (loss, dlogits) = bce_with_logits(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration, loss });
        }
        log.loss_history.push(loss);

        let mut grads = tape.backward(logits_id, Matrix::from_vec(dlogits.len(), 1, dlogits))?;
        for (layer, out_id) in layer_outs.iter().enumerate() {
            let (mean, var) = tape
                .batch_stats(*out_id)
                .expect("training layers normalize by batch statistics");
            let (mean, var) = (mean.to_vec(), var.to_vec());
            bn_states[layer].update_running(&mean, &var);
        }

        let mut updates = Vec::with_capacity(store.len());
        let tape_store_pairs = param_ids
            .layers
            .iter()
            .zip(&layer_params)
            .flat_map(|(store_ids, tape_ids)| {
                [
                    (store_ids.theta0, tape_ids.theta0),
                    (store_ids.theta1, tape_ids.theta1),
                    (store_ids.gamma, tape_ids.gamma),
                    (store_ids.beta, tape_ids.beta),
                ]
            })
            .chain([
                (param_ids.omega, omega_id),
                (param_ids.bias, bias_id),
            ]);
        for (store_id, tape_id) in tape_store_pairs {
            if let Some(grad) = grads.take(tape_id) {
                updates.push((store_id, grad));
            }
        }
        adam_step(&mut store, &updates, hyper)?;

        let due = iteration == 1
            || iteration % config.eval_every == 0
            || iteration == config.max_iterations;
        if due {
            let model = materialize(
                &store,
                &param_ids,
                &bn_states,
                &enc_config,
                &stats,
                config.input_dropout,
            );
            let h_val = encoder_infer(&x_std, &a_hat, &model.layers)?;
            let pos_scores = decoder::decode_batch(&h_val, &val_pos, &model.decoder)?;
            let neg_scores = decoder::decode_batch(&h_val, &val_neg, &model.decoder)?;
            let auc = if val_pos.is_empty() || val_neg.is_empty() {
                0.5
            } else {
                eval::roc_auc(&pos_scores, &neg_scores)?
            };
            auc_history.push(auc);
            log.rows.push(TrainLogRow {
                iteration,
                loss,
                val_auc: auc,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            if auc > best_auc {
                best_auc = auc;
                log.best_iteration = iteration;
                best = Some(model);
            }
            if let StopDecision::Stop { .. } = early_stop_check(&auc_history, config.patience) {
                log.stopped_early = true;
                break;
            }
        }
    }

    log.best_val_auc = best_auc;
    let model = best.expect("at least one evaluation always runs");
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_hand_case() {
        let x = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        let (out, stats) = standardize_features(&x);
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(out, Matrix::from_rows(&[vec![-1.0], vec![1.0]]));
    }

    #[test]
    fn standardize_constant_column() {
        let x = Matrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0]]);
        let (out, stats) = standardize_features(&x);
        assert_eq!(stats.std[0], 1.0);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(1, 0), 0.0);
    }

    #[test]
    fn standardize_is_idempotent() {
        let x = Matrix::from_rows(&[vec![0.5], vec![-1.3], vec![2.2], vec![-1.4]]);
        let (once, _) = standardize_features(&x);
        let (twice, _) = standardize_features(&once);
        assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn early_stop_continues_on_strict_improvement() {
        let history = [0.5, 0.6, 0.7, 0.8];
        assert_eq!(early_stop_check(&history, 2), StopDecision::Continue);
    }

    #[test]
    fn early_stop_flat_series_counts_to_patience() {
        let history = [0.7, 0.7, 0.7, 0.7];
        assert_eq!(
            early_stop_check(&history, 3),
            StopDecision::Stop { best_index: 0 }
        );
        assert_eq!(early_stop_check(&history[..3], 3), StopDecision::Continue);
    }

    #[test]
    fn early_stop_hand_trace() {
        let history = [0.7, 0.8, 0.79, 0.79, 0.79];
        assert_eq!(
            early_stop_check(&history, 3),
            StopDecision::Stop { best_index: 1 }
        );
        assert_eq!(early_stop_check(&history[..4], 3), StopDecision::Continue);
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = Graph::build(3, &[]).unwrap();
        let x = Matrix::zeros(3, 2);
        assert!(matches!(
            train(&x, &g, &TrainConfig::default()),
            Err(TrainError::EmptyGraph)
        ));
    }

    #[test]
    fn feature_row_mismatch_is_rejected() {
        let g = Graph::build(3, &[(0, 1)]).unwrap();
        let x = Matrix::zeros(2, 2);
        assert!(matches!(
            train(&x, &g, &TrainConfig::default()),
            Err(TrainError::FeatureRows { .. })
        ));
    }

    #[test]
    fn untrained_model_initializes_with_zero_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let config = EncoderConfig::new(4);
        let stats = StandardizeStats {
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
        };
        let model = GaeModel::init(config, stats, &mut rng);
        assert_eq!(model.decoder.bias, 0.0);
        assert!(model.decoder.omega.iter().all(|w| w.abs() < 0.01));
        assert_eq!(model.layers.len(), 3);
    }
}
