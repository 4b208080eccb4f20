//! The L-layer graph convolutional encoder.
//!
//! Each layer computes `batchnorm(ReLU(A0 * drop(Z) * Theta0 + A1 * drop(Z) * Theta1))`
//! where `A0` is the identity, `A1` the row-normalized self-loop adjacency,
//! `drop` is input dropout in training mode, and batch normalization dresses
//! the activation output. Stacking `L` layers conditions each node's
//! embedding on its distance-`L` neighbourhood.

use rand::{Rng, RngCore};

use crate::graph::{Graph, NormalizedAdjacency};
use crate::numeric::batchnorm::column_stats;
use crate::numeric::{BatchNormState, Matrix, NumericError, Tape, ValueId};

/// Number of adjacency steps beyond the identity. Fixed at one: each layer
/// aggregates depth-one neighbours only.
pub const ADJACENCY_STEPS: usize = 1;

/// One graph convolutional layer: the two per-step weight matrices, the
/// batch-norm dressing over the output width, and the input dropout rate.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub theta0: Matrix,
    pub theta1: Matrix,
    pub bn: BatchNormState,
    pub input_dropout_rate: f64,
}

impl GcnLayer {
    pub fn input_width(&self) -> usize {
        self.theta0.rows()
    }

    pub fn output_width(&self) -> usize {
        self.theta0.cols()
    }
}

/// Encoder hyperparameters. `new` fills in the defaults used throughout:
/// 3 layers of 350 units with input dropout 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_width: usize,
    pub input_dim: usize,
    pub input_dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            num_layers: 3,
            hidden_width: 350,
            input_dim,
            input_dropout: 0.5,
            seed: 0,
        }
    }

    /// `(input, output)` widths of layer `l`.
    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        let input = if layer == 0 {
            self.input_dim
        } else {
            self.hidden_width
        };
        (input, self.hidden_width)
    }
}

/// Glorot-style uniform initialization of every layer, driven by `rng`.
pub fn init_layers(config: &EncoderConfig, rng: &mut impl Rng) -> Vec<GcnLayer> {
    assert!(config.num_layers >= 1, "encoder needs at least one layer");
    assert!(config.hidden_width > 0, "hidden width must be positive");
    (0..config.num_layers)
        .map(|l| {
            let (fan_in, fan_out) = config.layer_dims(l);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut sample = |rows: usize, cols: usize| {
                Matrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                )
            };
            let theta0 = sample(fan_in, fan_out);
            let theta1 = sample(fan_in, fan_out);
            GcnLayer {
                theta0,
                theta1,
                bn: BatchNormState::new(fan_out),
                input_dropout_rate: config.input_dropout,
            }
        })
        .collect()
}

/// Forward-pass mode: training applies input dropout and batch statistics,
/// inference is a deterministic function of the inputs.
pub enum ForwardMode<'r> {
    Train { rng: &'r mut dyn RngCore },
    Infer,
}

/// How a tape-level layer normalizes its output.
pub(crate) enum BnStrategy {
    Batch {
        eps: f64,
    },
    Frozen {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
}

/// Tape handles for one layer's parameters.
pub(crate) struct LayerTapeParams {
    pub theta0: ValueId,
    pub theta1: ValueId,
    pub gamma: ValueId,
    pub beta: ValueId,
    pub input_dropout: f64,
    pub bn: BnStrategy,
}

/// Records one layer on the tape. Returns the output node, which is also the
/// batch-norm node (its batch statistics are retrievable in `Batch` mode).
pub(crate) fn layer_tape_forward<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    z: ValueId,
    adj0: &'a NormalizedAdjacency,
    adj1: &'a NormalizedAdjacency,
    params: &LayerTapeParams,
    rng: Option<&mut R>,
) -> Result<ValueId, NumericError> {
    let dropped = match rng {
        Some(rng) if params.input_dropout > 0.0 => tape.dropout(z, params.input_dropout, rng),
        _ => z,
    };
    let t0 = tape.matmul(dropped, params.theta0)?;
    let p0 = tape.spmm(adj0, t0)?;
    let t1 = tape.matmul(dropped, params.theta1)?;
    let p1 = tape.spmm(adj1, t1)?;
    let summed = tape.add(p0, p1)?;
    let activated = tape.relu(summed);
    match &params.bn {
        BnStrategy::Batch { eps } => {
            tape.batchnorm_batch(activated, params.gamma, params.beta, *eps)
        }
        BnStrategy::Frozen { mean, var, eps } => {
            tape.batchnorm_frozen(activated, params.gamma, params.beta, mean, var, *eps)
        }
    }
}

/// Records the whole encoder. Returns the embedding node and the per-layer
/// output nodes (for batch-statistic retrieval).
pub(crate) fn encoder_tape_forward<'a, R: Rng + ?Sized>(
    tape: &mut Tape<'a>,
    x: ValueId,
    adj0: &'a NormalizedAdjacency,
    adj1: &'a NormalizedAdjacency,
    layers: &[LayerTapeParams],
    mut rng: Option<&mut R>,
) -> Result<(ValueId, Vec<ValueId>), NumericError> {
    let mut z = x;
    let mut outputs = Vec::with_capacity(layers.len());
    for layer in layers {
        let reborrowed = rng.as_mut().map(|r| &mut **r);
        z = layer_tape_forward(tape, z, adj0, adj1, layer, reborrowed)?;
        outputs.push(z);
    }
    Ok((z, outputs))
}

fn layer_params_for<'t>(tape: &mut Tape<'t>, layer: &GcnLayer, train: bool) -> LayerTapeParams {
    let theta0 = tape.constant(layer.theta0.clone());
    let theta1 = tape.constant(layer.theta1.clone());
    let gamma = tape.constant(Matrix::from_vec(1, layer.bn.width(), layer.bn.gamma.clone()));
    let beta = tape.constant(Matrix::from_vec(1, layer.bn.width(), layer.bn.beta.clone()));
    let bn = if train {
        BnStrategy::Batch { eps: layer.bn.eps }
    } else {
        BnStrategy::Frozen {
            mean: layer.bn.running_mean.clone(),
            var: layer.bn.running_var.clone(),
            eps: layer.bn.eps,
        }
    };
    LayerTapeParams {
        theta0,
        theta1,
        gamma,
        beta,
        input_dropout: layer.input_dropout_rate,
        bn,
    }
}

fn layer_forward_inner<R: Rng + ?Sized>(
    z: &Matrix,
    adj0: &NormalizedAdjacency,
    adj1: &NormalizedAdjacency,
    layer: &mut GcnLayer,
    rng: Option<&mut R>,
) -> Result<Matrix, NumericError> {
    if z.cols() != layer.input_width() {
        return Err(NumericError::DimensionMismatch {
            op: "layer_forward",
            lhs_rows: z.rows(),
            lhs_cols: z.cols(),
            rhs_rows: layer.input_width(),
            rhs_cols: layer.output_width(),
        });
    }
    let mut tape = Tape::new();
    let zi = tape.constant(z.clone());
    let params = layer_params_for(&mut tape, layer, rng.is_some());
    let out = layer_tape_forward(&mut tape, zi, adj0, adj1, &params, rng)?;
    if let Some((mean, var)) = tape.batch_stats(out) {
        let (mean, var) = (mean.to_vec(), var.to_vec());
        layer.bn.update_running(&mean, &var);
    }
    Ok(tape.value(out).clone())
}

/// One layer of the encoder applied to `z`.
///
/// Training mode draws an input dropout mask, normalizes by batch statistics
/// and folds them into the layer's running statistics; inference mode is a
/// deterministic function of `z` and the layer parameters.
pub fn layer_forward(
    z: &Matrix,
    adj0: &NormalizedAdjacency,
    adj1: &NormalizedAdjacency,
    layer: &mut GcnLayer,
    mode: ForwardMode,
) -> Result<Matrix, NumericError> {
    match mode {
        ForwardMode::Train { rng } => layer_forward_inner(z, adj0, adj1, layer, Some(rng)),
        ForwardMode::Infer => layer_forward_inner::<dyn RngCore>(z, adj0, adj1, layer, None),
    }
}

/// Full encoder pass: `Z^(0) = X`, then `L` dressed graph convolutions.
/// Row `i` of the result is the context-conditioned embedding of node `i`.
pub fn encoder_forward(
    x: &Matrix,
    g: &Graph,
    layers: &mut [GcnLayer],
    mode: ForwardMode,
) -> Result<Matrix, NumericError> {
    if x.rows() != g.num_nodes() {
        return Err(NumericError::DimensionMismatch {
            op: "encoder_forward",
            lhs_rows: x.rows(),
            lhs_cols: x.cols(),
            rhs_rows: g.num_nodes(),
            rhs_cols: x.cols(),
        });
    }
    let adj0 = NormalizedAdjacency::for_step(g, 0);
    let adj1 = NormalizedAdjacency::for_step(g, 1);
    let mut rng: Option<&mut dyn RngCore> = match mode {
        ForwardMode::Train { rng } => Some(rng),
        ForwardMode::Infer => None,
    };
    let mut z = x.clone();
    for layer in layers.iter_mut() {
        let reborrowed = rng.as_mut().map(|r| &mut **r);
        z = layer_forward_inner(&z, &adj0, &adj1, layer, reborrowed)?;
    }
    Ok(z)
}

/// Deterministic inference pass over immutable layers.
pub fn encoder_infer(x: &Matrix, g: &Graph, layers: &[GcnLayer]) -> Result<Matrix, NumericError> {
    if x.rows() != g.num_nodes() {
        return Err(NumericError::DimensionMismatch {
            op: "encoder_infer",
            lhs_rows: x.rows(),
            lhs_cols: x.cols(),
            rhs_rows: g.num_nodes(),
            rhs_cols: x.cols(),
        });
    }
    let adj0 = NormalizedAdjacency::for_step(g, 0);
    let adj1 = NormalizedAdjacency::for_step(g, 1);
    let mut z = x.clone();
    for layer in layers {
        let mut tape = Tape::new();
        let zi = tape.constant(z);
        let gamma = tape.constant(Matrix::from_vec(1, layer.bn.width(), layer.bn.gamma.clone()));
        let beta = tape.constant(Matrix::from_vec(1, layer.bn.width(), layer.bn.beta.clone()));
        let t0 = tape.constant(layer.theta0.clone());
        let t1 = tape.constant(layer.theta1.clone());
        let params = LayerTapeParams {
            theta0: t0,
            theta1: t1,
            gamma,
            beta,
            input_dropout: 0.0,
            bn: BnStrategy::Frozen {
                mean: layer.bn.running_mean.clone(),
                var: layer.bn.running_var.clone(),
                eps: layer.bn.eps,
            },
        };
        let out = layer_tape_forward::<dyn RngCore>(&mut tape, zi, &adj0, &adj1, &params, None)?;
        z = tape.value(out).clone();
    }
    Ok(z)
}

/// Undressed graph convolution `ReLU(A0 Z Theta0 + A1 Z Theta1)` — no
/// dropout, no batch norm. Shared by the node-form equivalence checks.
pub fn graph_conv(
    z: &Matrix,
    adj0: &NormalizedAdjacency,
    adj1: &NormalizedAdjacency,
    theta0: &Matrix,
    theta1: &Matrix,
) -> Result<Matrix, NumericError> {
    let p0 = adj0.matmul(&z.matmul(theta0)?)?;
    let p1 = adj1.matmul(&z.matmul(theta1)?)?;
    Ok(p0.add(&p1)?.relu())
}

/// Literal per-node layer evaluation:
/// `ReLU(z_i Theta0 + (1/|N_i|) sum_{j in N_i} z_j Theta1)`.
///
/// The neighbour term carries no self connection; this is the node-form
/// oracle against which the matrix form is checked.
pub fn node_form_forward(
    node: usize,
    z: &Matrix,
    g: &Graph,
    layer: &GcnLayer,
) -> Result<Vec<f64>, NumericError> {
    assert!(node < g.num_nodes(), "node {node} out of range");
    if z.cols() != layer.input_width() {
        return Err(NumericError::DimensionMismatch {
            op: "node_form_forward",
            lhs_rows: z.rows(),
            lhs_cols: z.cols(),
            rhs_rows: layer.input_width(),
            rhs_cols: layer.output_width(),
        });
    }
    let width = layer.output_width();
    let mut pre = vec![0.0; width];
    let zi = z.row(node);
    for c in 0..width {
        for (f, &v) in zi.iter().enumerate() {
            pre[c] += v * layer.theta0.get(f, c);
        }
    }
    let neighbours = g.neighbours(node);
    if !neighbours.is_empty() {
        let inv = 1.0 / neighbours.len() as f64;
        for &j in neighbours {
            let zj = z.row(j);
            for c in 0..width {
                let mut acc = 0.0;
                for (f, &v) in zj.iter().enumerate() {
                    acc += v * layer.theta1.get(f, c);
                }
                pre[c] += inv * acc;
            }
        }
    }
    Ok(pre.into_iter().map(|v| v.max(0.0)).collect())
}

/// Column statistics of an activation batch, for tests that freeze batch
/// norm at the statistics of a particular input.
pub fn activation_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    column_stats(m)
}
