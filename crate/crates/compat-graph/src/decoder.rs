//! Symmetric metric decoder: logistic regression on the absolute difference
//! of two embeddings, `p = sigmoid(|h_i - h_j| . omega + b)`.
//!
//! The absolute value makes the score invariant to the order of the nodes,
//! and because only the difference enters, adding any constant vector to
//! both embeddings leaves the score unchanged.

use rand::Rng;

use crate::numeric::{sigmoid, Matrix, NumericError};

/// Learnable decoder parameters: a weight per embedding dimension plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub omega: Vec<f64>,
    pub bias: f64,
}

impl DecoderParams {
    /// Small-random weights and zero bias, so an untrained decoder scores
    /// every pair near 0.5.
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        Self {
            omega: (0..width).map(|_| rng.gen_range(-0.01..0.01)).collect(),
            bias: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.omega.len()
    }
}

/// Scores one pair of embeddings; returns `(probability, logit)`.
pub fn decode_pair(
    h_i: &[f64],
    h_j: &[f64],
    params: &DecoderParams,
) -> Result<(f64, f64), NumericError> {
    if h_i.len() != params.width() || h_j.len() != params.width() {
        return Err(NumericError::DimensionMismatch {
            op: "decode_pair",
            lhs_rows: 1,
            lhs_cols: h_i.len().max(h_j.len()),
            rhs_rows: 1,
            rhs_cols: params.width(),
        });
    }
    let mut logit = params.bias;
    for ((a, b), w) in h_i.iter().zip(h_j).zip(&params.omega) {
        logit += (a - b).abs() * w;
    }
    Ok((sigmoid(logit), logit))
}

/// Scores every `(i, j)` pair against rows of `h`, preserving order.
pub fn decode_batch(
    h: &Matrix,
    pairs: &[(usize, usize)],
    params: &DecoderParams,
) -> Result<Vec<f64>, NumericError> {
    for &(i, j) in pairs {
        if i >= h.rows() || j >= h.rows() {
            return Err(NumericError::IndexOutOfRange {
                i,
                j,
                rows: h.rows(),
            });
        }
    }
    pairs
        .iter()
        .map(|&(i, j)| decode_pair(h.row(i), h.row(j), params).map(|(p, _)| p))
        .collect()
}

/// Logits for every pair, matching [`decode_batch`] order. Training consumes
/// these so the loss can be evaluated in logit space.
pub fn decode_batch_logits(
    h: &Matrix,
    pairs: &[(usize, usize)],
    params: &DecoderParams,
) -> Result<Vec<f64>, NumericError> {
    for &(i, j) in pairs {
        if i >= h.rows() || j >= h.rows() {
            return Err(NumericError::IndexOutOfRange {
                i,
                j,
                rows: h.rows(),
            });
        }
    }
    pairs
        .iter()
        .map(|&(i, j)| decode_pair(h.row(i), h.row(j), params).map(|(_, z)| z))
        .collect()
}
