//! Recorded-operation reverse-mode differentiation.
//!
//! The model's per-iteration computation is a fixed pipeline, so the tape
//! supports exactly the operations that pipeline needs: dense and sparse
//! products, addition, ReLU, dropout masks, batch normalization (batch or
//! frozen statistics), the pairwise absolute-difference gather feeding the
//! decoder, and scalar reduction. Each forward call appends a node; a single
//! reverse traversal yields exact adjoints for every recorded value.

use rand::Rng;

use super::batchnorm;
use super::matrix::{Matrix, NumericError};
use crate::graph::NormalizedAdjacency;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

struct BnAux {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    x_hat: Matrix,
}

enum Op<'a> {
    Leaf,
    Constant,
    MatMul {
        lhs: ValueId,
        rhs: ValueId,
    },
    SpMm {
        adj: &'a NormalizedAdjacency,
        input: ValueId,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
    },
    AddRowVector {
        input: ValueId,
        vec: ValueId,
    },
    Scale {
        input: ValueId,
        factor: f64,
    },
    Relu {
        input: ValueId,
    },
    Dropout {
        input: ValueId,
        mask: Vec<f64>,
    },
    BatchNormBatch {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        aux: BnAux,
    },
    BatchNormFrozen {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    PairAbsDiff {
        input: ValueId,
        pairs: Vec<(usize, usize)>,
    },
    SumAll {
        input: ValueId,
    },
}

struct Node<'a> {
    op: Op<'a>,
    value: Matrix,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ValueId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<'a>, value: Matrix, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Matrix) -> ValueId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (data, fixed statistics).
    pub fn constant(&mut self, value: Matrix) -> ValueId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, NumericError> {
        let value = self.value(lhs).matmul(self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Op::MatMul { lhs, rhs }, value, needs))
    }

    pub fn spmm(
        &mut self,
        adj: &'a NormalizedAdjacency,
        input: ValueId,
    ) -> Result<ValueId, NumericError> {
        let x = self.value(input);
        if adj.num_nodes() != x.rows() {
            return Err(NumericError::DimensionMismatch {
                op: "sparse_dense_matmul",
                lhs_rows: adj.num_nodes(),
                lhs_cols: adj.num_nodes(),
                rhs_rows: x.rows(),
                rhs_cols: x.cols(),
            });
        }
        // The step-0 matrix is the identity; multiplying by it reproduces
        // the input bit for bit, so no node is recorded.
        if adj.step() == 0 {
            return Ok(input);
        }
        let value = adj.matmul(x)?;
        let needs = self.needs(input);
        Ok(self.push(Op::SpMm { adj, input }, value, needs))
    }

    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, NumericError> {
        let value = self.value(lhs).add(self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Op::Add { lhs, rhs }, value, needs))
    }

    /// Adds a `1 x C` row vector to every row of an `R x C` matrix.
    pub fn add_row_vector(&mut self, input: ValueId, vec: ValueId) -> Result<ValueId, NumericError> {
        let m = self.value(input);
        let v = self.value(vec);
        if v.rows() != 1 || v.cols() != m.cols() {
            return Err(NumericError::DimensionMismatch {
                op: "add_row_vector",
                lhs_rows: m.rows(),
                lhs_cols: m.cols(),
                rhs_rows: v.rows(),
                rhs_cols: v.cols(),
            });
        }
        let mut value = m.clone();
        for r in 0..value.rows() {
            for (dst, add) in value.row_mut(r).iter_mut().zip(v.row(0)) {
                *dst += add;
            }
        }
        let needs = self.needs(input) || self.needs(vec);
        Ok(self.push(Op::AddRowVector { input, vec }, value, needs))
    }

    pub fn scale(&mut self, input: ValueId, factor: f64) -> ValueId {
        let value = self.value(input).scale(factor);
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, value, needs)
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let value = self.value(input).relu();
        let needs = self.needs(input);
        self.push(Op::Relu { input }, value, needs)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. `rate == 0` is the identity.
    ///
    /// Mask bits come from bulk-filled 32-bit draws, one per entry.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: ValueId, rate: f64, rng: &mut R) -> ValueId {
        assert!(
            (0.0..1.0).contains(&rate) || rate == 0.0,
            "dropout rate {rate} outside [0, 1)"
        );
        if rate == 0.0 {
            return input;
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let src = self.value(input);
        let len = src.as_slice().len();
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mut draws = vec![0u8; len * 4];
        rng.fill_bytes(&mut draws);
        let mask: Vec<f64> = draws
            .chunks_exact(4)
            .map(|b| {
                let v = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as u64;
                if v < threshold {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = src
            .as_slice()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data);
        let needs = self.needs(input);
        self.push(Op::Dropout { input, mask }, value, needs)
    }

    /// Batch normalization by batch statistics (training mode). The batch
    /// mean and population variance are retrievable via [`Self::batch_stats`].
    pub fn batchnorm_batch(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId, NumericError> {
        let x = self.value(input);
        let g = self.value(gamma);
        let b = self.value(beta);
        check_bn_shapes(x, g, b)?;
        let (mean, var) = batchnorm::column_stats(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_row = g.row(0).to_vec();
        let beta_row = b.row(0).to_vec();
        let cols = x.cols();
        let mut x_hat = Matrix::zeros(x.rows(), cols);
        let mut value = Matrix::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let src = x.row(r);
            let xh = x_hat.row_mut(r);
            for c in 0..cols {
                xh[c] = (src[c] - mean[c]) * inv_std[c];
            }
            let out = value.row_mut(r);
            let xh = x_hat.row(r);
            for c in 0..cols {
                out[c] = gamma_row[c] * xh[c] + beta_row[c];
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BatchNormBatch {
                input,
                gamma,
                beta,
                aux: BnAux {
                    mean,
                    var,
                    inv_std,
                    x_hat,
                },
            },
            value,
            needs,
        ))
    }

    /// Batch normalization against fixed statistics (inference or gradient
    /// checking). The statistics are constants, not differentiated.
    pub fn batchnorm_frozen(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<ValueId, NumericError> {
        let x = self.value(input);
        let g = self.value(gamma);
        let b = self.value(beta);
        check_bn_shapes(x, g, b)?;
        assert_eq!(mean.len(), x.cols());
        assert_eq!(var.len(), x.cols());
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_row = g.row(0).to_vec();
        let beta_row = b.row(0).to_vec();
        let cols = x.cols();
        let mut value = Matrix::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let src = x.row(r);
            let dst = value.row_mut(r);
            for c in 0..cols {
                dst[c] = gamma_row[c] * (src[c] - mean[c]) * inv_std[c] + beta_row[c];
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BatchNormFrozen {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            value,
            needs,
        ))
    }

    /// Per-pair elementwise `|h_i - h_j|` over rows of `input`.
    pub fn pair_abs_diff(
        &mut self,
        input: ValueId,
        pairs: &[(usize, usize)],
    ) -> Result<ValueId, NumericError> {
        let h = self.value(input);
        for &(i, j) in pairs {
            if i >= h.rows() || j >= h.rows() {
                return Err(NumericError::IndexOutOfRange {
                    i,
                    j,
                    rows: h.rows(),
                });
            }
        }
        let mut value = Matrix::zeros(pairs.len(), h.cols());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let (ri, rj) = (h.row(i), h.row(j));
            let dst = value.row_mut(p);
            for c in 0..dst.len() {
                dst[c] = (ri[c] - rj[c]).abs();
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::PairAbsDiff {
                input,
                pairs: pairs.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let total: f64 = self.value(input).as_slice().iter().sum();
        let needs = self.needs(input);
        self.push(
            Op::SumAll { input },
            Matrix::from_vec(1, 1, vec![total]),
            needs,
        )
    }

    /// Batch statistics recorded by a [`Self::batchnorm_batch`] node.
    pub fn batch_stats(&self, id: ValueId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNormBatch { aux, .. } => Some((&aux.mean, &aux.var)),
            _ => None,
        }
    }

    /// Smallest distance of any recorded value from a nondifferentiable
    /// point it could cross under a small perturbation: ReLU inputs near
    /// zero, and absolute differences near but not exactly zero. Exact-zero
    /// differences come from identical inputs (shared dead units); they
    /// perturb identically and never cross. Finite difference comparisons
    /// are only meaningful when this margin clearly exceeds the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.0].value.as_slice() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::PairAbsDiff { .. } => {
                    for &v in node.value.as_slice() {
                        if v != 0.0 {
                            margin = margin.min(v);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Propagates `seed_grad` from `seed` back to every recorded value in one
    /// reverse traversal.
    pub fn backward(&self, seed: ValueId, seed_grad: Matrix) -> Result<Gradients, NumericError> {
        let seed_value = self.value(seed);
        if seed_grad.shape() != seed_value.shape() {
            return Err(NumericError::DimensionMismatch {
                op: "backward_seed",
                lhs_rows: seed_value.rows(),
                lhs_cols: seed_value.cols(),
                rhs_rows: seed_grad.rows(),
                rhs_cols: seed_grad.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(seed_grad);

        // Reverse traversal: every consumer has a higher index, so a node's
        // adjoint is complete when it is reached. Interior adjoints are
        // consumed in place; only leaves keep theirs for the caller.
        for id in (0..=seed.0).rev() {
            let Some(mut grad) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad || matches!(self.nodes[id].op, Op::Leaf | Op::Constant) {
                grads[id] = Some(grad);
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => unreachable!("handled above"),
                Op::MatMul { lhs, rhs } => {
                    if self.needs(*lhs) {
                        let delta = grad.matmul(&self.value(*rhs).transpose())?;
                        accumulate(&mut grads, *lhs, delta);
                    }
                    if self.needs(*rhs) {
                        let delta = self.value(*lhs).transpose().matmul(&grad)?;
                        accumulate(&mut grads, *rhs, delta);
                    }
                }
                Op::SpMm { adj, input } => {
                    if self.needs(*input) {
                        let delta = adj.transpose_matmul(&grad)?;
                        accumulate(&mut grads, *input, delta);
                    }
                }
                Op::Add { lhs, rhs } => {
                    match (self.needs(*lhs), self.needs(*rhs)) {
                        (true, true) => {
                            accumulate(&mut grads, *lhs, grad.clone());
                            accumulate(&mut grads, *rhs, grad);
                        }
                        (true, false) => accumulate(&mut grads, *lhs, grad),
                        (false, true) => accumulate(&mut grads, *rhs, grad),
                        (false, false) => {}
                    }
                    continue;
                }
                Op::AddRowVector { input, vec } => {
                    if self.needs(*vec) {
                        let mut delta = Matrix::zeros(1, grad.cols());
                        for r in 0..grad.rows() {
                            for (d, g) in delta.row_mut(0).iter_mut().zip(grad.row(r)) {
                                *d += g;
                            }
                        }
                        accumulate(&mut grads, *vec, delta);
                    }
                    if self.needs(*input) {
                        accumulate(&mut grads, *input, grad);
                    }
                    continue;
                }
                Op::Scale { input, factor } => {
                    if self.needs(*input) {
                        let factor = *factor;
                        for g in grad.as_mut_slice() {
                            *g *= factor;
                        }
                        accumulate(&mut grads, *input, grad);
                    }
                    continue;
                }
                Op::Relu { input } => {
                    if self.needs(*input) {
                        let x = self.value(*input);
                        for (g, v) in grad.as_mut_slice().iter_mut().zip(x.as_slice()) {
                            if *v <= 0.0 {
                                *g = 0.0;
                            }
                        }
                        accumulate(&mut grads, *input, grad);
                    }
                    continue;
                }
                Op::Dropout { input, mask } => {
                    if self.needs(*input) {
                        for (g, m) in grad.as_mut_slice().iter_mut().zip(mask) {
                            *g *= m;
                        }
                        accumulate(&mut grads, *input, grad);
                    }
                    continue;
                }
                Op::BatchNormBatch {
                    input,
                    gamma,
                    beta,
                    aux,
                } => {
                    let (rows, cols) = grad.shape();
                    let n = rows as f64;
                    // Columnwise sums of dY and dY .* x_hat double as the
                    // beta and gamma adjoints.
                    let mut sum_dy = vec![0.0; cols];
                    let mut sum_dy_xhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = grad.row(r);
                        let xh = aux.x_hat.row(r);
                        for c in 0..cols {
                            sum_dy[c] += gr[c];
                            sum_dy_xhat[c] += gr[c] * xh[c];
                        }
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, Matrix::from_vec(1, cols, sum_dy.clone()));
                    }
                    if self.needs(*gamma) {
                        accumulate(
                            &mut grads,
                            *gamma,
                            Matrix::from_vec(1, cols, sum_dy_xhat.clone()),
                        );
                    }
                    if self.needs(*input) {
                        let g = self.value(*gamma);
                        let coeff: Vec<f64> = g
                            .row(0)
                            .iter()
                            .zip(&aux.inv_std)
                            .map(|(ga, is)| ga * is / n)
                            .collect();
                        let mut delta = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let gr = grad.row(r);
                            let xh = aux.x_hat.row(r);
                            let dst = delta.row_mut(r);
                            for c in 0..cols {
                                dst[c] =
                                    coeff[c] * (n * gr[c] - sum_dy[c] - xh[c] * sum_dy_xhat[c]);
                            }
                        }
                        accumulate(&mut grads, *input, delta);
                    }
                }
                Op::BatchNormFrozen {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (rows, cols) = grad.shape();
                    if self.needs(*beta) {
                        let mut sum_dy = vec![0.0; cols];
                        for r in 0..rows {
                            for (acc, g) in sum_dy.iter_mut().zip(grad.row(r)) {
                                *acc += g;
                            }
                        }
                        accumulate(&mut grads, *beta, Matrix::from_vec(1, cols, sum_dy));
                    }
                    if self.needs(*gamma) {
                        let x = self.value(*input);
                        let mut sum = vec![0.0; cols];
                        for r in 0..rows {
                            let gr = grad.row(r);
                            let xr = x.row(r);
                            for c in 0..cols {
                                sum[c] += gr[c] * (xr[c] - mean[c]) * inv_std[c];
                            }
                        }
                        accumulate(&mut grads, *gamma, Matrix::from_vec(1, cols, sum));
                    }
                    if self.needs(*input) {
                        let g = self.value(*gamma);
                        let mut delta = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let gr = grad.row(r);
                            let dst = delta.row_mut(r);
                            for c in 0..cols {
                                dst[c] = gr[c] * g.get(0, c) * inv_std[c];
                            }
                        }
                        accumulate(&mut grads, *input, delta);
                    }
                }
                Op::PairAbsDiff { input, pairs } => {
                    if self.needs(*input) {
                        let h = self.value(*input);
                        let mut delta = Matrix::zeros(h.rows(), h.cols());
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            let gp = grad.row(p);
                            for c in 0..h.cols() {
                                let d = h.get(i, c) - h.get(j, c);
                                let s = if d > 0.0 {
                                    1.0
                                } else if d < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                let v = s * gp[c];
                                delta.set(i, c, delta.get(i, c) + v);
                                delta.set(j, c, delta.get(j, c) - v);
                            }
                        }
                        accumulate(&mut grads, *input, delta);
                    }
                }
                Op::SumAll { input } => {
                    if self.needs(*input) {
                        let src = self.value(*input);
                        let g = grad.get(0, 0);
                        accumulate(
                            &mut grads,
                            *input,
                            Matrix::from_vec(src.rows(), src.cols(), vec![g; src.as_slice().len()]),
                        );
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_bn_shapes(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<(), NumericError> {
    for v in [gamma, beta] {
        if v.rows() != 1 || v.cols() != x.cols() {
            return Err(NumericError::DimensionMismatch {
                op: "batchnorm",
                lhs_rows: x.rows(),
                lhs_cols: x.cols(),
                rhs_rows: v.rows(),
                rhs_cols: v.cols(),
            });
        }
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Matrix>], id: ValueId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (dst, src) in existing.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let m = tape.leaf(Matrix::from_rows(&[vec![1.0, -4.0], vec![2.5, 0.0]]));
        let s = tape.sum(m);
        let grads = tape.backward(s, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        assert_eq!(
            grads.get(m).unwrap(),
            &Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]])
        );
    }

    #[test]
    fn dead_relu_units_get_zero_gradient() {
        let mut tape = Tape::new();
        let m = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let neg = tape.scale(m, -1.0);
        let r = tape.relu(neg);
        let s = tape.sum(r);
        let grads = tape.backward(s, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        assert_eq!(grads.get(m).unwrap(), &Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_backward_matches_hand_formula() {
        let a_val = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b_val = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 1.5]]);
        let mut tape = Tape::new();
        let a = tape.leaf(a_val.clone());
        let b = tape.leaf(b_val.clone());
        let c = tape.matmul(a, b).unwrap();
        let seed = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let grads = tape.backward(c, seed.clone()).unwrap();
        let da = seed.matmul(&b_val.transpose()).unwrap();
        let db = a_val.transpose().matmul(&seed).unwrap();
        assert!(grads.get(a).unwrap().max_abs_diff(&da) < 1e-14);
        assert!(grads.get(b).unwrap().max_abs_diff(&db) < 1e-14);
    }

    /// Central finite differences of `f` with respect to one leaf matrix.
    fn numeric_grad(
        build: &dyn Fn(&Matrix) -> f64,
        at: &Matrix,
        h: f64,
    ) -> Matrix {
        let mut grad = Matrix::zeros(at.rows(), at.cols());
        for idx in 0..at.as_slice().len() {
            let mut plus = at.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = at.clone();
            minus.as_mut_slice()[idx] -= h;
            grad.as_mut_slice()[idx] = (build(&plus) - build(&minus)) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn composite_pipeline_matches_finite_differences() {
        // relu(adj * (X * W)) -> batchnorm(batch) -> |pairs| -> sum
        let graph = Graph::build(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let adj = NormalizedAdjacency::for_step(&graph, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w0 = Matrix::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let gamma0 = Matrix::from_rows(&[vec![1.1, 0.9]]);
        let beta0 = Matrix::from_rows(&[vec![0.05, -0.2]]);
        let pairs = [(0usize, 2usize), (1, 3)];

        let run = |w: &Matrix| -> (f64, Option<(Matrix, Matrix, Matrix)>) {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.leaf(w.clone());
            let gi = tape.leaf(gamma0.clone());
            let bi = tape.leaf(beta0.clone());
            let xw = tape.matmul(xi, wi).unwrap();
            let prop = tape.spmm(&adj, xw).unwrap();
            let act = tape.relu(prop);
            let bn = tape.batchnorm_batch(act, gi, bi, 1e-5).unwrap();
            let diff = tape.pair_abs_diff(bn, &pairs).unwrap();
            let total = tape.sum(diff);
            let loss = tape.value(total).get(0, 0);
            let grads = tape.backward(total, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
            (
                loss,
                Some((
                    grads.get(wi).unwrap().clone(),
                    grads.get(gi).unwrap().clone(),
                    grads.get(bi).unwrap().clone(),
                )),
            )
        };

        let (_, analytic) = run(&w0);
        let (dw, dgamma, dbeta) = analytic.unwrap();
        let loss_of_w = |w: &Matrix| run(w).0;
        let dw_num = numeric_grad(&loss_of_w, &w0, 1e-6);
        assert!(
            dw.max_abs_diff(&dw_num) < 1e-6,
            "weight grads differ by {}",
            dw.max_abs_diff(&dw_num)
        );

        // gamma/beta via closures that rebuild with perturbed values
        let loss_of_gamma = |g: &Matrix| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w0.clone());
            let gi = tape.leaf(g.clone());
            let bi = tape.constant(beta0.clone());
            let xw = tape.matmul(xi, wi).unwrap();
            let prop = tape.spmm(&adj, xw).unwrap();
            let act = tape.relu(prop);
            let bn = tape.batchnorm_batch(act, gi, bi, 1e-5).unwrap();
            let diff = tape.pair_abs_diff(bn, &pairs).unwrap();
            let total = tape.sum(diff);
            tape.value(total).get(0, 0)
        };
        let dgamma_num = numeric_grad(&loss_of_gamma, &gamma0, 1e-6);
        assert!(dgamma.max_abs_diff(&dgamma_num) < 1e-6);

        let loss_of_beta = |b: &Matrix| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w0.clone());
            let gi = tape.constant(gamma0.clone());
            let bi = tape.leaf(b.clone());
            let xw = tape.matmul(xi, wi).unwrap();
            let prop = tape.spmm(&adj, xw).unwrap();
            let act = tape.relu(prop);
            let bn = tape.batchnorm_batch(act, gi, bi, 1e-5).unwrap();
            let diff = tape.pair_abs_diff(bn, &pairs).unwrap();
            let total = tape.sum(diff);
            tape.value(total).get(0, 0)
        };
        let dbeta_num = numeric_grad(&loss_of_beta, &beta0, 1e-6);
        assert!(dbeta.max_abs_diff(&dbeta_num) < 1e-6);
    }

    #[test]
    fn frozen_batchnorm_matches_finite_differences() {
        let mean = vec![0.3, -0.4];
        let var = vec![1.4, 0.6];
        let x0 = Matrix::from_rows(&[vec![0.9, -1.2], vec![0.1, 2.0], vec![-0.7, 0.4]]);
        let gamma = Matrix::from_rows(&[vec![1.2, 0.8]]);
        let beta = Matrix::from_rows(&[vec![-0.1, 0.3]]);
        let loss_of_x = |x: &Matrix| {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let gi = tape.constant(gamma.clone());
            let bi = tape.constant(beta.clone());
            let bn = tape.batchnorm_frozen(xi, gi, bi, &mean, &var, 1e-5).unwrap();
            let r = tape.relu(bn);
            let total = tape.sum(r);
            tape.value(total).get(0, 0)
        };
        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone());
        let gi = tape.leaf(gamma.clone());
        let bi = tape.leaf(beta.clone());
        let bn = tape.batchnorm_frozen(xi, gi, bi, &mean, &var, 1e-5).unwrap();
        let r = tape.relu(bn);
        let total = tape.sum(r);
        let grads = tape.backward(total, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        let dx_num = numeric_grad(&loss_of_x, &x0, 1e-6);
        assert!(grads.get(xi).unwrap().max_abs_diff(&dx_num) < 1e-7);
    }

    #[test]
    fn dropout_mask_is_reused_in_backward() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let m = tape.leaf(Matrix::from_vec(1, 1000, vec![1.0; 1000]));
        let d = tape.dropout(m, 0.5, &mut rng);
        let s = tape.sum(d);
        let grads = tape.backward(s, Matrix::from_vec(1, 1, vec![1.0])).unwrap();
        let forward = tape.value(d).clone();
        // Gradient of sum through the mask equals the mask itself.
        assert_eq!(grads.get(m).unwrap(), &forward);
    }

    #[test]
    fn dropout_survivors_are_unbiased() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let n = 1_000_000;
        let m = tape.constant(Matrix::from_vec(1, n, vec![1.0; n]));
        let d = tape.dropout(m, 0.5, &mut rng);
        let mean = tape.value(d).as_slice().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let m = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let d = tape.dropout(m, 0.0, &mut rng);
        assert_eq!(d, m);
    }

    #[test]
    fn pair_abs_diff_rejects_bad_indices() {
        let mut tape = Tape::new();
        let m = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.pair_abs_diff(m, &[(0, 5)]),
            Err(NumericError::IndexOutOfRange { .. })
        ));
    }
}
