//! Per-feature batch normalization with running statistics.

use super::matrix::{Matrix, NumericError};

/// Learnable scale/shift plus running statistics for one normalized width.
///
/// Variances are population variances (divide by N). Running statistics are
/// blended as `run = (1 - momentum) * run + momentum * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (run, batch) in self.running_mean.iter_mut().zip(batch_mean) {
            *run = (1.0 - m) * *run + m * *batch;
        }
        for (run, batch) in self.running_var.iter_mut().zip(batch_var) {
            *run = (1.0 - m) * *run + m * *batch;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Column means and population variances.
pub(crate) fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = m.shape();
    let n = rows.max(1) as f64;
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, columnwise.
pub(crate) fn normalize_with(
    m: &Matrix,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Matrix {
    let (rows, cols) = m.shape();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let src = m.row(r);
        let dst = out.row_mut(r);
        for c in 0..cols {
            dst[c] = gamma[c] * (src[c] - mean[c]) * inv_std[c] + beta[c];
        }
    }
    out
}

/// Normalizes a batch of rows.
///
/// Train mode normalizes by the batch statistics and folds them into the
/// running statistics; infer mode uses the running statistics only and is
/// deterministic.
pub fn batchnorm_forward(
    m: &Matrix,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<Matrix, NumericError> {
    if m.cols() != state.width() {
        return Err(NumericError::DimensionMismatch {
            op: "batchnorm",
            lhs_rows: m.rows(),
            lhs_cols: m.cols(),
            rhs_rows: 1,
            rhs_cols: state.width(),
        });
    }
    match mode {
        BnMode::Train => {
            let (mean, var) = column_stats(m);
            let out = normalize_with(m, &mean, &var, &state.gamma, &state.beta, state.eps);
            state.update_running(&mean, &var);
            Ok(out)
        }
        BnMode::Infer => Ok(normalize_with(
            m,
            &state.running_mean,
            &state.running_var,
            &state.gamma,
            &state.beta,
            state.eps,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_column_maps_near_zero() {
        let m = Matrix::from_rows(&[vec![5.0], vec![5.0], vec![5.0]]);
        let mut state = BatchNormState::new(1);
        let out = batchnorm_forward(&m, &mut state, BnMode::Train).unwrap();
        for r in 0..3 {
            assert!(out.get(r, 0).abs() < 1e-9);
        }
    }

    #[test]
    fn train_mode_standardizes_columns() {
        let m = Matrix::from_rows(&[
            vec![1.0, 10.0],
            vec![2.0, 20.0],
            vec![3.0, 35.0],
            vec![4.0, 41.0],
        ]);
        let mut state = BatchNormState::new(2);
        let out = batchnorm_forward(&m, &mut state, BnMode::Train).unwrap();
        let (mean, var) = column_stats(&out);
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-6, "column {c} mean {}", mean[c]);
            assert!((var[c] - 1.0).abs() < 1e-4, "column {c} var {}", var[c]);
        }
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut state = BatchNormState::new(2);
        state.running_mean = vec![0.2, -0.1];
        state.running_var = vec![1.5, 0.7];
        let a = batchnorm_forward(&m, &mut state.clone(), BnMode::Infer).unwrap();
        let b = batchnorm_forward(&m, &mut state, BnMode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let m = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        let mut state = BatchNormState::new(1);
        batchnorm_forward(&m, &mut state, BnMode::Train).unwrap();
        // batch mean 1, batch var 1; run = 0.9*init + 0.1*batch
        assert!((state.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_errors() {
        let m = Matrix::zeros(2, 3);
        let mut state = BatchNormState::new(2);
        assert!(matches!(
            batchnorm_forward(&m, &mut state, BnMode::Infer),
            Err(NumericError::DimensionMismatch { .. })
        ));
    }
}
