//! Named parameter storage with per-parameter Adam state.

use std::collections::HashMap;

use super::matrix::{Matrix, NumericError};

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Adam hyperparameters. Defaults: lr 0.001, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
    step: u64,
}

/// Named parameter matrices plus their optimizer moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let (rows, cols) = value.shape();
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step: 0,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn step(&self, id: ParamId) -> u64 {
        self.entries[id.0].step
    }
}

/// One bias-corrected Adam update for every `(parameter, gradient)` pair.
pub fn adam_step(
    store: &mut ParamStore,
    gradients: &[(ParamId, Matrix)],
    hyper: AdamHyper,
) -> Result<(), NumericError> {
    for (id, grad) in gradients {
        let entry = &mut store.entries[id.0];
        if entry.value.shape() != grad.shape() {
            return Err(NumericError::DimensionMismatch {
                op: "adam_step",
                lhs_rows: entry.value.rows(),
                lhs_cols: entry.value.cols(),
                rhs_rows: grad.rows(),
                rhs_cols: grad.cols(),
            });
        }
        entry.step += 1;
        let t = entry.step as i32;
        let bias1 = 1.0 - hyper.beta1.powi(t);
        let bias2 = 1.0 - hyper.beta2.powi(t);
        let value = entry.value.as_mut_slice();
        let m = entry.first_moment.as_mut_slice();
        let v = entry.second_moment.as_mut_slice();
        for ((w, g), (mi, vi)) in value
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * g;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * g * g;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.register("w", Matrix::from_rows(&[vec![1.0, -2.0]]));
        let before = store.value(id).clone();
        adam_step(&mut store, &[(id, Matrix::zeros(1, 2))], AdamHyper::default()).unwrap();
        assert_eq!(*store.value(id), before);
        assert_eq!(store.step(id), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.register("w", Matrix::from_rows(&[vec![1.0]]));
        let hyper = AdamHyper::with_learning_rate(0.05);
        adam_step(&mut store, &[(id, Matrix::from_rows(&[vec![3.0]]))], hyper).unwrap();
        // At t=1 bias correction makes the update lr * g / (|g| + eps') ~ lr.
        let moved = 1.0 - store.value(id).get(0, 0);
        assert!((moved - 0.05).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let mut store = ParamStore::new();
        let id = store.register("w", Matrix::from_rows(&[vec![1.0]]));
        let hyper = AdamHyper {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        for _ in 0..2 {
            adam_step(&mut store, &[(id, Matrix::from_rows(&[vec![1.0]]))], hyper).unwrap();
        }
        // Independent recursion of the update rule.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * 1.0;
            v = 0.999 * v + 0.001 * 1.0;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((store.value(id).get(0, 0) - w).abs() < 1e-10);
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_results() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.register("w", Matrix::from_rows(&[vec![0.3, -0.7, 2.0]]));
            for i in 0..10 {
                let g = Matrix::from_rows(&[vec![0.1 * i as f64, -0.2, 0.05]]);
                adam_step(&mut store, &[(id, g)], AdamHyper::default()).unwrap();
            }
            store.value(id).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gradient_shape_mismatch_errors() {
        let mut store = ParamStore::new();
        let id = store.register("w", Matrix::zeros(2, 2));
        let err = adam_step(&mut store, &[(id, Matrix::zeros(1, 2))], AdamHyper::default());
        assert!(matches!(err, Err(NumericError::DimensionMismatch { .. })));
    }
}
