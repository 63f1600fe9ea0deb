//! Named parameter storage, graph binding, and the Adam update.

use std::collections::BTreeMap;

use super::{Graph, NumericsError, TensorRef};

/// A trainable array with its latest collected gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Parameter {
            shape,
            values,
            grad: None,
        }
    }
}

/// Parameters keyed by name. BTreeMap keeps every traversal (updates,
/// checkpoints) in a fixed order, which the determinism contract relies on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        self.params.insert(name.to_string(), Parameter::new(shape, values));
    }

    pub fn get(&self, name: &str) -> &Parameter {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Drop all collected gradients (the post-step reset).
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Add a gradient contribution for one parameter.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) {
        let p = self.get_mut(name);
        debug_assert_eq!(p.values.len(), grad.len());
        match p.grad.as_mut() {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => p.grad = Some(grad.to_vec()),
        }
    }
}

/// Ties parameters leased into one graph back to their names, so gradients
/// can be collected after backward. A forward pass binds each parameter it
/// uses exactly once and keeps the returned handles.
#[derive(Debug, Default)]
pub struct Binding {
    pairs: Vec<(String, TensorRef)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter's current values into the graph as a leaf that
    /// tracks gradients.
    pub fn bind(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> TensorRef {
        let p = params.get(name);
        let t = g.leaf(&p.shape, p.values.clone(), true);
        self.pairs.push((name.to_string(), t));
        t
    }

    /// Handle bound for `name`, for tests and diagnostics.
    pub fn get(&self, name: &str) -> TensorRef {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, t)| t)
            .unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    /// Copy gradients accumulated in the graph back onto the parameters.
    pub fn collect_grads(&self, g: &Graph, params: &mut ParamSet) {
        for (name, t) in &self.pairs {
            if let Some(grad) = g.grad(*t) {
                params.accumulate_grad(name, grad);
            }
        }
    }
}

/// Adam moments plus hyperparameters. Moment arrays are created lazily on
/// the first step that touches a parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update over every parameter in the set.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<(), NumericsError> {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| NumericsError::MissingGrad(name.clone()))?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; p.values.len()], vec![0.0; p.values.len()]));
        debug_assert_eq!(m.len(), p.values.len());
        for i in 0..p.values.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.values[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", vec![3], vec![1.0, -2.0, 0.5]);
        p
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = one_param();
        params.accumulate_grad("w", &[0.0, 0.0, 0.0]);
        let before = params.get("w").values.clone();
        let mut state = OptimizerState::new(0.1);
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(params.get("w").values, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_grad_moves_param_against_its_sign() {
        let mut params = one_param();
        let mut state = OptimizerState::new(0.01);
        let before = params.get("w").values.clone();
        for _ in 0..50 {
            params.zero_grad();
            params.accumulate_grad("w", &[2.0, -3.0, 1.0]);
            adam_step(&mut params, &mut state).unwrap();
        }
        let after = &params.get("w").values;
        assert!(after[0] < before[0]);
        assert!(after[1] > before[1]);
        assert!(after[2] < before[2]);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut params = one_param();
        params.accumulate_grad("w", &[1.0, 1.0, 1.0]);
        let mut state = OptimizerState::new(0.01);
        assert_eq!(state.step, 0);
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(state.step, 1);
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(state.step, 2);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut params = one_param();
        let mut state = OptimizerState::new(0.01);
        let err = adam_step(&mut params, &mut state).unwrap_err();
        assert!(matches!(err, NumericsError::MissingGrad(ref n) if n == "w"));
    }
}
