//! Trainable parameters and the Adam optimizer.

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub adam_m: Tensor<F>,
    pub adam_v: Tensor<F>,
    pub step_count: u64,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let zeros = value.map(|_| F::zero());
        Parameter {
            name: name.into(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }
}

/// Owns every parameter of a model. Graph nodes refer to entries by `ParamId`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform `rows x cols` matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| F::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("positive dims"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, F::one()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Converts every parameter (values, gradients and moments) to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    adam_m: p.adam_m.cast(),
                    adam_v: p.adam_v.cast(),
                    step_count: p.step_count,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of every parameter in `ids`.
    pub fn step<F: Scalar>(&self, store: &mut ParamStore<F>, ids: &[ParamId]) {
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let eps = F::of(self.eps);
        for &id in ids {
            let p = store.get_mut(id);
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = F::of(1.0 - self.beta1.powi(t));
            let c2 = F::of(1.0 - self.beta2.powi(t));
            let lr = F::of(self.lr);
            let Parameter {
                value,
                grad,
                adam_m,
                adam_v,
                ..
            } = p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(adam_m.data_mut())
                .zip(adam_v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn step_all<F: Scalar>(&self, store: &mut ParamStore<F>) {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step(store, &ids);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, g: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        s.get_mut(id).grad = Tensor::scalar(g);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 0.01;
        for g in [3.0, -0.002] {
            let (mut s, id) = scalar_store(1.0, g);
            Adam::new(lr).step_all(&mut s);
            let moved = s.value(id).item() - 1.0;
            assert!((moved + lr * f64::signum(g)).abs() < lr * 1e-3, "{moved}");
        }
    }

    #[test]
    fn zero_grad_leaves_value_and_counts_step() {
        let (mut s, id) = scalar_store(0.25, 0.0);
        Adam::new(0.1).step_all(&mut s);
        assert_eq!(s.value(id).item(), 0.25);
        assert_eq!(s.get(id).step_count, 1);
    }

    #[test]
    fn two_constant_steps() {
        // By hand: m_hat = v_hat = 1 on both steps, so each step moves lr/(1+eps).
        let (mut s, id) = scalar_store(0.0, 1.0);
        let adam = Adam::new(0.1);
        adam.step_all(&mut s);
        adam.step_all(&mut s);
        assert!((s.value(id).item() + 0.2).abs() < 1e-6);
        assert_eq!(s.get(id).step_count, 2);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (mut s, id) = scalar_store(0.3, -0.7);
            let adam = Adam::new(0.05);
            for _ in 0..5 {
                adam.step_all(&mut s);
            }
            s.value(id).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
