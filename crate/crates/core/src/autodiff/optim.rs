use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> Default for AdamW<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.01)
    }
}

impl<T: Element> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.as_f64();
                let mn = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * g;
                let vn = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * g * g;
                *mi = T::of(mn);
                *vi = T::of(vn);
                let update = (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *w = T::of(w.as_f64() * decay - lr * update);
            }
        }
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        if self.first.len() != store.len() {
            return out;
        }
        for ((p, m), v) in store.iter().zip(&self.first).zip(&self.second) {
            let shape = p.value.shape();
            out.push((format!("adamw.m.{}", p.name), Tensor::new(shape.to_vec(), m.clone()).expect("shape")));
            out.push((format!("adamw.v.{}", p.name), Tensor::new(shape.to_vec(), v.clone()).expect("shape")));
        }
        out
    }

    pub fn restore(&mut self, store: &ParamStore<T>, step: u64, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup = |name: String, len: usize| -> Result<Vec<T>> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{name}`")))?;
            if t.len() != len {
                return Err(Error::Checkpoint(format!("optimizer tensor `{name}` has the wrong size")));
            }
            Ok(t.data().to_vec())
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in store.iter() {
            first.push(lookup(format!("adamw.m.{}", p.name), p.value.len())?);
            second.push(lookup(format!("adamw.v.{}", p.name), p.value.len())?);
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.iter_mut().next().unwrap().grad = vec![0.5, -2.0];
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut opt = AdamW::default();
        opt.step(&mut store, 0.1);
        assert!((store.value(id).item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }
}
