use crate::autodiff::{ParamStore, Scalar};
use crate::error::{Result, TitError};

/// Adam with bias correction. Moments are kept in `f64` whatever the
/// parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments, one buffer per parameter in store order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`Adam::moments`] and [`Adam::steps`].
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(TitError::Format(
                "optimizer moments disagree in shape".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(TitError::Training(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.value.len() {
                return Err(TitError::Training(format!(
                    "optimizer state for {} has the wrong size",
                    p.name
                )));
            }
            let grads = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(grads).enumerate() {
                let g = g.as_f64();
                if !g.is_finite() {
                    return Err(TitError::NonFinite { op: "adam" });
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap())
            .unwrap();
        store.get_mut(id).grad = Tensor::from_f64(&[1, 2], &[3.0, -0.5]).unwrap();
        let mut opt = Adam::new(0.1, 1e-12);
        opt.step(&mut store).unwrap();
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", Tensor::from_f64(&[1, 1], &[5.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(0.1, 1e-8);
        for _ in 0..500 {
            let w = store.value(id).data()[0];
            store.get_mut(id).grad = Tensor::from_f64(&[1, 1], &[2.0 * (w - 2.0)]).unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!((store.value(id).data()[0] - 2.0).abs() < 1e-2);
    }
}
