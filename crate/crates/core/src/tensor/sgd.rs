use super::params::ParamSet;
use super::Real;
use crate::error::{Error, Result};

/// Momentum SGD with L2 weight decay, Caffe update order:
/// `v <- momentum * v - lr * (g + weight_decay * w)`, then `w <- w + v`.
#[derive(Clone, Debug)]
pub struct SgdState<T: Real = f32> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= T::zero()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update to every parameter using the gradient stored on
    /// it, then clears the gradients. Fails without touching anything if a
    /// parameter has no gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.tensors()).any(|(v, t)| v.len() != t.len())
        {
            return Err(Error::shape("optimizer state does not match the parameter set"));
        }
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for ((_, t), vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = t.take_grad().expect("checked above");
            for ((w, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v - lr * (g + wd * *w);
                *w = *w + *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64, g: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let mut t = Tensor::scalar(w);
        t.set_grad(vec![g]).unwrap();
        p.push("w", t).unwrap();
        p
    }

    fn value(p: &ParamSet<f64>) -> f64 {
        p.get("w").unwrap().data()[0]
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = single(1.0, 2.0);
        let mut sgd = SgdState::new(0.1, 0.0, 0.0).unwrap();
        sgd.step(&mut p).unwrap();
        assert!((value(&p) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        let mut p = single(1.0, 1.0);
        let mut sgd = SgdState::new(0.1, 0.9, 0.0).unwrap();
        sgd.step(&mut p).unwrap();
        assert!((value(&p) - 0.9).abs() < 1e-15);
        p.get_mut("w").unwrap().set_grad(vec![1.0]).unwrap();
        sgd.step(&mut p).unwrap();
        assert!((sgd.velocity()[0][0] + 0.19).abs() < 1e-15);
        assert!((value(&p) - 0.71).abs() < 1e-15);
    }

    #[test]
    fn decay_only() {
        let mut p = single(1.0, 0.0);
        let mut sgd = SgdState::new(0.1, 0.0, 0.0005).unwrap();
        sgd.step(&mut p).unwrap();
        assert!((value(&p) - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = single(1.0, 0.0);
        p.push("conv1.weight", Tensor::scalar(0.5)).unwrap();
        let mut sgd = SgdState::new(0.1, 0.9, 0.0).unwrap();
        let err = sgd.step(&mut p).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
        assert_eq!(value(&p), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::<f32>::new(0.0, 0.9, 0.0).is_err());
        assert!(SgdState::<f32>::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdState::<f32>::new(0.1, 0.5, -1.0).is_err());
    }
}
