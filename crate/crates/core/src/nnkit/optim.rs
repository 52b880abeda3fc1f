use super::{NnError, ParamTensor, Real};

/// SGD with momentum: `v = momentum * v + grad; p -= lr * v`, then clears grads.
///
/// Nothing is modified if any update would be non-finite.
pub fn sgd_step<T: Real>(params: &mut [&mut ParamTensor<T>], lr: T, momentum: T) -> Result<(), NnError> {
    if !(lr >= T::zero()) || !lr.is_finite() {
        return Err(NnError::Invalid(format!("learning rate must be >= 0, got {lr:?}")));
    }
    if !(momentum >= T::zero() && momentum < T::one()) {
        return Err(NnError::Invalid(format!("momentum must be in [0, 1), got {momentum:?}")));
    }
    for p in params.iter() {
        let bad = p
            .values
            .iter()
            .zip(&p.grad)
            .zip(&p.velocity)
            .any(|((&w, &g), &v)| !(w - lr * (momentum * v + g)).is_finite());
        if bad {
            return Err(NnError::NonFinite(p.name.clone()));
        }
    }
    for p in params.iter_mut() {
        let ParamTensor {
            values, grad, velocity, ..
        } = &mut **p;
        for ((w, g), v) in values.iter_mut().zip(grad.iter_mut()).zip(velocity.iter_mut()) {
            *v = momentum * *v + *g;
            *w = *w - lr * *v;
            *g = T::zero();
        }
    }
    Ok(())
}

/// Adam with bias correction. Moment buffers live here, one pair per
/// parameter in the order passed to `step`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut ParamTensor<T>]) -> Result<(), NnError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(NnError::Invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        if self.moments.len() != params.len() || self.moments.iter().zip(params.iter()).any(|(m, p)| m.0.len() != p.len()) {
            return Err(NnError::Invalid("parameter set changed between optimizer steps".into()));
        }
        if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(NnError::NonFinite(p.name.clone()));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let ParamTensor { values, grad, .. } = &mut **p;
            for i in 0..values.len() {
                let g = grad[i].f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                values[i] = T::of(values[i].f64() - upd);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

pub fn zero_grads<T: Real>(params: &mut [&mut ParamTensor<T>]) {
    params.iter_mut().for_each(|p| p.zero_grad());
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut [&mut ParamTensor<T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = *g * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>, grad: Vec<f64>) -> ParamTensor<f64> {
        let mut p = ParamTensor::new("p", vec![values.len()], values);
        p.grad = grad;
        p
    }

    #[test]
    fn zero_lr_leaves_values() {
        let mut p = param(vec![1.0, -2.0], vec![0.3, 0.4]);
        sgd_step(&mut [&mut p], 0.0, 0.9).unwrap();
        assert_eq!(p.values, vec![1.0, -2.0]);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn plain_step_is_exact() {
        let mut p = param(vec![1.0, -2.0], vec![0.5, -0.25]);
        sgd_step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert_eq!(p.values, vec![1.0 - 0.1 * 0.5, -2.0 + 0.1 * 0.25]);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(p) = 0.5 * sum(a_i * p_i^2)
        let a = [1.0, 4.0, 0.25];
        let mut p = param(vec![3.0, -2.0, 5.0], vec![0.0; 3]);
        let f = |p: &ParamTensor<f64>| 0.5 * p.values.iter().zip(a).map(|(v, a)| a * v * v).sum::<f64>();
        let mut prev = f(&p);
        for _ in 0..100 {
            for i in 0..3 {
                p.grad[i] = a[i] * p.values[i];
            }
            sgd_step(&mut [&mut p], 0.05, 0.5).unwrap();
            let cur = f(&p);
            assert!(cur < prev, "{cur} >= {prev}");
            prev = cur;
        }
    }

    #[test]
    fn non_finite_update_names_parameter() {
        let mut p = param(vec![1.0], vec![f64::NAN]);
        p.name = "encoder.weight".into();
        match sgd_step(&mut [&mut p], 0.1, 0.0) {
            Err(NnError::NonFinite(name)) => assert_eq!(name, "encoder.weight"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.values, vec![1.0]);
    }

    #[test]
    fn momentum_out_of_range() {
        let mut p = param(vec![1.0], vec![1.0]);
        assert!(sgd_step(&mut [&mut p], 0.1, 1.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param(vec![1.0, -2.0], vec![0.5, -3.0]);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.values[0] - 0.99).abs() < 1e-9);
        assert!((p.values[1] + 1.99).abs() < 1e-9);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_descends_bowl() {
        let a = [1.0, 4.0, 0.25];
        let mut p = param(vec![3.0, -2.0, 5.0], vec![0.0; 3]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            for i in 0..3 {
                p.grad[i] = a[i] * p.values[i];
            }
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!(p.values.iter().all(|v| v.abs() < 0.1), "{:?}", p.values);
    }

    #[test]
    fn clip_scales_to_norm() {
        let mut p = param(vec![0.0, 0.0], vec![3.0, 4.0]);
        let n = clip_grad_norm(&mut [&mut p], 1.0);
        assert_eq!(n, 5.0);
        assert!((p.grad[0] - 0.6).abs() < 1e-12 && (p.grad[1] - 0.8).abs() < 1e-12);
    }
}
