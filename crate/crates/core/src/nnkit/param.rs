use super::Real;

/// A named trainable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "parameter values must match shape");
        Self {
            name: name.into(),
            shape,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
            values,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Copy with values converted to another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamTensor<U> {
        ParamTensor::new(
            self.name.clone(),
            self.shape.clone(),
            self.values.iter().map(|v| U::of(v.f64())).collect(),
        )
    }
}
