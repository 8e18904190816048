//! Dense row-major tensors with an optional gradient buffer.

use crate::error::{Error, Result};
use crate::rng::{next_gaussian, SeededRng};
use crate::scalar::Scalar;

/// Dense N-dimensional array, stored contiguously in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, buffer holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Gaussian-filled tensor with the given mean and standard deviation.
    pub fn randn(shape: Vec<usize>, mean: T, std: T, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| mean + std * T::from_f64(next_gaussian(rng)))
            .collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Uniform draw in [lo, hi), sampled in f64 for a dtype-independent stream.
    pub fn rand_uniform(shape: Vec<usize>, lo: T, hi: T, rng: &mut SeededRng) -> Self {
        use rand::Rng;
        let numel: usize = shape.iter().product();
        let span = hi - lo;
        let data = (0..numel)
            .map(|_| lo + span * T::from_f64(rng.gen::<f64>()))
            .collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) -> &mut Self {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
        self
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient buffer length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, grad: &[T]) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient buffer length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    /// NaN/Inf is an error condition, never a silent state.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::numeric(format!("non-finite value in {context}")));
            }
        }
        Ok(())
    }

    /// Cast between scalar types (f64 round trip).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64x())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::<f32>::from_vec(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.check_finite("test").is_err());
    }

    #[test]
    fn randn_deterministic_per_seed() {
        let mut r1 = rng_from_seed(42);
        let mut r2 = rng_from_seed(42);
        let a = Tensor::<f32>::randn(vec![16], 0.0, 1.0, &mut r1);
        let b = Tensor::<f32>::randn(vec![16], 0.0, 1.0, &mut r2);
        assert_eq!(a.data(), b.data());
    }
}
