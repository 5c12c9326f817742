//! Dense tensors with an optional gradient buffer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, shape_err, Result};
use crate::real::Real;

/// Dense row-major tensor of rank at most 4. Activations use `N x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(shape_err!("rank {} exceeds 4", shape.len()));
        }
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; numel(shape)]).expect("rank checked by caller")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[], vec![value]).unwrap()
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape, data).expect("rank checked by caller")
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    /// He-normal initialization with the given fan-in.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        Self::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err!("gradient of {} values for tensor {:?}", g.len(), self.shape));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Copies samples `indices` along axis 0.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| invalid!("select_rows on a scalar"))?;
        let per = self.data.len().checked_div(n).unwrap_or(0);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= n {
                return Err(invalid!("row {i} out of range for {n} rows"));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(&shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| invalid!("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err!("stack of {:?} and {:?}", first.shape, t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn gradients_accumulate() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn select_and_stack() {
        let t = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32);
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        let st = Tensor::stack(&[s.clone(), s]).unwrap();
        assert_eq!(st.shape(), &[2, 2, 2]);
    }
}
