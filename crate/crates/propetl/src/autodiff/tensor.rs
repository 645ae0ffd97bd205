use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major f32 tensor. Gradients live in a separate optional buffer
/// of the same length; parameter tensors set `requires_grad` and receive
/// their gradient back from the graph after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub fn numel_of(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::invalid("tensor", "shape product overflows usize"))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = numel_of(&shape)?;
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape).expect("shape overflow");
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let n = numel_of(&shape).expect("shape overflow");
        Tensor { shape, data: vec![v; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// I.i.d. Normal(0, std^2) entries.
    pub fn normal(shape: Vec<usize>, std: f32, rng: &mut impl Rng) -> Self {
        let n = numel_of(&shape).expect("shape overflow");
        let dist = Normal::new(0.0f32, std).expect("std must be finite");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// I.i.d. Uniform[lo, hi) entries.
    pub fn uniform(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let n = numel_of(&shape).expect("shape overflow");
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, b: bool) {
        self.requires_grad = b;
        if !b {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<f32>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise product of same-shape tensors; used to materialize masked
    /// sub-networks outside a graph.
    pub fn mul_elementwise(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mul_elementwise",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::normal(vec![4, 4], 0.02, &mut r1);
        let b = Tensor::normal(vec![4, 4], 0.02, &mut r2);
        assert_eq!(a.data(), b.data());
        let c = Tensor::uniform(vec![8], -0.1, 0.1, &mut r1);
        assert!(c.data().iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn elementwise_mul_checks_shapes() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let out = a.mul_elementwise(&m).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 3.0, 0.0]);
        let bad = Tensor::zeros(vec![4]);
        assert!(a.mul_elementwise(&bad).is_err());
    }
}
