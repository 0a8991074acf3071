use crate::error::{Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
///
/// Parameters carry `requires_grad = true` while they are trainable; the
/// optimizer skips any tensor with the flag cleared, which is how branches
/// are frozen between training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                "shape",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                "values",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape(
                "set_grad",
                "grad",
                format!("expected {} entries, got {}", self.values.len(), grad.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.values.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                "shape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the shape and the raw bit patterns of the values.
    /// Equal checksums across a training stage are how freezing is verified.
    pub fn checksum(&self) -> u64 {
        let mut hash = Fnv1a::new();
        for &d in &self.shape {
            hash.write(&(d as u64).to_le_bytes());
        }
        for v in &self.values {
            hash.write(&v.to_bits().to_le_bytes());
        }
        hash.finish()
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let mut values = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    "item",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            values.extend_from_slice(&t.values);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, values)
    }

    /// Slice `index` along the leading axis.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        if self.ndim() < 2 || index >= self.shape[0] {
            return Err(Error::shape(
                "select",
                "axis 0",
                format!("index {index} out of {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(
            self.shape[1..].to_vec(),
            self.values[index * inner..(index + 1) * inner].to_vec(),
        )
    }
}

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_must_match_length() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn checksum_sees_sign_of_zero() {
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn stack_and_select_round_trip() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.select(0).unwrap(), a);
    }
}
