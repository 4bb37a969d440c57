//! Dense f64 tensors, row-major. Just enough structure for parameters,
//! gradients and serialization; hot loops index the flat data directly.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![0.0; dims.iter().product()] }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![value; dims.iter().product()] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dims.iter().product::<usize>());
        Tensor { dims: dims.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zeros_like(&self) -> Self {
        Tensor { dims: self.dims.clone(), data: vec![0.0; self.data.len()] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_counts() {
        let t = Tensor::zeros(&[3, 4]);
        assert_eq!(t.numel(), 12);
        assert!(t.data.iter().all(|&v| v == 0.0));
        let u = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(u.zeros_like().dims, vec![2, 2]);
        assert_eq!(Tensor::filled(&[2], 1.0).data, vec![1.0, 1.0]);
    }
}
