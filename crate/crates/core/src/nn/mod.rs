//! A small deterministic network engine: dense, conv2d, ReLU, max-pool,
//! flatten and noise-gate layers with hand-written backward passes.

mod adam;
pub mod checkpoint;
mod layers;
mod network;

pub use adam::AdamState;
pub use layers::{Conv2d, Dense, Flatten, Layer, MaxPool2d, Relu};
pub use network::{softmax_cross_entropy, NoiseDraws, Network, RemovalDescriptor, StepLoss, StructureId};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gates multiply by reparameterised samples.
    Train,
    /// Gates multiply by E_q[θ].
    Eval,
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Keeps the slices along `axis` whose flag is set. Each flag covers
    /// `group` consecutive entries of that axis, so `keep.len() * group`
    /// must equal the axis length.
    pub(crate) fn retain_grouped(&mut self, axis: usize, group: usize, keep: &[bool]) {
        let shape = self.value.shape().to_vec();
        assert_eq!(keep.len() * group, shape[axis], "retain: flag count does not cover axis");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product::<usize>() * group;
        let kept = keep.iter().filter(|&&k| k).count();
        let filter = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(outer * kept * inner);
            for o in 0..outer {
                for (k, &flag) in keep.iter().enumerate() {
                    if flag {
                        let start = (o * keep.len() + k) * inner;
                        out.extend_from_slice(&src[start..start + inner]);
                    }
                }
            }
            out
        };
        let data = filter(self.value.data());
        self.grad = filter(&self.grad);
        self.m = filter(&self.m);
        self.v = filter(&self.v);
        let mut new_shape = shape;
        new_shape[axis] = kept * group;
        self.value = Tensor::new(new_shape, data).expect("retain keeps shape consistent");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retain_grouped_drops_blocks() {
        let mut p = Param::new(Tensor::new(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap());
        p.retain_grouped(1, 2, &[true, false, true]);
        assert_eq!(p.value.shape(), &[2, 4]);
        assert_eq!(p.value.data(), &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0, 10.0, 11.0]);
        assert_eq!(p.grad().len(), 8);
        p.retain_grouped(0, 1, &[false, true]);
        assert_eq!(p.value.data(), &[6.0, 7.0, 10.0, 11.0]);
    }
}
