use super::Param;

/// Adam with bias correction and no weight decay. Moment accumulators live in
/// each [`Param`], so physically shrinking a layer shrinks its moments too.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let Param { value, grad, m, v } = p;
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> Param {
        Param::new(Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar(3.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..5 {
            adam.step([&mut p]);
        }
        assert_eq!(p.value.data()[0], 3.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.0);
        p.grad_mut()[0] = 1.0;
        let mut adam = AdamState::new(0.1);
        adam.step([&mut p]);
        assert!((p.value.data()[0] + 0.1).abs() < 1e-8);
    }

    /// Textbook Adam written out independently.
    fn reference_adam(x0: f64, grad: impl Fn(f64) -> f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(x);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        let grad = |x: f64| 2.0 * (x - 1.5);
        let expected = reference_adam(-2.0, grad, 10, 0.05);
        let mut p = scalar(-2.0);
        let mut adam = AdamState::new(0.05);
        for want in expected {
            p.zero_grad();
            p.grad_mut()[0] = grad(p.value.data()[0]);
            adam.step([&mut p]);
            assert!((p.value.data()[0] - want).abs() < 1e-14);
        }
    }
}
